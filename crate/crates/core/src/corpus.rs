//! Utterances, chapters and context windows.
//!
//! A [`Corpus`] is immutable once built: utterances are sorted by
//! `(chapter_id, order_index)` and validated for consistent feature widths
//! and unique positions.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featbin;
use crate::featext::{toy_bucket, TOY_TEXT_VOCAB};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub chapter_id: String,
    pub order_index: usize,
    pub text: String,
    /// `[n_frames x feat_dim]` stand-in for pretrained speech features.
    pub speech_frames: Tensor,
    /// `[n_frames x n_mels]`.
    pub mel: Tensor,
    pub style_label: Option<String>,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.speech_frames.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    feat_dim: usize,
    n_mels: usize,
    label_coverage: f64,
    by_id: HashMap<String, usize>,
}

/// Neighbouring sentences of one utterance, never crossing its chapter.
#[derive(Clone, Debug)]
pub struct ContextWindow<'a> {
    pub previous: Vec<&'a Utterance>,
    pub current: &'a Utterance,
    pub next: Vec<&'a Utterance>,
}

impl Corpus {
    pub fn new(mut utterances: Vec<Utterance>) -> Result<Self> {
        utterances.sort_by(|a, b| {
            (a.chapter_id.as_str(), a.order_index).cmp(&(b.chapter_id.as_str(), b.order_index))
        });
        let feat_dim = utterances.first().map_or(0, |u| u.speech_frames.cols());
        let n_mels = utterances.first().map_or(0, |u| u.mel.cols());
        let mut positions = BTreeSet::new();
        let mut by_id = HashMap::new();
        for (i, u) in utterances.iter().enumerate() {
            if u.text.trim().is_empty() {
                return Err(Error::Validation(format!("utterance {} has empty text", u.id)));
            }
            if u.speech_frames.shape().len() != 2 || u.n_frames() == 0 {
                return Err(Error::Shape(format!("utterance {} has no frames", u.id)));
            }
            if u.speech_frames.cols() != feat_dim {
                return Err(Error::Shape(format!(
                    "utterance {} has feat_dim {}, corpus uses {feat_dim}",
                    u.id,
                    u.speech_frames.cols()
                )));
            }
            if u.mel.shape().len() != 2 || u.mel.cols() != n_mels || u.mel.rows() != u.n_frames() {
                return Err(Error::Shape(format!(
                    "utterance {} mel is {:?}, expected [{} x {n_mels}]",
                    u.id,
                    u.mel.shape(),
                    u.n_frames()
                )));
            }
            if !positions.insert((u.chapter_id.clone(), u.order_index)) {
                return Err(Error::Integrity(format!(
                    "duplicate position ({}, {})",
                    u.chapter_id, u.order_index
                )));
            }
            if by_id.insert(u.id.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate id {}", u.id)));
            }
        }
        let labeled = utterances.iter().filter(|u| u.style_label.is_some()).count();
        let label_coverage = if utterances.is_empty() {
            0.0
        } else {
            labeled as f64 / utterances.len() as f64
        };
        Ok(Self {
            utterances,
            feat_dim,
            n_mels,
            label_coverage,
            by_id,
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn label_coverage(&self) -> f64 {
        self.label_coverage
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::Lookup(id.to_string()))
    }

    pub fn get(&self, id: &str) -> Result<&Utterance> {
        Ok(&self.utterances[self.index_of(id)?])
    }

    pub fn chapter_ids(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for u in &self.utterances {
            if out.last() != Some(&u.chapter_id.as_str()) {
                out.push(&u.chapter_id);
            }
        }
        out
    }

    /// Utterances of one chapter in increasing `order_index`.
    pub fn chapter<'a>(&'a self, chapter_id: &'a str) -> impl Iterator<Item = &'a Utterance> + 'a {
        self.utterances
            .iter()
            .filter(move |u| u.chapter_id == chapter_id)
    }

    /// Up to `w` neighbours on each side within the same chapter.
    pub fn window(&self, id: &str, w: usize) -> Result<ContextWindow<'_>> {
        let i = self.index_of(id)?;
        Ok(self.window_at(i, w))
    }

    pub fn window_at(&self, i: usize, w: usize) -> ContextWindow<'_> {
        let cur = &self.utterances[i];
        let same = |j: usize| self.utterances[j].chapter_id == cur.chapter_id;
        let mut start = i;
        while start > 0 && i - start < w && same(start - 1) {
            start -= 1;
        }
        let mut end = i;
        while end + 1 < self.utterances.len() && end - i < w && same(end + 1) {
            end += 1;
        }
        ContextWindow {
            previous: self.utterances[start..i].iter().collect(),
            current: cur,
            next: self.utterances[i + 1..=end].iter().collect(),
        }
    }

    /// A corpus of the utterances at `indices` (positions keep their
    /// original order indices).
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        let utts = indices.iter().map(|&i| self.utterances[i].clone()).collect();
        Corpus::new(utts).expect("subset of a valid corpus is valid")
    }

    /// Splits indices into `(train, held_out)`: within each chapter every
    /// `every`-th utterance (positions `every-1, 2*every-1, ...`) is held out.
    pub fn holdout_split(&self, every: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        let mut pos_in_chapter = 0;
        for (i, u) in self.utterances.iter().enumerate() {
            if i > 0 && self.utterances[i - 1].chapter_id != u.chapter_id {
                pos_in_chapter = 0;
            }
            if every > 1 && pos_in_chapter % every == every - 1 {
                held.push(i);
            } else {
                train.push(i);
            }
            pos_in_chapter += 1;
        }
        (train, held)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    chapter_id: String,
    order_index: usize,
    text: String,
    frames_path: String,
    mel_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    style_label: Option<String>,
}

/// Reads a JSON-lines manifest; feature paths resolve relative to the
/// manifest's directory. Blank lines are ignored.
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut utts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line).map_err(|err| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: err.to_string(),
        })?;
        let speech_frames = featbin::read(&base.join(&e.frames_path))?;
        let mel = featbin::read(&base.join(&e.mel_path))?;
        utts.push(Utterance {
            id: e.id,
            chapter_id: e.chapter_id,
            order_index: e.order_index,
            text: e.text,
            speech_frames,
            mel,
            style_label: e.style_label,
        });
    }
    Corpus::new(utts)
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `manifest_path` plus one frames and one mel file per utterance
/// under `features/` next to it.
pub fn save_manifest(corpus: &Corpus, manifest_path: &Path) -> Result<()> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(base).map_err(|e| Error::io(base, e))?;
    let mut out = Vec::new();
    for u in corpus.utterances() {
        let stem = file_stem(&u.id);
        let frames_path = format!("features/{stem}.frames.bin");
        let mel_path = format!("features/{stem}.mel.bin");
        featbin::write(&base.join(&frames_path), &u.speech_frames)?;
        featbin::write(&base.join(&mel_path), &u.mel)?;
        let e = ManifestEntry {
            id: u.id.clone(),
            chapter_id: u.chapter_id.clone(),
            order_index: u.order_index,
            text: u.text.clone(),
            frames_path,
            mel_path,
            style_label: u.style_label.clone(),
        };
        serde_json::to_writer(&mut out, &e)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    f.write_all(&out).map_err(|e| Error::io(manifest_path, e))
}

/// Knobs of the synthetic audiobook generator.
///
/// Frames split into a content half and a style half. The content half is
/// a per-word-class pattern (plus, when `context_carry > 0`, a pattern of the
/// previous sentence's style); the style half is a fixed projection of the
/// utterance latent `style mean + chapter drift + nuance words + jitter`.
/// Every factor except the jitter is spelled out in the text through
/// dedicated words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_chapters: usize,
    pub utts_per_chapter: usize,
    pub n_styles: usize,
    pub seed: u64,
    pub feat_dim: usize,
    pub n_mels: usize,
    pub latent_dim: usize,
    pub label_fraction: f64,
    pub frames_per_word: usize,
    pub word_classes: usize,
    pub content_words: usize,
    pub nuance_words: usize,
    pub style_words_per_style: usize,
    pub dominant_style_prob: f64,
    pub chapter_drift: f32,
    pub nuance_scale: f32,
    pub jitter: f32,
    pub frame_noise: f32,
    pub style_gain: f32,
    pub context_carry: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_chapters: 4,
            utts_per_chapter: 25,
            n_styles: 4,
            seed: 7,
            feat_dim: 32,
            n_mels: 20,
            latent_dim: 8,
            label_fraction: 0.6,
            frames_per_word: 2,
            word_classes: 8,
            content_words: 12,
            nuance_words: 16,
            style_words_per_style: 3,
            dominant_style_prob: 0.5,
            chapter_drift: 0.5,
            nuance_scale: 0.35,
            jitter: 0.05,
            frame_noise: 0.0,
            style_gain: 1.0,
            context_carry: 0.0,
        }
    }
}

/// Default synthetic corpus with `label_fraction` 0.6.
pub fn make_synthetic_corpus(
    n_chapters: usize,
    utts_per_chapter: usize,
    n_styles: usize,
    seed: u64,
) -> Corpus {
    SyntheticSpec {
        n_chapters,
        utts_per_chapter,
        n_styles,
        seed,
        ..SyntheticSpec::default()
    }
    .generate()
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch", "th", "br",
    "tr", "kl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ea"];

struct Lexicon {
    words: Vec<String>,
    buckets: BTreeSet<usize>,
}

impl Lexicon {
    /// A fresh pseudo-word whose toy-tokenizer bucket is not taken yet.
    fn fresh(&mut self, rng: &mut ChaCha8Rng) -> String {
        loop {
            let syl = rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syl {
                w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
                w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
            }
            let b = toy_bucket(&w, TOY_TEXT_VOCAB);
            if !self.words.contains(&w) && self.buckets.insert(b) {
                self.words.push(w.clone());
                return w;
            }
        }
    }
}

fn randn_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    Tensor::randn(&[n], std, rng).into_data()
}

impl SyntheticSpec {
    pub fn content_dims(&self) -> usize {
        self.feat_dim / 2
    }

    /// Panics if any count is zero.
    pub fn generate(&self) -> Corpus {
        assert!(
            self.n_chapters >= 1 && self.utts_per_chapter >= 1 && self.n_styles >= 1,
            "synthetic corpus counts must be >= 1"
        );
        assert!(self.feat_dim >= 2 && self.n_mels >= 2 && self.word_classes >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let cd = self.content_dims();
        let sd = self.feat_dim - cd;
        let ld = self.latent_dim;

        let mut lex = Lexicon {
            words: Vec::new(),
            buckets: BTreeSet::new(),
        };
        let style_words: Vec<Vec<String>> = (0..self.n_styles)
            .map(|_| (0..self.style_words_per_style.max(1)).map(|_| lex.fresh(&mut rng)).collect())
            .collect();
        let chapter_words: Vec<String> = (0..self.n_chapters).map(|_| lex.fresh(&mut rng)).collect();
        let nuance_words: Vec<String> = (0..self.nuance_words.max(2)).map(|_| lex.fresh(&mut rng)).collect();
        let content_words: Vec<String> =
            (0..self.content_words.max(1)).map(|_| lex.fresh(&mut rng)).collect();
        let word_class: BTreeMap<String, usize> = lex
            .words
            .iter()
            .map(|w| (w.clone(), rng.random_range(0..self.word_classes)))
            .collect();

        let class_pattern: Vec<Vec<f32>> =
            (0..self.word_classes).map(|_| randn_vec(&mut rng, cd, 0.6)).collect();
        let carry_pattern: Vec<Vec<f32>> =
            (0..self.n_styles).map(|_| randn_vec(&mut rng, cd, 0.6)).collect();
        let style_mean = spread_means(&mut rng, self.n_styles, ld);
        let drift: Vec<Vec<f32>> = (0..self.n_chapters).map(|_| randn_vec(&mut rng, ld, 1.0)).collect();
        let nuance: Vec<Vec<f32>> = (0..nuance_words.len()).map(|_| randn_vec(&mut rng, ld, 1.0)).collect();
        let mix = Tensor::randn(&[sd, ld], 1.0 / (ld as f32).sqrt(), &mut rng);
        let mut mel_w = Tensor::randn(&[self.feat_dim, self.n_mels], 1.0 / (self.feat_dim as f32).sqrt(), &mut rng);
        for r in cd..self.feat_dim {
            mel_w.row_mut(r).iter_mut().for_each(|v| *v *= 0.3);
        }

        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for a in 0..nuance_words.len() {
            for b in a + 1..nuance_words.len() {
                pairs.push((a, b));
            }
        }

        let mut utts = Vec::with_capacity(self.n_chapters * self.utts_per_chapter);
        for c in 0..self.n_chapters {
            let dominant = c % self.n_styles;
            let mut chapter_pairs = pairs.clone();
            chapter_pairs.shuffle(&mut rng);
            let mut prev_style: Option<usize> = None;
            for k in 0..self.utts_per_chapter {
                let style = if rng.random_bool(self.dominant_style_prob) {
                    dominant
                } else {
                    rng.random_range(0..self.n_styles)
                };
                let labeled = rng.random_bool(self.label_fraction);
                let (na, nb) = chapter_pairs[k % chapter_pairs.len()];

                let sw = &style_words[style];
                let mut words: Vec<&str> = Vec::new();
                let i1 = rng.random_range(0..sw.len());
                let i2 = rng.random_range(0..sw.len());
                words.push(&sw[i1]);
                words.push(&sw[i2]);
                words.push(&chapter_words[c]);
                words.push(&nuance_words[na]);
                words.push(&nuance_words[nb]);
                for _ in 0..rng.random_range(1..=3) {
                    words.push(&content_words[rng.random_range(0..content_words.len())]);
                }
                words.shuffle(&mut rng);

                let mut z = style_mean[style].clone();
                let jit = randn_vec(&mut rng, ld, 1.0);
                for i in 0..ld {
                    z[i] += self.chapter_drift * drift[c][i]
                        + self.nuance_scale * (nuance[na][i] + nuance[nb][i])
                        + self.jitter * jit[i];
                }
                let mut style_vec = vec![0.0; sd];
                for (r, sv) in style_vec.iter_mut().enumerate() {
                    *sv = self.style_gain * crate::nn::dot(mix.row(r), &z);
                }

                let n_frames = words.len() * self.frames_per_word;
                let mut frames = Tensor::zeros(&[n_frames, self.feat_dim]);
                let mut t = 0;
                for w in &words {
                    let cls = word_class[*w];
                    for _ in 0..self.frames_per_word {
                        let noise = if self.frame_noise > 0.0 {
                            randn_vec(&mut rng, self.feat_dim, self.frame_noise)
                        } else {
                            vec![0.0; self.feat_dim]
                        };
                        let row = frames.row_mut(t);
                        for i in 0..cd {
                            let carry = prev_style.map_or(0.0, |p| carry_pattern[p][i]);
                            row[i] = class_pattern[cls][i] + self.context_carry * carry + noise[i];
                        }
                        for i in 0..sd {
                            row[cd + i] = style_vec[i] + noise[cd + i];
                        }
                        t += 1;
                    }
                }
                let mut mel = Tensor::zeros(&[n_frames, self.n_mels]);
                crate::nn::gemm(
                    n_frames,
                    self.feat_dim,
                    self.n_mels,
                    1.0,
                    frames.data(),
                    false,
                    mel_w.data(),
                    false,
                    0.0,
                    mel.data_mut(),
                );
                for v in mel.data_mut() {
                    *v = softplus(*v);
                }

                utts.push(Utterance {
                    id: format!("ch{c:02}_u{k:03}"),
                    chapter_id: format!("ch{c:02}"),
                    order_index: k,
                    text: words.join(" "),
                    speech_frames: frames,
                    mel,
                    style_label: labeled.then(|| format!("style{style}")),
                });
                prev_style = Some(style);
            }
        }
        Corpus::new(utts).expect("generator produces a valid corpus")
    }
}

/// Random vectors of norm `sqrt(dim)`, mutually orthogonal while `n <= dim`.
fn spread_means(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f32>> {
    let mut out: Vec<Vec<f32>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = randn_vec(rng, dim, 1.0);
        if out.len() < dim {
            for u in &out {
                let p = crate::nn::dot(&v, u) / dim as f32;
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= p * b;
                }
            }
        }
        let norm = crate::nn::l2_norm(&v).max(1e-6);
        out.push(v.iter().map(|x| x * (dim as f32).sqrt() / norm).collect());
    }
    out
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::cosine;
    use proptest::prelude::*;

    fn tiny_utt(id: &str, ch: &str, k: usize) -> Utterance {
        Utterance {
            id: id.into(),
            chapter_id: ch.into(),
            order_index: k,
            text: format!("words of {id}"),
            speech_frames: Tensor::full(&[2, 3], k as f32),
            mel: Tensor::full(&[2, 4], 0.5),
            style_label: None,
        }
    }

    fn write_manifest(dir: &Path, utts: &[Utterance]) -> std::path::PathBuf {
        let c = Corpus::new(utts.to_vec()).unwrap();
        let p = dir.join("manifest.jsonl");
        save_manifest(&c, &p).unwrap();
        p
    }

    #[test]
    fn manifest_sorts_by_chapter_then_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            &[tiny_utt("b0", "B", 0), tiny_utt("a1", "A", 1), tiny_utt("a0", "A", 0)],
        );
        let c = load_manifest(&p).unwrap();
        assert_eq!(c.len(), 3);
        let a: Vec<usize> = c.chapter("A").map(|u| u.order_index).collect();
        assert_eq!(a, vec![0, 1]);
        assert_eq!(c.utterances()[2].id, "b0");
    }

    #[test]
    fn manifest_duplicate_position_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &[tiny_utt("a0", "A", 0)]);
        let line = fs::read_to_string(&p).unwrap();
        let dup = line.replace("\"a0\"", "\"a0bis\"");
        fs::write(&p, format!("{line}{dup}")).unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Integrity(_))));
    }

    #[test]
    fn manifest_empty_file_gives_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.jsonl");
        fs::write(&p, "").unwrap();
        let c = load_manifest(&p).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.label_coverage(), 0.0);
    }

    #[test]
    fn manifest_malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &[tiny_utt("a0", "A", 0)]);
        let line = fs::read_to_string(&p).unwrap();
        fs::write(&p, format!("{line}{{not json\n")).unwrap();
        match load_manifest(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_inconsistent_feat_dim_is_shape_error() {
        let mut odd = tiny_utt("b0", "B", 0);
        odd.speech_frames = Tensor::zeros(&[2, 5]);
        assert!(matches!(
            Corpus::new(vec![tiny_utt("a0", "A", 0), odd]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn manifest_roundtrip_is_field_identical() {
        let c = make_synthetic_corpus(2, 4, 2, 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        save_manifest(&c, &p).unwrap();
        assert_eq!(load_manifest(&p).unwrap(), c);
    }

    #[test]
    fn synthetic_sizes_and_determinism() {
        let c = make_synthetic_corpus(4, 25, 4, 7);
        assert_eq!(c.len(), 100);
        assert_eq!(c.chapter_ids().len(), 4);
        assert_eq!(c, make_synthetic_corpus(4, 25, 4, 7));
        assert_ne!(c, make_synthetic_corpus(4, 25, 4, 8));
        let cov = c.label_coverage();
        assert!(cov > 0.4 && cov < 0.8, "coverage {cov}");
    }

    #[test]
    fn synthetic_single_utterance_has_empty_windows() {
        let c = make_synthetic_corpus(1, 1, 1, 0);
        assert_eq!(c.len(), 1);
        let w = c.window_at(0, 3);
        assert!(w.previous.is_empty() && w.next.is_empty());
    }

    #[test]
    fn window_examples() {
        let c = make_synthetic_corpus(1, 3, 1, 0);
        let ids: Vec<String> = c.utterances().iter().map(|u| u.id.clone()).collect();
        let w = c.window(&ids[1], 1).unwrap();
        assert_eq!(w.previous[0].id, ids[0]);
        assert_eq!(w.next[0].id, ids[2]);
        let w = c.window(&ids[0], 2).unwrap();
        assert!(w.previous.is_empty());
        assert_eq!(w.next.len(), 2);
        let w = c.window(&ids[1], 0).unwrap();
        assert!(w.previous.is_empty() && w.next.is_empty());
        assert!(matches!(c.window("nope", 1), Err(Error::Lookup(_))));
    }

    #[test]
    fn holdout_split_is_chapter_balanced() {
        let c = make_synthetic_corpus(4, 25, 4, 7);
        let (train, held) = c.holdout_split(5);
        assert_eq!(held.len(), 20);
        assert_eq!(train.len(), 80);
        for ch in c.chapter_ids() {
            let n = held.iter().filter(|&&i| c.utterances()[i].chapter_id == ch).count();
            assert_eq!(n, 5);
        }
    }

    #[test]
    fn style_centroids_are_separable() {
        let c = make_synthetic_corpus(4, 25, 4, 7);
        let mean_frame = |u: &Utterance| -> Vec<f32> {
            let f = &u.speech_frames;
            let mut m = vec![0.0; f.cols()];
            for r in 0..f.rows() {
                for (a, b) in m.iter_mut().zip(f.row(r)) {
                    *a += b / f.rows() as f32;
                }
            }
            m
        };
        // Style of each utterance is recoverable from its style words only
        // through the generator; read it back from the label where present
        // and otherwise skip.
        let labeled: Vec<(&str, Vec<f32>)> = c
            .utterances()
            .iter()
            .filter_map(|u| u.style_label.as_deref().map(|s| (s, mean_frame(u))))
            .collect();
        let styles: BTreeSet<&str> = labeled.iter().map(|x| x.0).collect();
        let centroid = |s: &str| -> Vec<f32> {
            let members: Vec<&Vec<f32>> = labeled.iter().filter(|x| x.0 == s).map(|x| &x.1).collect();
            let mut m = vec![0.0; members[0].len()];
            for v in &members {
                for (a, b) in m.iter_mut().zip(v.iter()) {
                    *a += b / members.len() as f32;
                }
            }
            m
        };
        let mut within = Vec::new();
        for (i, a) in labeled.iter().enumerate() {
            for b in &labeled[i + 1..] {
                if a.0 == b.0 {
                    within.push(cosine(&a.1, &b.1));
                }
            }
        }
        let within_mean = within.iter().sum::<f32>() / within.len() as f32;
        let cents: Vec<Vec<f32>> = styles.iter().map(|s| centroid(s)).collect();
        for i in 0..cents.len() {
            for j in i + 1..cents.len() {
                let cs = cosine(&cents[i], &cents[j]);
                assert!(cs < within_mean, "centroid cos {cs} >= within {within_mean}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn window_never_crosses_chapters(ch in 1usize..4, per in 1usize..7, w in 0usize..4, seed in 0u64..50) {
            let c = make_synthetic_corpus(ch, per, 2, seed);
            for i in 0..c.len() {
                let win = c.window_at(i, w);
                prop_assert!(win.previous.len() <= w && win.next.len() <= w);
                for u in win.previous.iter().chain(win.next.iter()) {
                    prop_assert_eq!(&u.chapter_id, &win.current.chapter_id);
                }
                let pos = win.current.order_index;
                for (k, u) in win.previous.iter().rev().enumerate() {
                    prop_assert_eq!(u.order_index + k + 1, pos);
                }
                for (k, u) in win.next.iter().enumerate() {
                    prop_assert_eq!(u.order_index, pos + k + 1);
                }
                // Short only at chapter boundaries.
                if win.previous.len() < w { prop_assert_eq!(pos, win.previous.len()); }
                if win.next.len() < w { prop_assert_eq!(pos + win.next.len() + 1, per); }
            }
        }
    }
}
