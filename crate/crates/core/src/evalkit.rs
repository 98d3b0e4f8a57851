//! Objective metrics: DTW-aligned mel-cepstral distortion, semantic-token
//! error rate, cross-modal alignment statistics and a chapter silhouette.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::context::ConditioningBundle;
use crate::lmtts::{
    decode_tokens_to_mel, generate, MelDecoder, SamplingConfig, SemanticTokenSequence, TokenLM, TrainingStage,
};
use crate::nn::{cosine, Tensor};
use crate::styles::{SpeechStyleEncoder, TextStyleEncoder};

/// Label used for the token error rate wherever it is reported.
pub const TER_LABEL: &str = "TER (CER proxy)";
pub const MCD_LABEL: &str = "MCD (dB, DTW)";
pub const DEFAULT_N_CEPS: usize = 13;

/// `10 / ln 10 * sqrt 2`.
pub fn mcd_constant() -> f64 {
    10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2
}

/// Orthonormal DCT-II coefficients `1..=n_ceps` of one frame.
pub fn cepstrum(frame: &[f32], n_ceps: usize) -> Vec<f64> {
    let n = frame.len();
    let nf = n as f64;
    (1..=n_ceps)
        .map(|k| {
            let s: f64 = frame
                .iter()
                .enumerate()
                .map(|(i, &x)| x as f64 * (std::f64::consts::PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * nf)).cos())
                .sum();
            s * (2.0 / nf).sqrt()
        })
        .collect()
}

fn check_mel(m: &Tensor, what: &str) -> Result<()> {
    if m.shape().len() != 2 || m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Input(format!("{what} mel is empty")));
    }
    Ok(())
}

/// Mel-cepstral distortion in dB after full DTW alignment with symmetric
/// unit steps. Among minimum-cost paths the shortest is used, which keeps
/// the measure symmetric in its arguments.
pub fn mcd_dtw(pred: &Tensor, reference: &Tensor, n_ceps: usize) -> Result<f64> {
    check_mel(pred, "predicted")?;
    check_mel(reference, "reference")?;
    if pred.cols() != reference.cols() {
        return Err(Error::Shape(format!(
            "mel widths differ: {} vs {}",
            pred.cols(),
            reference.cols()
        )));
    }
    let n_mels = pred.cols();
    if n_ceps == 0 || n_ceps >= n_mels {
        return Err(Error::Config(format!(
            "n_ceps {n_ceps} must be in 1..{n_mels} (n_mels)"
        )));
    }
    let a: Vec<Vec<f64>> = (0..pred.rows()).map(|i| cepstrum(pred.row(i), n_ceps)).collect();
    let b: Vec<Vec<f64>> = (0..reference.rows()).map(|j| cepstrum(reference.row(j), n_ceps)).collect();
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();

    let (n, m) = (a.len(), b.len());
    // (accumulated cost, path length)
    let mut acc = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let c = dist(&a[i], &b[j]);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = (f64::INFINITY, usize::MAX);
                let mut consider = |p: (f64, usize)| {
                    if p.0 < best.0 || (p.0 == best.0 && p.1 < best.1) {
                        best = p;
                    }
                };
                if i > 0 && j > 0 {
                    consider(acc[(i - 1) * m + j - 1]);
                }
                if i > 0 {
                    consider(acc[(i - 1) * m + j]);
                }
                if j > 0 {
                    consider(acc[i * m + j - 1]);
                }
                best
            };
            acc[i * m + j] = (best.0 + c, best.1 + 1);
        }
    }
    let (cost, len) = acc[n * m - 1];
    Ok(mcd_constant() * cost / len as f64)
}

pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein distance over semantic tokens divided by the reference
/// length. May exceed 1.
pub fn token_error_rate(pred: &SemanticTokenSequence, reference: &SemanticTokenSequence) -> Result<f64> {
    token_error_rate_ids(&pred.tokens, &reference.tokens)
}

pub fn token_error_rate_ids(pred: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Input("reference token sequence is empty".into()));
    }
    Ok(edit_distance(pred, reference) as f64 / reference.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossModalStats {
    pub matched_cosine_mean: f64,
    pub retrieval_top1: f64,
}

/// Statistics for row-aligned text and speech embeddings.
pub fn cross_modal_stats(text: &Tensor, speech: &Tensor) -> Result<CrossModalStats> {
    if text.shape().len() != 2 || text.rows() == 0 {
        return Err(Error::Input("no embeddings to compare".into()));
    }
    if text.shape() != speech.shape() {
        return Err(Error::Shape(format!(
            "text {:?} and speech {:?} embeddings differ in shape",
            text.shape(),
            speech.shape()
        )));
    }
    let n = text.rows();
    let mut matched = 0.0;
    let mut hits = 0;
    for i in 0..n {
        let t = text.row(i);
        matched += cosine(t, speech.row(i)) as f64;
        let mut best = 0;
        let mut best_c = f32::NEG_INFINITY;
        for j in 0..n {
            let c = cosine(t, speech.row(j));
            if c > best_c {
                best_c = c;
                best = j;
            }
        }
        hits += usize::from(best == i);
    }
    Ok(CrossModalStats {
        matched_cosine_mean: matched / n as f64,
        retrieval_top1: hits as f64 / n as f64,
    })
}

/// Encodes every utterance of `corpus` with both encoders and compares.
pub fn cross_modal_report(
    text_enc: &TextStyleEncoder,
    speech_enc: &SpeechStyleEncoder,
    corpus: &Corpus,
) -> Result<CrossModalStats> {
    if corpus.is_empty() {
        return Err(Error::Input("corpus is empty".into()));
    }
    let t = text_enc.encode_corpus(corpus)?;
    let s = speech_enc.encode_corpus(corpus)?;
    cross_modal_stats(&t, &s)
}

fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 0.0 } else { 1.0 };
    }
    (1.0 - dot / (na * nb)).max(0.0)
}

/// Mean silhouette over all points with cosine distance. Points alone in
/// their cluster score 0, as do points whose `a` and `b` are both 0.
pub fn chapter_cluster_metric<S: AsRef<str>>(embeddings: &Tensor, chapter_ids: &[S]) -> Result<f64> {
    let n = embeddings.rows();
    if embeddings.shape().len() != 2 || n != chapter_ids.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} labels",
            n,
            chapter_ids.len()
        )));
    }
    let mut label_of: BTreeMap<&str, usize> = BTreeMap::new();
    for c in chapter_ids {
        let next = label_of.len();
        label_of.entry(c.as_ref()).or_insert(next);
    }
    let k = label_of.len();
    if k < 2 {
        return Err(Error::Config(format!(
            "silhouette needs at least two chapters, got {k}"
        )));
    }
    let lab: Vec<usize> = chapter_ids.iter().map(|c| label_of[c.as_ref()]).collect();
    let mut size = vec![0usize; k];
    for &l in &lab {
        size[l] += 1;
    }
    let mut d = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = cosine_distance(embeddings.row(i), embeddings.row(j));
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        if size[lab[i]] < 2 {
            continue;
        }
        let mut sums = vec![0.0f64; k];
        for j in 0..n {
            if j != i {
                sums[lab[j]] += d[i * n + j];
            }
        }
        let a = sums[lab[i]] / (size[lab[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != lab[i])
            .map(|c| sums[c] / size[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

// ---------------------------------------------------------------------------
// Scoring a token LM

/// How a token LM is conditioned at inference.
#[derive(Clone, Copy)]
pub enum Conditioning<'a> {
    /// No neighbours and the null style (Base-LM).
    Null,
    /// Neighbouring sentences plus the text-derived style of the current
    /// sentence (TACA-LM).
    Context(&'a TextStyleEncoder),
}

/// Conditioning bundle for utterance `i` of `corpus`.
pub fn inference_bundle(lm: &TokenLM, cond: Conditioning<'_>, corpus: &Corpus, i: usize) -> Result<ConditioningBundle> {
    match cond {
        Conditioning::Null => lm.bundle(corpus, i, TrainingStage::Pretrain, &[]),
        Conditioning::Context(text) => {
            let style = text.encode(&corpus.utterances()[i].text)?.v;
            lm.bundle(corpus, i, TrainingStage::ContextFinetune, &style)
        }
    }
}

/// Generates tokens for every utterance in `indices`, decodes them to mel
/// and scores against the reference tokens and mel. Utterance `k` of the
/// list samples with seed `sampling.seed + k`.
#[allow(clippy::too_many_arguments)]
pub fn score_lm(
    lm: &TokenLM,
    cond: Conditioning<'_>,
    decoder: &MelDecoder,
    corpus: &Corpus,
    semantic: &[SemanticTokenSequence],
    indices: &[usize],
    sampling: &SamplingConfig,
    n_ceps: usize,
) -> Result<Vec<UtteranceRecord>> {
    let mut out = Vec::with_capacity(indices.len());
    for (k, &i) in indices.iter().enumerate() {
        let u = &corpus.utterances()[i];
        let bundle = inference_bundle(lm, cond, corpus, i)?;
        let s = SamplingConfig {
            seed: sampling.seed.wrapping_add(k as u64),
            ..sampling.clone()
        };
        let gen = generate(lm, &bundle, bundle.current_tokens(), &s)?;
        let mel = decode_tokens_to_mel(&gen.tokens, decoder)?;
        out.push(UtteranceRecord {
            id: u.id.clone(),
            mcd_db: mcd_dtw(&mel, &u.mel, n_ceps)?,
            ter: token_error_rate(&gen.tokens, &semantic[i])?,
        });
    }
    Ok(out)
}

/// Mean MCD and TER over `records`, summed in id order like
/// [`EvalReport::new`].
pub fn summarize(system: &str, records: &[UtteranceRecord]) -> SystemSummary {
    let mut sorted: Vec<&UtteranceRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    SystemSummary {
        system: system.to_string(),
        mean_mcd: mean(sorted.iter().map(|r| r.mcd_db)),
        mean_ter: mean(sorted.iter().map(|r| r.ter)),
    }
}

// ---------------------------------------------------------------------------
// Report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub mcd_db: f64,
    pub ter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregates {
    pub mean_mcd: f64,
    pub mean_ter: f64,
    pub matched_cosine_mean: Option<f64>,
    pub silhouette: Option<f64>,
}

/// Mean MCD and TER of a system evaluated on the same utterances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSummary {
    pub system: String,
    pub mean_mcd: f64,
    pub mean_ter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub system: String,
    /// Human-readable metric names keyed by record field.
    pub metrics: BTreeMap<String, String>,
    pub records: Vec<UtteranceRecord>,
    pub aggregates: Aggregates,
    /// Other systems scored on the same utterances.
    pub comparisons: Vec<SystemSummary>,
    pub config_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Sorts records by id and derives the MCD/TER aggregates from them.
    pub fn new(
        system: &str,
        mut records: Vec<UtteranceRecord>,
        matched_cosine_mean: Option<f64>,
        silhouette: Option<f64>,
        config_hash: &str,
        seed: u64,
        config: serde_json::Value,
    ) -> Result<Self> {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let aggregates = Aggregates {
            mean_mcd: mean(records.iter().map(|r| r.mcd_db)),
            mean_ter: mean(records.iter().map(|r| r.ter)),
            matched_cosine_mean,
            silhouette,
        };
        let metrics = BTreeMap::from([
            ("mcd_db".to_string(), MCD_LABEL.to_string()),
            ("ter".to_string(), TER_LABEL.to_string()),
        ]);
        let report = Self {
            schema_version: REPORT_SCHEMA_VERSION,
            system: system.to_string(),
            metrics,
            records,
            aggregates,
            comparisons: Vec::new(),
            config_hash: config_hash.to_string(),
            seed,
            config,
        };
        report.validate()?;
        Ok(report)
    }

    /// Schema checks: version, labels, non-empty sorted unique ids,
    /// non-negative finite metrics and aggregates equal to recomputation.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(format!("eval report: {msg}")));
        if self.schema_version != REPORT_SCHEMA_VERSION {
            return bad(format!("unknown schema version {}", self.schema_version));
        }
        if self.metrics.get("ter").map(String::as_str) != Some(TER_LABEL) {
            return bad(format!("ter must be labelled {TER_LABEL:?}"));
        }
        if self.records.is_empty() {
            return bad("no records".into());
        }
        for w in self.records.windows(2) {
            if w[0].id >= w[1].id {
                return bad(format!("records not sorted by unique id at {}", w[1].id));
            }
        }
        for r in &self.records {
            if !(r.mcd_db.is_finite() && r.mcd_db >= 0.0 && r.ter.is_finite() && r.ter >= 0.0) {
                return bad(format!("record {} has invalid metrics", r.id));
            }
        }
        let mcd = mean(self.records.iter().map(|r| r.mcd_db));
        let ter = mean(self.records.iter().map(|r| r.ter));
        if mcd.to_bits() != self.aggregates.mean_mcd.to_bits() || ter.to_bits() != self.aggregates.mean_ter.to_bits() {
            return bad("aggregates do not match the records".into());
        }
        if let Some(s) = self.aggregates.silhouette {
            if !(-1.0..=1.0).contains(&s) {
                return bad(format!("silhouette {s} outside [-1, 1]"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }
}

// ---------------------------------------------------------------------------
// 2-D projection plot

/// Top-two principal-component coordinates of the rows of `x`.
pub fn project_2d(x: &Tensor) -> Vec<(f64, f64)> {
    let (n, d) = (x.rows(), x.cols());
    if n == 0 || d == 0 {
        return Vec::new();
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += *v as f64 / n as f64;
        }
    }
    let c = DMatrix::from_fn(n, d, |i, j| x.row(i)[j] as f64 - mean[j]);
    let cov = c.transpose() * &c;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        let Some(&e) = order.get(k) else {
            return vec![0.0; d];
        };
        let col = eig.eigenvectors.column(e);
        let big = (0..d).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs())).unwrap_or(0);
        let s = if col[big] < 0.0 { -1.0 } else { 1.0 };
        (0..d).map(|j| s * col[j]).collect()
    };
    let (u, v) = (axis(0), axis(1));
    (0..n)
        .map(|i| {
            let r = c.row(i);
            let p = (0..d).map(|j| r[j] * u[j]).sum();
            let q = (0..d).map(|j| r[j] * v[j]).sum();
            (p, q)
        })
        .collect()
}

const PALETTE: &[&str] = &[
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
];

/// SVG scatter of text (circles) and speech (squares) style embeddings,
/// coloured by chapter. Both sets share one projection.
pub fn style_space_svg<S: AsRef<str>>(text: &Tensor, speech: &Tensor, chapter_ids: &[S]) -> Result<String> {
    if text.shape() != speech.shape() || text.rows() != chapter_ids.len() {
        return Err(Error::Shape("text, speech and chapter ids must align".into()));
    }
    let n = text.rows();
    let mut both = text.data().to_vec();
    both.extend_from_slice(speech.data());
    let pts = project_2d(&Tensor::from_vec(&[2 * n, text.cols().max(1)], both));
    let (w, h, pad) = (640.0, 480.0, 30.0);
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-9))
    };
    let (x0, xs) = span(|p| p.0);
    let (y0, ys) = span(|p| p.1);
    let mut chapters: Vec<&str> = chapter_ids.iter().map(|c| c.as_ref()).collect();
    chapters.sort_unstable();
    chapters.dedup();
    let colour = |c: &str| PALETTE[chapters.iter().position(|x| *x == c).unwrap_or(0) % PALETTE.len()];

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (k, &(px, py)) in pts.iter().enumerate() {
        let x = pad + (px - x0) / xs * (w - 2.0 * pad);
        let y = h - pad - (py - y0) / ys * (h - 2.0 * pad);
        let c = colour(chapter_ids[k % n].as_ref());
        if k < n {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{c}"/>"#);
        } else {
            let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="7" height="7" fill="none" stroke="{c}"/>"#, x - 3.5, y - 3.5);
        }
    }
    for (i, ch) in chapters.iter().enumerate() {
        let y = 16.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="8" y="{y}" font-size="11" fill="{}">{ch}</text>"#,
            PALETTE[i % PALETTE.len()]
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mel(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor {
        Tensor::randn(&[n, m], 1.0, rng)
    }

    #[test]
    fn mcd_identity_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mel(&mut rng, 9, 20);
        assert_eq!(mcd_dtw(&a, &a, 13).unwrap(), 0.0);
    }

    #[test]
    fn mcd_absorbs_uniform_time_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mel(&mut rng, 7, 20);
        let mut rows = Vec::new();
        for r in a.to_rows() {
            rows.push(r.clone());
            rows.push(r);
        }
        let b = Tensor::from_rows(&rows);
        assert_eq!(mcd_dtw(&b, &a, 13).unwrap(), 0.0);
        assert_eq!(mcd_dtw(&a, &b, 13).unwrap(), 0.0);
    }

    #[test]
    fn mcd_constant_spectra_closed_form() {
        // x_i = cos(pi (2i + 1) / 2N) is the first DCT-II basis vector, so
        // its orthonormal c1 is sqrt(N / 2) and every other kept coefficient
        // is zero. Against silence the per-frame distance is sqrt(N / 2).
        let n = 20;
        let x: Vec<f32> = (0..n)
            .map(|i| (std::f64::consts::PI * (2 * i + 1) as f64 / (2 * n) as f64).cos() as f32)
            .collect();
        let a = Tensor::from_rows(&vec![x; 5]);
        let b = Tensor::zeros(&[3, n]);
        let delta = (n as f64 / 2.0).sqrt();
        let want = 10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2 * delta;
        let got = mcd_dtw(&a, &b, 13).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn mcd_errors() {
        let a = Tensor::zeros(&[3, 20]);
        let e = Tensor::zeros(&[0, 20]);
        assert!(matches!(mcd_dtw(&e, &a, 13), Err(Error::Input(_))));
        assert!(matches!(mcd_dtw(&a, &e, 13), Err(Error::Input(_))));
        assert!(matches!(mcd_dtw(&a, &a, 20), Err(Error::Config(_))));
        assert!(matches!(mcd_dtw(&a, &a, 25), Err(Error::Config(_))));
    }

    #[test]
    fn ter_examples() {
        assert_eq!(token_error_rate_ids(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(token_error_rate_ids(&[1, 3], &[1, 2, 3]).unwrap(), 1.0 / 3.0);
        assert_eq!(token_error_rate_ids(&[3, 4, 5], &[1, 2]).unwrap(), 1.5);
        assert!(matches!(token_error_rate_ids(&[1], &[]), Err(Error::Input(_))));
    }

    /// Exhaustive recursion over edit scripts.
    fn brute_edit(a: &[usize], b: &[usize]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = brute_edit(ra, rb) + usize::from(x != y);
                sub.min(brute_edit(ra, b) + 1).min(brute_edit(a, rb) + 1)
            }
        }
    }

    proptest! {
        #[test]
        fn edit_distance_matches_brute_force_and_triangle(
            a in prop::collection::vec(0usize..4, 0..7),
            b in prop::collection::vec(0usize..4, 0..7),
            c in prop::collection::vec(0usize..4, 0..7),
        ) {
            let ab = edit_distance(&a, &b);
            prop_assert_eq!(ab, brute_edit(&a, &b));
            prop_assert_eq!(ab, edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
        }

        #[test]
        fn mcd_is_symmetric_and_nonnegative(seed in 0u64..10_000, n1 in 1usize..9, n2 in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_mel(&mut rng, n1, 12);
            let b = rand_mel(&mut rng, n2, 12);
            let ab = mcd_dtw(&a, &b, 8).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, mcd_dtw(&b, &a, 8).unwrap());
        }
    }

    #[test]
    fn cross_modal_copy_and_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Tensor::randn(&[50, 16], 1.0, &mut rng);
        let st = cross_modal_stats(&s, &s).unwrap();
        assert!((st.matched_cosine_mean - 1.0).abs() < 1e-6);
        assert_eq!(st.retrieval_top1, 1.0);

        let t = Tensor::randn(&[1000, 384], 1.0, &mut rng);
        let s = Tensor::randn(&[1000, 384], 1.0, &mut rng);
        let st = cross_modal_stats(&t, &s).unwrap();
        assert!(st.matched_cosine_mean.abs() < 0.05);
        assert!(matches!(
            cross_modal_stats(&Tensor::zeros(&[0, 4]), &Tensor::zeros(&[0, 4])),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn silhouette_examples() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
        let labels = ["a", "a", "b", "b"];
        assert!((chapter_cluster_metric(&e, &labels).unwrap() - 1.0).abs() < 1e-12);
        let same = Tensor::from_rows(&vec![vec![0.3, 0.4]; 4]);
        assert_eq!(chapter_cluster_metric(&same, &labels).unwrap(), 0.0);
        assert!(matches!(
            chapter_cluster_metric(&e, &["a", "a", "a", "a"]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn silhouette_of_shuffled_labels_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let centres = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let c = i % 4;
            let noise = Tensor::randn(&[8], 0.5, &mut rng);
            rows.push(centres.row(c).iter().zip(noise.data()).map(|(a, b)| a + b).collect::<Vec<f32>>());
            labels.push(format!("ch{c}"));
        }
        let e = Tensor::from_rows(&rows);
        assert!(chapter_cluster_metric(&e, &labels).unwrap() > 0.2);
        for _ in 0..20 {
            labels.shuffle(&mut rng);
            assert!(chapter_cluster_metric(&e, &labels).unwrap().abs() < 0.1);
        }
    }

    #[test]
    fn silhouette_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        let e = Tensor::randn(&[30, d], 1.0, &mut rng);
        let labels: Vec<String> = (0..30).map(|i| format!("c{}", i % 3)).collect();
        let m = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(rand_distr::StandardNormal));
        let q = m.qr().q();
        let mut rot = Tensor::zeros(&[30, d]);
        for i in 0..30 {
            for j in 0..d {
                rot.row_mut(i)[j] = (0..d).map(|k| e.row(i)[k] as f64 * q[(k, j)]).sum::<f64>() as f32;
            }
        }
        let a = chapter_cluster_metric(&e, &labels).unwrap();
        let b = chapter_cluster_metric(&rot, &labels).unwrap();
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    fn report() -> EvalReport {
        let recs = vec![
            UtteranceRecord { id: "b".into(), mcd_db: 2.5, ter: 0.1 },
            UtteranceRecord { id: "a".into(), mcd_db: 1.0, ter: 0.3 },
            UtteranceRecord { id: "c".into(), mcd_db: 0.7, ter: 0.0 },
        ];
        EvalReport::new("TACA-LM", recs, Some(0.9), Some(0.2), "abc", 7, serde_json::json!({"k": 1})).unwrap()
    }

    #[test]
    fn report_is_sorted_labelled_and_consistent() {
        let r = report();
        let ids: Vec<&str> = r.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(r.metrics["ter"], "TER (CER proxy)");
        let mcd = (1.0 + 2.5 + 0.7) / 3.0;
        assert_eq!(r.aggregates.mean_mcd, mcd);
        let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json().unwrap(), r.to_json().unwrap());
    }

    #[test]
    fn report_validation_catches_tampering() {
        let mut r = report();
        r.aggregates.mean_ter += 1e-12;
        assert!(matches!(r.validate(), Err(Error::Validation(_))));
        let mut r = report();
        r.records.swap(0, 1);
        assert!(r.validate().is_err());
        let mut r = report();
        r.records[0].mcd_db = -1.0;
        assert!(r.validate().is_err());
        let mut r = report();
        r.metrics.insert("ter".into(), "CER".into());
        assert!(r.validate().is_err());
    }

    #[test]
    fn svg_has_one_mark_per_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let s = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let ch = ["x", "x", "y", "y", "z", "z"];
        let svg = style_space_svg(&t, &s, &ch).unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 6);
        assert_eq!(svg.matches("fill=\"none\"").count(), 6);
    }
}
