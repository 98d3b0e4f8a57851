//! Generates the synthetic audiobook corpus, walks a context window and
//! round-trips it through the on-disk manifest.
//!
//! `cargo run --release --example corpus_tour`

use taca::corpus::{load_manifest, save_manifest, SyntheticSpec};

fn main() -> taca::Result<()> {
    let corpus = SyntheticSpec::default().generate();
    println!(
        "{} utterances, {} chapters, frames {}-d, mel {}-d, label coverage {:.2}",
        corpus.len(),
        corpus.chapter_ids().len(),
        corpus.feat_dim(),
        corpus.n_mels(),
        corpus.label_coverage()
    );

    let first = &corpus.utterances()[0];
    println!("first: {} ({} frames) {:?}", first.id, first.n_frames(), first.text);

    // Windows stop at chapter boundaries.
    let win = corpus.window(&corpus.utterances()[1].id, 2)?;
    println!(
        "window around {}: {} previous, {} next",
        win.current.id,
        win.previous.len(),
        win.next.len()
    );

    let (train, held) = corpus.holdout_split(5);
    println!("split: {} train, {} held out", train.len(), held.len());

    let dir = std::env::temp_dir().join("taca_corpus_tour");
    let manifest = dir.join("manifest.jsonl");
    save_manifest(&corpus, &manifest)?;
    let back = load_manifest(&manifest)?;
    assert_eq!(back, corpus);
    println!("manifest round trip ok: {}", manifest.display());
    Ok(())
}
