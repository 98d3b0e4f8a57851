//! Trains the speech style encoder, then the text style encoder against it,
//! and reports held-out cross-modal alignment and chapter clustering.
//!
//! `cargo run --release --example style_space` (about 15 s)

use std::sync::Arc;

use taca::config::ExperimentConfig;
use taca::corpus::SyntheticSpec;
use taca::evalkit::{chapter_cluster_metric, cross_modal_stats};
use taca::featext::{HashedTextExtractor, IdentitySpeechExtractor};
use taca::styles::{train_speech_style_encoder, train_text_style_space};

fn main() -> taca::Result<()> {
    let cfg = ExperimentConfig::desk();
    let corpus = SyntheticSpec::default().generate();
    let (train, held) = corpus.holdout_split(5);
    let sub = corpus.subset(&train);

    let (speech, rep) = train_speech_style_encoder(
        &sub,
        Arc::new(IdentitySpeechExtractor::new(corpus.feat_dim())),
        &cfg.speech_train(),
    )?;
    println!("speech stage: loss {:.3} -> {:.3}", rep.losses[0], rep.losses[rep.losses.len() - 1]);

    let frozen = speech.fingerprint();
    let (text, rep) = train_text_style_space(&sub, &speech, Arc::new(HashedTextExtractor::default()), &cfg.text_train())?;
    assert_eq!(speech.fingerprint(), frozen);
    println!("text stage:   loss {:.3} -> {:.3}", rep.losses[0], rep.losses[rep.losses.len() - 1]);

    let ho = corpus.subset(&held);
    let t = text.encode_corpus(&ho)?;
    let stats = cross_modal_stats(&t, &speech.encode_corpus(&ho)?)?;
    println!(
        "held out: matched cosine {:.3}, retrieval top-1 {:.3}",
        stats.matched_cosine_mean, stats.retrieval_top1
    );
    let chapters: Vec<&str> = ho.utterances().iter().map(|u| u.chapter_id.as_str()).collect();
    println!("text-style silhouette over chapters {:.3}", chapter_cluster_metric(&t, &chapters)?);
    Ok(())
}
