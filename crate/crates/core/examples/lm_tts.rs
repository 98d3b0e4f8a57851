//! Semantic tokens, Base-LM pretraining, context-aware fine-tuning,
//! generation and token-to-mel decoding on a context-dependent corpus.
//!
//! `cargo run --release --example lm_tts` (about a minute)

use std::sync::Arc;

use taca::config::ExperimentConfig;
use taca::context::ContextConfig;
use taca::corpus::SyntheticSpec;
use taca::evalkit::{inference_bundle, score_lm, summarize, Conditioning};
use taca::featext::{HashedTextExtractor, IdentitySpeechExtractor, TextFeatureExtractor};
use taca::lmtts::{
    generate, train_lm, train_mel_decoder, LmConfig, LmTrainConfig, MelDecoderConfig, SamplingConfig,
    SemanticConfig, SemanticTokenizer, StyleSourcePolicy, TokenLM, TrainingStage,
};
use taca::nn::Schedule;
use taca::styles::{train_speech_style_encoder, train_text_style_space};

fn main() -> taca::Result<()> {
    // Each sentence's frames carry a pattern of the previous sentence's
    // style, so its semantic tokens depend on context.
    let corpus = SyntheticSpec {
        n_chapters: 8,
        utts_per_chapter: 40,
        context_carry: 1.0,
        style_gain: 0.0,
        ..SyntheticSpec::default()
    }
    .generate();
    let (train, held) = corpus.holdout_split(5);

    let tok = SemanticTokenizer::fit(&corpus, &train, &SemanticConfig::default())?;
    let sem = tok.tokenize_corpus(&corpus)?;
    println!("tokenizer: {} codes, first utterance -> {:?}", tok.k(), &sem[0].tokens[..8]);

    let cfg = ExperimentConfig::desk();
    let sub = corpus.subset(&train);
    let text_x: Arc<dyn TextFeatureExtractor> = Arc::new(HashedTextExtractor::default());
    let (speech, _) = train_speech_style_encoder(
        &sub,
        Arc::new(IdentitySpeechExtractor::new(corpus.feat_dim())),
        &cfg.speech_train(),
    )?;
    let (text, _) = train_text_style_space(&sub, &speech, text_x.clone(), &cfg.text_train())?;

    let ctx = ContextConfig {
        h_cond: 64,
        layers: 1,
        heads: 2,
        ..ContextConfig::default()
    };
    let lm0 = TokenLM::new(LmConfig::tiny(), ctx, tok.k(), cfg.d_style, text_x, 1)?;
    let schedule = Schedule {
        steps: 300,
        batch_size: 16,
        lr: 3e-3,
        warmup: 20,
        ..Schedule::default()
    };
    let pre = LmTrainConfig {
        schedule: schedule.clone(),
        ..LmTrainConfig::default()
    };
    let (base, rep) = train_lm(&corpus, &sem, &train, TrainingStage::Pretrain, None, Some(lm0), &pre)?;
    println!(
        "pretrain: loss {:.3}, accuracy {:.3}, max_new_tokens {}",
        rep.losses[rep.losses.len() - 1],
        rep.accuracy[rep.accuracy.len() - 1],
        rep.max_new_tokens
    );

    let policy = StyleSourcePolicy::new(0.5, &speech, &text)?;
    let ft = LmTrainConfig {
        schedule: Schedule { steps: 200, ..schedule },
        seed: 1,
        ..LmTrainConfig::default()
    };
    let (taca, rep) = train_lm(&corpus, &sem, &train, TrainingStage::ContextFinetune, Some(&policy), Some(base.clone()), &ft)?;
    println!(
        "finetune: loss {:.3}, styles from speech {} / text {}",
        rep.losses[rep.losses.len() - 1],
        rep.speech_draws,
        rep.text_draws
    );

    let dec_cfg = MelDecoderConfig::default();
    let (dec, _) = train_mel_decoder(&corpus, &sem, &train, tok.k(), &dec_cfg)?;

    let i = held[0];
    let bundle = inference_bundle(&taca, Conditioning::Context(&text), &corpus, i)?;
    let gen = generate(&taca, &bundle, bundle.current_tokens(), &SamplingConfig::default())?;
    println!(
        "{}: generated {} tokens (reference {}), truncated {}",
        corpus.utterances()[i].id,
        gen.tokens.len(),
        sem[i].len(),
        gen.truncated
    );

    let sampling = SamplingConfig::default();
    for (name, lm, cond) in [
        ("Base-LM", &base, Conditioning::Null),
        ("TACA-LM", &taca, Conditioning::Context(&text)),
    ] {
        let recs = score_lm(lm, cond, &dec, &corpus, &sem, &held, &sampling, 13)?;
        let s = summarize(name, &recs);
        println!("{name}: held-out TER {:.3}, MCD {:.3} dB", s.mean_ter, s.mean_mcd);
    }
    Ok(())
}
