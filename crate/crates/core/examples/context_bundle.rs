//! Encodes a sentence window plus a style vector into the conditioning
//! bundle the token LM reads, and the null bundle used for pretraining.

use std::sync::Arc;

use taca::context::{encode_context, null_conditioning, ContextConfig, ContextEncoder};
use taca::corpus::make_synthetic_corpus;
use taca::featext::HashedTextExtractor;

fn main() -> taca::Result<()> {
    let corpus = make_synthetic_corpus(2, 6, 2, 4);
    let cfg = ContextConfig {
        h_cond: 32,
        heads: 2,
        layers: 1,
        ..ContextConfig::default()
    };
    let enc = ContextEncoder::new(cfg, 16, Arc::new(HashedTextExtractor::default()), 0)?;

    let win = corpus.window_at(2, 1);
    let style = vec![0.25; 16];
    let b = encode_context(&enc, &win, &style)?;
    println!(
        "window {} | {} | {}: {} rows of {}, current rows {:?}, style code {}",
        win.previous[0].id,
        win.current.id,
        win.next[0].id,
        b.context_sequence.rows(),
        b.context_sequence.cols(),
        b.current_span,
        b.style_index
    );

    let null = null_conditioning(&enc, win.current)?;
    println!(
        "null bundle: {} rows (current sentence only), style code {}",
        null.context_sequence.rows(),
        null.style_index
    );

    // Deterministic given parameters.
    assert_eq!(encode_context(&enc, &win, &style)?, b);
    Ok(())
}
