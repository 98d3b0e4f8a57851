//! The pluggable feature extractors behind both style encoders.

use taca::corpus::make_synthetic_corpus;
use taca::featext::Registry;

fn main() -> taca::Result<()> {
    let corpus = make_synthetic_corpus(2, 4, 2, 1);
    let reg = Registry::default();
    println!("speech extractors: {:?}", reg.speech_names().collect::<Vec<_>>());
    println!("text extractors:   {:?}", reg.text_names().collect::<Vec<_>>());

    let speech = reg.speech("identity", corpus.feat_dim())?;
    let u = &corpus.utterances()[0];
    let f = speech.extract(u)?;
    println!("{}: {} frames -> {:?}", speech.name(), u.n_frames(), f.shape());

    let text = reg.text("hashed")?;
    let ids = text.tokenize(&u.text);
    let t = text.extract(&u.text)?;
    println!("{}: {:?} -> ids {:?} -> {:?}", text.name(), u.text, ids, t.shape());

    match reg.text("bert") {
        Err(e) => println!("unknown names fail cleanly: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
