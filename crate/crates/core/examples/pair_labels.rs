//! Pair construction from speech-embedding similarity and the contrastive
//! loss it feeds.

use taca::nn::Tensor;
use taca::styles::{build_pairs, contrastive_loss, similarity_matrix, PairLabel, PairingConfig};

fn main() -> taca::Result<()> {
    // Four speech embeddings: two near-duplicates, one related, one far.
    let s = Tensor::from_rows(&[
        vec![1.0, 0.0, 0.0],
        vec![0.99, 0.14, 0.0],
        vec![0.7, 0.7, 0.14],
        vec![0.0, 0.0, 1.0],
    ]);
    let sim = similarity_matrix(&s, &s);
    let cfg = PairingConfig::default();
    let labels = build_pairs(&sim, &cfg)?;
    for i in 0..labels.n() {
        let row: Vec<String> = (0..labels.n())
            .map(|j| format!("{:?}({:.2})", labels.get(i, j), sim.row(i)[j]))
            .collect();
        println!("{}", row.join("  "));
    }
    println!(
        "pos {} neg {} unk {}",
        labels.count(PairLabel::Pos),
        labels.count(PairLabel::Neg),
        labels.count(PairLabel::Unk)
    );

    // Text embeddings equal to the speech ones give a low loss; shuffled
    // ones a high loss.
    let aligned = contrastive_loss(&s, &s, &labels, 0.07)?;
    let shuffled = Tensor::from_rows(&[s.row(3).to_vec(), s.row(2).to_vec(), s.row(0).to_vec(), s.row(1).to_vec()]);
    let off = contrastive_loss(&shuffled, &s, &labels, 0.07)?;
    println!("loss aligned {aligned:.4}, shuffled {off:.4}");
    Ok(())
}
