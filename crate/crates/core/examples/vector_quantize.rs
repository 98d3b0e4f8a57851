//! Nearest-neighbour quantization, EMA codebook updates and dead-entry
//! reseeding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taca::nn::Tensor;
use taca::vq::{Codebook, VqConfig};

fn main() -> taca::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Eight well separated clusters in 4-d.
    let centers = Tensor::randn(&[8, 4], 3.0, &mut rng);
    let mut rows = Vec::new();
    for i in 0..400 {
        let noise = Tensor::randn(&[4], 0.1, &mut rng);
        rows.push(centers.row(i % 8).iter().zip(noise.data()).map(|(c, n)| c + n).collect());
    }
    let data = Tensor::from_rows(&rows);

    let mut cb = Codebook::new(16, 4, 0);
    println!("utilization at init {:.2}", cb.utilization(&data));
    let cfg = VqConfig {
        decay: 0.9,
        reseed_after: 5,
        ..VqConfig::default()
    };
    for epoch in 0..5 {
        let mut reseeded = 0;
        for chunk in rows.chunks(40) {
            reseeded += cb.update(&Tensor::from_rows(chunk), &cfg)?;
        }
        let q = cb.lookup(&data)?;
        println!(
            "epoch {epoch}: reseeded {reseeded:2}, commit {:.4}, utilization {:.2}",
            q.commit_loss,
            cb.utilization(&data)
        );
    }

    // Quantizing an entry returns the entry itself.
    let e = Tensor::from_vec(&[4], cb.entry(2).to_vec());
    let q = cb.lookup(&e)?;
    assert_eq!(q.indices, vec![2]);
    assert_eq!(q.commit_loss, 0.0);
    Ok(())
}
