//! The objective metrics on hand-made inputs and a report round trip.

use taca::evalkit::{
    chapter_cluster_metric, mcd_dtw, token_error_rate_ids, EvalReport, UtteranceRecord, DEFAULT_N_CEPS,
};
use taca::nn::Tensor;

fn main() -> taca::Result<()> {
    let a = Tensor::from_rows(&(0..6).map(|t| (0..20).map(|m| ((t * m) as f32 * 0.1).sin()).collect()).collect::<Vec<_>>());
    // Same frames, each shown twice: DTW absorbs the slowdown.
    let slow = Tensor::from_rows(&(0..12).map(|t| a.row(t / 2).to_vec()).collect::<Vec<_>>());
    println!("MCD(a, a) = {}", mcd_dtw(&a, &a, DEFAULT_N_CEPS)?);
    println!("MCD(a, a slowed) = {}", mcd_dtw(&a, &slow, DEFAULT_N_CEPS)?);
    let shifted = Tensor::from_vec(a.shape(), a.data().iter().map(|v| v + 0.3 * v * v).collect());
    println!("MCD(a, distorted) = {:.4} dB", mcd_dtw(&a, &shifted, DEFAULT_N_CEPS)?);

    println!("TER([1,3] vs [1,2,3]) = {:.4}", token_error_rate_ids(&[1, 3], &[1, 2, 3])?);
    println!("TER([3,4,5] vs [1,2]) = {:.4}", token_error_rate_ids(&[3, 4, 5], &[1, 2])?);

    let emb = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]]);
    println!("silhouette {:.4}", chapter_cluster_metric(&emb, &["c1", "c1", "c2", "c2"])?);

    let records = vec![
        UtteranceRecord { id: "b".into(), mcd_db: 4.0, ter: 0.5 },
        UtteranceRecord { id: "a".into(), mcd_db: 2.0, ter: 0.25 },
    ];
    let report = EvalReport::new("TACA-LM", records, Some(0.9), None, "hash", 0, serde_json::Value::Null)?;
    let json = report.to_json()?;
    assert_eq!(EvalReport::from_json(&json)?, report);
    print!("{json}");
    Ok(())
}
