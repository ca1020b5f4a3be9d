//! A single conditioning token makes cross-attention a value passthrough.
//! The softmax over one key is always 1, whatever the query.

use z2h::rng::{Purpose, StreamKey};
use z2h::*;

fn main() -> z2h::Result<()> {
    let q = StreamKey::new(1, Purpose::Scene).gaussian(&[4, 256, 8])?;
    let k = StreamKey::new(2, Purpose::Scene).gaussian(&[4, 1, 8])?;
    let v = StreamKey::new(3, Purpose::Scene).gaussian(&[4, 1, 8])?;
    let scores = z2h::tensor::attention_scores(&q, &k)?;
    let probs = z2h::tensor::softmax_rows(&scores)?;
    println!("score matrix {:?}, every softmax weight = 1: {}", scores.shape(), probs.data().iter().all(|&p| p == 1.0));

    let out = attention_forward(&q, &k, &v, None, None)?;
    let worst = (0..4 * 256 * 8)
        .map(|i| (out.data()[i] - v.data()[(i / (256 * 8)) * 8 + i % 8]).abs())
        .fold(0.0f32, f32::max);
    println!("max |out - v| = {worst:e}");
    Ok(())
}
