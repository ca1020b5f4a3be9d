//! Write random toy weights in the ZTH1 container, read them back and check
//! the architecture census.
//!
//! ```text
//! cargo run --example weights_roundtrip -- toy.zth
//! ```

use z2h::denoiser::toy_weight_census;
use z2h::*;

fn main() -> z2h::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "toy_random.zth".into());
    let toy = ToyDenoiser::random(42);
    save_weights(toy.weights(), path.as_ref())?;
    let back = load_weights(path.as_ref())?;
    back.check_census(&toy_weight_census())?;
    for (name, t) in back.iter() {
        println!("{name:24} {:?}", t.shape());
    }
    let same = back.to_bytes() == toy.weights().to_bytes();
    println!("{} tensors, {} bytes, identical: {same}", back.len(), back.to_bytes().len());
    Ok(())
}
