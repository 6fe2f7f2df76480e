//! Central-difference check of every parameter of a tiny model.
//!
//!     cargo run --example gradient_check

use ttm::ttransformer::tiny_gradient_check;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let report = tiny_gradient_check(0, 3, 1e-4)?;
    for (name, err, n) in &report.tensors {
        println!("{name:28} {n:6} params  max rel err {err:.2e}");
    }
    println!("worst: {:.2e}", report.max_relative_error());
    Ok(())
}
