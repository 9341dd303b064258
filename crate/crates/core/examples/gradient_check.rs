//! Finite-difference check of every registered kernel.

use anyhow::Result;
use coldproxy::diffcore::gradcheck::{grad_check_kernel, sample_point, DEFAULT_EPS, TOLERANCE_F64};
use coldproxy::diffcore::registry;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kernel in registry() {
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let point = sample_point(kernel.name(), &mut rng)?;
            let r = grad_check_kernel(kernel.as_ref(), &point, DEFAULT_EPS, TOLERANCE_F64)?;
            worst = worst.max(r.max_rel_err);
        }
        let status = if worst <= TOLERANCE_F64 { "ok" } else { "FAIL" };
        println!("{:<16} max rel err {worst:.2e}  {status}", kernel.name());
    }
    Ok(())
}
