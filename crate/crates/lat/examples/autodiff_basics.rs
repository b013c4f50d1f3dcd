//! Tour of the tensor engine: build a graph, run backward, and verify the
//! analytic gradients against central finite differences.
//!
//! ```bash
//! cargo run -p lat --example autodiff_basics
//! ```

use lat::tensor::gradcheck::{finite_diff_check, op_gradient_suite, DEFAULT_EPS};
use lat::tensor::Tensor;

fn main() -> lat::Result<()> {
    // a small expression: loss = sum(tanh(A . B) * C)
    let mut rng = lat::rng(42);
    let a = Tensor::glorot(3, 4, &mut rng);
    let b = Tensor::glorot(4, 2, &mut rng);
    let c = Tensor::from_vec(&[3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5])?;
    let loss = a.matmul(&b)?.tanh()?.mul(&c)?.sum()?;
    loss.backward()?;
    println!("loss = {:.6}", loss.value()?);
    println!("dA[0..4] = {:?}", &a.grad().unwrap()[0..4]);

    // the same loss, checked against finite differences
    lat::tensor::zero_grad_all(&[a.clone(), b.clone()]);
    let err = finite_diff_check(
        &[a.clone(), b.clone()],
        || a.matmul(&b)?.tanh()?.mul(&c)?.sum(),
        DEFAULT_EPS,
    )?;
    println!("finite-difference max relative error: {err:.3e}");

    // sweep every op in the engine
    println!("\nper-op gradient suite (5 random trials each):");
    for entry in op_gradient_suite(5)? {
        println!("  {:<18} {:>12.3e}", entry.name, entry.max_rel_err);
    }
    Ok(())
}
