//! The factored count regressor versus its dense reconstruction, plus the
//! parameter-economy arithmetic that motivates the factorization.
//!
//! ```bash
//! cargo run -p lat --example tucker_regressor
//! ```

use lat::counting::{generalized_inner, CountingConfig, CountingModel};
use lat::tensor::Tensor;
use rand::Rng as _;

fn main() -> lat::Result<()> {
    let mut rng = lat::rng(5);
    let (d, k) = (12, 4);
    let model = CountingModel::new(CountingConfig::new(8, 6, d, k), &mut rng)?;

    // the factored path never materializes W_r; the dense reconstruction is
    // a testing oracle only
    let f: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fast = model
        .predict_count(&Tensor::from_vec(&[d], f.clone())?, &Tensor::from_vec(&[d], q.clone())?)?
        .value()?;

    let wr = model.reconstruct_wr()?;
    let outer: Vec<f64> = f.iter().flat_map(|a| q.iter().map(move |b| a * b)).collect();
    let b_r = model.params().iter().find(|(n, _)| n == "reg.b_r").unwrap().1.value()?;
    let slow = generalized_inner(&outer, &wr) + b_r;

    println!("factored score      = {fast:.12}");
    println!("reconstructed score = {slow:.12}");
    println!("difference          = {:.3e}", (fast - slow).abs());

    // parameter economy: k^2 + 2dk + 1 stored values against d^2 + 1 dense
    let stored = model.regression_param_count();
    println!("\nstored regressor parameters at d={d}, k={k}: {stored}");
    assert_eq!(stored, k * k + 2 * d * k + 1);

    let (d_big, k_big) = (512, 11);
    let mut rng2 = lat::rng(6);
    let big = CountingModel::new(CountingConfig::new(8, 6, d_big, k_big), &mut rng2)?;
    println!(
        "at d={d_big}, k={k_big}: {} factored vs {} dense ({}% saved)",
        big.regression_param_count(),
        d_big * d_big + 1,
        100 - 100 * big.regression_param_count() / (d_big * d_big + 1)
    );
    Ok(())
}
