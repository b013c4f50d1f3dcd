//! One forward pass of the counting model on a generated scene, printing
//! the co-attention weights over objects and question words.
//!
//! ```bash
//! cargo run -p lat --example counting_forward
//! ```

use lat::counting::{round_count, CountingConfig, CountingInput, CountingModel};
use lat::synth::{generate_world, Dataset, WorldSpec, SPLIT_TRAIN};
use lat::tensor::norm::Mode;
use lat::train::prepare_record;

fn main() -> lat::Result<()> {
    let dir = std::env::temp_dir().join("lat-example-counting-forward");
    let spec = WorldSpec {
        seed: 3,
        classes: 6,
        d_w: 16,
        d_v: 24,
        train_scenes: 8,
        val_scenes: 2,
        test_seen_scenes: 2,
        test_synonym_scenes: 2,
        ..WorldSpec::default()
    };
    generate_world(&spec, &dir)?;
    let dataset = Dataset::load(&dir)?;

    let record = dataset.split(SPLIT_TRAIN)[0];
    let sample = prepare_record(&dataset, record)?;
    println!("question: {}", record.question.join(" "));
    println!("objects:  {}", sample.labels.join(", "));
    println!("answer:   {}", record.answer);

    let mut rng = lat::rng(11);
    let cfg = CountingConfig::new(spec.d_v, spec.d_w, 32, 6);
    let model = CountingModel::new(cfg, &mut rng)?;
    let input = CountingInput {
        scene: &sample.scene,
        question: &sample.question,
        labels: &sample.labels,
        tokens: &sample.tokens,
    };
    let out = model.forward(&input, Mode::Eval)?;

    println!("\nuntrained forward:");
    println!("  raw score      = {:.4}", out.score.value()?);
    println!("  rounded count  = {}", round_count(out.score.value()?));
    println!("  object weights (mu):");
    for (label, mu) in sample.labels.iter().zip(&out.weights.mu) {
        println!("    {label:<10} {mu:.4}");
    }
    println!("  word weights (nu):");
    for (token, nu) in sample.tokens.iter().zip(&out.weights.nu) {
        println!("    {token:<10} {nu:.4}");
    }
    let mu_sum: f64 = out.weights.mu.iter().sum();
    let nu_sum: f64 = out.weights.nu.iter().sum();
    println!("  sums: mu = {mu_sum:.9}, nu = {nu_sum:.9}");
    Ok(())
}
