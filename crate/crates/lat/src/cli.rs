//! The `lat` command line: world generation, training, evaluation,
//! ablation sweeps, gradient checks, and attention inspection.
//!
//! All knobs live in a plain `key=value` config file (`--config`); the
//! global flags `--seed` and `--out` override the seed and pick the output
//! directory. Exit codes: 0 success, 1 contract or parse error, 2 an
//! acceptance gate failed (`gate_rmse_max`, or a gradient above tolerance).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::counting::{round_count, CountingInput, Variant};
use crate::error::{LatError, Result};
use crate::synth::{generate_world, Dataset, WorldSpec, SPLIT_TEST_SEEN};
use crate::tensor::norm::Mode;
use crate::train::{
    ablate, evaluate_checkpoint, prepare_split, train_adapter, train_caption, train_counting,
    write_metrics_csv, MetricsRecord, ModelKind, TrainConfig, METRICS_HEADER,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_GATE: i32 = 2;

/// Gradient tolerance enforced by `grad-check`.
pub const GRAD_TOLERANCE: f64 = 1e-4;

const KNOWN_KEYS: [&str; 28] = [
    "seed",
    "classes",
    "d_w",
    "d_v",
    "train_scenes",
    "val_scenes",
    "test_seen_scenes",
    "test_synonym_scenes",
    "min_extra_objects",
    "max_extra_objects",
    "max_count",
    "noise_sigma",
    "synonym_cos_min",
    "cross_cos_max",
    "image_w",
    "image_h",
    "max_question_len",
    "data_dir",
    "model",
    "variant",
    "variants",
    "epochs",
    "batch_size",
    "learning_rate",
    "d",
    "k",
    "d_e",
    "d_att",
];
const KNOWN_KEYS_EXTRA: [&str; 5] =
    ["joint_dim", "checkpoint", "split", "sample_index", "gate_rmse_max"];

#[derive(Parser)]
#[command(name = "lat", version, about = "Linguistically-aware attention models on synthetic counting worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Seed override (wins over the config file's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Plain-text key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default `lat-out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world (embeddings, scenes, questions, splits).
    GenData,
    /// Train a model on a generated world.
    Train,
    /// Evaluate a checkpoint on one split.
    Eval,
    /// Train every requested counting variant and tabulate RMSE.
    Ablate,
    /// Finite-difference gradient verification of ops and full models.
    GradCheck,
    /// Dump attention weights for one sample as JSON.
    InspectAttention,
}

/// Entry point used by the binary and by tests; returns the process exit
/// code and prints human-readable progress to stdout/stderr.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version through this path
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::empty(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("seed", seed);
    }
    for key in cfg.keys() {
        if !KNOWN_KEYS.contains(&key) && !KNOWN_KEYS_EXTRA.contains(&key) {
            eprintln!("warning: unknown config key '{key}'");
        }
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("lat-out"))
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg, &out_dir(cli)),
        Command::Train => cmd_train(&cfg, &out_dir(cli)),
        Command::Eval => cmd_eval(&cfg, &out_dir(cli)),
        Command::Ablate => cmd_ablate(&cfg, &out_dir(cli)),
        Command::GradCheck => cmd_grad_check(&cfg),
        Command::InspectAttention => cmd_inspect(&cfg, cli.out.as_deref()),
    }
}

fn world_spec(cfg: &RunConfig) -> Result<WorldSpec> {
    let d = WorldSpec::default();
    Ok(WorldSpec {
        seed: cfg.u64_or("seed", d.seed)?,
        classes: cfg.usize_or("classes", d.classes)?,
        d_w: cfg.usize_or("d_w", d.d_w)?,
        d_v: cfg.usize_or("d_v", d.d_v)?,
        train_scenes: cfg.usize_or("train_scenes", d.train_scenes)?,
        val_scenes: cfg.usize_or("val_scenes", d.val_scenes)?,
        test_seen_scenes: cfg.usize_or("test_seen_scenes", d.test_seen_scenes)?,
        test_synonym_scenes: cfg.usize_or("test_synonym_scenes", d.test_synonym_scenes)?,
        min_extra_objects: cfg.usize_or("min_extra_objects", d.min_extra_objects)?,
        max_extra_objects: cfg.usize_or("max_extra_objects", d.max_extra_objects)?,
        max_count: cfg.i64_or("max_count", d.max_count)?,
        noise_sigma: cfg.f64_or("noise_sigma", d.noise_sigma)?,
        synonym_cos_min: cfg.f64_or("synonym_cos_min", d.synonym_cos_min)?,
        cross_cos_max: cfg.f64_or("cross_cos_max", d.cross_cos_max)?,
        image_w: cfg.f64_or("image_w", d.image_w)?,
        image_h: cfg.f64_or("image_h", d.image_h)?,
        max_question_len: cfg.usize_or("max_question_len", d.max_question_len)?,
    })
}

fn train_config(cfg: &RunConfig, kind: ModelKind) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        kind,
        variant: cfg.str_or("variant", "full").parse()?,
        epochs: cfg.usize_or("epochs", d.epochs)?,
        batch_size: cfg.usize_or("batch_size", d.batch_size)?,
        learning_rate: cfg.f64_or("learning_rate", d.learning_rate)?,
        seed: cfg.u64_or("seed", d.seed)?,
        d: cfg.usize_or("d", d.d)?,
        k: cfg.usize_or("k", d.k)?,
        d_e: cfg.usize_or("d_e", d.d_e)?,
        d_att: cfg.usize_or("d_att", d.d_att)?,
        joint_dim: cfg.usize_or("joint_dim", d.joint_dim)?,
        fingerprint: cfg.fingerprint(&[("command", "train"), ("model", kind.name())]),
        progress: true,
    })
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.get("data_dir")
        .map(PathBuf::from)
        .ok_or_else(|| LatError::Contract("config key 'data_dir' is required".into()))
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let spec = world_spec(cfg)?;
    let summary = generate_world(&spec, out)?;
    println!(
        "world written to {} ({} records, {} embedding tokens)",
        out.display(),
        summary.records,
        summary.embedding_tokens
    );
    for (split, n) in &summary.per_split {
        println!("  {split}: {n} scenes");
    }
    Ok(EXIT_OK)
}

fn print_metrics(rows: &[MetricsRecord]) {
    println!("{METRICS_HEADER}");
    for r in rows {
        println!(
            "{},{},{:.6},{:.6},{:.3},{}",
            r.epoch, r.split, r.rmse, r.loss, r.seconds, r.fingerprint
        );
    }
}

fn apply_gate(cfg: &RunConfig, rmse: f64) -> Result<i32> {
    match cfg.get("gate_rmse_max") {
        None => Ok(EXIT_OK),
        Some(raw) => {
            let gate: f64 = raw
                .parse()
                .map_err(|_| LatError::Contract(format!("bad gate_rmse_max '{raw}'")))?;
            if rmse <= gate {
                println!("gate: rmse {rmse:.6} within {gate}");
                Ok(EXIT_OK)
            } else {
                eprintln!("gate: rmse {rmse:.6} exceeds {gate}");
                Ok(EXIT_GATE)
            }
        }
    }
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let dataset = Dataset::load(&data_dir(cfg)?)?;
    let kind: ModelKind = cfg.str_or("model", "counting").parse()?;
    let tc = train_config(cfg, kind)?;
    std::fs::create_dir_all(out)?;
    let (metrics, final_val) = match kind {
        ModelKind::Counting => {
            let (_, outcome) = train_counting(&dataset, &tc, Some(out))?;
            let val = outcome
                .metrics
                .iter()
                .rev()
                .find(|m| m.split == "val")
                .map(|m| m.rmse)
                .unwrap_or(f64::INFINITY);
            (outcome.metrics, val)
        }
        ModelKind::Caption => {
            let (_, outcome) = train_caption(&dataset, &tc, Some(out))?;
            let val = outcome
                .metrics
                .iter()
                .rev()
                .find(|m| m.split == "val")
                .map(|m| m.rmse)
                .unwrap_or(f64::INFINITY);
            (outcome.metrics, val)
        }
        _ => {
            let (_, _, outcome) = train_adapter(&dataset, &tc, Some(out))?;
            let val = outcome
                .metrics
                .iter()
                .rev()
                .find(|m| m.split == "val")
                .map(|m| m.rmse)
                .unwrap_or(f64::INFINITY);
            (outcome.metrics, val)
        }
    };
    print_metrics(&metrics);
    write_metrics_csv(&out.join("metrics.csv"), &metrics)?;
    println!("checkpoint: {}", out.join("best.ckpt").display());
    apply_gate(cfg, final_val)
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let dataset = Dataset::load(&data_dir(cfg)?)?;
    let checkpoint = cfg
        .get("checkpoint")
        .map(PathBuf::from)
        .ok_or_else(|| LatError::Contract("config key 'checkpoint' is required".into()))?;
    let split = cfg.str_or("split", SPLIT_TEST_SEEN);
    let fingerprint = cfg.fingerprint(&[("command", "eval"), ("split", &split)]);
    let record = evaluate_checkpoint(&checkpoint, &dataset, &split, &fingerprint)?;
    print_metrics(std::slice::from_ref(&record));
    std::fs::create_dir_all(out)?;
    write_metrics_csv(&out.join("eval.csv"), std::slice::from_ref(&record))?;
    apply_gate(cfg, record.rmse)
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<i32> {
    let dataset = Dataset::load(&data_dir(cfg)?)?;
    let tc = train_config(cfg, ModelKind::Counting)?;
    let variants: Vec<Variant> = match cfg.get("variants") {
        None => Variant::all().to_vec(),
        Some(list) => list
            .split(',')
            .map(|v| v.trim().parse())
            .collect::<Result<_>>()?,
    };
    let rows = ablate(&dataset, &tc, &variants)?;
    std::fs::create_dir_all(out)?;
    let mut csv = String::from("variant,split,rmse,loss\n");
    println!("{:<20} {:<14} {:>9} {:>10}", "variant", "split", "rmse", "loss");
    for row in &rows {
        println!(
            "{:<20} {:<14} {:>9.4} {:>10.5}",
            row.variant.name(),
            row.split,
            row.rmse,
            row.loss
        );
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.variant.name(),
            row.split,
            row.rmse,
            row.loss
        ));
    }
    std::fs::write(out.join("ablation.csv"), csv)?;
    Ok(EXIT_OK)
}

fn cmd_grad_check(cfg: &RunConfig) -> Result<i32> {
    let seeds = cfg.u64_or("seed", 5)?.clamp(1, 100);
    let mut worst = 0.0f64;
    println!("{:<24} {:>14}", "surface", "max_rel_err");
    for entry in crate::tensor::gradcheck::op_gradient_suite(seeds)? {
        println!("{:<24} {:>14.3e}", entry.name, entry.max_rel_err);
        worst = worst.max(entry.max_rel_err);
    }
    for (name, err) in [
        ("counting_model", crate::counting::counting_gradient_check(17)?),
        ("updn_model", crate::adapters::updn_gradient_check(18)?),
        ("murel_model", crate::adapters::murel_gradient_check(19)?),
        ("ban_model", crate::adapters::ban_gradient_check(20)?),
        ("caption_model", crate::captioning::caption_gradient_check(21)?),
    ] {
        println!("{:<24} {:>14.3e}", name, err);
        worst = worst.max(err);
    }
    if worst < GRAD_TOLERANCE {
        println!("all gradients within {GRAD_TOLERANCE:.0e}");
        Ok(EXIT_OK)
    } else {
        eprintln!("worst gradient error {worst:.3e} exceeds {GRAD_TOLERANCE:.0e}");
        Ok(EXIT_GATE)
    }
}

fn cmd_inspect(cfg: &RunConfig, out: Option<&Path>) -> Result<i32> {
    let dataset = Dataset::load(&data_dir(cfg)?)?;
    let checkpoint = cfg
        .get("checkpoint")
        .map(PathBuf::from)
        .ok_or_else(|| LatError::Contract("config key 'checkpoint' is required".into()))?;
    let split = cfg.str_or("split", SPLIT_TEST_SEEN);
    let index = cfg.usize_or("sample_index", 0)?;
    let samples = prepare_split(&dataset, &split)?;
    let sample = samples.get(index).ok_or_else(|| {
        LatError::Contract(format!(
            "sample_index {index} out of range: split '{split}' has {} samples",
            samples.len()
        ))
    })?;

    let ckpt = crate::checkpoint::Checkpoint::load(&checkpoint)?;
    let report = match ckpt.model.as_str() {
        "counting" => {
            let model = crate::checkpoint::counting_from_checkpoint(&ckpt)?;
            let input = CountingInput {
                scene: &sample.scene,
                question: &sample.question,
                labels: &sample.labels,
                tokens: &sample.tokens,
            };
            let out = model.forward(&input, Mode::Eval)?;
            serde_json::json!({
                "model": "counting",
                "scene_id": sample.scene_id,
                "question": sample.tokens,
                "answer": sample.answer,
                "predicted_score": out.score.value()?,
                "predicted_count": round_count(out.score.value()?),
                "mu": out.weights.mu,
                "nu": out.weights.nu,
            })
        }
        "updn" | "murel" => {
            let model = match ckpt.model.as_str() {
                "updn" => crate::train::AdapterModel::Updn(
                    crate::checkpoint::updn_from_checkpoint(&ckpt)?,
                ),
                _ => crate::train::AdapterModel::Murel(
                    crate::checkpoint::murel_from_checkpoint(&ckpt)?,
                ),
            };
            let out = model.forward(&sample.scene, &sample.question)?;
            serde_json::json!({
                "model": ckpt.model,
                "scene_id": sample.scene_id,
                "question": sample.tokens,
                "answer": sample.answer,
                "gamma": out.gamma,
                "scores": out.scores,
            })
        }
        "ban" => {
            let model = crate::checkpoint::ban_from_checkpoint(&ckpt)?;
            let out = model.forward(&sample.scene, &sample.question)?;
            let maps: Vec<serde_json::Value> = out
                .maps
                .iter()
                .map(|(values, rows, cols)| {
                    serde_json::json!({ "rows": rows, "cols": cols, "values": values })
                })
                .collect();
            serde_json::json!({
                "model": "ban",
                "scene_id": sample.scene_id,
                "question": sample.tokens,
                "answer": sample.answer,
                "attention_maps": maps,
                "scores": out.scores,
            })
        }
        other => {
            return Err(LatError::Contract(format!(
                "inspect-attention does not support '{other}' checkpoints"
            )))
        }
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| LatError::Contract(format!("report serialization: {e}")))?;
    println!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("attention.json"), format!("{text}\n"))?;
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_subcommand_exits_with_error() {
        assert_eq!(run_from(["lat", "frobnicate"]), EXIT_ERROR);
    }

    #[test]
    fn help_exits_cleanly() {
        assert_eq!(run_from(["lat", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_data_dir_is_exit_one() {
        assert_eq!(run_from(["lat", "train"]), EXIT_ERROR);
    }
}
