//! Training, evaluation, and ablation drivers over generated worlds.
//!
//! The counting model trains with Smooth L1 on raw scores; RMSE is always
//! reported from rounded predictions (the raw-score RMSE additionally
//! drives best-checkpoint selection). The VQA adapters train the same task
//! as per-class sigmoid classification over the answer vocabulary with
//! binary cross-entropy; the captioner trains teacher-forced on the scene
//! captions, and its "rmse" metric column carries the greedy-decode token
//! error rate (the harness's error measure for captions).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::adapters::{AdapterOutput, BanModel, MurelModel, UpdnModel};
use crate::captioning::{CaptionConfig, CaptionModel};
use crate::checkpoint::{
    ban_from_checkpoint, ban_to_checkpoint, caption_from_checkpoint, caption_to_checkpoint,
    counting_from_checkpoint, counting_to_checkpoint, murel_from_checkpoint, murel_to_checkpoint,
    updn_from_checkpoint, updn_to_checkpoint, Checkpoint,
};
use crate::counting::{round_count, CountingConfig, CountingInput, CountingModel, Variant};
use crate::embedding::QuestionFeatures;
use crate::error::{LatError, Result};
use crate::features::{build_scene_features, DetectedObject, SceneFeatures};
use crate::synth::{caption_for, Dataset, SampleRecord, SPLIT_TEST_SEEN, SPLIT_TEST_SYNONYM, SPLIT_TRAIN, SPLIT_VAL};
use crate::tensor::norm::Mode;
use crate::tensor::optim::AdamState;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Counting,
    Updn,
    Murel,
    Ban,
    Caption,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Counting => "counting",
            ModelKind::Updn => "updn",
            ModelKind::Murel => "murel",
            ModelKind::Ban => "ban",
            ModelKind::Caption => "caption",
        }
    }
}

impl FromStr for ModelKind {
    type Err = LatError;

    fn from_str(s: &str) -> Result<ModelKind> {
        match s.to_lowercase().as_str() {
            "counting" => Ok(ModelKind::Counting),
            "updn" => Ok(ModelKind::Updn),
            "murel" => Ok(ModelKind::Murel),
            "ban" => Ok(ModelKind::Ban),
            "caption" => Ok(ModelKind::Caption),
            other => Err(LatError::Contract(format!("unknown model kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub d: usize,
    pub k: usize,
    pub d_e: usize,
    pub d_att: usize,
    pub joint_dim: usize,
    pub fingerprint: String,
    /// Stream one line per epoch to stdout while training.
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            kind: ModelKind::Counting,
            variant: Variant::Full,
            epochs: 30,
            batch_size: 8,
            learning_rate: 5e-4,
            seed: 7,
            d: 64,
            k: 8,
            d_e: 64,
            d_att: 32,
            joint_dim: 32,
            fingerprint: String::new(),
            progress: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub rmse: f64,
    pub loss: f64,
    pub seconds: f64,
    pub fingerprint: String,
}

pub const METRICS_HEADER: &str = "epoch,split,rmse,loss,seconds,fingerprint";

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch, r.split, r.rmse, r.loss, r.seconds, r.fingerprint
        )?;
    }
    Ok(())
}

/// One record with every model-facing feature precomputed.
pub struct PreparedSample {
    pub scene_id: u64,
    pub scene: SceneFeatures,
    pub question: QuestionFeatures,
    pub labels: Vec<String>,
    pub tokens: Vec<String>,
    pub answer: i64,
    pub caption: Vec<String>,
}

pub fn prepare_record(dataset: &Dataset, record: &SampleRecord) -> Result<PreparedSample> {
    let objects: Vec<DetectedObject> = record
        .objects
        .iter()
        .map(|o| DetectedObject {
            class_label: o.label.clone(),
            box_xywh: o.box_xywh,
            visual_feature: o.visual.clone(),
            confidence: o.confidence,
        })
        .collect();
    let scene = build_scene_features(
        &objects,
        &dataset.table,
        dataset.spec.image_w,
        dataset.spec.image_h,
    )?;
    let question = dataset
        .table
        .embed_question(&record.question, dataset.spec.max_question_len)?;
    let tokens: Vec<String> = record
        .question
        .iter()
        .take(dataset.spec.max_question_len)
        .cloned()
        .collect();
    Ok(PreparedSample {
        scene_id: record.scene_id,
        scene,
        question,
        labels: record.labels(),
        tokens,
        answer: record.answer,
        caption: caption_for(&record.labels(), &dataset.taxonomy),
    })
}

pub fn prepare_split(dataset: &Dataset, split: &str) -> Result<Vec<PreparedSample>> {
    dataset
        .split(split)
        .into_iter()
        .map(|r| prepare_record(dataset, r))
        .collect()
}

/// Vocabulary for the one-hot ablations: `<unk>` plus every distinct
/// question token and object label in the dataset, sorted.
pub fn onehot_vocab(dataset: &Dataset) -> Result<Vocab> {
    let mut words = std::collections::BTreeSet::new();
    for record in &dataset.records {
        for t in &record.question {
            words.insert(t.clone());
        }
        for o in &record.objects {
            words.insert(o.label.clone());
        }
    }
    let mut tokens = vec![crate::vocab::UNK.to_string()];
    tokens.extend(words);
    Vocab::from_tokens(tokens)
}

/// Sorted distinct training answers; the classifier heads predict over
/// this list.
pub fn answer_vocab(dataset: &Dataset) -> Vec<i64> {
    let mut answers: Vec<i64> = dataset
        .split(SPLIT_TRAIN)
        .iter()
        .map(|r| r.answer)
        .collect();
    answers.sort_unstable();
    answers.dedup();
    answers
}

pub struct EvalStats {
    pub rmse_rounded: f64,
    pub rmse_raw: f64,
    pub mean_loss: f64,
}

pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub best_epoch: usize,
    pub best_val_raw_rmse: f64,
    pub checkpoint_path: Option<PathBuf>,
}

fn epoch_rng(seed: u64, epoch: usize) -> crate::Rng {
    crate::rng(seed ^ 0xA076_1D64_78BD_642Fu64.wrapping_mul(epoch as u64 + 1))
}

// ---------------------------------------------------------------------------
// counting
// ---------------------------------------------------------------------------

pub fn evaluate_counting(model: &CountingModel, samples: &[PreparedSample]) -> Result<EvalStats> {
    if samples.is_empty() {
        return Err(LatError::Degenerate("evaluation split is empty".into()));
    }
    let mut sq_rounded = 0.0;
    let mut sq_raw = 0.0;
    let mut loss_total = 0.0;
    for s in samples {
        let input = CountingInput {
            scene: &s.scene,
            question: &s.question,
            labels: &s.labels,
            tokens: &s.tokens,
        };
        let out = model.forward(&input, Mode::Eval)?;
        let raw = out.score.value()?;
        let rounded = round_count(raw) as f64;
        let target = s.answer as f64;
        sq_rounded += (rounded - target) * (rounded - target);
        sq_raw += (raw - target) * (raw - target);
        loss_total += model.training_loss(&out.score, s.answer)?.value()?;
    }
    let n = samples.len() as f64;
    Ok(EvalStats {
        rmse_rounded: (sq_rounded / n).sqrt(),
        rmse_raw: (sq_raw / n).sqrt(),
        mean_loss: loss_total / n,
    })
}

pub fn train_counting(
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(CountingModel, TrainOutcome)> {
    let train = prepare_split(dataset, SPLIT_TRAIN)?;
    let val = prepare_split(dataset, SPLIT_VAL)?;
    if train.is_empty() || val.is_empty() {
        return Err(LatError::Degenerate("training needs nonempty train and val splits".into()));
    }
    let vocab = match cfg.variant {
        Variant::OnehotSeparate | Variant::OnehotShared => Some(onehot_vocab(dataset)?),
        _ => None,
    };
    let mut rng = crate::rng(cfg.seed);
    let model_cfg = CountingConfig::new(dataset.spec.d_v, dataset.spec.d_w, cfg.d, cfg.k)
        .with_variant(cfg.variant);
    let model = CountingModel::with_vocab(model_cfg, vocab, &mut rng)?;
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    let mut adam = AdamState::new(cfg.learning_rate);

    let mut metrics = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_val_raw = f64::INFINITY;
    let mut best_snapshot: Option<Vec<Vec<f64>>> = None;
    let mut best_bn: Option<(Vec<f64>, Vec<f64>)> = None;
    let checkpoint_path = out_dir.map(|d| d.join("best.ckpt"));

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut train_sq = 0.0;
        let mut train_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let inputs: Vec<CountingInput> = chunk
                .iter()
                .map(|&idx| {
                    let s = &train[idx];
                    CountingInput {
                        scene: &s.scene,
                        question: &s.question,
                        labels: &s.labels,
                        tokens: &s.tokens,
                    }
                })
                .collect();
            let outputs = model.forward_batch(&inputs, Mode::Train)?;
            let mut batch_loss: Option<Tensor> = None;
            for (&idx, out) in chunk.iter().zip(&outputs) {
                let s = &train[idx];
                let raw = out.score.value()?;
                let rounded = round_count(raw) as f64;
                train_sq += (rounded - s.answer as f64) * (rounded - s.answer as f64);
                let loss = model.training_loss(&out.score, s.answer)?;
                train_loss += loss.value()?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(&loss)?,
                    None => loss,
                });
            }
            let batch_loss = batch_loss.expect("nonempty chunk").scale(1.0 / chunk.len() as f64)?;
            batch_loss.backward()?;
            adam.step(&params)?;
        }
        let val_stats = evaluate_counting(&model, &val)?;
        let seconds = started.elapsed().as_secs_f64();
        if cfg.progress {
            println!(
                "epoch {epoch}: train_loss {:.5} val_rmse {:.4} val_raw_rmse {:.4} ({seconds:.1}s)",
                train_loss / train.len() as f64,
                val_stats.rmse_rounded,
                val_stats.rmse_raw
            );
        }
        metrics.push(MetricsRecord {
            epoch,
            split: SPLIT_TRAIN.into(),
            rmse: (train_sq / train.len() as f64).sqrt(),
            loss: train_loss / train.len() as f64,
            seconds,
            fingerprint: cfg.fingerprint.clone(),
        });
        metrics.push(MetricsRecord {
            epoch,
            split: SPLIT_VAL.into(),
            rmse: val_stats.rmse_rounded,
            loss: val_stats.mean_loss,
            seconds,
            fingerprint: cfg.fingerprint.clone(),
        });
        if val_stats.rmse_raw < best_val_raw {
            best_val_raw = val_stats.rmse_raw;
            best_epoch = epoch;
            best_snapshot = Some(params.iter().map(|p| p.values()).collect());
            best_bn = model
                .bn_state()
                .map(|(bn, _)| (bn.running_mean.borrow().clone(), bn.running_var.borrow().clone()));
        }
    }

    // restore the best-by-validation parameters before returning or saving
    if let Some(snapshot) = &best_snapshot {
        for (p, values) in params.iter().zip(snapshot) {
            p.set_values(values)?;
        }
    }
    if let (Some((mean, var)), Some((bn, _))) = (&best_bn, model.bn_state()) {
        bn.running_mean.borrow_mut().copy_from_slice(mean);
        bn.running_var.borrow_mut().copy_from_slice(var);
    }
    if let Some(path) = &checkpoint_path {
        counting_to_checkpoint(&model).save(path)?;
    }
    Ok((
        model,
        TrainOutcome { metrics, best_epoch, best_val_raw_rmse: best_val_raw, checkpoint_path },
    ))
}

// ---------------------------------------------------------------------------
// VQA adapters on the counting task (classification heads)
// ---------------------------------------------------------------------------

pub enum AdapterModel {
    Updn(UpdnModel),
    Murel(MurelModel),
    Ban(BanModel),
}

impl AdapterModel {
    pub fn new(kind: ModelKind, dataset: &Dataset, cfg: &TrainConfig, d_o: usize) -> Result<AdapterModel> {
        let mut rng = crate::rng(cfg.seed);
        let (d_v, d_w) = (dataset.spec.d_v, dataset.spec.d_w);
        match kind {
            ModelKind::Updn => Ok(AdapterModel::Updn(UpdnModel::new(
                d_v, d_w, cfg.d, d_o, true, &mut rng,
            )?)),
            ModelKind::Murel => Ok(AdapterModel::Murel(MurelModel::new(
                d_v, d_w, cfg.d, d_o, true, &mut rng,
            )?)),
            ModelKind::Ban => Ok(AdapterModel::Ban(BanModel::new(
                d_v, d_w, cfg.d, cfg.joint_dim, d_o, true, &mut rng,
            )?)),
            other => Err(LatError::Contract(format!(
                "{} is not an adapter model",
                other.name()
            ))),
        }
    }

    pub fn forward(&self, scene: &SceneFeatures, question: &QuestionFeatures) -> Result<AdapterOutput> {
        match self {
            AdapterModel::Updn(m) => m.forward(scene, question),
            AdapterModel::Murel(m) => m.forward(scene, question),
            AdapterModel::Ban(m) => m.forward(scene, question),
        }
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        match self {
            AdapterModel::Updn(m) => m.params(),
            AdapterModel::Murel(m) => m.params(),
            AdapterModel::Ban(m) => m.params(),
        }
    }

    pub fn to_checkpoint(&self, dataset: &Dataset, cfg: &TrainConfig) -> Checkpoint {
        let dims = (dataset.spec.d_v, dataset.spec.d_w, cfg.d);
        match self {
            AdapterModel::Updn(m) => updn_to_checkpoint(m, dims),
            AdapterModel::Murel(m) => murel_to_checkpoint(m, dims),
            AdapterModel::Ban(m) => ban_to_checkpoint(m, dims),
        }
    }
}

fn adapter_predicted_value(out: &AdapterOutput, answers: &[i64]) -> i64 {
    let mut best = 0usize;
    for (i, v) in out.scores.iter().enumerate() {
        if *v > out.scores[best] {
            best = i;
        }
    }
    answers[best]
}

pub fn evaluate_adapter(
    model: &AdapterModel,
    answers: &[i64],
    samples: &[PreparedSample],
) -> Result<EvalStats> {
    if samples.is_empty() {
        return Err(LatError::Degenerate("evaluation split is empty".into()));
    }
    let mut sq = 0.0;
    let mut loss_total = 0.0;
    for s in samples {
        let out = model.forward(&s.scene, &s.question)?;
        let pred = adapter_predicted_value(&out, answers) as f64;
        sq += (pred - s.answer as f64) * (pred - s.answer as f64);
        let target = answer_target(answers, s.answer)?;
        loss_total += out.logits.bce_with_logits(&target)?.value()?;
    }
    let n = samples.len() as f64;
    let rmse = (sq / n).sqrt();
    Ok(EvalStats { rmse_rounded: rmse, rmse_raw: rmse, mean_loss: loss_total / n })
}

fn answer_target(answers: &[i64], answer: i64) -> Result<Tensor> {
    let mut t = vec![0.0; answers.len()];
    if let Some(idx) = answers.iter().position(|a| *a == answer) {
        t[idx] = 1.0;
    }
    Tensor::from_vec(&[answers.len()], t)
}

pub fn train_adapter(
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(AdapterModel, Vec<i64>, TrainOutcome)> {
    let train = prepare_split(dataset, SPLIT_TRAIN)?;
    let val = prepare_split(dataset, SPLIT_VAL)?;
    if train.is_empty() || val.is_empty() {
        return Err(LatError::Degenerate("training needs nonempty train and val splits".into()));
    }
    let answers = answer_vocab(dataset);
    if answers.len() < 2 {
        return Err(LatError::Degenerate("answer vocabulary needs at least 2 classes".into()));
    }
    let model = AdapterModel::new(cfg.kind, dataset, cfg, answers.len())?;
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    let mut adam = AdamState::new(cfg.learning_rate);

    let mut metrics = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best_snapshot: Option<Vec<Vec<f64>>> = None;
    let checkpoint_path = out_dir.map(|d| d.join("best.ckpt"));

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut train_sq = 0.0;
        let mut train_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut batch_loss: Option<Tensor> = None;
            for &idx in chunk {
                let s = &train[idx];
                let out = model.forward(&s.scene, &s.question)?;
                let pred = adapter_predicted_value(&out, &answers) as f64;
                train_sq += (pred - s.answer as f64) * (pred - s.answer as f64);
                let target = answer_target(&answers, s.answer)?;
                let loss = out.logits.bce_with_logits(&target)?;
                train_loss += loss.value()?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(&loss)?,
                    None => loss,
                });
            }
            let batch_loss = batch_loss.expect("nonempty chunk").scale(1.0 / chunk.len() as f64)?;
            batch_loss.backward()?;
            adam.step(&params)?;
        }
        let val_stats = evaluate_adapter(&model, &answers, &val)?;
        let seconds = started.elapsed().as_secs_f64();
        if cfg.progress {
            println!(
                "epoch {epoch}: train_loss {:.5} val_rmse {:.4} ({seconds:.1}s)",
                train_loss / train.len() as f64,
                val_stats.rmse_rounded
            );
        }
        metrics.push(MetricsRecord {
            epoch,
            split: SPLIT_TRAIN.into(),
            rmse: (train_sq / train.len() as f64).sqrt(),
            loss: train_loss / train.len() as f64,
            seconds,
            fingerprint: cfg.fingerprint.clone(),
        });
        metrics.push(MetricsRecord {
            epoch,
            split: SPLIT_VAL.into(),
            rmse: val_stats.rmse_rounded,
            loss: val_stats.mean_loss,
            seconds,
            fingerprint: cfg.fingerprint.clone(),
        });
        if val_stats.rmse_raw < best_val {
            best_val = val_stats.rmse_raw;
            best_epoch = epoch;
            best_snapshot = Some(params.iter().map(|p| p.values()).collect());
        }
    }
    if let Some(snapshot) = &best_snapshot {
        for (p, values) in params.iter().zip(snapshot) {
            p.set_values(values)?;
        }
    }
    if let Some(path) = &checkpoint_path {
        model.to_checkpoint(dataset, cfg).save(path)?;
    }
    Ok((
        model,
        answers,
        TrainOutcome { metrics, best_epoch, best_val_raw_rmse: best_val, checkpoint_path },
    ))
}

// ---------------------------------------------------------------------------
// captioner
// ---------------------------------------------------------------------------

/// Greedy-decode token error rate against the reference caption body.
pub fn caption_token_error(model: &CaptionModel, dataset: &Dataset, s: &PreparedSample) -> Result<f64> {
    let reference = &s.caption[1..s.caption.len() - 1];
    let decoded = model.generate_caption(&s.scene, &dataset.table, reference.len() + 4)?;
    let len = reference.len().max(decoded.len()).max(1);
    let mismatches = (0..len)
        .filter(|&i| reference.get(i) != decoded.get(i))
        .count();
    Ok(mismatches as f64 / len as f64)
}

pub fn evaluate_caption(
    model: &CaptionModel,
    dataset: &Dataset,
    samples: &[PreparedSample],
) -> Result<EvalStats> {
    if samples.is_empty() {
        return Err(LatError::Degenerate("evaluation split is empty".into()));
    }
    let mut loss_total = 0.0;
    let mut err_total = 0.0;
    for s in samples {
        loss_total += model.caption_loss(&s.scene, &s.caption, &dataset.table)?.value()?;
        err_total += caption_token_error(model, dataset, s)?;
    }
    let n = samples.len() as f64;
    Ok(EvalStats {
        rmse_rounded: err_total / n,
        rmse_raw: err_total / n,
        mean_loss: loss_total / n,
    })
}

pub fn train_caption(
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(CaptionModel, TrainOutcome)> {
    let train = prepare_split(dataset, SPLIT_TRAIN)?;
    let val = prepare_split(dataset, SPLIT_VAL)?;
    if train.is_empty() || val.is_empty() {
        return Err(LatError::Degenerate("training needs nonempty train and val splits".into()));
    }
    let mut rng = crate::rng(cfg.seed);
    let model_cfg = CaptionConfig {
        d_v: dataset.spec.d_v,
        d_w: dataset.spec.d_w,
        d_e: cfg.d_e,
        d_att: cfg.d_att,
    };
    let model = CaptionModel::new(model_cfg, dataset.caption_vocab.clone(), true, &mut rng)?;
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t).collect();
    let mut adam = AdamState::new(cfg.learning_rate);

    let mut metrics = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut best_snapshot: Option<Vec<Vec<f64>>> = None;
    let checkpoint_path = out_dir.map(|d| d.join("best.ckpt"));

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut train_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut batch_loss: Option<Tensor> = None;
            for &idx in chunk {
                let s = &train[idx];
                let loss = model.caption_loss(&s.scene, &s.caption, &dataset.table)?;
                train_loss += loss.value()?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => acc.add(&loss)?,
                    None => loss,
                });
            }
            let batch_loss = batch_loss.expect("nonempty chunk").scale(1.0 / chunk.len() as f64)?;
            batch_loss.backward()?;
            adam.step(&params)?;
        }
        let val_stats = evaluate_caption(&model, dataset, &val)?;
        let seconds = started.elapsed().as_secs_f64();
        if cfg.progress {
            println!(
                "epoch {epoch}: train_loss {:.5} val_token_err {:.4} ({seconds:.1}s)",
                train_loss / train.len() as f64,
                val_stats.rmse_rounded
            );
        }
        metrics.push(MetricsRecord {
            epoch,
            split: SPLIT_TRAIN.into(),
            rmse: 0.0, // no decode pass over the train split
            loss: train_loss / train.len() as f64,
            seconds,
            fingerprint: cfg.fingerprint.clone(),
        });
        metrics.push(MetricsRecord {
            epoch,
            split: SPLIT_VAL.into(),
            rmse: val_stats.rmse_rounded,
            loss: val_stats.mean_loss,
            seconds,
            fingerprint: cfg.fingerprint.clone(),
        });
        if val_stats.mean_loss < best_val {
            best_val = val_stats.mean_loss;
            best_epoch = epoch;
            best_snapshot = Some(params.iter().map(|p| p.values()).collect());
        }
    }
    if let Some(snapshot) = &best_snapshot {
        for (p, values) in params.iter().zip(snapshot) {
            p.set_values(values)?;
        }
    }
    if let Some(path) = &checkpoint_path {
        caption_to_checkpoint(&model).save(path)?;
    }
    Ok((
        model,
        TrainOutcome { metrics, best_epoch, best_val_raw_rmse: best_val, checkpoint_path },
    ))
}

// ---------------------------------------------------------------------------
// evaluation from checkpoints, ablation table
// ---------------------------------------------------------------------------

pub fn evaluate_checkpoint(
    path: &Path,
    dataset: &Dataset,
    split: &str,
    fingerprint: &str,
) -> Result<MetricsRecord> {
    let started = Instant::now();
    let ckpt = Checkpoint::load(path)?;
    let samples = prepare_split(dataset, split)?;
    let stats = match ckpt.model.as_str() {
        "counting" => {
            let model = counting_from_checkpoint(&ckpt)?;
            evaluate_counting(&model, &samples)?
        }
        "updn" | "murel" | "ban" => {
            let model = match ckpt.model.as_str() {
                "updn" => AdapterModel::Updn(updn_from_checkpoint(&ckpt)?),
                "murel" => AdapterModel::Murel(murel_from_checkpoint(&ckpt)?),
                _ => AdapterModel::Ban(ban_from_checkpoint(&ckpt)?),
            };
            let answers = answer_vocab(dataset);
            evaluate_adapter(&model, &answers, &samples)?
        }
        "caption" => {
            let model = caption_from_checkpoint(&ckpt)?;
            evaluate_caption(&model, dataset, &samples)?
        }
        other => return Err(LatError::Contract(format!("unknown checkpoint kind '{other}'"))),
    };
    Ok(MetricsRecord {
        epoch: 0,
        split: split.to_string(),
        rmse: stats.rmse_rounded,
        loss: stats.mean_loss,
        seconds: started.elapsed().as_secs_f64(),
        fingerprint: fingerprint.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub split: String,
    pub rmse: f64,
    pub loss: f64,
}

/// Train each variant with identical seeds and budget, then evaluate on
/// both test splits. Variants run in parallel; each is independently
/// seeded, so the table is deterministic.
pub fn ablate(dataset: &Dataset, cfg: &TrainConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    use rayon::prelude::*;
    let results: Vec<Result<Vec<AblationRow>>> = variants
        .par_iter()
        .map(|&variant| {
            let run_cfg = TrainConfig { variant, kind: ModelKind::Counting, ..cfg.clone() };
            let (model, _) = train_counting(dataset, &run_cfg, None)?;
            let mut rows = Vec::new();
            for split in [SPLIT_TEST_SEEN, SPLIT_TEST_SYNONYM] {
                let samples = prepare_split(dataset, split)?;
                let stats = evaluate_counting(&model, &samples)?;
                rows.push(AblationRow {
                    variant,
                    split: split.to_string(),
                    rmse: stats.rmse_rounded,
                    loss: stats.mean_loss,
                });
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_world, WorldSpec};

    fn tiny_world(dir: &Path) -> Dataset {
        let spec = WorldSpec {
            seed: 21,
            classes: 4,
            d_w: 12,
            d_v: 10,
            train_scenes: 24,
            val_scenes: 8,
            test_seen_scenes: 8,
            test_synonym_scenes: 8,
            ..WorldSpec::default()
        };
        generate_world(&spec, dir).unwrap();
        Dataset::load(dir).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            d: 16,
            k: 4,
            d_e: 8,
            d_att: 8,
            joint_dim: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_world(dir.path());
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 1, ..tiny_cfg() };
        let mut rng = crate::rng(cfg.seed);
        let reference = CountingModel::new(
            CountingConfig::new(dataset.spec.d_v, dataset.spec.d_w, cfg.d, cfg.k),
            &mut rng,
        )
        .unwrap();
        let (model, _) = train_counting(&dataset, &cfg, None).unwrap();
        for ((name, a), (_, b)) in reference.params().iter().zip(model.params().iter()) {
            assert_eq!(a.values(), b.values(), "parameter {name} moved with lr=0");
        }
    }

    #[test]
    fn same_seed_reproduces_the_metric_stream() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_world(dir.path());
        let cfg = tiny_cfg();
        let (_, out_a) = train_counting(&dataset, &cfg, None).unwrap();
        let (_, out_b) = train_counting(&dataset, &cfg, None).unwrap();
        assert_eq!(out_a.metrics.len(), out_b.metrics.len());
        for (a, b) in out_a.metrics.iter().zip(&out_b.metrics) {
            assert_eq!(a.rmse, b.rmse);
            assert_eq!(a.loss, b.loss);
            assert_eq!(a.split, b.split);
        }
    }

    #[test]
    fn training_moves_the_loss_down() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_world(dir.path());
        let cfg = TrainConfig { epochs: 4, learning_rate: 3e-3, ..tiny_cfg() };
        let (_, outcome) = train_counting(&dataset, &cfg, None).unwrap();
        let first = outcome.metrics.first().unwrap().loss;
        let last = outcome
            .metrics
            .iter()
            .filter(|m| m.split == SPLIT_TRAIN)
            .next_back()
            .unwrap()
            .loss;
        assert!(last < first, "loss did not improve: {first} -> {last}");
    }

    #[test]
    fn checkpoint_written_and_evaluable() {
        let dir = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let dataset = tiny_world(dir.path());
        let cfg = tiny_cfg();
        let (_, outcome) = train_counting(&dataset, &cfg, Some(out.path())).unwrap();
        let ckpt = outcome.checkpoint_path.unwrap();
        let record = evaluate_checkpoint(&ckpt, &dataset, SPLIT_TEST_SEEN, "fp").unwrap();
        assert!(record.rmse >= 0.0);
        assert_eq!(record.split, SPLIT_TEST_SEEN);
    }

    #[test]
    fn adapters_and_captioner_train_one_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_world(dir.path());
        for kind in [ModelKind::Updn, ModelKind::Murel, ModelKind::Ban] {
            let cfg = TrainConfig { kind, epochs: 1, ..tiny_cfg() };
            let (model, answers, outcome) = train_adapter(&dataset, &cfg, None).unwrap();
            assert_eq!(outcome.metrics.len(), 2);
            let samples = prepare_split(&dataset, SPLIT_TEST_SEEN).unwrap();
            let stats = evaluate_adapter(&model, &answers, &samples).unwrap();
            assert!(stats.rmse_rounded >= 0.0);
        }
        let cfg = TrainConfig { kind: ModelKind::Caption, epochs: 1, ..tiny_cfg() };
        let (model, outcome) = train_caption(&dataset, &cfg, None).unwrap();
        assert_eq!(outcome.metrics.len(), 2);
        let samples = prepare_split(&dataset, SPLIT_VAL).unwrap();
        let stats = evaluate_caption(&model, &dataset, &samples).unwrap();
        assert!(stats.rmse_rounded >= 0.0 && stats.rmse_rounded <= 1.0);
    }

    #[test]
    fn metrics_csv_has_the_pinned_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows = vec![MetricsRecord {
            epoch: 0,
            split: "train".into(),
            rmse: 1.5,
            loss: 0.3,
            seconds: 0.01,
            fingerprint: "abc".into(),
        }];
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert!(lines.next().unwrap().starts_with("0,train,1.5,0.3,"));
    }
}
