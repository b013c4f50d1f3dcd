//! Versioned text checkpoints with named parameter blocks.
//!
//! Layout (line oriented, LF endings):
//!
//! ```text
//! latckpt 1
//! model <kind>
//! meta <key> <value…>
//! tensor <name> <ndims> <dim0> <dim1> …
//! <one line of space-separated 16-digit hex f64 bit patterns>
//! …
//! end
//! ```
//!
//! Values are stored as IEEE-754 bit patterns, so save/load round-trips are
//! value-identical by construction.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::adapters::{BanModel, MurelModel, UpdnModel};
use crate::captioning::{CaptionConfig, CaptionModel};
use crate::counting::{CountingConfig, CountingModel, Variant};
use crate::error::{LatError, Result};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub const MAGIC: &str = "latckpt";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: String,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(model: &str) -> Checkpoint {
        Checkpoint { model: model.to_string(), meta: Vec::new(), tensors: Vec::new() }
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta(key)
            .ok_or_else(|| LatError::Contract(format!("checkpoint lacks meta key '{key}'")))?
            .parse()
            .map_err(|_| LatError::Contract(format!("meta key '{key}' is not an integer")))
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor) {
        self.tensors.push((name.to_string(), t.shape(), t.values()));
    }

    pub fn push_raw(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) {
        self.tensors.push((name.to_string(), shape, values));
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, v)| (s.as_slice(), v.as_slice()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{MAGIC} {VERSION}")?;
        writeln!(w, "model {}", self.model)?;
        for (k, v) in &self.meta {
            writeln!(w, "meta {k} {v}")?;
        }
        for (name, shape, values) in &self.tensors {
            write!(w, "tensor {name} {}", shape.len())?;
            for d in shape {
                write!(w, " {d}")?;
            }
            writeln!(w)?;
            let mut first = true;
            for v in values {
                if !first {
                    write!(w, " ")?;
                }
                write!(w, "{:016x}", v.to_bits())?;
                first = false;
            }
            writeln!(w)?;
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let parse_err = |line: usize, message: &str| LatError::Parse {
            line,
            message: message.to_string(),
        };

        let (line_no, header) = lines
            .next()
            .ok_or_else(|| parse_err(0, "empty checkpoint"))
            .and_then(|(i, l)| Ok((i + 1, l?)))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(MAGIC) {
            return Err(parse_err(line_no, "missing checkpoint magic"));
        }
        let version: u32 = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| parse_err(line_no, "missing version"))?;
        if version != VERSION {
            return Err(parse_err(line_no, &format!("unsupported version {version}")));
        }

        let mut model = String::new();
        let mut meta = Vec::new();
        let mut tensors = Vec::new();
        let mut saw_end = false;
        while let Some((idx, line)) = lines.next() {
            let line_no = idx + 1;
            let line = line?;
            let mut fields = line.split_whitespace();
            match fields.next() {
                Some("model") => {
                    model = fields
                        .next()
                        .ok_or_else(|| parse_err(line_no, "model line without a kind"))?
                        .to_string();
                }
                Some("meta") => {
                    let key = fields
                        .next()
                        .ok_or_else(|| parse_err(line_no, "meta line without a key"))?
                        .to_string();
                    let rest: Vec<&str> = fields.collect();
                    meta.push((key, rest.join(" ")));
                }
                Some("tensor") => {
                    let name = fields
                        .next()
                        .ok_or_else(|| parse_err(line_no, "tensor line without a name"))?
                        .to_string();
                    let ndims: usize = fields
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| parse_err(line_no, "tensor line without ndims"))?;
                    let shape: Vec<usize> = fields
                        .map(|f| f.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| parse_err(line_no, "non-integer dimension"))?;
                    if shape.len() != ndims {
                        return Err(parse_err(line_no, "dimension count mismatch"));
                    }
                    let numel: usize = shape.iter().product();
                    let (vidx, vline) = lines
                        .next()
                        .ok_or_else(|| parse_err(line_no, "tensor without a value line"))
                        .and_then(|(i, l)| Ok((i + 1, l?)))?;
                    let mut values = Vec::with_capacity(numel);
                    for field in vline.split_whitespace() {
                        let bits = u64::from_str_radix(field, 16).map_err(|_| {
                            parse_err(vidx, &format!("bad hex value '{field}'"))
                        })?;
                        values.push(f64::from_bits(bits));
                    }
                    if values.len() != numel {
                        return Err(parse_err(
                            vidx,
                            &format!("{} values for shape {:?}", values.len(), shape),
                        ));
                    }
                    tensors.push((name, shape, values));
                }
                Some("end") => {
                    saw_end = true;
                    break;
                }
                Some(other) => {
                    return Err(parse_err(line_no, &format!("unknown record '{other}'")));
                }
                None => continue,
            }
        }
        if !saw_end {
            return Err(parse_err(0, "checkpoint truncated: no end marker"));
        }
        if model.is_empty() {
            return Err(parse_err(0, "checkpoint lacks a model line"));
        }
        Ok(Checkpoint { model, meta, tensors })
    }
}

fn restore_params(ckpt: &Checkpoint, params: &[(String, Tensor)]) -> Result<()> {
    for (name, tensor) in params {
        let (shape, values) = ckpt.tensor(name).ok_or_else(|| {
            LatError::Contract(format!("checkpoint lacks tensor '{name}'"))
        })?;
        if shape != tensor.shape().as_slice() {
            return Err(LatError::shape(
                "checkpoint_load",
                format!("'{name}': stored {:?} vs model {:?}", shape, tensor.shape()),
            ));
        }
        tensor.set_values(values)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// counting model
// ---------------------------------------------------------------------------

pub fn counting_to_checkpoint(model: &CountingModel) -> Checkpoint {
    let mut ckpt = Checkpoint::new("counting");
    ckpt.push_meta("d_v", model.cfg.d_v);
    ckpt.push_meta("d_w", model.cfg.d_w);
    ckpt.push_meta("d", model.cfg.d);
    ckpt.push_meta("k", model.cfg.k);
    ckpt.push_meta("variant", model.cfg.variant.name());
    if let Some(vocab) = model.vocab() {
        ckpt.push_meta("vocab", vocab.tokens().join(" "));
    }
    for (name, t) in model.params() {
        ckpt.push_tensor(&name, &t);
    }
    if let Some((bn, prefix)) = model.bn_state() {
        ckpt.push_raw(
            &format!("{prefix}.running_mean"),
            vec![bn.features],
            bn.running_mean.borrow().clone(),
        );
        ckpt.push_raw(
            &format!("{prefix}.running_var"),
            vec![bn.features],
            bn.running_var.borrow().clone(),
        );
    }
    ckpt
}

pub fn counting_from_checkpoint(ckpt: &Checkpoint) -> Result<CountingModel> {
    if ckpt.model != "counting" {
        return Err(LatError::Contract(format!(
            "expected a counting checkpoint, found '{}'",
            ckpt.model
        )));
    }
    let variant: Variant = ckpt
        .meta("variant")
        .ok_or_else(|| LatError::Contract("checkpoint lacks the variant".into()))?
        .parse()?;
    let cfg = CountingConfig::new(
        ckpt.meta_usize("d_v")?,
        ckpt.meta_usize("d_w")?,
        ckpt.meta_usize("d")?,
        ckpt.meta_usize("k")?,
    )
    .with_variant(variant);
    let vocab = match ckpt.meta("vocab") {
        Some(tokens) => Some(Vocab::from_tokens(
            tokens.split_whitespace().map(|s| s.to_string()).collect(),
        )?),
        None => None,
    };
    let mut rng = crate::rng(0);
    let model = CountingModel::with_vocab(cfg, vocab, &mut rng)?;
    restore_params(ckpt, &model.params())?;
    if let Some((bn, prefix)) = model.bn_state() {
        for (slot, name) in [
            (&bn.running_mean, format!("{prefix}.running_mean")),
            (&bn.running_var, format!("{prefix}.running_var")),
        ] {
            let (_, values) = ckpt.tensor(&name).ok_or_else(|| {
                LatError::Contract(format!("checkpoint lacks tensor '{name}'"))
            })?;
            slot.borrow_mut().copy_from_slice(values);
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// VQA adapters
// ---------------------------------------------------------------------------

pub fn updn_to_checkpoint(model: &UpdnModel, dims: (usize, usize, usize)) -> Checkpoint {
    let mut ckpt = Checkpoint::new("updn");
    let (d_v, d_w, d) = dims;
    ckpt.push_meta("d_v", d_v);
    ckpt.push_meta("d_w", d_w);
    ckpt.push_meta("d", d);
    ckpt.push_meta("d_o", model.d_o);
    ckpt.push_meta("lat", model.lat.is_some() as u8);
    for (name, t) in model.params() {
        ckpt.push_tensor(&name, &t);
    }
    ckpt
}

pub fn updn_from_checkpoint(ckpt: &Checkpoint) -> Result<UpdnModel> {
    if ckpt.model != "updn" {
        return Err(LatError::Contract(format!("expected an updn checkpoint, found '{}'", ckpt.model)));
    }
    let mut rng = crate::rng(0);
    let model = UpdnModel::new(
        ckpt.meta_usize("d_v")?,
        ckpt.meta_usize("d_w")?,
        ckpt.meta_usize("d")?,
        ckpt.meta_usize("d_o")?,
        ckpt.meta_usize("lat")? == 1,
        &mut rng,
    )?;
    restore_params(ckpt, &model.params())?;
    Ok(model)
}

pub fn murel_to_checkpoint(model: &MurelModel, dims: (usize, usize, usize)) -> Checkpoint {
    let mut ckpt = Checkpoint::new("murel");
    let (d_v, d_w, d) = dims;
    ckpt.push_meta("d_v", d_v);
    ckpt.push_meta("d_w", d_w);
    ckpt.push_meta("d", d);
    ckpt.push_meta("d_o", model.d_o);
    ckpt.push_meta("lat", model.attention.is_some() as u8);
    for (name, t) in model.params() {
        ckpt.push_tensor(&name, &t);
    }
    ckpt
}

pub fn murel_from_checkpoint(ckpt: &Checkpoint) -> Result<MurelModel> {
    if ckpt.model != "murel" {
        return Err(LatError::Contract(format!("expected a murel checkpoint, found '{}'", ckpt.model)));
    }
    let mut rng = crate::rng(0);
    let model = MurelModel::new(
        ckpt.meta_usize("d_v")?,
        ckpt.meta_usize("d_w")?,
        ckpt.meta_usize("d")?,
        ckpt.meta_usize("d_o")?,
        ckpt.meta_usize("lat")? == 1,
        &mut rng,
    )?;
    restore_params(ckpt, &model.params())?;
    Ok(model)
}

pub fn ban_to_checkpoint(model: &BanModel, dims: (usize, usize, usize)) -> Checkpoint {
    let mut ckpt = Checkpoint::new("ban");
    let (d_v, d_w, d) = dims;
    ckpt.push_meta("d_v", d_v);
    ckpt.push_meta("d_w", d_w);
    ckpt.push_meta("d", d);
    ckpt.push_meta("joint_dim", model.joint_dim);
    ckpt.push_meta("d_o", model.d_o);
    ckpt.push_meta("lat", model.block_l.is_some() as u8);
    for (name, t) in model.params() {
        ckpt.push_tensor(&name, &t);
    }
    ckpt
}

pub fn ban_from_checkpoint(ckpt: &Checkpoint) -> Result<BanModel> {
    if ckpt.model != "ban" {
        return Err(LatError::Contract(format!("expected a ban checkpoint, found '{}'", ckpt.model)));
    }
    let mut rng = crate::rng(0);
    let model = BanModel::new(
        ckpt.meta_usize("d_v")?,
        ckpt.meta_usize("d_w")?,
        ckpt.meta_usize("d")?,
        ckpt.meta_usize("joint_dim")?,
        ckpt.meta_usize("d_o")?,
        ckpt.meta_usize("lat")? == 1,
        &mut rng,
    )?;
    restore_params(ckpt, &model.params())?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// captioner
// ---------------------------------------------------------------------------

pub fn caption_to_checkpoint(model: &CaptionModel) -> Checkpoint {
    let mut ckpt = Checkpoint::new("caption");
    ckpt.push_meta("d_v", model.cfg.d_v);
    ckpt.push_meta("d_w", model.cfg.d_w);
    ckpt.push_meta("d_e", model.cfg.d_e);
    ckpt.push_meta("d_att", model.cfg.d_att);
    ckpt.push_meta("lat", model.has_lat() as u8);
    ckpt.push_meta("vocab", model.vocab.tokens().join(" "));
    for (name, t) in model.params() {
        ckpt.push_tensor(&name, &t);
    }
    ckpt
}

pub fn caption_from_checkpoint(ckpt: &Checkpoint) -> Result<CaptionModel> {
    if ckpt.model != "caption" {
        return Err(LatError::Contract(format!(
            "expected a caption checkpoint, found '{}'",
            ckpt.model
        )));
    }
    let vocab = Vocab::from_tokens(
        ckpt.meta("vocab")
            .ok_or_else(|| LatError::Contract("checkpoint lacks the vocabulary".into()))?
            .split_whitespace()
            .map(|s| s.to_string())
            .collect(),
    )?;
    let cfg = CaptionConfig {
        d_v: ckpt.meta_usize("d_v")?,
        d_w: ckpt.meta_usize("d_w")?,
        d_e: ckpt.meta_usize("d_e")?,
        d_att: ckpt.meta_usize("d_att")?,
    };
    let mut rng = crate::rng(0);
    let model = CaptionModel::new(cfg, vocab, ckpt.meta_usize("lat")? == 1, &mut rng)?;
    restore_params(ckpt, &model.params())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counting::CountingInput;
    use crate::tensor::norm::Mode;

    #[test]
    fn counting_round_trip_is_value_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = crate::rng(1);
        let model = CountingModel::new(CountingConfig::new(6, 4, 8, 3), &mut rng).unwrap();
        // drive the BN running stats off their defaults
        let (scene, question, labels, tokens) =
            crate::counting::toy_input(3, 6, 4, 4, &mut rng).unwrap();
        let input = CountingInput { scene: &scene, question: &question, labels: &labels, tokens: &tokens };
        model.forward(&input, Mode::Train).unwrap();

        counting_to_checkpoint(&model).save(&path).unwrap();
        let loaded = counting_from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        for ((name_a, a), (name_b, b)) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(name_a, name_b);
            assert_eq!(a.values(), b.values(), "tensor {name_a}");
        }
        let (bn_a, _) = model.bn_state().unwrap();
        let (bn_b, _) = loaded.bn_state().unwrap();
        assert_eq!(*bn_a.running_mean.borrow(), *bn_b.running_mean.borrow());
        assert_eq!(*bn_a.running_var.borrow(), *bn_b.running_var.borrow());

        // forwards agree exactly
        let a = model.forward(&input, Mode::Eval).unwrap().score.value().unwrap();
        let b = loaded.forward(&input, Mode::Eval).unwrap().score.value().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn special_values_survive_the_hex_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bits.ckpt");
        let mut ckpt = Checkpoint::new("counting");
        let tricky = vec![0.1, -0.0, 1.0 / 3.0, f64::MIN_POSITIVE, 1e308, -2.2250738585072014e-308];
        ckpt.push_raw("t", vec![6], tricky.clone());
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let (_, values) = loaded.tensor("t").unwrap();
        for (a, b) in tricky.iter().zip(values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_checkpoint_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        std::fs::write(&path, "latckpt 1\nmodel counting\n").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(LatError::Parse { .. })));
    }

    #[test]
    fn dimension_mismatch_on_load_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = crate::rng(2);
        let model = CountingModel::new(CountingConfig::new(6, 4, 8, 3), &mut rng).unwrap();
        let mut ckpt = counting_to_checkpoint(&model);
        // claim a different encoding size than the stored tensors
        for m in ckpt.meta.iter_mut() {
            if m.0 == "d" {
                m.1 = "16".into();
            }
        }
        ckpt.save(&path).unwrap();
        match counting_from_checkpoint(&Checkpoint::load(&path).unwrap()) {
            Err(LatError::ShapeMismatch { .. }) | Err(LatError::Contract(_)) => {}
            Err(other) => panic!("unexpected error kind: {other}"),
            Ok(_) => panic!("mismatched checkpoint loaded successfully"),
        }
    }

    #[test]
    fn caption_round_trip_preserves_generation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cap.ckpt");
        let mut rng = crate::rng(3);
        let (model, scene, table) = crate::captioning::toy_caption_setup(&mut rng).unwrap();
        caption_to_checkpoint(&model).save(&path).unwrap();
        let loaded = caption_from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        let a = model.generate_caption(&scene, &table, 6).unwrap();
        let b = loaded.generate_caption(&scene, &table, 6).unwrap();
        assert_eq!(a, b);
    }
}
