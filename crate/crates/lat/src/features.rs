//! Per-image feature bundles: visual features V, linguistically-aware
//! features L (word vectors of the detected class labels), and normalized
//! box features B.
//!
//! A B row is `(cx, cy, h, w, area)` with the center normalized by the
//! image size, height by image height, width by image width, and the area
//! computed as the product of the normalized height and width.

use crate::embedding::EmbeddingTable;
use crate::error::{LatError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct DetectedObject {
    pub class_label: String,
    /// `(x, y, width, height)` in pixels, top-left origin.
    pub box_xywh: [f64; 4],
    pub visual_feature: Vec<f64>,
    pub confidence: f64,
}

/// Immutable feature bundle for one scene: all three matrices share the
/// object count `m`.
pub struct SceneFeatures {
    /// `[m, d_v]` row-major.
    pub v: Vec<f64>,
    /// `[m, d_w]` row-major.
    pub l: Vec<f64>,
    /// `[m, 5]` row-major, rows `(cx, cy, h, w, area)`, all in `[0, 1]`.
    pub b: Vec<f64>,
    pub m: usize,
    pub d_v: usize,
    pub d_w: usize,
}

impl SceneFeatures {
    pub fn v_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(&[self.m, self.d_v], self.v.clone())
    }

    pub fn l_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(&[self.m, self.d_w], self.l.clone())
    }

    pub fn b_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(&[self.m, 5], self.b.clone())
    }

    /// `O = V || B`: row-wise concatenation, visual columns first.
    pub fn concat_visual_box(&self) -> Result<Tensor> {
        let cols = self.d_v + 5;
        let mut o = Vec::with_capacity(self.m * cols);
        for i in 0..self.m {
            o.extend_from_slice(&self.v[i * self.d_v..(i + 1) * self.d_v]);
            o.extend_from_slice(&self.b[i * 5..(i + 1) * 5]);
        }
        Tensor::from_vec(&[self.m, cols], o)
    }
}

pub fn build_scene_features(
    objects: &[DetectedObject],
    table: &EmbeddingTable,
    image_w: f64,
    image_h: f64,
) -> Result<SceneFeatures> {
    if objects.is_empty() {
        return Err(LatError::Degenerate("scene with zero objects".into()));
    }
    if image_w <= 0.0 || image_h <= 0.0 {
        return Err(LatError::Contract(format!(
            "image dimensions must be positive, got {image_w} x {image_h}"
        )));
    }
    let m = objects.len();
    let d_v = objects[0].visual_feature.len();
    let d_w = table.dim();
    let mut v = Vec::with_capacity(m * d_v);
    let mut l = Vec::with_capacity(m * d_w);
    let mut b = Vec::with_capacity(m * 5);
    for (i, obj) in objects.iter().enumerate() {
        if obj.visual_feature.len() != d_v {
            return Err(LatError::shape(
                "build_scene_features",
                format!(
                    "object {i} visual feature length {} vs {d_v}",
                    obj.visual_feature.len()
                ),
            ));
        }
        if !(0.0..=1.0).contains(&obj.confidence) {
            return Err(LatError::Contract(format!(
                "object {i} confidence {} outside [0, 1]",
                obj.confidence
            )));
        }
        let [x, y, w, h] = obj.box_xywh;
        let eps = 1e-9;
        if w <= 0.0 || h <= 0.0 || x < -eps || y < -eps || x + w > image_w + eps || y + h > image_h + eps
        {
            return Err(LatError::Contract(format!(
                "object {i} box ({x}, {y}, {w}, {h}) outside image {image_w} x {image_h}"
            )));
        }
        v.extend_from_slice(&obj.visual_feature);
        l.extend_from_slice(&table.embed_label(&obj.class_label)?);
        let hn = h / image_h;
        let wn = w / image_w;
        b.push((x + w / 2.0) / image_w);
        b.push((y + h / 2.0) / image_h);
        b.push(hn);
        b.push(wn);
        b.push(hn * wn);
    }
    Ok(SceneFeatures { v, l, b, m, d_v, d_w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn toy_table() -> EmbeddingTable {
        let text = "car 1 0\ndog 0 1\nsedan 0.9 0.1\n";
        EmbeddingTable::load(Cursor::new(text), None).unwrap()
    }

    fn obj(label: &str, bx: [f64; 4]) -> DetectedObject {
        DetectedObject {
            class_label: label.into(),
            box_xywh: bx,
            visual_feature: vec![0.5, -0.5, 1.0],
            confidence: 0.9,
        }
    }

    #[test]
    fn full_image_box_normalizes_to_unit_row() {
        let t = toy_table();
        let s = build_scene_features(&[obj("car", [0.0, 0.0, 640.0, 480.0])], &t, 640.0, 480.0)
            .unwrap();
        assert_eq!(s.b, vec![0.5, 0.5, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn quarter_box_normalizes_as_expected() {
        let t = toy_table();
        let s = build_scene_features(&[obj("car", [0.0, 0.0, 320.0, 240.0])], &t, 640.0, 480.0)
            .unwrap();
        assert_eq!(s.b, vec![0.25, 0.25, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn two_objects_stack_into_two_rows() {
        let t = toy_table();
        let s = build_scene_features(
            &[obj("car", [0.0, 0.0, 10.0, 10.0]), obj("dog", [5.0, 5.0, 10.0, 10.0])],
            &t,
            640.0,
            480.0,
        )
        .unwrap();
        assert_eq!(s.m, 2);
        assert_eq!(s.v.len(), 2 * 3);
        assert_eq!(s.l.len(), 2 * 2);
        assert_eq!(s.b.len(), 2 * 5);
        assert_eq!(&s.l[0..2], &[1.0, 0.0]);
        assert_eq!(&s.l[2..4], &[0.0, 1.0]);
    }

    #[test]
    fn zero_objects_is_degenerate() {
        let t = toy_table();
        assert!(matches!(
            build_scene_features(&[], &t, 640.0, 480.0),
            Err(LatError::Degenerate(_))
        ));
    }

    #[test]
    fn out_of_bounds_box_is_a_contract_error() {
        let t = toy_table();
        let bad = obj("car", [600.0, 0.0, 100.0, 10.0]);
        assert!(matches!(
            build_scene_features(&[bad], &t, 640.0, 480.0),
            Err(LatError::Contract(_))
        ));
    }

    #[test]
    fn b_entries_stay_in_unit_interval_and_area_is_consistent() {
        let t = toy_table();
        let mut rng = crate::rng(11);
        use rand::Rng as _;
        for _ in 0..50 {
            let w = rng.gen_range(1.0..640.0);
            let h = rng.gen_range(1.0..480.0);
            let x = rng.gen_range(0.0..(640.0 - w));
            let y = rng.gen_range(0.0..(480.0 - h));
            let s =
                build_scene_features(&[obj("car", [x, y, w, h])], &t, 640.0, 480.0).unwrap();
            for v in &s.b {
                assert!((0.0..=1.0).contains(v), "b entry {v}");
            }
            assert!((s.b[4] - s.b[2] * s.b[3]).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_visual_box_appends_five_columns() {
        let t = toy_table();
        let s = build_scene_features(
            &[obj("car", [0.0, 0.0, 640.0, 480.0]), obj("dog", [0.0, 0.0, 64.0, 48.0])],
            &t,
            640.0,
            480.0,
        )
        .unwrap();
        let o = s.concat_visual_box().unwrap();
        assert_eq!(o.shape(), vec![2, 8]);
        let vals = o.values();
        assert_eq!(&vals[0..3], &[0.5, -0.5, 1.0]);
        assert_eq!(&vals[3..8], &[0.5, 0.5, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn l_inherits_embedding_geometry_for_single_word_labels() {
        // cos(car, sedan) > cos(car, dog) must survive embed_label exactly
        let t = toy_table();
        let car = t.embed_label("car").unwrap();
        let sedan = t.embed_label("sedan").unwrap();
        let dog = t.embed_label("dog").unwrap();
        use crate::embedding::cosine;
        assert!(cosine(&t.lookup("car").0, &t.lookup("sedan").0) > cosine(&t.lookup("car").0, &t.lookup("dog").0));
        assert!(cosine(&car, &sedan) > cosine(&car, &dog));
        assert_eq!(car, t.lookup("car").0);
    }
}
