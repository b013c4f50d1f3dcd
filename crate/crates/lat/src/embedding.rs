//! Word-vector tables loaded from text files.
//!
//! File format, shared with the synthetic harness: one token per line
//! followed by its vector, single-space separated, LF line endings, floats
//! parsed as f64. An optional first line `count dim` (two integers) is
//! tolerated and skipped. Tokens are case-folded; lookups for unknown
//! tokens return a zero vector flagged as out-of-vocabulary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{LatError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
    /// Notes accumulated during load (duplicate tokens kept-first).
    pub warnings: Vec<String>,
}

/// Question words embedded into a fixed-size, masked matrix.
pub struct QuestionFeatures {
    /// Row-major `[rows, dim]`; rows beyond the real tokens are zero.
    pub q: Vec<f64>,
    pub rows: usize,
    pub dim: usize,
    /// `true` marks a real token, `false` padding.
    pub mask: Vec<bool>,
}

impl QuestionFeatures {
    pub fn q_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(&[self.rows, self.dim], self.q.clone())
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

impl EmbeddingTable {
    /// Parse a word-vector stream. The dimension is `expected_dim` when
    /// given, otherwise inferred from the first data row.
    pub fn load<R: BufRead>(reader: R, expected_dim: Option<usize>) -> Result<EmbeddingTable> {
        let mut vectors: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut warnings = Vec::new();
        let mut dim = expected_dim;
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if idx == 0 && fields.len() == 2 {
                // "count dim" header
                if fields[0].parse::<usize>().is_ok() && fields[1].parse::<usize>().is_ok() {
                    continue;
                }
            }
            if fields.len() < 2 {
                return Err(LatError::Parse {
                    line: line_no,
                    message: "expected a token followed by vector components".into(),
                });
            }
            let token = fields[0].to_lowercase();
            let mut vector = Vec::with_capacity(fields.len() - 1);
            for f in &fields[1..] {
                let v: f64 = f.parse().map_err(|_| LatError::Parse {
                    line: line_no,
                    message: format!("non-numeric field '{f}'"),
                })?;
                vector.push(v);
            }
            match dim {
                None => dim = Some(vector.len()),
                Some(d) => {
                    if vector.len() != d {
                        return Err(LatError::Parse {
                            line: line_no,
                            message: format!(
                                "row width {} differs from dimension {}",
                                vector.len(),
                                d
                            ),
                        });
                    }
                }
            }
            if vectors.contains_key(&token) {
                warnings.push(format!("line {line_no}: duplicate token '{token}' ignored"));
                continue;
            }
            vectors.insert(token, vector);
        }
        let dim = dim.ok_or_else(|| LatError::Parse {
            line: 0,
            message: "embedding stream holds no data rows".into(),
        })?;
        Ok(EmbeddingTable { dim, vectors, warnings })
    }

    pub fn load_path(path: &Path, expected_dim: Option<usize>) -> Result<EmbeddingTable> {
        EmbeddingTable::load(BufReader::new(File::open(path)?), expected_dim)
    }

    /// Build a table directly from `(token, vector)` pairs.
    pub fn from_pairs(dim: usize, pairs: Vec<(String, Vec<f64>)>) -> Result<EmbeddingTable> {
        let mut vectors = BTreeMap::new();
        for (token, vector) in pairs {
            if vector.len() != dim {
                return Err(LatError::Contract(format!(
                    "vector for '{token}' has length {}, table dimension is {dim}",
                    vector.len()
                )));
            }
            vectors.insert(token.to_lowercase(), vector);
        }
        Ok(EmbeddingTable { dim, vectors, warnings: Vec::new() })
    }

    /// Serialize back to the text format (tokens in sorted order). Values
    /// print in Rust's shortest round-trip form, so a reload is
    /// vector-identical.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        for (token, vector) in &self.vectors {
            write!(w, "{token}")?;
            for v in vector {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_path(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save(&mut w)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vectors.contains_key(&token.to_lowercase())
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(|s| s.as_str())
    }

    /// Case-folded lookup: the stored vector and `true`, or a zero vector
    /// and `false` for out-of-vocabulary tokens.
    pub fn lookup(&self, token: &str) -> (Vec<f64>, bool) {
        match self.vectors.get(&token.to_lowercase()) {
            Some(v) => (v.clone(), true),
            None => (vec![0.0; self.dim], false),
        }
    }

    /// Embed an object class label. Multi-word labels average their known
    /// words; fully out-of-vocabulary labels embed to zero.
    pub fn embed_label(&self, label: &str) -> Result<Vec<f64>> {
        if label.trim().is_empty() {
            return Err(LatError::Contract("embed_label on an empty label".into()));
        }
        let mut sum = vec![0.0; self.dim];
        let mut known = 0usize;
        for word in label.split_whitespace() {
            let (v, hit) = self.lookup(word);
            if hit {
                known += 1;
                for (s, x) in sum.iter_mut().zip(&v) {
                    *s += x;
                }
            }
        }
        if known > 0 {
            for s in sum.iter_mut() {
                *s /= known as f64;
            }
        }
        Ok(sum)
    }

    /// Embed up to `max_len` question tokens into a padded, masked matrix.
    /// Tokens past `max_len` are dropped.
    pub fn embed_question(&self, tokens: &[String], max_len: usize) -> Result<QuestionFeatures> {
        if tokens.is_empty() {
            return Err(LatError::Contract("embed_question on an empty token list".into()));
        }
        if max_len == 0 {
            return Err(LatError::Contract("embed_question with max_len 0".into()));
        }
        let real = tokens.len().min(max_len);
        let mut q = vec![0.0; max_len * self.dim];
        let mut mask = vec![false; max_len];
        for (i, token) in tokens.iter().take(max_len).enumerate() {
            let (v, _known) = self.lookup(token);
            q[i * self.dim..(i + 1) * self.dim].copy_from_slice(&v);
            mask[i] = true;
        }
        debug_assert_eq!(mask.iter().filter(|m| **m).count(), real);
        Ok(QuestionFeatures { q, rows: max_len, dim: self.dim, mask })
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn table_3x4() -> EmbeddingTable {
        let text = "car 0.1 0.2 0.3 0.4\ntraffic 1 0 0 0\nlight 0 1 0 0\n";
        EmbeddingTable::load(Cursor::new(text), None).unwrap()
    }

    #[test]
    fn three_line_file_of_dim_4() {
        let t = table_3x4();
        assert_eq!(t.len(), 3);
        assert_eq!(t.dim(), 4);
    }

    #[test]
    fn inconsistent_row_width_errors_with_line_number() {
        let text = "car 0.1 0.2 0.3 0.4\nbus 1 2 3\n";
        let err = EmbeddingTable::load(Cursor::new(text), None).unwrap_err();
        match err {
            LatError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn header_line_is_skipped() {
        let text = "400000 300\ncar 0.5 0.5\n";
        let t = EmbeddingTable::load(Cursor::new(text), None).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn non_numeric_field_is_a_parse_error() {
        let text = "car 0.1 oops\n";
        assert!(matches!(
            EmbeddingTable::load(Cursor::new(text), None),
            Err(LatError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn duplicate_keeps_first_and_warns() {
        let text = "car 1 2\ncar 9 9\n";
        let t = EmbeddingTable::load(Cursor::new(text), None).unwrap();
        assert_eq!(t.lookup("car").0, vec![1.0, 2.0]);
        assert_eq!(t.warnings.len(), 1);
    }

    #[test]
    fn lookup_is_case_folded_and_oov_is_zero() {
        let t = table_3x4();
        let (a, known) = t.lookup("CAR");
        assert!(known);
        assert_eq!(a, t.lookup("car").0);
        let (z, known) = t.lookup("zzqx");
        assert!(!known);
        assert_eq!(z, vec![0.0; 4]);
    }

    #[test]
    fn embed_label_single_multi_and_oov() {
        let t = table_3x4();
        assert_eq!(t.embed_label("car").unwrap(), t.lookup("car").0);
        let avg = t.embed_label("traffic light").unwrap();
        assert_eq!(avg, vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(t.embed_label("zzqx").unwrap(), vec![0.0; 4]);
        // oov word excluded from the divisor
        let partial = t.embed_label("traffic zzqx").unwrap();
        assert_eq!(partial, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(t.embed_label("  ").is_err());
    }

    #[test]
    fn embed_question_pads_and_masks() {
        let t = table_3x4();
        let tokens: Vec<String> =
            ["car", "light", "zzqx"].iter().map(|s| s.to_string()).collect();
        let qf = t.embed_question(&tokens, 14).unwrap();
        assert_eq!(qf.rows, 14);
        assert_eq!(qf.real_tokens(), 3);
        // oov row is zero but masked true
        assert!(qf.mask[2]);
        assert_eq!(&qf.q[2 * 4..3 * 4], &[0.0; 4]);
        assert!(!qf.mask[3]);

        let many: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let qf = t.embed_question(&many, 14).unwrap();
        assert_eq!(qf.real_tokens(), 14);

        assert!(t.embed_question(&[], 14).is_err());
    }

    #[test]
    fn save_and_reload_round_trips_exactly() {
        let t = table_3x4();
        let mut buf = Vec::new();
        t.save(&mut buf).unwrap();
        let t2 = EmbeddingTable::load(Cursor::new(buf), None).unwrap();
        assert_eq!(t.len(), t2.len());
        for token in t.tokens() {
            assert_eq!(t.lookup(token).0, t2.lookup(token).0, "token {token}");
        }
    }
}
