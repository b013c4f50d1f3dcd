//! Differentiable tensor operations.
//!
//! Matrices are row-major with shape `[rows, cols]`; vectors are `[n]`;
//! scalars are rank-0 (`[]`). Binary elementwise ops require identical
//! shapes — expand explicitly with [`Tensor::expand_rows`] when a vector
//! must meet a matrix.

use super::{BackwardCtx, Tensor};
use crate::error::{LatError, Result};

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() != 2 {
        return Err(LatError::shape(op, format!("expected matrix, got {:?}", shape)));
    }
    Ok((shape[0], shape[1]))
}

fn dims1(t: &Tensor, op: &'static str) -> Result<usize> {
    let shape = t.shape();
    if shape.len() != 1 {
        return Err(LatError::shape(op, format!("expected vector, got {:?}", shape)));
    }
    Ok(shape[0])
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(LatError::shape(op, format!("{:?} vs {:?}", sa, sb)));
    }
    Ok(sa)
}

impl Tensor {
    // ----- elementwise binary -------------------------------------------------

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let shape = same_shape(self, rhs, "add")?;
        let values = self.with_values(|a| rhs.with_values(|b| {
            a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>()
        }));
        Tensor::from_op(
            "add",
            shape,
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(|ctx: &BackwardCtx| {
                vec![
                    ctx.needs[0].then(|| ctx.out_grad.to_vec()),
                    ctx.needs[1].then(|| ctx.out_grad.to_vec()),
                ]
            }),
        )
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let shape = same_shape(self, rhs, "sub")?;
        let values = self.with_values(|a| rhs.with_values(|b| {
            a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>()
        }));
        Tensor::from_op(
            "sub",
            shape,
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(|ctx: &BackwardCtx| {
                vec![
                    ctx.needs[0].then(|| ctx.out_grad.to_vec()),
                    ctx.needs[1].then(|| ctx.out_grad.iter().map(|g| -g).collect()),
                ]
            }),
        )
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let shape = same_shape(self, rhs, "mul")?;
        let values = self.with_values(|a| rhs.with_values(|b| {
            a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>()
        }));
        Tensor::from_op(
            "mul",
            shape,
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let a = ctx.parent_values[0];
                let b = ctx.parent_values[1];
                vec![
                    ctx.needs[0]
                        .then(|| ctx.out_grad.iter().zip(b).map(|(g, y)| g * y).collect()),
                    ctx.needs[1]
                        .then(|| ctx.out_grad.iter().zip(a).map(|(g, x)| g * x).collect()),
                ]
            }),
        )
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        let shape = same_shape(self, rhs, "div")?;
        let values = self.with_values(|a| rhs.with_values(|b| {
            a.iter().zip(b).map(|(x, y)| x / y).collect::<Vec<_>>()
        }));
        Tensor::from_op(
            "div",
            shape,
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let b = ctx.parent_values[1];
                let out = ctx.out_values;
                vec![
                    ctx.needs[0]
                        .then(|| ctx.out_grad.iter().zip(b).map(|(g, y)| g / y).collect()),
                    ctx.needs[1].then(|| {
                        ctx.out_grad
                            .iter()
                            .zip(out.iter().zip(b))
                            .map(|(g, (o, y))| -g * o / y)
                            .collect()
                    }),
                ]
            }),
        )
    }

    // ----- elementwise unary --------------------------------------------------

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    /// Multiply every entry by a compile-time constant.
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let values = self.with_values(|a| a.iter().map(|x| x * c).collect::<Vec<_>>());
        Tensor::from_op(
            "scale",
            self.shape(),
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                vec![ctx.needs[0].then(|| ctx.out_grad.iter().map(|g| g * c).collect())]
            }),
        )
    }

    /// Add a compile-time constant to every entry.
    pub fn offset(&self, c: f64) -> Result<Tensor> {
        let values = self.with_values(|a| a.iter().map(|x| x + c).collect::<Vec<_>>());
        Tensor::from_op(
            "offset",
            self.shape(),
            values,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| vec![ctx.needs[0].then(|| ctx.out_grad.to_vec())]),
        )
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let values = self.with_values(|a| a.iter().map(|x| x.tanh()).collect::<Vec<_>>());
        Tensor::from_op(
            "tanh",
            self.shape(),
            values,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| {
                vec![ctx.needs[0].then(|| {
                    ctx.out_grad
                        .iter()
                        .zip(ctx.out_values)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect()
                })]
            }),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        fn sig(x: f64) -> f64 {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        let values = self.with_values(|a| a.iter().map(|x| sig(*x)).collect::<Vec<_>>());
        Tensor::from_op(
            "sigmoid",
            self.shape(),
            values,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| {
                vec![ctx.needs[0].then(|| {
                    ctx.out_grad
                        .iter()
                        .zip(ctx.out_values)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect()
                })]
            }),
        )
    }

    /// Rectified linear unit; the subgradient at exactly zero is taken as 0.
    pub fn relu(&self) -> Result<Tensor> {
        let values = self.with_values(|a| a.iter().map(|x| x.max(0.0)).collect::<Vec<_>>());
        Tensor::from_op(
            "relu",
            self.shape(),
            values,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| {
                let x = ctx.parent_values[0];
                vec![ctx.needs[0].then(|| {
                    ctx.out_grad
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect()
                })]
            }),
        )
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        let values = self.with_values(|a| a.iter().map(|x| x.sqrt()).collect::<Vec<_>>());
        Tensor::from_op(
            "sqrt",
            self.shape(),
            values,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| {
                vec![ctx.needs[0].then(|| {
                    ctx.out_grad
                        .iter()
                        .zip(ctx.out_values)
                        .map(|(g, y)| g / (2.0 * y))
                        .collect()
                })]
            }),
        )
    }

    // ----- scalar broadcast helpers -------------------------------------------

    /// Add a scalar tensor to every entry.
    pub fn add_scalar(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(LatError::shape("add_scalar", format!("rhs shape {:?}", s.shape())));
        }
        let sv = s.with_values(|v| v[0]);
        let values = self.with_values(|a| a.iter().map(|x| x + sv).collect::<Vec<_>>());
        Tensor::from_op(
            "add_scalar",
            self.shape(),
            values,
            vec![self.clone(), s.clone()],
            Box::new(|ctx: &BackwardCtx| {
                vec![
                    ctx.needs[0].then(|| ctx.out_grad.to_vec()),
                    ctx.needs[1].then(|| vec![ctx.out_grad.iter().sum()]),
                ]
            }),
        )
    }

    /// Multiply every entry by a scalar tensor.
    pub fn mul_scalar(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(LatError::shape("mul_scalar", format!("rhs shape {:?}", s.shape())));
        }
        let sv = s.with_values(|v| v[0]);
        let values = self.with_values(|a| a.iter().map(|x| x * sv).collect::<Vec<_>>());
        Tensor::from_op(
            "mul_scalar",
            self.shape(),
            values,
            vec![self.clone(), s.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let a = ctx.parent_values[0];
                let s = ctx.parent_values[1][0];
                vec![
                    ctx.needs[0].then(|| ctx.out_grad.iter().map(|g| g * s).collect()),
                    ctx.needs[1]
                        .then(|| vec![ctx.out_grad.iter().zip(a).map(|(g, x)| g * x).sum()]),
                ]
            }),
        )
    }

    // ----- shape ---------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(LatError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(), shape),
            ));
        }
        let values = self.values();
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            values,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| vec![ctx.needs[0].then(|| ctx.out_grad.to_vec())]),
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "transpose")?;
        let values = self.with_values(|a| {
            let mut out = vec![0.0; a.len()];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a[i * c + j];
                }
            }
            out
        });
        Tensor::from_op(
            "transpose",
            vec![c, r],
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                vec![ctx.needs[0].then(|| {
                    let mut g = vec![0.0; ctx.out_grad.len()];
                    for j in 0..c {
                        for i in 0..r {
                            g[i * c + j] = ctx.out_grad[j * r + i];
                        }
                    }
                    g
                })]
            }),
        )
    }

    /// Repeat a vector `[d]` as the rows of an `[m, d]` matrix.
    pub fn expand_rows(&self, m: usize) -> Result<Tensor> {
        let d = dims1(self, "expand_rows")?;
        if m == 0 {
            return Err(LatError::Degenerate("expand_rows to zero rows".into()));
        }
        let values = self.with_values(|a| {
            let mut out = Vec::with_capacity(m * d);
            for _ in 0..m {
                out.extend_from_slice(a);
            }
            out
        });
        Tensor::from_op(
            "expand_rows",
            vec![m, d],
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                vec![ctx.needs[0].then(|| {
                    let mut g = vec![0.0; d];
                    for row in ctx.out_grad.chunks_exact(d) {
                        for (acc, v) in g.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    g
                })]
            }),
        )
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let (r, c) = dims2(self, "row")?;
        if i >= r {
            return Err(LatError::shape("row", format!("row {} of {} rows", i, r)));
        }
        let values = self.with_values(|a| a[i * c..(i + 1) * c].to_vec());
        Tensor::from_op(
            "row",
            vec![c],
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                vec![ctx.needs[0].then(|| {
                    let mut g = vec![0.0; r * c];
                    g[i * c..(i + 1) * c].copy_from_slice(ctx.out_grad);
                    g
                })]
            }),
        )
    }

    /// Single entry by flat index, as a scalar.
    pub fn element(&self, i: usize) -> Result<Tensor> {
        let n = self.numel();
        if i >= n {
            return Err(LatError::shape("element", format!("index {} of {} values", i, n)));
        }
        let values = self.with_values(|a| vec![a[i]]);
        Tensor::from_op(
            "element",
            vec![],
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                vec![ctx.needs[0].then(|| {
                    let mut g = vec![0.0; n];
                    g[i] = ctx.out_grad[0];
                    g
                })]
            }),
        )
    }

    /// Contiguous row range of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = dims2(self, "slice_rows")?;
        if start + len > r {
            return Err(LatError::shape(
                "slice_rows",
                format!("rows [{start}, {}) of {r}", start + len),
            ));
        }
        let values = self.with_values(|a| a[start * c..(start + len) * c].to_vec());
        Tensor::from_op(
            "slice_rows",
            vec![len, c],
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                vec![ctx.needs[0].then(|| {
                    let mut g = vec![0.0; r * c];
                    g[start * c..(start + len) * c].copy_from_slice(ctx.out_grad);
                    g
                })]
            }),
        )
    }

    /// Contiguous segment of a vector.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Tensor> {
        let n = dims1(self, "narrow")?;
        if start + len > n {
            return Err(LatError::shape(
                "narrow",
                format!("[{start}, {}) of length {n}", start + len),
            ));
        }
        let values = self.with_values(|a| a[start..start + len].to_vec());
        Tensor::from_op(
            "narrow",
            vec![len],
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                vec![ctx.needs[0].then(|| {
                    let mut g = vec![0.0; n];
                    g[start..start + len].copy_from_slice(ctx.out_grad);
                    g
                })]
            }),
        )
    }

    /// Concatenate along `axis` (0 or 1). Vectors concatenate along 0;
    /// matrices along rows (0) or columns (1). A single operand is passed
    /// through unchanged.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(LatError::Degenerate("concat of zero tensors".into()));
        }
        let rank = parts[0].shape().len();
        if axis >= rank.max(1) {
            return Err(LatError::shape(
                "concat",
                format!("axis {} for rank-{} operands", axis, rank),
            ));
        }
        for p in parts {
            if p.shape().len() != rank {
                return Err(LatError::shape(
                    "concat",
                    format!("mixed ranks {:?} vs {:?}", parts[0].shape(), p.shape()),
                ));
            }
        }
        if rank == 1 {
            let lens: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
            let total = lens.iter().sum();
            let mut values = Vec::with_capacity(total);
            for p in parts {
                p.with_values(|v| values.extend_from_slice(v));
            }
            let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            return Tensor::from_op(
                "concat",
                vec![total],
                values,
                parents,
                Box::new(move |ctx: &BackwardCtx| {
                    let mut offset = 0;
                    lens.iter()
                        .enumerate()
                        .map(|(i, len)| {
                            let piece = ctx.needs[i]
                                .then(|| ctx.out_grad[offset..offset + len].to_vec());
                            offset += len;
                            piece
                        })
                        .collect()
                }),
            );
        }
        if rank != 2 {
            return Err(LatError::shape("concat", format!("rank {} unsupported", rank)));
        }
        let shapes: Vec<(usize, usize)> = parts
            .iter()
            .map(|p| {
                let s = p.shape();
                (s[0], s[1])
            })
            .collect();
        if axis == 0 {
            let cols = shapes[0].1;
            if shapes.iter().any(|s| s.1 != cols) {
                return Err(LatError::shape(
                    "concat",
                    format!("column counts differ: {:?}", shapes),
                ));
            }
            let rows_each: Vec<usize> = shapes.iter().map(|s| s.0).collect();
            let total_rows: usize = rows_each.iter().sum();
            let mut values = Vec::with_capacity(total_rows * cols);
            for p in parts {
                p.with_values(|v| values.extend_from_slice(v));
            }
            let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            Tensor::from_op(
                "concat",
                vec![total_rows, cols],
                values,
                parents,
                Box::new(move |ctx: &BackwardCtx| {
                    let mut offset = 0;
                    rows_each
                        .iter()
                        .enumerate()
                        .map(|(i, rows)| {
                            let len = rows * cols;
                            let piece = ctx.needs[i]
                                .then(|| ctx.out_grad[offset..offset + len].to_vec());
                            offset += len;
                            piece
                        })
                        .collect()
                }),
            )
        } else {
            let rows = shapes[0].0;
            if shapes.iter().any(|s| s.0 != rows) {
                return Err(LatError::shape(
                    "concat",
                    format!("row counts differ: {:?}", shapes),
                ));
            }
            let cols_each: Vec<usize> = shapes.iter().map(|s| s.1).collect();
            let total_cols: usize = cols_each.iter().sum();
            let mut values = vec![0.0; rows * total_cols];
            let mut col_offset = 0;
            for (p, cols) in parts.iter().zip(&cols_each) {
                p.with_values(|v| {
                    for r in 0..rows {
                        values[r * total_cols + col_offset..r * total_cols + col_offset + cols]
                            .copy_from_slice(&v[r * cols..(r + 1) * cols]);
                    }
                });
                col_offset += cols;
            }
            let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            Tensor::from_op(
                "concat",
                vec![rows, total_cols],
                values,
                parents,
                Box::new(move |ctx: &BackwardCtx| {
                    let mut col_offset = 0;
                    cols_each
                        .iter()
                        .enumerate()
                        .map(|(i, cols)| {
                            let piece = ctx.needs[i].then(|| {
                                let mut g = vec![0.0; rows * cols];
                                for r in 0..rows {
                                    g[r * cols..(r + 1) * cols].copy_from_slice(
                                        &ctx.out_grad[r * total_cols + col_offset
                                            ..r * total_cols + col_offset + cols],
                                    );
                                }
                                g
                            });
                            col_offset += cols;
                            piece
                        })
                        .collect()
                }),
            )
        }
    }

    // ----- linear algebra -------------------------------------------------------

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (r, s) = dims2(self, "matmul")?;
        let (s2, t) = dims2(rhs, "matmul")?;
        if s != s2 {
            return Err(LatError::shape(
                "matmul",
                format!("[{r}, {s}] x [{s2}, {t}]: inner dimensions differ"),
            ));
        }
        let values = self.with_values(|a| {
            rhs.with_values(|b| {
                let mut out = vec![0.0; r * t];
                for i in 0..r {
                    let arow = &a[i * s..(i + 1) * s];
                    let orow = &mut out[i * t..(i + 1) * t];
                    for (k, &aik) in arow.iter().enumerate() {
                        if aik == 0.0 {
                            continue;
                        }
                        let brow = &b[k * t..(k + 1) * t];
                        for (o, &bkj) in orow.iter_mut().zip(brow) {
                            *o += aik * bkj;
                        }
                    }
                }
                out
            })
        });
        Tensor::from_op(
            "matmul",
            vec![r, t],
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let a = ctx.parent_values[0];
                let b = ctx.parent_values[1];
                let g = ctx.out_grad;
                let da = ctx.needs[0].then(|| {
                    // dA = G . B^T
                    let mut da = vec![0.0; r * s];
                    for i in 0..r {
                        for k in 0..s {
                            let mut acc = 0.0;
                            let grow = &g[i * t..(i + 1) * t];
                            let brow = &b[k * t..(k + 1) * t];
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            da[i * s + k] = acc;
                        }
                    }
                    da
                });
                let db = ctx.needs[1].then(|| {
                    // dB = A^T . G
                    let mut db = vec![0.0; s * t];
                    for i in 0..r {
                        let arow = &a[i * s..(i + 1) * s];
                        let grow = &g[i * t..(i + 1) * t];
                        for (k, &aik) in arow.iter().enumerate() {
                            if aik == 0.0 {
                                continue;
                            }
                            let drow = &mut db[k * t..(k + 1) * t];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += aik * gv;
                            }
                        }
                    }
                    db
                });
                vec![da, db]
            }),
        )
    }

    /// Outer product of two equal-length vectors: `out[i, j] = a[i] * b[j]`.
    pub fn outer(&self, rhs: &Tensor) -> Result<Tensor> {
        let da = dims1(self, "outer")?;
        let db = dims1(rhs, "outer")?;
        if da != db {
            return Err(LatError::shape("outer", format!("lengths {da} vs {db}")));
        }
        let values = self.with_values(|a| {
            rhs.with_values(|b| {
                let mut out = Vec::with_capacity(da * db);
                for x in a {
                    for y in b {
                        out.push(x * y);
                    }
                }
                out
            })
        });
        Tensor::from_op(
            "outer",
            vec![da, db],
            values,
            vec![self.clone(), rhs.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let a = ctx.parent_values[0];
                let b = ctx.parent_values[1];
                let g = ctx.out_grad;
                vec![
                    ctx.needs[0].then(|| {
                        (0..da)
                            .map(|i| g[i * db..(i + 1) * db].iter().zip(b).map(|(g, y)| g * y).sum())
                            .collect()
                    }),
                    ctx.needs[1].then(|| {
                        (0..db)
                            .map(|j| (0..da).map(|i| g[i * db + j] * a[i]).sum())
                            .collect()
                    }),
                ]
            }),
        )
    }

    // ----- reductions -------------------------------------------------------------

    pub fn sum(&self) -> Result<Tensor> {
        let n = self.numel();
        let values = self.with_values(|a| vec![a.iter().sum::<f64>()]);
        Tensor::from_op(
            "sum",
            vec![],
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                vec![ctx.needs[0].then(|| vec![ctx.out_grad[0]; n])]
            }),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        if n == 0 {
            return Err(LatError::Degenerate("mean of an empty tensor".into()));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Reduce a matrix over one axis: axis 0 collapses rows (output `[cols]`),
    /// axis 1 collapses columns (output `[rows]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (r, c) = dims2(self, "sum_axis")?;
        if axis > 1 {
            return Err(LatError::shape("sum_axis", format!("axis {axis} out of range")));
        }
        if axis == 0 {
            let values = self.with_values(|a| {
                let mut out = vec![0.0; c];
                for row in a.chunks_exact(c) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                out
            });
            Tensor::from_op(
                "sum_axis",
                vec![c],
                values,
                vec![self.clone()],
                Box::new(move |ctx: &BackwardCtx| {
                    vec![ctx.needs[0].then(|| {
                        let mut g = Vec::with_capacity(r * c);
                        for _ in 0..r {
                            g.extend_from_slice(ctx.out_grad);
                        }
                        g
                    })]
                }),
            )
        } else {
            let values = self.with_values(|a| {
                a.chunks_exact(c).map(|row| row.iter().sum()).collect::<Vec<_>>()
            });
            Tensor::from_op(
                "sum_axis",
                vec![r],
                values,
                vec![self.clone()],
                Box::new(move |ctx: &BackwardCtx| {
                    vec![ctx.needs[0].then(|| {
                        let mut g = Vec::with_capacity(r * c);
                        for gi in ctx.out_grad {
                            g.extend(std::iter::repeat(*gi).take(c));
                        }
                        g
                    })]
                }),
            )
        }
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (r, c) = dims2(self, "mean_axis")?;
        let n = if axis == 0 { r } else { c };
        self.sum_axis(axis)?.scale(1.0 / n as f64)
    }

    /// Column-wise maximum of a matrix; gradient flows to the first maximal
    /// row in each column.
    pub fn max_axis0(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "max_axis0")?;
        let (values, argmax) = self.with_values(|a| {
            let mut out = vec![f64::NEG_INFINITY; c];
            let mut arg = vec![0usize; c];
            for (i, row) in a.chunks_exact(c).enumerate() {
                for (j, v) in row.iter().enumerate() {
                    if *v > out[j] {
                        out[j] = *v;
                        arg[j] = i;
                    }
                }
            }
            (out, arg)
        });
        let _ = r;
        Tensor::from_op(
            "max_axis0",
            vec![c],
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                vec![ctx.needs[0].then(|| {
                    let mut g = vec![0.0; ctx.parent_values[0].len()];
                    for (j, &i) in argmax.iter().enumerate() {
                        g[i * c + j] = ctx.out_grad[j];
                    }
                    g
                })]
            }),
        )
    }

    // ----- softmax and losses --------------------------------------------------

    /// Numerically stabilized softmax over a vector. Masked entries (mask
    /// `false`) are excluded from the normalization and come out exactly 0.
    pub fn softmax_masked(&self, mask: Option<&[bool]>) -> Result<Tensor> {
        let n = dims1(self, "softmax_masked")?;
        if let Some(m) = mask {
            if m.len() != n {
                return Err(LatError::shape(
                    "softmax_masked",
                    format!("mask length {} vs {}", m.len(), n),
                ));
            }
        }
        let keep: Vec<bool> = match mask {
            Some(m) => m.to_vec(),
            None => vec![true; n],
        };
        if !keep.iter().any(|k| *k) {
            return Err(LatError::Degenerate("softmax over a fully masked vector".into()));
        }
        if n == 0 {
            return Err(LatError::Degenerate("softmax of an empty vector".into()));
        }
        let values = self.with_values(|a| {
            let max = a
                .iter()
                .zip(&keep)
                .filter(|(_, k)| **k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut out = vec![0.0; n];
            let mut total = 0.0;
            for i in 0..n {
                if keep[i] {
                    let e = (a[i] - max).exp();
                    out[i] = e;
                    total += e;
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
            out
        });
        Tensor::from_op(
            "softmax_masked",
            vec![n],
            values,
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx| {
                vec![ctx.needs[0].then(|| {
                    let y = ctx.out_values;
                    let dot: f64 = ctx.out_grad.iter().zip(y).map(|(g, y)| g * y).sum();
                    ctx.out_grad
                        .iter()
                        .zip(y)
                        .map(|(g, y)| y * (g - dot))
                        .collect()
                })]
            }),
        )
    }

    /// Smooth L1 (Huber with unit transition), averaged over elements:
    /// `0.5 x^2` for `|x| < 1`, else `|x| - 0.5`, with `x = self - target`.
    pub fn smooth_l1(&self, target: &Tensor) -> Result<Tensor> {
        same_shape(self, target, "smooth_l1")?;
        let n = self.numel();
        if n == 0 {
            return Err(LatError::Degenerate("smooth_l1 of an empty tensor".into()));
        }
        let values = self.with_values(|p| {
            target.with_values(|t| {
                let total: f64 = p
                    .iter()
                    .zip(t)
                    .map(|(p, t)| {
                        let x = p - t;
                        if x.abs() < 1.0 {
                            0.5 * x * x
                        } else {
                            x.abs() - 0.5
                        }
                    })
                    .sum();
                vec![total / n as f64]
            })
        });
        Tensor::from_op(
            "smooth_l1",
            vec![],
            values,
            vec![self.clone(), target.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let p = ctx.parent_values[0];
                let t = ctx.parent_values[1];
                let g = ctx.out_grad[0] / n as f64;
                let slope = |x: f64| if x.abs() < 1.0 { x } else { x.signum() };
                vec![
                    ctx.needs[0]
                        .then(|| p.iter().zip(t).map(|(p, t)| g * slope(p - t)).collect()),
                    ctx.needs[1]
                        .then(|| p.iter().zip(t).map(|(p, t)| -g * slope(p - t)).collect()),
                ]
            }),
        )
    }

    /// Mean binary cross-entropy over per-class sigmoid outputs, computed
    /// from logits in the numerically stable form.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Result<Tensor> {
        same_shape(self, targets, "bce_with_logits")?;
        let n = self.numel();
        if n == 0 {
            return Err(LatError::Degenerate("bce of an empty tensor".into()));
        }
        let values = self.with_values(|z| {
            targets.with_values(|y| {
                let total: f64 = z
                    .iter()
                    .zip(y)
                    .map(|(z, y)| z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln())
                    .sum();
                vec![total / n as f64]
            })
        });
        Tensor::from_op(
            "bce_with_logits",
            vec![],
            values,
            vec![self.clone(), targets.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let z = ctx.parent_values[0];
                let y = ctx.parent_values[1];
                let g = ctx.out_grad[0] / n as f64;
                vec![
                    ctx.needs[0].then(|| {
                        z.iter()
                            .zip(y)
                            .map(|(z, y)| {
                                let p = if *z >= 0.0 {
                                    1.0 / (1.0 + (-z).exp())
                                } else {
                                    let e = z.exp();
                                    e / (1.0 + e)
                                };
                                g * (p - y)
                            })
                            .collect()
                    }),
                    None,
                ]
            }),
        )
    }

    /// Cross-entropy of a categorical distribution given as logits:
    /// `logsumexp(z) - z[target]`.
    pub fn cross_entropy_logits(&self, target: usize) -> Result<Tensor> {
        let n = dims1(self, "cross_entropy_logits")?;
        if target >= n {
            return Err(LatError::Contract(format!(
                "cross_entropy target {} out of range {}",
                target, n
            )));
        }
        let values = self.with_values(|z| {
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            vec![lse - z[target]]
        });
        Tensor::from_op(
            "cross_entropy_logits",
            vec![],
            values,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx| {
                let z = ctx.parent_values[0];
                let g = ctx.out_grad[0];
                vec![ctx.needs[0].then(|| {
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
                    z.iter()
                        .enumerate()
                        .map(|(i, v)| {
                            let p = (v - max).exp() / total;
                            g * (p - if i == target { 1.0 } else { 0.0 })
                        })
                        .collect()
                })]
            }),
        )
    }
}

/// `w [r, p] . x [p] (+ b [r])` with the vector reshaped through a column.
pub fn linear(w: &Tensor, x: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let p = dims1(x, "linear")?;
    let (r, p2) = dims2(w, "linear")?;
    if p != p2 {
        return Err(LatError::shape("linear", format!("[{r}, {p2}] x [{p}]")));
    }
    let y = w.matmul(&x.reshape(&[p, 1])?)?.reshape(&[r])?;
    match b {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

/// Row-wise affine map: `x [m, p] . w [p, r] + b`.
pub fn linear_rows(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => {
            let m = y.shape()[0];
            y.add(&b.expand_rows(m)?)
        }
        None => Ok(y),
    }
}

/// Stack `[d]` vectors as the rows of an `[n, d]` matrix.
pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(LatError::Degenerate("stack_rows of zero vectors".into()));
    }
    let d = rows[0].numel();
    let reshaped: Vec<Tensor> = rows
        .iter()
        .map(|r| r.reshape(&[1, d]))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = reshaped.iter().collect();
    Tensor::concat(&refs, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(values: &[f64]) -> Tensor {
        Tensor::from_vec(&[values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let m = Tensor::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let out = eye.matmul(&m).unwrap();
        assert_eq!(out.values(), m.values());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5., 6.]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.values(), vec![17., 39.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("inner dimensions"), "{msg}");
    }

    #[test]
    fn elementwise_values() {
        let x = t1(&[-1.0, 2.0]);
        assert_eq!(x.relu().unwrap().values(), vec![0.0, 2.0]);
        let zeros = Tensor::zeros(&[2]);
        assert_eq!(x.mul(&zeros).unwrap().values(), vec![0.0, 0.0]);
        assert_eq!(Tensor::scalar(0.0).unwrap().tanh().unwrap().value().unwrap(), 0.0);
        assert_eq!(
            Tensor::scalar(0.0).unwrap().sigmoid().unwrap().value().unwrap(),
            0.5
        );
        let err = x.add(&Tensor::zeros(&[3])).unwrap_err();
        assert!(matches!(err, LatError::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let x = t1(&[1.0, 1.0, 1.0]);
        let y = x.softmax_masked(None).unwrap().values();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = t1(&[0.0, 2.0_f64.ln()]);
        let y = x.softmax_masked(None).unwrap().values();
        assert!((y[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_single_survivor_and_all_masked() {
        let x = t1(&[5.0, 9.0]);
        let y = x.softmax_masked(Some(&[true, false])).unwrap().values();
        assert_eq!(y, vec![1.0, 0.0]);
        let err = x.softmax_masked(Some(&[false, false])).unwrap_err();
        assert!(matches!(err, LatError::Degenerate(_)));
    }

    #[test]
    fn softmax_shift_invariance() {
        let x = t1(&[0.3, -1.2, 2.0, 0.0]);
        let shifted = x.offset(7.5).unwrap();
        let a = x.softmax_masked(None).unwrap().values();
        let b = shifted.softmax_masked(None).unwrap().values();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn outer_cases() {
        let f = t1(&[1.0, 2.0]);
        let q = t1(&[3.0, 4.0]);
        assert_eq!(f.outer(&q).unwrap().values(), vec![3., 4., 6., 8.]);
        let zero = Tensor::zeros(&[2]);
        assert_eq!(zero.outer(&q).unwrap().values(), vec![0.0; 4]);
        let e1 = t1(&[1.0, 0.0]);
        let e2 = t1(&[0.0, 1.0]);
        assert_eq!(e1.outer(&e2).unwrap().values(), vec![0., 1., 0., 0.]);
        assert!(f.outer(&t1(&[1.0])).is_err());
    }

    #[test]
    fn concat_cases() {
        let v = t1(&[1.0, 2.0]);
        let b = t1(&[9.0]);
        let o = Tensor::concat(&[&v, &b], 0).unwrap();
        assert_eq!(o.values(), vec![1., 2., 9.]);
        // single operand is the identity
        let same = Tensor::concat(&[&v], 0).unwrap();
        assert_eq!(same.values(), v.values());
        // mismatched rows on axis-1 concat
        let a = Tensor::zeros(&[2, 2]);
        let c = Tensor::zeros(&[3, 1]);
        assert!(Tensor::concat(&[&a, &c], 1).is_err());
    }

    #[test]
    fn reduce_cases() {
        let m = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(m.sum_axis(1).unwrap().values(), vec![3., 7.]);
        assert_eq!(m.sum_axis(0).unwrap().values(), vec![4., 6.]);
        let c = Tensor::from_vec(&[2, 2], vec![5.0; 4]).unwrap();
        assert_eq!(c.mean().unwrap().value().unwrap(), 5.0);
        assert!(m.sum_axis(2).is_err());
    }

    #[test]
    fn smooth_l1_values() {
        let p = Tensor::scalar(2.0).unwrap();
        let t = Tensor::scalar(2.0).unwrap();
        assert_eq!(p.smooth_l1(&t).unwrap().value().unwrap(), 0.0);
        let p = Tensor::scalar(2.5).unwrap();
        assert!((p.smooth_l1(&t).unwrap().value().unwrap() - 0.125).abs() < 1e-15);
        let p = Tensor::scalar(4.0).unwrap();
        assert!((p.smooth_l1(&t).unwrap().value().unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // uniform logits over 4 classes -> loss = ln 4
        let z = t1(&[0.0; 4]);
        let loss = z.cross_entropy_logits(2).unwrap().value().unwrap();
        assert!((loss - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn max_axis0_selects_columnwise() {
        let m = Tensor::from_vec(&[2, 3], vec![1., 5., 2., 4., 0., 2.]).unwrap();
        assert_eq!(m.max_axis0().unwrap().values(), vec![4., 5., 2.]);
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        use crate::tensor::gradcheck::finite_diff_check;
        let mut rng = crate::rng(7);
        let a = Tensor::glorot(3, 4, &mut rng);
        let b = Tensor::glorot(4, 2, &mut rng);
        let params = [a.clone(), b.clone()];
        let err = finite_diff_check(
            &params,
            || a.matmul(&b)?.sum(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }
}
