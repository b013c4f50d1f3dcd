//! Central finite-difference gradient verification.
//!
//! Used as the independent oracle for every differentiable op and for the
//! full models: the analytic gradients from [`Tensor::backward`] are
//! compared entry-by-entry against `(f(p + eps) - f(p - eps)) / (2 eps)`.

use rand::Rng;

use super::cells::{CellKind, RecurrentCell};
use super::norm::{BatchNorm, Mode};
use super::Tensor;
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Maximum over all parameter entries of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` must be a deterministic function of `params`, rebuilding its graph
/// on every call.
pub fn finite_diff_check<F>(params: &[Tensor], f: F, eps: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    super::zero_grad_all(params);
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    super::zero_grad_all(params);

    let mut max_rel = 0.0f64;
    for (p, grads) in params.iter().zip(&analytic) {
        for i in 0..p.numel() {
            p.nudge(i, eps)?;
            let up = f()?.value()?;
            p.nudge(i, -2.0 * eps)?;
            let down = f()?.value()?;
            p.nudge(i, eps)?;
            let numeric = (up - down) / (2.0 * eps);
            let a = grads[i];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// One named result from a gradient-suite run.
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
}

fn rand_tensor(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::param(shape, values).expect("finite")
}

/// Random values kept away from zero, for ops with a kink at the origin.
fn rand_tensor_off_zero(shape: &[usize], rng: &mut impl rand::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::param(shape, values).expect("finite")
}

fn weighted_sum(t: &Tensor, rng: &mut impl rand::Rng) -> Result<Tensor> {
    // fixed random weights turn any output into a scalar with nontrivial grads
    let n = t.numel();
    let w = Tensor::from_vec(
        &t.shape(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    t.mul(&w)?.sum()
}

/// Finite-difference check for every differentiable tensor op over random
/// small shapes; runs `seeds` independent trials per op and reports the
/// worst relative error seen.
pub fn op_gradient_suite(seeds: u64) -> Result<Vec<SuiteEntry>> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let record = |name: &'static str, err: f64, acc: &mut Vec<(&'static str, f64)>| {
        match acc.iter_mut().find(|(n, _)| *n == name) {
            Some((_, e)) => {
                if err > *e {
                    *e = err;
                }
            }
            None => acc.push((name, err)),
        }
    };

    for seed in 0..seeds {
        let mut rng = crate::rng(0xC0FFEE ^ seed);
        let m = rng.gen_range(2..5usize);
        let k = rng.gen_range(2..5usize);
        let n = rng.gen_range(2..5usize);

        // matmul
        {
            let a = rand_tensor(&[m, k], &mut rng);
            let b = rand_tensor(&[k, n], &mut rng);
            let wr = crate::rng(seed + 1);
            let err = finite_diff_check(
                &[a.clone(), b.clone()],
                || weighted_sum(&a.matmul(&b)?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("matmul", err, &mut worst);
        }
        // binary elementwise
        {
            let a = rand_tensor(&[m, n], &mut rng);
            let b = rand_tensor_off_zero(&[m, n], &mut rng);
            let wr = crate::rng(seed + 2);
            for (name, op) in [
                ("add", 0usize),
                ("sub", 1),
                ("mul", 2),
                ("div", 3),
            ] {
                let err = finite_diff_check(
                    &[a.clone(), b.clone()],
                    || {
                        let out = match op {
                            0 => a.add(&b)?,
                            1 => a.sub(&b)?,
                            2 => a.mul(&b)?,
                            _ => a.div(&b)?,
                        };
                        weighted_sum(&out, &mut wr.clone())
                    },
                    DEFAULT_EPS,
                )?;
                record(name, err, &mut worst);
            }
        }
        // unary
        {
            let x = rand_tensor_off_zero(&[m, n], &mut rng);
            let wr = crate::rng(seed + 3);
            for (name, op) in [
                ("tanh", 0usize),
                ("sigmoid", 1),
                ("relu", 2),
                ("scale", 3),
                ("offset", 4),
                ("neg", 5),
            ] {
                let err = finite_diff_check(
                    &[x.clone()],
                    || {
                        let out = match op {
                            0 => x.tanh()?,
                            1 => x.sigmoid()?,
                            2 => x.relu()?,
                            3 => x.scale(1.7)?,
                            4 => x.offset(-0.4)?,
                            _ => x.neg()?,
                        };
                        weighted_sum(&out, &mut wr.clone())
                    },
                    DEFAULT_EPS,
                )?;
                record(name, err, &mut worst);
            }
            // sqrt needs positive input
            let pos = {
                let v: Vec<f64> = (0..m * n).map(|_| rng.gen_range(0.2..2.0)).collect();
                Tensor::param(&[m, n], v)?
            };
            let err = finite_diff_check(
                &[pos.clone()],
                || weighted_sum(&pos.sqrt()?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("sqrt", err, &mut worst);
        }
        // scalar broadcast
        {
            let x = rand_tensor(&[m, n], &mut rng);
            let s = rand_tensor(&[], &mut rng);
            let wr = crate::rng(seed + 4);
            let err = finite_diff_check(
                &[x.clone(), s.clone()],
                || weighted_sum(&x.add_scalar(&s)?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("add_scalar", err, &mut worst);
            let err = finite_diff_check(
                &[x.clone(), s.clone()],
                || weighted_sum(&x.mul_scalar(&s)?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("mul_scalar", err, &mut worst);
        }
        // shape ops
        {
            let x = rand_tensor(&[m, n], &mut rng);
            let v = rand_tensor(&[k], &mut rng);
            let wr = crate::rng(seed + 5);
            let err = finite_diff_check(
                &[x.clone()],
                || weighted_sum(&x.transpose()?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("transpose", err, &mut worst);
            let err = finite_diff_check(
                &[x.clone()],
                || weighted_sum(&x.reshape(&[n, m])?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("reshape", err, &mut worst);
            let err = finite_diff_check(
                &[v.clone()],
                || weighted_sum(&v.expand_rows(m)?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("expand_rows", err, &mut worst);
            let err = finite_diff_check(
                &[x.clone()],
                || weighted_sum(&x.row(m - 1)?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("row", err, &mut worst);
            let err = finite_diff_check(
                &[v.clone()],
                || weighted_sum(&v.narrow(1, k - 1)?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("narrow", err, &mut worst);
            let err = finite_diff_check(&[x.clone()], || x.element(1), DEFAULT_EPS)?;
            record("element", err, &mut worst);
            let a = rand_tensor(&[m, n], &mut rng);
            let b = rand_tensor(&[m, n], &mut rng);
            let err = finite_diff_check(
                &[a.clone(), b.clone()],
                || weighted_sum(&Tensor::concat(&[&a, &b], 0)?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("concat_axis0", err, &mut worst);
            let err = finite_diff_check(
                &[a.clone(), b.clone()],
                || weighted_sum(&Tensor::concat(&[&a, &b], 1)?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("concat_axis1", err, &mut worst);
        }
        // reductions
        {
            let x = rand_tensor(&[m, n], &mut rng);
            let wr = crate::rng(seed + 6);
            let err = finite_diff_check(&[x.clone()], || x.sum(), DEFAULT_EPS)?;
            record("sum", err, &mut worst);
            let err = finite_diff_check(&[x.clone()], || x.mean(), DEFAULT_EPS)?;
            record("mean", err, &mut worst);
            let err = finite_diff_check(
                &[x.clone()],
                || weighted_sum(&x.sum_axis(0)?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("sum_axis0", err, &mut worst);
            let err = finite_diff_check(
                &[x.clone()],
                || weighted_sum(&x.sum_axis(1)?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("sum_axis1", err, &mut worst);
            let err = finite_diff_check(
                &[x.clone()],
                || weighted_sum(&x.mean_axis(0)?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("mean_axis0", err, &mut worst);
            let err = finite_diff_check(
                &[x.clone()],
                || weighted_sum(&x.max_axis0()?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("max_axis0", err, &mut worst);
        }
        // softmax, outer, losses
        {
            let x = rand_tensor(&[n + 2], &mut rng);
            let wr = crate::rng(seed + 7);
            let err = finite_diff_check(
                &[x.clone()],
                || weighted_sum(&x.softmax_masked(None)?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("softmax", err, &mut worst);
            let mut mask = vec![true; n + 2];
            mask[0] = false;
            let mask2 = mask.clone();
            let err = finite_diff_check(
                &[x.clone()],
                || weighted_sum(&x.softmax_masked(Some(&mask2))?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("softmax_masked", err, &mut worst);

            let f = rand_tensor(&[k], &mut rng);
            let q = rand_tensor(&[k], &mut rng);
            let err = finite_diff_check(
                &[f.clone(), q.clone()],
                || weighted_sum(&f.outer(&q)?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("outer", err, &mut worst);

            let pred = rand_tensor(&[n], &mut rng);
            let target = Tensor::from_vec(
                &[n],
                (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )?;
            let err = finite_diff_check(
                &[pred.clone()],
                || pred.smooth_l1(&target),
                DEFAULT_EPS,
            )?;
            record("smooth_l1", err, &mut worst);

            let logits = rand_tensor(&[n + 1], &mut rng);
            let labels = Tensor::from_vec(
                &[n + 1],
                (0..n + 1).map(|_| f64::from(rng.gen_bool(0.5))).collect(),
            )?;
            let err = finite_diff_check(
                &[logits.clone()],
                || logits.bce_with_logits(&labels),
                DEFAULT_EPS,
            )?;
            record("bce_with_logits", err, &mut worst);
            let err = finite_diff_check(
                &[logits.clone()],
                || logits.cross_entropy_logits(1),
                DEFAULT_EPS,
            )?;
            record("cross_entropy", err, &mut worst);
        }
        // batch norm (train mode)
        {
            let bn = BatchNorm::new(n);
            let x = rand_tensor(&[m.max(2), n], &mut rng);
            let wr = crate::rng(seed + 8);
            let err = finite_diff_check(
                &[x.clone(), bn.gamma.clone(), bn.beta.clone()],
                || weighted_sum(&bn.forward(&x, Mode::Train)?, &mut wr.clone()),
                DEFAULT_EPS,
            )?;
            record("batch_norm", err, &mut worst);
        }
        // recurrent cells
        {
            let mut cr = crate::rng(seed + 9);
            let lstm = RecurrentCell::new(CellKind::Lstm, k, m, &mut cr)?;
            let x = rand_tensor(&[k], &mut rng);
            let wr = crate::rng(seed + 10);
            let mut params = vec![x.clone()];
            params.extend(lstm.params().into_iter().map(|(_, t)| t));
            let err = finite_diff_check(
                &params,
                || {
                    let s = lstm.step(&x, &lstm.zero_state())?;
                    weighted_sum(&s.h, &mut wr.clone())
                },
                DEFAULT_EPS,
            )?;
            record("lstm_step", err, &mut worst);

            let gru = RecurrentCell::new(CellKind::Gru, k, m, &mut cr)?;
            let mut params = vec![x.clone()];
            params.extend(gru.params().into_iter().map(|(_, t)| t));
            let err = finite_diff_check(
                &params,
                || {
                    let s = gru.step(&x, &gru.zero_state())?;
                    weighted_sum(&s.h, &mut wr.clone())
                },
                DEFAULT_EPS,
            )?;
            record("gru_step", err, &mut worst);
        }
    }

    Ok(worst
        .into_iter()
        .map(|(name, max_rel_err)| SuiteEntry { name, max_rel_err })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_essentially_exact() {
        let w = Tensor::param(&[], vec![1.37]).unwrap();
        let err = finite_diff_check(&[w.clone()], || w.mul(&w), DEFAULT_EPS).unwrap();
        assert!(err < 1e-8, "quadratic FD error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let w = Tensor::param(&[2], vec![0.5, -0.5]).unwrap();
        let err = finite_diff_check(
            &[w.clone()],
            || {
                // constant w.r.t. w: use a detached copy of the values
                let c = Tensor::from_vec(&[2], vec![1.0, 2.0])?;
                let z = w.sub(&w)?; // zero with grads that cancel
                c.sum()?.add(&z.sum()?)
            },
            DEFAULT_EPS,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn op_suite_stays_under_tolerance() {
        for entry in op_gradient_suite(3).unwrap() {
            assert!(
                entry.max_rel_err < 1e-4,
                "{} exceeded tolerance: {}",
                entry.name,
                entry.max_rel_err
            );
        }
    }
}
