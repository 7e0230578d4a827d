//! Central finite-difference verification of analytic gradients.
//!
//! Each case builds a scalar loss `sum(f(inputs) * R)` with a fixed random
//! projection `R`, runs one backward pass, then perturbs every input element
//! by `±h` and compares the analytic gradient against the central quotient.

use super::{backward, no_grad, Tensor};
use crate::error::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_H: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub n_checked: usize,
}

impl CaseResult {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol && self.max_rel_err.is_finite()
    }
}

#[derive(Debug, Default)]
pub struct Report {
    pub cases: Vec<CaseResult>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(|c| c.pass())
    }

    pub fn lines(&self) -> Vec<String> {
        self.cases
            .iter()
            .map(|c| {
                format!(
                    "{:5} {:<28} max_rel_err {:.3e} (tol {:.1e}, {} elems)",
                    if c.pass() { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_rel_err,
                    c.tol,
                    c.n_checked
                )
            })
            .collect()
    }
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-6 {
        (a - b).abs()
    } else {
        (a - b).abs() / denom
    }
}

/// Checks `f`'s gradients w.r.t. every element of every input variable.
pub fn check_fn(
    name: &str,
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    h: f64,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CaseResult> {
    check_fn_sampled(name, inputs, f, h, tol, rng, 1.0, usize::MAX)
}

/// Like [`check_fn`] but perturbs only a random fraction of each input's
/// elements (at least `min_per_input`, capped by the element count).
#[allow(clippy::too_many_arguments)]
pub fn check_fn_sampled(
    name: &str,
    inputs: &[Tensor<f64>],
    f: &dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    h: f64,
    tol: f64,
    rng: &mut ChaCha8Rng,
    sample_frac: f64,
    min_per_input: usize,
) -> Result<CaseResult> {
    let out = f(inputs)?;
    let r: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let rt = Tensor::from_vec(r.clone(), out.dims().to_vec())?;
    let loss = out.mul(&rt)?.sum_all();
    for x in inputs {
        x.zero_grad();
    }
    backward(&loss)?;

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        no_grad(|| {
            let out = f(inputs)?;
            let od = out.data();
            Ok(od.iter().zip(&r).map(|(o, w)| o * w).sum())
        })
    };

    let mut max_err = 0.0f64;
    let mut n = 0usize;
    for x in inputs {
        let analytic = x.grad_or_zeros();
        let base = x.to_vec();
        let take = if sample_frac >= 1.0 {
            base.len()
        } else {
            ((base.len() as f64 * sample_frac).ceil() as usize)
                .max(min_per_input)
                .min(base.len())
        };
        let mut indices: Vec<usize> = (0..base.len()).collect();
        if take < base.len() {
            for i in 0..take {
                let j = rng.gen_range(i..indices.len());
                indices.swap(i, j);
            }
            indices.truncate(take);
        }
        for &j in &indices {
            let fd_at = |h: f64| -> Result<f64> {
                let mut plus = base.clone();
                plus[j] += h;
                x.set_data(&plus)?;
                let lp = eval(inputs)?;
                let mut minus = base.clone();
                minus[j] -= h;
                x.set_data(&minus)?;
                let lm = eval(inputs)?;
                x.set_data(&base)?;
                Ok((lp - lm) / (2.0 * h))
            };
            let mut e = rel_err(analytic[j], fd_at(h)?);
            if e > tol {
                // A ReLU kink inside the +/-h window invalidates the
                // quotient itself. A 100x finer probe must then confirm
                // the analytic value, otherwise the failure stands.
                let e_fine = rel_err(analytic[j], fd_at(h / 100.0)?);
                if e_fine <= tol * 0.5 {
                    e = e_fine;
                }
            }
            if e > max_err {
                max_err = e;
            }
            n += 1;
        }
    }
    Ok(CaseResult {
        name: name.to_string(),
        max_rel_err: max_err,
        tol,
        n_checked: n,
    })
}

fn randn_var(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Tensor::var(data, dims.to_vec()).unwrap()
}

/// Like [`randn_var`] but with values pushed away from zero, for kinked or
/// singular ops (relu, div).
fn randn_var_offset(dims: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.sample(rand_distr::StandardNormal);
            v + v.signum() * margin
        })
        .collect();
    Tensor::var(data, dims.to_vec()).unwrap()
}

fn small_dims(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=3usize);
    (0..rank).map(|_| rng.gen_range(1..=4usize)).collect()
}

/// Finite-difference suite over every differentiable op, `instances` random
/// cases per op. The straight-through and detach primitives are excluded:
/// their forward value is independent of the gradient path by construction,
/// so they are checked by identity tests instead.
pub fn op_suite(seed: u64, instances: usize, tol: f64) -> Report {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();

    macro_rules! case {
        ($name:expr, $inputs:expr, $f:expr) => {{
            let inputs = $inputs;
            let res = check_fn($name, &inputs, &$f, DEFAULT_H, tol, &mut rng)
                .unwrap_or_else(|e| panic!("gradcheck case {} failed to run: {e}", $name));
            report.cases.push(res);
        }};
    }

    for i in 0..instances {


        // elementwise binaries, same shape and broadcast
        let d = small_dims(&mut rng);
        case!(
            &format!("add/{i}"),
            vec![randn_var(&d, &mut rng), randn_var(&d, &mut rng)],
            |v: &[Tensor<f64>]| v[0].add(&v[1])
        );
        let d = small_dims(&mut rng);
        let mut db = d.clone();
        if !db.is_empty() {
            db[0] = 1;
        }
        case!(
            &format!("add_broadcast/{i}"),
            vec![randn_var(&d, &mut rng), randn_var(&db, &mut rng)],
            |v: &[Tensor<f64>]| v[0].add(&v[1])
        );
        let d = small_dims(&mut rng);
        case!(
            &format!("sub/{i}"),
            vec![randn_var(&d, &mut rng), randn_var(&d, &mut rng)],
            |v: &[Tensor<f64>]| v[0].sub(&v[1])
        );
        let d = small_dims(&mut rng);
        case!(
            &format!("mul/{i}"),
            vec![randn_var(&d, &mut rng), randn_var(&d, &mut rng)],
            |v: &[Tensor<f64>]| v[0].mul(&v[1])
        );
        let d = small_dims(&mut rng);
        let mut db = d.clone();
        let last = db.len() - 1;
        db[last] = 1;
        case!(
            &format!("mul_broadcast/{i}"),
            vec![randn_var(&d, &mut rng), randn_var(&db, &mut rng)],
            |v: &[Tensor<f64>]| v[0].mul(&v[1])
        );
        let d = small_dims(&mut rng);
        case!(
            &format!("div/{i}"),
            vec![randn_var(&d, &mut rng), randn_var_offset(&d, 0.5, &mut rng)],
            |v: &[Tensor<f64>]| v[0].div(&v[1])
        );

        // unaries
        let d = small_dims(&mut rng);
        case!(
            &format!("add_scalar/{i}"),
            vec![randn_var(&d, &mut rng)],
            |v: &[Tensor<f64>]| Ok(v[0].add_scalar(0.37))
        );
        let d = small_dims(&mut rng);
        case!(
            &format!("mul_scalar/{i}"),
            vec![randn_var(&d, &mut rng)],
            |v: &[Tensor<f64>]| Ok(v[0].mul_scalar(-1.3))
        );
        let d = small_dims(&mut rng);
        case!(
            &format!("neg/{i}"),
            vec![randn_var(&d, &mut rng)],
            |v: &[Tensor<f64>]| Ok(v[0].neg())
        );
        let d = small_dims(&mut rng);
        case!(
            &format!("exp/{i}"),
            vec![randn_var(&d, &mut rng)],
            |v: &[Tensor<f64>]| Ok(v[0].exp())
        );
        let d = small_dims(&mut rng);
        case!(
            &format!("relu/{i}"),
            vec![randn_var_offset(&d, 0.05, &mut rng)],
            |v: &[Tensor<f64>]| Ok(v[0].relu())
        );
        let d = small_dims(&mut rng);
        case!(
            &format!("sigmoid/{i}"),
            vec![randn_var(&d, &mut rng)],
            |v: &[Tensor<f64>]| Ok(v[0].sigmoid())
        );
        let d = small_dims(&mut rng);
        case!(
            &format!("tanh/{i}"),
            vec![randn_var(&d, &mut rng)],
            |v: &[Tensor<f64>]| Ok(v[0].tanh())
        );

        // matmul variants
        let (m, k, n) = (
            rng.gen_range(1..=3usize),
            rng.gen_range(1..=3usize),
            rng.gen_range(1..=3usize),
        );
        case!(
            &format!("matmul_2d/{i}"),
            vec![randn_var(&[m, k], &mut rng), randn_var(&[k, n], &mut rng)],
            |v: &[Tensor<f64>]| v[0].matmul(&v[1])
        );
        let b = rng.gen_range(1..=3usize);
        case!(
            &format!("matmul_batched/{i}"),
            vec![randn_var(&[b, m, k], &mut rng), randn_var(&[b, k, n], &mut rng)],
            |v: &[Tensor<f64>]| v[0].matmul(&v[1])
        );
        case!(
            &format!("matmul_bcast_rhs/{i}"),
            vec![randn_var(&[b, m, k], &mut rng), randn_var(&[k, n], &mut rng)],
            |v: &[Tensor<f64>]| v[0].matmul(&v[1])
        );

        // softmax / layernorm
        let d = vec![rng.gen_range(1..=3usize), rng.gen_range(2..=5usize)];
        let axis = rng.gen_range(0..2usize);
        case!(
            &format!("softmax/{i}"),
            vec![randn_var(&d, &mut rng)],
            move |v: &[Tensor<f64>]| v[0].softmax(axis)
        );
        let dd = rng.gen_range(2..=5usize);
        let rows = rng.gen_range(1..=3usize);
        case!(
            &format!("layernorm/{i}"),
            vec![
                randn_var(&[rows, dd], &mut rng),
                randn_var(&[dd], &mut rng),
                randn_var(&[dd], &mut rng),
            ],
            |v: &[Tensor<f64>]| v[0].layernorm(&v[1], &v[2], 1e-5)
        );

        // convolutions
        case!(
            &format!("conv2d_s1/{i}"),
            vec![randn_var(&[1, 2, 4, 4], &mut rng), randn_var(&[2, 2, 3, 3], &mut rng)],
            |v: &[Tensor<f64>]| v[0].conv2d(&v[1], 1, 1)
        );
        case!(
            &format!("conv2d_s2/{i}"),
            vec![randn_var(&[1, 2, 5, 5], &mut rng), randn_var(&[2, 2, 3, 3], &mut rng)],
            |v: &[Tensor<f64>]| v[0].conv2d(&v[1], 2, 1)
        );
        case!(
            &format!("conv_transpose2d_s1/{i}"),
            vec![randn_var(&[1, 2, 3, 3], &mut rng), randn_var(&[2, 2, 3, 3], &mut rng)],
            |v: &[Tensor<f64>]| v[0].conv_transpose2d(&v[1], 1, 1, 0)
        );
        case!(
            &format!("conv_transpose2d_s2/{i}"),
            vec![randn_var(&[1, 2, 3, 3], &mut rng), randn_var(&[2, 2, 5, 5], &mut rng)],
            |v: &[Tensor<f64>]| v[0].conv_transpose2d(&v[1], 2, 2, 1)
        );
        case!(
            &format!("conv2d_fused_bias/{i}"),
            vec![
                randn_var(&[2, 2, 4, 4], &mut rng),
                randn_var(&[3, 2, 3, 3], &mut rng),
                randn_var(&[3], &mut rng),
            ],
            |v: &[Tensor<f64>]| v[0].conv2d_bias(&v[1], Some(&v[2]), 1, 1)
        );
        case!(
            &format!("conv_transpose2d_fused_bias/{i}"),
            vec![
                randn_var(&[2, 2, 3, 3], &mut rng),
                randn_var(&[2, 3, 5, 5], &mut rng),
                randn_var(&[3], &mut rng),
            ],
            |v: &[Tensor<f64>]| v[0].conv_transpose2d_bias(&v[1], Some(&v[2]), 2, 2, 1)
        );

        // reductions
        let d = small_dims(&mut rng);
        case!(
            &format!("sum_all/{i}"),
            vec![randn_var(&d, &mut rng)],
            |v: &[Tensor<f64>]| Ok(v[0].sum_all())
        );
        let d = small_dims(&mut rng);
        case!(
            &format!("mean_all/{i}"),
            vec![randn_var(&d, &mut rng)],
            |v: &[Tensor<f64>]| Ok(v[0].mean_all())
        );
        let d = small_dims(&mut rng);
        let axis = rng.gen_range(0..d.len());
        let keep = rng.gen_bool(0.5);
        case!(
            &format!("sum_axis/{i}"),
            vec![randn_var(&d, &mut rng)],
            move |v: &[Tensor<f64>]| v[0].sum_axis(axis, keep)
        );
        let d = small_dims(&mut rng);
        let axis = rng.gen_range(0..d.len());
        case!(
            &format!("mean_axis/{i}"),
            vec![randn_var(&d, &mut rng)],
            move |v: &[Tensor<f64>]| v[0].mean_axis(axis, false)
        );

        // shape ops
        let (a, bb) = (rng.gen_range(1..=3usize), rng.gen_range(1..=4usize));
        case!(
            &format!("reshape/{i}"),
            vec![randn_var(&[a, bb], &mut rng)],
            move |v: &[Tensor<f64>]| v[0].reshape(vec![bb, a])
        );
        case!(
            &format!("transpose/{i}"),
            vec![randn_var(&[2, 3, 2], &mut rng)],
            |v: &[Tensor<f64>]| v[0].transpose(0, 2)
        );
        case!(
            &format!("concat/{i}"),
            vec![randn_var(&[2, 2], &mut rng), randn_var(&[3, 2], &mut rng)],
            |v: &[Tensor<f64>]| Tensor::concat(v, 0)
        );
        case!(
            &format!("slice/{i}"),
            vec![randn_var(&[4, 3], &mut rng)],
            |v: &[Tensor<f64>]| v[0].slice(0, 1, 2)
        );
        case!(
            &format!("broadcast_to/{i}"),
            vec![randn_var(&[1, 3], &mut rng)],
            |v: &[Tensor<f64>]| v[0].broadcast_to(vec![4, 2, 3])
        );
        case!(
            &format!("mse_loss/{i}"),
            vec![randn_var(&[2, 3], &mut rng), randn_var(&[2, 3], &mut rng)],
            |v: &[Tensor<f64>]| v[0].mse_loss(&v[1])
        );
    }
    report
}
