//! Central-difference verification of tape gradients.
//!
//! Checks run in f64: the f32 engine shares every code path through the
//! generic scalar type, so verifying the f64 instantiation validates the
//! arithmetic without drowning in single-precision truncation noise.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Acceptance gate for relative error in f64.
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor keeping the relative error defined near zero.
pub const FD_FLOOR: f64 = 1e-8;

/// Worst relative disagreement between an analytic gradient and central
/// differences of `f` around `point`.
#[derive(Clone, Copy, Debug)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    /// Analytic and numeric derivative at the worst coordinate, for telling
    /// true gradient bugs from differencing noise on near-zero entries.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Coordinates at or above [`FD_REL_TOL`].
    pub over_tol: usize,
}

/// Compares `analytic` against `(f(x+h e_i) - f(x-h e_i)) / 2h` for every
/// coordinate. `f` is evaluated twice at `point` first; any bitwise
/// disagreement voids the check, because differencing a noisy function
/// measures the noise.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    analytic: &[f64],
) -> Result<FiniteDiffReport> {
    if point.len() != analytic.len() {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("{} coordinates but {} gradient entries", point.len(), analytic.len()),
        ));
    }
    let once = f(point)?;
    let twice = f(point)?;
    if once.to_bits() != twice.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        over_tol: 0,
    };
    let mut x = point.to_vec();
    for i in 0..x.len() {
        let keep = x[i];
        x[i] = keep + FD_STEP;
        let up = f(&x)?;
        x[i] = keep - FD_STEP;
        let down = f(&x)?;
        x[i] = keep;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / FD_FLOOR.max(a.abs() + numeric.abs());
        if rel >= FD_REL_TOL {
            report.over_tol += 1;
        }
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}

/// Result of checking one registered op.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

struct Scenario {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    #[allow(clippy::type_complexity)]
    build: Box<dyn Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>>,
}

fn mse_target(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(rng, shape, 1.0)
}

fn scenarios(rng: &mut ChaCha8Rng) -> Vec<Scenario> {
    let mut list: Vec<Scenario> = Vec::new();
    // Non-scalar ops are reduced against a fixed random target through mse,
    // which weights every output coordinate differently and so catches
    // per-coordinate gradient mistakes that a plain mean would average away.
    let against_target = |name: &'static str,
                              shapes: Vec<Vec<usize>>,
                              out_shape: Vec<usize>,
                              rng: &mut ChaCha8Rng,
                              op: Box<dyn Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>>| {
        let target = mse_target(rng, &out_shape);
        Scenario {
            name,
            shapes,
            build: Box::new(move |tape, vars| {
                let y = op(tape, vars)?;
                let t = tape.constant(target.clone())?;
                y.mse(&t)
            }),
        }
    };

    list.push(against_target(
        "add",
        vec![vec![2, 3], vec![2, 3]],
        vec![2, 3],
        rng,
        Box::new(|_, v| v[0].add(&v[1])),
    ));
    list.push(against_target(
        "sub",
        vec![vec![2, 3], vec![2, 3]],
        vec![2, 3],
        rng,
        Box::new(|_, v| v[0].sub(&v[1])),
    ));
    list.push(against_target(
        "scale",
        vec![vec![3, 2]],
        vec![3, 2],
        rng,
        Box::new(|_, v| v[0].scale(-1.7)),
    ));
    list.push(against_target(
        "matmul",
        vec![vec![3, 4], vec![4, 2]],
        vec![3, 2],
        rng,
        Box::new(|_, v| v[0].matmul(&v[1])),
    ));
    list.push(against_target(
        "matmul_batched_shared_rhs",
        vec![vec![2, 3, 4], vec![4, 2]],
        vec![2, 3, 2],
        rng,
        Box::new(|_, v| v[0].matmul(&v[1])),
    ));
    list.push(against_target(
        "matmul_batched",
        vec![vec![2, 3, 4], vec![2, 4, 2]],
        vec![2, 3, 2],
        rng,
        Box::new(|_, v| v[0].matmul(&v[1])),
    ));
    list.push(against_target(
        "matmul_nt",
        vec![vec![3, 4], vec![2, 4]],
        vec![3, 2],
        rng,
        Box::new(|_, v| v[0].matmul_nt(&v[1])),
    ));
    list.push(against_target(
        "matmul_nt_batched",
        vec![vec![2, 3, 4], vec![2, 5, 4]],
        vec![2, 3, 5],
        rng,
        Box::new(|_, v| v[0].matmul_nt(&v[1])),
    ));
    list.push(against_target(
        "transpose",
        vec![vec![3, 4]],
        vec![4, 3],
        rng,
        Box::new(|_, v| v[0].transpose2d()),
    ));
    list.push(against_target(
        "add_bias_row",
        vec![vec![2, 3, 4], vec![4]],
        vec![2, 3, 4],
        rng,
        Box::new(|_, v| v[0].add_bias_row(&v[1])),
    ));
    list.push(against_target(
        "repeat_first",
        vec![vec![1, 3, 2]],
        vec![4, 3, 2],
        rng,
        Box::new(|_, v| v[0].repeat_first(4)),
    ));
    list.push(against_target(
        "reshape",
        vec![vec![2, 6]],
        vec![3, 4],
        rng,
        Box::new(|_, v| v[0].reshape(vec![3, 4])),
    ));
    list.push(against_target(
        "permute",
        vec![vec![2, 3, 4]],
        vec![4, 2, 3],
        rng,
        Box::new(|_, v| v[0].permute(&[2, 0, 1])),
    ));
    list.push(against_target(
        "narrow",
        vec![vec![2, 5, 3]],
        vec![2, 3, 3],
        rng,
        Box::new(|_, v| v[0].narrow(1, 1, 3)),
    ));
    list.push(against_target(
        "concat",
        vec![vec![2, 2, 3], vec![2, 4, 3]],
        vec![2, 6, 3],
        rng,
        Box::new(|_, v| v[0].concat(&v[1], 1)),
    ));
    list.push(against_target(
        "softmax",
        vec![vec![3, 5]],
        vec![3, 5],
        rng,
        Box::new(|_, v| v[0].softmax()),
    ));
    list.push(against_target(
        "layer_norm",
        vec![vec![3, 6], vec![6], vec![6]],
        vec![3, 6],
        rng,
        Box::new(|_, v| v[0].layer_norm(&v[1], &v[2], 1e-6)),
    ));
    list.push(against_target(
        "gelu",
        vec![vec![3, 4]],
        vec![3, 4],
        rng,
        Box::new(|_, v| v[0].gelu()),
    ));
    list.push(Scenario {
        name: "mean",
        shapes: vec![vec![3, 4]],
        build: Box::new(|_, v| v[0].mean()),
    });
    list.push(Scenario {
        name: "sum",
        shapes: vec![vec![2, 3]],
        build: Box::new(|_, v| v[0].sum()),
    });
    list.push(Scenario {
        name: "mse",
        shapes: vec![vec![3, 4], vec![3, 4]],
        build: Box::new(|_, v| v[0].mse(&v[1])),
    });
    list.push(Scenario {
        name: "soft_cross_entropy",
        shapes: vec![vec![4, 6], vec![4, 6]],
        build: Box::new(|_, v| v[0].soft_cross_entropy(&v[1], 3.0)),
    });
    list.push(Scenario {
        name: "soft_cross_entropy_unit_tau",
        shapes: vec![vec![4, 6], vec![4, 6]],
        build: Box::new(|_, v| v[0].soft_cross_entropy(&v[1], 1.0)),
    });
    list.push(Scenario {
        name: "cross_entropy",
        shapes: vec![vec![4, 6]],
        build: Box::new(|_, v| v[0].cross_entropy(&[1, 4, 0, 2])),
    });
    list
}

/// Runs the central-difference check against every registered op with random
/// inputs drawn from `seed`. Returns one entry per op in registration order.
pub fn op_gradient_checks(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenarios = scenarios(&mut rng);
    let mut out = Vec::with_capacity(scenarios.len());
    for sc in &scenarios {
        let point: Vec<f64> = {
            let mut flat = Vec::new();
            for shape in &sc.shapes {
                let t = Tensor::<f64>::randn(&mut rng, shape, 1.0);
                flat.extend_from_slice(t.data());
            }
            flat
        };

        let eval = |params: &[f64]| -> Result<f64> {
            let tape = Tape::<f64>::new();
            let mut vars = Vec::with_capacity(sc.shapes.len());
            let mut off = 0;
            for shape in &sc.shapes {
                let n: usize = shape.iter().product();
                let t = Tensor::new(shape.clone(), params[off..off + n].to_vec())?;
                off += n;
                vars.push(tape.leaf(t, true)?);
            }
            (sc.build)(&tape, &vars)?.item()
        };

        let analytic = {
            let tape = Tape::<f64>::new();
            let mut vars = Vec::with_capacity(sc.shapes.len());
            let mut off = 0;
            for shape in &sc.shapes {
                let n: usize = shape.iter().product();
                let t = Tensor::new(shape.clone(), point[off..off + n].to_vec())?;
                off += n;
                vars.push(tape.leaf(t, true)?);
            }
            let loss = (sc.build)(&tape, &vars)?;
            loss.backward()?;
            let mut flat = Vec::with_capacity(point.len());
            for v in &vars {
                flat.extend_from_slice(v.grad().expect("grad-requiring leaf").data());
            }
            flat
        };

        let mut f = |p: &[f64]| eval(p);
        let report = finite_diff_check(&mut f, &point, &analytic)?;
        out.push(OpCheck {
            name: sc.name,
            max_rel_err: report.max_rel_err,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_exact() {
        let point = vec![0.5, -1.25, 2.0];
        let analytic: Vec<f64> = point.iter().map(|x| 2.0 * x).collect();
        let mut f = |x: &[f64]| -> Result<f64> { Ok(x.iter().map(|v| v * v).sum()) };
        let r = finite_diff_check(&mut f, &point, &analytic).unwrap();
        assert!(r.max_rel_err < 1e-7, "max rel err {}", r.max_rel_err);
    }

    #[test]
    fn constant_function_reports_zero_error() {
        let point = vec![1.0, 2.0];
        let analytic = vec![0.0, 0.0];
        let mut f = |_: &[f64]| -> Result<f64> { Ok(42.0) };
        let r = finite_diff_check(&mut f, &point, &analytic).unwrap();
        assert!(r.max_rel_err < 1e-9);
    }

    #[test]
    fn nondeterministic_function_is_refused() {
        let mut calls = 0u64;
        let mut f = |_: &[f64]| -> Result<f64> {
            calls += 1;
            Ok(1.0 + calls as f64 * 1e-12)
        };
        let err = finite_diff_check(&mut f, &[0.0], &[0.0]).unwrap_err();
        assert!(matches!(err, Error::NonDeterministic));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let point = vec![1.0, -0.5];
        let wrong: Vec<f64> = point.iter().map(|x| 2.0 * x + 0.3).collect();
        let mut f = |x: &[f64]| -> Result<f64> { Ok(x.iter().map(|v| v * v).sum()) };
        let r = finite_diff_check(&mut f, &point, &wrong).unwrap();
        assert!(r.max_rel_err > 1e-2);
    }

    #[test]
    fn every_op_passes_over_many_seeds() {
        for seed in 0..20u64 {
            for check in op_gradient_checks(seed).unwrap() {
                assert!(
                    check.max_rel_err < FD_REL_TOL,
                    "op {} seed {}: rel err {:.3e}",
                    check.name,
                    seed,
                    check.max_rel_err
                );
            }
        }
    }
}
