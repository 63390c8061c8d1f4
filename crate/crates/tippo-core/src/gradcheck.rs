//! Finite-difference gradient checking.
//!
//! Central differences (f(θ+h) − f(θ−h)) / 2h compared elementwise against
//! the tape's reverse pass, with relative error |a−b| / max(|a|, |b|, 1e-8).
//! This is the independent oracle every differentiable module is verified
//! against.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::GradMap;
use crate::tensor::Tensor;

/// A container of named trainable tensors. Names are stable identifiers
/// shared by the tape bindings, the optimizer, checkpoints, and this check.
pub trait ParamContainer {
    fn param_names(&self) -> Vec<String>;
    fn param(&self, name: &str) -> Option<&Tensor>;
    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor>;
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub h: f64,
    pub tol: f64,
    pub checks: Vec<ParamCheck>,
    pub passed: bool,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Check the gradients of `eval` against central finite differences for
/// every parameter of `model`.
///
/// `eval` must deterministically compute the scalar loss at the model's
/// current parameters together with the analytic gradients (a zero gradient
/// for any parameter the loss does not reach). Non-determinism is detected
/// by double evaluation and aborts the check.
pub fn finite_difference_check<M, F>(model: &mut M, mut eval: F, h: f64, tol: f64) -> Result<FdReport>
where
    M: ParamContainer,
    F: FnMut(&M) -> Result<(f64, GradMap)>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::invalid(format!("finite-difference step h={h} outside [1e-7, 1e-3]")));
    }
    let (loss_a, grads) = eval(model)?;
    let (loss_b, _) = eval(model)?;
    if loss_a.to_bits() != loss_b.to_bits() {
        return Err(Error::CheckAborted(format!(
            "loss function is not deterministic: {loss_a} vs {loss_b}"
        )));
    }

    let mut checks = Vec::new();
    for name in model.param_names() {
        let len = model
            .param(&name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))?
            .len();
        let analytic = grads.get(&name).cloned();
        let mut max_rel = 0.0f64;
        for i in 0..len {
            let original = model.param(&name).unwrap().data()[i];
            set_elem(model, &name, i, original + h);
            let (f_plus, _) = eval_value_only(&mut eval, model)?;
            set_elem(model, &name, i, original - h);
            let (f_minus, _) = eval_value_only(&mut eval, model)?;
            set_elem(model, &name, i, original);

            let fd = (f_plus - f_minus) / (2.0 * h);
            let an = analytic.as_ref().map_or(0.0, |t| t.data()[i]);
            max_rel = max_rel.max(relative_error(fd, an));
        }
        checks.push(ParamCheck {
            name,
            elements: len,
            max_rel_err: max_rel,
            passed: max_rel <= tol,
        });
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(FdReport { h, tol, checks, passed })
}

fn set_elem<M: ParamContainer>(model: &mut M, name: &str, i: usize, value: f64) {
    model.param_mut(name).expect("known parameter").data_mut()[i] = value;
}

fn eval_value_only<M, F>(eval: &mut F, model: &M) -> Result<(f64, GradMap)>
where
    M: ParamContainer,
    F: FnMut(&M) -> Result<(f64, GradMap)>,
{
    eval(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    struct OneParam {
        theta: Tensor,
    }

    impl ParamContainer for OneParam {
        fn param_names(&self) -> Vec<String> {
            vec!["theta".into()]
        }
        fn param(&self, name: &str) -> Option<&Tensor> {
            (name == "theta").then_some(&self.theta)
        }
        fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
            (name == "theta").then_some(&mut self.theta)
        }
    }

    fn linear_eval(c: Vec<f64>) -> impl FnMut(&OneParam) -> crate::error::Result<(f64, GradMap)> {
        move |m: &OneParam| {
            let mut tape = Tape::new();
            let t = tape.param("theta", &m.theta);
            let cv = tape.constant(Tensor::vector(c.clone()));
            let loss = tape.dot(t, cv)?;
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).item(), tape.grad_map(&grads)))
        }
    }

    #[test]
    fn linear_loss_is_exact() {
        let mut m = OneParam { theta: Tensor::vector(vec![0.4, -1.2, 2.0]).with_grad() };
        let report =
            finite_difference_check(&mut m, linear_eval(vec![1.5, -0.5, 3.0]), 1e-5, 1e-4).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err() < 1e-10, "max rel err {}", report.max_rel_err());
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut m = OneParam { theta: Tensor::vector(vec![0.4, -1.2, 2.0]).with_grad() };
        let mut inner = linear_eval(vec![1.5, -0.5, 3.0]);
        let corrupted = move |m: &OneParam| {
            let (loss, mut grads) = inner(m)?;
            for g in grads.values_mut() {
                for x in g.data_mut() {
                    *x *= 1.01;
                }
            }
            Ok((loss, grads))
        };
        let report = finite_difference_check(&mut m, corrupted, 1e-5, 1e-4).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn nondeterministic_loss_aborts() {
        let mut m = OneParam { theta: Tensor::vector(vec![1.0]).with_grad() };
        let mut counter = 0.0;
        let eval = move |_m: &OneParam| {
            counter += 1.0;
            Ok((counter, BTreeMap::new()))
        };
        match finite_difference_check(&mut m, eval, 1e-5, 1e-4) {
            Err(Error::CheckAborted(_)) => {}
            other => panic!("expected CheckAborted, got {other:?}"),
        }
    }

    #[test]
    fn step_size_out_of_range_rejected() {
        let mut m = OneParam { theta: Tensor::vector(vec![1.0]).with_grad() };
        assert!(finite_difference_check(&mut m, linear_eval(vec![1.0]), 1e-2, 1e-4).is_err());
    }

    /// One composite graph exercising every differentiable primitive,
    /// checked against central differences over many random seeds.
    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = 4;
            let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let mut m = OneParam { theta: Tensor::new(vec![n, n], data).unwrap().with_grad() };
            let aux: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let eval = move |m: &OneParam| {
                let mut tape = Tape::new();
                let tm = tape.param("theta", &m.theta);
                let w = tape.constant(Tensor::vector(aux.clone()));

                let u = tape.gather_row(tm, 0)?; // gather_row (matrix)
                let v = tape.gather_row(tm, 1)?;
                let inner = tape.slice_rows(tm, 1, 3)?; // slice_rows
                let rows = tape.stack_rows(&[u, v])?; // concat (rows)
                let cat = tape.concat(&[u, v])?; // concat (flat)

                let mv = tape.matmul(tm, u)?; // matmul
                let sm = tape.softmax(mv)?; // softmax
                let one = tape.scalar(1.0);
                let shifted = tape.add(sm, one)?; // scalar broadcast add
                let lg = tape.log(shifted)?; // log
                let ex = tape.exp(v)?; // exp
                let prod = tape.mul(lg, ex)?; // mul
                let diff = tape.sub(prod, w)?; // sub
                let cs = tape.cosine_sim(diff, u)?; // cosine_similarity
                let first = tape.index(sm, 0)?; // gather_row (vector)
                let mean = tape.row_mean(inner)?; // row_mean
                let mean2 = tape.row_mean(rows)?;
                let ce = tape.cross_entropy(tm, &[1, 2])?; // cross_entropy

                let msum = tape.sum_vec(mean)?;
                let m2sum = tape.sum_vec(mean2)?;
                let dsum = tape.sum_vec(diff)?;
                let csum = tape.sum_vec(cat)?;
                let terms = [cs, first, msum, m2sum, dsum, csum, ce];
                let total = tape.add_n(&terms)?;
                let loss = tape.scale(total, 0.7)?; // scale
                let grads = tape.backward(loss)?;
                Ok((tape.value(loss).item(), tape.grad_map(&grads)))
            };

            let report = finite_difference_check(&mut m, eval, 1e-5, 1e-4).unwrap();
            assert!(report.passed, "seed {seed}: max rel err {}", report.max_rel_err());
        }
    }
}
