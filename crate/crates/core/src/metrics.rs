//! Lyapunov functions and convergence diagnostics.
//!
//! The quantities here are what the convergence statements contract:
//!
//! * DIANA: `Ψ = ‖x − x*‖² + (cγ²/n) Σ_i ‖h_i − ∇f_i(x*)‖²`,
//! * VR-DIANA: `ψ = ‖x − x*‖² + bγ²H + cγ²D` with
//!   `H = Σ_i ‖h_i − ∇f_i(x*)‖²` and
//!   `D = Σ_i Σ_j ‖∇f_ij(w_ij) − ∇f_ij(x*)‖²`,
//! * SVRG-DIANA: `ψˢ = (f(zˢ) − f*) + b̄γ²H^{ls}` at epoch boundaries.
//!
//! Per trajectory these values need not decrease monotonically; only their
//! conditional expectations contract, which is what the Monte-Carlo checks
//! in [`crate::verify`] measure.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algos::{MasterState, SagaTable, VrMemory, WorkerState};
use crate::engine::{StreamFactory, StreamPurpose};
use crate::linalg::{dist_sq, norm_sq};
use crate::problems::{FiniteSumProblem, SmoothnessConstants};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("wrong method: {0}")]
    WrongMethod(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Which coefficient reading to use for the VR Lyapunov function in the
/// strongly convex regime. The two differ in the `D` weight:
/// `c = 16(ω+1)/n²` makes the one-step contraction inequality checkable,
/// while the alternative statement carries an extra `1/α`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VrCoeffSource {
    Proof,
    Theorem,
}

impl Default for VrCoeffSource {
    fn default() -> Self {
        VrCoeffSource::Proof
    }
}

/// Which corollary's `b, c` pair parameterizes `ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VrRegime {
    StronglyConvex,
    Convex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LyapunovParams {
    /// DIANA shift weight, `c = 4ω/(αn)`.
    pub c_diana: f64,
    /// VR shift weight `b`.
    pub b_vr: f64,
    /// VR table weight `c`.
    pub c_vr: f64,
    /// SVRG-DIANA shift weight `b̄`.
    pub b_bar_svrg: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub omega: f64,
    pub n: usize,
    pub m: usize,
}

/// Assembles the Lyapunov coefficients for a run.
pub fn lyapunov_params(
    constants: SmoothnessConstants,
    gamma: f64,
    alpha: f64,
    omega: f64,
    n: usize,
    m: usize,
    source: VrCoeffSource,
    regime: VrRegime,
) -> LyapunovParams {
    let nf = n as f64;
    let c_diana = 4.0 * omega / (alpha * nf);
    let (b_vr, c_vr) = match regime {
        VrRegime::StronglyConvex => {
            let b = 4.0 * (omega + 1.0) / (alpha * nf * nf);
            let c = match source {
                VrCoeffSource::Proof => 16.0 * (omega + 1.0) / (nf * nf),
                VrCoeffSource::Theorem => 16.0 * (omega + 1.0) / (alpha * nf * nf),
            };
            (b, c)
        }
        VrRegime::Convex => (
            2.0 * (omega + 1.0) / (alpha * nf * nf),
            6.0 * (omega + 1.0) / (nf * nf),
        ),
    };
    let b_bar_svrg = svrg_b_bar(constants.l, omega, alpha, gamma, n, m);
    LyapunovParams {
        c_diana,
        b_vr,
        c_vr,
        b_bar_svrg,
        gamma,
        alpha,
        omega,
        n,
        m,
    }
}

/// The epoch Lyapunov weight `b̄ = b / (l(2γ − c))` with `b = 6ω/(n²α)` and
/// `c = (6Lω/n)γ² + (2L + 4L/n)γ² + 4bγ²Lαn`, the strongly convex epoch
/// schedule's own `l = ⌈2/θ⌉`, `θ = min{μγ, α/2}` being folded in by the
/// caller through `epoch_len`.
fn svrg_b_bar(l_smooth: f64, omega: f64, alpha: f64, gamma: f64, n: usize, epoch_len: usize) -> f64 {
    let nf = n as f64;
    let b = 6.0 * omega / (nf * nf * alpha);
    let c = 6.0 * l_smooth * omega / nf * gamma * gamma
        + (2.0 * l_smooth + 4.0 * l_smooth / nf) * gamma * gamma
        + 4.0 * b * gamma * gamma * l_smooth * alpha * nf;
    let denom = epoch_len as f64 * (2.0 * gamma - c);
    if denom > 0.0 {
        b / denom
    } else {
        f64::NAN
    }
}

/// The contraction rate of the strongly convex VR theorem:
/// `ρ = min{ μ/(L(1+36(ω+1)/n)), α/2, 3/(8m) }`.
pub fn vr_contraction_rate(
    constants: SmoothnessConstants,
    omega: f64,
    alpha: f64,
    n: usize,
    m: usize,
) -> f64 {
    let nf = n as f64;
    (constants.mu / (constants.l * (1.0 + 36.0 * (omega + 1.0) / nf)))
        .min(alpha / 2.0)
        .min(3.0 / (8.0 * m as f64))
}

/// The reference solution and the gradients evaluated there, cached once per
/// run so the Lyapunov evaluations stay cheap.
#[derive(Debug, Clone)]
pub struct OptimumCache {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    /// `∇f_i(x*)` per worker.
    pub worker_grads: Vec<Vec<f64>>,
    /// `∇f_ij(x*)` flattened as `i*m + j`.
    pub component_grads: Vec<Vec<f64>>,
}

impl OptimumCache {
    pub fn new(problem: &FiniteSumProblem, x_star: Vec<f64>, f_star: f64) -> Self {
        let component_grads: Vec<Vec<f64>> = (0..problem.n)
            .flat_map(|i| {
                (0..problem.m).map(move |j| (i, j))
            })
            .map(|(i, j)| {
                let mut g = vec![0.0; problem.dim];
                problem.component_grad_into(i, j, &x_star, &mut g);
                g
            })
            .collect();
        let worker_grads: Vec<Vec<f64>> = (0..problem.n)
            .map(|i| problem.worker_grad(i, &x_star))
            .collect();
        OptimumCache {
            x_star,
            f_star,
            worker_grads,
            component_grads,
        }
    }
}

/// `H = Σ_i ‖h_i − ∇f_i(x*)‖²` over the worker shifts.
pub fn shift_error(workers: &[WorkerState], cache: &OptimumCache) -> f64 {
    workers
        .iter()
        .zip(&cache.worker_grads)
        .map(|(w, g)| dist_sq(&w.shift, g))
        .sum()
}

/// `D = Σ_i Σ_j ‖∇f_ij(w_ij) − ∇f_ij(x*)‖²` over the variance-reduction
/// memory (the stored table for SAGA, the anchor for L-SVRG).
pub fn table_error(
    workers: &[WorkerState],
    problem: &FiniteSumProblem,
    cache: &OptimumCache,
) -> Result<f64, MetricsError> {
    let m = problem.m;
    let d = problem.dim;
    let mut total = 0.0;
    let mut scratch = vec![0.0; d];
    for (i, w) in workers.iter().enumerate() {
        match &w.memory {
            VrMemory::Saga(table) => {
                for j in 0..m {
                    match table {
                        SagaTable::Full(t) => {
                            total += dist_sq(&t[j], &cache.component_grads[i * m + j]);
                        }
                        SagaTable::Scalar(t) => {
                            problem.grad_from_logistic_coeff(i, j, t[j], &mut scratch);
                            total += dist_sq(&scratch, &cache.component_grads[i * m + j]);
                        }
                    }
                }
            }
            VrMemory::Anchor { point, .. } => {
                for j in 0..m {
                    problem.component_grad_into(i, j, point, &mut scratch);
                    total += dist_sq(&scratch, &cache.component_grads[i * m + j]);
                }
            }
            VrMemory::None => {
                return Err(MetricsError::WrongMethod(
                    "table error needs variance-reduction memory; DIANA has none",
                ))
            }
        }
    }
    Ok(total)
}

/// `Ψ = ‖x − x*‖² + (cγ²/n) Σ_i ‖h_i − ∇f_i(x*)‖²`.
pub fn lyapunov_diana(
    master: &MasterState,
    workers: &[WorkerState],
    cache: &OptimumCache,
    params: &LyapunovParams,
) -> Result<f64, MetricsError> {
    if master.x.len() != cache.x_star.len() {
        return Err(MetricsError::DimensionMismatch(format!(
            "iterate has dimension {}, reference {}",
            master.x.len(),
            cache.x_star.len()
        )));
    }
    let h = shift_error(workers, cache);
    Ok(dist_sq(&master.x, &cache.x_star)
        + params.c_diana * params.gamma * params.gamma / params.n as f64 * h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VrLyapunov {
    pub psi: f64,
    pub h: f64,
    pub d: f64,
}

/// `ψ = ‖x − x*‖² + bγ²H + cγ²D` for VR-DIANA states.
pub fn lyapunov_vr(
    master: &MasterState,
    workers: &[WorkerState],
    problem: &FiniteSumProblem,
    cache: &OptimumCache,
    params: &LyapunovParams,
) -> Result<VrLyapunov, MetricsError> {
    if master.x.len() != cache.x_star.len() {
        return Err(MetricsError::DimensionMismatch(
            "iterate/reference dimension mismatch".into(),
        ));
    }
    let h = shift_error(workers, cache);
    let d = table_error(workers, problem, cache)?;
    let g2 = params.gamma * params.gamma;
    Ok(VrLyapunov {
        psi: dist_sq(&master.x, &cache.x_star) + params.b_vr * g2 * h + params.c_vr * g2 * d,
        h,
        d,
    })
}

/// `ψˢ = (f(z) − f*) + b̄γ²H` for an SVRG-DIANA epoch boundary, with the
/// caller holding `f(z) − f*` and the boundary `H`.
pub fn lyapunov_svrg(f_gap_at_anchor: f64, h_at_boundary: f64, params: &LyapunovParams) -> f64 {
    f_gap_at_anchor + params.b_bar_svrg * params.gamma * params.gamma * h_at_boundary
}

pub fn grad_norm_sq(problem: &FiniteSumProblem, x: &[f64]) -> f64 {
    norm_sq(&problem.full_grad(x))
}

/// Estimates `σ² = (1/n) Σ_i σ_i²` empirically at `x0`, with
/// `σ_i² = E‖∇f_ij(x0) − ∇f_i(x0)‖²` over uniform component draws. The
/// sample count is split evenly across workers.
pub fn estimate_sigma_sq(
    problem: &FiniteSumProblem,
    x0: &[f64],
    samples_per_worker: usize,
    streams: &StreamFactory,
) -> f64 {
    let d = problem.dim;
    let mut total = 0.0;
    let mut g = vec![0.0; d];
    for i in 0..problem.n {
        let mean = problem.worker_grad(i, x0);
        let mut rs = streams.stream(i as u64, StreamPurpose::SigmaEstimate, 0);
        let mut acc = 0.0;
        for _ in 0..samples_per_worker {
            let j = rs.gen_range(0..problem.m);
            problem.component_grad_into(i, j, x0, &mut g);
            acc += dist_sq(&g, &mean);
        }
        total += acc / samples_per_worker as f64;
    }
    total / problem.n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algos::{
        init_states, GradOracle, Method, MethodConfig, VrVariant,
    };
    use crate::dataio::{synth_problem, SynthKind, SynthSpec};
    use crate::problems::Regularizer;

    fn toy_problem() -> FiniteSumProblem {
        synth_problem(&SynthSpec {
            kind: SynthKind::logistic(),
            d: 2,
            n: 2,
            m: 3,
            lambda2: Some(0.3),
            seed: 5,
            regularizer: Regularizer::None,
        })
        .unwrap()
    }

    fn params(gamma: f64, alpha: f64, n: usize, m: usize) -> LyapunovParams {
        lyapunov_params(
            SmoothnessConstants { l: 1.0, mu: 0.1 },
            gamma,
            alpha,
            2.0,
            n,
            m,
            VrCoeffSource::Proof,
            VrRegime::StronglyConvex,
        )
    }

    #[test]
    fn diana_lyapunov_zero_at_optimum() {
        let problem = toy_problem();
        let config = MethodConfig {
            method: Method::Diana {
                oracle: GradOracle::FullGrad,
            },
            alpha: 0.3,
            gamma: 0.1,
        };
        let x_star = vec![0.35, -0.2];
        let f_star = problem.objective(&x_star);
        let cache = OptimumCache::new(&problem, x_star.clone(), f_star);
        let (mut master, mut workers) =
            init_states(&problem, &config, x_star.clone(), crate::algos::ShiftInit::Zero, false)
                .unwrap();
        for (w, g) in workers.iter_mut().zip(&cache.worker_grads) {
            w.shift = g.clone();
        }
        let p = params(0.1, 0.3, 2, 3);
        let psi = lyapunov_diana(&master, &workers, &cache, &p).unwrap();
        assert_eq!(psi, 0.0);

        // with learned shifts, Ψ reduces to the squared distance
        master.x = vec![1.0, 1.0];
        let psi = lyapunov_diana(&master, &workers, &cache, &p).unwrap();
        assert!((psi - dist_sq(&master.x, &x_star)).abs() < 1e-15);
    }

    #[test]
    fn diana_lyapunov_matches_direct_formula() {
        let problem = toy_problem();
        let config = MethodConfig {
            method: Method::Diana {
                oracle: GradOracle::FullGrad,
            },
            alpha: 0.3,
            gamma: 0.1,
        };
        let x_star = vec![0.1, 0.2];
        let cache = OptimumCache::new(&problem, x_star.clone(), 0.0);
        let (mut master, mut workers) =
            init_states(&problem, &config, vec![0.5, -0.5], crate::algos::ShiftInit::Zero, false)
                .unwrap();
        master.x = vec![0.4, 0.9];
        workers[0].shift = vec![0.3, -0.1];
        workers[1].shift = vec![-0.2, 0.6];
        let mut p = params(0.1, 0.3, 2, 3);
        p.c_diana = 1.0;
        let psi = lyapunov_diana(&master, &workers, &cache, &p).unwrap();
        // independent re-evaluation, plain loops
        let mut expected = 0.0;
        for k in 0..2 {
            expected += (master.x[k] - x_star[k]).powi(2);
        }
        let mut h = 0.0;
        for (w, g) in workers.iter().zip(&cache.worker_grads) {
            for k in 0..2 {
                h += (w.shift[k] - g[k]).powi(2);
            }
        }
        expected += 1.0 * 0.1 * 0.1 / 2.0 * h;
        assert!((psi - expected).abs() <= 1e-12 * expected.max(1.0));
    }

    #[test]
    fn vr_lyapunov_zero_at_fully_converged_state() {
        let problem = toy_problem();
        let config = MethodConfig {
            method: Method::VrDiana {
                variant: VrVariant::Saga,
            },
            alpha: 0.3,
            gamma: 0.1,
        };
        let x_star = vec![0.15, -0.35];
        let cache = OptimumCache::new(&problem, x_star.clone(), 0.0);
        let (master, mut workers) =
            init_states(&problem, &config, x_star.clone(), crate::algos::ShiftInit::Zero, false)
                .unwrap();
        for (i, w) in workers.iter_mut().enumerate() {
            w.shift = cache.worker_grads[i].clone();
        }
        let p = params(0.1, 0.3, 2, 3);
        let v = lyapunov_vr(&master, &workers, &problem, &cache, &p).unwrap();
        assert_eq!(v.psi, 0.0);
        assert_eq!(v.h, 0.0);
        assert_eq!(v.d, 0.0);
    }

    #[test]
    fn vr_lyapunov_matches_bruteforce_double_sum() {
        let problem = toy_problem();
        let config = MethodConfig {
            method: Method::VrDiana {
                variant: VrVariant::Saga,
            },
            alpha: 0.3,
            gamma: 0.2,
        };
        let x_star = vec![0.05, 0.25];
        let cache = OptimumCache::new(&problem, x_star.clone(), 0.0);
        let (mut master, mut workers) =
            init_states(&problem, &config, vec![0.7, -0.3], crate::algos::ShiftInit::Zero, false)
                .unwrap();
        master.x = vec![-0.1, 0.45];
        workers[0].shift = vec![0.2, 0.1];
        workers[1].shift = vec![-0.4, 0.05];
        let p = params(0.2, 0.3, 2, 3);
        let v = lyapunov_vr(&master, &workers, &problem, &cache, &p).unwrap();

        // brute-force re-evaluation with explicit loops
        let mut h = 0.0;
        for (i, w) in workers.iter().enumerate() {
            let gi = problem.worker_grad(i, &x_star);
            for k in 0..2 {
                h += (w.shift[k] - gi[k]).powi(2);
            }
        }
        let mut dsum = 0.0;
        for (i, w) in workers.iter().enumerate() {
            let VrMemory::Saga(SagaTable::Full(t)) = &w.memory else {
                panic!("expected a full table");
            };
            for j in 0..problem.m {
                let mut gstar = vec![0.0; 2];
                problem.component_grad_into(i, j, &x_star, &mut gstar);
                for k in 0..2 {
                    dsum += (t[j][k] - gstar[k]).powi(2);
                }
            }
        }
        let expected = dist_sq(&master.x, &x_star)
            + p.b_vr * 0.2 * 0.2 * h
            + p.c_vr * 0.2 * 0.2 * dsum;
        assert!((v.psi - expected).abs() <= 1e-12 * expected.max(1.0));
        assert!((v.h - h).abs() <= 1e-12 * h.max(1.0));
        assert!((v.d - dsum).abs() <= 1e-12 * dsum.max(1.0));
    }

    #[test]
    fn vr_lyapunov_on_diana_state_is_wrong_method() {
        let problem = toy_problem();
        let config = MethodConfig {
            method: Method::Diana {
                oracle: GradOracle::Uniform1,
            },
            alpha: 0.3,
            gamma: 0.1,
        };
        let cache = OptimumCache::new(&problem, vec![0.0, 0.0], 0.0);
        let (master, workers) =
            init_states(&problem, &config, vec![0.0, 0.0], crate::algos::ShiftInit::Zero, false)
                .unwrap();
        let p = params(0.1, 0.3, 2, 3);
        assert!(matches!(
            lyapunov_vr(&master, &workers, &problem, &cache, &p),
            Err(MetricsError::WrongMethod(_))
        ));
    }

    #[test]
    fn coefficient_sources() {
        let c = SmoothnessConstants { l: 1.0, mu: 0.1 };
        let proof = lyapunov_params(c, 0.1, 0.25, 3.0, 2, 4, VrCoeffSource::Proof, VrRegime::StronglyConvex);
        assert!((proof.b_vr - 4.0 * 4.0 / (0.25 * 4.0)).abs() < 1e-12);
        assert!((proof.c_vr - 16.0 * 4.0 / 4.0).abs() < 1e-12);
        let thm = lyapunov_params(c, 0.1, 0.25, 3.0, 2, 4, VrCoeffSource::Theorem, VrRegime::StronglyConvex);
        assert!((thm.c_vr - 16.0 * 4.0 / (0.25 * 4.0)).abs() < 1e-12);
        let cvx = lyapunov_params(c, 0.1, 0.25, 3.0, 2, 4, VrCoeffSource::Proof, VrRegime::Convex);
        assert!((cvx.b_vr - 2.0 * 4.0 / (0.25 * 4.0)).abs() < 1e-12);
        assert!((cvx.c_vr - 6.0 * 4.0 / 4.0).abs() < 1e-12);
        assert!((proof.c_diana - 4.0 * 3.0 / (0.25 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn grad_norm_consistency() {
        let problem = toy_problem();
        let x = vec![0.3, -0.8];
        let direct = norm_sq(&problem.full_grad(&x));
        let via_metrics = grad_norm_sq(&problem, &x);
        assert!((direct - via_metrics).abs() <= 1e-12 * direct.max(1.0));
    }

    #[test]
    fn sigma_estimate_is_zero_for_single_component() {
        let problem = synth_problem(&SynthSpec {
            kind: SynthKind::logistic(),
            d: 3,
            n: 2,
            m: 1,
            lambda2: Some(0.1),
            seed: 2,
            regularizer: Regularizer::None,
        })
        .unwrap();
        let s = estimate_sigma_sq(&problem, &[0.0, 0.0, 0.0], 100, &StreamFactory::new(1));
        assert_eq!(s, 0.0);
    }
}
