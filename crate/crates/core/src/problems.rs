//! Finite-sum objectives, regularizers and prox operators.
//!
//! A problem is an `n × m` grid of component losses: worker `i` owns the
//! components `f_{i1}, …, f_{im}` and its local objective is their mean,
//! while the global objective is the mean over workers, optionally plus a
//! non-smooth regularizer `R`. The ℓ2 ridge term is folded into every
//! component so that each `f_ij` stays `L`-smooth and each `f_i` stays
//! `μ`-strongly convex with `μ = λ₂`; `R` is reserved for the non-smooth
//! part.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, axpy, norm_sq, pairwise_sum, pairwise_vec_mean};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("the problem is not strongly convex (mu = 0)")]
    NotStronglyConvex,
}

/// Sparse feature row with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseRow {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseRow {
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| v * x[i as usize])
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// `out += s * row`
    pub fn axpy_into(&self, out: &mut [f64], s: f64) {
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i as usize] += s * v;
        }
    }

    pub fn normalize(&mut self) {
        let norm = self.norm_sq().sqrt();
        if norm > 0.0 {
            for v in &mut self.values {
                *v /= norm;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticComponent {
    pub feature: SparseRow,
    /// Label in {−1, +1}.
    pub label: f64,
}

/// `f(x) = ½ Σ_k a_k (x_k − c_k)²` with a PSD diagonal `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticComponent {
    pub diag: Vec<f64>,
    pub center: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Components {
    Logistic(Vec<LogisticComponent>),
    Quadratic(Vec<QuadraticComponent>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Regularizer {
    None,
    L1(f64),
    L2(f64),
}

impl Regularizer {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Regularizer::None => 0.0,
            Regularizer::L1(l) => l * x.iter().map(|v| v.abs()).sum::<f64>(),
            Regularizer::L2(l) => 0.5 * l * norm_sq(x),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Regularizer::None)
    }
}

/// `prox_{γR}(x) = argmin_y { γR(y) + ½‖y−x‖² }`, in closed form.
pub fn prox(reg: &Regularizer, gamma: f64, x: &[f64]) -> Vec<f64> {
    debug_assert!(gamma > 0.0);
    match reg {
        Regularizer::None => x.to_vec(),
        Regularizer::L1(l) => {
            let t = gamma * l;
            x.iter()
                .map(|&v| {
                    if v > t {
                        v - t
                    } else if v < -t {
                        v + t
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        Regularizer::L2(l) => {
            let scale = 1.0 / (1.0 + gamma * l);
            x.iter().map(|&v| v * scale).collect()
        }
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^u)` without overflow.
fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessConstants {
    pub l: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteSumProblem {
    pub n: usize,
    pub m: usize,
    pub dim: usize,
    pub components: Components,
    pub lambda2: f64,
    pub regularizer: Regularizer,
}

impl FiniteSumProblem {
    pub fn new(
        n: usize,
        m: usize,
        dim: usize,
        components: Components,
        lambda2: f64,
        regularizer: Regularizer,
    ) -> Result<Self, ProblemError> {
        if n == 0 || m == 0 || dim == 0 {
            return Err(ProblemError::InvalidInput(
                "n, m and the dimension must be positive".into(),
            ));
        }
        if lambda2 < 0.0 {
            return Err(ProblemError::InvalidInput("lambda2 must be >= 0".into()));
        }
        let count = match &components {
            Components::Logistic(rows) => rows.len(),
            Components::Quadratic(comps) => comps.len(),
        };
        if count != n * m {
            return Err(ProblemError::InvalidInput(format!(
                "{count} components for an {n} x {m} grid"
            )));
        }
        if let Components::Quadratic(comps) = &components {
            for c in comps {
                if c.diag.len() != dim || c.center.len() != dim {
                    return Err(ProblemError::InvalidInput(
                        "quadratic component dimension mismatch".into(),
                    ));
                }
                if c.diag.iter().any(|&a| a < 0.0) {
                    return Err(ProblemError::InvalidInput(
                        "quadratic diagonal must be PSD".into(),
                    ));
                }
            }
        }
        Ok(FiniteSumProblem {
            n,
            m,
            dim,
            components,
            lambda2,
            regularizer,
        })
    }

    fn check_index(&self, i: usize, j: usize) -> Result<(), ProblemError> {
        if i >= self.n || j >= self.m {
            return Err(ProblemError::InvalidInput(format!(
                "component index ({i}, {j}) out of range for {} x {}",
                self.n, self.m
            )));
        }
        Ok(())
    }

    pub fn component_loss(&self, i: usize, j: usize, x: &[f64]) -> f64 {
        let ridge = 0.5 * self.lambda2 * norm_sq(x);
        match &self.components {
            Components::Logistic(rows) => {
                let row = &rows[i * self.m + j];
                let z = row.label * row.feature.dot(x);
                softplus(-z) + ridge
            }
            Components::Quadratic(comps) => {
                let c = &comps[i * self.m + j];
                let q: f64 = c
                    .diag
                    .iter()
                    .zip(&c.center)
                    .zip(x)
                    .map(|((&a, &ck), &xk)| a * (xk - ck) * (xk - ck))
                    .sum();
                0.5 * q + ridge
            }
        }
    }

    /// Writes `∇f_ij(x)` into `out`.
    pub fn component_grad_into(&self, i: usize, j: usize, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        match &self.components {
            Components::Logistic(rows) => {
                let row = &rows[i * self.m + j];
                let coeff = self.logistic_coeff(i, j, x);
                row.feature.axpy_into(out, coeff);
                if self.lambda2 != 0.0 {
                    axpy(out, self.lambda2, x);
                }
            }
            Components::Quadratic(comps) => {
                let c = &comps[i * self.m + j];
                for k in 0..self.dim {
                    out[k] = c.diag[k] * (x[k] - c.center[k]);
                }
                if self.lambda2 != 0.0 {
                    axpy(out, self.lambda2, x);
                }
            }
        }
    }

    /// The GLM scalar of a logistic component: `∇f_ij(x)` equals
    /// `coeff · a_ij + λ₂ x`. Panics on quadratic components.
    pub fn logistic_coeff(&self, i: usize, j: usize, x: &[f64]) -> f64 {
        match &self.components {
            Components::Logistic(rows) => {
                let row = &rows[i * self.m + j];
                let z = row.label * row.feature.dot(x);
                -row.label * sigmoid(-z)
            }
            Components::Quadratic(_) => panic!("GLM scalar requested on a quadratic component"),
        }
    }

    /// Rebuilds `∇f_ij` from a stored GLM scalar; bit-identical to
    /// [`Self::component_grad_into`] evaluated at the point that produced
    /// `coeff` when `λ₂ = 0`.
    pub fn grad_from_logistic_coeff(&self, i: usize, j: usize, coeff: f64, out: &mut [f64]) {
        out.fill(0.0);
        match &self.components {
            Components::Logistic(rows) => {
                rows[i * self.m + j].feature.axpy_into(out, coeff);
            }
            Components::Quadratic(_) => panic!("GLM scalar used on a quadratic component"),
        }
    }

    pub fn evaluate_component(
        &self,
        i: usize,
        j: usize,
        x: &[f64],
    ) -> Result<(f64, Vec<f64>), ProblemError> {
        self.check_index(i, j)?;
        if !linalg::all_finite(x) {
            return Err(ProblemError::InvalidInput(
                "evaluation point has non-finite entries".into(),
            ));
        }
        let mut grad = vec![0.0; self.dim];
        self.component_grad_into(i, j, x, &mut grad);
        Ok((self.component_loss(i, j, x), grad))
    }

    /// `∇f_i(x) = (1/m) Σ_j ∇f_ij(x)`, pairwise-summed in component order.
    pub fn worker_grad(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let grads: Vec<Vec<f64>> = (0..self.m)
            .map(|j| {
                let mut g = vec![0.0; self.dim];
                self.component_grad_into(i, j, x, &mut g);
                g
            })
            .collect();
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        pairwise_vec_mean(&refs, self.dim)
    }

    /// `∇f(x) = (1/n) Σ_i ∇f_i(x)`, pairwise over ascending worker index.
    pub fn full_grad(&self, x: &[f64]) -> Vec<f64> {
        let grads: Vec<Vec<f64>> = (0..self.n).map(|i| self.worker_grad(i, x)).collect();
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        pairwise_vec_mean(&refs, self.dim)
    }

    pub fn worker_loss(&self, i: usize, x: &[f64]) -> f64 {
        let losses: Vec<f64> = (0..self.m).map(|j| self.component_loss(i, j, x)).collect();
        pairwise_sum(&losses) / self.m as f64
    }

    /// The smooth part `f(x)` (ridge included, regularizer excluded).
    pub fn objective(&self, x: &[f64]) -> f64 {
        let losses: Vec<f64> = (0..self.n).map(|i| self.worker_loss(i, x)).collect();
        pairwise_sum(&losses) / self.n as f64
    }

    pub fn objective_with_reg(&self, x: &[f64]) -> f64 {
        self.objective(x) + self.regularizer.value(x)
    }

    /// Smoothness and strong-convexity constants.
    ///
    /// Logistic: `L = max_ij ‖a_ij‖²/4 + λ₂` (the sigmoid derivative is at
    /// most 1/4) and `μ = λ₂`. Quadratic: extreme eigenvalues, with `L` over
    /// components and `μ` over the per-worker means.
    pub fn constants(&self) -> SmoothnessConstants {
        match &self.components {
            Components::Logistic(rows) => {
                let max_row = rows
                    .iter()
                    .map(|r| r.feature.norm_sq())
                    .fold(0.0, f64::max);
                SmoothnessConstants {
                    l: max_row / 4.0 + self.lambda2,
                    mu: self.lambda2,
                }
            }
            Components::Quadratic(comps) => {
                let l_max = comps
                    .iter()
                    .flat_map(|c| c.diag.iter().copied())
                    .fold(0.0, f64::max);
                let mut mu_min = f64::INFINITY;
                for i in 0..self.n {
                    for k in 0..self.dim {
                        let mean_k: f64 = (0..self.m)
                            .map(|j| comps[i * self.m + j].diag[k])
                            .sum::<f64>()
                            / self.m as f64;
                        mu_min = mu_min.min(mean_k);
                    }
                }
                SmoothnessConstants {
                    l: l_max + self.lambda2,
                    mu: mu_min + self.lambda2,
                }
            }
        }
    }

    /// Condition number `κ = (L+μ)/(2μ)`.
    pub fn kappa(&self) -> Result<f64, ProblemError> {
        let SmoothnessConstants { l, mu } = self.constants();
        if mu <= 0.0 {
            return Err(ProblemError::NotStronglyConvex);
        }
        Ok((l + mu) / (2.0 * mu))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub probe_count: usize,
}

/// Compares analytic component gradients to central finite differences on
/// `probes` random `(i, j, x)` triples. Coordinates where both the analytic
/// and the differenced value are below 1e-8 in magnitude are compared
/// absolutely against that threshold instead of relatively.
pub fn fd_check<R: Rng + ?Sized>(
    problem: &FiniteSumProblem,
    probes: usize,
    h: f64,
    rng: &mut R,
) -> GradCheckReport {
    assert!(h > 0.0, "finite-difference step must be positive");
    const ZERO_GRAD_ABS: f64 = 1e-8;
    let mut max_rel = 0.0f64;
    for _ in 0..probes {
        let i = rng.gen_range(0..problem.n);
        let j = rng.gen_range(0..problem.m);
        let x: Vec<f64> = (0..problem.dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut grad = vec![0.0; problem.dim];
        problem.component_grad_into(i, j, &x, &mut grad);
        let mut xp = x.clone();
        for k in 0..problem.dim {
            xp[k] = x[k] + h;
            let fp = problem.component_loss(i, j, &xp);
            xp[k] = x[k] - h;
            let fm = problem.component_loss(i, j, &xp);
            xp[k] = x[k];
            let fd = (fp - fm) / (2.0 * h);
            let err = (grad[k] - fd).abs();
            let denom = grad[k].abs().max(fd.abs());
            let rel = if denom > ZERO_GRAD_ABS {
                err / denom
            } else if err > ZERO_GRAD_ABS {
                err / ZERO_GRAD_ABS
            } else {
                0.0
            };
            max_rel = max_rel.max(rel);
        }
    }
    GradCheckReport {
        max_relative_error: max_rel,
        probe_count: probes,
    }
}
