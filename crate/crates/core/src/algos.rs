//! Single-round state transitions for the quantized methods.
//!
//! All four methods share the same skeleton: the master broadcasts the
//! iterate, every worker forms a local gradient estimate `g_i`, quantizes the
//! *difference* `g_i − h_i` against its shift vector, and both sides advance
//! the shift by `α` times the decoded message. They differ only in how `g_i`
//! is built:
//!
//! * DIANA — the plain stochastic gradient (full or one uniformly sampled
//!   component);
//! * VR-DIANA variant 1 (L-SVRG) — anchor correction with a shared coin that
//!   refreshes the anchor with probability `1/m`;
//! * VR-DIANA variant 2 (SAGA) — per-component gradient table;
//! * SVRG-DIANA — anchor correction with a fixed epoch length and weighted
//!   epoch anchors `z^s = Σ_r p_r x^{(s−1)l+r}`.
//!
//! Worker computations inside a round are independent and may run on a
//! thread pool; results are aggregated in ascending worker order with
//! pairwise summation, so the outcome is bit-identical to sequential
//! execution.
//!
//! The [`reference`] submodule holds plain unquantized implementations
//! (prox-SGD, SAGA, L-SVRG, SVRG) that consume the same randomness streams;
//! with the identity quantizer the quantized methods reproduce their
//! trajectories bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{axpy, pairwise_vec_mean, pairwise_vec_sum, sub};
use crate::problems::{Components, FiniteSumProblem, Regularizer, SmoothnessConstants, prox};
use crate::quantize::{QuantizeError, QuantizedMessage, Quantizer, decode};
use crate::engine::{StreamFactory, StreamPurpose, MASTER_STREAM_ID};
use rand::Rng;

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error("invalid method configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("{0} requires a strongly convex problem (mu > 0)")]
    Regime(&'static str),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Problem(#[from] crate::problems::ProblemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradOracle {
    /// `g_i = ∇f_i(x)`, the noise-free oracle.
    FullGrad,
    /// `g_i = ∇f_ij(x)` for one uniformly sampled component.
    Uniform1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VrVariant {
    LSvrg,
    Saga,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Method {
    Diana {
        oracle: GradOracle,
    },
    VrDiana {
        variant: VrVariant,
    },
    SvrgDiana {
        epoch_len: usize,
        p_weights: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    /// Shift learning rate; every convergence statement needs `α(ω+1) ≤ 1`.
    pub alpha: f64,
    /// Master step size.
    pub gamma: f64,
}

impl MethodConfig {
    pub fn validate(&self, omega: f64, regularizer: &Regularizer) -> Result<(), AlgoError> {
        if !(self.alpha > 0.0) {
            return Err(AlgoError::InvalidConfig("alpha must be positive".into()));
        }
        if self.alpha * (omega + 1.0) > 1.0 + 1e-9 {
            return Err(AlgoError::InvalidConfig(format!(
                "alpha = {} violates alpha * (omega + 1) <= 1 with omega = {omega}",
                self.alpha
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(AlgoError::InvalidConfig("gamma must be positive".into()));
        }
        match &self.method {
            Method::Diana { .. } => Ok(()),
            Method::VrDiana { .. } | Method::SvrgDiana { .. } => {
                if !regularizer.is_none() {
                    return Err(AlgoError::InvalidConfig(
                        "variance-reduced methods take a plain gradient step; use regularizer = none"
                            .into(),
                    ));
                }
                if let Method::SvrgDiana {
                    epoch_len,
                    p_weights,
                } = &self.method
                {
                    if *epoch_len == 0 {
                        return Err(AlgoError::InvalidConfig(
                            "epoch length must be positive".into(),
                        ));
                    }
                    if p_weights.len() != *epoch_len {
                        return Err(AlgoError::InvalidConfig(format!(
                            "{} epoch weights for epoch length {}",
                            p_weights.len(),
                            epoch_len
                        )));
                    }
                    if p_weights.iter().any(|&p| p < 0.0) {
                        return Err(AlgoError::InvalidConfig(
                            "epoch weights must be nonnegative".into(),
                        ));
                    }
                    let total: f64 = p_weights.iter().sum();
                    if (total - 1.0).abs() > 1e-9 {
                        return Err(AlgoError::InvalidConfig(format!(
                            "epoch weights sum to {total}, expected 1"
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

/// SAGA's per-worker gradient memory. The full table stores one gradient
/// vector per component; the scalar table stores the GLM coefficient only
/// and rebuilds `coeff · a_ij` on demand, which is bit-identical to the full
/// table for logistic components with `λ₂ = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SagaTable {
    Full(Vec<Vec<f64>>),
    Scalar(Vec<f64>),
}

impl SagaTable {
    pub fn len(&self) -> usize {
        match self {
            SagaTable::Full(t) => t.len(),
            SagaTable::Scalar(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grad_into(&self, problem: &FiniteSumProblem, i: usize, j: usize, out: &mut [f64]) {
        match self {
            SagaTable::Full(t) => out.copy_from_slice(&t[j]),
            SagaTable::Scalar(t) => problem.grad_from_logistic_coeff(i, j, t[j], out),
        }
    }

    /// `(1/m) Σ_j` of the stored gradients, pairwise-summed in table order.
    pub fn mean(&self, problem: &FiniteSumProblem, i: usize, dim: usize) -> Vec<f64> {
        match self {
            SagaTable::Full(t) => {
                let refs: Vec<&[f64]> = t.iter().map(|g| g.as_slice()).collect();
                pairwise_vec_mean(&refs, dim)
            }
            SagaTable::Scalar(t) => {
                let grads: Vec<Vec<f64>> = (0..t.len())
                    .map(|j| {
                        let mut g = vec![0.0; dim];
                        problem.grad_from_logistic_coeff(i, j, t[j], &mut g);
                        g
                    })
                    .collect();
                let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
                pairwise_vec_mean(&refs, dim)
            }
        }
    }

    /// Stores `∇f_ij(x)`; `fresh_grad` is the already-computed gradient at
    /// the refresh point.
    pub fn refresh(
        &mut self,
        problem: &FiniteSumProblem,
        i: usize,
        j: usize,
        x: &[f64],
        fresh_grad: &[f64],
    ) {
        match self {
            SagaTable::Full(t) => t[j].copy_from_slice(fresh_grad),
            SagaTable::Scalar(t) => t[j] = problem.logistic_coeff(i, j, x),
        }
    }
}

/// Variance-reduction memory held by one worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VrMemory {
    /// Plain DIANA has no memory.
    None,
    Saga(SagaTable),
    /// Anchor point `z` with its exact local gradient `∇f_i(z)` (L-SVRG and
    /// SVRG).
    Anchor { point: Vec<f64>, grad: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerState {
    /// Shift vector `h_i`.
    pub shift: Vec<f64>,
    pub memory: VrMemory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasterState {
    pub x: Vec<f64>,
    /// `h = (1/n) Σ h_i`, tracked with the per-method update rule.
    pub h_mean: Vec<f64>,
    /// The master's mirror of every worker shift; evolves from the same
    /// transmitted messages, so it stays bit-identical to the workers'.
    pub h_copies: Vec<Vec<f64>>,
    pub k: u64,
    /// Epoch counter (SVRG-DIANA only).
    pub epoch: u64,
    /// Running `Σ_r p_r x^{sl+r}` over the current epoch (SVRG-DIANA only).
    pub svrg_weighted_sum: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftInit {
    Zero,
    /// `h_i^0 = ∇f_i(x^0)`, the initialization some contraction statements
    /// assume.
    GradAtX0,
}

/// Builds the initial master and worker states at `x0` with `w_ij^0 = x^0`.
pub fn init_states(
    problem: &FiniteSumProblem,
    config: &MethodConfig,
    x0: Vec<f64>,
    shift_init: ShiftInit,
    scalar_table: bool,
) -> Result<(MasterState, Vec<WorkerState>), AlgoError> {
    let d = problem.dim;
    if x0.len() != d {
        return Err(AlgoError::InvalidState(format!(
            "x0 has dimension {}, problem has {d}",
            x0.len()
        )));
    }
    if scalar_table {
        let logistic = matches!(problem.components, Components::Logistic(_));
        if !logistic || problem.lambda2 != 0.0 {
            return Err(AlgoError::InvalidConfig(
                "the scalar SAGA table needs logistic components with lambda2 = 0".into(),
            ));
        }
        if !matches!(
            config.method,
            Method::VrDiana {
                variant: VrVariant::Saga
            }
        ) {
            return Err(AlgoError::InvalidConfig(
                "the scalar table only applies to VR-DIANA with the SAGA variant".into(),
            ));
        }
    }
    let workers: Vec<WorkerState> = (0..problem.n)
        .map(|i| {
            let shift = match shift_init {
                ShiftInit::Zero => vec![0.0; d],
                ShiftInit::GradAtX0 => problem.worker_grad(i, &x0),
            };
            let memory = match &config.method {
                Method::Diana { .. } => VrMemory::None,
                Method::VrDiana {
                    variant: VrVariant::Saga,
                } => {
                    let table = if scalar_table {
                        SagaTable::Scalar(
                            (0..problem.m)
                                .map(|j| problem.logistic_coeff(i, j, &x0))
                                .collect(),
                        )
                    } else {
                        SagaTable::Full(
                            (0..problem.m)
                                .map(|j| {
                                    let mut g = vec![0.0; d];
                                    problem.component_grad_into(i, j, &x0, &mut g);
                                    g
                                })
                                .collect(),
                        )
                    };
                    VrMemory::Saga(table)
                }
                Method::VrDiana {
                    variant: VrVariant::LSvrg,
                }
                | Method::SvrgDiana { .. } => VrMemory::Anchor {
                    point: x0.clone(),
                    grad: problem.worker_grad(i, &x0),
                },
            };
            WorkerState { shift, memory }
        })
        .collect();
    let h_copies: Vec<Vec<f64>> = workers.iter().map(|w| w.shift.clone()).collect();
    let refs: Vec<&[f64]> = h_copies.iter().map(|h| h.as_slice()).collect();
    let h_mean = pairwise_vec_mean(&refs, d);
    let svrg_weighted_sum = match config.method {
        Method::SvrgDiana { .. } => Some(vec![0.0; d]),
        _ => None,
    };
    Ok((
        MasterState {
            x: x0,
            h_mean,
            h_copies,
            k: 0,
            epoch: 0,
            svrg_weighted_sum,
        },
        workers,
    ))
}

/// What one round transmitted and computed.
#[derive(Debug, Clone)]
pub struct RoundLog {
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub per_worker_bits: Vec<u64>,
    /// The aggregated gradient estimate the master stepped with.
    pub estimate: Vec<f64>,
}

/// Everything a round needs besides the mutable states.
pub struct RoundCtx<'a> {
    pub problem: &'a FiniteSumProblem,
    pub quantizer: &'a Quantizer,
    pub config: &'a MethodConfig,
    pub streams: &'a StreamFactory,
    pub pool: Option<&'a rayon::ThreadPool>,
}

struct WorkerOut {
    msg: QuantizedMessage,
    /// The exact local estimate, kept when the quantizer is the identity so
    /// the master reconstruction is free of the `h + (g − h)` rounding
    /// detour (with `ω = 0` the two are equal in exact arithmetic).
    exact_g: Option<Vec<f64>>,
}

fn for_each_worker<T, F>(
    workers: &mut [WorkerState],
    pool: Option<&rayon::ThreadPool>,
    f: F,
) -> Result<Vec<T>, AlgoError>
where
    T: Send,
    F: Fn(usize, &mut WorkerState) -> Result<T, AlgoError> + Sync + Send,
{
    match pool {
        Some(pool) if pool.current_num_threads() > 1 => pool.install(|| {
            workers
                .par_iter_mut()
                .enumerate()
                .map(|(i, w)| f(i, w))
                .collect()
        }),
        _ => workers
            .iter_mut()
            .enumerate()
            .map(|(i, w)| f(i, w))
            .collect(),
    }
}

/// `g[t] = g_x[t] + (correction[t] − mem[t])`, the variance-reduced
/// estimator combination. Kept as one function so the quantized rounds and
/// the reference methods share the exact floating-point expression; this
/// bracketing makes the correction cancel exactly whenever the memory term
/// equals the correction bit for bit (m = 1, or a fully refreshed anchor).
pub fn combine_vr_estimate(g_x: &[f64], mem: &[f64], correction: &[f64]) -> Vec<f64> {
    g_x.iter()
        .zip(mem)
        .zip(correction)
        .map(|((&a, &b), &c)| a + (c - b))
        .collect()
}

fn check_dims(master: &MasterState, workers: &[WorkerState], problem: &FiniteSumProblem) -> Result<(), AlgoError> {
    if master.x.len() != problem.dim {
        return Err(AlgoError::InvalidState(
            "master iterate dimension mismatch".into(),
        ));
    }
    if workers.len() != problem.n || master.h_copies.len() != problem.n {
        return Err(AlgoError::InvalidState(format!(
            "{} workers and {} master copies for an n = {} problem",
            workers.len(),
            master.h_copies.len(),
            problem.n
        )));
    }
    if workers.iter().any(|w| w.shift.len() != problem.dim) {
        return Err(AlgoError::InvalidState(
            "worker shift dimension mismatch".into(),
        ));
    }
    Ok(())
}

/// Quantizes `g − h` on the worker, advances the worker shift, and returns
/// the transmission.
fn transmit(
    g: &[f64],
    worker: &mut WorkerState,
    ctx: &RoundCtx,
    worker_id: usize,
    k: u64,
) -> Result<WorkerOut, AlgoError> {
    let delta = sub(g, &worker.shift);
    let mut rq = ctx
        .streams
        .stream(worker_id as u64, StreamPurpose::Quantize, k);
    let msg = ctx.quantizer.encode(&delta, &mut rq)?;
    let decoded = decode(&msg)?;
    axpy(&mut worker.shift, ctx.config.alpha, &decoded);
    let exact_g = ctx.quantizer.is_identity().then(|| g.to_vec());
    Ok(WorkerOut { msg, exact_g })
}

/// Master-side reconstruction of each worker's estimate and mirror update;
/// returns the per-worker estimates and the decoded messages.
fn master_receive(
    master: &mut MasterState,
    outs: &[WorkerOut],
    alpha: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), AlgoError> {
    let mut estimates = Vec::with_capacity(outs.len());
    let mut decodes = Vec::with_capacity(outs.len());
    for (i, out) in outs.iter().enumerate() {
        let decoded = decode(&out.msg)?;
        let estimate = match &out.exact_g {
            Some(g) => g.clone(),
            None => {
                let mut e = master.h_copies[i].clone();
                axpy(&mut e, 1.0, &decoded);
                e
            }
        };
        axpy(&mut master.h_copies[i], alpha, &decoded);
        estimates.push(estimate);
        decodes.push(decoded);
    }
    Ok((estimates, decodes))
}

fn round_log(outs: &[WorkerOut], downlink_bits: u64, estimate: Vec<f64>) -> RoundLog {
    let per_worker_bits: Vec<u64> = outs.iter().map(|o| o.msg.bit_cost).collect();
    RoundLog {
        uplink_bits: per_worker_bits.iter().sum(),
        downlink_bits,
        per_worker_bits,
        estimate,
    }
}

/// One DIANA iteration: quantized gradient differences, shift learning and a
/// prox step on the master.
pub fn diana_round(
    master: &mut MasterState,
    workers: &mut [WorkerState],
    ctx: &RoundCtx,
) -> Result<RoundLog, AlgoError> {
    check_dims(master, workers, ctx.problem)?;
    let Method::Diana { oracle } = ctx.config.method else {
        return Err(AlgoError::InvalidConfig(
            "diana_round called with a non-DIANA method".into(),
        ));
    };
    let k = master.k;
    let problem = ctx.problem;
    let x = master.x.clone();
    let outs = for_each_worker(workers, ctx.pool, |i, w| {
        let g = match oracle {
            GradOracle::FullGrad => problem.worker_grad(i, &x),
            GradOracle::Uniform1 => {
                let mut rs = ctx.streams.stream(i as u64, StreamPurpose::GradSample, k);
                let j = rs.gen_range(0..problem.m);
                let mut g = vec![0.0; problem.dim];
                problem.component_grad_into(i, j, &x, &mut g);
                g
            }
        };
        transmit(&g, w, ctx, i, k)
    })?;

    let (estimates, _) = master_receive(master, &outs, ctx.config.alpha)?;
    let refs: Vec<&[f64]> = estimates.iter().map(|e| e.as_slice()).collect();
    let g_hat = pairwise_vec_mean(&refs, problem.dim);
    let gamma = ctx.config.gamma;
    let mut step = master.x.clone();
    axpy(&mut step, -gamma, &g_hat);
    master.x = prox(&problem.regularizer, gamma, &step);
    let copies: Vec<&[f64]> = master.h_copies.iter().map(|h| h.as_slice()).collect();
    master.h_mean = pairwise_vec_mean(&copies, problem.dim);
    master.k += 1;

    let downlink = problem.dim as u64 * u64::from(ctx.quantizer.ledger.float_bits);
    Ok(round_log(&outs, downlink, g_hat))
}

/// One VR-DIANA iteration (variant 1 = L-SVRG, variant 2 = SAGA).
pub fn vr_diana_round(
    master: &mut MasterState,
    workers: &mut [WorkerState],
    ctx: &RoundCtx,
) -> Result<RoundLog, AlgoError> {
    check_dims(master, workers, ctx.problem)?;
    let Method::VrDiana { variant } = ctx.config.method else {
        return Err(AlgoError::InvalidConfig(
            "vr_diana_round called with a non-VR method".into(),
        ));
    };
    let k = master.k;
    let problem = ctx.problem;
    let d = problem.dim;
    let x = master.x.clone();

    // Variant 1 draws one shared coin on the master and broadcasts it.
    let refresh_anchor = match variant {
        VrVariant::LSvrg => {
            let mut rc = ctx
                .streams
                .stream(MASTER_STREAM_ID, StreamPurpose::MasterCoin, k);
            rc.gen::<f64>() < 1.0 / problem.m as f64
        }
        VrVariant::Saga => false,
    };

    let outs = for_each_worker(workers, ctx.pool, |i, w| {
        let mut rs = ctx.streams.stream(i as u64, StreamPurpose::GradSample, k);
        let j = rs.gen_range(0..problem.m);
        let mut g_x = vec![0.0; d];
        problem.component_grad_into(i, j, &x, &mut g_x);
        let g = match (&mut w.memory, variant) {
            (VrMemory::Saga(table), VrVariant::Saga) => {
                let mut old = vec![0.0; d];
                table.grad_into(problem, i, j, &mut old);
                let mu = table.mean(problem, i, d);
                let g = combine_vr_estimate(&g_x, &old, &mu);
                table.refresh(problem, i, j, &x, &g_x);
                g
            }
            (VrMemory::Anchor { point, grad }, VrVariant::LSvrg) => {
                let mut old = vec![0.0; d];
                problem.component_grad_into(i, j, point, &mut old);
                let g = combine_vr_estimate(&g_x, &old, grad);
                if refresh_anchor {
                    *point = x.clone();
                    *grad = problem.worker_grad(i, &x);
                }
                g
            }
            _ => {
                return Err(AlgoError::InvalidState(
                    "worker memory does not match the VR variant".into(),
                ))
            }
        };
        transmit(&g, w, ctx, i, k)
    })?;

    let (estimates, decodes) = master_receive(master, &outs, ctx.config.alpha)?;
    let refs: Vec<&[f64]> = estimates.iter().map(|e| e.as_slice()).collect();
    let g_agg = pairwise_vec_mean(&refs, d);
    axpy(&mut master.x, -ctx.config.gamma, &g_agg);
    // h^{k+1} = h^k + (α/n) Σ Δ̂_i
    let dec_refs: Vec<&[f64]> = decodes.iter().map(|v| v.as_slice()).collect();
    let delta_sum = pairwise_vec_sum(&dec_refs, d);
    axpy(
        &mut master.h_mean,
        ctx.config.alpha / problem.n as f64,
        &delta_sum,
    );
    master.k += 1;

    let mut downlink = d as u64 * u64::from(ctx.quantizer.ledger.float_bits);
    if matches!(variant, VrVariant::LSvrg) {
        downlink += 1; // the broadcast coin
    }
    Ok(round_log(&outs, downlink, g_agg))
}

/// One SVRG-DIANA iteration. Epoch boundaries are the rounds with
/// `k ≡ 0 (mod l)`, `k > 0`; there the anchor moves to the weighted average
/// of the previous epoch's iterates and the local anchor gradients are
/// recomputed.
pub fn svrg_diana_round(
    master: &mut MasterState,
    workers: &mut [WorkerState],
    ctx: &RoundCtx,
) -> Result<RoundLog, AlgoError> {
    check_dims(master, workers, ctx.problem)?;
    let Method::SvrgDiana {
        epoch_len,
        ref p_weights,
    } = ctx.config.method
    else {
        return Err(AlgoError::InvalidConfig(
            "svrg_diana_round called with a non-SVRG method".into(),
        ));
    };
    if p_weights.len() != epoch_len {
        return Err(AlgoError::InvalidConfig(format!(
            "{} epoch weights for epoch length {epoch_len}",
            p_weights.len()
        )));
    }
    let k = master.k;
    let problem = ctx.problem;
    let d = problem.dim;

    let new_anchor: Option<Vec<f64>> = if k > 0 && k % epoch_len as u64 == 0 {
        let acc = master
            .svrg_weighted_sum
            .as_mut()
            .ok_or_else(|| AlgoError::InvalidState("missing epoch accumulator".into()))?;
        let z = std::mem::replace(acc, vec![0.0; d]);
        master.epoch += 1;
        Some(z)
    } else {
        None
    };
    {
        let acc = master
            .svrg_weighted_sum
            .as_mut()
            .ok_or_else(|| AlgoError::InvalidState("missing epoch accumulator".into()))?;
        let w = p_weights[(k % epoch_len as u64) as usize];
        axpy(acc, w, &master.x.clone());
    }

    let x = master.x.clone();
    let new_anchor = new_anchor.as_deref();
    let outs = for_each_worker(workers, ctx.pool, |i, w| {
        let VrMemory::Anchor { point, grad } = &mut w.memory else {
            return Err(AlgoError::InvalidState(
                "SVRG-DIANA workers need anchor memory".into(),
            ));
        };
        if let Some(z) = new_anchor {
            *point = z.to_vec();
            *grad = problem.worker_grad(i, z);
        }
        let mut rs = ctx.streams.stream(i as u64, StreamPurpose::GradSample, k);
        let j = rs.gen_range(0..problem.m);
        let mut g_x = vec![0.0; d];
        problem.component_grad_into(i, j, &x, &mut g_x);
        let mut old = vec![0.0; d];
        problem.component_grad_into(i, j, point, &mut old);
        let g = combine_vr_estimate(&g_x, &old, grad);
        transmit(&g, w, ctx, i, k)
    })?;

    let (estimates, decodes) = master_receive(master, &outs, ctx.config.alpha)?;
    let refs: Vec<&[f64]> = estimates.iter().map(|e| e.as_slice()).collect();
    let g_agg = pairwise_vec_mean(&refs, d);
    axpy(&mut master.x, -ctx.config.gamma, &g_agg);
    let dec_refs: Vec<&[f64]> = decodes.iter().map(|v| v.as_slice()).collect();
    let delta_sum = pairwise_vec_sum(&dec_refs, d);
    axpy(
        &mut master.h_mean,
        ctx.config.alpha / problem.n as f64,
        &delta_sum,
    );
    master.k += 1;

    let downlink = d as u64 * u64::from(ctx.quantizer.ledger.float_bits);
    Ok(round_log(&outs, downlink, g_agg))
}

/// Dispatches to the round of the configured method.
pub fn method_round(
    master: &mut MasterState,
    workers: &mut [WorkerState],
    ctx: &RoundCtx,
) -> Result<RoundLog, AlgoError> {
    match ctx.config.method {
        Method::Diana { .. } => diana_round(master, workers, ctx),
        Method::VrDiana { .. } => vr_diana_round(master, workers, ctx),
        Method::SvrgDiana { .. } => svrg_diana_round(master, workers, ctx),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    StronglyConvex,
    Convex,
    NonConvex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSelector {
    Diana { oracle: GradOracle },
    VrDiana { variant: VrVariant },
    SvrgDiana,
}

/// The step sizes the convergence statements prescribe: always
/// `α = 1/(ω+1)`, with `γ` (and the epoch schedule for SVRG-DIANA) chosen
/// per regime.
pub fn default_hyperparams(
    selector: MethodSelector,
    regime: Regime,
    constants: SmoothnessConstants,
    omega: f64,
    n: usize,
    m: usize,
) -> Result<MethodConfig, AlgoError> {
    let SmoothnessConstants { l, mu } = constants;
    if !(l > 0.0) {
        return Err(AlgoError::InvalidConfig(
            "smoothness constant must be positive".into(),
        ));
    }
    let alpha = 1.0 / (omega + 1.0);
    let nf = n as f64;
    let mf = m as f64;
    let need_mu = || -> Result<f64, AlgoError> {
        if mu > 0.0 {
            Ok(mu)
        } else {
            Err(AlgoError::Regime("the strongly convex step size"))
        }
    };
    match (selector, regime) {
        (MethodSelector::Diana { oracle }, Regime::StronglyConvex) => {
            let mu = need_mu()?;
            let gamma = (2.0 / ((mu + l) * (1.0 + 6.0 * omega / nf)))
                .min(1.0 / (2.0 * mu * (omega + 1.0)));
            Ok(MethodConfig {
                method: Method::Diana { oracle },
                alpha,
                gamma,
            })
        }
        (MethodSelector::Diana { .. }, _) => Err(AlgoError::InvalidConfig(
            "DIANA has a prescribed step size only in the strongly convex regime".into(),
        )),
        (MethodSelector::VrDiana { variant }, regime) => {
            let gamma = match regime {
                Regime::StronglyConvex => {
                    need_mu()?;
                    1.0 / (l * (1.0 + 36.0 * (omega + 1.0) / nf))
                }
                Regime::Convex => 1.0 / (2.0 * l * mf.sqrt() * (1.0 + 36.0 * (omega + 1.0) / nf)),
                Regime::NonConvex => nonconvex_gamma(l, omega, nf, mf),
            };
            Ok(MethodConfig {
                method: Method::VrDiana { variant },
                alpha,
                gamma,
            })
        }
        (MethodSelector::SvrgDiana, Regime::StronglyConvex) => {
            let mu = need_mu()?;
            let gamma = 1.0 / (10.0 * l * (2.0 + 4.0 / nf + 30.0 * omega / nf));
            // with b = 6ω/(n²α) the shift term equals α/2
            let theta = (mu * gamma).min(alpha / 2.0);
            let epoch_len = (2.0 / theta).ceil() as usize;
            let base = 1.0 - theta;
            let weights: Vec<f64> = (0..epoch_len)
                .map(|r| base.powi((epoch_len - 1 - r) as i32))
                .collect();
            let total: f64 = weights.iter().sum();
            let p_weights = weights.into_iter().map(|w| w / total).collect();
            Ok(MethodConfig {
                method: Method::SvrgDiana {
                    epoch_len,
                    p_weights,
                },
                alpha,
                gamma,
            })
        }
        (MethodSelector::SvrgDiana, Regime::Convex) => {
            let gamma = 1.0 / (l * mf.sqrt() * (2.0 + 4.0 / nf + 18.0 * omega / nf));
            Ok(MethodConfig {
                method: Method::SvrgDiana {
                    epoch_len: m,
                    p_weights: vec![1.0 / mf; m],
                },
                alpha,
                gamma,
            })
        }
        (MethodSelector::SvrgDiana, Regime::NonConvex) => {
            let mut p_weights = vec![0.0; m];
            p_weights[m - 1] = 1.0;
            Ok(MethodConfig {
                method: Method::SvrgDiana {
                    epoch_len: m,
                    p_weights,
                },
                alpha,
                gamma: nonconvex_gamma(l, omega, nf, mf),
            })
        }
    }
}

fn nonconvex_gamma(l: f64, omega: f64, n: f64, m: f64) -> f64 {
    1.0 / (10.0 * l * (1.0 + omega / n).sqrt() * (m.powf(2.0 / 3.0) + omega + 1.0))
}

pub mod reference {
    //! Plain unquantized methods driven by the same randomness streams.
    //!
    //! These are the textbook loops: workers compute their estimates, the
    //! master averages them in worker order and steps. They exist as the
    //! exact-arithmetic baselines the quantized methods collapse onto when
    //! the quantizer is the identity.

    use super::*;

    /// `x ← prox_{γR}(x − γ · (1/n) Σ g_i)` with per-worker stochastic
    /// gradients.
    pub fn prox_sgd_round(
        x: &mut Vec<f64>,
        problem: &FiniteSumProblem,
        gamma: f64,
        oracle: GradOracle,
        streams: &StreamFactory,
        k: u64,
    ) {
        let d = problem.dim;
        let grads: Vec<Vec<f64>> = (0..problem.n)
            .map(|i| match oracle {
                GradOracle::FullGrad => problem.worker_grad(i, x),
                GradOracle::Uniform1 => {
                    let mut rs = streams.stream(i as u64, StreamPurpose::GradSample, k);
                    let j = rs.gen_range(0..problem.m);
                    let mut g = vec![0.0; d];
                    problem.component_grad_into(i, j, x, &mut g);
                    g
                }
            })
            .collect();
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let mean = pairwise_vec_mean(&refs, d);
        let mut step = x.clone();
        axpy(&mut step, -gamma, &mean);
        *x = prox(&problem.regularizer, gamma, &step);
    }

    /// Distributed SAGA: every worker keeps a gradient table and refreshes
    /// the sampled entry.
    pub fn saga_round(
        x: &mut Vec<f64>,
        tables: &mut [SagaTable],
        problem: &FiniteSumProblem,
        gamma: f64,
        streams: &StreamFactory,
        k: u64,
    ) {
        let d = problem.dim;
        let grads: Vec<Vec<f64>> = tables
            .iter_mut()
            .enumerate()
            .map(|(i, table)| {
                let mut rs = streams.stream(i as u64, StreamPurpose::GradSample, k);
                let j = rs.gen_range(0..problem.m);
                let mut g_x = vec![0.0; d];
                problem.component_grad_into(i, j, x, &mut g_x);
                let mut old = vec![0.0; d];
                table.grad_into(problem, i, j, &mut old);
                let mu = table.mean(problem, i, d);
                let g = combine_vr_estimate(&g_x, &old, &mu);
                table.refresh(problem, i, j, x, &g_x);
                g
            })
            .collect();
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let mean = pairwise_vec_mean(&refs, d);
        axpy(x, -gamma, &mean);
    }

    /// Distributed L-SVRG: anchors refresh on a shared coin with
    /// probability `1/m`.
    pub fn lsvrg_round(
        x: &mut Vec<f64>,
        anchors: &mut [(Vec<f64>, Vec<f64>)],
        problem: &FiniteSumProblem,
        gamma: f64,
        streams: &StreamFactory,
        k: u64,
    ) {
        let d = problem.dim;
        let mut rc = streams.stream(MASTER_STREAM_ID, StreamPurpose::MasterCoin, k);
        let refresh = rc.gen::<f64>() < 1.0 / problem.m as f64;
        let grads: Vec<Vec<f64>> = anchors
            .iter_mut()
            .enumerate()
            .map(|(i, (point, grad))| {
                let mut rs = streams.stream(i as u64, StreamPurpose::GradSample, k);
                let j = rs.gen_range(0..problem.m);
                let mut g_x = vec![0.0; d];
                problem.component_grad_into(i, j, x, &mut g_x);
                let mut old = vec![0.0; d];
                problem.component_grad_into(i, j, point, &mut old);
                let g = combine_vr_estimate(&g_x, &old, grad);
                if refresh {
                    *point = x.clone();
                    *grad = problem.worker_grad(i, x);
                }
                g
            })
            .collect();
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let mean = pairwise_vec_mean(&refs, d);
        axpy(x, -gamma, &mean);
    }

    /// Distributed SVRG with weighted epoch anchors.
    #[allow(clippy::too_many_arguments)]
    pub fn svrg_round(
        x: &mut Vec<f64>,
        anchors: &mut [(Vec<f64>, Vec<f64>)],
        weighted_sum: &mut Vec<f64>,
        problem: &FiniteSumProblem,
        gamma: f64,
        epoch_len: usize,
        p_weights: &[f64],
        streams: &StreamFactory,
        k: u64,
    ) {
        let d = problem.dim;
        if k > 0 && k % epoch_len as u64 == 0 {
            let z = std::mem::replace(weighted_sum, vec![0.0; d]);
            for (i, (point, grad)) in anchors.iter_mut().enumerate() {
                *point = z.clone();
                *grad = problem.worker_grad(i, &z);
            }
        }
        let w = p_weights[(k % epoch_len as u64) as usize];
        axpy(weighted_sum, w, &x.clone());
        let grads: Vec<Vec<f64>> = anchors
            .iter_mut()
            .enumerate()
            .map(|(i, (point, grad))| {
                let mut rs = streams.stream(i as u64, StreamPurpose::GradSample, k);
                let j = rs.gen_range(0..problem.m);
                let mut g_x = vec![0.0; d];
                problem.component_grad_into(i, j, x, &mut g_x);
                let mut old = vec![0.0; d];
                problem.component_grad_into(i, j, point, &mut old);
                combine_vr_estimate(&g_x, &old, grad)
            })
            .collect();
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        let mean = pairwise_vec_mean(&refs, d);
        axpy(x, -gamma, &mean);
    }
}
