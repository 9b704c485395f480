//! The deterministic simulated parameter-server runtime.
//!
//! The engine owns three things:
//!
//! * **Stream derivation.** Every consumer of randomness gets its own stream
//!   derived as `stream(master_seed, worker_id, purpose, round)` through a
//!   fixed SplitMix64 avalanche; no stream is shared between logical roles,
//!   which is what makes runs bit-identical across repetitions and thread
//!   counts.
//! * **The reference solve.** Full-gradient proximal descent with step `1/L`
//!   down to a prox-gradient residual tolerance, providing `x*` and `f*` for
//!   every diagnostic.
//! * **Experiment execution.** Drives the configured method for `K` rounds,
//!   records metrics on a cadence, and accounts every transmitted message in
//!   the communication ledger.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algos::{
    self, GradOracle, Method, MethodConfig, MethodSelector, Regime, RoundCtx, RoundLog, ShiftInit,
    VrVariant,
};
use crate::dataio::{self, PartitionOptions, SynthKind, SynthSpec};
use crate::linalg::dist_sq;
use crate::metrics::{self, OptimumCache, VrCoeffSource, VrRegime};
use crate::problems::{prox, FiniteSumProblem, Regularizer};
use crate::quantize::{LedgerModel, Quantizer, QuantizerSpec};

/// Stream id reserved for master-side draws (the shared L-SVRG coin).
pub const MASTER_STREAM_ID: u64 = u64::MAX;

/// Logical roles a derived stream can serve. A stream is consumed by exactly
/// one role per (worker, round).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    GradSample = 1,
    Quantize = 2,
    MasterCoin = 3,
    Partition = 4,
    Synth = 5,
    SigmaEstimate = 6,
    Probe = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives independent ChaCha8 streams from `(master_seed, worker, purpose,
/// round)` by folding each field through SplitMix64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamFactory {
    master_seed: u64,
}

impl StreamFactory {
    pub fn new(master_seed: u64) -> Self {
        StreamFactory { master_seed }
    }

    pub fn seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream(&self, worker: u64, purpose: StreamPurpose, round: u64) -> ChaCha8Rng {
        let mut z = splitmix64(self.master_seed);
        z = splitmix64(z ^ worker);
        z = splitmix64(z ^ purpose as u64);
        z = splitmix64(z ^ round);
        ChaCha8Rng::seed_from_u64(z)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Algo(#[from] algos::AlgoError),
    #[error(transparent)]
    Data(#[from] dataio::DataError),
    #[error(transparent)]
    Problem(#[from] crate::problems::ProblemError),
    #[error(transparent)]
    Quantize(#[from] crate::quantize::QuantizeError),
    #[error("reference solve did not reach tolerance {tol} in {iters} iterations (best residual {best_residual})")]
    NoConvergence {
        tol: f64,
        iters: u64,
        best_residual: f64,
    },
    #[error("iterates diverged at round {k} (‖x‖ exceeded 1e300)")]
    Divergence { k: u64, partial: Box<Trace> },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

// --- configuration ------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegularizerConfig {
    None,
    L1 { lambda: f64 },
    L2 { lambda: f64 },
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig::None
    }
}

impl From<RegularizerConfig> for Regularizer {
    fn from(c: RegularizerConfig) -> Regularizer {
        match c {
            RegularizerConfig::None => Regularizer::None,
            RegularizerConfig::L1 { lambda } => Regularizer::L1(lambda),
            RegularizerConfig::L2 { lambda } => Regularizer::L2(lambda),
        }
    }
}

fn default_label_flip() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_quad_mu() -> f64 {
    0.1
}
fn default_quad_l() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Synthetic {
        loss: LossKind,
        d: usize,
        n: usize,
        m: usize,
        #[serde(default)]
        lambda2: Option<f64>,
        #[serde(default)]
        seed: u64,
        /// Fraction of planted labels flipped (logistic only).
        #[serde(default = "default_label_flip")]
        label_flip: f64,
        #[serde(default = "default_true")]
        normalize_rows: bool,
        /// Spectrum bounds (quadratic only).
        #[serde(default = "default_quad_mu")]
        mu: f64,
        #[serde(default = "default_quad_l")]
        l: f64,
        #[serde(default)]
        regularizer: RegularizerConfig,
    },
    Libsvm {
        path: String,
        n: usize,
        #[serde(default)]
        lambda2: Option<f64>,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_true")]
        normalize_rows: bool,
        #[serde(default)]
        regularizer: RegularizerConfig,
    },
}

impl ProblemConfig {
    pub fn build(&self) -> Result<FiniteSumProblem, EngineError> {
        match self {
            ProblemConfig::Synthetic {
                loss,
                d,
                n,
                m,
                lambda2,
                seed,
                label_flip,
                normalize_rows,
                mu,
                l,
                regularizer,
            } => {
                let kind = match loss {
                    LossKind::Logistic => SynthKind::Logistic {
                        label_flip: *label_flip,
                        normalize_rows: *normalize_rows,
                    },
                    LossKind::Quadratic => SynthKind::Quadratic { mu: *mu, l: *l },
                };
                Ok(dataio::synth_problem(&SynthSpec {
                    kind,
                    d: *d,
                    n: *n,
                    m: *m,
                    lambda2: *lambda2,
                    seed: *seed,
                    regularizer: (*regularizer).into(),
                })?)
            }
            ProblemConfig::Libsvm {
                path,
                n,
                lambda2,
                seed,
                normalize_rows,
                regularizer,
            } => {
                let dataset = dataio::parse_libsvm_path(std::path::Path::new(path))?;
                Ok(dataio::partition(
                    &dataset,
                    *n,
                    *seed,
                    &PartitionOptions {
                        lambda2: *lambda2,
                        normalize_rows: *normalize_rows,
                        regularizer: (*regularizer).into(),
                    },
                )?)
            }
        }
    }
}

/// A number, or `"auto"` / `"auto:<regime>"` for the prescribed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AutoOrValue {
    Value(f64),
    Auto(String),
}

impl AutoOrValue {
    fn regime(&self, key: &str) -> Result<Option<Regime>, EngineError> {
        match self {
            AutoOrValue::Value(_) => Ok(None),
            AutoOrValue::Auto(s) => {
                let regime = match s.as_str() {
                    "auto" | "auto:strongly_convex" => Regime::StronglyConvex,
                    "auto:convex" => Regime::Convex,
                    "auto:nonconvex" => Regime::NonConvex,
                    other => {
                        return Err(EngineError::Config(format!(
                            "{key}: expected a number, \"auto\", \"auto:strongly_convex\", \
                             \"auto:convex\" or \"auto:nonconvex\", got \"{other}\""
                        )))
                    }
                };
                Ok(Some(regime))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Diana,
    VrDiana,
    SvrgDiana,
}

fn default_auto() -> AutoOrValue {
    AutoOrValue::Auto("auto".into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub name: MethodName,
    #[serde(default)]
    pub variant: Option<VrVariant>,
    #[serde(default)]
    pub oracle: Option<GradOracle>,
    #[serde(default = "default_auto")]
    pub alpha: AutoOrValue,
    #[serde(default = "default_auto")]
    pub gamma: AutoOrValue,
    #[serde(default)]
    pub epoch_len: Option<usize>,
    #[serde(default)]
    pub p_weights: Option<Vec<f64>>,
    /// SAGA only: store GLM scalars instead of gradient vectors
    /// (bit-identical trajectories; needs logistic components, λ₂ = 0).
    #[serde(default)]
    pub scalar_table: bool,
}

/// `p` in configs: a number or `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NormExponent {
    Value(f64),
    Name(String),
}

impl NormExponent {
    fn resolve(&self) -> Result<f64, EngineError> {
        match self {
            NormExponent::Value(v) => Ok(*v),
            NormExponent::Name(s) => match s.as_str() {
                "inf" | "Inf" | "infinity" => Ok(f64::INFINITY),
                other => Err(EngineError::Config(format!(
                    "quantizer.p: expected a number or \"inf\", got \"{other}\""
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Identity,
    Dither,
    Sparsify,
    BlockDither,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    pub scheme: SchemeName,
    #[serde(default)]
    pub p: Option<NormExponent>,
    #[serde(default)]
    pub s: Option<u32>,
    #[serde(default)]
    pub r: Option<usize>,
    /// Equal block size; the trailing block absorbs the remainder.
    #[serde(default)]
    pub block_size: Option<usize>,
    #[serde(default)]
    pub block_sizes: Option<Vec<usize>>,
}

impl QuantizerConfig {
    pub fn to_spec(&self, dim: usize) -> Result<QuantizerSpec, EngineError> {
        let spec = match self.scheme {
            SchemeName::Identity => QuantizerSpec::Identity,
            SchemeName::Dither => QuantizerSpec::Dither {
                p: self
                    .p
                    .as_ref()
                    .map(|p| p.resolve())
                    .transpose()?
                    .unwrap_or(2.0),
                s: self.s.unwrap_or(1),
            },
            SchemeName::Sparsify => QuantizerSpec::Sparsify {
                r: self.r.ok_or_else(|| {
                    EngineError::Config("quantizer.r is required for sparsify".into())
                })?,
            },
            SchemeName::BlockDither => {
                let sizes = if let Some(sizes) = &self.block_sizes {
                    sizes.clone()
                } else if let Some(b) = self.block_size {
                    if b == 0 {
                        return Err(EngineError::Config(
                            "quantizer.block_size must be positive".into(),
                        ));
                    }
                    let mut sizes = vec![b; dim / b];
                    let rem = dim % b;
                    if rem > 0 {
                        sizes.push(rem);
                    }
                    if sizes.is_empty() {
                        sizes.push(dim);
                    }
                    sizes
                } else {
                    return Err(EngineError::Config(
                        "block_dither needs quantizer.block_size or quantizer.block_sizes".into(),
                    ));
                };
                QuantizerSpec::BlockDither { block_sizes: sizes }
            }
        };
        spec.validate(dim)?;
        Ok(spec)
    }
}

fn default_cadence() -> u64 {
    1
}
fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub iters: u64,
    pub seed: u64,
    #[serde(default = "default_cadence")]
    pub cadence: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub shift_init: ShiftInitConfig,
    #[serde(default = "default_true")]
    pub record_lyapunov: bool,
    #[serde(default)]
    pub vr_coeffs: VrCoeffSource,
    #[serde(default)]
    pub lyapunov_regime: LyapunovRegimeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftInitConfig {
    Zero,
    GradAtX0,
}

impl Default for ShiftInitConfig {
    fn default() -> Self {
        ShiftInitConfig::Zero
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovRegimeConfig {
    StronglyConvex,
    Convex,
}

impl Default for LyapunovRegimeConfig {
    fn default() -> Self {
        LyapunovRegimeConfig::StronglyConvex
    }
}

fn default_ref_tol() -> f64 {
    1e-12
}
fn default_ref_iters() -> u64 {
    2_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    #[serde(default = "default_ref_tol")]
    pub tol: f64,
    #[serde(default = "default_ref_iters")]
    pub max_iters: u64,
}

impl Default for ReferenceSection {
    fn default() -> Self {
        ReferenceSection {
            tol: default_ref_tol(),
            max_iters: default_ref_iters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub path: Option<String>,
    /// Record real wall-clock per record. Off by default: the column is a
    /// deterministic 0 so traces stay byte-reproducible.
    #[serde(default)]
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerConfig {
    #[serde(default = "default_float_bits")]
    pub float_bits: u32,
    #[serde(default)]
    pub index_bits: Option<u32>,
}

fn default_float_bits() -> u32 {
    64
}

impl Default for LedgerConfig {
    fn default() -> Self {
        LedgerConfig {
            float_bits: 64,
            index_bits: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub method: MethodSection,
    pub quantizer: QuantizerConfig,
    pub run: RunSection,
    #[serde(default)]
    pub ledger: LedgerConfig,
    #[serde(default)]
    pub reference: ReferenceSection,
    #[serde(default)]
    pub output: OutputSection,
}

// --- reference solution --------------------------------------------------

/// Full-gradient proximal descent with step `1/L` until the prox-gradient
/// residual `‖x − prox_{γR}(x − γ∇f(x))‖/γ` drops below `tol`.
pub fn solve_reference(
    problem: &FiniteSumProblem,
    tol: f64,
    max_iters: u64,
) -> Result<(Vec<f64>, f64), EngineError> {
    let constants = problem.constants();
    let gamma = 1.0 / constants.l;
    let mut x = vec![0.0; problem.dim];
    let mut best_residual = f64::INFINITY;
    for _ in 0..max_iters {
        let g = problem.full_grad(&x);
        let mut step = x.clone();
        crate::linalg::axpy(&mut step, -gamma, &g);
        let next = prox(&problem.regularizer, gamma, &step);
        let residual = dist_sq(&x, &next).sqrt() / gamma;
        best_residual = best_residual.min(residual);
        x = next;
        if residual <= tol {
            let f_star = problem.objective_with_reg(&x);
            return Ok((x, f_star));
        }
    }
    Err(EngineError::NoConvergence {
        tol,
        iters: max_iters,
        best_residual,
    })
}

// --- traces ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: u64,
    pub f_gap: f64,
    pub dist_sq: f64,
    pub lyapunov: f64,
    pub h: f64,
    pub d: f64,
    pub grad_norm_sq: f64,
    pub bits_up_cum: u64,
    pub bits_down_cum: u64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseWall {
    pub reference_ms: f64,
    pub run_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub final_x: Vec<f64>,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub config: RunConfig,
    pub x_star: Vec<f64>,
    pub f_star: f64,
    pub omega: f64,
    pub smoothness_l: f64,
    pub strong_convexity_mu: f64,
    /// The fully resolved hyperparameters the run used.
    pub resolved_method: MethodConfig,
    /// Empirical `σ²` of the DIANA stochastic oracle at `x⁰` (DIANA only).
    pub sigma_sq_estimate: Option<f64>,
    pub phase_wall: PhaseWall,
}

/// Resolves `"auto"` hyperparameters against the problem constants.
pub fn resolve_method(
    section: &MethodSection,
    problem: &FiniteSumProblem,
    omega: f64,
) -> Result<MethodConfig, EngineError> {
    let constants = problem.constants();
    let selector = match section.name {
        MethodName::Diana => MethodSelector::Diana {
            oracle: section.oracle.unwrap_or(GradOracle::Uniform1),
        },
        MethodName::VrDiana => MethodSelector::VrDiana {
            variant: section.variant.ok_or_else(|| {
                EngineError::Config("method.variant is required for vr_diana".into())
            })?,
        },
        MethodName::SvrgDiana => MethodSelector::SvrgDiana,
    };
    let gamma_regime = section.gamma.regime("method.gamma")?;
    let alpha_regime = section.alpha.regime("method.alpha")?;

    // Anything "auto" comes from the prescribed defaults of the regime.
    let defaults = match gamma_regime.or(if alpha_regime.is_some() {
        Some(Regime::StronglyConvex)
    } else {
        None
    }) {
        Some(regime) => Some(algos::default_hyperparams(
            selector, regime, constants, omega, problem.n, problem.m,
        )?),
        None => None,
    };

    let alpha = match (&section.alpha, &defaults) {
        (AutoOrValue::Value(v), _) => *v,
        (AutoOrValue::Auto(_), _) => 1.0 / (omega + 1.0),
    };
    let gamma = match (&section.gamma, &defaults) {
        (AutoOrValue::Value(v), _) => *v,
        (AutoOrValue::Auto(_), Some(d)) => d.gamma,
        (AutoOrValue::Auto(_), None) => unreachable!("auto gamma implies defaults"),
    };
    let method = match section.name {
        MethodName::Diana => Method::Diana {
            oracle: section.oracle.unwrap_or(GradOracle::Uniform1),
        },
        MethodName::VrDiana => Method::VrDiana {
            variant: section.variant.expect("checked above"),
        },
        MethodName::SvrgDiana => {
            let from_defaults = defaults.as_ref().and_then(|d| match &d.method {
                Method::SvrgDiana {
                    epoch_len,
                    p_weights,
                } => Some((*epoch_len, p_weights.clone())),
                _ => None,
            });
            let epoch_len = match (section.epoch_len, &from_defaults) {
                (Some(l), _) => l,
                (None, Some((l, _))) => *l,
                (None, None) => {
                    return Err(EngineError::Config(
                        "method.epoch_len is required for svrg_diana with an explicit gamma"
                            .into(),
                    ))
                }
            };
            let p_weights = match (&section.p_weights, from_defaults) {
                (Some(w), _) => w.clone(),
                (None, Some((l, w))) if l == epoch_len => w,
                (None, _) => vec![1.0 / epoch_len as f64; epoch_len],
            };
            Method::SvrgDiana {
                epoch_len,
                p_weights,
            }
        }
    };
    Ok(MethodConfig {
        method,
        alpha,
        gamma,
    })
}

struct SvrgTracker {
    psi: f64,
    epoch_len: u64,
}

/// Runs one experiment, invoking `hook` with every round's log.
pub fn run_experiment_with_hook(
    config: &RunConfig,
    mut hook: impl FnMut(&RoundLog),
) -> Result<Trace, EngineError> {
    let total_start = Instant::now();
    if config.run.iters < 1 {
        return Err(EngineError::Config("run.iters must be >= 1".into()));
    }
    if config.run.cadence < 1 {
        return Err(EngineError::Config("run.cadence must be >= 1".into()));
    }
    let ledger = LedgerModel {
        float_bits: config.ledger.float_bits,
        index_bits: config.ledger.index_bits,
    };
    ledger.validate()?;

    let problem = config.problem.build()?;
    let d = problem.dim;
    let spec = config.quantizer.to_spec(d)?;
    let omega = spec.omega(d)?;
    let quantizer = Quantizer::new(spec, ledger);
    let method_config = resolve_method(&config.method, &problem, omega)?;
    method_config.validate(omega, &problem.regularizer)?;
    let constants = problem.constants();

    let ref_start = Instant::now();
    let (x_star, f_star) =
        solve_reference(&problem, config.reference.tol, config.reference.max_iters)?;
    let reference_ms = ref_start.elapsed().as_secs_f64() * 1e3;
    let cache = OptimumCache::new(&problem, x_star, f_star);

    let x0 = match &config.run.x0 {
        Some(x0) => {
            if x0.len() != d {
                return Err(EngineError::Config(format!(
                    "run.x0 has dimension {}, problem has {d}",
                    x0.len()
                )));
            }
            x0.clone()
        }
        None => vec![0.0; d],
    };
    let shift_init = match config.run.shift_init {
        ShiftInitConfig::Zero => ShiftInit::Zero,
        ShiftInitConfig::GradAtX0 => ShiftInit::GradAtX0,
    };
    let (mut master, mut workers) = algos::init_states(
        &problem,
        &method_config,
        x0,
        shift_init,
        config.method.scalar_table,
    )?;

    let streams = StreamFactory::new(config.run.seed);
    let sigma_sq_estimate = match method_config.method {
        Method::Diana { .. } => Some(metrics::estimate_sigma_sq(
            &problem,
            &master.x,
            10_000 / problem.n.max(1),
            &streams,
        )),
        _ => None,
    };

    let pool = if config.run.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.run.threads)
                .build()
                .map_err(|e| EngineError::ThreadPool(e.to_string()))?,
        )
    } else {
        None
    };
    let ctx = RoundCtx {
        problem: &problem,
        quantizer: &quantizer,
        config: &method_config,
        streams: &streams,
        pool: pool.as_ref(),
    };

    let lyap_regime = match config.run.lyapunov_regime {
        LyapunovRegimeConfig::StronglyConvex => VrRegime::StronglyConvex,
        LyapunovRegimeConfig::Convex => VrRegime::Convex,
    };
    let params = metrics::lyapunov_params(
        constants,
        method_config.gamma,
        method_config.alpha,
        omega,
        problem.n,
        problem.m,
        config.run.vr_coeffs,
        lyap_regime,
    );

    let mut svrg_tracker = match &method_config.method {
        Method::SvrgDiana { epoch_len, .. } => Some(SvrgTracker {
            psi: f64::NAN,
            epoch_len: *epoch_len as u64,
        }),
        _ => None,
    };

    let run_start = Instant::now();
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut bits_up: u64 = 0;
    let mut bits_down: u64 = 0;
    let k_max = config.run.iters;

    let record_state = |master: &algos::MasterState,
                        workers: &[algos::WorkerState],
                        svrg_tracker: &mut Option<SvrgTracker>,
                        bits_up: u64,
                        bits_down: u64,
                        records: &mut Vec<TraceRecord>| {
        let k = master.k;
        let f_gap = problem.objective_with_reg(&master.x) - cache.f_star;
        let dsq = dist_sq(&master.x, &cache.x_star);
        let h = metrics::shift_error(workers, &cache);
        let (lyapunov, d_metric) = match &method_config.method {
            Method::Diana { .. } => {
                let psi = dsq + params.c_diana * params.gamma * params.gamma
                    / problem.n as f64
                    * h;
                (psi, f64::NAN)
            }
            Method::VrDiana { .. } => {
                let v = metrics::lyapunov_vr(master, workers, &problem, &cache, &params)
                    .expect("VR state has memory");
                (v.psi, v.d)
            }
            Method::SvrgDiana { .. } => {
                let tracker = svrg_tracker.as_mut().expect("tracker exists");
                if k % tracker.epoch_len == 0 {
                    // At a boundary H is exactly the epoch value H^{ls} and
                    // the new anchor z^s is the completed weighted sum (x⁰
                    // itself at k = 0).
                    let z: Vec<f64> = if k == 0 {
                        master.x.clone()
                    } else {
                        master
                            .svrg_weighted_sum
                            .clone()
                            .expect("svrg accumulator exists")
                    };
                    let f_gap_z = problem.objective_with_reg(&z) - cache.f_star;
                    tracker.psi = metrics::lyapunov_svrg(f_gap_z, h, &params);
                }
                (tracker.psi, f64::NAN)
            }
        };
        let grad_norm_sq = metrics::grad_norm_sq(&problem, &master.x);
        let wall_ms = if config.output.timing {
            run_start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        records.push(TraceRecord {
            k,
            f_gap,
            dist_sq: dsq,
            lyapunov,
            h,
            d: d_metric,
            grad_norm_sq,
            bits_up_cum: bits_up,
            bits_down_cum: bits_down,
            wall_ms,
        });
    };

    for k in 0..k_max {
        if k % config.run.cadence == 0 {
            record_state(
                &master,
                &workers,
                &mut svrg_tracker,
                bits_up,
                bits_down,
                &mut records,
            );
        }
        let log = algos::method_round(&mut master, &mut workers, &ctx)?;
        bits_up += log.uplink_bits;
        bits_down += log.downlink_bits;
        hook(&log);
        let max_abs = master.x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if !max_abs.is_finite() || max_abs > 1e300 {
            record_state(
                &master,
                &workers,
                &mut svrg_tracker,
                bits_up,
                bits_down,
                &mut records,
            );
            let partial = Trace {
                records,
                final_x: master.x.clone(),
                uplink_bits: bits_up,
                downlink_bits: bits_down,
                config: config.clone(),
                x_star: cache.x_star.clone(),
                f_star: cache.f_star,
                omega,
                smoothness_l: constants.l,
                strong_convexity_mu: constants.mu,
                resolved_method: method_config.clone(),
                sigma_sq_estimate,
                phase_wall: PhaseWall {
                    reference_ms,
                    run_ms: run_start.elapsed().as_secs_f64() * 1e3,
                    total_ms: total_start.elapsed().as_secs_f64() * 1e3,
                },
            };
            return Err(EngineError::Divergence {
                k: k + 1,
                partial: Box::new(partial),
            });
        }
    }
    record_state(
        &master,
        &workers,
        &mut svrg_tracker,
        bits_up,
        bits_down,
        &mut records,
    );

    let run_ms = run_start.elapsed().as_secs_f64() * 1e3;
    Ok(Trace {
        records,
        final_x: master.x,
        uplink_bits: bits_up,
        downlink_bits: bits_down,
        config: config.clone(),
        x_star: cache.x_star,
        f_star: cache.f_star,
        omega,
        smoothness_l: constants.l,
        strong_convexity_mu: constants.mu,
        resolved_method: method_config,
        sigma_sq_estimate,
        phase_wall: PhaseWall {
            reference_ms,
            run_ms,
            total_ms: total_start.elapsed().as_secs_f64() * 1e3,
        },
    })
}

pub fn run_experiment(config: &RunConfig) -> Result<Trace, EngineError> {
    run_experiment_with_hook(config, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_deterministic_and_role_separated() {
        let f = StreamFactory::new(42);
        let a: Vec<u64> = {
            let mut r = f.stream(0, StreamPurpose::GradSample, 3);
            (0..8).map(|_| r.gen()).collect()
        };
        let b: Vec<u64> = {
            let mut r = f.stream(0, StreamPurpose::GradSample, 3);
            (0..8).map(|_| r.gen()).collect()
        };
        assert_eq!(a, b);
        let c: Vec<u64> = {
            let mut r = f.stream(0, StreamPurpose::Quantize, 3);
            (0..8).map(|_| r.gen()).collect()
        };
        assert_ne!(a, c);
        let d: Vec<u64> = {
            let mut r = f.stream(1, StreamPurpose::GradSample, 3);
            (0..8).map(|_| r.gen()).collect()
        };
        assert_ne!(a, d);
        let e: Vec<u64> = {
            let mut r = f.stream(0, StreamPurpose::GradSample, 4);
            (0..8).map(|_| r.gen()).collect()
        };
        assert_ne!(a, e);
        let g: Vec<u64> = {
            let mut r = StreamFactory::new(43).stream(0, StreamPurpose::GradSample, 3);
            (0..8).map(|_| r.gen()).collect()
        };
        assert_ne!(a, g);
    }

    fn quadratic_config(iters: u64, cadence: u64) -> RunConfig {
        RunConfig {
            problem: ProblemConfig::Synthetic {
                loss: LossKind::Quadratic,
                d: 4,
                n: 2,
                m: 2,
                lambda2: None,
                seed: 1,
                label_flip: 0.1,
                normalize_rows: true,
                mu: 0.5,
                l: 1.5,
                regularizer: RegularizerConfig::None,
            },
            method: MethodSection {
                name: MethodName::Diana,
                variant: None,
                oracle: Some(GradOracle::FullGrad),
                alpha: AutoOrValue::Auto("auto".into()),
                gamma: AutoOrValue::Auto("auto".into()),
                epoch_len: None,
                p_weights: None,
                scalar_table: false,
            },
            quantizer: QuantizerConfig {
                scheme: SchemeName::Dither,
                p: Some(NormExponent::Value(2.0)),
                s: Some(1),
                r: None,
                block_size: None,
                block_sizes: None,
            },
            run: RunSection {
                iters,
                seed: 7,
                cadence,
                threads: 1,
                x0: None,
                shift_init: ShiftInitConfig::Zero,
                record_lyapunov: true,
                vr_coeffs: VrCoeffSource::Proof,
                lyapunov_regime: LyapunovRegimeConfig::StronglyConvex,
            },
            ledger: LedgerConfig::default(),
            reference: ReferenceSection::default(),
            output: OutputSection::default(),
        }
    }

    #[test]
    fn reference_solver_finds_quadratic_center() {
        let problem = crate::dataio::synth_problem(&crate::dataio::SynthSpec {
            kind: crate::dataio::SynthKind::Quadratic { mu: 1.0, l: 1.0 },
            d: 3,
            n: 1,
            m: 1,
            lambda2: None,
            seed: 9,
            regularizer: Regularizer::None,
        })
        .unwrap();
        let (x_star, f_star) = solve_reference(&problem, 1e-12, 100_000).unwrap();
        // ½‖x − c‖² has its minimum at the center with value 0
        let crate::problems::Components::Quadratic(comps) = &problem.components else {
            panic!()
        };
        for k in 0..3 {
            assert!((x_star[k] - comps[0].center[k]).abs() < 1e-10);
        }
        assert!(f_star.abs() < 1e-20);
        // the residual contract
        let g = problem.full_grad(&x_star);
        let gamma = 1.0 / problem.constants().l;
        let mut step = x_star.clone();
        crate::linalg::axpy(&mut step, -gamma, &g);
        let next = prox(&problem.regularizer, gamma, &step);
        assert!(dist_sq(&x_star, &next).sqrt() / gamma <= 1e-12);
    }

    #[test]
    fn reference_solver_reports_budget_exhaustion() {
        let problem = crate::dataio::synth_problem(&crate::dataio::SynthSpec {
            kind: crate::dataio::SynthKind::logistic(),
            d: 6,
            n: 2,
            m: 4,
            lambda2: Some(0.01),
            seed: 2,
            regularizer: Regularizer::None,
        })
        .unwrap();
        match solve_reference(&problem, 1e-13, 3) {
            Err(EngineError::NoConvergence { best_residual, .. }) => {
                assert!(best_residual.is_finite())
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn trace_has_one_record_per_cadence_tick() {
        let trace = run_experiment(&quadratic_config(10, 1)).unwrap();
        assert_eq!(trace.records.len(), 11);
        assert_eq!(trace.records[0].k, 0);
        assert_eq!(trace.records[10].k, 10);
        // cadence 4 records k = 0, 4, 8 and the final state
        let trace = run_experiment(&quadratic_config(10, 4)).unwrap();
        let ks: Vec<u64> = trace.records.iter().map(|r| r.k).collect();
        assert_eq!(ks, vec![0, 4, 8, 10]);
    }

    #[test]
    fn cumulative_bits_are_monotone_and_additive() {
        let mut per_round = Vec::new();
        let trace = run_experiment_with_hook(&quadratic_config(20, 1), |log| {
            per_round.push(log.uplink_bits);
        })
        .unwrap();
        assert_eq!(trace.uplink_bits, per_round.iter().sum::<u64>());
        for w in trace.records.windows(2) {
            assert!(w[1].bits_up_cum > w[0].bits_up_cum);
            assert!(w[1].bits_down_cum > w[0].bits_down_cum);
        }
        // downlink: one uncompressed broadcast of x per round
        assert_eq!(trace.downlink_bits, 20 * 4 * 64);
    }

    #[test]
    fn f_star_lower_bounds_observed_objectives() {
        let trace = run_experiment(&quadratic_config(50, 5)).unwrap();
        for r in &trace.records {
            assert!(r.f_gap >= -1e-10, "f_gap {} at k {}", r.f_gap, r.k);
        }
    }

    #[test]
    fn divergence_guard_fires_on_bad_gamma() {
        let mut config = quadratic_config(10_000, 100);
        config.method.gamma = AutoOrValue::Value(1e4);
        match run_experiment(&config) {
            Err(EngineError::Divergence { k, partial }) => {
                assert!(k >= 1);
                assert!(!partial.records.is_empty());
            }
            other => panic!("expected divergence, got {:?}", other.map(|t| t.records.len())),
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let text = r#"{
            "problem": {"kind": "synthetic", "loss": "quadratic", "d": 2, "n": 1, "m": 1},
            "method": {"name": "diana", "gamm": 0.1},
            "quantizer": {"scheme": "identity"},
            "run": {"iters": 1, "seed": 0}
        }"#;
        let err = serde_json::from_str::<RunConfig>(text).unwrap_err();
        assert!(err.to_string().contains("gamm"), "{err}");
    }

    #[test]
    fn auto_hyperparameters_resolve() {
        let trace = run_experiment(&quadratic_config(5, 1)).unwrap();
        let omega = 2.0 + 2.0; // dither p=2, s=1 at d=4
        assert!((trace.omega - omega).abs() < 1e-12);
        assert!((trace.resolved_method.alpha - 1.0 / (omega + 1.0)).abs() < 1e-12);
        let expected_gamma = (2.0 / ((0.5 + 1.5) * (1.0 + 6.0 * omega / 2.0)))
            .min(1.0 / (2.0 * 0.5 * (omega + 1.0)));
        assert!((trace.resolved_method.gamma - expected_gamma).abs() < 1e-12);
    }
}
