//! Statistical property suites: quantizer laws and one-step Lyapunov
//! contractions.
//!
//! Each check returns a [`PropertyReport`]; the CLI `verify` subcommand
//! prints one PASS/FAIL line per report and the acceptance tests assert on
//! them directly. All checks are deterministic given their seed.
//!
//! The enumeration helpers here are written from the operator definitions
//! (per-coordinate rounding laws, explicit subset enumeration) and do not go
//! through the encode path they are used to validate.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::algos::{
    self, GradOracle, Method, MethodConfig, MethodSelector, Regime, RoundCtx, ShiftInit,
    VrVariant,
};
use crate::dataio::{synth_problem, SynthKind, SynthSpec};
use crate::engine::{StreamFactory, StreamPurpose};
use crate::linalg::{lp_norm, norm_sq};
use crate::metrics::{self, OptimumCache, VrCoeffSource, VrRegime};
use crate::problems::{FiniteSumProblem, Regularizer};
use crate::quantize::{decode, LedgerModel, Payload, Quantizer, QuantizerSpec};

#[derive(Debug, Clone)]
pub struct PropertyReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl PropertyReport {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        PropertyReport {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

// --- exact enumeration oracles -------------------------------------------

/// All outcomes of random dithering on `x` with their exact probabilities,
/// built from the per-coordinate rounding law: coordinate `i` rounds to
/// `⌊y_i⌋` or `⌊y_i⌋+1` with `y_i = s|x_i|/‖x‖_p`, taking the upper level
/// with probability `y_i − ⌊y_i⌋`.
pub fn enumerate_dither(x: &[f64], p: f64, s: u32) -> Vec<(Vec<f64>, f64)> {
    let norm = lp_norm(x, p);
    if norm == 0.0 {
        return vec![(vec![0.0; x.len()], 1.0)];
    }
    let sf = f64::from(s);
    // per coordinate: list of (decoded value, probability)
    let laws: Vec<Vec<(f64, f64)>> = x
        .iter()
        .map(|&v| {
            let y = sf * v.abs() / norm;
            let lo = y.floor();
            let p_hi = y - lo;
            let sign = if v < 0.0 { -1.0 } else { 1.0 };
            let value = |level: f64| sign * norm * level / sf;
            if p_hi == 0.0 {
                vec![(value(lo), 1.0)]
            } else {
                vec![(value(lo), 1.0 - p_hi), (value(lo + 1.0), p_hi)]
            }
        })
        .collect();
    let mut outcomes: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 1.0)];
    for law in &laws {
        let mut next = Vec::with_capacity(outcomes.len() * law.len());
        for (prefix, prob) in &outcomes {
            for (value, p_v) in law {
                let mut v = prefix.clone();
                v.push(*value);
                next.push((v, prob * p_v));
            }
        }
        outcomes = next;
    }
    outcomes
}

/// All `(d choose r)` sparsification outcomes with equal probability.
pub fn enumerate_sparsify(x: &[f64], r: usize) -> Vec<(Vec<f64>, f64)> {
    let d = x.len();
    let mut masks: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    fn rec(start: usize, left: usize, d: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(current.clone());
            return;
        }
        for i in start..=d - left {
            current.push(i);
            rec(i + 1, left - 1, d, current, out);
            current.pop();
        }
    }
    rec(0, r, d, &mut current, &mut masks);
    let prob = 1.0 / masks.len() as f64;
    let scale = d as f64 / r as f64;
    masks
        .into_iter()
        .map(|mask| {
            let mut v = vec![0.0; d];
            for i in mask {
                v[i] = scale * x[i];
            }
            (v, prob)
        })
        .collect()
}

// --- accumulators ----------------------------------------------------------

struct MomentAccumulator {
    count: f64,
    coord_sum: Vec<f64>,
    coord_sum_sq: Vec<f64>,
    norm_sum: f64,
    norm_sum_sq: f64,
}

impl MomentAccumulator {
    fn new(dim: usize) -> Self {
        MomentAccumulator {
            count: 0.0,
            coord_sum: vec![0.0; dim],
            coord_sum_sq: vec![0.0; dim],
            norm_sum: 0.0,
            norm_sum_sq: 0.0,
        }
    }

    fn push(&mut self, v: &[f64]) {
        self.count += 1.0;
        let mut nsq = 0.0;
        for (k, &value) in v.iter().enumerate() {
            self.coord_sum[k] += value;
            self.coord_sum_sq[k] += value * value;
            nsq += value * value;
        }
        self.norm_sum += nsq;
        self.norm_sum_sq += nsq * nsq;
    }

    fn coord_mean_and_se(&self, k: usize) -> (f64, f64) {
        let mean = self.coord_sum[k] / self.count;
        let var = (self.coord_sum_sq[k] / self.count - mean * mean).max(0.0);
        (mean, (var / self.count).sqrt())
    }

    fn norm_sq_mean_and_se(&self) -> (f64, f64) {
        let mean = self.norm_sum / self.count;
        let var = (self.norm_sum_sq / self.count - mean * mean).max(0.0);
        (mean, (var / self.count).sqrt())
    }
}

fn gaussian_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// The quantizer families exercised by the statistical law checks at
/// dimension 20.
pub fn standard_specs(dim: usize) -> Vec<QuantizerSpec> {
    let mut specs = Vec::new();
    for p in [1.0, 2.0, f64::INFINITY] {
        for s in [1, 4] {
            specs.push(QuantizerSpec::Dither { p, s });
        }
    }
    for r in [1, dim / 4, dim] {
        specs.push(QuantizerSpec::Sparsify { r });
    }
    specs.push(QuantizerSpec::BlockDither {
        block_sizes: vec![dim / 4; 4],
    });
    specs
}

fn spec_label(spec: &QuantizerSpec) -> String {
    match spec {
        QuantizerSpec::Identity => "identity".into(),
        QuantizerSpec::Dither { p, s } => {
            if p.is_infinite() {
                format!("dither(p=inf, s={s})")
            } else {
                format!("dither(p={p}, s={s})")
            }
        }
        QuantizerSpec::Sparsify { r } => format!("sparsify(r={r})"),
        QuantizerSpec::BlockDither { block_sizes } => {
            format!("block_dither(sizes={block_sizes:?})")
        }
    }
}

/// Unbiasedness and second-moment law for one spec at one ω-bound: over
/// `n_vectors` random inputs, `samples` quantizations each, the sample mean
/// must sit within 4 standard errors of `x` per coordinate and the sample
/// `E‖Q(x)‖²` must stay below `(ω+1)‖x‖²` plus 4-SE slack.
pub fn check_quantizer_law(
    spec: &QuantizerSpec,
    dim: usize,
    n_vectors: usize,
    samples: usize,
    seed: u64,
) -> PropertyReport {
    let omega = spec.omega(dim).expect("valid spec");
    let quantizer = Quantizer::new(spec.clone(), LedgerModel::default());
    let streams = StreamFactory::new(seed);
    let failures: Vec<String> = (0..n_vectors)
        .into_par_iter()
        .filter_map(|v| {
            let mut rng = streams.stream(v as u64, StreamPurpose::Probe, 0);
            let x = gaussian_vector(&mut rng, dim);
            let mut acc = MomentAccumulator::new(dim);
            for _ in 0..samples {
                let msg = quantizer.encode(&x, &mut rng).expect("encode");
                let dec = decode(&msg).expect("decode");
                acc.push(&dec);
            }
            for k in 0..dim {
                let (mean, se) = acc.coord_mean_and_se(k);
                let tol = 4.0 * se + 1e-12 * x[k].abs();
                if (mean - x[k]).abs() > tol {
                    return Some(format!(
                        "vector {v} coordinate {k}: |{mean} - {}| > {tol}",
                        x[k]
                    ));
                }
            }
            let (m2, se2) = acc.norm_sq_mean_and_se();
            let bound = (omega + 1.0) * norm_sq(&x) + 4.0 * se2;
            if m2 > bound {
                return Some(format!("vector {v}: E‖Q‖² = {m2} > {bound}"));
            }
            None
        })
        .collect();
    PropertyReport::new(
        format!("quantizer law: {}", spec_label(spec)),
        failures.is_empty(),
        if failures.is_empty() {
            format!("{n_vectors} vectors x {samples} samples, omega = {omega:.4}")
        } else {
            failures.join("; ")
        },
    )
}

/// Runs [`check_quantizer_law`] over the whole standard family.
pub fn check_quantizer_laws(
    dim: usize,
    n_vectors: usize,
    samples: usize,
    seed: u64,
) -> Vec<PropertyReport> {
    standard_specs(dim)
        .iter()
        .enumerate()
        .map(|(idx, spec)| check_quantizer_law(spec, dim, n_vectors, samples, seed.wrapping_add(idx as u64)))
        .collect()
}

/// Exact enumeration for small dimensions: the dithering law is unbiased to
/// 1e−12, sparsification is unbiased with second moment exactly
/// `(d/r)‖x‖²`, and the implementation's empirical outcome frequencies match
/// the enumerated probabilities.
pub fn check_enumeration_exactness(seed: u64) -> PropertyReport {
    let streams = StreamFactory::new(seed);
    let mut failures: Vec<String> = Vec::new();
    let vectors: Vec<Vec<f64>> = vec![
        vec![-7.0],
        vec![3.0, 4.0],
        vec![1.0, 0.0],
        vec![0.3, -1.2, 0.5],
        vec![-0.25, 0.75, 2.0],
    ];
    let samples = 20_000usize;
    let mut round = 0u64;

    for x in &vectors {
        let d = x.len();
        let scale = x.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for p in [1.0, 2.0, f64::INFINITY] {
            let outcomes = enumerate_dither(x, p, 1);
            let total_prob: f64 = outcomes.iter().map(|(_, pr)| pr).sum();
            if (total_prob - 1.0).abs() > 1e-12 {
                failures.push(format!("dither probabilities sum to {total_prob}"));
            }
            for k in 0..d {
                let mean: f64 = outcomes.iter().map(|(v, pr)| v[k] * pr).sum();
                if (mean - x[k]).abs() > 1e-12 * scale {
                    failures.push(format!(
                        "dither p={p} on {x:?}: exact E[coord {k}] = {mean}, want {}",
                        x[k]
                    ));
                }
            }
            // implementation outcomes land on enumerated points with the
            // enumerated frequencies
            let mut rng = streams.stream(round, StreamPurpose::Probe, 1);
            round += 1;
            let mut counts = vec![0usize; outcomes.len()];
            'draw: for _ in 0..samples {
                let msg = crate::quantize::dither(x, p, 1, &mut rng).expect("encode");
                let dec = decode(&msg).expect("decode");
                for (o, (v, _)) in outcomes.iter().enumerate() {
                    if dec
                        .iter()
                        .zip(v)
                        .all(|(a, b)| (a - b).abs() <= 1e-12 * scale.max(1.0))
                    {
                        counts[o] += 1;
                        continue 'draw;
                    }
                }
                failures.push(format!("dither p={p} on {x:?}: outcome {dec:?} not enumerated"));
                break;
            }
            for (o, (_, pr)) in outcomes.iter().enumerate() {
                let freq = counts[o] as f64 / samples as f64;
                let se = (pr * (1.0 - pr) / samples as f64).sqrt();
                if (freq - pr).abs() > 5.0 * se + 1e-3 {
                    failures.push(format!(
                        "dither p={p} on {x:?}: outcome {o} frequency {freq}, probability {pr}"
                    ));
                }
            }
        }
    }

    // sparsification: exact moments for d ≤ 4 and uniform masks
    let sparsify_cases: Vec<(Vec<f64>, usize)> = vec![
        (vec![1.0, 2.0], 1),
        (vec![0.5, -1.5, 2.0], 1),
        (vec![0.5, -1.5, 2.0], 2),
        (vec![1.0, -1.0, 0.25, 3.0], 2),
        (vec![1.0, -1.0, 0.25, 3.0], 4),
    ];
    for (x, r) in &sparsify_cases {
        let d = x.len();
        let outcomes = enumerate_sparsify(x, *r);
        let scale = x.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for k in 0..d {
            let mean: f64 = outcomes.iter().map(|(v, pr)| v[k] * pr).sum();
            if (mean - x[k]).abs() > 1e-12 * scale {
                failures.push(format!("sparsify r={r} on {x:?}: E[coord {k}] = {mean}"));
            }
        }
        let m2: f64 = outcomes.iter().map(|(v, pr)| norm_sq(v) * pr).sum();
        let expected = d as f64 / *r as f64 * norm_sq(x);
        if (m2 - expected).abs() > 1e-12 * expected.max(1.0) {
            failures.push(format!(
                "sparsify r={r} on {x:?}: exact E‖Q‖² = {m2}, want {expected}"
            ));
        }
        let mut rng = streams.stream(round, StreamPurpose::Probe, 2);
        round += 1;
        let mut counts = vec![0usize; outcomes.len()];
        'draw2: for _ in 0..samples {
            let msg = crate::quantize::sparsify(x, *r, &mut rng).expect("encode");
            let dec = decode(&msg).expect("decode");
            for (o, (v, _)) in outcomes.iter().enumerate() {
                if dec.iter().zip(v).all(|(a, b)| (a - b).abs() <= 1e-12) {
                    counts[o] += 1;
                    continue 'draw2;
                }
            }
            failures.push(format!("sparsify r={r} on {x:?}: outcome {dec:?} not enumerated"));
            break;
        }
        for (o, (_, pr)) in outcomes.iter().enumerate() {
            let freq = counts[o] as f64 / samples as f64;
            let se = (pr * (1.0 - pr) / samples as f64).sqrt();
            if (freq - pr).abs() > 5.0 * se + 1e-3 {
                failures.push(format!(
                    "sparsify r={r} on {x:?}: mask {o} frequency {freq}, probability {pr}"
                ));
            }
        }
    }

    PropertyReport::new(
        "exact enumeration: dither unbiased, sparsify moments, uniform masks",
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "{} dither cases, {} sparsify cases, {samples} draws each",
                vectors.len() * 3,
                sparsify_cases.len()
            )
        } else {
            failures.join("; ")
        },
    )
}

/// Expected sparsity of dithering with `p = 2`, `s = 1`: the mean nonzero
/// count over Gaussian inputs at `d = 100` stays below `s(s + √d) = 11`
/// within 10%.
pub fn check_expected_sparsity(seed: u64) -> PropertyReport {
    let dim = 100usize;
    let draws = 10_000usize;
    let streams = StreamFactory::new(seed);
    let mut rng = streams.stream(0, StreamPurpose::Probe, 3);
    let mut total_nnz = 0usize;
    for _ in 0..draws {
        let x = gaussian_vector(&mut rng, dim);
        let msg = crate::quantize::dither(&x, 2.0, 1, &mut rng).expect("encode");
        if let Payload::Dither(block) = &msg.payload {
            total_nnz += block.entries.len();
        }
    }
    let mean = total_nnz as f64 / draws as f64;
    let bound = 1.0 * (1.0 + (dim as f64).sqrt()) * 1.10;
    PropertyReport::new(
        "expected sparsity of dither(p=2, s=1) at d=100",
        mean <= bound,
        format!("mean nnz = {mean:.3}, bound = {bound:.3}"),
    )
}

/// Per-input second-moment bound of dithering:
/// `E‖Q(x)‖² ≤ (3 + ‖x‖₁‖x‖_p/(s‖x‖₂²))·‖x‖₂²` for every fixed `x`.
pub fn check_dither_per_x_bound(seed: u64) -> PropertyReport {
    let streams = StreamFactory::new(seed);
    let samples = 100_000usize;
    let mut failures = Vec::new();
    let mut round = 0u64;
    for dim in [5usize, 20] {
        for p in [1.0, 2.0, f64::INFINITY] {
            for s in [1u32, 4] {
                let mut rng = streams.stream(round, StreamPurpose::Probe, 4);
                round += 1;
                let x = gaussian_vector(&mut rng, dim);
                let mut acc = MomentAccumulator::new(dim);
                for _ in 0..samples {
                    let msg = crate::quantize::dither(&x, p, s, &mut rng).expect("encode");
                    acc.push(&decode(&msg).expect("decode"));
                }
                let (m2, se2) = acc.norm_sq_mean_and_se();
                let omega_x_plus_1 =
                    3.0 + lp_norm(&x, 1.0) * lp_norm(&x, p) / (f64::from(s) * norm_sq(&x));
                let bound = omega_x_plus_1 * norm_sq(&x) + 4.0 * se2;
                if m2 > bound {
                    failures.push(format!(
                        "d={dim} p={p} s={s}: E‖Q‖² = {m2} > {bound}"
                    ));
                }
            }
        }
    }
    PropertyReport::new(
        "dither per-input variance bound (omega(x) form)",
        failures.is_empty(),
        if failures.is_empty() {
            "12 (d, p, s) cells".into()
        } else {
            failures.join("; ")
        },
    )
}

/// The dither second moment is non-increasing in `p` over {1, 2, ∞} for a
/// fixed input, within Monte-Carlo slack.
pub fn check_monotonicity_in_p(seed: u64) -> PropertyReport {
    let streams = StreamFactory::new(seed);
    let samples = 200_000usize;
    let dim = 30usize;
    let mut failures = Vec::new();
    for (case, s) in [(0u64, 1u32), (1u64, 4u32)] {
        let mut rng = streams.stream(case, StreamPurpose::Probe, 5);
        let x = gaussian_vector(&mut rng, dim);
        let mut stats = Vec::new();
        for p in [1.0, 2.0, f64::INFINITY] {
            let mut acc = MomentAccumulator::new(dim);
            for _ in 0..samples {
                let msg = crate::quantize::dither(&x, p, s, &mut rng).expect("encode");
                acc.push(&decode(&msg).expect("decode"));
            }
            stats.push(acc.norm_sq_mean_and_se());
        }
        for w in stats.windows(2) {
            let (m_lo, se_lo) = w[0];
            let (m_hi, se_hi) = w[1];
            if m_hi > m_lo + 4.0 * (se_lo + se_hi) {
                failures.push(format!(
                    "s={s}: second moment rose from {m_lo} to {m_hi} as p increased"
                ));
            }
        }
    }
    PropertyReport::new(
        "dither second moment non-increasing in p",
        failures.is_empty(),
        if failures.is_empty() {
            "p in {1, 2, inf}, s in {1, 4}".into()
        } else {
            failures.join("; ")
        },
    )
}

// --- theorem contraction checks -------------------------------------------

/// The strongly convex quadratic used by the DIANA contraction checks:
/// d = 10, n = 4, shared spectrum with κ = (L+μ)/(2μ) = 50.
pub fn diana_contraction_problem() -> FiniteSumProblem {
    synth_problem(&SynthSpec {
        kind: SynthKind::Quadratic { mu: 0.02, l: 1.98 },
        d: 10,
        n: 4,
        m: 1,
        lambda2: None,
        seed: 20_224,
        regularizer: Regularizer::None,
    })
    .expect("synthesis")
}

/// One-step conditional contraction of the DIANA Lyapunov function with the
/// noise-free oracle: at a frozen state, the mean of `Ψ` after one round
/// over `trials` fresh quantization draws must not exceed
/// `(1 − γμ)Ψ + 3·SE`.
pub fn check_diana_contraction(seed: u64, trials: usize) -> PropertyReport {
    let problem = diana_contraction_problem();
    let constants = problem.constants();
    let spec = QuantizerSpec::Dither { p: 2.0, s: 1 };
    let omega = spec.omega(problem.dim).unwrap();
    let quantizer = Quantizer::new(spec, LedgerModel::default());
    let config = algos::default_hyperparams(
        MethodSelector::Diana {
            oracle: GradOracle::FullGrad,
        },
        Regime::StronglyConvex,
        constants,
        omega,
        problem.n,
        problem.m,
    )
    .expect("defaults");
    let params = metrics::lyapunov_params(
        constants,
        config.gamma,
        config.alpha,
        omega,
        problem.n,
        problem.m,
        VrCoeffSource::Proof,
        VrRegime::StronglyConvex,
    );
    let (x_star, f_star) =
        crate::engine::solve_reference(&problem, 1e-12, 1_000_000).expect("reference");
    let cache = OptimumCache::new(&problem, x_star, f_star);

    // freeze a generic state a few rounds in
    let (mut master, mut workers) = algos::init_states(
        &problem,
        &config,
        vec![0.0; problem.dim],
        ShiftInit::Zero,
        false,
    )
    .expect("init");
    let warm_streams = StreamFactory::new(seed);
    for _ in 0..5 {
        let ctx = RoundCtx {
            problem: &problem,
            quantizer: &quantizer,
            config: &config,
            streams: &warm_streams,
            pool: None,
        };
        algos::method_round(&mut master, &mut workers, &ctx).expect("warmup round");
    }
    let psi0 = metrics::lyapunov_diana(&master, &workers, &cache, &params).expect("psi");

    let values: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut m = master.clone();
            let mut w = workers.clone();
            let streams = StreamFactory::new(seed.wrapping_add(1).wrapping_add(t as u64));
            let ctx = RoundCtx {
                problem: &problem,
                quantizer: &quantizer,
                config: &config,
                streams: &streams,
                pool: None,
            };
            algos::method_round(&mut m, &mut w, &ctx).expect("trial round");
            metrics::lyapunov_diana(&m, &w, &cache, &params).expect("psi")
        })
        .collect();
    let mean: f64 = values.iter().sum::<f64>() / trials as f64;
    let var: f64 =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / trials as f64;
    let se = (var / trials as f64).sqrt();
    let rate = config.gamma * constants.mu;
    let bound = (1.0 - rate) * psi0 + 3.0 * se;
    PropertyReport::new(
        "DIANA one-step Lyapunov contraction (full gradients)",
        mean <= bound,
        format!(
            "mean Ψ' = {mean:.6e} vs (1 − γμ)Ψ + 3SE = {bound:.6e} over {trials} draws (Ψ = {psi0:.6e}, γμ = {rate:.3e})"
        ),
    )
}

/// The logistic problem used by the VR contraction check.
pub fn vr_contraction_problem() -> FiniteSumProblem {
    synth_problem(&SynthSpec {
        kind: SynthKind::logistic(),
        d: 10,
        n: 4,
        m: 20,
        lambda2: None,
        seed: 555,
        regularizer: Regularizer::None,
    })
    .expect("synthesis")
}

/// One-step conditional contraction of the VR Lyapunov function `ψ` at the
/// strongly convex theorem's rate `ρ`, over fresh round randomness (sampled
/// components, the shared coin, quantization).
pub fn check_vr_contraction(variant: VrVariant, seed: u64, trials: usize) -> PropertyReport {
    let problem = vr_contraction_problem();
    let constants = problem.constants();
    let spec = QuantizerSpec::Dither { p: 2.0, s: 1 };
    let omega = spec.omega(problem.dim).unwrap();
    let quantizer = Quantizer::new(spec, LedgerModel::default());
    let config = algos::default_hyperparams(
        MethodSelector::VrDiana { variant },
        Regime::StronglyConvex,
        constants,
        omega,
        problem.n,
        problem.m,
    )
    .expect("defaults");
    let params = metrics::lyapunov_params(
        constants,
        config.gamma,
        config.alpha,
        omega,
        problem.n,
        problem.m,
        VrCoeffSource::Proof,
        VrRegime::StronglyConvex,
    );
    let rho = metrics::vr_contraction_rate(constants, omega, config.alpha, problem.n, problem.m);
    let (x_star, f_star) =
        crate::engine::solve_reference(&problem, 1e-12, 1_000_000).expect("reference");
    let cache = OptimumCache::new(&problem, x_star, f_star);

    let (mut master, mut workers) = algos::init_states(
        &problem,
        &config,
        vec![0.0; problem.dim],
        ShiftInit::Zero,
        false,
    )
    .expect("init");
    let warm_streams = StreamFactory::new(seed);
    for _ in 0..10 {
        let ctx = RoundCtx {
            problem: &problem,
            quantizer: &quantizer,
            config: &config,
            streams: &warm_streams,
            pool: None,
        };
        algos::method_round(&mut master, &mut workers, &ctx).expect("warmup");
    }
    let psi0 = metrics::lyapunov_vr(&master, &workers, &problem, &cache, &params)
        .expect("psi")
        .psi;

    let values: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut m = master.clone();
            let mut w = workers.clone();
            let streams = StreamFactory::new(seed ^ 0x5ca1ab1e ^ (t as u64).wrapping_mul(0x9e37));
            let ctx = RoundCtx {
                problem: &problem,
                quantizer: &quantizer,
                config: &config,
                streams: &streams,
                pool: None,
            };
            algos::method_round(&mut m, &mut w, &ctx).expect("trial");
            metrics::lyapunov_vr(&m, &w, &problem, &cache, &params)
                .expect("psi")
                .psi
        })
        .collect();
    let mean: f64 = values.iter().sum::<f64>() / trials as f64;
    let var: f64 =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / trials as f64;
    let se = (var / trials as f64).sqrt();
    let bound = (1.0 - rho) * psi0 + 3.0 * se;
    let label = match variant {
        VrVariant::LSvrg => "L-SVRG",
        VrVariant::Saga => "SAGA",
    };
    PropertyReport::new(
        format!("VR-DIANA ({label}) one-step Lyapunov contraction"),
        mean <= bound,
        format!(
            "mean ψ' = {mean:.6e} vs (1 − ρ)ψ + 3SE = {bound:.6e} over {trials} draws (ψ = {psi0:.6e}, ρ = {rho:.3e})"
        ),
    )
}

/// Unbiasedness of the aggregated estimate at a frozen state: over many
/// resamplings of all round randomness, the mean of the master's step
/// direction matches `∇f(x)` to 4 standard errors per coordinate.
pub fn check_unbiased_aggregate(method: Method, seed: u64, trials: usize) -> PropertyReport {
    let problem = synth_problem(&SynthSpec {
        kind: SynthKind::logistic(),
        d: 5,
        n: 2,
        m: 3,
        lambda2: Some(0.2),
        seed: 77,
        regularizer: Regularizer::None,
    })
    .expect("synthesis");
    let spec = QuantizerSpec::Dither { p: 2.0, s: 2 };
    let omega = spec.omega(problem.dim).unwrap();
    let quantizer = Quantizer::new(spec, LedgerModel::default());
    let config = MethodConfig {
        method: method.clone(),
        alpha: 1.0 / (omega + 1.0),
        gamma: 0.05,
    };
    let (mut master, mut workers) = algos::init_states(
        &problem,
        &config,
        vec![0.0; problem.dim],
        ShiftInit::Zero,
        false,
    )
    .expect("init");
    let warm = StreamFactory::new(seed);
    for _ in 0..4 {
        let ctx = RoundCtx {
            problem: &problem,
            quantizer: &quantizer,
            config: &config,
            streams: &warm,
            pool: None,
        };
        algos::method_round(&mut master, &mut workers, &ctx).expect("warmup");
    }
    let grad = problem.full_grad(&master.x);

    let dim = problem.dim;
    let estimates: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut m = master.clone();
            let mut w = workers.clone();
            let streams = StreamFactory::new(seed ^ 0xfeed ^ (t as u64).wrapping_mul(31));
            let ctx = RoundCtx {
                problem: &problem,
                quantizer: &quantizer,
                config: &config,
                streams: &streams,
                pool: None,
            };
            algos::method_round(&mut m, &mut w, &ctx).expect("trial").estimate
        })
        .collect();
    let mut acc = MomentAccumulator::new(dim);
    for e in &estimates {
        acc.push(e);
    }
    let mut failures = Vec::new();
    for k in 0..dim {
        let (mean, se) = acc.coord_mean_and_se(k);
        if (mean - grad[k]).abs() > 4.0 * se + 1e-12 {
            failures.push(format!(
                "coordinate {k}: mean {mean}, gradient {}, se {se}",
                grad[k]
            ));
        }
    }
    let label = match method {
        Method::Diana { .. } => "DIANA",
        Method::VrDiana {
            variant: VrVariant::LSvrg,
        } => "VR-DIANA (L-SVRG)",
        Method::VrDiana {
            variant: VrVariant::Saga,
        } => "VR-DIANA (SAGA)",
        Method::SvrgDiana { .. } => "SVRG-DIANA",
    };
    PropertyReport::new(
        format!("unbiased aggregated estimate: {label}"),
        failures.is_empty(),
        if failures.is_empty() {
            format!("{trials} resamplings of all round randomness")
        } else {
            failures.join("; ")
        },
    )
}

/// The full suite behind `qgrad verify`.
pub fn run_all(seed: u64) -> Vec<PropertyReport> {
    let mut reports = check_quantizer_laws(20, 50, 100_000, seed);
    reports.push(check_enumeration_exactness(seed));
    reports.push(check_expected_sparsity(seed));
    reports.push(check_dither_per_x_bound(seed));
    reports.push(check_monotonicity_in_p(seed));
    reports.push(check_diana_contraction(seed, 500));
    reports.push(check_vr_contraction(VrVariant::LSvrg, seed, 200));
    reports.push(check_vr_contraction(VrVariant::Saga, seed, 200));
    reports.push(check_unbiased_aggregate(
        Method::Diana {
            oracle: GradOracle::Uniform1,
        },
        seed,
        100_000,
    ));
    reports.push(check_unbiased_aggregate(
        Method::VrDiana {
            variant: VrVariant::Saga,
        },
        seed,
        100_000,
    ));
    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dither_enumeration_of_3_4_case() {
        // ‖x‖₂ = 5, level probabilities 0.6 and 0.8
        let outcomes = enumerate_dither(&[3.0, 4.0], 2.0, 1);
        assert_eq!(outcomes.len(), 4);
        let find = |target: [f64; 2]| {
            outcomes
                .iter()
                .find(|(v, _)| (v[0] - target[0]).abs() < 1e-12 && (v[1] - target[1]).abs() < 1e-12)
                .map(|(_, p)| *p)
                .expect("outcome present")
        };
        assert!((find([0.0, 0.0]) - 0.08).abs() < 1e-12);
        assert!((find([5.0, 0.0]) - 0.12).abs() < 1e-12);
        assert!((find([0.0, 5.0]) - 0.32).abs() < 1e-12);
        assert!((find([5.0, 5.0]) - 0.48).abs() < 1e-12);
        let mean0: f64 = outcomes.iter().map(|(v, p)| v[0] * p).sum();
        let mean1: f64 = outcomes.iter().map(|(v, p)| v[1] * p).sum();
        assert!((mean0 - 3.0).abs() < 1e-12);
        assert!((mean1 - 4.0).abs() < 1e-12);
        let m2: f64 = outcomes.iter().map(|(v, p)| norm_sq(v) * p).sum();
        assert!((m2 - 35.0).abs() < 1e-12);
    }

    #[test]
    fn sparsify_enumeration_of_two_coordinates() {
        let outcomes = enumerate_sparsify(&[1.0, 2.0], 1);
        assert_eq!(outcomes.len(), 2);
        let m2: f64 = outcomes.iter().map(|(v, p)| norm_sq(v) * p).sum();
        assert!((m2 - 10.0).abs() < 1e-12);
    }

    #[test]
    fn enumeration_check_passes() {
        let report = check_enumeration_exactness(99);
        assert!(report.passed, "{}", report.detail);
    }

    #[test]
    fn expected_sparsity_check_passes() {
        let report = check_expected_sparsity(3);
        assert!(report.passed, "{}", report.detail);
    }

    #[test]
    fn small_quantizer_law_smoke() {
        let report = check_quantizer_law(
            &QuantizerSpec::Dither { p: 2.0, s: 1 },
            8,
            4,
            20_000,
            1234,
        );
        assert!(report.passed, "{}", report.detail);
        let report = check_quantizer_law(&QuantizerSpec::Sparsify { r: 3 }, 8, 4, 20_000, 77);
        assert!(report.passed, "{}", report.detail);
    }
}
