//! LIBSVM parsing, deterministic partitioning and synthetic problems.
//!
//! Everything here is seed-driven: the same `(dataset, n, seed)` triple or
//! the same synthesis spec always yields the identical problem, down to the
//! serialized bytes.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{StreamFactory, StreamPurpose};
use crate::problems::{
    Components, FiniteSumProblem, LogisticComponent, QuadraticComponent, Regularizer, SparseRow,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset has {rows} rows, fewer than {n} workers")]
    InsufficientData { rows: usize, n: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Problem(#[from] crate::problems::ProblemError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    /// Label normalized to {−1, +1}.
    pub label: f64,
    pub features: SparseRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub rows: Vec<DatasetRow>,
    /// Max feature index + 1.
    pub dim: usize,
}

fn parse_label(tok: &str, line: usize) -> Result<f64, DataError> {
    let value: f64 = tok.parse().map_err(|_| DataError::Parse {
        line,
        msg: format!("label `{tok}` is not numeric"),
    })?;
    // {0, 1} or {−1, +1} both normalize to {−1, +1}.
    if value == 0.0 || value == -1.0 {
        Ok(-1.0)
    } else if value == 1.0 {
        Ok(1.0)
    } else {
        Err(DataError::Parse {
            line,
            msg: format!("label `{tok}` is not one of 0, 1, -1, +1"),
        })
    }
}

fn parse_line(text: &str, line: usize) -> Result<DatasetRow, DataError> {
    let mut tokens = text.split_whitespace();
    let label = parse_label(tokens.next().expect("nonempty line"), line)?;
    let mut indices: Vec<u32> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for tok in tokens {
        let (idx_str, val_str) = tok.split_once(':').ok_or_else(|| DataError::Parse {
            line,
            msg: format!("feature token `{tok}` has no `:`"),
        })?;
        let idx: u64 = idx_str.parse().map_err(|_| DataError::Parse {
            line,
            msg: format!("feature index `{idx_str}` is not a positive integer"),
        })?;
        if idx == 0 {
            return Err(DataError::Parse {
                line,
                msg: "feature indices are 1-based; got 0".into(),
            });
        }
        let value: f64 = val_str.parse().map_err(|_| DataError::Parse {
            line,
            msg: format!("feature value `{val_str}` is not numeric"),
        })?;
        if !value.is_finite() {
            return Err(DataError::Parse {
                line,
                msg: format!("feature value `{val_str}` is not finite"),
            });
        }
        let zero_based = (idx - 1) as u32;
        if let Some(&last) = indices.last() {
            if zero_based <= last {
                return Err(DataError::Parse {
                    line,
                    msg: format!(
                        "feature indices must be strictly increasing; {} follows {}",
                        idx,
                        last + 1
                    ),
                });
            }
        }
        indices.push(zero_based);
        values.push(value);
    }
    Ok(DatasetRow {
        label,
        features: SparseRow { indices, values },
    })
}

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Parses LIBSVM text (`<label> <idx>:<val> ...`, 1-based indices). Input
/// starting with the gzip magic bytes is decompressed first.
pub fn parse_libsvm(bytes: &[u8]) -> Result<Dataset, DataError> {
    let text = if bytes.starts_with(&GZIP_MAGIC) {
        let mut out = String::new();
        flate2::read::GzDecoder::new(bytes).read_to_string(&mut out)?;
        out
    } else {
        String::from_utf8_lossy(bytes).into_owned()
    };
    let mut rows = Vec::new();
    let mut dim = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_line(line, lineno + 1)?;
        if let Some(&last) = row.features.indices.last() {
            dim = dim.max(last as usize + 1);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(Dataset { rows, dim })
}

pub fn parse_libsvm_path(path: &Path) -> Result<Dataset, DataError> {
    Ok(parse_libsvm(&std::fs::read(path)?)?)
}

/// Writes a dataset back to LIBSVM text; `parse_libsvm` of the output is the
/// identity on the dataset model.
pub fn serialize_libsvm(dataset: &Dataset) -> String {
    let mut out = String::new();
    for row in &dataset.rows {
        out.push_str(if row.label > 0.0 { "1" } else { "-1" });
        for (&idx, &value) in row.features.indices.iter().zip(&row.features.values) {
            out.push_str(&format!(" {}:{}", idx + 1, value));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionOptions {
    /// Ridge coefficient; `None` defaults to `1/(n·m)`.
    pub lambda2: Option<f64>,
    /// Normalize feature rows to unit ℓ2 norm so `L ≤ 1/4 + λ₂` uniformly.
    pub normalize_rows: bool,
    pub regularizer: Regularizer,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        PartitionOptions {
            lambda2: None,
            normalize_rows: true,
            regularizer: Regularizer::None,
        }
    }
}

/// Splits a dataset over `n` workers: a seed-keyed permutation of the rows,
/// then `m = ⌊rows/n⌋` contiguous rows per worker. Trailing rows are dropped
/// with a logged warning.
pub fn partition(
    dataset: &Dataset,
    n: usize,
    seed: u64,
    opts: &PartitionOptions,
) -> Result<FiniteSumProblem, DataError> {
    if n == 0 {
        return Err(DataError::Problem(
            crate::problems::ProblemError::InvalidInput("need at least one worker".into()),
        ));
    }
    let rows = dataset.rows.len();
    if rows < n {
        return Err(DataError::InsufficientData { rows, n });
    }
    let m = rows / n;
    let dropped = rows - n * m;
    if dropped > 0 {
        log::warn!("partition drops {dropped} trailing rows ({rows} rows over {n} workers)");
    }
    let mut order: Vec<usize> = (0..rows).collect();
    let mut rng = StreamFactory::new(seed).stream(0, StreamPurpose::Partition, 0);
    for i in (1..rows).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let components: Vec<LogisticComponent> = order[..n * m]
        .iter()
        .map(|&idx| {
            let row = &dataset.rows[idx];
            let mut feature = row.features.clone();
            if opts.normalize_rows {
                feature.normalize();
            }
            LogisticComponent {
                feature,
                label: row.label,
            }
        })
        .collect();
    let lambda2 = opts.lambda2.unwrap_or(1.0 / (n * m) as f64);
    Ok(FiniteSumProblem::new(
        n,
        m,
        dataset.dim,
        Components::Logistic(components),
        lambda2,
        opts.regularizer,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SynthKind {
    /// Gaussian features with unit-norm rows and labels from a planted
    /// linear model with a fraction of flipped labels.
    Logistic { label_flip: f64, normalize_rows: bool },
    /// Diagonal quadratics sharing a log-spaced spectrum over `[mu, l]`,
    /// with Gaussian centers per component.
    Quadratic { mu: f64, l: f64 },
}

impl SynthKind {
    pub fn logistic() -> Self {
        SynthKind::Logistic {
            label_flip: 0.1,
            normalize_rows: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub d: usize,
    pub n: usize,
    pub m: usize,
    /// `None` defaults to `1/(n·m)` for logistic and 0 for quadratic.
    pub lambda2: Option<f64>,
    pub seed: u64,
    #[serde(default)]
    pub regularizer: Regularizer,
}

impl Default for Regularizer {
    fn default() -> Self {
        Regularizer::None
    }
}

pub fn synth_problem(spec: &SynthSpec) -> Result<FiniteSumProblem, DataError> {
    let SynthSpec { d, n, m, seed, .. } = *spec;
    let mut rng = StreamFactory::new(seed).stream(0, StreamPurpose::Synth, 0);
    match &spec.kind {
        SynthKind::Logistic {
            label_flip,
            normalize_rows,
        } => {
            let x_true: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let rows: Vec<LogisticComponent> = (0..n * m)
                .map(|_| {
                    let mut feature = SparseRow {
                        indices: (0..d as u32).collect(),
                        values: (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                    };
                    if *normalize_rows {
                        feature.normalize();
                    }
                    let planted = if feature.dot(&x_true) >= 0.0 { 1.0 } else { -1.0 };
                    let label = if rng.gen::<f64>() < *label_flip {
                        -planted
                    } else {
                        planted
                    };
                    LogisticComponent { feature, label }
                })
                .collect();
            let lambda2 = spec.lambda2.unwrap_or(1.0 / (n * m) as f64);
            Ok(FiniteSumProblem::new(
                n,
                m,
                d,
                Components::Logistic(rows),
                lambda2,
                spec.regularizer,
            )?)
        }
        SynthKind::Quadratic { mu, l } => {
            if !(*mu > 0.0 && l >= mu) {
                return Err(DataError::Problem(
                    crate::problems::ProblemError::InvalidInput(
                        "quadratic spectrum needs 0 < mu <= l".into(),
                    ),
                ));
            }
            let diag: Vec<f64> = if d == 1 {
                vec![*l]
            } else {
                (0..d)
                    .map(|k| mu * (l / mu).powf(k as f64 / (d - 1) as f64))
                    .collect()
            };
            let comps: Vec<QuadraticComponent> = (0..n * m)
                .map(|_| QuadraticComponent {
                    diag: diag.clone(),
                    center: (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                })
                .collect();
            let lambda2 = spec.lambda2.unwrap_or(0.0);
            Ok(FiniteSumProblem::new(
                n,
                m,
                d,
                Components::Quadratic(comps),
                lambda2,
                spec.regularizer,
            )?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn parses_basic_rows() {
        let ds = parse_libsvm(b"1 1:0.5 3:-2\n").unwrap();
        assert_eq!(ds.rows.len(), 1);
        assert_eq!(ds.dim, 3);
        let row = &ds.rows[0];
        assert_eq!(row.label, 1.0);
        assert_eq!(row.features.indices, vec![0, 2]);
        assert_eq!(row.features.values, vec![0.5, -2.0]);
    }

    #[test]
    fn zero_label_maps_to_minus_one() {
        let ds = parse_libsvm(b"0 2:1\n").unwrap();
        assert_eq!(ds.rows[0].label, -1.0);
        assert_eq!(ds.rows[0].features.indices, vec![1]);
        assert_eq!(ds.rows[0].features.values, vec![1.0]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(parse_libsvm(b""), Err(DataError::EmptyDataset)));
        assert!(matches!(
            parse_libsvm(b"\n  \n"),
            Err(DataError::EmptyDataset)
        ));
    }

    #[test]
    fn malformed_lines_carry_line_numbers() {
        let err = parse_libsvm(b"1 1:1\nabc 1:1\n").unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(parse_libsvm(b"1 nocolon\n").is_err());
        assert!(parse_libsvm(b"1 x:1\n").is_err());
        assert!(parse_libsvm(b"1 2:z\n").is_err());
        assert!(parse_libsvm(b"2 1:1\n").is_err());
        // non-increasing indices
        assert!(parse_libsvm(b"1 3:1 2:4\n").is_err());
        assert!(parse_libsvm(b"1 2:1 2:4\n").is_err());
        // 0 is not a valid 1-based index
        assert!(parse_libsvm(b"1 0:1\n").is_err());
    }

    #[test]
    fn round_trips_through_serialization() {
        let ds = parse_libsvm(b"1 1:0.5 3:-2.25\n-1 2:0.125\n0 1:3\n").unwrap();
        let text = serialize_libsvm(&ds);
        let back = parse_libsvm(text.as_bytes()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn gzip_input_is_accepted() {
        let text = b"1 1:0.5 2:1\n-1 2:3\n";
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(text).unwrap();
        let compressed = enc.finish().unwrap();
        assert_eq!(
            parse_libsvm(&compressed).unwrap(),
            parse_libsvm(text).unwrap()
        );
    }

    fn toy_dataset(rows: usize) -> Dataset {
        let text: String = (0..rows)
            .map(|i| format!("{} {}:1 {}:0.5\n", if i % 2 == 0 { 1 } else { 0 }, 1, i + 2))
            .collect();
        parse_libsvm(text.as_bytes()).unwrap()
    }

    #[test]
    fn partition_shapes_and_drops() {
        let ds = toy_dataset(8);
        let p = partition(&ds, 2, 1, &PartitionOptions::default()).unwrap();
        assert_eq!((p.n, p.m), (2, 4));

        let ds7 = toy_dataset(7);
        let p7 = partition(&ds7, 2, 1, &PartitionOptions::default()).unwrap();
        assert_eq!((p7.n, p7.m), (2, 3));
    }

    #[test]
    fn partition_preserves_rows_without_duplication() {
        let ds = toy_dataset(9);
        let opts = PartitionOptions {
            normalize_rows: false,
            ..Default::default()
        };
        let p = partition(&ds, 3, 7, &opts).unwrap();
        let Components::Logistic(comps) = &p.components else {
            panic!("expected logistic components")
        };
        // every kept component appears in the source exactly once
        let mut used = vec![0usize; ds.rows.len()];
        for c in comps {
            let pos = ds
                .rows
                .iter()
                .position(|r| r.label == c.label && r.features == c.feature)
                .expect("component not found in source");
            used[pos] += 1;
        }
        assert!(used.iter().all(|&u| u <= 1));
        assert_eq!(used.iter().sum::<usize>(), 9);
    }

    #[test]
    fn partition_is_deterministic() {
        let ds = toy_dataset(10);
        let a = partition(&ds, 3, 42, &PartitionOptions::default()).unwrap();
        let b = partition(&ds, 3, 42, &PartitionOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = partition(&ds, 3, 43, &PartitionOptions::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn partition_needs_enough_rows() {
        let ds = toy_dataset(2);
        assert!(matches!(
            partition(&ds, 3, 0, &PartitionOptions::default()),
            Err(DataError::InsufficientData { rows: 2, n: 3 })
        ));
    }

    #[test]
    fn synth_defaults_lambda2_to_one_over_nm() {
        let spec = SynthSpec {
            kind: SynthKind::logistic(),
            d: 4,
            n: 2,
            m: 5,
            lambda2: None,
            seed: 3,
            regularizer: Regularizer::None,
        };
        let p = synth_problem(&spec).unwrap();
        assert_eq!(p.lambda2, 0.1);
        assert_eq!(p.constants().mu, 0.1);
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let spec = SynthSpec {
            kind: SynthKind::logistic(),
            d: 6,
            n: 2,
            m: 3,
            lambda2: Some(0.05),
            seed: 7,
            regularizer: Regularizer::None,
        };
        let a = synth_problem(&spec).unwrap();
        let b = synth_problem(&spec).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed = 8;
        assert_ne!(a, synth_problem(&other).unwrap());
    }

    #[test]
    fn synth_quadratic_spectrum_hits_targets() {
        let spec = SynthSpec {
            kind: SynthKind::Quadratic { mu: 0.02, l: 1.98 },
            d: 10,
            n: 4,
            m: 1,
            lambda2: None,
            seed: 1,
            regularizer: Regularizer::None,
        };
        let p = synth_problem(&spec).unwrap();
        let c = p.constants();
        assert!((c.mu - 0.02).abs() < 1e-15);
        assert!((c.l - 1.98).abs() < 1e-12);
        assert!((p.kappa().unwrap() - 50.0).abs() < 1e-9);
    }
}
