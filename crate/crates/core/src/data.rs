//! Ragged multivariate observations, the line-delimited JSON dataset format,
//! and the dataset transforms used by the experiments (irregularization,
//! the synthetic phase-coupling benchmark, and train/val/test splitting).
//!
//! Timestamps are observation-local, nonnegative reals. Variates are
//! identified by their position in the `variates` list.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack added before flooring `fraction * count` so that products such as
/// `0.29 * 100` land on the intended integer.
const FLOOR_SLACK: f64 = 1e-9;

/// A single sample of one variate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub timestamp: f64,
    pub value: f64,
}

/// Identity of a sample inside an observation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariateTimePoint {
    pub variate: usize,
    pub sample: usize,
    pub timestamp: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VariateSeries {
    pub samples: Vec<Sample>,
}

impl VariateSeries {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Self {
        Self::new(
            pairs
                .iter()
                .map(|&(timestamp, value)| Sample { timestamp, value })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stable sort by timestamp; duplicates keep their stored order.
    pub fn canonicalize(&mut self) {
        self.samples
            .sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
}

/// One labeled instance: `N` ragged variate series plus an optional static
/// vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub id: String,
    pub variates: Vec<VariateSeries>,
    pub label: usize,
    pub static_features: Option<Vec<f64>>,
}

impl Observation {
    pub fn n_variates(&self) -> usize {
        self.variates.len()
    }

    pub fn total_samples(&self) -> usize {
        self.variates.iter().map(VariateSeries::len).sum()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.variates.iter().map(VariateSeries::len).collect()
    }

    pub fn static_dim(&self) -> usize {
        self.static_features.as_ref().map_or(0, Vec::len)
    }

    pub fn canonicalize(&mut self) {
        for series in &mut self.variates {
            series.canonicalize();
        }
    }

    pub fn points(&self) -> impl Iterator<Item = VariateTimePoint> + '_ {
        self.variates
            .iter()
            .enumerate()
            .flat_map(|(variate, series)| {
                series
                    .samples
                    .iter()
                    .enumerate()
                    .map(move |(sample, s)| VariateTimePoint {
                        variate,
                        sample,
                        timestamp: s.timestamp,
                    })
            })
    }
}

/// Shape every observation of a dataset must agree on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_variates: usize,
    pub n_classes: usize,
    pub static_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub observations: Vec<Observation>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Builds a dataset that shares `meta` but holds only the given rows.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            observations: indices
                .iter()
                .map(|&i| self.observations[i].clone())
                .collect(),
            meta: self.meta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NoSamples,
    NonFinite { variate: usize, sample: usize },
    NegativeTimestamp { variate: usize, sample: usize },
    NonFiniteStatic { index: usize },
    LabelOutOfRange { label: usize, n_classes: usize },
    VariateCount { found: usize, expected: usize },
    StaticDim { found: usize, expected: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSamples => write!(f, "no samples"),
            Violation::NonFinite { variate, sample } => {
                write!(f, "non-finite value (variate {variate}, sample {sample})")
            }
            Violation::NegativeTimestamp { variate, sample } => {
                write!(f, "negative timestamp (variate {variate}, sample {sample})")
            }
            Violation::NonFiniteStatic { index } => {
                write!(f, "non-finite value (static feature {index})")
            }
            Violation::LabelOutOfRange { label, n_classes } => {
                write!(f, "label out of range ({label} not in [0, {n_classes}))")
            }
            Violation::VariateCount { found, expected } => {
                write!(f, "expected {expected} variates, found {found}")
            }
            Violation::StaticDim { found, expected } => {
                write!(f, "expected static dimension {expected}, found {found}")
            }
        }
    }
}

fn join_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Returns every violated invariant of `obs` against `meta`.
pub fn validate_observation(
    obs: &Observation,
    meta: &DatasetMeta,
) -> std::result::Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    if obs.variates.len() != meta.n_variates {
        violations.push(Violation::VariateCount {
            found: obs.variates.len(),
            expected: meta.n_variates,
        });
    }
    if obs.total_samples() == 0 {
        violations.push(Violation::NoSamples);
    }
    for (variate, series) in obs.variates.iter().enumerate() {
        for (sample, s) in series.samples.iter().enumerate() {
            if !s.timestamp.is_finite() || !s.value.is_finite() {
                violations.push(Violation::NonFinite { variate, sample });
            } else if s.timestamp < 0.0 {
                violations.push(Violation::NegativeTimestamp { variate, sample });
            }
        }
    }
    if obs.label >= meta.n_classes {
        violations.push(Violation::LabelOutOfRange {
            label: obs.label,
            n_classes: meta.n_classes,
        });
    }
    if obs.static_dim() != meta.static_dim {
        violations.push(Violation::StaticDim {
            found: obs.static_dim(),
            expected: meta.static_dim,
        });
    }
    if let Some(features) = &obs.static_features {
        for (index, v) in features.iter().enumerate() {
            if !v.is_finite() {
                violations.push(Violation::NonFiniteStatic { index });
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObservationRecord {
    id: String,
    label: usize,
    #[serde(rename = "static", default, skip_serializing_if = "Option::is_none")]
    static_features: Option<Vec<f64>>,
    variates: Vec<Vec<[f64; 2]>>,
}

impl From<&Observation> for ObservationRecord {
    fn from(obs: &Observation) -> Self {
        Self {
            id: obs.id.clone(),
            label: obs.label,
            static_features: obs.static_features.clone(),
            variates: obs
                .variates
                .iter()
                .map(|s| s.samples.iter().map(|x| [x.timestamp, x.value]).collect())
                .collect(),
        }
    }
}

impl From<ObservationRecord> for Observation {
    fn from(record: ObservationRecord) -> Self {
        Self {
            id: record.id,
            label: record.label,
            static_features: record.static_features,
            variates: record
                .variates
                .into_iter()
                .map(|pairs| {
                    VariateSeries::new(
                        pairs
                            .into_iter()
                            .map(|[timestamp, value]| Sample { timestamp, value })
                            .collect(),
                    )
                })
                .collect(),
        }
    }
}

/// Parses one JSON observation line without dataset-level checks.
pub fn parse_observation(line: &str) -> std::result::Result<Observation, serde_json::Error> {
    let record: ObservationRecord = serde_json::from_str(line)?;
    let mut obs = Observation::from(record);
    obs.canonicalize();
    Ok(obs)
}

/// Parses a line-delimited dataset.
///
/// `N` and the static dimension are taken from the first observation. When
/// `n_classes` is `None` it is inferred as `max(label) + 1` (at least 2).
/// Blank lines are ignored. Samples are sorted by timestamp on ingest.
pub fn parse_dataset<R: BufRead>(reader: R, n_classes: Option<usize>) -> Result<Dataset> {
    let mut observations = Vec::new();
    let mut lines_of = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let obs = parse_observation(&line).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        observations.push(obs);
        lines_of.push(line_no);
    }
    let first = observations.first().ok_or(Error::EmptyDataset)?;
    let n_classes = n_classes.unwrap_or_else(|| {
        observations
            .iter()
            .map(|o| o.label + 1)
            .max()
            .unwrap_or(0)
            .max(2)
    });
    let meta = DatasetMeta {
        n_variates: first.n_variates(),
        n_classes,
        static_dim: first.static_dim(),
    };
    for (obs, &line) in observations.iter().zip(&lines_of) {
        if let Err(violations) = validate_observation(obs, &meta) {
            let shape_only = violations.iter().all(|v| {
                matches!(
                    v,
                    Violation::VariateCount { .. } | Violation::StaticDim { .. }
                )
            });
            let message = join_violations(&violations);
            return Err(if shape_only {
                Error::InconsistentDataset { line, message }
            } else {
                Error::MalformedLine { line, message }
            });
        }
    }
    Ok(Dataset { observations, meta })
}

pub fn serialize_observation(obs: &Observation) -> String {
    serde_json::to_string(&ObservationRecord::from(obs)).expect("observation serializes")
}

pub fn write_dataset<W: Write>(mut writer: W, ds: &Dataset) -> std::io::Result<()> {
    for obs in &ds.observations {
        writeln!(writer, "{}", serialize_observation(obs))?;
    }
    writer.flush()
}

pub fn read_dataset_file(
    path: impl AsRef<std::path::Path>,
    n_classes: Option<usize>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(std::io::BufReader::new(file), n_classes)
}

pub fn write_dataset_file(path: impl AsRef<std::path::Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(std::io::BufWriter::new(file), ds).map_err(|e| Error::io(path, e))
}

fn floor_count(fraction: f64, total: usize) -> usize {
    (fraction * total as f64 + FLOOR_SLACK).floor() as usize
}

/// Removes `floor(ratio * total)` samples chosen uniformly without
/// replacement across all variates. Retained samples are untouched.
pub fn irregularize<R: Rng + ?Sized>(
    obs: &Observation,
    removal_ratio: f64,
    rng: &mut R,
) -> Result<Observation> {
    if !(0.0..1.0).contains(&removal_ratio) {
        return Err(Error::Config(format!(
            "removal ratio {removal_ratio} not in [0, 1)"
        )));
    }
    let total = obs.total_samples();
    let removed = floor_count(removal_ratio, total);
    if removed >= total {
        return Err(Error::WouldEmptyObservation { removed, total });
    }
    let mut drop = vec![false; total];
    for i in index::sample(rng, total, removed) {
        drop[i] = true;
    }
    let mut flat = 0;
    let variates = obs
        .variates
        .iter()
        .map(|series| {
            let kept = series
                .samples
                .iter()
                .filter(|_| {
                    let keep = !drop[flat];
                    flat += 1;
                    keep
                })
                .copied()
                .collect();
            VariateSeries::new(kept)
        })
        .collect();
    Ok(Observation {
        id: obs.id.clone(),
        variates,
        label: obs.label,
        static_features: obs.static_features.clone(),
    })
}

pub fn irregularize_dataset<R: Rng + ?Sized>(
    ds: &Dataset,
    removal_ratio: f64,
    rng: &mut R,
) -> Result<Dataset> {
    let observations = ds
        .observations
        .iter()
        .map(|obs| irregularize(obs, removal_ratio, rng))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        observations,
        meta: ds.meta,
    })
}

fn default_frequency() -> f64 {
    2.0 * PI / 20.0
}

/// Phase-coupling benchmark: every variate of an observation carries
/// `sin(frequency * t + phase_i) + noise`. Class 0 shares one phase across
/// variates; class 1 offsets variate `i` by `i * pi / n_variates`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_obs: usize,
    pub n_variates: usize,
    #[serde(default = "SyntheticConfig::default_classes")]
    pub n_classes: usize,
    pub duration: f64,
    pub mean_samples: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Angular frequency of the carrier, in radians per time unit.
    #[serde(default = "default_frequency")]
    pub frequency: f64,
}

impl SyntheticConfig {
    fn default_classes() -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_obs == 0 {
            return fail("n_obs must be positive");
        }
        if self.n_variates == 0 {
            return fail("n_variates must be positive");
        }
        if self.n_classes != 2 {
            return fail("the phase-coupling task has exactly 2 classes");
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return fail("duration must be positive");
        }
        if !(self.mean_samples >= 1.0 && self.mean_samples.is_finite()) {
            return fail("mean_samples must be at least 1");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be nonnegative");
        }
        if !self.frequency.is_finite() {
            return fail("frequency must be finite");
        }
        Ok(())
    }

    /// Phase of `variate` given the observation's base phase.
    pub fn phase(&self, label: usize, base_phase: f64, variate: usize) -> f64 {
        if label == 0 {
            base_phase
        } else {
            base_phase + variate as f64 * PI / self.n_variates as f64
        }
    }

    /// Noise-free signal value.
    pub fn signal(&self, label: usize, base_phase: f64, variate: usize, t: f64) -> f64 {
        (self.frequency * t + self.phase(label, base_phase, variate)).sin()
    }
}

/// Draws one phase-coupled observation with a given label and base phase.
pub fn synthesize_observation<R: Rng + ?Sized>(
    cfg: &SyntheticConfig,
    id: String,
    label: usize,
    base_phase: f64,
    rng: &mut R,
) -> Observation {
    let counts = Poisson::new(cfg.mean_samples).expect("mean_samples validated");
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let variates = (0..cfg.n_variates)
        .map(|variate| {
            let n = (counts.sample(rng) as usize).max(2);
            let mut samples: Vec<Sample> = (0..n)
                .map(|_| {
                    let timestamp = rng.random_range(0.0..cfg.duration);
                    let mut value = cfg.signal(label, base_phase, variate, timestamp);
                    if cfg.noise_std > 0.0 {
                        value += cfg.noise_std * noise.sample(rng);
                    }
                    Sample { timestamp, value }
                })
                .collect();
            samples.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
            VariateSeries::new(samples)
        })
        .collect();
    Observation {
        id,
        variates,
        label,
        static_features: None,
    }
}

/// Generates the phase-coupling dataset. Labels alternate before a seeded
/// shuffle, so class counts differ by at most one.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels: Vec<usize> = (0..cfg.n_obs).map(|k| k % 2).collect();
    labels.shuffle(&mut rng);
    let observations = labels
        .into_iter()
        .enumerate()
        .map(|(k, label)| {
            let base_phase = rng.random_range(0.0..2.0 * PI);
            synthesize_observation(cfg, format!("syn-{k:05}"), label, base_phase, &mut rng)
        })
        .collect();
    Ok(Dataset {
        observations,
        meta: DatasetMeta {
            n_variates: cfg.n_variates,
            n_classes: cfg.n_classes,
            static_dim: 0,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub indices: SplitIndices,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

/// Seeded shuffle then partition. Validation and test get
/// `floor(fraction * n)` observations; the remainder goes to training.
pub fn split_indices(
    n: usize,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(SplitIndices, Vec<String>)> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::Config("split fractions must lie in [0, 1]".into()));
    }
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config("split fractions must sum to 1".into()));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = floor_count(fractions[1], n);
    let n_test = floor_count(fractions[2], n);
    let n_train = n - n_val - n_test;
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    let indices = SplitIndices {
        train: order,
        val,
        test,
    };
    let mut warnings = Vec::new();
    for (name, part) in [
        ("train", &indices.train),
        ("val", &indices.val),
        ("test", &indices.test),
    ] {
        if part.is_empty() {
            warnings.push(format!("{name} split is empty ({n} observations)"));
        }
    }
    Ok((indices, warnings))
}

pub fn split_dataset(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let (indices, warnings) = split_indices(ds.len(), fractions, seed)?;
    Ok(Split {
        train: ds.subset(&indices.train),
        val: ds.subset(&indices.val),
        test: ds.subset(&indices.test),
        indices,
        warnings,
    })
}
