//! Trajectory datasets: generation, splitting and file I/O.
//!
//! A trajectory is stored as an `n × T` matrix whose column `t` is the vector
//! at time index `t`. Built-in generators draw entries independently across
//! time; externally loaded datasets may carry arbitrary time correlation.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, DataError, Error, Result};
use crate::linalg::{psd_factor, Mat, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Disturbance,
    Noise,
    Error,
    EstimationError,
    NominalError,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Disturbance => "disturbance",
            Role::Noise => "noise",
            Role::Error => "error",
            Role::EstimationError => "estimation_error",
            Role::NominalError => "nominal_error",
        };
        f.write_str(s)
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "disturbance" => Role::Disturbance,
            "noise" => Role::Noise,
            "error" => Role::Error,
            "estimation_error" => Role::EstimationError,
            "nominal_error" => Role::NominalError,
            other => return Err(format!("unknown role '{other}'")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub role: Role,
    /// One `n × T` matrix per trajectory.
    pub samples: Vec<Mat>,
    /// Position of each trajectory in the dataset it was drawn from.
    pub origin: Vec<usize>,
    pub seed: Option<u64>,
}

impl TrajectoryDataset {
    pub fn new(role: Role, samples: Vec<Mat>, seed: Option<u64>) -> Result<Self> {
        let first = samples.first().ok_or(DataError::Empty)?;
        let (n, t) = first.shape();
        for (k, s) in samples.iter().enumerate() {
            if s.nrows() != n {
                return Err(DataError::Mismatch {
                    what: "n",
                    expected: n,
                    found: s.nrows(),
                }
                .into());
            }
            if s.ncols() != t {
                return Err(DataError::Ragged {
                    trajectory: k + 1,
                    expected: t,
                    found: s.ncols(),
                }
                .into());
            }
        }
        let origin = (0..samples.len()).collect();
        Ok(Self {
            role,
            samples,
            origin,
            seed,
        })
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples[0].ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].nrows()
    }

    pub fn sample(&self, k: usize) -> &Mat {
        &self.samples[k]
    }

    /// Sub-dataset of the given positions, keeping provenance.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            role: self.role,
            samples: positions.iter().map(|&i| self.samples[i].clone()).collect(),
            origin: positions.iter().map(|&i| self.origin[i]).collect(),
            seed: self.seed,
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }
}

/// Partition sizes for the fit and calibration subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_fit: usize,
    pub n_cal: usize,
    pub shuffle_seed: u64,
}

/// Fit / calibration partition of one dataset.
#[derive(Debug, Clone)]
pub struct Split {
    pub fit: TrajectoryDataset,
    pub cal: TrajectoryDataset,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws `count` trajectories of `length` i.i.d. `N(mean, covariance)` vectors.
pub fn generate_gaussian(
    role: Role,
    length: usize,
    count: usize,
    covariance: &Mat,
    mean: &Vector,
    seed: u64,
) -> Result<TrajectoryDataset> {
    let dim = mean.len();
    if covariance.shape() != (dim, dim) {
        return Err(dim_err("covariance", format!("{dim}x{dim}"), format!("{:?}", covariance.shape())));
    }
    let factor = psd_factor(covariance)?;
    let mut rng = rng(seed);
    let samples = (0..count)
        .map(|_| gaussian_block(&mut rng, &factor, mean, length))
        .collect();
    TrajectoryDataset::new(role, samples, Some(seed))
}

pub(crate) fn gaussian_block<R: Rng>(rng: &mut R, factor: &Mat, mean: &Vector, length: usize) -> Mat {
    let dim = mean.len();
    let std = DMatrix::from_fn(dim, length, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut out = factor * std;
    for mut col in out.column_iter_mut() {
        col += mean;
    }
    out
}

/// Draws entries uniformly on the box `[-h, h]` per coordinate.
pub fn generate_uniform(
    role: Role,
    length: usize,
    count: usize,
    half_widths: &Vector,
    seed: u64,
) -> Result<TrajectoryDataset> {
    if half_widths.iter().any(|&h| !(h >= 0.0)) {
        return Err(Error::Invalid("half widths must be nonnegative".into()));
    }
    let mut rng = rng(seed);
    let samples = (0..count)
        .map(|_| uniform_block(&mut rng, half_widths, length))
        .collect();
    TrajectoryDataset::new(role, samples, Some(seed))
}

pub(crate) fn uniform_block<R: Rng>(rng: &mut R, half_widths: &Vector, length: usize) -> Mat {
    DMatrix::from_fn(half_widths.len(), length, |i, _| {
        let h = half_widths[i];
        if h == 0.0 {
            0.0
        } else {
            rng.gen_range(-h..=h)
        }
    })
}

/// Shuffles trajectory order with `shuffle_seed` and takes the first
/// `n_fit` for fitting and the next `n_cal` for calibration. The time order
/// inside each trajectory is never touched.
pub fn split(ds: &TrajectoryDataset, spec: &SplitSpec) -> Result<Split> {
    let needed = spec.n_fit + spec.n_cal;
    if needed > ds.count() {
        return Err(DataError::SplitTooLarge {
            needed,
            available: ds.count(),
        }
        .into());
    }
    if spec.n_cal == 0 {
        return Err(Error::Invalid("calibration split must be nonempty".into()));
    }
    if spec.n_cal == 1 {
        log::warn!("calibration set holds a single trajectory");
    }
    let mut order: Vec<usize> = (0..ds.count()).collect();
    order.shuffle(&mut rng(spec.shuffle_seed));
    Ok(Split {
        fit: ds.select(&order[..spec.n_fit]),
        cal: ds.select(&order[spec.n_fit..needed]),
    })
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    DataError::Parse {
        line,
        message: message.into(),
    }
    .into()
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes the dataset. `.json` paths use the structured-text form, anything
/// else the CSV form with a `# role=.. M=.. T=.. n=..` header.
pub fn save_dataset(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    let text = if path.extension().is_some_and(|e| e == "json") {
        crate::io::to_json_string(ds)?
    } else {
        dataset_to_csv(ds)
    };
    crate::io::write_atomic(path, text.as_bytes())
}

pub fn dataset_to_csv(ds: &TrajectoryDataset) -> String {
    let mut out = Vec::new();
    let (m, t, n) = (ds.count(), ds.len(), ds.dim());
    writeln!(out, "# role={} M={m} T={t} n={n}", ds.role).unwrap();
    for (k, s) in ds.samples.iter().enumerate() {
        for (ti, col) in s.column_iter().enumerate() {
            write!(out, "{},{}", k + 1, ti).unwrap();
            for v in col.iter() {
                write!(out, ",{v:.16e}").unwrap();
            }
            out.push(b'\n');
        }
    }
    String::from_utf8(out).expect("ascii")
}

pub fn load_dataset(
    path: &Path,
    expected_dim: Option<usize>,
    expected_length: Option<usize>,
) -> Result<TrajectoryDataset> {
    if !path.exists() {
        return Err(DataError::Missing(path.display().to_string()).into());
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let ds = if path.extension().is_some_and(|e| e == "json") {
        let ds: TrajectoryDataset =
            serde_json::from_str(&text).map_err(|e| parse_err(e.line(), e.to_string()))?;
        TrajectoryDataset::new(ds.role, ds.samples, ds.seed)?
    } else {
        dataset_from_csv(&text)?
    };
    if let Some(n) = expected_dim {
        if ds.dim() != n {
            return Err(DataError::Mismatch {
                what: "n",
                expected: n,
                found: ds.dim(),
            }
            .into());
        }
    }
    if let Some(t) = expected_length {
        if ds.len() < t {
            return Err(DataError::Mismatch {
                what: "T",
                expected: t,
                found: ds.len(),
            }
            .into());
        }
    }
    Ok(ds)
}

fn header_field<T: FromStr>(fields: &[(&str, &str)], key: &str) -> Result<T> {
    let raw = fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| parse_err(1, format!("header lacks {key}=")))?;
    raw.parse()
        .map_err(|_| parse_err(1, format!("bad header value {key}={raw}")))
}

pub fn dataset_from_csv(text: &str) -> Result<TrajectoryDataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let header = header
        .strip_prefix('#')
        .ok_or_else(|| parse_err(1, "missing '#' header line"))?;
    let fields: Vec<(&str, &str)> = header
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .collect();
    let role: Role = header_field::<String>(&fields, "role")?
        .parse()
        .map_err(|e: String| parse_err(1, e))?;
    let m: usize = header_field(&fields, "M")?;
    let t: usize = header_field(&fields, "T")?;
    let n: usize = header_field(&fields, "n")?;
    if m == 0 || t == 0 {
        return Err(DataError::Empty.into());
    }

    let mut samples = vec![Mat::zeros(n, t); m];
    let mut seen = vec![vec![false; t]; m];
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        if parts.len() != n + 2 {
            return Err(DataError::Mismatch {
                what: "n",
                expected: n,
                found: parts.len().saturating_sub(2),
            }
            .into());
        }
        let k: usize = parts[0]
            .parse()
            .map_err(|_| parse_err(lineno, "bad trajectory index"))?;
        let ti: usize = parts[1]
            .parse()
            .map_err(|_| parse_err(lineno, "bad time index"))?;
        if k == 0 || k > m || ti >= t {
            return Err(parse_err(lineno, format!("index ({k},{ti}) out of range")));
        }
        if seen[k - 1][ti] {
            return Err(parse_err(lineno, format!("duplicate row ({k},{ti})")));
        }
        seen[k - 1][ti] = true;
        for (i, raw) in parts[2..].iter().enumerate() {
            samples[k - 1][(i, ti)] = raw
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad number '{raw}'")))?;
        }
    }
    for (k, row) in seen.iter().enumerate() {
        let found = row.iter().filter(|&&s| s).count();
        if found != t {
            return Err(DataError::Ragged {
                trajectory: k + 1,
                expected: t,
                found,
            }
            .into());
        }
    }
    TrajectoryDataset::new(role, samples, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{mat, vector};
    use proptest::prelude::*;

    #[test]
    fn degenerate_gaussian_equals_mean() {
        let mean = vector(&[0.5, -1.5]);
        let ds = generate_gaussian(Role::Disturbance, 7, 3, &Mat::zeros(2, 2), &mean, 1).unwrap();
        for s in &ds.samples {
            for col in s.column_iter() {
                assert_eq!(col, mean);
            }
        }
    }

    #[test]
    fn gaussian_moments_converge() {
        let ds = generate_gaussian(
            Role::Disturbance,
            100,
            1000,
            &Mat::identity(2, 2),
            &vector(&[0.0, 0.0]),
            42,
        )
        .unwrap();
        let n = (ds.count() * ds.len()) as f64;
        let mut mean = Vector::zeros(2);
        let mut second = Mat::zeros(2, 2);
        for s in &ds.samples {
            for col in s.column_iter() {
                mean += col;
                second += col * col.transpose();
            }
        }
        mean /= n;
        let cov = second / n - &mean * mean.transpose();
        assert!(mean.amax() < 0.02, "{mean}");
        assert!((cov - Mat::identity(2, 2)).amax() < 0.05);
    }

    #[test]
    fn non_psd_covariance_rejected() {
        let cov = mat(&[&[1.0, 2.0], &[2.0, 1.0]]);
        let r = generate_gaussian(Role::Disturbance, 2, 2, &cov, &vector(&[0.0, 0.0]), 0);
        assert!(matches!(r, Err(Error::NotPsd { .. })));
    }

    #[test]
    fn generators_are_deterministic() {
        let cov = mat(&[&[2.0, 0.3], &[0.3, 1.0]]);
        let a = generate_gaussian(Role::Noise, 5, 4, &cov, &vector(&[0.0, 1.0]), 9).unwrap();
        let b = generate_gaussian(Role::Noise, 5, 4, &cov, &vector(&[0.0, 1.0]), 9).unwrap();
        assert_eq!(a, b);
        let h = vector(&[1.0, 0.2]);
        assert_eq!(
            generate_uniform(Role::Noise, 5, 4, &h, 3).unwrap(),
            generate_uniform(Role::Noise, 5, 4, &h, 3).unwrap()
        );
    }

    #[test]
    fn uniform_examples() {
        let zero = generate_uniform(Role::Disturbance, 4, 2, &vector(&[0.0, 0.0]), 1).unwrap();
        assert!(zero.samples.iter().all(|s| s.amax() == 0.0));

        let ds = generate_uniform(Role::Disturbance, 1000, 100, &vector(&[1.0]), 5).unwrap();
        let vals: Vec<f64> = ds.samples.iter().flat_map(|s| s.iter().copied()).collect();
        assert!(vals.iter().all(|v| v.abs() <= 1.0));
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0 / 3.0).abs() < 0.01, "{var}");

        assert!(generate_uniform(Role::Disturbance, 1, 1, &vector(&[-0.1]), 1).is_err());
    }

    fn small(m: usize) -> TrajectoryDataset {
        let samples = (0..m)
            .map(|k| Mat::from_fn(1, 3, |_, t| (10 * k + t) as f64))
            .collect();
        TrajectoryDataset::new(Role::Error, samples, None).unwrap()
    }

    #[test]
    fn split_examples() {
        let ds = small(750);
        let spec = SplitSpec { n_fit: 250, n_cal: 500, shuffle_seed: 3 };
        let s = split(&ds, &spec).unwrap();
        assert_eq!((s.fit.count(), s.cal.count()), (250, 500));
        let mut all: Vec<usize> = s.fit.origin.iter().chain(&s.cal.origin).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 750);
        // content retained
        for (pos, &o) in s.cal.origin.iter().enumerate() {
            assert_eq!(s.cal.samples[pos], ds.samples[o]);
        }

        let again = split(&ds, &spec).unwrap();
        assert_eq!(again.fit.origin, s.fit.origin);
        assert_eq!(again.cal.origin, s.cal.origin);

        let edge = split(&small(10), &SplitSpec { n_fit: 9, n_cal: 1, shuffle_seed: 0 }).unwrap();
        assert_eq!(edge.cal.count(), 1);

        assert!(matches!(
            split(&small(10), &SplitSpec { n_fit: 9, n_cal: 2, shuffle_seed: 0 }),
            Err(Error::Data(DataError::SplitTooLarge { .. }))
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = generate_gaussian(
            Role::Disturbance,
            6,
            4,
            &mat(&[&[1e-3, 2e-4], &[2e-4, 3e-3]]),
            &vector(&[0.0, 0.0]),
            77,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        for name in ["w.csv", "w.json"] {
            let path = dir.path().join(name);
            save_dataset(&ds, &path).unwrap();
            let back = load_dataset(&path, Some(2), Some(6)).unwrap();
            assert_eq!(back.samples, ds.samples);
            assert_eq!(back.role, ds.role);
        }
    }

    #[test]
    fn csv_validation_errors() {
        let ragged = "# role=noise M=2 T=2 n=1\n1,0,1.0\n1,1,2.0\n2,0,3.0\n";
        assert!(matches!(
            dataset_from_csv(ragged),
            Err(Error::Data(DataError::Ragged { trajectory: 2, found: 1, .. }))
        ));
        assert!(matches!(
            dataset_from_csv(""),
            Err(Error::Data(DataError::Parse { .. }))
        ));
        let wrong_dim = "# role=noise M=1 T=1 n=2\n1,0,1.0\n";
        assert!(matches!(
            dataset_from_csv(wrong_dim),
            Err(Error::Data(DataError::Mismatch { .. }))
        ));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        std::fs::write(&path, "# role=noise M=1 T=1 n=1\n1,0,1.0\n").unwrap();
        assert!(matches!(
            load_dataset(&path, Some(2), None),
            Err(Error::Data(DataError::Mismatch { what: "n", .. }))
        ));
        assert!(matches!(
            load_dataset(&dir.path().join("missing.csv"), None, None),
            Err(Error::Data(DataError::Missing(_)))
        ));
    }

    proptest! {
        #[test]
        fn split_preserves_trajectories(m in 2usize..60, seed in 0u64..1000, frac in 0.0..1.0f64) {
            let ds = small(m);
            let n_fit = ((m - 1) as f64 * frac) as usize;
            let n_cal = m - n_fit;
            let s = split(&ds, &SplitSpec { n_fit, n_cal, shuffle_seed: seed }).unwrap();
            let mut origins: Vec<usize> = s.fit.origin.iter().chain(&s.cal.origin).copied().collect();
            origins.sort_unstable();
            prop_assert_eq!(origins, (0..m).collect::<Vec<_>>());
            for part in [&s.fit, &s.cal] {
                for (pos, &o) in part.origin.iter().enumerate() {
                    prop_assert_eq!(&part.samples[pos], &ds.samples[o]);
                }
            }
        }
    }
}
