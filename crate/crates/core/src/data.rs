//! Aggregate series: one bag of observation samples per time index, with no
//! identity links between bags. Synthetic generators, subsampling and CSV
//! ingestion.
//!
//! CSV layout, one sample per row:
//!
//! ```text
//! t,dim_0,dim_1
//! 0,0.125,-0.5
//! 0,0.25,0.75
//! 1,...
//! ```

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Matrix;
use crate::rng::Rng;
use crate::sde::{self, psd_sqrt, FnDrift, InitialSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("invalid series: {0}")]
    Invalid(String),
    #[error("time {0} is not in the series")]
    UnknownTime(usize),
    #[error("requested {requested} samples but time {time} has only {available}")]
    CountTooLarge {
        time: usize,
        requested: usize,
        available: usize,
    },
    #[error("unknown synthetic dataset {0:?} (expected syn1, syn2 or syn3)")]
    UnknownDataset(String),
    #[error(transparent)]
    Sde(#[from] sde::SdeError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Per-time bags of samples in `R^m`. Times are strictly increasing
/// observation indices; a skipped index is a gap.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSeries {
    times: Vec<usize>,
    batches: Vec<Matrix>,
    pub source: String,
}

impl AggregateSeries {
    pub fn new(times: Vec<usize>, batches: Vec<Matrix>, source: impl Into<String>) -> Result<Self> {
        if times.is_empty() || times.len() != batches.len() {
            return Err(DataError::Invalid(format!(
                "{} times for {} batches",
                times.len(),
                batches.len()
            )));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::Invalid("times must be strictly increasing".into()));
        }
        let dim = batches[0].ncols();
        if dim == 0 {
            return Err(DataError::Invalid("zero-dimensional samples".into()));
        }
        for (t, b) in times.iter().zip(&batches) {
            if b.ncols() != dim {
                return Err(DataError::Invalid(format!(
                    "time {t} has dimension {}, expected {dim}",
                    b.ncols()
                )));
            }
            if b.nrows() == 0 {
                return Err(DataError::Invalid(format!("time {t} has no samples")));
            }
        }
        Ok(Self {
            times,
            batches,
            source: source.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.batches[0].ncols()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }

    pub fn batches(&self) -> &[Matrix] {
        &self.batches
    }

    pub fn first_time(&self) -> usize {
        self.times[0]
    }

    pub fn last_time(&self) -> usize {
        *self.times.last().expect("nonempty series")
    }

    pub fn counts(&self) -> Vec<usize> {
        self.batches.iter().map(Matrix::nrows).collect()
    }

    pub fn get(&self, time: usize) -> Result<&Matrix> {
        self.position(time)
            .map(|i| &self.batches[i])
            .ok_or(DataError::UnknownTime(time))
    }

    pub fn position(&self, time: usize) -> Option<usize> {
        self.times.iter().position(|&t| t == time)
    }

    pub fn contains(&self, time: usize) -> bool {
        self.position(time).is_some()
    }

    /// Indices between the first and last time that have no bag.
    pub fn gaps(&self) -> Vec<usize> {
        (self.first_time()..=self.last_time())
            .filter(|t| !self.contains(*t))
            .collect()
    }

    /// The series with `time` removed.
    pub fn without(&self, time: usize) -> Result<Self> {
        let i = self.position(time).ok_or(DataError::UnknownTime(time))?;
        let mut times = self.times.clone();
        let mut batches = self.batches.clone();
        times.remove(i);
        batches.remove(i);
        Self::new(times, batches, self.source.clone())
    }

    /// The bags at times `<= last`.
    pub fn prefix(&self, last: usize) -> Result<Self> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.times[i] <= last).collect();
        Self::new(
            keep.iter().map(|&i| self.times[i]).collect(),
            keep.iter().map(|&i| self.batches[i].clone()).collect(),
            self.source.clone(),
        )
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| DataError::Csv {
            line: 0,
            message: e.to_string(),
        };
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim()).map(|j| format!("dim_{j}")));
        w.write_record(&header).map_err(io)?;
        for (t, b) in self.times.iter().zip(&self.batches) {
            for row in b.rows() {
                let mut rec = vec![t.to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(io)?;
            }
        }
        w.flush().map_err(|e| DataError::Csv {
            line: 0,
            message: e.to_string(),
        })?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, source: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(input);
        let mut records = reader.records();
        let header = match records.next() {
            Some(Ok(h)) => h,
            Some(Err(e)) => return Err(csv_error(&e, 1)),
            None => {
                return Err(DataError::Csv {
                    line: 1,
                    message: "missing header".into(),
                })
            }
        };
        let dim = header.len().saturating_sub(1);
        let header_ok = dim > 0
            && header.get(0).map(str::trim) == Some("t")
            && (0..dim).all(|j| header.get(j + 1).map(str::trim) == Some(format!("dim_{j}").as_str()));
        if !header_ok {
            return Err(DataError::Csv {
                line: 1,
                message: "expected header t,dim_0,...,dim_{m-1}".into(),
            });
        }
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for rec in records {
            let rec = rec.map_err(|e| csv_error(&e, 0))?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() == 1 && rec.get(0).is_some_and(|c| c.trim().is_empty()) {
                continue;
            }
            if rec.len() != dim + 1 {
                return Err(DataError::Csv {
                    line,
                    message: format!("expected {} columns, found {}", dim + 1, rec.len()),
                });
            }
            let t: usize = rec[0].trim().parse().map_err(|_| DataError::Csv {
                line,
                message: format!("time index {:?} is not a non-negative integer", &rec[0]),
            })?;
            let mut values = Vec::with_capacity(dim);
            for cell in rec.iter().skip(1) {
                let v: f64 = cell.trim().parse().map_err(|_| DataError::Csv {
                    line,
                    message: format!("{cell:?} is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(DataError::Csv {
                        line,
                        message: format!("{cell:?} is not finite"),
                    });
                }
                values.push(v);
            }
            rows.push((t, values));
        }
        // Stable sort keeps the within-time order of the file.
        rows.sort_by_key(|(t, _)| *t);
        let mut times = Vec::new();
        let mut batches = Vec::new();
        let mut i = 0;
        while i < rows.len() {
            let t = rows[i].0;
            let j = rows[i..].iter().position(|(u, _)| *u != t).map_or(rows.len(), |k| i + k);
            let flat: Vec<f64> = rows[i..j].iter().flat_map(|(_, v)| v.iter().copied()).collect();
            times.push(t);
            batches.push(Matrix::from_shape_vec((j - i, dim), flat).expect("rows checked"));
            i = j;
        }
        if times.is_empty() {
            return Err(DataError::Invalid("no data rows".into()));
        }
        Self::new(times, batches, source)
    }
}

fn csv_error(e: &csv::Error, fallback: u64) -> DataError {
    DataError::Csv {
        line: e.position().map_or(fallback, |p| p.line()),
        message: e.to_string(),
    }
}

/// A sample batch as `sample,dim_0,...,dim_{m-1}` rows.
pub fn write_samples_csv<W: Write>(batch: &Matrix, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| DataError::Csv {
        line: 0,
        message: e.to_string(),
    };
    let mut header = vec!["sample".to_string()];
    header.extend((0..batch.ncols()).map(|j| format!("dim_{j}")));
    w.write_record(&header).map_err(io)?;
    for (i, row) in batch.rows().into_iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| DataError::Csv {
        line: 0,
        message: e.to_string(),
    })?;
    Ok(())
}

/// Reads a batch written by [`write_samples_csv`]; rows keep file order.
pub fn read_samples_csv<R: Read>(input: R) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(csv_error(&e, 1)),
        None => {
            return Err(DataError::Csv {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let dim = header.len().saturating_sub(1);
    if dim == 0 || header.get(0).map(str::trim) != Some("sample") {
        return Err(DataError::Csv {
            line: 1,
            message: "expected header sample,dim_0,...".into(),
        });
    }
    let mut flat = Vec::new();
    let mut rows = 0;
    for rec in records {
        let rec = rec.map_err(|e| csv_error(&e, 0))?;
        let line = rec.position().map_or(0, |p| p.line());
        for cell in rec.iter().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| DataError::Csv {
                line,
                message: format!("{cell:?} is not a number"),
            })?;
            flat.push(v);
        }
        rows += 1;
    }
    Ok(Matrix::from_shape_vec((rows, dim), flat).expect("csv enforces equal row lengths"))
}

pub fn save_csv(series: &AggregateSeries, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    series.write_csv(BufWriter::new(file))
}

pub fn load_csv(path: &Path) -> Result<AggregateSeries> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    AggregateSeries::read_csv(file, &path.display().to_string())
}

/// Uniform without-replacement subsample of `count` rows per time.
pub fn subsample(series: &AggregateSeries, count: usize, seed: u64) -> Result<AggregateSeries> {
    let rng = Rng::new(seed);
    let mut batches = Vec::with_capacity(series.len());
    for (&t, b) in series.times.iter().zip(&series.batches) {
        batches.push(draw_rows(b, t, count, &rng.child(t as u64))?);
    }
    AggregateSeries::new(series.times.clone(), batches, series.source.clone())
}

/// A minibatch drawn without replacement from the bag at `time`.
pub fn empirical_batch(series: &AggregateSeries, time: usize, batch_size: usize, rng: &Rng) -> Result<Matrix> {
    draw_rows(series.get(time)?, time, batch_size, rng)
}

fn draw_rows(bag: &Matrix, time: usize, count: usize, rng: &Rng) -> Result<Matrix> {
    if count > bag.nrows() {
        return Err(DataError::CountTooLarge {
            time,
            requested: count,
            available: bag.nrows(),
        });
    }
    let idx = rng.stream().sample_indices(bag.nrows(), count);
    Ok(bag.select(ndarray::Axis(0), &idx))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Syn1,
    Syn2,
    Syn3,
}

impl SyntheticKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "syn1" => Ok(SyntheticKind::Syn1),
            "syn2" => Ok(SyntheticKind::Syn2),
            "syn3" => Ok(SyntheticKind::Syn3),
            other => Err(DataError::UnknownDataset(other.to_string())),
        }
    }

    pub fn drift(self, x: f64) -> f64 {
        match self {
            SyntheticKind::Syn1 => 0.25 * x,
            SyntheticKind::Syn2 => 0.1 * x * x + 0.5 * x,
            SyntheticKind::Syn3 => 0.5 * x + x.abs(),
        }
    }

    /// Observation map; the log in syn3 is regularized at zero.
    pub fn observe(self, x: f64) -> f64 {
        match self {
            SyntheticKind::Syn1 => 2.0 * x,
            SyntheticKind::Syn2 => x.exp(),
            SyntheticKind::Syn3 => (x.abs() + LOG_EPS).ln(),
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::Syn1 => "syn1",
            SyntheticKind::Syn2 => "syn2",
            SyntheticKind::Syn3 => "syn3",
        })
    }
}

pub const LOG_EPS: f64 = 1e-8;

/// `diag` on the diagonal and `off` everywhere else.
pub fn equicorrelated(dim: usize, diag: f64, off: f64) -> Matrix {
    Matrix::from_shape_fn((dim, dim), |(i, j)| if i == j { diag } else { off })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub dim: usize,
    pub generated: usize,
    pub observed: usize,
    pub dt: f64,
    pub substeps: usize,
    /// Last observation index; times run `0..=horizon`.
    pub horizon: usize,
    /// Drop the Euler noise (debugging and closed-form checks).
    pub noise_free: bool,
}

impl SyntheticSpec {
    pub fn new(kind: SyntheticKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            generated: 1000,
            observed: 500,
            dt: 0.2,
            substeps: 5,
            horizon: 3,
            noise_free: false,
        }
    }

    /// Per-step Euler noise covariance Σ0.
    pub fn step_covariance(&self) -> Matrix {
        equicorrelated(self.dim, 0.0025, 0.002)
    }

    pub fn initial(&self) -> Result<InitialSpec> {
        let mean = vec![0.0; self.dim];
        Ok(match self.kind {
            SyntheticKind::Syn1 => InitialSpec::Normal {
                mean,
                cov_root: psd_sqrt(&equicorrelated(self.dim, 0.04, 0.032))?,
            },
            SyntheticKind::Syn2 => InitialSpec::Normal {
                mean,
                cov_root: psd_sqrt(&equicorrelated(self.dim, 0.01, 0.008))?,
            },
            SyntheticKind::Syn3 => InitialSpec::Uniform {
                dim: self.dim,
                lo: -2.0,
                hi: 2.0,
            },
        })
    }

    /// Noise root in the model's convention `Σ^{1/2} ξ √dt`, chosen so one
    /// Euler step adds exactly `N(0, Σ0)`.
    pub fn model_sigma_root(&self) -> Result<Matrix> {
        Ok(psd_sqrt(&self.step_covariance())? / self.dt.sqrt())
    }
}

/// Output of [`gen_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// The retained observation bags.
    pub observed: AggregateSeries,
    /// Observations of the generated samples that were not retained, if any.
    pub held_out: Option<AggregateSeries>,
    /// Hidden states of all generated samples, for diagnostics only.
    pub hidden: AggregateSeries,
}

pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    if spec.observed > spec.generated || spec.observed == 0 || spec.dim == 0 {
        return Err(DataError::Invalid(format!(
            "cannot keep {} of {} samples in dimension {}",
            spec.observed, spec.generated, spec.dim
        )));
    }
    let rng = Rng::new(seed);
    let x0 = sde::sample_initial(&spec.initial()?, spec.generated, &rng.child(0))?;
    let kind = spec.kind;
    let drift = FnDrift::elementwise(spec.dim, move |v| kind.drift(v));
    let root = if spec.noise_free {
        Matrix::zeros((spec.dim, spec.dim))
    } else {
        spec.model_sigma_root()?
    };
    let hidden = sde::simulate_drift(&drift, &root, spec.dt, spec.substeps, &x0, spec.horizon, &rng.child(1))?;
    let times: Vec<usize> = (0..=spec.horizon).collect();
    let mut observed = Vec::new();
    let mut held_out = Vec::new();
    for (t, x) in hidden.iter().enumerate() {
        let y = x.mapv(|v| kind.observe(v));
        let mut order = rng.derive(&[2, t as u64]).stream().sample_indices(spec.generated, spec.generated);
        let rest = order.split_off(spec.observed);
        observed.push(y.select(ndarray::Axis(0), &order));
        if !rest.is_empty() {
            held_out.push(y.select(ndarray::Axis(0), &rest));
        }
    }
    let name = format!("{}-d{}", spec.kind, spec.dim);
    let held_out = if held_out.len() == times.len() {
        Some(AggregateSeries::new(times.clone(), held_out, format!("{name}-held-out"))?)
    } else {
        None
    };
    Ok(SyntheticData {
        observed: AggregateSeries::new(times.clone(), observed, name.clone())?,
        held_out,
        hidden: AggregateSeries::new(times, hidden, format!("{name}-hidden"))?,
    })
}
