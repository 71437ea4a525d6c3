//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use aggdiff::autodiff::Matrix;
use aggdiff::data::{self, AggregateSeries};
use aggdiff::experiment::{self, EvalRecord, Method as EvalMethod, Task as EvalTask};
use aggdiff::infer::{self, InferenceHead};
use aggdiff::learn::{self, ObservationModel, TrainReport};
use aggdiff::nn::Checkpoint;
use aggdiff::ot;
use aggdiff::rng::Rng;
use aggdiff::sde::DiffusionModel;

use crate::config::{DataSource, Method, RunConfig, Task};
use crate::plot::{self, Layer};
use crate::CliError;

const DEFAULT_SAMPLES: usize = 500;
const DEFAULT_BINS: usize = 40;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir()?;
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write_samples(path: &Path, batch: &Matrix) -> Result<(), CliError> {
    data::write_samples_csv(batch, create(path)?)?;
    Ok(())
}

fn write_report(path: &Path, report: &TrainReport) -> Result<(), CliError> {
    let mut w = create(path)?;
    report.write_csv(&mut w).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// The observation series named by the data source.
fn load_series(cfg: &RunConfig) -> Result<AggregateSeries, CliError> {
    match cfg.data_source()? {
        DataSource::Csv(path) => Ok(data::load_csv(&path)?),
        DataSource::Synthetic(spec) => Ok(data::gen_synthetic(&spec, cfg.seed()?)?.observed),
    }
}

fn dataset_name(cfg: &RunConfig) -> String {
    cfg.get("dataset")
        .or(cfg.get("process"))
        .map(str::to_string)
        .or_else(|| {
            cfg.path("data")
                .and_then(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        })
        .unwrap_or_else(|| "data".into())
}

fn require_k(cfg: &RunConfig) -> Result<usize, CliError> {
    cfg.opt_usize("k")?.ok_or_else(|| usage("this task needs k"))
}

/// Bags visible to a filtering run: those before `k` when set, else all.
/// Returns the visible series and the target time.
fn filtering_view(cfg: &RunConfig, series: &AggregateSeries) -> Result<(AggregateSeries, usize), CliError> {
    match cfg.opt_usize("k")? {
        Some(k) => Ok((experiment::filtering_split(series, k)?, k)),
        None => Ok((series.clone(), series.last_time() + 1)),
    }
}

fn smoothing_view(cfg: &RunConfig, series: &AggregateSeries) -> Result<(AggregateSeries, usize), CliError> {
    let k = require_k(cfg)?;
    Ok((experiment::smoothing_split(series, k)?, k))
}

/// Reads a batch in sample format, or one time of a series-format file.
pub fn read_batch(path: &Path, time: Option<usize>) -> Result<Matrix, CliError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut first = String::new();
    BufReader::new(file).read_line(&mut first).map_err(|e| io_err(path, e))?;
    if first.trim_start().starts_with("sample") {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        return Ok(data::read_samples_csv(file)?);
    }
    let series = data::load_csv(path)?;
    let t = match (time, series.len()) {
        (Some(t), _) => t,
        (None, 1) => series.first_time(),
        (None, _) => return Err(usage(format!("{} holds several times; pass k", path.display()))),
    };
    Ok(series.get(t)?.clone())
}

/// Subsamples the larger batch to the size of the smaller.
fn equalize(a: Matrix, b: Matrix, seed: u64) -> Result<(Matrix, Matrix), CliError> {
    let n = a.nrows().min(b.nrows());
    let cut = |m: Matrix, component: u64| -> Result<Matrix, CliError> {
        if m.nrows() == n {
            return Ok(m);
        }
        let series = AggregateSeries::new(vec![0], vec![m], "batch")?;
        let rng = Rng::new(seed).child(component);
        Ok(data::empirical_batch(&series, 0, n, &rng)?)
    };
    Ok((cut(a, 0)?, cut(b, 1)?))
}

fn read_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let path = cfg.path("checkpoint").ok_or_else(|| usage("missing checkpoint (set checkpoint or --checkpoint)"))?;
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    Ok(Checkpoint::from_text(&text)?)
}

fn checkpoint_method(ckpt: &Checkpoint) -> Result<Method, CliError> {
    let mut probe = RunConfig::default();
    probe.set("method", ckpt.meta("method").unwrap_or("legend"))?;
    probe.method()
}

fn emit_plots(dir: &Path, pred: &Matrix, truth: Option<&Matrix>, bins: usize, dims: Option<&[usize]>) -> Result<(), CliError> {
    let mut layers = Vec::new();
    if let Some(t) = truth {
        layers.push(Layer::truth(t));
    }
    layers.push(Layer::predicted(pred));
    write_plots(dir, &layers, bins, dims)
}

fn write_plots(dir: &Path, layers: &[Layer], bins: usize, dims: Option<&[usize]>) -> Result<(), CliError> {
    let dim = layers[0].batch.ncols();
    if layers.iter().any(|l| l.batch.ncols() != dim) {
        return Err(usage("plotted batches differ in dimension"));
    }
    if bins == 0 {
        return Err(usage("bins must be positive"));
    }
    let scatter_dims: Vec<usize> = match dims {
        Some(d) if d.len() == 2 && d.iter().all(|&j| j < dim) => d.to_vec(),
        Some(d) => return Err(usage(format!("--dims needs two columns below {dim}, got {d:?}"))),
        None if dim <= 2 => (0..dim).collect(),
        None => return Err(usage(format!("data has {dim} dimensions; pick two with --dims i,j"))),
    };
    write_text(&dir.join("scatter.svg"), &plot::scatter(layers, &scatter_dims, "true and predicted samples"))?;
    for j in 0..dim {
        write_text(
            &dir.join(format!("hist_dim{j}.svg")),
            &plot::histogram(layers, j, bins, &format!("dimension {j}")),
        )?;
    }
    Ok(())
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.synthetic_spec()?.ok_or_else(|| usage("generate needs a dataset (syn1, syn2 or syn3)"))?;
    let dir = out_dir(cfg)?;
    let generated = data::gen_synthetic(&spec, cfg.seed()?)?;
    data::save_csv(&generated.observed, &dir.join("observed.csv"))?;
    if let Some(held) = &generated.held_out {
        data::save_csv(held, &dir.join("truth.csv"))?;
    }
    cfg.echo(&dir)?;
    let held_counts = generated.held_out.as_ref().map(|h| h.counts());
    for (i, (t, n)) in generated.observed.times().iter().zip(generated.observed.counts()).enumerate() {
        let held = held_counts.as_ref().map_or(0, |c| c[i]);
        println!("t={t} observed={n} held_out={held}");
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    cfg.echo(&dir)?;
    let series = load_series(cfg)?;
    let series = match cfg.task()? {
        Task::Fit => series,
        Task::Filter => filtering_view(cfg, &series)?.0,
        Task::Smooth => smoothing_view(cfg, &series)?.0,
    };
    let tc = cfg.train_config()?;
    let mut ckpt = Checkpoint::new();
    let report = match cfg.method()? {
        Method::Legend => {
            let (model, _, report) = learn::train_dynamics(&series, &tc)?;
            model.write_checkpoint(&mut ckpt);
            ckpt.set_meta("method", "legend");
            report
        }
        Method::Baseline(kind) => {
            let (model, report) = learn::train_baseline(&series, kind, &tc)?;
            model.write_checkpoint(&mut ckpt);
            ckpt.set_meta("method", kind.name().to_ascii_lowercase());
            report
        }
    };
    ckpt.set_meta("seed", tc.seed);
    ckpt.set_meta("times", join(series.times()));
    write_text(&dir.join("checkpoint.txt"), &ckpt.to_text())?;
    write_report(&dir.join("report.csv"), &report)?;
    println!("trained on times {} for {} iterations", join(series.times()), report.iterations());
    for (t, w) in series.times().iter().zip(&report.final_w1) {
        println!("t={t} fit_w1={w:.4}");
    }
    println!("wall_time={:.1}s", report.wall_time);
    Ok(())
}

fn join(times: &[usize]) -> String {
    times.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

struct Prediction {
    batch: Matrix,
    method: EvalMethod,
}

/// Writes the prediction, scores it against `truth` when given, and plots.
fn finish(cfg: &RunConfig, dir: &Path, task: EvalTask, k: usize, pred: Prediction, started: Instant) -> Result<(), CliError> {
    write_samples(&dir.join("prediction.csv"), &pred.batch)?;
    let truth = cfg.path("truth").map(|p| read_batch(&p, Some(k))).transpose()?;
    if let Some(truth) = &truth {
        let (a, b) = if pred.batch.nrows() == truth.nrows() {
            (pred.batch.clone(), truth.clone())
        } else if cfg.bool_or("subsample", false)? {
            equalize(pred.batch.clone(), truth.clone(), cfg.seed()?)?
        } else {
            return Err(usage(format!(
                "prediction has {} samples, truth {}; set samples or subsample=true",
                pred.batch.nrows(),
                truth.nrows()
            )));
        };
        let record = EvalRecord {
            dataset: dataset_name(cfg),
            task,
            dim: pred.batch.ncols(),
            method: pred.method,
            target: k,
            error: ot::w1_exact(&a, &b)?.0,
            seed: cfg.seed()?,
            wall_time: started.elapsed().as_secs_f64(),
        };
        write_text(&dir.join("eval.csv"), &format!("{}\n{}\n", EvalRecord::CSV_HEADER, record.csv_row()))?;
        println!("{} {} target={k} w1={:.4}", record.method, task, record.error);
    }
    if cfg.bool_or("plots", false)? {
        emit_plots(dir, &pred.batch, truth.as_ref(), cfg.usize_or("bins", DEFAULT_BINS)?, None)?;
    }
    println!("wall_time={:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn sample_count(cfg: &RunConfig, k: usize) -> Result<usize, CliError> {
    if let Some(n) = cfg.opt_usize("samples")? {
        return Ok(n);
    }
    match cfg.path("truth") {
        Some(p) => Ok(read_batch(&p, Some(k))?.nrows()),
        None => Ok(DEFAULT_SAMPLES),
    }
}

fn baseline(ckpt: &Checkpoint, series: &AggregateSeries, k: usize, samples: usize, seed: u64) -> Result<Prediction, CliError> {
    let model = ObservationModel::from_checkpoint(ckpt)?;
    let from = series
        .times()
        .iter()
        .rev()
        .find(|&&t| t < k)
        .copied()
        .ok_or_else(|| usage(format!("no observed bag before {k}")))?;
    let batch = experiment::baseline_prediction(&model, series, from, k - from, samples, &Rng::new(seed).child(40))?;
    Ok(Prediction {
        batch,
        method: model.kind().into(),
    })
}

pub fn filter(cfg: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let dir = out_dir(cfg)?;
    cfg.echo(&dir)?;
    let (series, k) = filtering_view(cfg, &load_series(cfg)?)?;
    let ckpt = read_checkpoint(cfg)?;
    let samples = sample_count(cfg, k)?;
    let seed = cfg.seed()?;
    let pred = match checkpoint_method(&ckpt)? {
        Method::Legend => {
            if k != series.last_time() + 1 {
                return Err(usage(format!("filtering predicts one step ahead; last observed time is {}", series.last_time())));
            }
            let model = DiffusionModel::from_checkpoint(&ckpt)?;
            let (head, report) = infer::train_filter(&model, &series, &cfg.head_config()?)?;
            let mut heads = Checkpoint::new();
            head.write_checkpoint(&mut heads, "forward");
            write_text(&dir.join("heads.txt"), &heads.to_text())?;
            write_report(&dir.join("head_report.csv"), &report)?;
            let batch = infer::predict_next(&model, &head, &series, samples, &Rng::new(seed).child(41))?;
            Prediction {
                batch,
                method: EvalMethod::Legend,
            }
        }
        Method::Baseline(_) => baseline(&ckpt, &series, k, samples, seed)?,
    };
    finish(cfg, &dir, EvalTask::Filter, k, pred, started)
}

pub fn smooth(cfg: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let dir = out_dir(cfg)?;
    cfg.echo(&dir)?;
    let (series, k) = smoothing_view(cfg, &load_series(cfg)?)?;
    let ckpt = read_checkpoint(cfg)?;
    let samples = sample_count(cfg, k)?;
    let seed = cfg.seed()?;
    let pred = match checkpoint_method(&ckpt)? {
        Method::Legend => {
            let model = DiffusionModel::from_checkpoint(&ckpt)?;
            let hc = cfg.head_config()?;
            let (fwd, _) = infer::train_filter(&model, &series, &hc)?;
            let (bwd, _) = infer::train_backward(&model, &series, &hc)?;
            let (smoother, report) = infer::train_smoother(&model, &series, &fwd, &bwd, &hc)?;
            let mut heads = Checkpoint::new();
            for (head, prefix) in [(&fwd, "forward"), (&bwd, "backward"), (&smoother, "smoothing")] {
                head.write_checkpoint(&mut heads, prefix);
            }
            write_text(&dir.join("heads.txt"), &heads.to_text())?;
            write_report(&dir.join("head_report.csv"), &report)?;
            write_weights(&dir.join("weights.csv"), &smoother)?;
            let batch = infer::predict_missing(&model, &smoother, &series, k, samples, &Rng::new(seed).child(42))?;
            Prediction {
                batch,
                method: EvalMethod::Legend,
            }
        }
        Method::Baseline(_) => baseline(&ckpt, &series, k, samples, seed)?,
    };
    finish(cfg, &dir, EvalTask::Smooth, k, pred, started)
}

/// Barycenter weights of the smoother, on time relative to its first bag.
fn write_weights(path: &Path, head: &InferenceHead) -> Result<(), CliError> {
    let (first, last) = (head.times[0], *head.times.last().expect("heads span at least one time"));
    let mut text = String::from("t,lambda1,lambda2\n");
    for &t in &head.times {
        let w = infer::barycenter_weights(t - first, (last - first).max(1))?;
        println!("t={t} lambda1={:.4} lambda2={:.4}", w.lambda1, w.lambda2);
        text.push_str(&format!("{t},{},{}\n", w.lambda1, w.lambda2));
    }
    write_text(path, &text)
}

pub fn eval(pred: &Path, truth: &Path, k: Option<usize>, subsample: bool, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let a = read_batch(pred, k)?;
    let b = read_batch(truth, k)?;
    let (a, b) = if a.nrows() == b.nrows() {
        (a, b)
    } else if subsample {
        equalize(a, b, seed)?
    } else {
        return Err(usage(format!(
            "batch sizes differ ({} vs {}); pass --subsample",
            a.nrows(),
            b.nrows()
        )));
    };
    let w1 = ot::w1_exact(&a, &b)?.0;
    println!("w1={w1}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_text(&dir.join("eval.csv"), &format!("samples,w1\n{},{w1}\n", a.nrows()))?;
    }
    Ok(())
}

pub fn plot(
    pred: Option<&Path>,
    truth: Option<&Path>,
    k: Option<usize>,
    out: &Path,
    bins: usize,
    dims: Option<&[usize]>,
) -> Result<(), CliError> {
    let truth = truth.map(|p| read_batch(p, k)).transpose()?;
    let pred = pred.map(|p| read_batch(p, k)).transpose()?;
    let mut layers = Vec::new();
    if let Some(t) = &truth {
        layers.push(Layer::truth(t));
    }
    if let Some(p) = &pred {
        layers.push(Layer::predicted(p));
    }
    if layers.is_empty() {
        return Err(usage("plot needs --pred, --truth or both"));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_plots(out, &layers, bins, dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn equalize_cuts_the_larger_batch() {
        let a = array![[0.0], [1.0], [2.0]];
        let b = array![[5.0]];
        let (a2, b2) = equalize(a.clone(), b.clone(), 0).unwrap();
        assert_eq!((a2.nrows(), b2), (1, b));
        assert!(a.rows().into_iter().any(|r| r == a2.row(0)));
    }

    #[test]
    fn read_batch_accepts_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let series = AggregateSeries::new(vec![0, 1], vec![array![[1.0]], array![[2.0], [3.0]]], "s").unwrap();
        let sp = dir.path().join("s.csv");
        data::save_csv(&series, &sp).unwrap();
        assert_eq!(read_batch(&sp, Some(1)).unwrap(), array![[2.0], [3.0]]);
        assert!(read_batch(&sp, None).is_err());
        let bp = dir.path().join("b.csv");
        write_samples(&bp, &array![[4.0]]).unwrap();
        assert_eq!(read_batch(&bp, None).unwrap(), array![[4.0]]);
    }
}
