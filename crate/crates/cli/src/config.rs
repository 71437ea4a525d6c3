//! Flat `key=value` run configuration. Files and flags feed the same map;
//! flags are applied last so they win.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use aggdiff::autodiff::Matrix;
use aggdiff::data::{SyntheticKind, SyntheticSpec};
use aggdiff::learn::{BaselineKind, Schedule, TrainConfig};
use aggdiff::nn::Activation;
use aggdiff::ot::LipschitzMode;

use crate::CliError;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "observation CSV (t,dim_0,...)"),
    ("dataset", "synthetic source: syn1, syn2 or syn3"),
    ("process", "synthetic process whose noise and initial law the model assumes (default: dataset)"),
    ("dim", "synthetic dimension (default 2)"),
    ("generated", "synthetic samples per time (default 1000)"),
    ("observed", "synthetic samples kept per time (default 500)"),
    ("task", "fit, filter or smooth (default fit)"),
    ("k", "target time for filter and smooth"),
    ("method", "legend, ou or nn (default legend)"),
    ("out", "output directory"),
    ("seed", "random seed (default 0)"),
    ("checkpoint", "checkpoint file for filter and smooth"),
    ("truth", "ground-truth CSV for evaluation"),
    ("samples", "prediction batch size (default: truth size, else 500)"),
    ("subsample", "allow unequal batch sizes by subsampling (default false)"),
    ("plots", "emit SVG plots (default false)"),
    ("bins", "histogram bins (default 40)"),
    ("iterations", "training iterations"),
    ("critic_steps", "critic updates per iteration"),
    ("batch_size", "minibatch size"),
    ("learning_rate", "generator learning rate"),
    ("critic_learning_rate", "critic learning rate"),
    ("beta1", "Adam beta1"),
    ("beta2", "Adam beta2"),
    ("schedule", "constant or cosine"),
    ("hidden_dim", "hidden state dimension (default: observation dimension)"),
    ("width", "hidden layer width"),
    ("lipschitz", "gp:<lambda> or clip:<c>"),
    ("critic_activation", "relu, softplus, tanh, ..."),
    ("dt", "Euler step"),
    ("substeps_per_obs", "Euler steps per observation gap"),
    ("sigma", "diffusion root as a multiple of the identity"),
    ("initial", "hidden initial law: standard or dataset"),
    ("head_iterations", "inference head iterations (default 1000)"),
    ("head_learning_rate", "inference head learning rate (default 1e-4)"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Fit,
    Filter,
    Smooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Legend,
    Baseline(BaselineKind),
}

#[derive(Debug, Clone)]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{origin}:{}: expected key=value", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(usage(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects key=value, got {pair:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("{key}: cannot parse {v:?}"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, CliError> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>, CliError> {
        self.parsed(key)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, CliError> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        Ok(self.parsed("seed")?.unwrap_or(0))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn out_dir(&self) -> Result<PathBuf, CliError> {
        self.path("out").ok_or_else(|| usage("no output directory (set out or --out)"))
    }

    pub fn task(&self) -> Result<Task, CliError> {
        match self.get("task").unwrap_or("fit") {
            "fit" => Ok(Task::Fit),
            "filter" => Ok(Task::Filter),
            "smooth" => Ok(Task::Smooth),
            other => Err(usage(format!("unknown task {other:?}"))),
        }
    }

    pub fn method(&self) -> Result<Method, CliError> {
        match self.get("method").unwrap_or("legend").to_ascii_lowercase().as_str() {
            "legend" => Ok(Method::Legend),
            "ou" => Ok(Method::Baseline(BaselineKind::Ou)),
            "nn" => Ok(Method::Baseline(BaselineKind::Nn)),
            other => Err(usage(format!("unknown method {other:?}"))),
        }
    }

    pub fn synthetic_kind(&self) -> Result<Option<SyntheticKind>, CliError> {
        self.get("dataset")
            .map(|d| SyntheticKind::parse(d).map_err(|e| usage(e.to_string())))
            .transpose()
    }

    pub fn synthetic_spec(&self) -> Result<Option<SyntheticSpec>, CliError> {
        let Some(kind) = self.synthetic_kind()? else {
            return Ok(None);
        };
        let mut spec = SyntheticSpec::new(kind, self.usize_or("dim", 2)?);
        spec.generated = self.usize_or("generated", spec.generated)?;
        spec.observed = self.usize_or("observed", spec.observed)?;
        Ok(Some(spec))
    }

    /// Exactly one of `data` and `dataset`.
    pub fn data_source(&self) -> Result<DataSource, CliError> {
        match (self.path("data"), self.synthetic_spec()?) {
            (Some(p), None) => Ok(DataSource::Csv(p)),
            (None, Some(spec)) => Ok(DataSource::Synthetic(spec)),
            (Some(_), Some(_)) => Err(usage("set only one of data and dataset")),
            (None, None) => Err(usage("no data source (set data or dataset)")),
        }
    }

    /// The synthetic process the model assumes: `process`, else `dataset`.
    fn process_spec(&self) -> Result<Option<SyntheticSpec>, CliError> {
        let Some(name) = self.get("process").or(self.get("dataset")) else {
            return Ok(None);
        };
        let kind = SyntheticKind::parse(name).map_err(|e| usage(e.to_string()))?;
        Ok(Some(SyntheticSpec::new(kind, self.usize_or("dim", 2)?)))
    }

    /// Training settings; with a known synthetic process the diffusion root
    /// and the hidden initial law default to the generating ones.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let spec = self.process_spec()?;
        let schedule = match self.get("schedule") {
            None => d.schedule,
            Some("constant") => Schedule::Constant,
            Some("cosine") => Schedule::Cosine,
            Some(other) => return Err(usage(format!("unknown schedule {other:?}"))),
        };
        let lipschitz = match self.get("lipschitz") {
            None => d.lipschitz,
            Some(v) => parse_lipschitz(v)?,
        };
        let critic_activation = match self.get("critic_activation") {
            None => d.critic_activation,
            Some(v) => Activation::parse(v).ok_or_else(|| usage(format!("unknown activation {v:?}")))?,
        };
        let hidden_dim = self.opt_usize("hidden_dim")?;
        let mut cfg = TrainConfig {
            iterations: self.usize_or("iterations", d.iterations)?,
            critic_steps: self.usize_or("critic_steps", d.critic_steps)?,
            batch_size: self.usize_or("batch_size", d.batch_size)?,
            learning_rate: self.parsed("learning_rate")?.unwrap_or(d.learning_rate),
            critic_learning_rate: self.parsed("critic_learning_rate")?.unwrap_or(d.critic_learning_rate),
            beta1: self.parsed("beta1")?.unwrap_or(d.beta1),
            beta2: self.parsed("beta2")?.unwrap_or(d.beta2),
            schedule,
            seed: self.seed()?,
            hidden_dim,
            width: self.usize_or("width", d.width)?,
            lipschitz,
            critic_activation,
            substeps_per_obs: self.usize_or("substeps_per_obs", spec.as_ref().map_or(d.substeps_per_obs, |s| s.substeps))?,
            dt: self.parsed("dt")?.unwrap_or(spec.as_ref().map_or(d.dt, |s| s.dt)),
            ..d
        };
        let same_dim = |n: usize| hidden_dim.is_none_or(|h| h == n);
        if let Some(sigma) = self.parsed::<f64>("sigma")? {
            let n = hidden_dim.or(spec.as_ref().map(|s| s.dim));
            cfg.sigma_root = n.map(|n| Matrix::eye(n) * sigma);
            if cfg.sigma_root.is_none() {
                return Err(usage("sigma needs hidden_dim or a synthetic process"));
            }
        } else if let Some(s) = spec.as_ref().filter(|s| same_dim(s.dim)) {
            cfg.sigma_root = Some(s.model_sigma_root().map_err(|e| usage(e.to_string()))?);
        }
        match (self.get("initial"), spec.as_ref()) {
            (Some("standard"), _) => cfg.initial = None,
            (Some("dataset") | None, Some(s)) if same_dim(s.dim) => {
                cfg.initial = Some(s.initial().map_err(|e| usage(e.to_string()))?);
            }
            (Some("dataset"), _) => return Err(usage("initial=dataset needs a synthetic process of matching dimension")),
            (Some(other), _) if other != "dataset" => return Err(usage(format!("unknown initial law {other:?}"))),
            _ => {}
        }
        Ok(cfg)
    }

    /// Settings for inference heads: the training settings with the head
    /// budget and learning rate.
    pub fn head_config(&self) -> Result<TrainConfig, CliError> {
        let base = self.train_config()?;
        Ok(TrainConfig {
            iterations: self.usize_or("head_iterations", 1000)?,
            learning_rate: self.parsed("head_learning_rate")?.unwrap_or(1e-4),
            ..base
        })
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Writes the effective configuration, with the seed made explicit.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        let mut eff = self.clone();
        if !eff.has("seed") {
            eff.values.insert("seed".into(), "0".into());
        }
        fs::write(dir.join("config.txt"), eff.to_text()).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
    }
}

fn parse_lipschitz(v: &str) -> Result<LipschitzMode, CliError> {
    let (kind, value) = v.split_once(':').ok_or_else(|| usage(format!("lipschitz expects gp:<x> or clip:<x>, got {v:?}")))?;
    let x: f64 = value.parse().map_err(|_| usage(format!("lipschitz value {value:?}")))?;
    match kind {
        "gp" => Ok(LipschitzMode::GradientPenalty(x)),
        "clip" => Ok(LipschitzMode::WeightClip(x)),
        _ => Err(usage(format!("unknown lipschitz mode {kind:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aggdiff::sde::InitialSpec;

    #[test]
    fn file_then_flags() {
        let mut cfg = RunConfig::parse("# comment\nseed = 3\niterations=10\n\n", "f").unwrap();
        cfg.apply_overrides(&["iterations=20".into()]).unwrap();
        assert_eq!(cfg.seed().unwrap(), 3);
        assert_eq!(cfg.train_config().unwrap().iterations, 20);
        assert_eq!(cfg.to_text(), "iterations=20\nseed=3\n");
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("seed=1\nbogus=2\n", "run.cfg").unwrap_err();
        assert!(err.to_string().contains("run.cfg:2"), "{err}");
    }

    #[test]
    fn exactly_one_source() {
        let both = RunConfig::parse("data=a.csv\ndataset=syn1\n", "f").unwrap();
        assert!(both.data_source().is_err());
        assert!(RunConfig::default().data_source().is_err());
        assert!(matches!(
            RunConfig::parse("dataset=syn2\n", "f").unwrap().data_source().unwrap(),
            DataSource::Synthetic(_)
        ));
    }

    #[test]
    fn synthetic_defaults_follow_the_generator() {
        let cfg = RunConfig::parse("dataset=syn3\ndim=2\n", "f").unwrap().train_config().unwrap();
        assert!(matches!(cfg.initial, Some(InitialSpec::Uniform { .. })));
        assert_eq!(cfg.sigma_root.unwrap().dim(), (2, 2));
        let cfg = RunConfig::parse("data=x.csv\nprocess=syn1\n", "f").unwrap().train_config().unwrap();
        assert!(matches!(cfg.initial, Some(InitialSpec::Normal { .. })));
        let cfg = RunConfig::parse("dataset=syn3\ninitial=standard\nsigma=0.2\n", "f").unwrap().train_config().unwrap();
        assert!(cfg.initial.is_none());
        assert_eq!(cfg.sigma_root.unwrap()[[1, 1]], 0.2);
    }

    #[test]
    fn parses_lipschitz_modes() {
        assert_eq!(parse_lipschitz("gp:5").unwrap(), LipschitzMode::GradientPenalty(5.0));
        assert_eq!(parse_lipschitz("clip:0.01").unwrap(), LipschitzMode::WeightClip(0.01));
        assert!(parse_lipschitz("gp").is_err());
    }
}
