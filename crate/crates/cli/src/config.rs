//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use pfrnn::experiment::{desk_config, desk_spec};
use pfrnn::model::{MapEncoderSpec, ModelKind, ModelSpec};
use pfrnn::train::TrainConfig;
use serde::Serialize;

/// Every recognized key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "dataset directory written by gen-data"),
    ("model", "pf_lstm, pf_gru, lstm, gru, lstm_bnrelu or gru_bnrelu"),
    ("hidden", "latent state size"),
    ("particles", "particle count (particle models)"),
    ("alpha", "soft-resampling mixture weight in (0, 1]"),
    ("resample", "resample every step (true/false)"),
    ("bn_relu", "BN-ReLU candidate activation for particle cells (true/false)"),
    ("init_logstd", "initial noise log standard deviation"),
    ("logstd_min", "lower clamp of the noise log standard deviation"),
    ("logstd_max", "upper clamp of the noise log standard deviation"),
    ("obs_hidden", "hidden width of the observation likelihood (0 = linear)"),
    ("encoder_widths", "two comma-separated input encoder widths"),
    ("map_encoder", "add the convolutional map encoder (true/false)"),
    ("map_filters", "map encoder filters per conv layer"),
    ("map_out", "map encoder output width"),
    ("epochs", "training epochs"),
    ("lr", "RMSProp learning rate"),
    ("batch_size", "trajectories per batch"),
    ("clip", "global gradient-norm clip"),
    ("l2", "weight decay added to gradients"),
    ("seed", "run seed (falls back to PFRNN_SEED, then 0)"),
    ("bptt", "truncated backpropagation length, 0 = full sequence"),
    ("beta", "ELBO weight"),
    ("pred_weight", "prediction loss weight"),
    ("eval_seeds", "comma-separated evaluation seeds"),
    ("bn_recalibrate", "training trajectories used to re-estimate batch-norm statistics, 0 = moving averages"),
    ("dropout", "accepted for compatibility; has no effect"),
    ("workers", "parallel runs for ablate and grid"),
];

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

/// Raw key/value pairs, file first, then flag overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RawConfig {
    pub values: BTreeMap<String, String>,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RawConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", i + 1)))?;
            let key = key.trim().replace('-', "_");
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(bad(format!("line {}: unknown key {key:?}", i + 1)));
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(bad(format!("line {}: duplicate key {key:?}", i + 1)));
            }
        }
        Ok(Self {
            values,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::parse(&text, &base)?)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| bad(format!("invalid value {v:?} for {key}"))),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| bad(format!("invalid value {v:?} for {key}"))))
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    /// Fill `seed` from `PFRNN_SEED` when neither the file nor a flag set it.
    pub fn apply_seed_fallback(&mut self) -> Result<(), ConfigError> {
        if !self.values.contains_key("seed") {
            if let Ok(s) = std::env::var("PFRNN_SEED") {
                s.trim().parse::<u64>().map_err(|_| bad(format!("PFRNN_SEED={s:?} is not an integer")))?;
                self.set("seed", s.trim());
            }
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let kind = match self.values.get("model") {
            Some(m) => ModelKind::parse(m).map_err(|e| bad(e.to_string()))?,
            None => ModelKind::PfLstm,
        };
        let mut spec = desk_spec(kind);
        if let Some(h) = self.get("hidden")? {
            spec.hidden = h;
        }
        let cell = &mut spec.cell;
        cell.particles = self.get("particles")?.unwrap_or(cell.particles);
        cell.alpha = self.get("alpha")?.unwrap_or(cell.alpha);
        cell.resample = self.get("resample")?.unwrap_or(cell.resample);
        cell.bn_relu = self.get("bn_relu")?.unwrap_or(cell.bn_relu);
        cell.init_logstd = self.get("init_logstd")?.unwrap_or(cell.init_logstd);
        cell.logstd_clamp.0 = self.get("logstd_min")?.unwrap_or(cell.logstd_clamp.0);
        cell.logstd_clamp.1 = self.get("logstd_max")?.unwrap_or(cell.logstd_clamp.1);
        cell.obs_hidden = self.get("obs_hidden")?.unwrap_or(cell.obs_hidden);
        if let Some(w) = self.list::<usize>("encoder_widths")? {
            spec.encoder_widths = w
                .try_into()
                .map_err(|_| bad("encoder_widths needs exactly two values"))?;
        }
        if self.get::<bool>("map_encoder")?.unwrap_or(false) {
            spec.map_encoder = Some(MapEncoderSpec {
                map_size: 0,
                filters: self.get("map_filters")?.unwrap_or(16),
                out_dim: self.get("map_out")?.unwrap_or(64),
            });
        }
        let base = desk_config(0);
        let train = TrainConfig {
            lr: self.get("lr")?.unwrap_or(base.lr),
            batch_size: self.get("batch_size")?.unwrap_or(base.batch_size),
            clip: self.get("clip")?.unwrap_or(base.clip),
            l2: self.get("l2")?.unwrap_or(base.l2),
            epochs: self.get("epochs")?.unwrap_or(base.epochs),
            seed: self.get("seed")?.unwrap_or(base.seed),
            bptt: self.get("bptt")?.unwrap_or(base.bptt),
            beta: self.get("beta")?.unwrap_or(base.beta),
            pred_weight: self.get("pred_weight")?.unwrap_or(base.pred_weight),
            eval_seeds: self.list("eval_seeds")?.unwrap_or(base.eval_seeds),
            bn_recalibrate: self.get("bn_recalibrate")?.unwrap_or(base.bn_recalibrate),
        };
        let _: Option<f64> = self.get("dropout")?;
        train.validate().map_err(|e| bad(e.to_string()))?;
        let data = self.values.get("data").map(|d| {
            let p = PathBuf::from(d);
            if p.is_absolute() {
                p
            } else {
                self.base_dir.join(p)
            }
        });
        Ok(RunConfig {
            data,
            spec,
            train,
            workers: self.get("workers")?.unwrap_or(1),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub workers: usize,
}

impl RunConfig {
    pub fn data_dir(&self) -> Result<&Path, ConfigError> {
        self.data.as_deref().ok_or_else(|| bad("no dataset given (set `data` or pass --data)"))
    }

    /// Size the map encoder, if any, for the dataset's maze.
    pub fn fit_map(&mut self, maze_size: usize) -> Result<(), ConfigError> {
        if let Some(m) = &mut self.spec.map_encoder {
            m.map_size = maze_size;
        }
        self.spec.validate().map_err(|e| bad(e.to_string()))
    }
}

/// Flags that override config keys of the same name.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Dataset directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Model kind (pf_lstm, pf_gru, lstm, gru, lstm_bnrelu, gru_bnrelu)
    #[arg(long)]
    pub model: Option<String>,
    /// Latent state size
    #[arg(long)]
    pub hidden: Option<String>,
    /// Particle count
    #[arg(long)]
    pub particles: Option<String>,
    /// Soft-resampling mixture weight
    #[arg(long)]
    pub alpha: Option<String>,
    /// Resample every step
    #[arg(long)]
    pub resample: Option<String>,
    /// BN-ReLU candidate activation
    #[arg(long)]
    pub bn_relu: Option<String>,
    /// Initial noise log standard deviation
    #[arg(long, allow_hyphen_values = true)]
    pub init_logstd: Option<String>,
    /// Lower noise log-std clamp
    #[arg(long, allow_hyphen_values = true)]
    pub logstd_min: Option<String>,
    /// Upper noise log-std clamp
    #[arg(long, allow_hyphen_values = true)]
    pub logstd_max: Option<String>,
    /// Observation likelihood hidden width (0 = linear)
    #[arg(long)]
    pub obs_hidden: Option<String>,
    /// Two comma-separated encoder widths
    #[arg(long)]
    pub encoder_widths: Option<String>,
    /// Use the map encoder
    #[arg(long)]
    pub map_encoder: Option<String>,
    /// Map encoder filters
    #[arg(long)]
    pub map_filters: Option<String>,
    /// Map encoder output width
    #[arg(long)]
    pub map_out: Option<String>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<String>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<String>,
    /// Batch size
    #[arg(long)]
    pub batch_size: Option<String>,
    /// Gradient-norm clip
    #[arg(long)]
    pub clip: Option<String>,
    /// Weight decay
    #[arg(long)]
    pub l2: Option<String>,
    /// Run seed
    #[arg(long)]
    pub seed: Option<String>,
    /// Truncated BPTT length (0 = full)
    #[arg(long)]
    pub bptt: Option<String>,
    /// ELBO weight
    #[arg(long)]
    pub beta: Option<String>,
    /// Prediction loss weight
    #[arg(long)]
    pub pred_weight: Option<String>,
    /// Comma-separated evaluation seeds
    #[arg(long)]
    pub eval_seeds: Option<String>,
    /// Trajectories for batch-norm re-estimation (0 = moving averages)
    #[arg(long)]
    pub bn_recalibrate: Option<String>,
    /// Accepted and ignored
    #[arg(long)]
    pub dropout: Option<String>,
    /// Parallel runs (ablate, grid)
    #[arg(long)]
    pub workers: Option<String>,
}

impl Overrides {
    pub fn apply(&self, raw: &mut RawConfig) {
        let pairs: [(&str, Option<&String>); 27] = [
            ("model", self.model.as_ref()),
            ("hidden", self.hidden.as_ref()),
            ("particles", self.particles.as_ref()),
            ("alpha", self.alpha.as_ref()),
            ("resample", self.resample.as_ref()),
            ("bn_relu", self.bn_relu.as_ref()),
            ("init_logstd", self.init_logstd.as_ref()),
            ("logstd_min", self.logstd_min.as_ref()),
            ("logstd_max", self.logstd_max.as_ref()),
            ("obs_hidden", self.obs_hidden.as_ref()),
            ("encoder_widths", self.encoder_widths.as_ref()),
            ("map_encoder", self.map_encoder.as_ref()),
            ("map_filters", self.map_filters.as_ref()),
            ("map_out", self.map_out.as_ref()),
            ("epochs", self.epochs.as_ref()),
            ("lr", self.lr.as_ref()),
            ("batch_size", self.batch_size.as_ref()),
            ("clip", self.clip.as_ref()),
            ("l2", self.l2.as_ref()),
            ("seed", self.seed.as_ref()),
            ("bptt", self.bptt.as_ref()),
            ("beta", self.beta.as_ref()),
            ("pred_weight", self.pred_weight.as_ref()),
            ("eval_seeds", self.eval_seeds.as_ref()),
            ("bn_recalibrate", self.bn_recalibrate.as_ref()),
            ("dropout", self.dropout.as_ref()),
            ("workers", self.workers.as_ref()),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                raw.set(k, v);
            }
        }
        if let Some(d) = &self.data {
            let abs = std::env::current_dir().map(|c| c.join(d)).unwrap_or_else(|_| d.clone());
            raw.set("data", &abs.to_string_lossy());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut raw = RawConfig::parse("# run\nmodel = gru\nepochs=3 # short\nencoder_widths = 8, 8\n", Path::new("/d")).unwrap();
        raw.set("lr", "0.01");
        let cfg = raw.resolve().unwrap();
        assert_eq!(cfg.spec.kind, ModelKind::Gru);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.spec.encoder_widths, [8, 8]);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        assert!(RawConfig::parse("colour = red\n", Path::new(".")).is_err());
        assert!(RawConfig::parse("epochs\n", Path::new(".")).is_err());
        assert!(RawConfig::parse("epochs = 1\nepochs = 2\n", Path::new(".")).is_err());
        let raw = RawConfig::parse("epochs = many\n", Path::new(".")).unwrap();
        assert!(raw.resolve().is_err());
    }

    #[test]
    fn relative_data_resolves_against_config_dir() {
        let raw = RawConfig::parse("data = ds\n", Path::new("/runs")).unwrap();
        assert_eq!(raw.resolve().unwrap().data, Some(PathBuf::from("/runs/ds")));
    }
}
