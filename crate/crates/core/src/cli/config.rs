use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;

use crate::aaps::{self, SyncRule};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::learner::PpoConfig;
use crate::protocol::LatencyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Sim,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sim" => Ok(TransportKind::Sim),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(Error::Config(format!(
                "transport: expected sim or tcp, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::Sim => "sim",
            TransportKind::Tcp => "tcp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvKind,
    pub workers: usize,
    pub envs_per_worker: usize,
    pub kl_threshold: f64,
    /// Flag every worker stale after each update regardless of divergence.
    pub force_sync: bool,
    pub kl_decay: f64,
    pub total_timesteps: u64,
    pub transport: TransportKind,
    pub seed: u64,
    pub ppo: PpoConfig,
    pub metrics_path: PathBuf,
    /// Simulated per-frame latency.
    pub latency: LatencyModel,
    /// Listen address for the TCP transport.
    pub host: String,
    /// Binary to launch for TCP workers; in-process threads when unset.
    pub worker_exe: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::CartPole,
            workers: 4,
            envs_per_worker: 64,
            kl_threshold: 0.05,
            force_sync: false,
            kl_decay: aaps::DEFAULT_DECAY,
            total_timesteps: 500_000,
            transport: TransportKind::Sim,
            seed: 1,
            ppo: PpoConfig::default(),
            metrics_path: PathBuf::from("metrics.csv"),
            latency: LatencyModel::default(),
            host: "127.0.0.1:0".into(),
            worker_exe: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers: must be at least 1".into()));
        }
        if self.envs_per_worker == 0 {
            return Err(Error::Config("envs-per-worker: must be at least 1".into()));
        }
        aaps::check_threshold(self.kl_threshold)?;
        if !(self.kl_decay > 0.0 && self.kl_decay < 1.0) {
            return Err(Error::Config(format!(
                "kl-decay: {} not in (0, 1)",
                self.kl_decay
            )));
        }
        self.ppo.validate()?;
        let rollout = (self.ppo.steps_per_rollout * self.workers * self.envs_per_worker) as u64;
        if self.total_timesteps < rollout {
            return Err(Error::Config(format!(
                "total-timesteps: {} is less than one rollout ({rollout})",
                self.total_timesteps
            )));
        }
        if !rollout.is_multiple_of(self.ppo.minibatches as u64) {
            return Err(Error::Config(format!(
                "minibatches: {} does not divide the rollout size {rollout}",
                self.ppo.minibatches
            )));
        }
        Ok(())
    }

    pub fn sync_rule(&self) -> Result<SyncRule> {
        if self.force_sync {
            Ok(SyncRule::EveryUpdate)
        } else {
            SyncRule::divergence(self.kl_threshold)
        }
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        let key = key.trim().replace('_', "-");
        let k = key.as_str();
        match k {
            "env" => self.env = value.parse()?,
            "workers" => self.workers = num(k, value)?,
            "envs-per-worker" | "envs-per-node" => self.envs_per_worker = num(k, value)?,
            "kl-threshold" => self.kl_threshold = num(k, value)?,
            "force-sync" => self.force_sync = num(k, value)?,
            "kl-decay" => self.kl_decay = num(k, value)?,
            "total-timesteps" => self.total_timesteps = num(k, value)?,
            "transport" => self.transport = value.parse()?,
            "seed" => self.seed = num(k, value)?,
            "metrics-path" => self.metrics_path = PathBuf::from(value.trim()),
            "latency" => self.latency = value.parse()?,
            "host" => self.host = value.trim().to_string(),
            "lr" | "learning-rate" => self.ppo.learning_rate = num(k, value)?,
            "gamma" => self.ppo.gamma = num(k, value)?,
            "gae-lambda" => self.ppo.gae_lambda = num(k, value)?,
            "steps-per-rollout" => self.ppo.steps_per_rollout = num(k, value)?,
            "minibatches" => self.ppo.minibatches = num(k, value)?,
            "update-epochs" => self.ppo.update_epochs = num(k, value)?,
            "clip-eps" => self.ppo.clip_epsilon = num(k, value)?,
            "value-coef" => self.ppo.value_coef = num(k, value)?,
            "entropy-coef" => self.ppo.entropy_coef = num(k, value)?,
            _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }
}

/// Flat `key=value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", i + 1)))?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(entries)
}

/// Command line flags shared by `run` and `sweep`. Every flag is optional;
/// unset flags fall back to the config file, then to the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Environment: cartpole | gridworld:N
    #[arg(long)]
    pub env: Option<String>,
    /// Number of workers [default: 4]
    #[arg(long)]
    pub workers: Option<String>,
    /// Environments stepped by each worker [default: 64]
    #[arg(long = "envs-per-worker")]
    pub envs_per_worker: Option<String>,
    /// Running-average KL above which a worker pulls weights [default: 0.05]
    #[arg(long = "kl-threshold")]
    pub kl_threshold: Option<String>,
    /// Pull weights after every learner update
    #[arg(long = "force-sync")]
    pub force_sync: bool,
    /// Decay of the running KL average [default: 0.95]
    #[arg(long = "kl-decay")]
    pub kl_decay: Option<String>,
    /// Environment steps to collect across all workers [default: 500000]
    #[arg(long = "total-timesteps")]
    pub total_timesteps: Option<String>,
    /// sim | tcp
    #[arg(long)]
    pub transport: Option<String>,
    /// Root seed for every random stream [default: 1]
    #[arg(long)]
    pub seed: Option<String>,
    /// Where to write the metrics CSV [default: metrics.csv]
    #[arg(long = "metrics-path")]
    pub metrics_path: Option<String>,
    /// Simulated latency: fixed:N | uniform:MIN:MAX
    #[arg(long)]
    pub latency: Option<String>,
    /// TCP listen address
    #[arg(long)]
    pub host: Option<String>,
    /// Learning rate [default: 0.0005]
    #[arg(long)]
    pub lr: Option<String>,
    /// Discount factor [default: 0.99]
    #[arg(long)]
    pub gamma: Option<String>,
    /// GAE lambda [default: 0.95]
    #[arg(long = "gae-lambda")]
    pub gae_lambda: Option<String>,
    /// Steps per environment in each rollout [default: 128]
    #[arg(long = "steps-per-rollout")]
    pub steps_per_rollout: Option<String>,
    /// Minibatches per epoch [default: 4]
    #[arg(long)]
    pub minibatches: Option<String>,
    /// Passes over each rollout [default: 4]
    #[arg(long = "update-epochs")]
    pub update_epochs: Option<String>,
    /// PPO ratio clip range [default: 0.2]
    #[arg(long = "clip-eps")]
    pub clip_eps: Option<String>,
    /// Value loss weight [default: 0.5]
    #[arg(long = "value-coef")]
    pub value_coef: Option<String>,
    /// Entropy bonus weight [default: 0.01]
    #[arg(long = "entropy-coef")]
    pub entropy_coef: Option<String>,
    /// Config file of key=value lines
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArgs {
    fn flag_entries(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &'static str, v: &Option<String>| {
            if let Some(v) = v {
                m.insert(k, v.clone());
            }
        };
        put("env", &self.env);
        put("workers", &self.workers);
        put("envs-per-worker", &self.envs_per_worker);
        put("kl-threshold", &self.kl_threshold);
        put("kl-decay", &self.kl_decay);
        put("total-timesteps", &self.total_timesteps);
        put("transport", &self.transport);
        put("seed", &self.seed);
        put("metrics-path", &self.metrics_path);
        put("latency", &self.latency);
        put("host", &self.host);
        put("lr", &self.lr);
        put("gamma", &self.gamma);
        put("gae-lambda", &self.gae_lambda);
        put("steps-per-rollout", &self.steps_per_rollout);
        put("minibatches", &self.minibatches);
        put("update-epochs", &self.update_epochs);
        put("clip-eps", &self.clip_eps);
        put("value-coef", &self.value_coef);
        put("entropy-coef", &self.entropy_coef);
        if self.force_sync {
            m.insert("force-sync", "true".into());
        }
        m
    }

    /// Defaults, overridden by the config file, overridden by flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            apply_file(&mut config, path)?;
        }
        for (k, v) in self.flag_entries() {
            config.apply(k, &v)?;
        }
        config.validate()?;
        Ok(config)
    }
}

fn apply_file(config: &mut RunConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("config: cannot read {}: {e}", path.display())))?;
    for (k, v) in parse_config_file(&text)? {
        config.apply(&k, &v)?;
    }
    Ok(())
}

#[derive(clap::Parser)]
#[command(no_binary_name = true)]
struct Standalone {
    #[command(flatten)]
    args: ConfigArgs,
}

/// Parses run flags (without the program name) into a validated config.
pub fn parse_config<S: AsRef<str>>(argv: &[S]) -> Result<RunConfig> {
    use clap::Parser;
    let parsed = Standalone::try_parse_from(argv.iter().map(|s| s.as_ref()))
        .map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
    parsed.args.resolve()
}
