use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use dynsplat::eval::{EvalMask, SyntheticSpec};
use dynsplat::init::InitConfig;
use dynsplat::train::TrainConfig;

/// Everything a run depends on. Written next to every run's outputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Worker threads for rendering and losses; 0 uses every core.
    pub threads: usize,
    /// Reserved. The pipeline has no randomness.
    pub seed: u64,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub eval_mask: EvalMask,
    /// Used by `synth` only.
    pub synth: SyntheticSpec,
}

/// Command-line overrides. Each flag names the config field it sets.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,

    /// Motion threshold in scene units.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub basis_count: Option<usize>,
    /// `false` initializes from frame 0 only.
    #[arg(long)]
    pub fuse_frames: Option<bool>,

    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub log_interval: Option<u64>,
    #[arg(long)]
    pub lambda_smooth: Option<f64>,
    #[arg(long)]
    pub lambda_dssim: Option<f64>,
    /// normalized, inverse, l1 or logl1.
    #[arg(long)]
    pub depth_loss_kind: Option<String>,
    /// minmax or meanstd.
    #[arg(long)]
    pub normalization: Option<String>,
    #[arg(long)]
    pub lr_position_init: Option<f64>,
    #[arg(long)]
    pub spatial_lr_scale: Option<f64>,

    /// tissue or all.
    #[arg(long)]
    pub eval_mask: Option<String>,

    /// Any other field, as `dotted.path=json`, e.g. `train.density.stop=2000`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
}

impl Overrides {
    fn assignments(&self) -> anyhow::Result<Vec<(String, Value)>> {
        let mut out: Vec<(String, Value)> = Vec::new();
        let mut put = |path: &str, v: Option<Value>| {
            if let Some(v) = v {
                out.push((path.to_string(), v));
            }
        };
        let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| Value::from(p.to_string_lossy().into_owned()));
        put("dataset", path_str(&self.dataset));
        put("output", path_str(&self.output));
        put("threads", self.threads.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("init.tau", self.tau.map(Value::from));
        put("init.stride", self.stride.map(Value::from));
        put("init.basis_count", self.basis_count.map(Value::from));
        put("init.fuse_frames", self.fuse_frames.map(Value::from));
        put("train.iterations", self.iterations.map(Value::from));
        put("train.log_interval", self.log_interval.map(Value::from));
        put("train.loss.lambda_smooth", self.lambda_smooth.map(Value::from));
        put("train.loss.lambda_dssim", self.lambda_dssim.map(Value::from));
        put(
            "train.loss.depth_loss_kind",
            self.depth_loss_kind.clone().map(Value::from),
        );
        put("train.loss.normalization", self.normalization.clone().map(Value::from));
        put("train.adam.lr_position_init", self.lr_position_init.map(Value::from));
        put("train.adam.spatial_lr_scale", self.spatial_lr_scale.map(Value::from));
        put("eval_mask", self.eval_mask.clone().map(Value::from));
        for s in &self.set {
            let (path, raw) = s
                .split_once('=')
                .with_context(|| format!("--set expects PATH=VALUE, got {s:?}"))?;
            // bare words are taken as strings
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::from(raw));
            out.push((path.trim().to_string(), v));
        }
        Ok(out)
    }
}

fn assign(root: &mut Value, path: &str, v: Value) -> anyhow::Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let Some(obj) = node.as_object_mut() else {
            bail!(
                "unknown config key `{path}`: `{}` is not a section",
                parts[..i].join(".")
            );
        };
        let Some(child) = obj.get_mut(*key) else {
            bail!("unknown config key `{path}`");
        };
        node = child;
    }
    *node = v;
    Ok(())
}

impl RunConfig {
    /// Defaults, then the config file, then flag overrides.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> anyhow::Result<RunConfig> {
        let base: RunConfig = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        let mut tree = serde_json::to_value(&base)?;
        for (path, v) in overrides.assignments()? {
            assign(&mut tree, &path, v)?;
        }
        serde_json::from_value(tree).context("invalid override")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.init.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn write_echo(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
