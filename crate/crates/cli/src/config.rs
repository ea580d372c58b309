//! Run configuration. Values come from three layers: built-in defaults, an
//! optional TOML file and command-line flags, later layers winning.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tpis::datasets::DEFAULT_THICKNESS;
use tpis::evalmetrics::EvalOptions;
use tpis::instancing::InstancingConfig;
use tpis::neuralseg::{TrainConfig, DESK_WIDTHS};
use tpis::tenpool::TensorPoolConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TensorPoolSection {
    pub orientations: usize,
    pub levels: usize,
    pub sigma: f64,
    /// Omit to use `orientations`.
    pub top_k: Option<usize>,
}

impl Default for TensorPoolSection {
    fn default() -> Self {
        let d = TensorPoolConfig::default();
        Self {
            orientations: d.orientations,
            levels: d.levels,
            sigma: d.sigma,
            top_k: d.top_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    /// Encoder widths of the reference network.
    pub widths: [usize; 3],
    /// JSON network spec replacing the reference network.
    pub spec: Option<PathBuf>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            widths: DESK_WIDTHS,
            spec: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub validation_fraction: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Width in pixels of the ground-truth contour band.
    pub contour_thickness: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.max_epochs,
            batch: d.batch_size,
            validation_fraction: d.validation_fraction,
            alpha: d.alpha,
            gamma: d.gamma,
            rho: d.rho,
            epsilon: d.epsilon,
            seed: d.seed,
            contour_thickness: DEFAULT_THICKNESS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub iou_thr: f64,
    pub by_occlusion: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalOptions::default();
        Self {
            iou_thr: d.iou_thr,
            by_occlusion: d.by_occlusion,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tensor_pool: TensorPoolSection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub instancing: InstancingConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

/// Flag values that override the file. `None` leaves the lower layer alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub orientations: Option<usize>,
    pub levels: Option<usize>,
    pub sigma: Option<f64>,
    pub top_k: Option<usize>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub seed: Option<u64>,
    pub iou_thr: Option<f64>,
    pub by_occlusion: bool,
}

/// Annotated defaults; parses to `RunConfig::default()`.
pub const DEFAULT_CONFIG_TOML: &str = r#"# tpis run configuration. Every key is optional.

[tensor_pool]
orientations = 4      # gradient orientations N
levels = 3            # pyramid depth n
sigma = 1.5           # Gaussian smoothing of gradient products, pixels
# top_k = 4           # tensors summed into the coherent tensor (default N)

[network]
widths = [8, 16, 32]  # encoder channel widths of the reference network
# spec = "net.json"   # custom network spec (JSON) instead of the reference

[train]
epochs = 50
batch = 4
validation_fraction = 0.1
alpha = 0.25          # focal loss weight
gamma = 2.0           # focal loss focusing exponent
rho = 0.95            # ADADELTA decay
epsilon = 1e-6        # ADADELTA conditioning
seed = 0
contour_thickness = 2 # ground-truth contour band, pixels

[instancing]
min_area = 50         # fragments below this many pixels are dropped
max_join_distance = 20.0
min_label_share = 0.25

[eval]
iou_thr = 0.5
by_occlusion = false

[paths]
# manifest = "data/manifest.jsonl"
# out = "out"
"#;

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Input(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    /// Defaults, then `file` if given, then `flags`; the result is validated.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        if o.manifest.is_some() {
            self.paths.manifest = o.manifest.clone();
        }
        if o.out.is_some() {
            self.paths.out = o.out.clone();
        }
        set(&mut self.tensor_pool.orientations, &o.orientations);
        set(&mut self.tensor_pool.levels, &o.levels);
        set(&mut self.tensor_pool.sigma, &o.sigma);
        if o.top_k.is_some() {
            self.tensor_pool.top_k = o.top_k;
        }
        set(&mut self.train.epochs, &o.epochs);
        set(&mut self.train.batch, &o.batch);
        set(&mut self.train.alpha, &o.alpha);
        set(&mut self.train.gamma, &o.gamma);
        set(&mut self.train.seed, &o.seed);
        set(&mut self.eval.iou_thr, &o.iou_thr);
        if o.by_occlusion {
            self.eval.by_occlusion = true;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.tensor_pool().validate()?;
        self.train_config().validate()?;
        self.instancing.validate()?;
        if self.network.widths.contains(&0) {
            return Err(CliError::Input("network widths must be positive".into()));
        }
        if self.train.contour_thickness == 0 {
            return Err(CliError::Input("contour_thickness must be at least 1".into()));
        }
        if !(self.eval.iou_thr > 0.0 && self.eval.iou_thr < 1.0) {
            return Err(CliError::Input(format!("iou_thr {} outside (0, 1)", self.eval.iou_thr)));
        }
        Ok(())
    }

    pub fn tensor_pool(&self) -> TensorPoolConfig {
        TensorPoolConfig {
            orientations: self.tensor_pool.orientations,
            levels: self.tensor_pool.levels,
            eta: 2,
            sigma: self.tensor_pool.sigma,
            top_k: self.tensor_pool.top_k,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.train.epochs,
            batch_size: self.train.batch,
            validation_fraction: self.train.validation_fraction,
            alpha: self.train.alpha,
            gamma: self.train.gamma,
            rho: self.train.rho,
            epsilon: self.train.epsilon,
            seed: self.train.seed,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            iou_thr: self.eval.iou_thr,
            by_occlusion: self.eval.by_occlusion,
        }
    }
}
