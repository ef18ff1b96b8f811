//! Run configuration: one TOML file with a section per stage.
//!
//! `seed`, `work_dir`, `[data].files` and `[data].study_box` are required;
//! every other key has a default.

use std::path::{Path, PathBuf};

use nsmra::evalx::GapExperimentConfig;
use nsmra::geo::{GeoBox, OceanMask};
use nsmra::paramfield::LocalFitConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Directory that receives every stage's outputs and manifests.
    pub work_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub trend: TrendSection,
    #[serde(default)]
    pub local: LocalSection,
    #[serde(default)]
    pub smoothing: SmoothingSection,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub tree: TreeSection,
    #[serde(default)]
    pub stationary: StationarySection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub files: Vec<PathBuf>,
    /// `[lon_min, lon_max, lat_min, lat_max]` in degrees.
    pub study_box: [f64; 4],
    /// Land/ocean polygons; everything is ocean when absent.
    pub mask: Option<PathBuf>,
    #[serde(default = "default_quality_min")]
    pub quality_min: u8,
}

fn default_quality_min() -> u8 {
    2
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrendSection {
    pub ks: Vec<usize>,
    pub folds: usize,
    pub n_bins: usize,
}

impl Default for TrendSection {
    fn default() -> Self {
        TrendSection { ks: (4..=20).collect(), folds: 10, n_bins: 120 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalSection {
    pub grid_step_deg: f64,
    pub b1_half_deg: f64,
    pub b2_half_deg: f64,
    pub n_short: usize,
    pub n_long: usize,
    pub min_obs_b1: usize,
    /// Fit the smoothness freely first and report its quartiles.
    pub two_pass: bool,
    /// Smoothness of the final pass.
    pub nu: f64,
}

impl Default for LocalSection {
    fn default() -> Self {
        let d = LocalFitConfig::default();
        LocalSection {
            grid_step_deg: d.grid_step_deg,
            b1_half_deg: d.b1_half_deg,
            b2_half_deg: d.b2_half_deg,
            n_short: d.n_short,
            n_long: d.n_long,
            min_obs_b1: d.min_obs_b1,
            two_pass: true,
            nu: 0.5,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingSection {
    /// Target spacings of the icosahedral centre sets.
    pub center_spacing_km: Vec<f64>,
    pub ells_km: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub folds: usize,
}

impl Default for SmoothingSection {
    fn default() -> Self {
        SmoothingSection {
            center_spacing_km: vec![2000.0, 1000.0],
            ells_km: vec![1500.0, 2500.0, 4000.0],
            lambdas: vec![0.0, 1e-3, 1e-2, 1e-1],
            folds: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Nonstationary,
    Stationary,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub kind: KernelKind,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeSection {
    /// Hand-specified coarse partition refined automatically; a kd tree over
    /// the study box is used when absent.
    pub partition: Option<PathBuf>,
    pub threshold: usize,
    pub knots: usize,
}

impl Default for TreeSection {
    fn default() -> Self {
        TreeSection { partition: None, threshold: 2000, knots: 49 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StationarySection {
    pub subsample: usize,
    pub max_evals: usize,
    pub nu: f64,
}

impl Default for StationarySection {
    fn default() -> Self {
        StationarySection { subsample: 20_000, max_evals: 200, nu: 0.5 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub grid_step_deg: f64,
    /// Adds the latitude trend back to the predicted mean.
    pub add_trend: bool,
    /// Also writes a columnar text copy of the product.
    pub text: bool,
    /// Predicts noisy observations rather than the latent field.
    pub include_nugget: bool,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection { grid_step_deg: 0.25, add_trend: false, text: false, include_nugget: false }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub n_nodes: usize,
    /// One `host:port` per rank. Empty runs every node in-process.
    pub addresses: Vec<String>,
    pub timeout_s: u64,
}

impl Default for PlanSection {
    fn default() -> Self {
        PlanSection { n_nodes: 1, addresses: Vec::new(), timeout_s: 600 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub gap_lon_deg: f64,
    pub gap_lat_deg: f64,
    pub min_obs_in_gap: usize,
    pub test_size: usize,
    pub replicates: usize,
    pub center_res_deg: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let d = GapExperimentConfig::default();
        ExperimentSection {
            gap_lon_deg: d.gap_lon_deg,
            gap_lat_deg: d.gap_lat_deg,
            min_obs_in_gap: d.min_obs_in_gap,
            test_size: d.test_size,
            replicates: d.replicates,
            center_res_deg: d.center_res_deg,
        }
    }
}

impl Config {
    /// Parses `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: Config = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.work_dir);
        cfg.data.files.iter_mut().for_each(resolve);
        if let Some(m) = cfg.data.mask.as_mut() {
            resolve(m);
        }
        if let Some(p) = cfg.tree.partition.as_mut() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.data.files.is_empty() {
            return Err(CliError::Config("data.files must list at least one file".into()));
        }
        self.study_box()?;
        self.local_fit().validate()?;
        self.gap_config().validate()?;
        if self.plan.n_nodes == 0 {
            return Err(CliError::Config("plan.n_nodes must be at least 1".into()));
        }
        if !self.plan.addresses.is_empty() && self.plan.addresses.len() != self.plan.n_nodes {
            return Err(CliError::Config(format!(
                "plan.addresses lists {} endpoints for {} nodes",
                self.plan.addresses.len(),
                self.plan.n_nodes
            )));
        }
        if self.tree.threshold == 0 {
            return Err(CliError::Config("tree.threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn study_box(&self) -> Result<GeoBox, CliError> {
        let [a, b, c, d] = self.data.study_box;
        GeoBox::new(a, b, c, d).map_err(|e| CliError::Config(format!("data.study_box: {e}")))
    }

    pub fn mask(&self) -> Result<OceanMask, CliError> {
        Ok(match &self.data.mask {
            Some(p) => OceanMask::load(p)?,
            None => OceanMask::all_ocean(),
        })
    }

    pub fn local_fit(&self) -> LocalFitConfig {
        let l = &self.local;
        LocalFitConfig {
            grid_step_deg: l.grid_step_deg,
            b1_half_deg: l.b1_half_deg,
            b2_half_deg: l.b2_half_deg,
            n_short: l.n_short,
            n_long: l.n_long,
            min_obs_b1: l.min_obs_b1,
            seed: self.seed,
        }
    }

    pub fn gap_config(&self) -> GapExperimentConfig {
        let e = &self.experiment;
        GapExperimentConfig {
            gap_lon_deg: e.gap_lon_deg,
            gap_lat_deg: e.gap_lat_deg,
            min_obs_in_gap: e.min_obs_in_gap,
            test_size: e.test_size,
            replicates: e.replicates,
            seed: self.seed,
            center_res_deg: e.center_res_deg,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.work_dir.join(name)
    }
}
