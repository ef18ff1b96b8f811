//! One function per subcommand. Each resolves all of its inputs before it
//! computes anything and writes outputs only after every computation
//! succeeded.

use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nsmra::covariance::{KernelSpec, StationaryMaternParams};
use nsmra::data::{export_grid, ingest, read_observations, GridMeta, IngestConfig, IngestReport, Observation};
use nsmra::dist::{build_shard, make_plan, run_distributed_posterior, run_distributed_predict, run_loopback_cluster, DistOptions, TcpTransport};
use nsmra::evalx::{make_gaps, run_gap_experiment, score_predictions, Pipeline, COVERAGE_LEVELS};
use nsmra::geo::{icosahedral_centers, LonLat};
use nsmra::mra::{posterior_pass, predict, PredictOptions, PredictionField, Prior};
use nsmra::paramfield::{
    estimate_two_pass, format_estimates, local_estimate_grid, read_estimates, select_smoothing_cv, smooth_field, ParamField,
};
use nsmra::partition::{auto_split, export_partition, load_partition, RegionTree};
use nsmra::pipeline::{FixedKernelPipeline, StationaryMlePipeline, TreeConfig};
use nsmra::trend::{detrend, fit_trend_cv, TrendModel};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Config, KernelKind};
use crate::manifest::Manifest;
use crate::CliError;

pub const TREND: &str = "trend.txt";
pub const ESTIMATES: &str = "estimates.txt";
pub const ESTIMATES_FREE_NU: &str = "estimates.free_nu.txt";
pub const PARAMFIELD: &str = "paramfield.txt";
pub const SMOOTHING_CV: &str = "smoothing_cv.txt";
pub const TREE: &str = "tree.txt";
pub const STATIONARY: &str = "stationary.json";
pub const PREDICTION: &str = "prediction";
pub const EVALUATION: &str = "evaluation";
pub const EXPERIMENT: &str = "experiment";

/// Fitted stationary parameters as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryFile {
    pub sigma2: f64,
    pub beta: f64,
    pub nu: f64,
    pub tau2: f64,
    pub log_likelihood: f64,
    pub converged: bool,
    pub evaluations: usize,
}

impl StationaryFile {
    fn params(&self) -> Result<StationaryMaternParams, CliError> {
        Ok(StationaryMaternParams::new(self.sigma2, self.beta, self.nu, self.tau2)?)
    }
}

fn require(path: &Path, hint: &str) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::MissingInput { path: path.to_path_buf(), hint: hint.to_string() })
    }
}

fn require_data(cfg: &Config) -> Result<(), CliError> {
    for f in cfg.data.files.iter().chain(&cfg.data.mask).chain(&cfg.tree.partition) {
        require(f, "listed in the configuration")?;
    }
    Ok(())
}

fn load_observations(cfg: &Config) -> Result<(Vec<Observation>, IngestReport), CliError> {
    let ic = IngestConfig { study_box: cfg.study_box()?, quality_min: cfg.data.quality_min };
    let (obs, report) = ingest(&cfg.data.files, &ic)?;
    if obs.is_empty() {
        return Err(CliError::Config("no observation survived ingestion".into()));
    }
    Ok((obs, report))
}

fn report_json(r: &IngestReport) -> serde_json::Value {
    json!({
        "read": r.read,
        "low_quality": r.low_quality,
        "outside_box": r.outside_box,
        "duplicates": r.duplicates,
        "kept": r.kept,
    })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn tree_config(cfg: &Config) -> Result<TreeConfig, CliError> {
    Ok(TreeConfig { domain: cfg.study_box()?, leaf_size: cfg.tree.threshold, knots: cfg.tree.knots })
}

fn load_stationary(cfg: &Config) -> Result<StationaryFile, CliError> {
    let path = require(&cfg.path(STATIONARY), "run `fit-stationary` first")?;
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// The configured kernel without the nugget at prediction targets.
fn load_kernel(cfg: &Config) -> Result<(KernelSpec, PathBuf), CliError> {
    Ok(match cfg.kernel.kind {
        KernelKind::Nonstationary => {
            let path = require(&cfg.path(PARAMFIELD), "run `smooth-params` first")?;
            let field = ParamField::load(&path)?;
            let exponential = field.nu == 0.5;
            (KernelSpec::nonstationary(Arc::new(field), exponential, false), path)
        }
        KernelKind::Stationary => (KernelSpec::stationary(load_stationary(cfg)?.params()?, false)?, cfg.path(STATIONARY)),
    })
}

/// Residuals of the ingested observations about the stored trend.
fn load_residuals(cfg: &Config) -> Result<(Vec<LonLat>, Vec<f64>, TrendModel, IngestReport), CliError> {
    let trend_path = require(&cfg.path(TREND), "run `fit-trend` first")?;
    let trend = TrendModel::load(&trend_path)?;
    let (obs, report) = load_observations(cfg)?;
    let y = detrend(&obs, &trend);
    Ok((obs.iter().map(|o| o.loc).collect(), y, trend, report))
}

fn load_tree(cfg: &Config, locs: &[LonLat]) -> Result<RegionTree, CliError> {
    let path = require(&cfg.path(TREE), "run `build-tree` first")?;
    let mut tree = load_partition(&path, &cfg.mask()?)?;
    let outside = tree.attach_observations(locs);
    if outside > 0 {
        log::warn!("{outside} observations lie outside the tree and are ignored");
    }
    Ok(tree)
}

pub fn fit_trend(cfg: &Config, m: &mut Manifest) -> Result<(), CliError> {
    require_data(cfg)?;
    let (obs, report) = load_observations(cfg)?;
    let t = &cfg.trend;
    let model = fit_trend_cv(&obs, &t.ks, t.folds, t.n_bins, cfg.seed)?;
    let out = cfg.path(TREND);
    write(&out, &model.to_text())?;
    m.inputs(&cfg.data.files);
    m.output(&out);
    m.detail("ingest", report_json(&report));
    m.detail("k", json!(model.k()));
    Ok(())
}

pub fn estimate_local(cfg: &Config, m: &mut Manifest) -> Result<(), CliError> {
    require_data(cfg)?;
    let (locs, y, _, report) = load_residuals(cfg)?;
    let (mask, domain, lf) = (cfg.mask()?, cfg.study_box()?, cfg.local_fit());
    let (fixed, free) = if cfg.local.two_pass {
        let two = estimate_two_pass(&locs, &y, &lf, &mask, &domain, cfg.local.nu)?;
        m.detail("free_nu_quartiles", json!(two.nu_quartiles()));
        (two.fixed_nu, Some(two.free_nu))
    } else {
        (local_estimate_grid(&locs, &y, &lf, &mask, &domain, Some(cfg.local.nu))?, None)
    };
    let out = cfg.path(ESTIMATES);
    write(&out, &format_estimates(&fixed))?;
    m.output(&out);
    if let Some(free) = free {
        let out = cfg.path(ESTIMATES_FREE_NU);
        write(&out, &format_estimates(&free))?;
        m.output(&out);
    }
    m.inputs(&cfg.data.files);
    m.input(&cfg.path(TREND));
    m.detail("ingest", report_json(&report));
    m.detail("usable", json!(fixed.iter().filter(|e| e.is_usable()).count()));
    m.detail("grid_points", json!(fixed.len()));
    Ok(())
}

pub fn smooth_params(cfg: &Config, m: &mut Manifest) -> Result<(), CliError> {
    let path = require(&cfg.path(ESTIMATES), "run `estimate-local` first")?;
    require_data(cfg)?;
    let est = read_estimates(&path)?;
    let (mask, domain) = (cfg.mask()?, cfg.study_box()?);
    let s = &cfg.smoothing;
    let sets = s
        .center_spacing_km
        .iter()
        .map(|&km| icosahedral_centers(&domain, km, &mask))
        .collect::<nsmra::Result<Vec<_>>>()?;
    let (best, table) = select_smoothing_cv(&est, &sets, &s.ells_km, &s.lambdas, s.folds, cfg.seed)?;
    let field = smooth_field(&est, sets[best.center_set].clone(), best.ell_km, best.lambda)?;
    let mut cv = String::from("center_set n_centers ell_km lambda mspe\n");
    for row in &table {
        cv.push_str(&format!("{} {} {} {} {:e}\n", row.center_set, row.n_centers, row.ell_km, row.lambda, row.mspe));
    }
    let (out, cv_out) = (cfg.path(PARAMFIELD), cfg.path(SMOOTHING_CV));
    write(&out, &field.to_text())?;
    write(&cv_out, &cv)?;
    m.input(&path);
    m.output(&out);
    m.output(&cv_out);
    m.detail(
        "selected",
        json!({"center_set": best.center_set, "n_centers": best.n_centers, "ell_km": best.ell_km, "lambda": best.lambda, "mspe": best.mspe}),
    );
    Ok(())
}

pub fn build_tree(cfg: &Config, m: &mut Manifest) -> Result<(), CliError> {
    require_data(cfg)?;
    let (obs, report) = load_observations(cfg)?;
    let locs: Vec<LonLat> = obs.iter().map(|o| o.loc).collect();
    let tree = match &cfg.tree.partition {
        Some(p) => {
            let coarse = load_partition(p, &cfg.mask()?)?;
            m.input(p);
            auto_split(&coarse, &locs, cfg.tree.threshold, cfg.tree.knots, cfg.seed)?
        }
        None => tree_config(cfg)?.build(&locs, cfg.seed)?,
    };
    let out = cfg.path(TREE);
    write(&out, &export_partition(&tree))?;
    m.inputs(&cfg.data.files);
    m.output(&out);
    m.detail("ingest", report_json(&report));
    m.detail("depth", json!(tree.depth()));
    m.detail("regions", json!(tree.n_regions()));
    m.detail("leaves", json!(tree.leaves_dfs().len()));
    m.detail("max_leaf_obs", json!(tree.max_leaf_obs()));
    Ok(())
}

pub fn fit_stationary(cfg: &Config, m: &mut Manifest) -> Result<(), CliError> {
    require_data(cfg)?;
    let (locs, y, _, report) = load_residuals(cfg)?;
    let st = &cfg.stationary;
    let pipe = StationaryMlePipeline {
        name: "stationary".into(),
        tree: tree_config(cfg)?,
        nu: st.nu,
        mle_subsample: st.subsample,
        max_evals: st.max_evals,
    };
    let fit = pipe.fit(&locs, &y, cfg.seed)?;
    let p = fit.params;
    let file = StationaryFile {
        sigma2: p.sigma2,
        beta: p.beta,
        nu: p.nu,
        tau2: p.tau2,
        log_likelihood: fit.log_likelihood,
        converged: fit.converged,
        evaluations: fit.evaluations,
    };
    if !fit.converged {
        log::warn!("stationary likelihood search stopped at its evaluation budget");
    }
    let out = cfg.path(STATIONARY);
    write(&out, &(serde_json::to_string_pretty(&file).expect("plain struct") + "\n"))?;
    m.inputs(&cfg.data.files);
    m.input(&cfg.path(TREND));
    m.output(&out);
    m.detail("ingest", report_json(&report));
    Ok(())
}

fn addresses(cfg: &Config) -> Result<Vec<SocketAddr>, CliError> {
    cfg.plan
        .addresses
        .iter()
        .map(|a| {
            a.to_socket_addrs()
                .ok()
                .and_then(|mut it| it.next())
                .ok_or_else(|| CliError::Config(format!("plan.addresses: cannot resolve `{a}`")))
        })
        .collect()
}

fn dist_options(cfg: &Config) -> DistOptions {
    DistOptions { timeout: Duration::from_secs(cfg.plan.timeout_s) }
}

/// Runs one rank of a TCP cluster. Rank 0 returns the assembled field.
fn tcp_node(cfg: &Config, rank: u32, tree: Arc<RegionTree>, spec: &KernelSpec, y: &[f64], targets: &[LonLat]) -> Result<Option<PredictionField>, CliError> {
    let addrs = addresses(cfg)?;
    let plan = make_plan(&tree, cfg.plan.n_nodes)?;
    let opts = dist_options(cfg);
    let mut transport = TcpTransport::bind(rank, addrs, opts.timeout)?;
    let prior = build_shard(tree, spec, &plan, rank)?;
    let mut node = run_distributed_posterior(&prior, y, &plan, &mut transport, opts)?;
    Ok(run_distributed_predict(&prior, &mut node, &plan, targets, &mut transport, opts)?)
}

fn predict_field(cfg: &Config, tree: RegionTree, spec: &KernelSpec, y: &[f64], targets: &[LonLat]) -> Result<PredictionField, CliError> {
    let tree = Arc::new(tree);
    if !cfg.plan.addresses.is_empty() {
        return Ok(tcp_node(cfg, 0, tree, spec, y, targets)?.expect("rank 0 assembles the field"));
    }
    if cfg.plan.n_nodes > 1 {
        return Ok(run_loopback_cluster(tree, spec, y, targets, cfg.plan.n_nodes, dist_options(cfg))?.field);
    }
    let prior = Prior::build(tree, spec, None)?;
    let post = posterior_pass(&prior, y)?;
    Ok(predict(&prior, &post, targets, PredictOptions { include_nugget: spec.include_nugget, joint: false })?)
}

/// Targets and kernel shared by `predict` and `serve-worker`.
struct PredictionInputs {
    locs: Vec<LonLat>,
    y: Vec<f64>,
    trend: TrendModel,
    tree: RegionTree,
    spec: KernelSpec,
    kernel_path: PathBuf,
    meta: GridMeta,
}

fn prediction_inputs(cfg: &Config) -> Result<PredictionInputs, CliError> {
    require_data(cfg)?;
    require(&cfg.path(TREND), "run `fit-trend` first")?;
    require(&cfg.path(TREE), "run `build-tree` first")?;
    let (spec, kernel_path) = load_kernel(cfg)?;
    let meta = GridMeta::covering(&cfg.study_box()?, cfg.predict.grid_step_deg)?;
    let (locs, y, trend, _) = load_residuals(cfg)?;
    let tree = load_tree(cfg, &locs)?;
    Ok(PredictionInputs { locs, y, trend, tree, spec: spec.with_nugget(cfg.predict.include_nugget), kernel_path, meta })
}

pub fn predict_grid(cfg: &Config, m: &mut Manifest) -> Result<(), CliError> {
    let inp = prediction_inputs(cfg)?;
    let targets = inp.meta.locations();
    let mut field = predict_field(cfg, inp.tree, &inp.spec, &inp.y, &targets)?;
    if let Some((i, why)) = field.errors.first() {
        log::warn!("{} grid cells could not be predicted, first at {}: {why}", field.errors.len(), targets[*i]);
    }
    if cfg.predict.add_trend {
        for (mean, p) in field.mean.iter_mut().zip(&targets) {
            *mean += inp.trend.eval(p.lat);
        }
    }
    std::fs::create_dir_all(&cfg.work_dir)?;
    let written = export_grid(&field, &inp.meta, &cfg.mask()?, &cfg.path(PREDICTION), cfg.predict.text)?;
    m.inputs(&cfg.data.files);
    m.inputs(&[cfg.path(TREND), cfg.path(TREE), inp.kernel_path]);
    m.inputs(&cfg.plan.addresses.iter().map(PathBuf::from).collect::<Vec<_>>());
    m.outputs(&written);
    m.detail("observations", json!(inp.locs.len()));
    m.detail("cells", json!(inp.meta.len()));
    m.detail("failed_cells", json!(field.errors.len()));
    m.detail("n_nodes", json!(cfg.plan.n_nodes));
    Ok(())
}

pub fn serve_worker(cfg: &Config, rank: u32, m: &mut Manifest) -> Result<(), CliError> {
    if cfg.plan.addresses.is_empty() {
        return Err(CliError::Config("serve-worker needs plan.addresses".into()));
    }
    if rank == 0 || rank as usize >= cfg.plan.n_nodes {
        return Err(CliError::Config(format!("worker rank must lie in 1..{}, got {rank}", cfg.plan.n_nodes)));
    }
    let inp = prediction_inputs(cfg)?;
    let targets = inp.meta.locations();
    tcp_node(cfg, rank, Arc::new(inp.tree), &inp.spec, &inp.y, &targets)?;
    m.detail("rank", json!(rank));
    Ok(())
}

/// Scores the configured model on held-out observations in `test`.
pub fn evaluate(cfg: &Config, test: &Path, m: &mut Manifest) -> Result<(), CliError> {
    require(test, "given by --test")?;
    require_data(cfg)?;
    require(&cfg.path(TREE), "run `build-tree` first")?;
    let (spec, kernel_path) = load_kernel(cfg)?;
    let (locs, y, trend, _) = load_residuals(cfg)?;
    let ic = IngestConfig { study_box: cfg.study_box()?, quality_min: cfg.data.quality_min };
    let (test_obs, report) = nsmra::data::filter_observations(&read_observations(test)?, &ic);
    if test_obs.is_empty() {
        return Err(CliError::Config(format!("{}: no usable test observation", test.display())));
    }
    let targets: Vec<LonLat> = test_obs.iter().map(|o| o.loc).collect();
    let truth = detrend(&test_obs, &trend);
    let tree = load_tree(cfg, &locs)?;
    let field = predict_field(cfg, tree, &spec.with_nugget(true), &y, &targets)?;
    let scores = score_predictions(0, &targets, &truth, &field.mean, &field.sd)?;
    let coverage = scores.coverage(&COVERAGE_LEVELS)?;
    let mut summary = format!("n {}\nMSPE {:.6}\nlog-score {:.6}\nCRPS {:.6}\ncoverage", scores.n(), scores.mspe, scores.log_score, scores.crps);
    for (l, c) in COVERAGE_LEVELS.iter().zip(&coverage) {
        summary.push_str(&format!(" {l}:{c:.6}"));
    }
    summary.push('\n');
    let dir = cfg.path(EVALUATION);
    let mut table = String::from("replicate lon lat y yhat sd se logscore crps\n");
    table.push_str(&nsmra::evalx::format_score_rows(&scores.rows));
    write(&dir.join("scores.txt"), &table)?;
    write(&dir.join("summary.txt"), &summary)?;
    m.inputs(&cfg.data.files);
    m.inputs(&[test.to_path_buf(), cfg.path(TREND), cfg.path(TREE), kernel_path]);
    m.outputs(&[dir.join("scores.txt"), dir.join("summary.txt")]);
    m.detail("test_ingest", report_json(&report));
    Ok(())
}

/// Gap hold-out comparison of the stationary MLE pipeline against the
/// smoothed parameter field when one exists.
pub fn gap_experiment(cfg: &Config, m: &mut Manifest) -> Result<(), CliError> {
    require_data(cfg)?;
    let gap_cfg = cfg.gap_config();
    let field_path = cfg.path(PARAMFIELD);
    let field = if field_path.exists() { Some(ParamField::load(&field_path)?) } else { None };
    let (locs, y, _, report) = load_residuals(cfg)?;
    let (mask, domain, tree) = (cfg.mask()?, cfg.study_box()?, tree_config(cfg)?);
    let st = &cfg.stationary;
    let stationary = StationaryMlePipeline {
        name: "stationary".into(),
        tree: tree.clone(),
        nu: st.nu,
        mle_subsample: st.subsample,
        max_evals: st.max_evals,
    };
    let nonstationary = field.map(|f| FixedKernelPipeline::nonstationary("nonstationary", tree, Arc::new(f)));
    let mut models: Vec<&dyn Pipeline> = vec![&stationary];
    if let Some(ns) = &nonstationary {
        models.push(ns);
        m.input(&field_path);
    } else {
        log::warn!("no {PARAMFIELD}; evaluating the stationary model alone");
    }
    let gaps = make_gaps(&locs, &mask, &domain, &gap_cfg)?;
    let exp = run_gap_experiment(&locs, &y, gaps, &models, cfg.seed)?;
    let dir = cfg.path(EXPERIMENT);
    exp.write(&dir)?;
    m.inputs(&cfg.data.files);
    m.input(&cfg.path(TREND));
    for name in &exp.models {
        m.output(&dir.join(format!("scores.{name}.txt")));
    }
    m.output(&dir.join("summary.txt"));
    m.detail("ingest", report_json(&report));
    m.detail("succeeded", json!(exp.successes().len()));
    Ok(())
}

pub fn elapsed(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}
