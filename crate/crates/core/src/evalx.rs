//! Scoring of Gaussian predictive distributions and the gap hold-out
//! experiment.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::geo::{GeoBox, GeoIndex, LonLat, OceanMask};
#[cfg(test)]
use crate::geo::Ring;
use crate::seeds;

/// Scores of one predictive distribution at one location; lower is better.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointScore {
    pub log_score: f64,
    pub crps: f64,
    pub squared_error: f64,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Negative log density and CRPS of `y` under N(mean, sd²).
pub fn gaussian_scores(y: f64, mean: f64, sd: f64) -> Result<PointScore> {
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::domain(format!("predictive sd must be positive, got {sd}")));
    }
    let n = std_normal();
    let e = y - mean;
    let z = e / sd;
    Ok(PointScore {
        log_score: 0.5 * ((2.0 * std::f64::consts::PI).ln() + z * z) + sd.ln(),
        crps: e * (2.0 * n.cdf(z) - 1.0) + 2.0 * sd * n.pdf(z) - sd / std::f64::consts::PI.sqrt(),
        squared_error: e * e,
    })
}

/// One scored test location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreRow {
    pub replicate: usize,
    pub loc: LonLat,
    pub y: f64,
    pub mean: f64,
    pub sd: f64,
    pub score: PointScore,
}

/// Per-location scores and their arithmetic means.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
    pub mspe: f64,
    pub log_score: f64,
    pub crps: f64,
}

impl ScoreReport {
    pub fn from_rows(rows: Vec<ScoreRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("no scored locations"));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&ScoreRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(ScoreReport {
            mspe: mean(|r| r.score.squared_error),
            log_score: mean(|r| r.score.log_score),
            crps: mean(|r| r.score.crps),
            rows,
        })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Empirical coverage of the central predictive intervals.
    pub fn coverage(&self, levels: &[f64]) -> Result<Vec<f64>> {
        let y: Vec<f64> = self.rows.iter().map(|r| r.y).collect();
        let m: Vec<f64> = self.rows.iter().map(|r| r.mean).collect();
        let s: Vec<f64> = self.rows.iter().map(|r| r.sd).collect();
        coverage_curve(&y, &m, &s, levels)
    }
}

/// Scores predictions at `locs` for one replicate.
pub fn score_predictions(replicate: usize, locs: &[LonLat], y: &[f64], mean: &[f64], sd: &[f64]) -> Result<ScoreReport> {
    if locs.len() != y.len() || y.len() != mean.len() || mean.len() != sd.len() {
        return Err(Error::invalid("score inputs differ in length"));
    }
    let rows = (0..y.len())
        .map(|i| {
            Ok(ScoreRow {
                replicate,
                loc: locs[i],
                y: y[i],
                mean: mean[i],
                sd: sd[i],
                score: gaussian_scores(y[i], mean[i], sd[i])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreReport::from_rows(rows)
}

/// Fraction of `y` inside `mean ± sd·Φ⁻¹((1+α)/2)` for each level α.
pub fn coverage_curve(y: &[f64], mean: &[f64], sd: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
    if y.len() != mean.len() || y.len() != sd.len() || y.is_empty() {
        return Err(Error::invalid("coverage inputs must be nonempty and of equal length"));
    }
    if sd.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::domain("predictive sd must be positive"));
    }
    let n = std_normal();
    levels
        .iter()
        .map(|&a| {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::domain(format!("nominal level must lie in [0, 1), got {a}")));
            }
            let q = n.inverse_cdf(0.5 * (1.0 + a));
            let hits = (0..y.len()).filter(|&i| (y[i] - mean[i]).abs() < q * sd[i]).count();
            Ok(hits as f64 / y.len() as f64)
        })
        .collect()
}

/// Gap hold-out settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GapExperimentConfig {
    pub gap_lon_deg: f64,
    pub gap_lat_deg: f64,
    pub min_obs_in_gap: usize,
    pub test_size: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Resolution of the ocean raster the gap centres are drawn from.
    pub center_res_deg: f64,
}

impl Default for GapExperimentConfig {
    fn default() -> Self {
        GapExperimentConfig {
            gap_lon_deg: 10.0,
            gap_lat_deg: 10.0,
            min_obs_in_gap: 50_000,
            test_size: 50_000,
            replicates: 100,
            seed: 0,
            center_res_deg: 0.25,
        }
    }
}

impl GapExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gap_lon_deg > 0.0 && self.gap_lat_deg > 0.0 && self.center_res_deg > 0.0) {
            return Err(Error::invalid("gap size and centre resolution must be positive"));
        }
        if self.test_size == 0 || self.replicates == 0 {
            return Err(Error::invalid("test size and replicate count must be positive"));
        }
        Ok(())
    }
}

/// One hold-out split.
#[derive(Clone, Debug, PartialEq)]
pub struct Gap {
    pub replicate: usize,
    pub gap: GeoBox,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Maximum number of centre draws per replicate.
pub const GAP_TRIES: usize = 10_000;

/// Draws one gap per replicate, centred on a uniformly chosen ocean cell of
/// `domain` and redrawn until it holds at least `min_obs_in_gap` (and at
/// least one) observations. Test points are a uniform subsample of the
/// observations in the gap; training points are all observations outside it.
pub fn make_gaps(locs: &[LonLat], mask: &OceanMask, domain: &GeoBox, cfg: &GapExperimentConfig) -> Result<Vec<Gap>> {
    cfg.validate()?;
    let need = cfg.min_obs_in_gap.max(1);
    if need > locs.len() {
        return Err(Error::invalid(format!(
            "a gap needs {need} observations but only {} exist",
            locs.len()
        )));
    }
    let centers = mask.ocean_cells(cfg.center_res_deg, domain);
    if centers.is_empty() {
        return Err(Error::invalid("the domain holds no ocean cell to centre a gap on"));
    }
    let index = GeoIndex::new(locs, (cfg.gap_lat_deg / 4.0).clamp(0.25, 5.0));
    (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, rep as u64));
            for _ in 0..GAP_TRIES {
                let c = centers[rng.random_range(0..centers.len())];
                let gap = GeoBox::centered(c, cfg.gap_lon_deg / 2.0, cfg.gap_lat_deg / 2.0);
                let inside = index.query(locs, &gap);
                if inside.len() < need {
                    continue;
                }
                let mut test: Vec<usize> = if inside.len() <= cfg.test_size {
                    inside.clone()
                } else {
                    sample(&mut rng, inside.len(), cfg.test_size).into_iter().map(|k| inside[k]).collect()
                };
                test.sort_unstable();
                let held: HashSet<usize> = inside.into_iter().collect();
                let train = (0..locs.len()).filter(|i| !held.contains(i)).collect();
                return Ok(Gap { replicate: rep, gap, train, test });
            }
            Err(Error::invalid(format!(
                "no gap with {need} observations found in {GAP_TRIES} draws (replicate {rep})"
            )))
        })
        .collect()
}

/// Gaussian predictive distributions at a set of targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// A model that can be trained and queried inside one replicate.
pub trait Pipeline: Send + Sync {
    fn name(&self) -> &str;
    /// Predictive distribution of the observations at `targets`, with the
    /// measurement noise included.
    fn predict(&self, train: &[LonLat], values: &[f64], targets: &[LonLat], seed: u64) -> Result<Prediction>;
}

/// Outcome of one model in one replicate.
#[derive(Clone, Debug)]
pub enum ReplicateOutcome {
    Scored(ScoreReport),
    Failed(String),
}

/// Per-replicate reports for each model and their summary.
#[derive(Clone, Debug)]
pub struct GapExperiment {
    pub models: Vec<String>,
    pub gaps: Vec<Gap>,
    /// `outcomes[replicate][model]`.
    pub outcomes: Vec<Vec<ReplicateOutcome>>,
}

/// Per-model averages over the replicates where every model succeeded.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSummary {
    pub name: String,
    pub mspe: f64,
    pub log_score: f64,
    pub crps: f64,
    /// Replicates where this model has lower (MSPE, log-score, CRPS) than the
    /// first model.
    pub better_than_first: [usize; 3],
    pub coverage: Vec<f64>,
}

pub const COVERAGE_LEVELS: [f64; 5] = [0.5, 0.8, 0.9, 0.95, 0.99];

fn check_disjoint(g: &Gap) -> Result<()> {
    let train: HashSet<usize> = g.train.iter().copied().collect();
    if let Some(i) = g.test.iter().find(|i| train.contains(i)) {
        return Err(Error::invalid(format!(
            "replicate {}: test observation {i} is also in the training set",
            g.replicate
        )));
    }
    Ok(())
}

/// Runs every model on every gap. Overlapping train/test sets are rejected
/// before any fitting; a failing model is recorded and the experiment goes on.
pub fn run_gap_experiment(locs: &[LonLat], values: &[f64], gaps: Vec<Gap>, models: &[&dyn Pipeline], seed: u64) -> Result<GapExperiment> {
    if locs.len() != values.len() {
        return Err(Error::invalid("location and value counts differ"));
    }
    if models.is_empty() {
        return Err(Error::invalid("no models to evaluate"));
    }
    for g in &gaps {
        check_disjoint(g)?;
        if g.train.iter().chain(&g.test).any(|&i| i >= locs.len()) {
            return Err(Error::invalid(format!("replicate {} indexes beyond the data", g.replicate)));
        }
    }
    let outcomes = gaps
        .par_iter()
        .map(|g| {
            let train: Vec<LonLat> = g.train.iter().map(|&i| locs[i]).collect();
            let y_train: Vec<f64> = g.train.iter().map(|&i| values[i]).collect();
            let targets: Vec<LonLat> = g.test.iter().map(|&i| locs[i]).collect();
            let y_test: Vec<f64> = g.test.iter().map(|&i| values[i]).collect();
            let rep_seed = seeds::derive(seed, g.replicate as u64);
            models
                .iter()
                .map(|m| {
                    let scored = m
                        .predict(&train, &y_train, &targets, rep_seed)
                        .and_then(|p| score_predictions(g.replicate, &targets, &y_test, &p.mean, &p.sd));
                    match scored {
                        Ok(r) => ReplicateOutcome::Scored(r),
                        Err(e) => {
                            log::warn!("replicate {}: model {} failed: {e}", g.replicate, m.name());
                            ReplicateOutcome::Failed(e.to_string())
                        }
                    }
                })
                .collect()
        })
        .collect();
    Ok(GapExperiment {
        models: models.iter().map(|m| m.name().to_string()).collect(),
        gaps,
        outcomes,
    })
}

impl GapExperiment {
    /// Replicates where every model produced scores.
    pub fn successes(&self) -> Vec<usize> {
        (0..self.outcomes.len())
            .filter(|&r| self.outcomes[r].iter().all(|o| matches!(o, ReplicateOutcome::Scored(_))))
            .collect()
    }

    fn report(&self, rep: usize, model: usize) -> &ScoreReport {
        match &self.outcomes[rep][model] {
            ReplicateOutcome::Scored(r) => r,
            ReplicateOutcome::Failed(_) => panic!("replicate {rep} failed for model {model}"),
        }
    }

    pub fn summary(&self) -> Result<Vec<ModelSummary>> {
        let ok = self.successes();
        if ok.is_empty() {
            return Err(Error::invalid("no replicate succeeded for every model"));
        }
        let n = ok.len() as f64;
        (0..self.models.len())
            .map(|m| {
                let mean = |f: fn(&ScoreReport) -> f64| ok.iter().map(|&r| f(self.report(r, m))).sum::<f64>() / n;
                let mut better = [0usize; 3];
                for &r in &ok {
                    let (a, b) = (self.report(r, m), self.report(r, 0));
                    better[0] += (a.mspe < b.mspe) as usize;
                    better[1] += (a.log_score < b.log_score) as usize;
                    better[2] += (a.crps < b.crps) as usize;
                }
                let pooled: Vec<ScoreRow> = ok.iter().flat_map(|&r| self.report(r, m).rows.iter().copied()).collect();
                Ok(ModelSummary {
                    name: self.models[m].clone(),
                    mspe: mean(|r| r.mspe),
                    log_score: mean(|r| r.log_score),
                    crps: mean(|r| r.crps),
                    better_than_first: better,
                    coverage: ScoreReport::from_rows(pooled)?.coverage(&COVERAGE_LEVELS)?,
                })
            })
            .collect()
    }

    /// Columnar per-location scores of one model.
    pub fn scores_text(&self, model: usize) -> String {
        let mut s = String::from("replicate lon lat y yhat sd se logscore crps\n");
        for rep in &self.outcomes {
            if let ReplicateOutcome::Scored(r) = &rep[model] {
                s.push_str(&format_score_rows(&r.rows));
            }
        }
        s
    }

    /// Model × metric table of the replicate means, the replicate counts
    /// where each model beats the first, and interval coverage.
    pub fn summary_text(&self) -> Result<String> {
        let sums = self.summary()?;
        let mut s = String::new();
        let _ = writeln!(s, "replicates {} succeeded {}", self.outcomes.len(), self.successes().len());
        for (i, o) in self.outcomes.iter().enumerate() {
            for (m, oc) in o.iter().enumerate() {
                if let ReplicateOutcome::Failed(e) = oc {
                    let _ = writeln!(s, "# replicate {i} model {} failed: {e}", self.models[m]);
                }
            }
        }
        let _ = writeln!(s, "model MSPE log-score CRPS");
        for m in &sums {
            let _ = writeln!(s, "{} {:.6} {:.6} {:.6}", m.name, m.mspe, m.log_score, m.crps);
        }
        let first = &self.models[0];
        for m in sums.iter().skip(1) {
            let _ = writeln!(
                s,
                "#gaps {} better than {} {} {} {}",
                m.name, first, m.better_than_first[0], m.better_than_first[1], m.better_than_first[2]
            );
        }
        let levels: Vec<String> = COVERAGE_LEVELS.iter().map(|l| format!("{l}")).collect();
        let _ = writeln!(s, "coverage {}", levels.join(" "));
        for m in &sums {
            let c: Vec<String> = m.coverage.iter().map(|c| format!("{c:.6}")).collect();
            let _ = writeln!(s, "{} {}", m.name, c.join(" "));
        }
        Ok(s)
    }

    /// Writes `scores.<model>.txt` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (m, name) in self.models.iter().enumerate() {
            std::fs::write(dir.join(format!("scores.{name}.txt")), self.scores_text(m))?;
        }
        std::fs::write(dir.join("summary.txt"), self.summary_text()?)?;
        Ok(())
    }
}

pub fn format_score_rows(rows: &[ScoreRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(
            s,
            "{} {} {} {:e} {:e} {:e} {:e} {:e} {:e}",
            r.replicate, r.loc.lon, r.loc.lat, r.y, r.mean, r.sd, r.score.squared_error, r.score.log_score, r.score.crps
        );
    }
    s
}
