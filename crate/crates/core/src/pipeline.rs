//! End-to-end M-RA models for the gap experiment: a tree over the training
//! data, a kernel, and nugget-inclusive prediction.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::covariance::{KernelSpec, StationaryMaternParams};
use crate::error::{Error, Result};
use crate::evalx::{Pipeline, Prediction};
use crate::geo::{GeoBox, LonLat};
use crate::mra::{posterior_pass, predict, stationary_mle_mra, MleFit, MleOptions, PredictOptions, Prior};
use crate::paramfield::ParamField;
use crate::partition::{kd_bisect, KnotRule, RegionTree};
use crate::seeds;

/// Shape of the trees built over training data.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeConfig {
    pub domain: GeoBox,
    /// Upper target for observations per leaf.
    pub leaf_size: usize,
    /// Knots per internal region.
    pub knots: usize,
}

impl TreeConfig {
    /// Smallest depth whose halving reaches `leaf_size`, counting the root level.
    pub fn depth_for(&self, n: usize) -> usize {
        let mut depth = 1;
        let mut per_leaf = n as f64;
        while per_leaf > self.leaf_size as f64 {
            per_leaf /= 2.0;
            depth += 1;
        }
        depth
    }

    pub fn build(&self, locs: &[LonLat], seed: u64) -> Result<RegionTree> {
        if self.leaf_size == 0 {
            return Err(Error::invalid("leaf size must be positive"));
        }
        kd_bisect(locs, self.domain, self.depth_for(locs.len()), self.knots, KnotRule::FromObservations, seed)
    }
}

/// Conditions `values` on a tree over `train` and predicts the noisy
/// observation distribution at `targets`.
pub fn mra_predict(tree: RegionTree, spec: &KernelSpec, values: &[f64], targets: &[LonLat]) -> Result<Prediction> {
    let prior = Prior::build(Arc::new(tree), spec, None)?;
    let post = posterior_pass(&prior, values)?;
    let field = predict(&prior, &post, targets, PredictOptions { include_nugget: true, joint: false })?;
    if let Some((i, why)) = field.errors.first() {
        return Err(Error::invalid(format!("target {} could not be predicted: {why}", targets[*i])));
    }
    Ok(Prediction { mean: field.mean, sd: field.sd })
}

/// M-RA with a kernel fixed in advance, such as a smoothed parameter field.
#[derive(Clone, Debug)]
pub struct FixedKernelPipeline {
    pub name: String,
    pub tree: TreeConfig,
    pub spec: KernelSpec,
}

impl FixedKernelPipeline {
    pub fn nonstationary(name: &str, tree: TreeConfig, field: Arc<ParamField>) -> Self {
        let exponential = field.nu == 0.5;
        FixedKernelPipeline {
            name: name.to_string(),
            tree,
            spec: KernelSpec::nonstationary(field, exponential, false),
        }
    }
}

impl Pipeline for FixedKernelPipeline {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, train: &[LonLat], values: &[f64], targets: &[LonLat], seed: u64) -> Result<Prediction> {
        mra_predict(self.tree.build(train, seed)?, &self.spec, values, targets)
    }
}

/// Stationary Matérn whose parameters are re-estimated by M-RA likelihood on
/// every training set.
#[derive(Clone, Debug)]
pub struct StationaryMlePipeline {
    pub name: String,
    pub tree: TreeConfig,
    pub nu: f64,
    /// The likelihood is maximised on a random subsample of at most this size.
    pub mle_subsample: usize,
    pub max_evals: usize,
}

impl StationaryMlePipeline {
    /// Moment start: 80% of the sample variance as partial sill, the rest as
    /// nugget, and a tenth of the domain diagonal as range.
    pub fn initial(&self, values: &[f64]) -> Result<StationaryMaternParams> {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::Fit("training values have no spread".into()));
        }
        StationaryMaternParams::new(0.8 * var, self.tree.domain.diagonal_km() / 10.0, self.nu, 0.2 * var)
    }

    pub fn fit(&self, train: &[LonLat], values: &[f64], seed: u64) -> Result<MleFit> {
        let (locs, y): (Vec<LonLat>, Vec<f64>) = if train.len() > self.mle_subsample {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, 1));
            let mut pick = sample(&mut rng, train.len(), self.mle_subsample).into_vec();
            pick.sort_unstable();
            pick.iter().map(|&i| (train[i], values[i])).unzip()
        } else {
            (train.to_vec(), values.to_vec())
        };
        let tree = self.tree.build(&locs, seeds::derive(seed, 2))?;
        let opts = MleOptions { free_nu: false, max_evals: self.max_evals };
        stationary_mle_mra(&tree, &y, self.initial(&y)?, opts)
    }
}

impl Pipeline for StationaryMlePipeline {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, train: &[LonLat], values: &[f64], targets: &[LonLat], seed: u64) -> Result<Prediction> {
        let fit = self.fit(train, values, seed)?;
        log::debug!("{}: stationary fit {:?}", self.name, fit.params);
        let spec = KernelSpec::stationary(fit.params, false)?;
        mra_predict(self.tree.build(train, seed)?, &spec, values, targets)
    }
}
