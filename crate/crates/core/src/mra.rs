//! Multi-resolution approximation: prior basis construction, the leaf-to-root
//! posterior pass, prediction, likelihood, and a dense reference solver.
//!
//! Basis functions are whitened. For a region A at level j with knots Q_A and
//! ancestors A_1..A_{j-1}, the basis of any point set S is
//!
//! ```text
//! V_A(S) = [C(S, Q_A) - V_anc(S) V_anc(Q_A)ᵀ] L_A⁻ᵀ,   L_A L_Aᵀ = w_{j-1}(Q_A, Q_A)
//! ```
//!
//! so the weights are standard normal and `C_MRA(s, t) = Σ v_k(s)·v_k(t)` over
//! the shared ancestors, plus the leaf remainder `w(s, t)` inside one leaf.
//! Leaves are the data layer: their knots are the observations and prediction
//! points, so the implied covariance inside a leaf is the parent covariance.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::codec::{Decoder, Encoder};
use crate::covariance::{KernelSpec, Site, StationaryMaternParams};
use crate::error::{Error, Result};
use crate::geo::LonLat;
use crate::linalg::Cholesky;
use crate::optim::{multistart, NelderMeadOptions};
use crate::partition::{RegionId, RegionTree};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Prior quantities of one region.
#[derive(Clone, Debug)]
pub struct RegionPrior {
    pub id: RegionId,
    /// Knots; for leaves, the observation sites in leaf order.
    pub sites: Vec<Site>,
    /// Whitened ancestor basis at the knots, root block first (|Q| × Σ r_anc).
    pub basis: DMatrix<f64>,
    /// `L_A` for internal regions; for leaves the factor of
    /// `Σ = w(S, S) + diag(τ²)`.
    pub factor: Cholesky,
    /// Leaves only: `L_Σ⁻¹ basis`.
    pub z: Option<DMatrix<f64>>,
}

impl RegionPrior {
    pub fn is_leaf(&self) -> bool {
        self.z.is_some()
    }

    pub fn n_knots(&self) -> usize {
        self.sites.len()
    }
}

/// Prior quantities for all (or a subset of) the regions of a tree.
#[derive(Clone, Debug)]
pub struct Prior {
    tree: Arc<RegionTree>,
    spec: KernelSpec,
    regions: Vec<Vec<Option<RegionPrior>>>,
}

fn numerical(region: RegionId, e: Error) -> Error {
    match e {
        Error::NotPositiveDefinite { context } => Error::Numerical {
            region,
            msg: format!("matrix not positive definite after jitter escalation ({context})"),
        },
        other => other,
    }
}

/// Builds the prior for every region of `tree`.
pub fn build_prior(tree: &RegionTree, spec: &KernelSpec) -> Result<Prior> {
    Prior::build(Arc::new(tree.clone()), spec, None)
}

impl Prior {
    /// Builds the prior for `wanted` regions and all their ancestors, or for
    /// the whole tree when `wanted` is `None`.
    pub fn build(tree: Arc<RegionTree>, spec: &KernelSpec, wanted: Option<&[RegionId]>) -> Result<Prior> {
        let mut need: Vec<Vec<bool>> = (1..=tree.depth() as u32)
            .map(|m| vec![wanted.is_none(); tree.level(m).len()])
            .collect();
        if let Some(w) = wanted {
            for id in w {
                need[id.level as usize - 1][id.index as usize] = true;
                for a in tree.ancestors(*id) {
                    need[a.level as usize - 1][a.index as usize] = true;
                }
            }
        }
        let mut prior = Prior {
            tree: tree.clone(),
            spec: spec.clone(),
            regions: Vec::with_capacity(tree.depth()),
        };
        for m in 1..=tree.depth() as u32 {
            let built: Vec<Option<RegionPrior>> = tree
                .level(m)
                .par_iter()
                .map(|reg| {
                    if !need[m as usize - 1][reg.id.index as usize] {
                        return Ok(None);
                    }
                    prior.build_region(reg.id).map(Some)
                })
                .collect::<Result<_>>()?;
            prior.regions.push(built);
        }
        Ok(prior)
    }

    fn build_region(&self, id: RegionId) -> Result<RegionPrior> {
        let reg = self.tree.region(id);
        let sites = self.spec.sites(&reg.knots)?;
        let chain = self.tree.ancestors(id);
        let basis = self.chain_basis(&chain, &sites)?;
        let mut k = self.spec.latent_matrix(&sites, &sites);
        if basis.ncols() > 0 {
            k.gemm(-1.0, &basis, &basis.transpose(), 1.0);
        }
        crate::linalg::symmetrize(&mut k);
        if reg.is_leaf() {
            for (i, s) in sites.iter().enumerate() {
                k[(i, i)] += self.spec.nugget(s);
            }
            let factor = Cholesky::new(&k, &format!("leaf {id}")).map_err(|e| numerical(id, e))?;
            let z = factor.solve_l(&basis);
            Ok(RegionPrior {
                id,
                sites,
                basis,
                factor,
                z: Some(z),
            })
        } else {
            let factor = Cholesky::new(&k, &format!("knots of {id}")).map_err(|e| numerical(id, e))?;
            Ok(RegionPrior {
                id,
                sites,
                basis,
                factor,
                z: None,
            })
        }
    }

    pub fn tree(&self) -> &RegionTree {
        &self.tree
    }

    pub fn tree_arc(&self) -> Arc<RegionTree> {
        self.tree.clone()
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn get(&self, id: RegionId) -> Option<&RegionPrior> {
        self.regions
            .get(id.level as usize - 1)?
            .get(id.index as usize)?
            .as_ref()
    }

    fn region(&self, id: RegionId) -> Result<&RegionPrior> {
        self.get(id)
            .ok_or_else(|| Error::invalid(format!("prior for region {id} is not available on this node")))
    }

    /// Knot counts of the regions in `chain`.
    pub fn block_sizes(&self, chain: &[RegionId]) -> Result<Vec<usize>> {
        chain.iter().map(|c| Ok(self.region(*c)?.n_knots())).collect()
    }

    /// Whitened basis of `sites` for each region of `chain` (root first),
    /// concatenated column-wise.
    pub fn chain_basis(&self, chain: &[RegionId], sites: &[Site]) -> Result<DMatrix<f64>> {
        let sizes = self.block_sizes(chain)?;
        let total: usize = sizes.iter().sum();
        let mut out = DMatrix::zeros(sites.len(), total);
        let mut off = 0;
        for (k, id) in chain.iter().enumerate() {
            let pa = self.region(*id)?;
            let rk = sizes[k];
            if rk == 0 {
                continue;
            }
            let mut b = self.spec.latent_matrix(sites, &pa.sites);
            if off > 0 {
                b.gemm(-1.0, &out.columns(0, off), &pa.basis.transpose(), 1.0);
            }
            let vt = pa.factor.solve_l(&b.transpose());
            out.columns_mut(off, rk).copy_from(&vt.transpose());
            off += rk;
        }
        Ok(out)
    }

    /// Whitened basis vectors of `p` per level of its chain (leaf excluded).
    /// Each has at most as many entries as the region has knots.
    pub fn basis(&self, p: LonLat) -> Result<Vec<(RegionId, DVector<f64>)>> {
        let leaf = self.route(p)?;
        let chain = self.tree.ancestors(leaf);
        let site = self.spec.site(p)?;
        let v = self.chain_basis(&chain, &[site])?;
        let sizes = self.block_sizes(&chain)?;
        let mut off = 0;
        Ok(chain
            .iter()
            .zip(sizes)
            .map(|(id, r)| {
                let b: DVector<f64> = v.view((0, off), (1, r)).transpose().column(0).into_owned();
                off += r;
                (*id, b)
            })
            .collect())
    }

    fn route(&self, p: LonLat) -> Result<RegionId> {
        self.tree
            .route(p)
            .ok_or_else(|| Error::domain(format!("location {p} lies outside the level-1 region")))
    }

    /// Covariance implied by the basis expansion (latent, no nugget).
    pub fn implied_cov(&self, s: LonLat, t: LonLat) -> Result<f64> {
        Ok(self.implied_cov_matrix(&[s], &[t])?[(0, 0)])
    }

    /// Like [`Prior::implied_cov`] with level `m`'s contribution scaled by
    /// `weights[m-1]`; the leaf remainder uses the weight of the leaf level.
    pub fn implied_cov_weighted(&self, s: LonLat, t: LonLat, weights: &[f64]) -> Result<f64> {
        let (ls, lt) = (self.route(s)?, self.route(t)?);
        let bs = self.basis(s)?;
        let bt = self.basis(t)?;
        let w = |level: u32| weights.get(level as usize - 1).copied().unwrap_or(1.0);
        let mut c = 0.0;
        for ((ia, va), (ib, vb)) in bs.iter().zip(&bt) {
            if ia != ib {
                break;
            }
            c += w(ia.level) * va.dot(vb);
        }
        if ls == lt {
            let (ss, st) = (self.spec.site(s)?, self.spec.site(t)?);
            let shared: f64 = bs.iter().zip(&bt).map(|((_, a), (_, b))| a.dot(b)).sum();
            c += w(ls.level) * (self.spec.latent(&ss, &st) - shared);
        }
        Ok(c)
    }

    /// Implied covariance matrix between two location lists.
    pub fn implied_cov_matrix(&self, rows: &[LonLat], cols: &[LonLat]) -> Result<DMatrix<f64>> {
        let rs = self.located(rows)?;
        let cs = self.located(cols)?;
        let mut out = DMatrix::zeros(rows.len(), cols.len());
        for (la, ia, va) in &rs {
            for (lb, ib, vb) in &cs {
                let common = common_prefix(&self.tree.ancestors(*la), &self.tree.ancestors(*lb));
                let width: usize = self.block_sizes(&self.tree.ancestors(*la)[..common])?.iter().sum();
                let mut block = if width > 0 {
                    va.columns(0, width) * vb.columns(0, width).transpose()
                } else {
                    DMatrix::zeros(ia.len(), ib.len())
                };
                if la == lb {
                    let sa: Vec<Site> = ia.iter().map(|&i| self.spec.site(rows[i])).collect::<Result<_>>()?;
                    let sb: Vec<Site> = ib.iter().map(|&j| self.spec.site(cols[j])).collect::<Result<_>>()?;
                    block = self.spec.latent_matrix(&sa, &sb);
                }
                for (x, &i) in ia.iter().enumerate() {
                    for (y, &j) in ib.iter().enumerate() {
                        out[(i, j)] = block[(x, y)];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Groups locations by leaf with their chain basis.
    fn located(&self, pts: &[LonLat]) -> Result<Vec<(RegionId, Vec<usize>, DMatrix<f64>)>> {
        let mut groups: Vec<(RegionId, Vec<usize>)> = Vec::new();
        let mut pos: HashMap<RegionId, usize> = HashMap::new();
        for (i, p) in pts.iter().enumerate() {
            let leaf = self.route(*p)?;
            let g = *pos.entry(leaf).or_insert_with(|| {
                groups.push((leaf, Vec::new()));
                groups.len() - 1
            });
            groups[g].1.push(i);
        }
        groups
            .into_iter()
            .map(|(leaf, idx)| {
                let sites: Vec<Site> = idx.iter().map(|&i| self.spec.site(pts[i])).collect::<Result<_>>()?;
                let v = self.chain_basis(&self.tree.ancestors(leaf), &sites)?;
                Ok((leaf, idx, v))
            })
            .collect()
    }

    /// `w(s, s) = C(s, s) - C_basis(s, s)`: the variance left after
    /// conditioning on the knots of the regions above the leaf of `s`.
    pub fn remainder_variance(&self, s: LonLat) -> Result<f64> {
        let site = self.spec.site(s)?;
        let total: f64 = self.basis(s)?.iter().map(|(_, v)| v.norm_squared()).sum();
        Ok(self.spec.latent(&site, &site) - total)
    }

    /// Draws observations from the M-RA model (latent field plus noise),
    /// indexed like the observations attached to the tree.
    pub fn simulate(&self, n_obs: usize, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights: HashMap<RegionId, DVector<f64>> = HashMap::new();
        for id in self.tree.dfs() {
            let r = self.region(id)?;
            if !r.is_leaf() {
                let w = DVector::from_fn(r.n_knots(), |_, _| StandardNormal.sample(&mut rng));
                weights.insert(id, w);
            }
        }
        let mut y = vec![f64::NAN; n_obs];
        for leaf in self.tree.leaves_dfs() {
            let r = self.region(leaf)?;
            let chain = self.tree.ancestors(leaf);
            let eta = concat(chain.iter().map(|c| &weights[c]));
            let xi = DVector::from_fn(r.n_knots(), |_, _| StandardNormal.sample(&mut rng));
            let vals = &r.basis * &eta + r.factor.l() * xi;
            for (k, &i) in self.tree.region(leaf).obs.iter().enumerate() {
                if i < n_obs {
                    y[i] = vals[k];
                }
            }
        }
        Ok(y)
    }

    /// Serialises the prior of one region.
    pub fn encode_region(&self, id: RegionId, e: &mut Encoder) -> Result<()> {
        let r = self.region(id)?;
        e.region(id).matrix(&r.basis).matrix(r.factor.l());
        match &r.z {
            Some(z) => e.u8(1).matrix(z),
            None => e.u8(0),
        };
        Ok(())
    }

    /// Restores a region serialised with [`Prior::encode_region`]; sites are
    /// recomputed from the tree and kernel.
    pub fn decode_region(&mut self, d: &mut Decoder) -> Result<RegionId> {
        let id = d.region()?;
        if self.tree.get(id).is_none() {
            return Err(Error::invalid(format!("region {id} not in tree")));
        }
        let basis = d.matrix()?;
        let l = d.matrix()?;
        let z = match d.u8()? {
            1 => Some(d.matrix()?),
            0 => None,
            t => return Err(Error::invalid(format!("bad leaf tag {t}"))),
        };
        let sites = self.spec.sites(&self.tree.region(id).knots)?;
        self.regions[id.level as usize - 1][id.index as usize] = Some(RegionPrior {
            id,
            sites,
            basis,
            factor: Cholesky::from_l(l),
            z,
        });
        Ok(id)
    }
}

fn common_prefix(a: &[RegionId], b: &[RegionId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

fn concat<'a>(blocks: impl Iterator<Item = &'a DVector<f64>>) -> DVector<f64> {
    let v: Vec<f64> = blocks.flat_map(|b| b.iter().copied()).collect();
    DVector::from_vec(v)
}

/// Information a subtree passes to its parent about the ancestor weights:
/// the data log-density below is
/// `-½ (logdet + quad - 2 ηᵀω + ηᵀ R η + n log 2π)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub r: DMatrix<f64>,
    pub omega: DVector<f64>,
    pub logdet: f64,
    pub quad: f64,
    pub n: usize,
}

impl Summary {
    pub fn encode(&self, e: &mut Encoder) {
        e.matrix(&self.r).vector(&self.omega).f64(self.logdet).f64(self.quad).u64(self.n as u64);
    }

    pub fn decode(d: &mut Decoder) -> Result<Self> {
        Ok(Summary {
            r: d.matrix()?,
            omega: d.vector()?,
            logdet: d.f64()?,
            quad: d.f64()?,
            n: d.u64()? as usize,
        })
    }

    /// Sums summaries in the given order.
    pub fn merge(parts: &[&Summary]) -> Result<Summary> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot merge an empty set of summaries"))?;
        let mut acc = (*first).clone();
        for p in &parts[1..] {
            if p.r.shape() != acc.r.shape() {
                return Err(Error::invalid("summary dimensions differ between siblings"));
            }
            acc.r += &p.r;
            acc.omega += &p.omega;
            acc.logdet += p.logdet;
            acc.quad += p.quad;
            acc.n += p.n;
        }
        Ok(acc)
    }

    /// Log-likelihood once every weight has been integrated out.
    pub fn log_likelihood(&self) -> f64 {
        -0.5 * (self.logdet + self.quad + self.n as f64 * LN_2PI)
    }
}

/// Posterior record of an internal region: the factor of its weight
/// precision given the ancestors, the coupling to the ancestors, and the
/// posterior mean of its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPosterior {
    pub id: RegionId,
    pub l_lambda: DMatrix<f64>,
    pub coupling: DMatrix<f64>,
    pub g: DVector<f64>,
    pub mean: DVector<f64>,
}

impl RegionPosterior {
    pub fn encode(&self, e: &mut Encoder) {
        e.region(self.id)
            .matrix(&self.l_lambda)
            .matrix(&self.coupling)
            .vector(&self.g)
            .vector(&self.mean);
    }

    pub fn decode(d: &mut Decoder) -> Result<Self> {
        Ok(RegionPosterior {
            id: d.region()?,
            l_lambda: d.matrix()?,
            coupling: d.matrix()?,
            g: d.vector()?,
            mean: d.vector()?,
        })
    }
}

/// Whitened data of a leaf, `L_Σ⁻¹ y`.
#[derive(Clone, Debug, PartialEq)]
pub struct LeafPosterior {
    pub id: RegionId,
    pub z_y: DVector<f64>,
}

/// Leaf step: whitens the leaf data and forms its summary.
pub fn leaf_step(prior: &RegionPrior, y: &DVector<f64>) -> Result<(Summary, LeafPosterior)> {
    let z = prior
        .z
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("region {} is not a leaf", prior.id)))?;
    if y.len() != prior.n_knots() {
        return Err(Error::invalid(format!(
            "leaf {} expects {} values, got {}",
            prior.id,
            prior.n_knots(),
            y.len()
        )));
    }
    let z_y = prior.factor.solve_l_vec(y);
    let summary = Summary {
        r: z.transpose() * z,
        omega: z.transpose() * &z_y,
        logdet: prior.factor.log_det(),
        quad: z_y.norm_squared(),
        n: y.len(),
    };
    Ok((summary, LeafPosterior { id: prior.id, z_y }))
}

/// Integrates out the weights of an internal region from the merged
/// summary of its children. Returns the summary for the parent and the
/// region's posterior record (mean not yet filled).
pub fn integrate_region(region: RegionId, r_own: usize, merged: &Summary) -> Result<(Summary, RegionPosterior)> {
    let total = merged.r.nrows();
    if total < r_own {
        return Err(Error::invalid(format!("summary of {region} is smaller than its knot block")));
    }
    let ra = total - r_own;
    let mut lambda = merged.r.view((ra, ra), (r_own, r_own)).clone_owned();
    for i in 0..r_own {
        lambda[(i, i)] += 1.0;
    }
    let chol = Cholesky::new(&lambda, &format!("posterior precision of {region}")).map_err(|e| numerical(region, e))?;
    let coupling = chol.solve_l(&merged.r.view((ra, 0), (r_own, ra)).clone_owned());
    let g = chol.solve_l_vec(&merged.omega.rows(ra, r_own).clone_owned());
    let mut r_out = merged.r.view((0, 0), (ra, ra)).clone_owned();
    if ra > 0 && r_own > 0 {
        r_out.gemm_tr(-1.0, &coupling, &coupling, 1.0);
    }
    let omega_out = merged.omega.rows(0, ra) - coupling.transpose() * &g;
    let out = Summary {
        r: r_out,
        omega: omega_out,
        logdet: merged.logdet + chol.log_det(),
        quad: merged.quad - g.norm_squared(),
        n: merged.n,
    };
    Ok((
        out,
        RegionPosterior {
            id: region,
            l_lambda: chol.into_l(),
            coupling,
            g,
            mean: DVector::zeros(0),
        },
    ))
}

/// Posterior mean of a region's weights given its ancestors' means.
pub fn region_mean(rec: &RegionPosterior, ancestor_mean: &DVector<f64>) -> DVector<f64> {
    let rhs = &rec.g - &rec.coupling * ancestor_mean;
    Cholesky::from_l(rec.l_lambda.clone()).solve_lt_vec(&rhs)
}

/// Posterior quantities for the regions available on this node.
#[derive(Clone, Debug, Default)]
pub struct Posterior {
    pub internal: HashMap<RegionId, RegionPosterior>,
    pub leaves: HashMap<RegionId, LeafPosterior>,
    /// Log-likelihood of the data (on the node holding the root).
    pub log_likelihood: Option<f64>,
    /// Summary after every weight is integrated out (on the root node).
    pub root: Option<Summary>,
}

/// Observation values in leaf order.
pub fn leaf_values(tree: &RegionTree, leaf: RegionId, y: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        tree.region(leaf).obs.len(),
        tree.region(leaf).obs.iter().map(|&i| y[i]),
    )
}

/// Serial leaf-to-root posterior pass followed by the root-to-leaf means.
pub fn posterior_pass(prior: &Prior, y: &[f64]) -> Result<Posterior> {
    let tree = prior.tree();
    let leaves = tree.leaves_dfs();
    let leaf_results: Vec<(RegionId, Summary, LeafPosterior)> = leaves
        .par_iter()
        .map(|&l| {
            let (s, p) = leaf_step(prior.region(l)?, &leaf_values(tree, l, y))?;
            Ok((l, s, p))
        })
        .collect::<Result<_>>()?;
    let mut summaries: HashMap<RegionId, Summary> = HashMap::new();
    let mut post = Posterior::default();
    for (l, s, p) in leaf_results {
        summaries.insert(l, s);
        post.leaves.insert(l, p);
    }
    for m in (1..=tree.depth() as u32).rev() {
        let internal: Vec<RegionId> = tree.level(m).iter().filter(|r| !r.is_leaf()).map(|r| r.id).collect();
        let done: Vec<(RegionId, Summary, RegionPosterior)> = internal
            .par_iter()
            .map(|&id| {
                let kids: Vec<&Summary> = tree.region(id).children.iter().map(|c| &summaries[c]).collect();
                let merged = Summary::merge(&kids)?;
                let (s, rec) = integrate_region(id, prior.region(id)?.n_knots(), &merged)?;
                Ok((id, s, rec))
            })
            .collect::<Result<_>>()?;
        for (id, s, rec) in done {
            summaries.insert(id, s);
            post.internal.insert(id, rec);
        }
    }
    let root = summaries.remove(&RegionId::ROOT).expect("root summary");
    post.log_likelihood = Some(root.log_likelihood());
    post.root = Some(root);
    fill_means(tree, &mut post, &[])?;
    Ok(post)
}

/// Computes posterior means root-to-leaf for every internal record present.
/// `known` seeds means for regions whose records arrived from elsewhere.
pub fn fill_means(tree: &RegionTree, post: &mut Posterior, known: &[RegionId]) -> Result<()> {
    for id in tree.dfs() {
        if known.contains(&id) || tree.region(id).is_leaf() || !post.internal.contains_key(&id) {
            continue;
        }
        let chain = tree.ancestors(id);
        let anc: Result<Vec<&DVector<f64>>> = chain
            .iter()
            .map(|c| {
                post.internal
                    .get(c)
                    .map(|r| &r.mean)
                    .ok_or_else(|| Error::invalid(format!("missing posterior record for {c}")))
            })
            .collect();
        let anc_mean = concat(anc?.into_iter());
        let mean = region_mean(&post.internal[&id], &anc_mean);
        post.internal.get_mut(&id).expect("present").mean = mean;
    }
    Ok(())
}

/// Options for [`predict`].
#[derive(Clone, Copy, Debug, Default)]
pub struct PredictOptions {
    /// Adds τ²(s) to the predictive variance.
    pub include_nugget: bool,
    /// Computes the joint covariance (at most [`MAX_JOINT`] locations).
    pub joint: bool,
}

pub const MAX_JOINT: usize = 1000;

/// Posterior predictive mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionField {
    pub locations: Vec<LonLat>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Locations that could not be predicted, with the reason. Their mean
    /// and sd are NaN.
    pub errors: Vec<(usize, String)>,
    pub joint: Option<DMatrix<f64>>,
}

/// Per-target terms needed for joint covariances.
#[derive(Clone, Debug)]
struct JointTerms {
    leaf: RegionId,
    chain: Vec<RegionId>,
    /// `u_k` per chain region.
    u: Vec<DVector<f64>>,
    v: DVector<f64>,
    h: DVector<f64>,
    site: Site,
}

/// Predictions for targets that all fall in `leaf`.
struct LeafBatch {
    mean: Vec<f64>,
    var: Vec<f64>,
    joint: Vec<JointTerms>,
}

fn predict_leaf(
    prior: &Prior,
    post: &Posterior,
    leaf: RegionId,
    targets: &[Site],
    opts: PredictOptions,
) -> Result<LeafBatch> {
    let tree = prior.tree();
    let lp = prior.region(leaf)?;
    let leaf_post = post
        .leaves
        .get(&leaf)
        .ok_or_else(|| Error::invalid(format!("posterior for leaf {leaf} is not available on this node")))?;
    let chain = tree.ancestors(leaf);
    let sizes = prior.block_sizes(&chain)?;
    let recs: Vec<&RegionPosterior> = chain
        .iter()
        .map(|c| {
            post.internal
                .get(c)
                .ok_or_else(|| Error::invalid(format!("posterior record for {c} is not available on this node")))
        })
        .collect::<Result<_>>()?;
    let mu = concat(recs.iter().map(|r| &r.mean));
    let z = lp.z.as_ref().expect("leaf prior");
    let nt = targets.len();

    let vt = prior.chain_basis(&chain, targets)?; // nt × R
    let mut c = prior.spec.latent_matrix(&lp.sites, targets); // n × nt
    if vt.ncols() > 0 && lp.n_knots() > 0 {
        c.gemm(-1.0, &lp.basis, &vt.transpose(), 1.0);
    }
    let h = lp.factor.solve_l(&c); // n × nt
    let resid = &leaf_post.z_y - z * &mu;
    let mean_v = &vt * &mu + h.transpose() * resid;

    // a = v - Zᵀ h, eliminated level by level from the deepest ancestor.
    let mut acc = vt.transpose(); // R × nt
    if lp.n_knots() > 0 && acc.nrows() > 0 {
        acc.gemm_tr(-1.0, z, &h, 1.0);
    }
    let mut var = vec![0.0; nt];
    let mut us: Vec<DMatrix<f64>> = vec![DMatrix::zeros(0, 0); chain.len()];
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |o, s| {
            let cur = *o;
            *o += s;
            Some(cur)
        })
        .collect();
    for k in (0..chain.len()).rev() {
        let (off, rk) = (offsets[k], sizes[k]);
        let block = acc.rows(off, rk).clone_owned();
        let u = Cholesky::from_l(recs[k].l_lambda.clone()).solve_l(&block);
        for j in 0..nt {
            var[j] += u.column(j).norm_squared();
        }
        if off > 0 && rk > 0 {
            let mut upper = acc.rows_mut(0, off);
            upper.gemm_tr(-1.0, &recs[k].coupling, &u, 1.0);
        }
        us[k] = u;
    }
    for j in 0..nt {
        let s = &targets[j];
        let w = prior.spec.latent(s, s) - vt.row(j).norm_squared();
        var[j] += w - h.column(j).norm_squared();
        if opts.include_nugget {
            var[j] += prior.spec.nugget(s);
        }
    }
    let joint = if opts.joint {
        (0..nt)
            .map(|j| JointTerms {
                leaf,
                chain: chain.clone(),
                u: us.iter().map(|u| u.column(j).clone_owned()).collect(),
                v: vt.row(j).transpose(),
                h: h.column(j).clone_owned(),
                site: targets[j],
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(LeafBatch {
        mean: mean_v.iter().copied().collect(),
        var,
        joint,
    })
}

/// Posterior predictive distribution at `targets`.
pub fn predict(prior: &Prior, post: &Posterior, targets: &[LonLat], opts: PredictOptions) -> Result<PredictionField> {
    if opts.joint && targets.len() > MAX_JOINT {
        return Err(Error::invalid(format!(
            "joint covariance limited to {MAX_JOINT} locations, got {}",
            targets.len()
        )));
    }
    let tree = prior.tree();
    let mut field = PredictionField {
        locations: targets.to_vec(),
        mean: vec![f64::NAN; targets.len()],
        sd: vec![f64::NAN; targets.len()],
        errors: Vec::new(),
        joint: None,
    };
    let mut groups: Vec<(RegionId, Vec<usize>)> = Vec::new();
    let mut pos: HashMap<RegionId, usize> = HashMap::new();
    for (i, p) in targets.iter().enumerate() {
        match tree.route(*p) {
            Some(leaf) => {
                let g = *pos.entry(leaf).or_insert_with(|| {
                    groups.push((leaf, Vec::new()));
                    groups.len() - 1
                });
                groups[g].1.push(i);
            }
            None => field.errors.push((i, format!("location {p} lies outside the level-1 region"))),
        }
    }
    let batches: Vec<(Vec<usize>, Result<LeafBatch>)> = groups
        .par_iter()
        .map(|(leaf, idx)| {
            let sites: Result<Vec<Site>> = idx.iter().map(|&i| prior.spec.site(targets[i])).collect();
            let res = sites.and_then(|s| predict_leaf(prior, post, *leaf, &s, opts));
            (idx.clone(), res)
        })
        .collect();
    let mut terms: Vec<Option<JointTerms>> = vec![None; targets.len()];
    for (idx, res) in batches {
        match res {
            Ok(b) => {
                for (k, &i) in idx.iter().enumerate() {
                    field.mean[i] = b.mean[k];
                    field.sd[i] = b.var[k].max(0.0).sqrt();
                }
                for (k, t) in b.joint.into_iter().enumerate() {
                    terms[idx[k]] = Some(t);
                }
            }
            Err(e @ Error::Numerical { .. }) => return Err(e),
            Err(e) => {
                for &i in &idx {
                    field.errors.push((i, e.to_string()));
                }
            }
        }
    }
    field.errors.sort_by_key(|e| e.0);
    if opts.joint {
        field.joint = Some(joint_covariance(prior, &terms, opts));
    }
    Ok(field)
}

fn joint_covariance(prior: &Prior, terms: &[Option<JointTerms>], opts: PredictOptions) -> DMatrix<f64> {
    let n = terms.len();
    let mut out = DMatrix::from_element(n, n, f64::NAN);
    for i in 0..n {
        for j in 0..=i {
            let (Some(a), Some(b)) = (&terms[i], &terms[j]) else {
                continue;
            };
            let common = common_prefix(&a.chain, &b.chain);
            let mut c: f64 = (0..common).map(|k| a.u[k].dot(&b.u[k])).sum();
            if a.leaf == b.leaf {
                c += prior.spec.latent(&a.site, &b.site) - a.v.dot(&b.v) - a.h.dot(&b.h);
                if opts.include_nugget && a.site.coincides(&b.site) {
                    c += prior.spec.nugget(&a.site);
                }
            }
            out[(i, j)] = c;
            out[(j, i)] = c;
        }
    }
    out
}

/// Largest problem the dense reference solver accepts.
pub const DENSE_LIMIT: usize = 5000;

/// Textbook Gaussian conditioning: `k_oo` includes the noise.
/// Returns the conditional mean and covariance at the targets.
pub fn dense_conditional(
    k_oo: &DMatrix<f64>,
    y: &DVector<f64>,
    k_to: &DMatrix<f64>,
    k_tt: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = k_oo.nrows();
    if n > DENSE_LIMIT {
        return Err(Error::invalid(format!("dense solver limited to {DENSE_LIMIT} observations, got {n}")));
    }
    let chol = Cholesky::new(k_oo, "dense covariance")?;
    let alpha = chol.solve_vec(y);
    let mean = k_to * alpha;
    let w = chol.solve_l(&k_to.transpose());
    let cov = k_tt - w.transpose() * w;
    Ok((mean, cov))
}

/// Gaussian log-density of `y` under `N(0, k)`.
pub fn dense_log_likelihood(k: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    let n = k.nrows();
    if n > DENSE_LIMIT {
        return Err(Error::invalid(format!("dense solver limited to {DENSE_LIMIT} observations, got {n}")));
    }
    let chol = Cholesky::new(k, "dense covariance")?;
    let z = chol.solve_l_vec(y);
    Ok(-0.5 * (chol.log_det() + z.norm_squared() + n as f64 * LN_2PI))
}

/// Exact kriging under the kernel itself: observation noise τ²(s) on the
/// observation diagonal, latent covariance at the targets (plus τ² on the
/// target diagonal when the spec includes the nugget).
pub fn dense_gp_oracle(
    obs: &[LonLat],
    y: &[f64],
    targets: &[LonLat],
    spec: &KernelSpec,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if obs.len() > DENSE_LIMIT {
        return Err(Error::invalid(format!("dense solver limited to {DENSE_LIMIT} observations, got {}", obs.len())));
    }
    let so = spec.sites(obs)?;
    let st = spec.sites(targets)?;
    let mut k_oo = spec.latent_matrix(&so, &so);
    for (i, s) in so.iter().enumerate() {
        k_oo[(i, i)] += spec.nugget(s);
    }
    let k_to = spec.latent_matrix(&st, &so);
    let mut k_tt = spec.latent_matrix(&st, &st);
    if spec.include_nugget {
        for (i, s) in st.iter().enumerate() {
            k_tt[(i, i)] += spec.nugget(s);
        }
    }
    dense_conditional(&k_oo, &DVector::from_column_slice(y), &k_to, &k_tt)
}

/// Outcome of [`stationary_mle_mra`].
#[derive(Clone, Debug, PartialEq)]
pub struct MleFit {
    pub params: StationaryMaternParams,
    pub log_likelihood: f64,
    pub initial_log_likelihood: f64,
    pub converged: bool,
    pub evaluations: usize,
}

/// Options for [`stationary_mle_mra`].
#[derive(Clone, Copy, Debug)]
pub struct MleOptions {
    /// Estimate ν as well; otherwise it stays at its initial value.
    pub free_nu: bool,
    pub max_evals: usize,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions {
            free_nu: false,
            max_evals: 200,
        }
    }
}

/// M-RA log-likelihood of `y` under stationary parameters.
pub fn mra_log_likelihood(tree: &Arc<RegionTree>, y: &[f64], p: &StationaryMaternParams) -> Result<f64> {
    let spec = KernelSpec::stationary(*p, false)?;
    let prior = Prior::build(tree.clone(), &spec, None)?;
    Ok(posterior_pass(&prior, y)?.log_likelihood.expect("root on this node"))
}

/// Maximum-likelihood stationary Matérn parameters under the M-RA model.
///
/// The partial sill is profiled out: with `τ² = κ σ²` the M-RA covariance is
/// proportional to σ², so σ̂² = quad/n in closed form and the simplex search
/// runs over (log β, log κ[, log ν]).
pub fn stationary_mle_mra(tree: &RegionTree, y: &[f64], init: StationaryMaternParams, opts: MleOptions) -> Result<MleFit> {
    init.validate()?;
    let tree = Arc::new(tree.clone());
    let n = y.len() as f64;
    let profile = |x: &[f64]| -> Option<(f64, StationaryMaternParams)> {
        let beta = x[0].exp();
        let kappa = x[1].exp();
        let nu = if opts.free_nu { x[2].exp() } else { init.nu };
        if !(beta.is_finite() && kappa.is_finite() && nu.is_finite()) || nu > 10.0 {
            return None;
        }
        let unit = StationaryMaternParams { sigma2: 1.0, beta, nu, tau2: kappa };
        let spec = KernelSpec::stationary(unit, false).ok()?;
        let prior = Prior::build(tree.clone(), &spec, None).ok()?;
        let post = posterior_pass(&prior, y).ok()?;
        let root = post.root?;
        let (quad1, logdet1) = (root.quad, root.logdet);
        let sigma2 = quad1 / n;
        let ll = -0.5 * (n * sigma2.ln() + logdet1 + n + n * LN_2PI);
        Some((ll, StationaryMaternParams { sigma2, beta, nu, tau2: kappa * sigma2 }))
    };
    let mut x0 = vec![init.beta.ln(), (init.tau2.max(1e-10 * init.sigma2) / init.sigma2).ln()];
    if opts.free_nu {
        x0.push(init.nu.ln());
    }
    let init_ll = {
        let spec = KernelSpec::stationary(init, false)?;
        let prior = Prior::build(tree.clone(), &spec, None)?;
        posterior_pass(&prior, y)?.log_likelihood.expect("root")
    };
    let mut evals = 0usize;
    let nm = NelderMeadOptions {
        max_evals: opts.max_evals,
        f_tol: 1e-6,
        x_tol: 1e-4,
        initial_step: 0.5,
    };
    let best = multistart(
        |x| {
            evals += 1;
            // κ below 1e-10 adds nothing but conditioning trouble
            if x[1] < (1e-10f64).ln() {
                return f64::INFINITY;
            }
            profile(x).map(|(ll, _)| -ll).unwrap_or(f64::INFINITY)
        },
        &[x0.clone()],
        &nm,
    )
    .expect("one start");
    let (ll, params) = profile(&best.x).ok_or_else(|| Error::Numerical {
        region: RegionId::ROOT,
        msg: "likelihood evaluation failed at the optimum".into(),
    })?;
    if !best.converged {
        log::warn!("stationary MLE did not converge within {} evaluations", opts.max_evals);
    }
    Ok(MleFit {
        params,
        log_likelihood: ll,
        initial_log_likelihood: init_ll,
        converged: best.converged,
        evaluations: evals,
    })
}

#[cfg(test)]
mod tests;
