//! Hierarchical decomposition of the domain into the region tree.
//!
//! Level 1 holds a single root region. Every region either has children at the
//! next level, whose boundaries partition it, or is a leaf whose knots are the
//! observation locations it contains. Leaves may sit at different levels.
//!
//! Routing is first-match: a point belongs to the lowest-index child whose
//! closed boundary contains it.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geo::{GeoBox, LonLat, OceanMask, Ring};

/// Region identifier: level (1-based) and index within the level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionId {
    pub level: u32,
    pub index: u32,
}

impl RegionId {
    pub const ROOT: RegionId = RegionId { level: 1, index: 0 };

    pub fn new(level: u32, index: u32) -> Self {
        RegionId { level, index }
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.level, self.index)
    }
}

/// Region boundary: a lon/lat box, optionally intersected with a polygon ring.
#[derive(Clone, Debug, PartialEq)]
pub struct Boundary {
    pub bbox: GeoBox,
    pub ring: Option<Ring>,
}

impl Boundary {
    pub fn from_box(bbox: GeoBox) -> Self {
        Boundary { bbox, ring: None }
    }

    /// Polygon boundary. Rings must not cross the antimeridian.
    pub fn from_ring(ring: Ring) -> Result<Self> {
        let (lo0, lo1, la0, la1) = ring.bbox();
        Ok(Boundary {
            bbox: GeoBox::new(lo0, lo1, la0, la1)?,
            ring: Some(ring),
        })
    }

    /// Closed membership.
    pub fn contains(&self, p: LonLat) -> bool {
        self.bbox.contains(p) && self.ring.as_ref().is_none_or(|r| r.contains_closed(p))
    }

    fn with_box(&self, bbox: GeoBox) -> Self {
        Boundary {
            bbox,
            ring: self.ring.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    File,
    Auto,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub id: RegionId,
    pub boundary: Boundary,
    pub parent: Option<RegionId>,
    pub children: Vec<RegionId>,
    /// Knot locations; for leaves, the locations of `obs` in the same order.
    pub knots: Vec<LonLat>,
    /// Indices of the observations held by a leaf.
    pub obs: Vec<usize>,
    pub provenance: Provenance,
}

impl Region {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn level(&self) -> u32 {
        self.id.level
    }
}

/// The hierarchical decomposition. Regions are stored level by level.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionTree {
    levels: Vec<Vec<Region>>,
    /// Leaf-size bound used when the tree was completed, if any.
    pub threshold: Option<usize>,
    /// Knots per auto-split region.
    pub r: usize,
}

/// Knot placement for [`kd_bisect`] intermediate regions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KnotRule {
    /// r observation locations drawn without replacement.
    FromObservations,
    /// r lattice points at cell centres of the region's box.
    Lattice,
}

impl RegionTree {
    /// Builds a tree from regions in any order and checks structural consistency.
    pub fn from_regions(regions: Vec<Region>) -> Result<Self> {
        let depth = regions.iter().map(|r| r.id.level).max().unwrap_or(0) as usize;
        if depth == 0 {
            return Err(Error::invalid("region tree has no regions"));
        }
        let mut levels: Vec<Vec<Region>> = vec![Vec::new(); depth];
        for r in regions {
            if r.id.level == 0 {
                return Err(Error::invalid(format!("region {} has level 0", r.id)));
            }
            levels[r.id.level as usize - 1].push(r);
        }
        for (m, lvl) in levels.iter_mut().enumerate() {
            lvl.sort_by_key(|r| r.id.index);
            for (i, r) in lvl.iter().enumerate() {
                if r.id.index as usize != i {
                    return Err(Error::invalid(format!(
                        "level {} region indices are not contiguous from 0 (found {})",
                        m + 1,
                        r.id
                    )));
                }
            }
        }
        if levels[0].len() != 1 {
            return Err(Error::invalid(format!(
                "level 1 must hold exactly one root region, found {}",
                levels[0].len()
            )));
        }
        let mut tree = RegionTree {
            levels,
            threshold: None,
            r: 0,
        };
        tree.link_children()?;
        Ok(tree)
    }

    /// Recomputes children lists from parent pointers (ordered by index).
    fn link_children(&mut self) -> Result<()> {
        let mut kids: HashMap<RegionId, Vec<RegionId>> = HashMap::new();
        for lvl in &self.levels {
            for r in lvl {
                match r.parent {
                    None if r.id.level == 1 => {}
                    None => return Err(Error::invalid(format!("region {} has no parent", r.id))),
                    Some(p) => {
                        if p.level + 1 != r.id.level || self.get(p).is_none() {
                            return Err(Error::invalid(format!(
                                "region {} names invalid parent {}",
                                r.id, p
                            )));
                        }
                        kids.entry(p).or_default().push(r.id);
                    }
                }
            }
        }
        for lvl in &mut self.levels {
            for r in lvl.iter_mut() {
                let mut c = kids.remove(&r.id).unwrap_or_default();
                c.sort();
                r.children = c;
            }
        }
        Ok(())
    }

    /// Number of levels M.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, m: u32) -> &[Region] {
        &self.levels[m as usize - 1]
    }

    pub fn get(&self, id: RegionId) -> Option<&Region> {
        self.levels
            .get((id.level as usize).checked_sub(1)?)?
            .get(id.index as usize)
    }

    pub fn region(&self, id: RegionId) -> &Region {
        self.get(id)
            .unwrap_or_else(|| panic!("region {id} not in tree"))
    }

    pub fn region_mut(&mut self, id: RegionId) -> &mut Region {
        &mut self.levels[id.level as usize - 1][id.index as usize]
    }

    pub fn root(&self) -> &Region {
        &self.levels[0][0]
    }

    pub fn regions(&self) -> impl Iterator<Item = &Region> {
        self.levels.iter().flatten()
    }

    pub fn n_regions(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    /// Ancestors from the root down to the parent of `id`.
    pub fn ancestors(&self, id: RegionId) -> Vec<RegionId> {
        let mut chain = Vec::new();
        let mut cur = self.region(id).parent;
        while let Some(p) = cur {
            chain.push(p);
            cur = self.region(p).parent;
        }
        chain.reverse();
        chain
    }

    /// Leaves in depth-first order (children visited by index).
    pub fn leaves_dfs(&self) -> Vec<RegionId> {
        let mut out = Vec::new();
        let mut stack = vec![RegionId::ROOT];
        while let Some(id) = stack.pop() {
            let r = self.region(id);
            if r.is_leaf() {
                out.push(id);
            } else {
                stack.extend(r.children.iter().rev());
            }
        }
        out
    }

    /// Regions in depth-first pre-order.
    pub fn dfs(&self) -> Vec<RegionId> {
        let mut out = Vec::new();
        let mut stack = vec![RegionId::ROOT];
        while let Some(id) = stack.pop() {
            out.push(id);
            stack.extend(self.region(id).children.iter().rev());
        }
        out
    }

    /// Leaf containing `p` under first-match routing, if inside the root.
    pub fn route(&self, p: LonLat) -> Option<RegionId> {
        let root = self.root();
        if !root.boundary.contains(p) {
            return None;
        }
        let mut cur = root;
        while !cur.is_leaf() {
            let next = cur
                .children
                .iter()
                .map(|c| self.region(*c))
                .find(|c| c.boundary.contains(p))?;
            cur = next;
        }
        Some(cur.id)
    }

    /// The chain root..=leaf for `p`.
    pub fn route_chain(&self, p: LonLat) -> Option<Vec<RegionId>> {
        let leaf = self.route(p)?;
        let mut chain = self.ancestors(leaf);
        chain.push(leaf);
        Some(chain)
    }

    pub fn max_leaf_obs(&self) -> usize {
        self.regions()
            .filter(|r| r.is_leaf())
            .map(|r| r.obs.len())
            .max()
            .unwrap_or(0)
    }

    /// Stores observation locations as leaf knots. Observations outside the
    /// root are skipped and counted in the returned value.
    pub fn attach_observations(&mut self, obs: &[LonLat]) -> usize {
        for lvl in &mut self.levels {
            for r in lvl.iter_mut().filter(|r| r.is_leaf()) {
                r.obs.clear();
                r.knots.clear();
            }
        }
        let mut outside = 0;
        for (i, p) in obs.iter().enumerate() {
            match self.route(*p) {
                Some(leaf) => {
                    let r = self.region_mut(leaf);
                    r.obs.push(i);
                    r.knots.push(*p);
                }
                None => outside += 1,
            }
        }
        outside
    }
}

/// Membership of observations in the tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Membership {
    pub leaf: Vec<Option<RegionId>>,
    /// `per_level[m-1][i]`: index of the level-m region holding observation i,
    /// `None` below its leaf or when outside the root.
    pub per_level: Vec<Vec<Option<u32>>>,
    pub outside: usize,
}

/// Maps each observation to its leaf and to its region at every level.
pub fn assign_observations(tree: &RegionTree, obs: &[LonLat]) -> Membership {
    use rayon::prelude::*;
    let chains: Vec<Option<Vec<RegionId>>> = obs.par_iter().map(|p| tree.route_chain(*p)).collect();
    let mut per_level = vec![vec![None; obs.len()]; tree.depth()];
    let mut leaf = vec![None; obs.len()];
    let mut outside = 0;
    for (i, c) in chains.iter().enumerate() {
        match c {
            Some(chain) => {
                for id in chain {
                    per_level[id.level as usize - 1][i] = Some(id.index);
                }
                leaf[i] = chain.last().copied();
            }
            None => outside += 1,
        }
    }
    if outside > 0 {
        log::warn!("{outside} observations fall outside the level-1 region and were rejected");
    }
    Membership {
        leaf,
        per_level,
        outside,
    }
}

/// Longer dimension in km, measured at the centroid latitude of `pts`.
fn split_axis_is_lon(bx: &GeoBox, pts: &[LonLat]) -> bool {
    let lat_c = if pts.is_empty() {
        bx.center().lat
    } else {
        pts.iter().map(|p| p.lat).sum::<f64>() / pts.len() as f64
    };
    let w = bx.lon_span().to_radians() * lat_c.to_radians().cos();
    let h = bx.lat_span().to_radians();
    w >= h
}

/// Splits `bx` at the coordinate mean of `pts` (midpoint when empty).
fn bisect(bx: &GeoBox, pts: &[LonLat], along_lon: bool) -> Option<(GeoBox, GeoBox)> {
    if along_lon {
        let cut = if pts.is_empty() {
            bx.lon_span() / 2.0
        } else {
            pts.iter().map(|p| bx.lon_offset(p.lon)).sum::<f64>() / pts.len() as f64
        };
        if !(cut > 0.0 && cut < bx.lon_span()) {
            return None;
        }
        Some(bx.split_lon(cut))
    } else {
        let cut = if pts.is_empty() {
            (bx.lat_min + bx.lat_max) / 2.0
        } else {
            pts.iter().map(|p| p.lat).sum::<f64>() / pts.len() as f64
        };
        if !(cut > bx.lat_min && cut < bx.lat_max) {
            return None;
        }
        Some(bx.split_lat(cut))
    }
}

/// Partitions `idx` between two boundaries with first-match routing.
fn route_pair(a: &Boundary, b: &Boundary, idx: &[usize], pts: &[LonLat]) -> (Vec<usize>, Vec<usize>) {
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for &i in idx {
        if a.contains(pts[i]) {
            left.push(i);
        } else if b.contains(pts[i]) {
            right.push(i);
        }
    }
    (left, right)
}

/// A region to be created at the next level.
struct Pending {
    parent: RegionId,
    /// Knots of every ancestor.
    taken: Vec<LonLat>,
    boundary: Boundary,
    obs: Vec<usize>,
}

/// Splits `bound` into two halves holding observations, trying the longer
/// dimension first. `None` when neither axis separates the points.
fn split_region(bound: &Boundary, idx: &[usize], pts: &[LonLat]) -> Option<[(Boundary, Vec<usize>); 2]> {
    let sub: Vec<LonLat> = idx.iter().map(|&i| pts[i]).collect();
    let first = split_axis_is_lon(&bound.bbox, &sub);
    for along_lon in [first, !first] {
        if let Some((b0, b1)) = bisect(&bound.bbox, &sub, along_lon) {
            let (c0, c1) = (bound.with_box(b0), bound.with_box(b1));
            let (l, r) = route_pair(&c0, &c1, idx, pts);
            if !l.is_empty() && !r.is_empty() {
                return Some([(c0, l), (c1, r)]);
            }
        }
    }
    None
}

fn coord_key(p: &LonLat) -> (u64, u64) {
    (p.lon.to_bits(), p.lat.to_bits())
}

/// Up to `r` distinct observation locations, none of them an ancestor knot.
fn draw_knots(idx: &[usize], pts: &[LonLat], r: usize, taken: &[LonLat], rng: &mut ChaCha8Rng) -> Vec<LonLat> {
    let mut seen: HashSet<(u64, u64)> = taken.iter().map(coord_key).collect();
    let pool: Vec<LonLat> = idx.iter().map(|&i| pts[i]).filter(|p| seen.insert(coord_key(p))).collect();
    if pool.len() <= r {
        return pool;
    }
    let mut chosen: Vec<usize> = sample(rng, pool.len(), r).into_iter().collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|k| pool[k]).collect()
}

fn split_or_fail(id: RegionId, bound: &Boundary, idx: &[usize], pts: &[LonLat]) -> Result<[(Boundary, Vec<usize>); 2]> {
    split_region(bound, idx, pts).ok_or_else(|| {
        Error::invalid(format!(
            "region {id} holds {} observations at indistinguishable coordinates and cannot be split",
            idx.len()
        ))
    })
}

/// Completes a coarse tree by recursive bisection until every leaf holds
/// fewer than `threshold` observations.
///
/// A coarse leaf under the threshold stays a leaf and its knots are replaced
/// by its observations. Auto-created intermediate regions get `r` knots drawn
/// from their observations.
pub fn auto_split(coarse: &RegionTree, obs: &[LonLat], threshold: usize, r: usize, seed: u64) -> Result<RegionTree> {
    if threshold < 1 {
        return Err(Error::invalid("split threshold must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut held: HashMap<RegionId, Vec<usize>> = HashMap::new();
    let mut outside = 0;
    for (i, p) in obs.iter().enumerate() {
        match coarse.route(*p) {
            Some(l) => held.entry(l).or_default().push(i),
            None => outside += 1,
        }
    }
    if outside > 0 {
        log::warn!("{outside} observations fall outside the level-1 region and were rejected");
    }

    let mut levels: Vec<Vec<Region>> = Vec::new();
    let mut pending: Vec<Pending> = Vec::new();
    let mut m = 0usize;
    while m < coarse.levels.len() || !pending.is_empty() {
        let level = m as u32 + 1;
        let mut out: Vec<Region> = Vec::new();
        let mut next: Vec<Pending> = Vec::new();
        if let Some(lvl) = coarse.levels.get(m) {
            for reg in lvl {
                let mut reg = reg.clone();
                reg.obs.clear();
                if reg.is_leaf() {
                    let idx = held.remove(&reg.id).unwrap_or_default();
                    if idx.len() < threshold {
                        reg.knots = idx.iter().map(|&i| obs[i]).collect();
                        reg.obs = idx;
                    } else {
                        let mut taken: Vec<LonLat> = coarse
                            .ancestors(reg.id)
                            .iter()
                            .flat_map(|a| coarse.region(*a).knots.iter().copied())
                            .collect();
                        taken.extend_from_slice(&reg.knots);
                        for (boundary, o) in split_or_fail(reg.id, &reg.boundary, &idx, obs)? {
                            next.push(Pending { parent: reg.id, taken: taken.clone(), boundary, obs: o });
                        }
                    }
                }
                out.push(reg);
            }
        }
        for p in std::mem::take(&mut pending) {
            let id = RegionId::new(level, out.len() as u32);
            let mut reg = Region {
                id,
                boundary: p.boundary,
                parent: Some(p.parent),
                children: Vec::new(),
                knots: Vec::new(),
                obs: Vec::new(),
                provenance: Provenance::Auto,
            };
            if p.obs.len() < threshold {
                reg.knots = p.obs.iter().map(|&i| obs[i]).collect();
                reg.obs = p.obs;
            } else {
                reg.knots = draw_knots(&p.obs, obs, r, &p.taken, &mut rng);
                let mut taken = p.taken;
                taken.extend_from_slice(&reg.knots);
                for (boundary, o) in split_or_fail(id, &reg.boundary, &p.obs, obs)? {
                    next.push(Pending { parent: id, taken: taken.clone(), boundary, obs: o });
                }
            }
            out.push(reg);
        }
        levels.push(out);
        pending = next;
        m += 1;
    }
    let mut tree = RegionTree { levels, threshold: Some(threshold), r };
    tree.link_children()?;
    Ok(tree)
}

/// Uniform binary tree of `depth` levels over `domain`, each region bisected
/// along its longer dimension at the coordinate mean of its observations (the
/// midpoint when it holds none). Leaves hold the observations.
pub fn kd_bisect(obs: &[LonLat], domain: GeoBox, depth: usize, r: usize, rule: KnotRule, seed: u64) -> Result<RegionTree> {
    if depth == 0 {
        return Err(Error::invalid("tree depth must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let root_bound = Boundary::from_box(domain);
    let all: Vec<usize> = (0..obs.len()).filter(|&i| root_bound.contains(obs[i])).collect();
    let mut levels: Vec<Vec<Region>> = Vec::new();
    let mut current: Vec<(Option<RegionId>, Vec<LonLat>, Boundary, Vec<usize>)> = vec![(None, Vec::new(), root_bound, all)];
    for m in 0..depth {
        let level = m as u32 + 1;
        let mut out = Vec::new();
        let mut next = Vec::new();
        for (parent, taken, boundary, idx) in current {
            let id = RegionId::new(level, out.len() as u32);
            let leaf = m + 1 == depth;
            let knots = if leaf {
                idx.iter().map(|&i| obs[i]).collect()
            } else {
                match rule {
                    KnotRule::FromObservations => draw_knots(&idx, obs, r, &taken, &mut rng),
                    KnotRule::Lattice => lattice_knots(&boundary.bbox, r),
                }
            };
            if !leaf {
                let sub: Vec<LonLat> = idx.iter().map(|&i| obs[i]).collect();
                let along_lon = split_axis_is_lon(&boundary.bbox, &sub);
                let (b0, b1) = bisect(&boundary.bbox, &sub, along_lon)
                    .or_else(|| bisect(&boundary.bbox, &[], along_lon))
                    .ok_or_else(|| Error::invalid(format!("region {id} cannot be bisected")))?;
                let (c0, c1) = (boundary.with_box(b0), boundary.with_box(b1));
                let (l, rr) = route_pair(&c0, &c1, &idx, obs);
                let mut below = taken.clone();
                below.extend_from_slice(&knots);
                next.push((Some(id), below.clone(), c0, l));
                next.push((Some(id), below, c1, rr));
            }
            out.push(Region {
                id,
                boundary,
                parent,
                children: Vec::new(),
                obs: if leaf { idx } else { Vec::new() },
                knots,
                provenance: Provenance::Auto,
            });
        }
        levels.push(out);
        current = next;
    }
    let mut tree = RegionTree { levels, threshold: None, r };
    tree.link_children()?;
    Ok(tree)
}

/// `r` points at the cell centres of a near-square lattice over `bx`.
pub fn lattice_knots(bx: &GeoBox, r: usize) -> Vec<LonLat> {
    if r == 0 {
        return Vec::new();
    }
    let aspect = (bx.width_km() / bx.height_km()).max(1e-6);
    let nx = ((r as f64 * aspect).sqrt().round() as usize).clamp(1, r);
    let ny = r.div_ceil(nx);
    let mut out = Vec::with_capacity(r);
    'outer: for iy in 0..ny {
        for ix in 0..nx {
            if out.len() == r {
                break 'outer;
            }
            let lon = bx.lon_min() + (ix as f64 + 0.5) / nx as f64 * bx.lon_span();
            let lat = bx.lat_min + (iy as f64 + 0.5) / ny as f64 * bx.lat_span();
            out.push(LonLat { lon: crate::geo::normalize_lon(lon), lat });
        }
    }
    out
}

/// One problem found by [`validate_tree`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    KnotOutsideRegion { region: RegionId, knot: LonLat },
    KnotOnLand { region: RegionId, knot: LonLat },
    LeafTooLarge { region: RegionId, count: usize, threshold: usize },
    SiblingOverlap { a: RegionId, b: RegionId, at: LonLat },
    CoverageGap { parent: RegionId, at: LonLat },
    ChildOutsideParent { child: RegionId, at: LonLat },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::KnotOutsideRegion { region, knot } => write!(f, "knot {knot} lies outside region {region}"),
            Violation::KnotOnLand { region, knot } => write!(f, "knot {knot} of region {region} lies on land"),
            Violation::LeafTooLarge { region, count, threshold } => {
                write!(f, "leaf {region} holds {count} observations (threshold {threshold})")
            }
            Violation::SiblingOverlap { a, b, at } => write!(f, "siblings {a} and {b} overlap at {at}"),
            Violation::CoverageGap { parent, at } => write!(f, "children of {parent} leave {at} uncovered"),
            Violation::ChildOutsideParent { child, at } => write!(f, "region {child} extends outside its parent at {at}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeReport {
    pub violations: Vec<Violation>,
    pub depth: usize,
    pub n_regions: usize,
    pub n_leaves: usize,
    pub max_leaf_obs: usize,
    /// Total knots per level.
    pub knots_per_level: Vec<usize>,
}

/// Samples per parent used by the Monte-Carlo partition check.
const PARTITION_SAMPLES: usize = 256;

/// Checks nesting, knot placement and leaf sizes. Report-only.
pub fn validate_tree(tree: &RegionTree, mask: &OceanMask, threshold: Option<usize>) -> TreeReport {
    let mut v = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for reg in tree.regions() {
        // Observation-derived leaf knots are exempt from the land test.
        let placed = reg.obs.is_empty();
        for k in &reg.knots {
            if !reg.boundary.contains(*k) {
                v.push(Violation::KnotOutsideRegion { region: reg.id, knot: *k });
            } else if placed && !mask.is_ocean(*k) {
                v.push(Violation::KnotOnLand { region: reg.id, knot: *k });
            }
        }
        if !reg.is_leaf() {
            partition_check(tree, reg, mask, &mut rng, &mut v);
        } else if let Some(t) = threshold.or(tree.threshold) {
            if reg.obs.len() >= t {
                v.push(Violation::LeafTooLarge { region: reg.id, count: reg.obs.len(), threshold: t });
            }
        }
    }
    let leaves: Vec<&Region> = tree.regions().filter(|r| r.is_leaf()).collect();
    TreeReport {
        violations: v,
        depth: tree.depth(),
        n_regions: tree.n_regions(),
        n_leaves: leaves.len(),
        max_leaf_obs: leaves.iter().map(|r| r.obs.len()).max().unwrap_or(0),
        knots_per_level: tree.levels.iter().map(|l| l.iter().map(|r| r.knots.len()).sum()).collect(),
    }
}

/// Monte-Carlo check that the children of `reg` partition its ocean area.
fn partition_check(tree: &RegionTree, reg: &Region, mask: &OceanMask, rng: &mut ChaCha8Rng, v: &mut Vec<Violation>) {
    let kids: Vec<&Region> = reg.children.iter().map(|c| tree.region(*c)).collect();
    let bb = &reg.boundary.bbox;
    let mut gap_reported = false;
    let mut overlaps: Vec<(RegionId, RegionId)> = Vec::new();
    for _ in 0..PARTITION_SAMPLES {
        let p = LonLat {
            lon: crate::geo::normalize_lon(bb.lon_min() + rng.random::<f64>() * bb.lon_span()),
            lat: bb.lat_min + rng.random::<f64>() * bb.lat_span(),
        };
        if !mask.is_ocean(p) {
            continue;
        }
        let inside: Vec<RegionId> = kids.iter().filter(|k| k.boundary.contains(p)).map(|k| k.id).collect();
        if reg.boundary.contains(p) {
            if inside.is_empty() && !gap_reported {
                v.push(Violation::CoverageGap { parent: reg.id, at: p });
                gap_reported = true;
            }
            if inside.len() > 1 && !overlaps.contains(&(inside[0], inside[1])) {
                overlaps.push((inside[0], inside[1]));
                v.push(Violation::SiblingOverlap { a: inside[0], b: inside[1], at: p });
            }
        } else if let Some(&c) = inside.first() {
            v.push(Violation::ChildOutsideParent { child: c, at: p });
        }
    }
}

const SPEC_MAGIC: &str = "nsmra-partition";
const SPEC_VERSION: u32 = 1;

/// Writes the partition-spec text format (see [`parse_partition`]).
pub fn export_partition(tree: &RegionTree) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{SPEC_MAGIC} {SPEC_VERSION}");
    for reg in tree.regions() {
        let _ = writeln!(s, "region {} {}", reg.id.level, reg.id.index);
        match reg.parent {
            Some(p) => {
                let _ = writeln!(s, "parent {} {}", p.level, p.index);
            }
            None => s.push_str("parent none\n"),
        }
        let b = &reg.boundary.bbox;
        let _ = writeln!(s, "box {:?} {:?} {:?} {:?}", b.lon_min(), b.lon_max(), b.lat_min, b.lat_max);
        if let Some(ring) = &reg.boundary.ring {
            for p in &ring.vertices {
                let _ = writeln!(s, "vertex {:?} {:?}", p.lon, p.lat);
            }
        }
        if reg.provenance == Provenance::Auto {
            s.push_str("auto\n");
        }
        if reg.is_leaf() && !reg.obs.is_empty() {
            s.push_str("obs");
            for i in &reg.obs {
                let _ = write!(s, " {i}");
            }
            s.push('\n');
        }
        for k in &reg.knots {
            let _ = writeln!(s, "knot {:?} {:?}", k.lon, k.lat);
        }
        s.push_str("end\n");
    }
    s
}

/// Parses the partition-spec format:
///
/// ```text
/// nsmra-partition 1
/// region <level> <index>
/// parent <level> <index> | parent none
/// box <lon_min> <lon_max> <lat_min> <lat_max>   (or vertex lines)
/// vertex <lon> <lat>                             (zero or more)
/// knot <lon> <lat>                               (zero or more)
/// obs <i> <i> ...                                (optional, leaves)
/// auto                                           (optional)
/// end
/// ```
///
/// `#` starts a comment. The result is checked with [`check_coarse`].
pub fn parse_partition(text: &str, path: &Path, mask: &OceanMask) -> Result<RegionTree> {
    let mut regions = Vec::new();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim())).filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, l)) if l == format!("{SPEC_MAGIC} {SPEC_VERSION}") => {}
        Some((n, _)) => return Err(Error::parse(path, n, format!("expected header `{SPEC_MAGIC} {SPEC_VERSION}`"))),
        None => return Err(Error::parse(path, 1, "empty partition file")),
    }
    let nums = |n: usize, toks: &[&str], want: usize| -> Result<Vec<f64>> {
        if toks.len() != want {
            return Err(Error::parse(path, n, format!("expected {want} numbers")));
        }
        toks.iter().map(|t| t.parse::<f64>().map_err(|_| Error::parse(path, n, format!("bad number `{t}`")))).collect()
    };
    let mut cur: Option<(usize, Region, Vec<LonLat>, Option<GeoBox>)> = None;
    for (n, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        let (kw, rest) = (toks[0], &toks[1..]);
        if kw == "region" {
            if cur.is_some() {
                return Err(Error::parse(path, n, "`region` before `end`"));
            }
            let v = nums(n, rest, 2)?;
            let id = RegionId::new(v[0] as u32, v[1] as u32);
            cur = Some((
                n,
                Region { id, boundary: Boundary::from_box(GeoBox::whole_sphere()), parent: None, children: Vec::new(), knots: Vec::new(), obs: Vec::new(), provenance: Provenance::File },
                Vec::new(),
                None,
            ));
            continue;
        }
        if kw == "end" {
            let Some((start, mut reg, verts, bx)) = cur.take() else {
                return Err(Error::parse(path, n, "`end` outside a region block"));
            };
            reg.boundary = match (bx, verts.is_empty()) {
                (Some(b), true) => Boundary::from_box(b),
                (b, false) => {
                    let ring = Ring::new(verts).map_err(|e| Error::parse(path, start, e.to_string()))?;
                    let mut bd = Boundary::from_ring(ring).map_err(|e| Error::parse(path, start, e.to_string()))?;
                    if let Some(b) = b {
                        bd.bbox = b;
                    }
                    bd
                }
                (None, true) => return Err(Error::parse(path, start, "region has neither box nor vertices")),
            };
            regions.push(reg);
            continue;
        }
        let Some((_, reg, verts, bx)) = cur.as_mut() else {
            return Err(Error::parse(path, n, format!("`{kw}` outside a region block")));
        };
        match kw {
            "parent" => {
                reg.parent = if rest == ["none"] {
                    None
                } else {
                    let v = nums(n, rest, 2)?;
                    Some(RegionId::new(v[0] as u32, v[1] as u32))
                }
            }
            "box" => {
                let v = nums(n, rest, 4)?;
                *bx = Some(GeoBox::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::parse(path, n, e.to_string()))?);
            }
            "vertex" => {
                let v = nums(n, rest, 2)?;
                verts.push(LonLat { lon: v[0], lat: v[1] });
            }
            "knot" => {
                let v = nums(n, rest, 2)?;
                reg.knots.push(LonLat::new(v[0], v[1]).map_err(|e| Error::parse(path, n, e.to_string()))?);
            }
            "obs" => {
                for t in rest {
                    reg.obs.push(t.parse().map_err(|_| Error::parse(path, n, format!("bad index `{t}`")))?);
                }
            }
            "auto" => reg.provenance = Provenance::Auto,
            _ => return Err(Error::parse(path, n, format!("unknown keyword `{kw}`"))),
        }
    }
    if let Some((start, ..)) = cur {
        return Err(Error::parse(path, start, "region block not terminated by `end`"));
    }
    let tree = RegionTree::from_regions(regions)?;
    check_coarse(&tree, mask)?;
    Ok(tree)
}

pub fn load_partition(path: &Path, mask: &OceanMask) -> Result<RegionTree> {
    let text = std::fs::read_to_string(path)?;
    parse_partition(&text, path, mask)
}

/// Rejects overlapping siblings, coverage gaps, children outside parents and
/// knots on land or outside their region. Leaf sizes are not checked.
pub fn check_coarse(tree: &RegionTree, mask: &OceanMask) -> Result<()> {
    let report = validate_tree(tree, mask, Some(usize::MAX));
    if let Some(first) = report.violations.first() {
        let all: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        log::error!("partition violations: {}", all.join("; "));
        return Err(Error::invalid(first.to_string()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn uniform_points(n: usize, bx: &GeoBox, seed: u64) -> Vec<LonLat> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| LonLat {
                lon: crate::geo::normalize_lon(bx.lon_min() + rng.random::<f64>() * bx.lon_span()),
                lat: bx.lat_min + rng.random::<f64>() * bx.lat_span(),
            })
            .collect()
    }

    fn single_root(bx: GeoBox, knots: Vec<LonLat>) -> RegionTree {
        RegionTree::from_regions(vec![Region {
            id: RegionId::ROOT,
            boundary: Boundary::from_box(bx),
            parent: None,
            children: vec![],
            knots,
            obs: vec![],
            provenance: Provenance::File,
        }])
        .unwrap()
    }

    #[test]
    fn single_level_spec_with_49_knots() {
        let mut text = String::from("nsmra-partition 1\nregion 1 0\nparent none\nbox -30 30 -20 20\n");
        for i in 0..7 {
            for j in 0..7 {
                text += &format!("knot {} {}\n", -27.0 + 9.0 * i as f64, -18.0 + 6.0 * j as f64);
            }
        }
        text += "end\n";
        let t = parse_partition(&text, Path::new("p.txt"), &OceanMask::all_ocean()).unwrap();
        assert_eq!(t.n_regions(), 1);
        assert_eq!(t.root().knots.len(), 49);
    }

    #[test]
    fn gap_and_overlap_rejected() {
        let gap = "nsmra-partition 1\nregion 1 0\nparent none\nbox 0 10 0 10\nend\n\
                   region 2 0\nparent 1 0\nbox 0 4 0 10\nend\nregion 2 1\nparent 1 0\nbox 6 10 0 10\nend\n";
        let e = parse_partition(gap, Path::new("p"), &OceanMask::all_ocean()).unwrap_err();
        assert!(e.to_string().contains("uncovered"), "{e}");
        let overlap = "nsmra-partition 1\nregion 1 0\nparent none\nbox 0 10 0 10\nend\n\
                   region 2 0\nparent 1 0\nbox 0 6 0 10\nend\nregion 2 1\nparent 1 0\nbox 4 10 0 10\nend\n";
        let e = parse_partition(overlap, Path::new("p"), &OceanMask::all_ocean()).unwrap_err();
        assert!(e.to_string().contains("2:0") && e.to_string().contains("2:1"), "{e}");
        let land = "nsmra-partition 1\nregion 1 0\nparent none\nbox 0 10 0 10\nknot 5 5\nend\n";
        let e = parse_partition(land, Path::new("p"), &OceanMask::all_land()).unwrap_err();
        assert!(e.to_string().contains("land"));
    }

    #[test]
    fn export_round_trip() {
        let bx = GeoBox::new(-20.0, 20.0, -10.0, 10.0).unwrap();
        let pts = uniform_points(3000, &bx, 1);
        let t = auto_split(&single_root(bx, vec![]), &pts, 500, 8, 3).unwrap();
        let text = export_partition(&t);
        let back = parse_partition(&text, Path::new("t"), &OceanMask::all_ocean()).unwrap();
        assert_eq!(back.n_regions(), t.n_regions());
        assert_eq!(export_partition(&back), text);
        assert_eq!(back.leaves_dfs(), t.leaves_dfs());
    }

    #[test]
    fn under_threshold_is_not_split() {
        let bx = GeoBox::new(0.0, 10.0, 0.0, 10.0).unwrap();
        let pts = uniform_points(1999, &bx, 2);
        let t = auto_split(&single_root(bx, vec![]), &pts, 2000, 10, 0).unwrap();
        assert_eq!(t.n_regions(), 1);
        assert_eq!(t.root().obs.len(), 1999);
    }

    #[test]
    fn two_to_one_box_splits_along_longer_axis() {
        // 20 x 10 degrees at the equator: longitude is the longer dimension
        let bx = GeoBox::new(0.0, 20.0, -5.0, 5.0).unwrap();
        let pts = uniform_points(4000, &bx, 3);
        let t = auto_split(&single_root(bx, vec![]), &pts, 2000, 10, 0).unwrap();
        let l2 = t.level(2);
        assert_eq!(l2.len(), 2);
        let (a, b) = (&l2[0].boundary.bbox, &l2[1].boundary.bbox);
        assert_eq!(a.lat_span(), 10.0);
        assert!((a.lon_span() + b.lon_span() - 20.0).abs() < 1e-9);
        for leaf in t.leaves_dfs() {
            assert!(t.region(leaf).obs.len() < 2000);
        }
        assert!(t.depth() <= 3);
    }

    #[test]
    fn degenerate_coordinates_cannot_split() {
        let bx = GeoBox::new(0.0, 10.0, 0.0, 10.0).unwrap();
        let pts = vec![LonLat { lon: 5.0, lat: 5.0 }; 3000];
        assert!(auto_split(&single_root(bx, vec![]), &pts, 2000, 10, 0).is_err());
    }

    #[test]
    fn boundary_tie_goes_to_lower_id() {
        let root = GeoBox::new(0.0, 10.0, 0.0, 10.0).unwrap();
        let (w, e) = root.split_lon(5.0);
        let mk = |id, bx, parent| Region {
            id,
            boundary: Boundary::from_box(bx),
            parent,
            children: vec![],
            knots: vec![],
            obs: vec![],
            provenance: Provenance::File,
        };
        let t = RegionTree::from_regions(vec![
            mk(RegionId::ROOT, root, None),
            mk(RegionId::new(2, 0), w, Some(RegionId::ROOT)),
            mk(RegionId::new(2, 1), e, Some(RegionId::ROOT)),
        ])
        .unwrap();
        assert_eq!(t.route(LonLat { lon: 5.0, lat: 3.0 }), Some(RegionId::new(2, 0)));
        assert_eq!(t.route(LonLat { lon: 7.0, lat: 3.0 }), Some(RegionId::new(2, 1)));
        assert_eq!(t.route(LonLat { lon: 12.0, lat: 3.0 }), None);
    }

    #[test]
    fn membership_counts_sum_per_level() {
        let bx = GeoBox::new(-40.0, 40.0, -30.0, 30.0).unwrap();
        let pts = uniform_points(10_000, &bx, 5);
        let t = auto_split(&single_root(bx, vec![]), &pts, 700, 16, 1).unwrap();
        let m = assign_observations(&t, &pts);
        assert_eq!(m.outside, 0);
        let mut covered = vec![false; pts.len()];
        for (lvl, ids) in m.per_level.iter().enumerate() {
            let mut counts = vec![0usize; t.level(lvl as u32 + 1).len()];
            for (i, id) in ids.iter().enumerate() {
                if let Some(k) = id {
                    counts[*k as usize] += 1;
                    // nesting: the parent of this region holds the observation one level up
                    if lvl > 0 {
                        let parent = t.region(RegionId::new(lvl as u32 + 1, *k)).parent.unwrap();
                        assert_eq!(m.per_level[lvl - 1][i], Some(parent.index));
                    }
                }
            }
            let leafy: usize = ids.iter().flatten().count();
            assert_eq!(counts.iter().sum::<usize>(), leafy);
        }
        for (i, l) in m.leaf.iter().enumerate() {
            covered[i] = l.is_some();
            assert_eq!(t.region(l.unwrap()).obs.contains(&i), true);
        }
        assert!(covered.iter().all(|c| *c));
        assert_eq!(m.per_level[0].iter().flatten().count(), pts.len());
    }

    #[test]
    fn validation_reports() {
        let bx = GeoBox::new(-20.0, 20.0, -10.0, 10.0).unwrap();
        let pts = uniform_points(4000, &bx, 9);
        let mut t = auto_split(&single_root(bx, vec![]), &pts, 600, 12, 7).unwrap();
        let rep = validate_tree(&t, &OceanMask::all_ocean(), None);
        assert!(rep.violations.is_empty(), "{:?}", rep.violations);
        assert!(rep.max_leaf_obs < 600);

        let inner = t.regions().find(|r| !r.is_leaf() && !r.knots.is_empty()).unwrap().id;
        t.region_mut(inner).knots[0] = LonLat { lon: 150.0, lat: 0.0 };
        let rep = validate_tree(&t, &OceanMask::all_ocean(), None);
        assert_eq!(rep.violations.len(), 1);
        assert!(matches!(rep.violations[0], Violation::KnotOutsideRegion { region, .. } if region == inner));

        let big = single_root(bx, vec![]);
        let mut big = auto_split(&big, &pts, 5000, 4, 0).unwrap();
        big.attach_observations(&pts);
        let rep = validate_tree(&big, &OceanMask::all_ocean(), Some(3000));
        assert!(matches!(rep.violations[0], Violation::LeafTooLarge { count: 4000, .. }));
    }

    #[test]
    fn auto_split_is_deterministic() {
        let bx = GeoBox::new(170.0, -150.0, -20.0, 20.0).unwrap();
        let pts = uniform_points(5000, &bx, 11);
        let a = export_partition(&auto_split(&single_root(bx, vec![]), &pts, 400, 9, 42).unwrap());
        let b = export_partition(&auto_split(&single_root(bx, vec![]), &pts, 400, 9, 42).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn kd_bisect_uniform_levels() {
        let bx = GeoBox::new(0.0, 10.0, 0.0, 10.0).unwrap();
        let pts = uniform_points(400, &bx, 2);
        for rule in [KnotRule::FromObservations, KnotRule::Lattice] {
            let t = kd_bisect(&pts, bx, 4, 6, rule, 0).unwrap();
            assert_eq!(t.depth(), 4);
            for m in 1..=4u32 {
                assert_eq!(t.level(m).len(), 1 << (m - 1));
            }
            for m in 1..=3u32 {
                for r in t.level(m) {
                    assert_eq!(r.knots.len(), 6);
                }
            }
            let total: usize = t.level(4).iter().map(|r| r.obs.len()).sum();
            assert_eq!(total, 400);
            assert!(validate_tree(&t, &OceanMask::all_ocean(), None).violations.is_empty());
        }
    }

    #[test]
    fn leaves_dfs_order() {
        let bx = GeoBox::new(0.0, 16.0, -1.0, 1.0).unwrap();
        let t = kd_bisect(&[], bx, 4, 1, KnotRule::Lattice, 0).unwrap();
        let leaves = t.leaves_dfs();
        assert_eq!(leaves.len(), 8);
        let idx: Vec<u32> = leaves.iter().map(|l| l.index).collect();
        assert_eq!(idx, (0..8).collect::<Vec<_>>());
    }
}
