//! Coordinates on the sphere, chordal geometry, lon/lat boxes, lattices and
//! the ocean mask.
//!
//! All distances are kilometres on a sphere of radius [`EARTH_RADIUS_KM`]
//! unless a radius is passed explicitly.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// A longitude/latitude pair in degrees, lon in [-180, 180), lat in [-90, 90].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LonLat {
    pub lon: f64,
    pub lat: f64,
}

/// Wraps a longitude into [-180, 180).
pub fn normalize_lon(lon: f64) -> f64 {
    let l = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if l >= 180.0 {
        l - 360.0
    } else {
        l
    }
}

impl LonLat {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !lat.is_finite() {
            return Err(Error::domain(format!("non-finite coordinate ({lon}, {lat})")));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::domain(format!("latitude {lat} outside [-90, 90]")));
        }
        Ok(LonLat {
            lon: normalize_lon(lon),
            lat,
        })
    }

    /// Euclidean embedding on a sphere of the given radius.
    pub fn to_point3(self, radius: f64) -> Point3 {
        let (lon, lat) = (self.lon.to_radians(), self.lat.to_radians());
        let c = lat.cos();
        Point3 {
            x: radius * c * lon.cos(),
            y: radius * c * lon.sin(),
            z: radius * lat.sin(),
        }
    }

    pub fn to_earth(self) -> Point3 {
        self.to_point3(EARTH_RADIUS_KM)
    }
}

impl fmt::Display for LonLat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lon, self.lat)
    }
}

/// A point of R^3 in kilometres.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dist(&self, o: &Point3) -> f64 {
        let (dx, dy, dz) = (self.x - o.x, self.y - o.y, self.z - o.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    fn scale(self, s: f64) -> Point3 {
        Point3 {
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
        }
    }

    fn normalized(self) -> Point3 {
        self.scale(1.0 / self.norm())
    }

    /// Inverse of [`LonLat::to_point3`] (radius is ignored).
    pub fn to_lonlat(&self) -> LonLat {
        let r = self.norm();
        let lat = (self.z / r).clamp(-1.0, 1.0).asin().to_degrees();
        let lon = self.y.atan2(self.x).to_degrees();
        LonLat {
            lon: normalize_lon(lon),
            lat,
        }
    }
}

pub fn to_point3(p: LonLat, radius: f64) -> Result<Point3> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::domain(format!("radius must be positive, got {radius}")));
    }
    let p = LonLat::new(p.lon, p.lat)?;
    Ok(p.to_point3(radius))
}

/// Straight-line distance between the embeddings of `a` and `b`.
pub fn chordal_distance(a: LonLat, b: LonLat, radius: f64) -> Result<f64> {
    Ok(to_point3(a, radius)?.dist(&to_point3(b, radius)?))
}

/// Axis-aligned lon/lat box. Longitudinal extent may wrap the antimeridian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoBox {
    lon_min: f64,
    lon_span: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl GeoBox {
    /// `lon_max` may be smaller than `lon_min` (wrapping) or exceed 180.
    pub fn new(lon_min: f64, lon_max: f64, lat_min: f64, lat_max: f64) -> Result<Self> {
        if ![lon_min, lon_max, lat_min, lat_max].iter().all(|v| v.is_finite()) {
            return Err(Error::domain("non-finite box bound"));
        }
        if !(lat_min < lat_max) || lat_min < -90.0 || lat_max > 90.0 {
            return Err(Error::domain(format!(
                "invalid latitude range [{lat_min}, {lat_max}]"
            )));
        }
        let raw = lon_max - lon_min;
        if raw > 360.0 + 1e-9 {
            return Err(Error::domain(format!("longitudinal extent {raw} exceeds 360")));
        }
        let span = if raw > 0.0 {
            raw.min(360.0)
        } else {
            // wrapped box given as (170, -170)
            (lon_max - lon_min).rem_euclid(360.0)
        };
        if span <= 0.0 {
            return Err(Error::domain("empty longitudinal extent"));
        }
        Ok(GeoBox {
            lon_min: normalize_lon(lon_min),
            lon_span: span,
            lat_min,
            lat_max,
        })
    }

    pub fn whole_sphere() -> Self {
        GeoBox {
            lon_min: -180.0,
            lon_span: 360.0,
            lat_min: -90.0,
            lat_max: 90.0,
        }
    }

    /// Box centred at `c` with the given half-widths; latitude clipped to the poles.
    pub fn centered(c: LonLat, half_lon: f64, half_lat: f64) -> Self {
        let span = (2.0 * half_lon).min(360.0);
        GeoBox {
            lon_min: if span >= 360.0 {
                -180.0
            } else {
                normalize_lon(c.lon - half_lon)
            },
            lon_span: span,
            lat_min: (c.lat - half_lat).max(-90.0),
            lat_max: (c.lat + half_lat).min(90.0),
        }
    }

    pub fn lon_min(&self) -> f64 {
        self.lon_min
    }

    /// Eastern bound, possibly > 180 for wrapping boxes.
    pub fn lon_max(&self) -> f64 {
        self.lon_min + self.lon_span
    }

    pub fn lon_span(&self) -> f64 {
        self.lon_span
    }

    pub fn lat_span(&self) -> f64 {
        self.lat_max - self.lat_min
    }

    /// Longitude measured eastwards from `lon_min`, in [0, 360).
    pub fn lon_offset(&self, lon: f64) -> f64 {
        (lon - self.lon_min).rem_euclid(360.0)
    }

    /// Closed membership test.
    pub fn contains(&self, p: LonLat) -> bool {
        if p.lat < self.lat_min || p.lat > self.lat_max {
            return false;
        }
        if self.lon_span >= 360.0 {
            return true;
        }
        let d = self.lon_offset(p.lon);
        d <= self.lon_span || (360.0 - d) < 1e-12
    }

    pub fn center(&self) -> LonLat {
        LonLat {
            lon: normalize_lon(self.lon_min + self.lon_span / 2.0),
            lat: (self.lat_min + self.lat_max) / 2.0,
        }
    }

    /// East-west extent in km measured along the central latitude.
    pub fn width_km(&self) -> f64 {
        let mid = ((self.lat_min + self.lat_max) / 2.0).to_radians();
        self.lon_span.to_radians() * mid.cos() * EARTH_RADIUS_KM
    }

    pub fn height_km(&self) -> f64 {
        self.lat_span().to_radians() * EARTH_RADIUS_KM
    }

    pub fn diagonal_km(&self) -> f64 {
        self.width_km().hypot(self.height_km())
    }

    /// Splits at a longitude offset (measured from `lon_min`) into west and east parts.
    pub fn split_lon(&self, offset: f64) -> (GeoBox, GeoBox) {
        let west = GeoBox {
            lon_span: offset,
            ..*self
        };
        let east = GeoBox {
            lon_min: normalize_lon(self.lon_min + offset),
            lon_span: self.lon_span - offset,
            ..*self
        };
        (west, east)
    }

    pub fn split_lat(&self, lat: f64) -> (GeoBox, GeoBox) {
        (
            GeoBox {
                lat_max: lat,
                ..*self
            },
            GeoBox {
                lat_min: lat,
                ..*self
            },
        )
    }

    /// Approximate area in square degrees.
    pub fn area_deg2(&self) -> f64 {
        self.lon_span * self.lat_span()
    }

    pub fn corners(&self) -> [LonLat; 4] {
        let e = normalize_lon(self.lon_min + self.lon_span);
        [
            LonLat { lon: self.lon_min, lat: self.lat_min },
            LonLat { lon: e, lat: self.lat_min },
            LonLat { lon: e, lat: self.lat_max },
            LonLat { lon: self.lon_min, lat: self.lat_max },
        ]
    }
}

/// Closed polygon ring in lon/lat degrees. Rings must not cross the antimeridian.
#[derive(Clone, Debug, PartialEq)]
pub struct Ring {
    pub vertices: Vec<LonLat>,
}

impl Ring {
    pub fn new(vertices: Vec<LonLat>) -> Result<Self> {
        let mut v = vertices;
        if v.len() > 1 && v.first() == v.last() {
            v.pop();
        }
        if v.len() < 3 {
            return Err(Error::invalid("polygon ring needs at least three vertices"));
        }
        Ok(Ring { vertices: v })
    }

    pub fn from_box(b: &GeoBox) -> Self {
        Ring {
            vertices: b.corners().to_vec(),
        }
    }

    /// Shoelace area in square degrees; positive for counter-clockwise rings.
    pub fn signed_area(&self) -> f64 {
        let v = &self.vertices;
        let n = v.len();
        (0..n)
            .map(|i| {
                let (a, b) = (v[i], v[(i + 1) % n]);
                a.lon * b.lat - b.lon * a.lat
            })
            .sum::<f64>()
            / 2.0
    }

    pub fn on_boundary(&self, p: LonLat) -> bool {
        let v = &self.vertices;
        let n = v.len();
        (0..n).any(|i| on_segment(v[i], v[(i + 1) % n], p))
    }

    /// Strict interior test by ray casting.
    pub fn contains_strict(&self, p: LonLat) -> bool {
        if self.on_boundary(p) {
            return false;
        }
        self.crossing_parity(p)
    }

    /// Closed membership (boundary counts as inside).
    pub fn contains_closed(&self, p: LonLat) -> bool {
        self.on_boundary(p) || self.crossing_parity(p)
    }

    fn crossing_parity(&self, p: LonLat) -> bool {
        let v = &self.vertices;
        let n = v.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (v[i], v[j]);
            if (a.lat > p.lat) != (b.lat > p.lat) {
                let x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
                if p.lon < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            b.0 = b.0.min(v.lon);
            b.1 = b.1.max(v.lon);
            b.2 = b.2.min(v.lat);
            b.3 = b.3.max(v.lat);
        }
        b
    }
}

fn on_segment(a: LonLat, b: LonLat, p: LonLat) -> bool {
    let cross = (b.lon - a.lon) * (p.lat - a.lat) - (b.lat - a.lat) * (p.lon - a.lon);
    let scale = (b.lon - a.lon).abs() + (b.lat - a.lat).abs();
    if cross.abs() > 1e-12 * scale.max(1.0) {
        return false;
    }
    p.lon >= a.lon.min(b.lon) - 1e-12
        && p.lon <= a.lon.max(b.lon) + 1e-12
        && p.lat >= a.lat.min(b.lat) - 1e-12
        && p.lat <= a.lat.max(b.lat) + 1e-12
}

#[derive(Clone, Debug)]
enum MaskKind {
    AllOcean,
    AllLand,
    Polygons { rings: Vec<Ring>, rings_are_land: bool },
    Raster(Raster),
}

#[derive(Clone, Debug)]
struct Raster {
    res: f64,
    nx: usize,
    ny: usize,
    ocean: Vec<bool>,
}

impl Raster {
    fn cell(&self, p: LonLat) -> (usize, usize) {
        let ix = (((p.lon + 180.0) / self.res).floor() as usize).min(self.nx - 1);
        let iy = (((p.lat + 90.0) / self.res).floor() as usize).min(self.ny - 1);
        (ix, iy)
    }

    fn center(&self, ix: usize, iy: usize) -> LonLat {
        LonLat {
            lon: -180.0 + (ix as f64 + 0.5) * self.res,
            lat: -90.0 + (iy as f64 + 0.5) * self.res,
        }
    }
}

/// Land/ocean classifier. Points on a polygon boundary are land.
#[derive(Clone, Debug)]
pub struct OceanMask {
    kind: MaskKind,
}

impl Default for OceanMask {
    fn default() -> Self {
        Self::all_ocean()
    }
}

impl OceanMask {
    pub fn all_ocean() -> Self {
        OceanMask {
            kind: MaskKind::AllOcean,
        }
    }

    pub fn all_land() -> Self {
        OceanMask {
            kind: MaskKind::AllLand,
        }
    }

    /// `rings_are_land = true`: the rings enclose land. Otherwise they enclose ocean.
    pub fn from_rings(rings: Vec<Ring>, rings_are_land: bool) -> Self {
        OceanMask {
            kind: MaskKind::Polygons {
                rings,
                rings_are_land,
            },
        }
    }

    /// Parses the mask text format: one ring per block of `lon lat` lines,
    /// blocks separated by blank lines, `#` comments allowed. A counter-clockwise
    /// first ring declares every ring to be land; a clockwise one declares them ocean.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut rings = Vec::new();
        let mut cur: Vec<LonLat> = Vec::new();
        let mut start = 0;
        let flush = |cur: &mut Vec<LonLat>, rings: &mut Vec<Ring>, line: usize| -> Result<()> {
            if !cur.is_empty() {
                let ring = Ring::new(std::mem::take(cur))
                    .map_err(|e| Error::parse(path, line, e.to_string()))?;
                rings.push(ring);
            }
            Ok(())
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                if raw.trim().is_empty() {
                    flush(&mut cur, &mut rings, start + 1)?;
                }
                continue;
            }
            if cur.is_empty() {
                start = i;
            }
            let mut it = line.split_whitespace();
            let (lon, lat) = match (it.next(), it.next(), it.next()) {
                (Some(a), Some(b), None) => (a, b),
                _ => return Err(Error::parse(path, i + 1, "expected `lon lat`")),
            };
            let lon: f64 = lon
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad longitude `{lon}`")))?;
            let lat: f64 = lat
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("bad latitude `{lat}`")))?;
            // Ring vertices keep their raw longitude so that rings touching +180 stay intact.
            if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                return Err(Error::parse(path, i + 1, "coordinate out of range"));
            }
            cur.push(LonLat { lon, lat });
        }
        flush(&mut cur, &mut rings, start + 1)?;
        if rings.is_empty() {
            return Err(Error::parse(path, 1, "mask file contains no rings"));
        }
        let rings_are_land = rings[0].signed_area() > 0.0;
        Ok(Self::from_rings(rings, rings_are_land))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn is_ocean(&self, p: LonLat) -> bool {
        match &self.kind {
            MaskKind::AllOcean => true,
            MaskKind::AllLand => false,
            MaskKind::Polygons {
                rings,
                rings_are_land,
            } => {
                if *rings_are_land {
                    !rings.iter().any(|r| r.contains_closed(p))
                } else {
                    rings.iter().any(|r| r.contains_strict(p))
                }
            }
            MaskKind::Raster(r) => {
                let (ix, iy) = r.cell(p);
                r.ocean[iy * r.nx + ix]
            }
        }
    }

    /// Rasterises the mask on a global grid of `res` degrees; a cell is ocean
    /// iff its centre is ocean.
    pub fn rasterize(&self, res: f64) -> Result<OceanMask> {
        if !(res > 0.0) {
            return Err(Error::domain("raster resolution must be positive"));
        }
        let nx = (360.0 / res).round() as usize;
        let ny = (180.0 / res).round() as usize;
        let mut r = Raster {
            res,
            nx,
            ny,
            ocean: vec![false; nx * ny],
        };
        for iy in 0..ny {
            for ix in 0..nx {
                r.ocean[iy * nx + ix] = self.is_ocean(r.center(ix, iy));
            }
        }
        Ok(OceanMask {
            kind: MaskKind::Raster(r),
        })
    }

    /// Centres of ocean raster cells of size `res` inside `within`, in row-major order.
    pub fn ocean_cells(&self, res: f64, within: &GeoBox) -> Vec<LonLat> {
        let nx = (360.0 / res).round() as usize;
        let ny = (180.0 / res).round() as usize;
        let mut out = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx {
                let c = LonLat {
                    lon: -180.0 + (ix as f64 + 0.5) * res,
                    lat: -90.0 + (iy as f64 + 0.5) * res,
                };
                if within.contains(c) && self.is_ocean(c) {
                    out.push(c);
                }
            }
        }
        out
    }
}

/// Regular lattice inside `bx` aligned to its lower-left corner, land points removed.
///
/// Latitude endpoints are inclusive. The eastern endpoint is included unless the
/// box spans the full circle, where +180 coincides with -180.
pub fn make_grid(bx: &GeoBox, step_deg: f64, mask: &OceanMask) -> Result<Vec<LonLat>> {
    if !(step_deg > 0.0) || !step_deg.is_finite() {
        return Err(Error::domain(format!("grid step must be positive, got {step_deg}")));
    }
    const EPS: f64 = 1e-9;
    let n_lat = ((bx.lat_span() / step_deg) + EPS).floor() as usize + 1;
    let full = bx.lon_span() >= 360.0;
    let n_lon_steps = ((bx.lon_span() / step_deg) + EPS).floor() as usize;
    let n_lon = if full && (n_lon_steps as f64 * step_deg - 360.0).abs() < EPS {
        n_lon_steps
    } else {
        n_lon_steps + 1
    };
    let mut out = Vec::with_capacity(n_lat * n_lon);
    for i in 0..n_lat {
        let lat = bx.lat_min + i as f64 * step_deg;
        for j in 0..n_lon {
            let p = LonLat {
                lon: normalize_lon(bx.lon_min() + j as f64 * step_deg),
                lat,
            };
            if mask.is_ocean(p) {
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Vertices of the `level`-times subdivided icosahedron on the unit sphere.
/// Level k has 10 * 4^k + 2 vertices.
pub fn icosphere(level: u32) -> Vec<Point3> {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Point3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Point3 { x, y, z }.normalized())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Point3>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                let (p, q) = (verts[a], verts[b]);
                verts.push(
                    Point3 {
                        x: p.x + q.x,
                        y: p.y + q.y,
                        z: p.z + q.z,
                    }
                    .normalized(),
                );
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let a = midpoint(f[0], f[1], &mut verts);
            let b = midpoint(f[1], f[2], &mut verts);
            let c = midpoint(f[2], f[0], &mut verts);
            next.push([f[0], a, c]);
            next.push([f[1], b, a]);
            next.push([f[2], c, b]);
            next.push([a, b, c]);
        }
        faces = next;
    }
    verts
}

/// Edge length (km on the Earth) of the level-`k` icosphere, approximately.
pub fn icosphere_spacing_km(level: u32) -> f64 {
    // central angle of the base icosahedron edge
    let base = (1.0f64 / 5f64.sqrt()).acos();
    base * EARTH_RADIUS_KM / 2f64.powi(level as i32)
}

/// Approximately equally spaced centres: the icosphere level whose edge length
/// is closest (in ratio) to `target_spacing_km`, restricted to `domain` and ocean.
pub fn icosahedral_centers(
    domain: &GeoBox,
    target_spacing_km: f64,
    mask: &OceanMask,
) -> Result<Vec<LonLat>> {
    if !(target_spacing_km > 0.0) {
        return Err(Error::domain("target spacing must be positive"));
    }
    let level = (0..12u32)
        .min_by(|&a, &b| {
            let ra = (icosphere_spacing_km(a) / target_spacing_km).ln().abs();
            let rb = (icosphere_spacing_km(b) / target_spacing_km).ln().abs();
            ra.total_cmp(&rb)
        })
        .unwrap_or(0);
    let all: Vec<LonLat> = icosphere(level).iter().map(|p| p.to_lonlat()).collect();
    let mut out: Vec<LonLat> = all
        .iter()
        .copied()
        .filter(|p| domain.contains(*p) && mask.is_ocean(*p))
        .collect();
    if out.is_empty() {
        // Too coarse for the domain: fall back to the vertex nearest the domain centre.
        let c = domain.center().to_earth();
        if let Some(best) = all
            .iter()
            .filter(|p| mask.is_ocean(**p))
            .min_by(|a, b| a.to_earth().dist(&c).total_cmp(&b.to_earth().dist(&c)))
        {
            if domain.contains(*best) {
                out.push(*best);
            } else if mask.is_ocean(domain.center()) {
                out.push(domain.center());
            }
        }
        if out.is_empty() {
            log::warn!("no icosahedral centre falls in the ocean part of the domain");
        }
    }
    Ok(out)
}

/// Bucket index over lon/lat cells for fast box queries.
#[derive(Clone, Debug)]
pub struct GeoIndex {
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<u32>>,
}

impl GeoIndex {
    pub fn new(points: &[LonLat], cell_deg: f64) -> Self {
        let nx = (360.0 / cell_deg).ceil() as usize;
        let ny = (180.0 / cell_deg).ceil() as usize;
        let mut buckets = vec![Vec::new(); nx * ny];
        let mut idx = GeoIndex {
            cell: cell_deg,
            nx,
            ny,
            buckets: Vec::new(),
        };
        for (i, p) in points.iter().enumerate() {
            let (ix, iy) = idx.cell_of(*p);
            buckets[iy * nx + ix].push(i as u32);
        }
        idx.buckets = buckets;
        idx
    }

    fn cell_of(&self, p: LonLat) -> (usize, usize) {
        let ix = (((p.lon + 180.0) / self.cell).floor().max(0.0) as usize).min(self.nx - 1);
        let iy = (((p.lat + 90.0) / self.cell).floor().max(0.0) as usize).min(self.ny - 1);
        (ix, iy)
    }

    /// Indices of all points inside `bx`, in ascending order.
    pub fn query(&self, points: &[LonLat], bx: &GeoBox) -> Vec<usize> {
        let iy0 = (((bx.lat_min + 90.0) / self.cell).floor().max(0.0) as usize).min(self.ny - 1);
        let iy1 = (((bx.lat_max + 90.0) / self.cell).floor().max(0.0) as usize).min(self.ny - 1);
        let nxs = if bx.lon_span() >= 360.0 {
            self.nx
        } else {
            ((bx.lon_span() / self.cell).ceil() as usize + 2).min(self.nx)
        };
        let ix0 = if bx.lon_span() >= 360.0 {
            0
        } else {
            self.cell_of(LonLat {
                lon: bx.lon_min(),
                lat: 0.0,
            })
            .0
        };
        let mut out = Vec::new();
        for iy in iy0..=iy1 {
            for k in 0..nxs {
                let ix = (ix0 + k) % self.nx;
                for &i in &self.buckets[iy * self.nx + ix] {
                    if bx.contains(points[i as usize]) {
                        out.push(i as usize);
                    }
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ll(lon: f64, lat: f64) -> LonLat {
        LonLat::new(lon, lat).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn axis_points() {
        let r = 6371.0;
        let p = to_point3(ll(0.0, 0.0), r).unwrap();
        assert!(close(p.x, r, 1e-9) && close(p.y, 0.0, 1e-9) && close(p.z, 0.0, 1e-9));
        let p = to_point3(ll(0.0, 90.0), r).unwrap();
        assert!(close(p.x, 0.0, 1e-9) && close(p.y, 0.0, 1e-9) && close(p.z, r, 1e-9));
        let p = to_point3(ll(90.0, 0.0), r).unwrap();
        assert!(close(p.x, 0.0, 1e-9) && close(p.y, r, 1e-9) && close(p.z, 0.0, 1e-9));
    }

    #[test]
    fn invalid_latitude_rejected() {
        assert!(LonLat::new(0.0, 91.0).is_err());
        assert!(to_point3(LonLat { lon: 0.0, lat: -90.5 }, 6371.0).is_err());
        assert!(to_point3(ll(0.0, 0.0), 0.0).is_err());
    }

    #[test]
    fn longitude_normalization() {
        assert_eq!(ll(180.0, 0.0).lon, -180.0);
        assert_eq!(ll(190.0, 0.0).lon, -170.0);
        assert_eq!(ll(-540.0, 0.0).lon, -180.0);
        assert!(ll(-1e-20, 0.0).lon < 180.0);
    }

    #[test]
    fn chordal_examples() {
        let r = 6371.0;
        assert_eq!(chordal_distance(ll(12.0, 34.0), ll(12.0, 34.0), r).unwrap(), 0.0);
        let d = chordal_distance(ll(30.0, 20.0), ll(-150.0, -20.0), r).unwrap();
        assert!(close(d, 12742.0, 1e-9));
        // 2R sin(45 deg) = R sqrt(2)
        let d = chordal_distance(ll(0.0, 0.0), ll(90.0, 0.0), r).unwrap();
        let oracle = 2.0 * r * (45f64).to_radians().sin();
        assert!(close(d, oracle, 1e-9));
        assert!(close(d, 9009.954, 1e-3));
    }

    #[test]
    fn embedding_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = ll(rng.random_range(-180.0..180.0), rng.random_range(-90.0..=90.0));
            let n = p.to_earth().norm();
            assert!(((n - EARTH_RADIUS_KM) / EARTH_RADIUS_KM).abs() < 1e-9);
        }
    }

    #[test]
    fn metric_axioms_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = EARTH_RADIUS_KM;
        let rand_pt = |rng: &mut ChaCha8Rng| {
            ll(rng.random_range(-180.0..180.0), rng.random_range(-90.0..=90.0))
        };
        for _ in 0..10_000 {
            let (a, b, c) = (rand_pt(&mut rng), rand_pt(&mut rng), rand_pt(&mut rng));
            let ab = chordal_distance(a, b, r).unwrap();
            let ba = chordal_distance(b, a, r).unwrap();
            let bc = chordal_distance(b, c, r).unwrap();
            let ac = chordal_distance(a, c, r).unwrap();
            assert_eq!(ab, ba);
            assert!(ac <= ab + bc + 1e-9);
            assert!(ab <= 2.0 * r + 1e-9);
        }
    }

    #[test]
    fn chord_matches_great_circle_for_small_separation() {
        let r = EARTH_RADIUS_KM;
        let a = ll(10.0, 20.0);
        let dtheta = 1e-3f64; // radians of latitude
        let b = ll(10.0, 20.0 + dtheta.to_degrees());
        let chord = chordal_distance(a, b, r).unwrap();
        let arc = r * dtheta;
        assert!((chord / arc - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grid_counts() {
        let bx = GeoBox::new(10.0, 14.0, -2.0, 2.0).unwrap();
        assert_eq!(make_grid(&bx, 2.0, &OceanMask::all_ocean()).unwrap().len(), 9);
        assert_eq!(make_grid(&bx, 2.0, &OceanMask::all_land()).unwrap().len(), 0);
        let study = GeoBox::new(-180.0, 180.0, -60.0, 60.0).unwrap();
        let g = make_grid(&study, 2.0, &OceanMask::all_ocean()).unwrap();
        // enumeration oracle: distinct (lon, lat) pairs on the 2-degree lattice
        let mut n = 0;
        let mut lat = -60;
        while lat <= 60 {
            let mut lon = -180;
            while lon < 180 {
                n += 1;
                lon += 2;
            }
            lat += 2;
        }
        assert_eq!(n, 10980);
        assert_eq!(g.len(), n);
        assert!(make_grid(&study, 0.0, &OceanMask::all_ocean()).is_err());
    }

    #[test]
    fn grid_independent_of_mask_rasterization_order() {
        let ring = Ring::new(vec![ll(0.0, 0.0), ll(5.0, 0.0), ll(5.0, 5.0), ll(0.0, 5.0)]).unwrap();
        let mask = OceanMask::from_rings(vec![ring], true);
        let bx = GeoBox::new(-10.0, 10.0, -10.0, 10.0).unwrap();
        let a = make_grid(&bx, 1.0, &mask).unwrap();
        let b = make_grid(&bx, 1.0, &mask.clone()).unwrap();
        assert_eq!(a, b);
        let r1 = mask.rasterize(1.0).unwrap();
        let r2 = mask.rasterize(1.0).unwrap();
        let c1 = r1.ocean_cells(1.0, &bx);
        let c2 = r2.ocean_cells(1.0, &bx);
        assert_eq!(c1, c2);
    }

    #[test]
    fn antimeridian_box() {
        let bx = GeoBox::new(170.0, -170.0, -5.0, 5.0).unwrap();
        assert!((bx.lon_span() - 20.0).abs() < 1e-12);
        assert!(bx.contains(ll(175.0, 0.0)));
        assert!(bx.contains(ll(-175.0, 0.0)));
        assert!(bx.contains(ll(180.0, 0.0)));
        assert!(!bx.contains(ll(0.0, 0.0)));
        let g = make_grid(&bx, 5.0, &OceanMask::all_ocean()).unwrap();
        assert_eq!(g.len(), 5 * 3);
        let c = GeoBox::centered(ll(178.0, 0.0), 5.0, 5.0);
        assert!(c.contains(ll(-177.0, 1.0)));
    }

    #[test]
    fn mask_file_orientation_and_boundary() {
        // counter-clockwise square: the ring is land
        let text = "0 0\n10 0\n10 10\n0 10\n\n20 20\n30 20\n30 30\n20 30\n";
        let m = OceanMask::parse(text, Path::new("mask.txt")).unwrap();
        assert!(!m.is_ocean(ll(5.0, 5.0)));
        assert!(!m.is_ocean(ll(0.0, 5.0)), "boundary is land");
        assert!(m.is_ocean(ll(15.0, 15.0)));
        assert!(!m.is_ocean(ll(25.0, 25.0)));
        // clockwise: the ring is ocean
        let text = "0 0\n0 10\n10 10\n10 0\n";
        let m = OceanMask::parse(text, Path::new("mask.txt")).unwrap();
        assert!(m.is_ocean(ll(5.0, 5.0)));
        assert!(!m.is_ocean(ll(10.0, 5.0)));
        assert!(!m.is_ocean(ll(15.0, 5.0)));
        assert!(OceanMask::parse("0 0\n1 x\n", Path::new("m")).is_err());
    }

    #[test]
    fn icosphere_vertex_counts() {
        assert_eq!(icosphere(0).len(), 12);
        assert_eq!(icosphere(1).len(), 42);
        for k in 0..4 {
            assert_eq!(icosphere(k).len(), 10 * 4usize.pow(k) + 2);
        }
        let whole = GeoBox::whole_sphere();
        let c = icosahedral_centers(&whole, icosphere_spacing_km(0), &OceanMask::all_ocean()).unwrap();
        assert_eq!(c.len(), 12);
        assert!(icosahedral_centers(&whole, 1000.0, &OceanMask::all_land()).unwrap().is_empty());
    }

    #[test]
    fn icosahedral_spacing_within_bounds() {
        let dom = GeoBox::new(-60.0, 60.0, -50.0, 50.0).unwrap();
        for target in [500.0, 800.0, 1500.0] {
            let c = icosahedral_centers(&dom, target, &OceanMask::all_ocean()).unwrap();
            assert!(c.len() > 3);
            let pts: Vec<Point3> = c.iter().map(|p| p.to_earth()).collect();
            for (i, p) in pts.iter().enumerate() {
                let nn = pts
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, q)| p.dist(q))
                    .fold(f64::INFINITY, f64::min);
                assert!(nn >= 0.5 * target && nn <= 2.0 * target, "nn {nn} target {target}");
            }
        }
    }

    #[test]
    fn geo_index_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<LonLat> = (0..5000)
            .map(|_| ll(rng.random_range(-180.0..180.0), rng.random_range(-80.0..80.0)))
            .collect();
        let idx = GeoIndex::new(&pts, 3.0);
        for bx in [
            GeoBox::new(-20.0, 15.0, -10.0, 30.0).unwrap(),
            GeoBox::new(170.0, -160.0, -50.0, 0.0).unwrap(),
            GeoBox::centered(ll(-179.0, 10.0), 4.0, 4.0),
            GeoBox::whole_sphere(),
        ] {
            let brute: Vec<usize> = (0..pts.len()).filter(|&i| bx.contains(pts[i])).collect();
            assert_eq!(idx.query(&pts, &bx), brute);
        }
    }
}
