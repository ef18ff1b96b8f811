//! Observation ingestion and gridded product files.
//!
//! Text observations are whitespace-separated `lon lat value quality` rows
//! with `#` comments. The packed binary form is the magic `NSMO`, a version
//! byte, a u64 record count, then per record `lon lat value` as f64 and the
//! quality as one byte, all little-endian.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geo::{GeoBox, LonLat, OceanMask};
use crate::mra::PredictionField;

/// A georeferenced measurement with its quality flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub loc: LonLat,
    /// Measured value in Kelvin.
    pub value: f64,
    /// Quality level 0..=5.
    pub quality: u8,
}

pub const OBS_MAGIC: [u8; 4] = *b"NSMO";
pub const OBS_VERSION: u8 = 1;
const RECORD_LEN: usize = 25;

fn parse_obs_line(line: &str, path: &Path, lineno: usize) -> Result<Observation> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 4 {
        return Err(Error::parse(path, lineno, format!("expected 4 columns `lon lat value quality`, got {}", f.len())));
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::parse(path, lineno, format!("bad {what} `{s}`")))
    };
    let lon = num(f[0], "longitude")?;
    let lat = num(f[1], "latitude")?;
    let value = num(f[2], "value")?;
    let quality: u8 = f[3]
        .parse()
        .ok()
        .filter(|q| *q <= 5)
        .ok_or_else(|| Error::parse(path, lineno, format!("bad quality `{}` (0..5)", f[3])))?;
    let loc = LonLat::new(lon, lat).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
    Ok(Observation { loc, value, quality })
}

/// Parses text observations.
pub fn parse_observations(text: &str, path: &Path) -> Result<Vec<Observation>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if !line.is_empty() {
            out.push(parse_obs_line(line, path, i + 1)?);
        }
    }
    Ok(out)
}

/// Text form with full float precision.
pub fn format_observations(obs: &[Observation]) -> String {
    let mut s = String::with_capacity(obs.len() * 48);
    for o in obs {
        let _ = writeln!(s, "{} {} {} {}", o.loc.lon, o.loc.lat, o.value, o.quality);
    }
    s
}

pub fn encode_observations_binary(obs: &[Observation]) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + obs.len() * RECORD_LEN);
    out.extend_from_slice(&OBS_MAGIC);
    out.push(OBS_VERSION);
    out.extend_from_slice(&(obs.len() as u64).to_le_bytes());
    for o in obs {
        out.extend_from_slice(&o.loc.lon.to_le_bytes());
        out.extend_from_slice(&o.loc.lat.to_le_bytes());
        out.extend_from_slice(&o.value.to_le_bytes());
        out.push(o.quality);
    }
    out
}

pub fn decode_observations_binary(bytes: &[u8], path: &Path) -> Result<Vec<Observation>> {
    if bytes.len() < 13 || bytes[..4] != OBS_MAGIC {
        return Err(Error::parse(path, 0, "not a packed observation file"));
    }
    if bytes[4] != OBS_VERSION {
        return Err(Error::parse(path, 0, format!("unsupported version {}", bytes[4])));
    }
    let n = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let body = &bytes[13..];
    if body.len() != n.saturating_mul(RECORD_LEN) {
        return Err(Error::parse(path, 0, format!("expected {n} records, payload holds {} bytes", body.len())));
    }
    body.chunks_exact(RECORD_LEN)
        .enumerate()
        .map(|(i, r)| {
            let f = |o: usize| f64::from_le_bytes(r[o..o + 8].try_into().expect("8 bytes"));
            let loc = LonLat::new(f(0), f(8)).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            let (value, quality) = (f(16), r[24]);
            if !value.is_finite() || quality > 5 {
                return Err(Error::parse(path, i + 1, "bad value or quality"));
            }
            Ok(Observation { loc, value, quality })
        })
        .collect()
}

/// Reads one file, packed binary if it starts with the magic, text otherwise.
pub fn read_observations(path: &Path) -> Result<Vec<Observation>> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(&OBS_MAGIC) {
        decode_observations_binary(&bytes, path)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::parse(path, 0, "file is neither text nor packed binary"))?;
        parse_observations(&text, path)
    }
}

/// Filters applied by [`ingest`].
#[derive(Clone, Debug, PartialEq)]
pub struct IngestConfig {
    pub study_box: GeoBox,
    pub quality_min: u8,
}

/// Per-reason counts from [`ingest`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub read: usize,
    pub low_quality: usize,
    pub outside_box: usize,
    /// Records merged into an earlier record at the same location.
    pub duplicates: usize,
    pub kept: usize,
}

/// Drops low-quality and out-of-box rows and collapses duplicate locations
/// to their mean value, keeping first-seen order.
pub fn filter_observations(raw: &[Observation], cfg: &IngestConfig) -> (Vec<Observation>, IngestReport) {
    let mut rep = IngestReport {
        read: raw.len(),
        ..Default::default()
    };
    let mut pos: HashMap<(u64, u64), usize> = HashMap::new();
    let mut acc: Vec<(Observation, f64, usize)> = Vec::new();
    for o in raw {
        if o.quality < cfg.quality_min {
            rep.low_quality += 1;
            continue;
        }
        if !cfg.study_box.contains(o.loc) {
            rep.outside_box += 1;
            continue;
        }
        let key = (o.loc.lon.to_bits(), o.loc.lat.to_bits());
        match pos.get(&key) {
            Some(&k) => {
                rep.duplicates += 1;
                acc[k].1 += o.value;
                acc[k].2 += 1;
                acc[k].0.quality = acc[k].0.quality.max(o.quality);
            }
            None => {
                pos.insert(key, acc.len());
                acc.push((*o, o.value, 1));
            }
        }
    }
    let out: Vec<Observation> = acc
        .into_iter()
        .map(|(mut o, sum, n)| {
            o.value = sum / n as f64;
            o
        })
        .collect();
    rep.kept = out.len();
    (out, rep)
}

/// Reads and filters observation files.
pub fn ingest(files: &[PathBuf], cfg: &IngestConfig) -> Result<(Vec<Observation>, IngestReport)> {
    let mut raw = Vec::new();
    for f in files {
        raw.extend(read_observations(f)?);
    }
    let (obs, rep) = filter_observations(&raw, cfg);
    log::info!(
        "ingest: read {}, dropped {} for quality, {} outside the study box, merged {} duplicates, kept {}",
        rep.read,
        rep.low_quality,
        rep.outside_box,
        rep.duplicates,
        rep.kept
    );
    Ok((obs, rep))
}

/// Regular lon/lat product grid; cell (i, j) sits at
/// `(lon0 + j·step, lat0 + i·step)`, rows south to north.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMeta {
    pub lon0: f64,
    pub lat0: f64,
    pub step: f64,
    pub n_lon: usize,
    pub n_lat: usize,
}

pub const FILL_VALUE: f64 = -9999.0;

impl GridMeta {
    /// Grid covering `bx` inclusively at `step` degrees.
    pub fn covering(bx: &GeoBox, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::domain("grid step must be positive"));
        }
        const EPS: f64 = 1e-9;
        Ok(GridMeta {
            lon0: bx.lon_min(),
            lat0: bx.lat_min,
            step,
            n_lon: (bx.lon_span() / step + EPS).floor() as usize + 1,
            n_lat: (bx.lat_span() / step + EPS).floor() as usize + 1,
        })
    }

    pub fn len(&self) -> usize {
        self.n_lon * self.n_lat
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All cell locations in row-major order (south row first).
    pub fn locations(&self) -> Vec<LonLat> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.n_lat {
            for j in 0..self.n_lon {
                out.push(LonLat {
                    lon: crate::geo::normalize_lon(self.lon0 + j as f64 * self.step),
                    lat: self.lat0 + i as f64 * self.step,
                });
            }
        }
        out
    }

    fn header(&self, layer: &str) -> String {
        format!(
            "nsmra-grid 1\nlayer {layer}\nlon0 {}\nlat0 {}\nstep {}\nn_lon {}\nn_lat {}\nunits K\nfill {}\norder row-major south-to-north, little-endian f64\ncrs geographic lon/lat degrees on a sphere of radius 6371 km\n",
            self.lon0, self.lat0, self.step, self.n_lon, self.n_lat, FILL_VALUE
        )
    }
}

/// Writes `<stem>.mean.bin`, `<stem>.sd.bin` and their `.hdr` headers.
/// Land cells (and cells that failed) hold [`FILL_VALUE`]. Optionally also
/// writes `<stem>.txt` with `lon lat mean sd` rows.
pub fn export_grid(field: &PredictionField, meta: &GridMeta, mask: &OceanMask, stem: &Path, text: bool) -> Result<Vec<PathBuf>> {
    if field.locations.len() != meta.len() {
        return Err(Error::invalid(format!(
            "field has {} locations but the grid has {} cells",
            field.locations.len(),
            meta.len()
        )));
    }
    let mut written = Vec::new();
    let cell = |v: f64, p: LonLat| if mask.is_ocean(p) && v.is_finite() { v } else { FILL_VALUE };
    for (name, vals) in [("mean", &field.mean), ("sd", &field.sd)] {
        let bin = stem.with_extension(format!("{name}.bin"));
        let hdr = stem.with_extension(format!("{name}.hdr"));
        let mut bytes = Vec::with_capacity(vals.len() * 8);
        for (v, p) in vals.iter().zip(&field.locations) {
            bytes.extend_from_slice(&cell(*v, *p).to_le_bytes());
        }
        std::fs::write(&bin, bytes)?;
        std::fs::write(&hdr, meta.header(name))?;
        written.push(bin);
        written.push(hdr);
    }
    if text {
        let path = stem.with_extension("txt");
        let mut s = String::from("# lon lat mean sd\n");
        for (k, p) in field.locations.iter().enumerate() {
            let _ = writeln!(s, "{} {} {} {}", p.lon, p.lat, cell(field.mean[k], *p), cell(field.sd[k], *p));
        }
        std::fs::write(&path, s)?;
        written.push(path);
    }
    Ok(written)
}

/// Reads one layer written by [`export_grid`].
pub fn read_grid_layer(bin: &Path, hdr: &Path) -> Result<(GridMeta, Vec<f64>)> {
    let text = std::fs::read_to_string(hdr)?;
    let mut kv: HashMap<&str, &str> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line != "nsmra-grid 1" {
            return Err(Error::parse(hdr, 1, "not a grid header"));
        }
        if let Some((k, v)) = line.split_once(' ') {
            kv.insert(k, v);
        }
    }
    let get = |k: &str| -> Result<&str> { kv.get(k).copied().ok_or_else(|| Error::parse(hdr, 0, format!("missing `{k}`"))) };
    let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::parse(hdr, 0, format!("bad `{k}`"))) };
    let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::parse(hdr, 0, format!("bad `{k}`"))) };
    let meta = GridMeta {
        lon0: num("lon0")?,
        lat0: num("lat0")?,
        step: num("step")?,
        n_lon: int("n_lon")?,
        n_lat: int("n_lat")?,
    };
    let bytes = std::fs::read(bin)?;
    if bytes.len() != meta.len() * 8 {
        return Err(Error::parse(bin, 0, format!("expected {} cells, file holds {} bytes", meta.len(), bytes.len())));
    }
    let vals = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Ok((meta, vals))
}
