//! Low-level symbol extraction: salient representative pixels from encoder
//! activations, typed by comparing activation spectra.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{Autoencoder, FeatureStack};
use crate::env::{Cell, Frame, STENCIL};
use crate::error::{Error, Result};

/// Where representative pixels may appear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectMode {
    /// Only stencil-tile centres are candidates; there the receptive field
    /// covers exactly one cell.
    Lattice,
    /// Every pixel is a candidate.
    Dense,
}

impl FromStr for DetectMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lattice" => Ok(DetectMode::Lattice),
            "dense" => Ok(DetectMode::Dense),
            _ => Err(Error::InvalidArgument(format!("unknown detect mode `{s}`"))),
        }
    }
}

impl DetectMode {
    pub fn name(self) -> &'static str {
        match self {
            DetectMode::Lattice => "lattice",
            DetectMode::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SymbolConfig {
    pub detect_mode: DetectMode,
    pub nms_window: usize,
    /// Frames used to fit the saliency threshold.
    pub saliency_frames: usize,
    /// Frames whose detections fit the type threshold and seed the registry.
    pub typing_frames: usize,
    /// The type threshold is this fraction of the smallest between-type SSD.
    pub type_threshold_factor: f64,
    pub min_separability: f64,
}

impl Default for SymbolConfig {
    fn default() -> Self {
        SymbolConfig {
            detect_mode: DetectMode::Lattice,
            nms_window: 5,
            saliency_frames: 500,
            typing_frames: 100,
            type_threshold_factor: 0.5,
            min_separability: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectedObject {
    /// Representative pixel, frame coordinates.
    pub pixel: (usize, usize),
    pub cell: Cell,
    pub spectrum: Vec<f32>,
    /// Always >= 1; 0 means "does not exist" downstream.
    pub type_id: u32,
}

pub fn ssd(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(x - y).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeRecord {
    pub id: u32,
    pub prototype: Vec<f32>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeRegistry {
    pub theta_sal: f32,
    pub theta_type: f64,
    types: Vec<TypeRecord>,
}

impl TypeRegistry {
    pub fn new(theta_sal: f32, theta_type: f64) -> Self {
        TypeRegistry {
            theta_sal,
            theta_type,
            types: Vec::new(),
        }
    }

    pub fn types(&self) -> &[TypeRecord] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    /// Nearest prototype and its SSD.
    pub fn nearest(&self, spectrum: &[f32]) -> Option<(u32, f64)> {
        self.types
            .iter()
            .map(|t| (t.id, ssd(&t.prototype, spectrum)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Returns the matching type, folding the spectrum into its running-mean
    /// prototype, or allocates a new type.
    pub fn assign(&mut self, spectrum: &[f32]) -> u32 {
        if let Some((id, d)) = self.nearest(spectrum) {
            if d <= self.theta_type {
                let t = &mut self.types[id as usize - 1];
                t.count += 1;
                let k = 1.0 / t.count as f32;
                for (p, s) in t.prototype.iter_mut().zip(spectrum) {
                    *p += (s - *p) * k;
                }
                return id;
            }
        }
        let id = self.types.len() as u32 + 1;
        self.types.push(TypeRecord {
            id,
            prototype: spectrum.to_vec(),
            count: 1,
        });
        id
    }

    /// Lookup without mutation: nearest type within the threshold.
    pub fn classify(&self, spectrum: &[f32]) -> Option<u32> {
        self.nearest(spectrum).filter(|&(_, d)| d <= self.theta_type).map(|(id, _)| id)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# type registry\n");
        let _ = writeln!(s, "theta_sal {}", self.theta_sal);
        let _ = writeln!(s, "theta_type {}", self.theta_type);
        for t in &self.types {
            let _ = write!(s, "type {} {}", t.id, t.count);
            for v in &t.prototype {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("type registry", d);
        let mut theta_sal = None;
        let mut theta_type = None;
        let mut types = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let key = it.next().unwrap();
            let rest: Vec<&str> = it.collect();
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", n + 1)));
            match key {
                "theta_sal" if rest.len() == 1 => theta_sal = Some(num(rest[0])? as f32),
                "theta_type" if rest.len() == 1 => theta_type = Some(num(rest[0])?),
                "type" if rest.len() >= 3 => {
                    let id: u32 = rest[0].parse().map_err(|_| bad(format!("line {}: bad id", n + 1)))?;
                    if id as usize != types.len() + 1 {
                        return Err(bad(format!("line {}: type ids must be dense from 1", n + 1)));
                    }
                    let count = rest[1].parse().map_err(|_| bad(format!("line {}: bad count", n + 1)))?;
                    let prototype = rest[2..]
                        .iter()
                        .map(|v| v.parse::<f32>().map_err(|_| bad(format!("line {}: bad value", n + 1))))
                        .collect::<Result<Vec<f32>>>()?;
                    types.push(TypeRecord { id, prototype, count });
                }
                _ => return Err(bad(format!("line {}: unexpected `{line}`", n + 1))),
            }
        }
        Ok(TypeRegistry {
            theta_sal: theta_sal.ok_or_else(|| bad("missing theta_sal".into()))?,
            theta_type: theta_type.ok_or_else(|| bad("missing theta_type".into()))?,
            types,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TypeRegistry::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Stencil-tile centres of a `width` x `height` frame in raster order.
pub fn tile_centers(width: usize, height: usize) -> Vec<(usize, usize)> {
    let half = STENCIL / 2;
    (0..height / STENCIL)
        .flat_map(|r| (0..width / STENCIL).map(move |c| (c * STENCIL + half, r * STENCIL + half)))
        .collect()
}

/// Non-maximum suppression on a saliency map where non-candidates hold
/// `NEG_INFINITY`. A pixel survives if it reaches `theta` and beats every
/// other candidate in its window; ties go to the earlier pixel in raster
/// order.
pub fn non_max_suppression(sal: &[f32], width: usize, height: usize, theta: f32, window: usize) -> Vec<(usize, usize)> {
    let r = (window / 2) as isize;
    let mut keep = Vec::new();
    for y in 0..height {
        'pixel: for x in 0..width {
            let s = sal[y * width + x];
            if !(s >= theta) {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    let n = sal[ny as usize * width + nx as usize];
                    let earlier = (dy, dx) < (0, 0);
                    if n > s || (n == s && earlier) {
                        continue 'pixel;
                    }
                }
            }
            keep.push((x, y));
        }
    }
    keep
}

fn candidate_map(stack: &FeatureStack, mode: DetectMode) -> Vec<f32> {
    match mode {
        DetectMode::Dense => stack.saliency_map(),
        DetectMode::Lattice => {
            let mut sal = vec![f32::NEG_INFINITY; stack.width * stack.height];
            for (x, y) in tile_centers(stack.width, stack.height) {
                sal[y * stack.width + x] = stack.saliency(x, y);
            }
            sal
        }
    }
}

/// Salient representative pixels with their spectra, in raster order.
pub fn detect(stack: &FeatureStack, theta_sal: f32, mode: DetectMode, window: usize) -> Vec<((usize, usize), Vec<f32>)> {
    let sal = candidate_map(stack, mode);
    non_max_suppression(&sal, stack.width, stack.height, theta_sal, window)
        .into_iter()
        .map(|p| (p, stack.spectrum(p.0, p.1).to_vec()))
        .collect()
}

/// Detection straight from a frame. In lattice mode only the tile centres
/// are encoded.
pub fn detect_frame(model: &Autoencoder, frame: &Frame, theta_sal: f32, cfg: &SymbolConfig) -> Result<Vec<((usize, usize), Vec<f32>)>> {
    match cfg.detect_mode {
        DetectMode::Dense => Ok(detect(&model.encode(frame)?, theta_sal, DetectMode::Dense, cfg.nms_window)),
        DetectMode::Lattice => {
            let centers = tile_centers(frame.width, frame.height);
            let f = model.features();
            let act = model.encode_at(frame, &centers)?;
            let mut sal = vec![f32::NEG_INFINITY; frame.width * frame.height];
            let mut at = HashMap::with_capacity(centers.len());
            for (i, &(x, y)) in centers.iter().enumerate() {
                let spec = &act[i * f..(i + 1) * f];
                sal[y * frame.width + x] = spec.iter().copied().fold(f32::MIN, f32::max);
                at.insert((x, y), spec);
            }
            Ok(non_max_suppression(&sal, frame.width, frame.height, theta_sal, cfg.nms_window)
                .into_iter()
                .map(|p| (p, at[&p].to_vec()))
                .collect())
        }
    }
}

pub fn pixel_to_cell(p: (usize, usize)) -> Cell {
    Cell::new((p.0 / STENCIL) as i32, (p.1 / STENCIL) as i32)
}

/// encode -> detect -> type assignment.
pub fn symbolize(model: &Autoencoder, frame: &Frame, registry: &mut TypeRegistry, cfg: &SymbolConfig) -> Result<Vec<DetectedObject>> {
    let found = detect_frame(model, frame, registry.theta_sal, cfg)?;
    Ok(found
        .into_iter()
        .map(|(pixel, spectrum)| DetectedObject {
            pixel,
            cell: pixel_to_cell(pixel),
            type_id: registry.assign(&spectrum),
            spectrum,
        })
        .collect())
}

/// Threshold maximising the between-class variance of `values`, placed
/// midway between the two classes.
pub fn otsu_threshold(values: &[f32]) -> Option<f32> {
    let mut v: Vec<f64> = values.iter().map(|&x| f64::from(x)).filter(|x| x.is_finite()).collect();
    if v.len() < 2 {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let total: f64 = v.iter().sum();
    let mut below = 0.0;
    let mut best: Option<(f64, usize)> = None;
    for k in 1..v.len() {
        below += v[k - 1];
        if v[k] == v[k - 1] {
            continue;
        }
        let w0 = k as f64 / n;
        let w1 = 1.0 - w0;
        let m0 = below / k as f64;
        let m1 = (total - below) / (n - k as f64);
        let score = w0 * w1 * (m0 - m1).powi(2);
        if best.map_or(true, |(b, _)| score > b) {
            best = Some((score, k));
        }
    }
    best.map(|(_, k)| ((v[k - 1] + v[k]) / 2.0) as f32)
}

/// Splits pairwise spectrum distances at their widest gap on a log scale
/// and returns the smallest distance above it.
pub fn between_type_distance(spectra: &[Vec<f32>]) -> Option<f64> {
    let mut d = Vec::with_capacity(spectra.len() * spectra.len() / 2);
    for i in 0..spectra.len() {
        for j in i + 1..spectra.len() {
            d.push(ssd(&spectra[i], &spectra[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    d.dedup();
    if d.len() < 2 {
        return None;
    }
    let log = |x: f64| x.max(1e-12).ln();
    let (k, _) = d
        .windows(2)
        .enumerate()
        .map(|(k, w)| (k, log(w[1]) - log(w[0])))
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    Some(d[k + 1])
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub theta_sal: f32,
    pub theta_type: f64,
    pub detections: usize,
    pub mean_intra_ssd: f64,
    pub mean_inter_ssd: f64,
    pub separability: f64,
}

/// Fits both thresholds without labels and builds the type registry from
/// the typing frames. Fails if the resulting types are not well separated.
pub fn calibrate(
    model: &Autoencoder,
    saliency_frames: &[Frame],
    typing_frames: &[Frame],
    cfg: &SymbolConfig,
) -> Result<(TypeRegistry, CalibrationReport)> {
    let mut saliencies = Vec::new();
    for f in saliency_frames {
        match cfg.detect_mode {
            DetectMode::Lattice => {
                let centers = tile_centers(f.width, f.height);
                let act = model.encode_at(f, &centers)?;
                saliencies.extend(
                    act.chunks_exact(model.features())
                        .map(|s| s.iter().copied().fold(f32::MIN, f32::max)),
                );
            }
            DetectMode::Dense => saliencies.extend(model.encode(f)?.saliency_map()),
        }
    }
    let theta_sal = otsu_threshold(&saliencies)
        .ok_or_else(|| Error::Calibration("saliency values are all identical".into()))?;

    let mut spectra = Vec::new();
    for f in typing_frames {
        spectra.extend(detect_frame(model, f, theta_sal, cfg)?.into_iter().map(|(_, s)| s));
    }
    let gap = between_type_distance(&spectra)
        .ok_or_else(|| Error::Calibration(format!("{} detections are too few to fit a type threshold", spectra.len())))?;
    let theta_type = cfg.type_threshold_factor * gap;

    let mut registry = TypeRegistry::new(theta_sal, theta_type);
    let labels: Vec<u32> = spectra.iter().map(|s| registry.assign(s)).collect();

    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..spectra.len() {
        for j in i + 1..spectra.len() {
            let d = ssd(&spectra[i], &spectra[j]);
            if labels[i] == labels[j] {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    let mean_intra = if n_intra > 0 { intra / n_intra as f64 } else { 0.0 };
    let mean_inter = if n_inter > 0 { inter / n_inter as f64 } else { 0.0 };
    let separability = if mean_intra > 0.0 {
        mean_inter / mean_intra
    } else if mean_inter > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let report = CalibrationReport {
        theta_sal,
        theta_type,
        detections: spectra.len(),
        mean_intra_ssd: mean_intra,
        mean_inter_ssd: mean_inter,
        separability,
    };
    if separability < cfg.min_separability {
        return Err(Error::Separability {
            ratio: separability,
            required: cfg.min_separability,
        });
    }
    Ok((registry, report))
}
