//! Point annotations, ground-truth density maps and counts.
//!
//! Each annotated point contributes an isotropic Gaussian. Cell values are
//! the exact Gaussian mass over the cell (product of per-axis `erf`
//! differences), with the kernel truncated at 4σ along each axis. This keeps
//! the map's total mass correct even when a density cell is wider than σ.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::tensor::Tensor;

/// Kernel support radius in units of σ.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// Head centers `[x, y]` in pixels.
    pub points: Vec<[f64; 2]>,
}

impl PointAnnotation {
    pub fn new(image_id: impl Into<String>, width: u32, height: u32, points: Vec<[f64; 2]>) -> Result<Self> {
        let ann = PointAnnotation { image_id: image_id.into(), width, height, points };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Annotation { image_id: self.image_id.clone(), msg };
        if self.width == 0 || self.height == 0 {
            return Err(bad(format!("degenerate image size {}x{}", self.width, self.height)));
        }
        for &[x, y] in &self.points {
            let inside = x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64;
            if !inside || !x.is_finite() || !y.is_finite() {
                return Err(bad(format!("point ({x}, {y}) outside {}x{} image", self.width, self.height)));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Number of points inside `rect` (half-open).
    pub fn count_in(&self, rect: &Rect) -> usize {
        self.points.iter().filter(|&&[x, y]| rect.contains_point(x, y)).count()
    }
}

/// How kernel mass falling outside the rendered region is treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BorderMode {
    /// Drop mass outside the region; sums run slightly low near borders.
    #[default]
    Truncate,
    /// Rescale each point's in-region mass to exactly one.
    Renormalize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width` values.
    pub grid: Vec<f32>,
    /// Source pixels per cell along x and y.
    pub scale: (f64, f64),
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize, scale: (f64, f64)) -> Self {
        DensityMap { height, width, grid: vec![0.0; height * width], scale }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, 1, self.height, self.width], self.grid.clone()).expect("grid matches shape")
    }

    /// 8-bit binary PGM, max-normalized (all-zero maps stay black).
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = self.grid.iter().cloned().fold(0.0f32, f32::max);
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.grid.iter().map(|&v| if max > 0.0 { (255.0 * (v.max(0.0) / max)).round() as u8 } else { 0 }));
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

fn axis_mass(center: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    let support = TRUNCATE_SIGMAS * sigma;
    let a = lo.max(center - support);
    let b = hi.min(center + support);
    if a >= b {
        return 0.0;
    }
    let s = sigma * std::f64::consts::SQRT_2;
    0.5 * (libm::erf((b - center) / s) - libm::erf((a - center) / s))
}

/// Per-cell masses along one axis for a point at `center`; returns the first
/// touched cell and the masses.
fn axis_weights(center: f64, sigma: f64, cell: f64, cells: usize) -> (usize, Vec<f64>) {
    let support = TRUNCATE_SIGMAS * sigma;
    let first = ((center - support) / cell).floor().max(0.0) as usize;
    let last = (((center + support) / cell).floor().max(0.0) as usize).min(cells - 1);
    if first > last {
        return (0, Vec::new());
    }
    let w = (first..=last).map(|c| axis_mass(center, sigma, c as f64 * cell, (c + 1) as f64 * cell)).collect();
    (first, w)
}

/// Renders `ann` onto an `out_size = (height, width)` grid covering the full image.
pub fn render_density(ann: &PointAnnotation, sigma: f64, out_size: (usize, usize)) -> Result<DensityMap> {
    render_density_with(ann, sigma, out_size, BorderMode::Truncate)
}

pub fn render_density_with(
    ann: &PointAnnotation,
    sigma: f64,
    out_size: (usize, usize),
    border: BorderMode,
) -> Result<DensityMap> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = out_size;
    if h == 0 || w == 0 {
        return Err(Error::shape("render_density", format!("output size {h}x{w}")));
    }
    let cw = ann.width as f64 / w as f64;
    let ch = ann.height as f64 / h as f64;
    let mut acc = vec![0.0f64; h * w];
    for &[px, py] in &ann.points {
        let (x0, wx) = axis_weights(px, sigma, cw, w);
        let (y0, wy) = axis_weights(py, sigma, ch, h);
        let norm = match border {
            BorderMode::Truncate => 1.0,
            BorderMode::Renormalize => {
                let total = wx.iter().sum::<f64>() * wy.iter().sum::<f64>();
                if total > 0.0 {
                    1.0 / total
                } else {
                    0.0
                }
            }
        };
        for (dy, my) in wy.iter().enumerate() {
            let row = &mut acc[(y0 + dy) * w..(y0 + dy + 1) * w];
            for (dx, mx) in wx.iter().enumerate() {
                row[x0 + dx] += my * mx * norm;
            }
        }
    }
    Ok(DensityMap { height: h, width: w, grid: acc.into_iter().map(|v| v as f32).collect(), scale: (cw, ch) })
}

/// Estimated count: the sum of all cells.
pub fn count_from_density(d: &DensityMap) -> f64 {
    d.grid.iter().map(|&v| v as f64).sum()
}

/// Keeps the points inside `rect`, rebased to its origin.
pub fn crop_annotation(ann: &PointAnnotation, rect: &Rect) -> Result<PointAnnotation> {
    if !(rect.w > 0.0 && rect.h > 0.0) {
        return Err(Error::Rect(format!("zero-area rectangle {rect:?}")));
    }
    if !rect.within_image(ann.width, ann.height) {
        return Err(Error::Rect(format!("{rect:?} exceeds {}x{} image `{}`", ann.width, ann.height, ann.image_id)));
    }
    let points = ann
        .points
        .iter()
        .filter(|&&[x, y]| rect.contains_point(x, y))
        .map(|&[x, y]| [x - rect.x, y - rect.y])
        .collect();
    Ok(PointAnnotation {
        image_id: ann.image_id.clone(),
        width: rect.w.ceil() as u32,
        height: rect.h.ceil() as u32,
        points,
    })
}

/// Reads a JSON-lines annotation file, validating every record.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<PointAnnotation>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: PointAnnotation = serde_json::from_str(&line).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        ann.validate()?;
        out.push(ann);
    }
    Ok(out)
}

pub fn write_annotations(path: impl AsRef<Path>, anns: &[PointAnnotation]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for ann in anns {
        serde_json::to_writer(&mut buf, ann).expect("annotation serializes");
        buf.push(b'\n');
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ann(w: u32, h: u32, points: Vec<[f64; 2]>) -> PointAnnotation {
        PointAnnotation::new("img", w, h, points).unwrap()
    }

    /// Midpoint quadrature of the 4σ-truncated Gaussian on a fine grid.
    fn fine_grid_mass(px: f64, py: f64, sigma: f64, w: f64, h: f64, step: f64) -> f64 {
        let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
        let support = TRUNCATE_SIGMAS * sigma;
        let mut total = 0.0;
        let mut y = step / 2.0;
        while y < h {
            let mut x = step / 2.0;
            while x < w {
                let (dx, dy) = (x - px, y - py);
                if dx.abs() <= support && dy.abs() <= support {
                    total += norm * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp() * step * step;
                }
                x += step;
            }
            y += step;
        }
        total
    }

    #[test]
    fn empty_annotation_renders_zero() {
        let d = render_density(&ann(64, 48, vec![]), 15.0, (12, 16)).unwrap();
        assert!(d.grid.iter().all(|&v| v == 0.0));
        assert_eq!(count_from_density(&d), 0.0);
    }

    #[test]
    fn single_center_point_integrates_to_one() {
        let d = render_density(&ann(200, 200, vec![[100.0, 100.0]]), 15.0, (200, 200)).unwrap();
        let s = count_from_density(&d);
        assert!((0.999..=1.001).contains(&s), "{s}");
        let oracle = fine_grid_mass(100.0, 100.0, 15.0, 200.0, 200.0, 0.25);
        assert!((s - oracle).abs() < 1e-4, "{s} vs quadrature {oracle}");
    }

    #[test]
    fn coarse_grid_keeps_mass() {
        // 112 px cells, far wider than σ.
        let d = render_density(&ann(448, 448, vec![[112.0, 300.5]]), 15.0, (4, 4)).unwrap();
        let s = count_from_density(&d);
        assert!((0.999..=1.001).contains(&s), "{s}");
    }

    #[test]
    fn interior_points_are_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 2]> =
            (0..40).map(|_| [rng.random_range(60.0..340.0), rng.random_range(60.0..240.0)]).collect();
        let d = render_density(&ann(400, 300, pts), 15.0, (30, 40)).unwrap();
        let s = count_from_density(&d);
        assert!((s - 40.0).abs() <= 0.01 * 40.0, "{s}");
    }

    #[test]
    fn border_truncation_loses_mass_and_renormalize_restores_it() {
        let a = ann(100, 100, vec![[1.0, 50.0]]);
        let t = count_from_density(&render_density(&a, 15.0, (10, 10)).unwrap());
        assert!(t < 0.6 && t > 0.4, "{t}");
        let r = count_from_density(&render_density_with(&a, 15.0, (10, 10), BorderMode::Renormalize).unwrap());
        assert!((r - 1.0).abs() < 1e-6, "{r}");
    }

    #[test]
    fn density_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 2]> = (0..25).map(|_| [rng.random_range(0.0..90.0), rng.random_range(0.0..70.0)]).collect();
        let d = render_density(&ann(90, 70, pts), 15.0, (7, 9)).unwrap();
        assert!(d.grid.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn constant_map_counts() {
        let d = DensityMap { height: 14, width: 14, grid: vec![1.0 / 196.0; 196], scale: (16.0, 16.0) };
        assert!((count_from_density(&d) - 1.0).abs() < 1e-6);
        assert_eq!(count_from_density(&DensityMap::zeros(3, 3, (1.0, 1.0))), 0.0);
    }

    #[test]
    fn crop_whole_image_is_identity() {
        let a = ann(50, 40, vec![[0.0, 0.0], [49.9, 39.9], [10.0, 20.0]]);
        assert_eq!(crop_annotation(&a, &Rect::full(50, 40)).unwrap(), a);
    }

    #[test]
    fn crop_empty_region() {
        let a = ann(50, 40, vec![[45.0, 35.0]]);
        assert_eq!(crop_annotation(&a, &Rect::new(0.0, 0.0, 20.0, 20.0)).unwrap().count(), 0);
    }

    #[test]
    fn crop_matches_brute_force_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let pts: Vec<[f64; 2]> =
                (0..100).map(|_| [rng.random_range(0.0..120.0), rng.random_range(0.0..80.0)]).collect();
            let a = ann(120, 80, pts.clone());
            let (x, y) = (rng.random_range(0.0..60.0), rng.random_range(0.0..40.0));
            let (w, h) = (rng.random_range(1.0..120.0 - x), rng.random_range(1.0..80.0 - y));
            let c = crop_annotation(&a, &Rect::new(x, y, w, h)).unwrap();
            let mut expected = 0;
            for p in &pts {
                if p[0] >= x && p[0] < x + w && p[1] >= y && p[1] < y + h {
                    expected += 1;
                }
            }
            assert_eq!(c.count(), expected);
            assert!(c.points.iter().all(|p| p[0] >= 0.0 && p[0] < w && p[1] >= 0.0 && p[1] < h));
        }
    }

    #[test]
    fn crop_rejects_degenerate_and_outside_rects() {
        let a = ann(50, 40, vec![]);
        assert!(crop_annotation(&a, &Rect::new(5.0, 5.0, 0.0, 10.0)).is_err());
        assert!(crop_annotation(&a, &Rect::new(45.0, 5.0, 10.0, 10.0)).is_err());
    }

    #[test]
    fn nested_crops_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 2]> =
            (0..300).map(|_| [rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)]).collect();
        let a = ann(200, 200, pts);
        let outer = Rect::new(20.0, 30.0, 150.0, 140.0);
        let inner = Rect::new(50.0, 60.0, 70.0, 80.0);
        let co = crop_annotation(&a, &outer).unwrap().count();
        let ci = crop_annotation(&a, &inner).unwrap().count();
        assert!(ci <= co);
    }

    #[test]
    fn out_of_bounds_point_rejected() {
        assert!(PointAnnotation::new("x", 10, 10, vec![[10.0, 3.0]]).is_err());
        assert!(PointAnnotation::new("x", 10, 10, vec![[-0.1, 3.0]]).is_err());
    }

    #[test]
    fn pgm_header_and_normalization() {
        let d = DensityMap { height: 2, width: 3, grid: vec![0.0, 0.5, 1.0, 0.25, 0.0, 0.0], scale: (1.0, 1.0) };
        let pgm = d.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 6..], &[0, 128, 255, 64, 0, 0]);
    }

    #[test]
    fn annotation_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.jsonl");
        let anns = vec![ann(10, 10, vec![[1.0, 2.0]]), ann(20, 5, vec![])];
        write_annotations(&path, &anns).unwrap();
        assert_eq!(read_annotations(&path).unwrap(), anns);
    }
}
