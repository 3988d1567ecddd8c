use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::{crop_annotation, render_density_with, BorderMode, DensityMap, PointAnnotation};
use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::image::Image;

pub const MIN_PATCH_SIDE: u32 = 56;
pub const MAX_PATCH_SIDE: u32 = 448;

/// An annotated image usable as a source of labeled patches.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub image: Image,
    pub annotation: PointAnnotation,
}

impl LabeledScene {
    pub fn new(image: Image, annotation: PointAnnotation) -> Result<Self> {
        if image.width != annotation.width as usize || image.height != annotation.height as usize {
            return Err(Error::Annotation {
                image_id: annotation.image_id.clone(),
                msg: format!(
                    "annotation is {}x{} but image is {}x{}",
                    annotation.width, annotation.height, image.width, image.height
                ),
            });
        }
        Ok(LabeledScene { image, annotation })
    }

    pub fn id(&self) -> &str {
        &self.annotation.image_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SideDistribution {
    #[default]
    Uniform,
    LogUniform,
}

impl std::str::FromStr for SideDistribution {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SideDistribution::Uniform),
            "log-uniform" | "loguniform" => Ok(SideDistribution::LogUniform),
            other => Err(Error::Config(format!("unknown side distribution `{other}`"))),
        }
    }
}

/// Multi-scale square patch sampler for labeled scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSampler {
    /// Network input side; every patch is resized to this.
    pub input_size: usize,
    /// Ground-truth grid side (input size divided by the network stride).
    pub output_size: usize,
    pub sigma: f64,
    pub min_side: u32,
    pub max_side: u32,
    pub side_distribution: SideDistribution,
    /// Image rescaling factors; one is drawn per patch and the side range
    /// applies in the rescaled image.
    pub scales: Vec<f64>,
}

impl PatchSampler {
    pub fn new(input_size: usize, output_stride: usize) -> Result<Self> {
        if output_stride == 0 || input_size == 0 || input_size % output_stride != 0 {
            return Err(Error::Config(format!(
                "input size {input_size} is not a multiple of the network stride {output_stride}"
            )));
        }
        Ok(PatchSampler {
            input_size,
            output_size: input_size / output_stride,
            sigma: 15.0,
            min_side: MIN_PATCH_SIDE,
            max_side: MAX_PATCH_SIDE,
            side_distribution: SideDistribution::Uniform,
            scales: vec![1.0],
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_side == 0 || self.min_side > self.max_side {
            return Err(Error::Config(format!("patch side range {}..={}", self.min_side, self.max_side)));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!("invalid scale set {:?}", self.scales)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma {}", self.sigma)));
        }
        Ok(())
    }

    /// Draws a side (in rescaled pixels) for an image whose short edge is `short`.
    pub fn draw_side(&self, short: u32, rng: &mut impl Rng) -> Result<u32> {
        if short < self.min_side {
            return Err(Error::ImageTooSmall(format!(
                "short edge {short} px is below the minimum patch side {}",
                self.min_side
            )));
        }
        let hi = self.max_side.min(short);
        Ok(match self.side_distribution {
            SideDistribution::Uniform => rng.random_range(self.min_side..=hi),
            SideDistribution::LogUniform => {
                let (a, b) = ((self.min_side as f64).ln(), (hi as f64 + 1.0).ln());
                let v = rng.random_range(a..b).exp().floor() as u32;
                v.clamp(self.min_side, hi)
            }
        })
    }

    /// Draws the crop rectangle in source-image coordinates.
    pub fn draw_rect(&self, width: u32, height: u32, rng: &mut impl Rng) -> Result<Rect> {
        let scale = self.scales[rng.random_range(0..self.scales.len())];
        let (sw, sh) = ((width as f64 * scale).floor() as u32, (height as f64 * scale).floor() as u32);
        let side = self.draw_side(sw.min(sh), rng)?;
        let x = rng.random_range(0..=sw - side);
        let y = rng.random_range(0..=sh - side);
        if scale == 1.0 {
            return Ok(Rect::new(x as f64, y as f64, side as f64, side as f64));
        }
        let s = side as f64 / scale;
        let rx = (x as f64 / scale).min(width as f64 - s);
        let ry = (y as f64 / scale).min(height as f64 - s);
        Ok(Rect::new(rx.max(0.0), ry.max(0.0), s, s))
    }

    /// Crops, resizes and renders ground truth for `rect`.
    pub fn patch_at(&self, scene: &LabeledScene, rect: &Rect) -> Result<LabeledPatch> {
        let cropped = crop_annotation(&scene.annotation, rect)?;
        let gt = render_exact(&cropped, rect, self.sigma, self.output_size)?;
        Ok(LabeledPatch {
            image: scene.image.crop_resize(rect, self.input_size, self.input_size),
            count: cropped.points.len(),
            gt,
            rect: *rect,
        })
    }
}

fn render_exact(points: &PointAnnotation, rect: &Rect, sigma: f64, out: usize) -> Result<DensityMap> {
    // Rendering works in integer-sized frames; scale a fractional crop to a
    // frame of `out * K` pixels so the cell grid matches the resize exactly.
    if rect.w.fract() == 0.0 && rect.h.fract() == 0.0 {
        let ann = PointAnnotation {
            image_id: points.image_id.clone(),
            width: rect.w as u32,
            height: rect.h as u32,
            points: points.points.clone(),
        };
        return render_density_with(&ann, sigma, (out, out), BorderMode::Renormalize);
    }
    let frame = (out * 64) as f64;
    let (fx, fy) = (frame / rect.w, frame / rect.h);
    let ann = PointAnnotation {
        image_id: points.image_id.clone(),
        width: frame as u32,
        height: frame as u32,
        points: points.points.iter().map(|&[x, y]| [(x * fx).min(frame - 1e-9), (y * fy).min(frame - 1e-9)]).collect(),
    };
    let mut map = render_density_with(&ann, sigma * fx, (out, out), BorderMode::Renormalize)?;
    map.scale = (rect.w / out as f64, rect.h / out as f64);
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub image: Image,
    pub gt: DensityMap,
    pub rect: Rect,
    /// Exact number of annotation points inside `rect`.
    pub count: usize,
}

/// Samples one square patch and its ground-truth density map.
pub fn sample_labeled_patch(scene: &LabeledScene, sampler: &PatchSampler, rng: &mut impl Rng) -> Result<LabeledPatch> {
    sampler.validate()?;
    let rect = sampler.draw_rect(scene.annotation.width, scene.annotation.height, rng)?;
    sampler.patch_at(scene, &rect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::count_from_density;
    use crate::seed::rng_for;

    fn scene(w: u32, h: u32, points: Vec<[f64; 2]>) -> LabeledScene {
        LabeledScene::new(
            Image::filled(1, h as usize, w as usize, 0.5),
            PointAnnotation::new("s", w, h, points).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn minimum_scene_yields_whole_image() {
        let s = scene(56, 56, vec![[10.0, 10.0], [40.0, 50.0]]);
        let sampler = PatchSampler::new(56, 4).unwrap();
        let p = sample_labeled_patch(&s, &sampler, &mut rng_for(1, &[])).unwrap();
        assert_eq!(p.rect, Rect::new(0.0, 0.0, 56.0, 56.0));
        assert_eq!(p.count, 2);
        assert_eq!((p.gt.height, p.gt.width), (14, 14));
        assert!((count_from_density(&p.gt) - 2.0).abs() < 1e-4);
    }

    #[test]
    fn empty_patch_has_zero_mass() {
        let s = scene(100, 100, vec![]);
        let sampler = PatchSampler::new(64, 8).unwrap();
        let p = sample_labeled_patch(&s, &sampler, &mut rng_for(2, &[])).unwrap();
        assert_eq!(count_from_density(&p.gt), 0.0);
    }

    #[test]
    fn too_small_scene_rejected() {
        let s = scene(55, 200, vec![]);
        let sampler = PatchSampler::new(64, 8).unwrap();
        assert!(matches!(sample_labeled_patch(&s, &sampler, &mut rng_for(3, &[])), Err(Error::ImageTooSmall(_))));
    }

    #[test]
    fn sides_stay_in_range() {
        let sampler =
            PatchSampler { side_distribution: SideDistribution::LogUniform, ..PatchSampler::new(64, 8).unwrap() };
        let mut rng = rng_for(4, &[]);
        for short in [56u32, 57, 100, 448, 449, 1000] {
            for _ in 0..200 {
                let s = sampler.draw_side(short, &mut rng).unwrap();
                assert!(s >= 56 && s <= 448 && s <= short);
            }
        }
    }

    #[test]
    fn rescaled_rects_stay_inside() {
        let sampler = PatchSampler { scales: vec![0.5, 0.8, 1.0, 1.5], ..PatchSampler::new(64, 8).unwrap() };
        let s = scene(150, 130, vec![[5.0, 5.0], [140.0, 120.0], [75.0, 65.0]]);
        let mut rng = rng_for(5, &[]);
        for _ in 0..300 {
            let p = sample_labeled_patch(&s, &sampler, &mut rng).unwrap();
            assert!(p.rect.within_image(150, 130), "{:?}", p.rect);
            let brute = s.annotation.points.iter().filter(|q| p.rect.contains_point(q[0], q[1])).count();
            assert_eq!(p.count, brute);
            assert!((count_from_density(&p.gt) - brute as f64).abs() < 1e-3);
        }
    }
}
