//! Procedural crowd scenes with exact head-center annotations.
//!
//! A person is a zero-mean center-surround splat (bright core, dark ring):
//! it changes local structure but not the mean intensity, so the count
//! cannot be read off the image average. The background is smooth value
//! noise around 0.5.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::density::PointAnnotation;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seed::rng_for;

pub const MAX_DENSITY: f64 = 5000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CountDistribution {
    Poisson {
        mean: f64,
    },
    /// Inclusive integer range.
    Uniform {
        min: usize,
        max: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub width: u32,
    pub height: u32,
    pub count: CountDistribution,
    /// Head radius range in pixels.
    pub blob_radius: (f64, f64),
    /// Splat amplitude range.
    pub contrast: (f64, f64),
    /// 0 = uniform placement; 1 = strong vertical density and size gradient.
    pub perspective: f64,
    /// Background texture amplitude.
    pub clutter: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            width: 256,
            height: 256,
            count: CountDistribution::Poisson { mean: 100.0 },
            blob_radius: (3.0, 9.0),
            contrast: (0.25, 0.45),
            perspective: 0.0,
            clutter: 0.12,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("scene size {}x{}", self.width, self.height));
        }
        match self.count {
            CountDistribution::Poisson { mean } if !(0.0..=MAX_DENSITY).contains(&mean) => {
                return bad(format!("density parameter {mean} outside [0, {MAX_DENSITY}]"))
            }
            CountDistribution::Uniform { min, max } if min > max || max as f64 > MAX_DENSITY => {
                return bad(format!("count range {min}..={max} invalid"))
            }
            _ => {}
        }
        let (r0, r1) = self.blob_radius;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad(format!("blob radius range {r0}..{r1}"));
        }
        if !(0.0..=1.0).contains(&self.perspective) {
            return bad(format!("perspective {} outside [0, 1]", self.perspective));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: Image,
    pub annotation: PointAnnotation,
    pub params: SceneParams,
    pub seed: u64,
}

fn value_noise(width: usize, height: usize, cell: usize, rng: &mut impl Rng) -> Vec<f32> {
    let gw = width / cell + 2;
    let gh = height / cell + 2;
    let grid: Vec<f32> = (0..gw * gh).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = y as f32 / cell as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..width {
            let fx = x as f32 / cell as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let g = |yy: usize, xx: usize| grid[yy * gw + xx];
            let top = g(y0, x0) + (g(y0, x0 + 1) - g(y0, x0)) * tx;
            let bot = g(y0 + 1, x0) + (g(y0 + 1, x0 + 1) - g(y0 + 1, x0)) * tx;
            out.push(top + (bot - top) * ty);
        }
    }
    out
}

/// Inverse CDF of the linear density `(1 - g) + 2 g t` on `[0, 1)`.
fn linear_ramp(u: f64, g: f64) -> f64 {
    if g < 1e-9 {
        return u;
    }
    let b = 1.0 - g;
    (-b + (b * b + 4.0 * g * u).sqrt()) / (2.0 * g)
}

pub fn generate_scene(image_id: &str, params: &SceneParams, seed: u64) -> Result<SyntheticScene> {
    params.validate()?;
    let mut rng = rng_for(seed, &[0x7363656e65]);
    let (w, h) = (params.width as usize, params.height as usize);

    let n = match params.count {
        CountDistribution::Poisson { mean } if mean > 0.0 => {
            Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize
        }
        CountDistribution::Poisson { .. } => 0,
        CountDistribution::Uniform { min, max } => rng.random_range(min..=max),
    };

    let coarse = value_noise(w, h, 24, &mut rng);
    let fine = value_noise(w, h, 5, &mut rng);
    let mut pixels: Vec<f64> =
        coarse.iter().zip(&fine).map(|(c, f)| 0.5 + params.clutter * (0.8 * *c as f64 + 0.35 * *f as f64)).collect();

    let (r0, r1) = params.blob_radius;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random::<f64>() * params.width as f64;
        // Denser and smaller towards the top under perspective.
        let t = 1.0 - linear_ramp(rng.random::<f64>(), params.perspective);
        let y = (t * params.height as f64).min(params.height as f64 - 1e-6);
        let size_t = params.perspective * t + (1.0 - params.perspective) * rng.random::<f64>();
        let radius = r0 + (r1 - r0) * size_t;
        let amp = rng.random_range(params.contrast.0..=params.contrast.1);
        splat(&mut pixels, w, h, x, y, radius, amp);
        points.push([x, y]);
    }

    let data = pixels.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(SyntheticScene {
        image: Image::new(1, h, w, data)?,
        annotation: PointAnnotation::new(image_id, params.width, params.height, points)?,
        params: params.clone(),
        seed,
    })
}

/// Adds a center-surround profile with zero integral.
fn splat(pixels: &mut [f64], w: usize, h: usize, cx: f64, cy: f64, radius: f64, amp: f64) {
    let (s1, s2) = (radius / 2.0, radius);
    let ratio = (s1 * s1) / (s2 * s2);
    let reach = 3.0 * s2;
    let x0 = (cx - reach).floor().max(0.0) as usize;
    let x1 = ((cx + reach).ceil() as usize).min(w - 1);
    let y0 = (cy - reach).floor().max(0.0) as usize;
    let y1 = ((cy + reach).ceil() as usize).min(h - 1);
    for y in y0..=y1 {
        let dy = y as f64 + 0.5 - cy;
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - cx;
            let d2 = dx * dx + dy * dy;
            let v = (-d2 / (2.0 * s1 * s1)).exp() - ratio * (-d2 / (2.0 * s2 * s2)).exp();
            pixels[y * w + x] += amp * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_density_is_pure_background() {
        let p = SceneParams {
            count: CountDistribution::Poisson { mean: 0.0 },
            width: 64,
            height: 48,
            ..Default::default()
        };
        let s = generate_scene("bg", &p, 1).unwrap();
        assert_eq!(s.annotation.count(), 0);
        assert!((s.image.mean() - 0.5).abs() < 0.1);
    }

    #[test]
    fn deterministic_per_seed() {
        let p = SceneParams { width: 96, height: 80, ..Default::default() };
        let a = generate_scene("a", &p, 42).unwrap();
        let b = generate_scene("a", &p, 42).unwrap();
        assert_eq!(a.image.data, b.image.data);
        assert_eq!(a.annotation, b.annotation);
        assert_ne!(generate_scene("a", &p, 43).unwrap().image.data, a.image.data);
    }

    #[test]
    fn poisson_mean_matches_density() {
        let p = SceneParams {
            width: 200,
            height: 200,
            count: CountDistribution::Poisson { mean: 500.0 },
            ..Default::default()
        };
        let mean = (0..20).map(|s| generate_scene("d", &p, s).unwrap().annotation.count() as f64).sum::<f64>() / 20.0;
        assert!((mean - 500.0).abs() <= 25.0, "{mean}");
    }

    #[test]
    fn rejects_out_of_range_density() {
        let p = SceneParams { count: CountDistribution::Poisson { mean: 6000.0 }, ..Default::default() };
        assert!(generate_scene("x", &p, 0).is_err());
    }

    #[test]
    fn uniform_counts_in_range_and_points_in_bounds() {
        let p = SceneParams {
            width: 120,
            height: 90,
            count: CountDistribution::Uniform { min: 10, max: 20 },
            perspective: 0.8,
            ..Default::default()
        };
        for s in 0..10 {
            let sc = generate_scene("u", &p, s).unwrap();
            assert!((10..=20).contains(&sc.annotation.count()));
            sc.annotation.validate().unwrap();
            assert!(sc.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn perspective_concentrates_points_at_top() {
        let p = SceneParams {
            width: 200,
            height: 200,
            count: CountDistribution::Poisson { mean: 2000.0 },
            perspective: 1.0,
            ..Default::default()
        };
        let sc = generate_scene("p", &p, 3).unwrap();
        let top = sc.annotation.points.iter().filter(|p| p[1] < 100.0).count();
        assert!(top as f64 > 0.65 * sc.annotation.count() as f64);
    }

    #[test]
    fn splat_has_zero_mass() {
        let mut px = vec![0.0; 80 * 80];
        splat(&mut px, 80, 80, 40.0, 40.0, 6.0, 1.0);
        let total: f64 = px.iter().sum();
        assert!(total.abs() < 0.05 * 2.0 * std::f64::consts::PI * 9.0, "{total}");
        assert!(px[40 * 80 + 40] > 0.5);
    }
}
