//! Count prediction, MAE/MSE metrics, held-out and cross-domain evaluation.
//!
//! "MSE" follows the usual crowd-counting convention: it is the square root
//! of the mean squared count error.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{file_sha256, LabeledScene};
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::geom::Rect;
use crate::image::Image;
use crate::model::{CountingNet, NetConfig};
use crate::seed::rng_for;
use crate::tensor::{read_checkpoint, Real, Tensor};

/// Anything that maps an image batch `[N, C, H, W]` to density maps `[N, 1, H/s, W/s]`.
pub trait DensityModel {
    fn output_stride(&self) -> usize;
    fn density(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<T: Real> DensityModel for CountingNet<T> {
    fn output_stride(&self) -> usize {
        CountingNet::output_stride(self)
    }

    fn density(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.predict(&batch.cast())?.cast())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    /// Resize factor applied to the whole image before inference.
    pub scale: f64,
    /// Tile side in (rescaled) pixels; `None` runs the whole image at once.
    pub tile: Option<usize>,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions { scale: 1.0, tile: None }
    }
}

/// Count over one region, padding it reflectively to the stride and
/// weighting each output cell by its overlap with the unpadded region.
fn region_count(model: &dyn DensityModel, image: &Image) -> Result<f64> {
    let s = model.output_stride();
    let (h, w) = (image.height, image.width);
    let (ph, pw) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
    let padded = if (ph, pw) == (h, w) { image.clone() } else { image.reflect_pad(ph, pw)? };
    let out = model.density(&padded.to_tensor())?;
    let (oh, ow) = (ph / s, pw / s);
    if out.shape() != [1, 1, oh, ow] {
        return Err(Error::shape(
            "predict_count",
            format!("model returned {:?}, expected [1, 1, {oh}, {ow}]", out.shape()),
        ));
    }
    let cover = |i: usize, size: usize| ((size as f64 - (i * s) as f64) / s as f64).clamp(0.0, 1.0);
    let mut total = 0.0;
    for y in 0..oh {
        let wy = cover(y, h);
        for x in 0..ow {
            total += wy * cover(x, w) * out.data()[y * ow + x] as f64;
        }
    }
    Ok(total)
}

/// Full-image density map (reflect-padded to the stride), cropped to the
/// cells that overlap the image.
pub fn predict_density(model: &dyn DensityModel, image: &Image) -> Result<DensityMap> {
    let s = model.output_stride();
    let (h, w) = (image.height, image.width);
    if h < s || w < s {
        return Err(Error::ImageTooSmall(format!("{w}x{h} image is smaller than the network stride {s}")));
    }
    let (ph, pw) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
    let padded = if (ph, pw) == (h, w) { image.clone() } else { image.reflect_pad(ph, pw)? };
    let out = model.density(&padded.to_tensor())?;
    let (oh, ow) = (ph / s, pw / s);
    if out.shape() != [1, 1, oh, ow] {
        return Err(Error::shape(
            "predict_density",
            format!("model returned {:?}, expected [1, 1, {oh}, {ow}]", out.shape()),
        ));
    }
    Ok(DensityMap { height: oh, width: ow, grid: out.into_data(), scale: (s as f64, s as f64) })
}

/// Estimated person count for a full image.
pub fn predict_count(model: &dyn DensityModel, image: &Image, opts: &InferenceOptions) -> Result<f64> {
    if !(opts.scale > 0.0) {
        return Err(Error::Config(format!("inference scale {} must be positive", opts.scale)));
    }
    let s = model.output_stride();
    let resized;
    let image = if opts.scale == 1.0 {
        image
    } else {
        let w = ((image.width as f64 * opts.scale).round() as usize).max(1);
        let h = ((image.height as f64 * opts.scale).round() as usize).max(1);
        resized = image.crop_resize(&Rect::full(image.width as u32, image.height as u32), w, h);
        &resized
    };
    if image.height < s || image.width < s {
        return Err(Error::ImageTooSmall(format!(
            "{}x{} image is smaller than the network stride {s}",
            image.width, image.height
        )));
    }
    let Some(tile) = opts.tile else {
        return region_count(model, image);
    };
    if tile == 0 || tile % s != 0 {
        return Err(Error::Config(format!("tile side {tile} is not a multiple of the stride {s}")));
    }
    let mut total = 0.0;
    for y0 in (0..image.height).step_by(tile) {
        for x0 in (0..image.width).step_by(tile) {
            let th = tile.min(image.height - y0);
            let tw = tile.min(image.width - x0);
            let rect = Rect::new(x0 as f64, y0 as f64, tw as f64, th as f64);
            let mut crop = image.crop_resize(&rect, tw, th);
            // Slivers narrower than one stride cannot be reflected; widen them from the left/top.
            if th < s || tw < s {
                let (ey, ex) = (th.max(s.min(image.height)), tw.max(s.min(image.width)));
                let wide = Rect::new((x0 + tw - ex) as f64, (y0 + th - ey) as f64, ex as f64, ey as f64);
                crop = image.crop_resize(&wide, ex, ey);
                let c = region_count(model, &crop)?;
                total += c * (tw * th) as f64 / (ex * ey) as f64;
                continue;
            }
            total += region_count(model, &crop)?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub image_id: String,
    pub true_count: f64,
    pub pred: f64,
}

impl EvalItem {
    pub fn abs_err(&self) -> f64 {
        (self.pred - self.true_count).abs()
    }
}

/// Returns `(MAE, MSE)` where MSE is the root of the mean squared error.
pub fn mae_mse(items: &[EvalItem]) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = items.len() as f64;
    let mae = items.iter().map(EvalItem::abs_err).sum::<f64>() / n;
    let mse = (items.iter().map(|i| (i.pred - i.true_count).powi(2)).sum::<f64>() / n).sqrt();
    Ok((mae, mse))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub dataset_id: String,
    pub checkpoint_sha256: Option<String>,
    pub cross_dataset: bool,
    pub items: Vec<EvalItem>,
    pub mae: f64,
    pub mse: f64,
}

impl EvalReport {
    pub fn from_items(label: impl Into<String>, dataset_id: impl Into<String>, items: Vec<EvalItem>) -> Result<Self> {
        let (mae, mse) = mae_mse(&items)?;
        Ok(EvalReport {
            label: label.into(),
            dataset_id: dataset_id.into(),
            checkpoint_sha256: None,
            cross_dataset: false,
            items,
            mae,
            mse,
        })
    }

    /// `image_id,true,pred,abs_err` rows followed by `MAE` and `MSE` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,true,pred,abs_err\n");
        for i in &self.items {
            out.push_str(&format!("{},{},{},{}\n", i.image_id, i.true_count, i.pred, i.abs_err()));
        }
        out.push_str(&format!("MAE,,,{}\nMSE,,,{}\n", self.mae, self.mse));
        out
    }

    /// Writes `path` as CSV and a JSON sidecar with the same stem.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| Error::io(path, e))?;
        let json = path.with_extension("json");
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))
    }

    /// Reads a report from its JSON sidecar (or a CSV path next to one).
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let json = path.as_ref().with_extension("json");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: json, line: 0, source })
    }
}

/// Predicts every scene and aggregates the errors. Predictions are made in
/// dataset order so the sums are reproducible.
pub fn evaluate(
    model: &dyn DensityModel,
    scenes: &[LabeledScene],
    dataset_id: &str,
    label: &str,
    opts: &InferenceOptions,
) -> Result<EvalReport> {
    let items = scenes
        .iter()
        .map(|s| {
            Ok(EvalItem {
                image_id: s.id().to_string(),
                true_count: s.annotation.count() as f64,
                pred: predict_count(model, &s.image, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_items(label, dataset_id, items)
}

/// Loads a checkpoint and evaluates it on a different domain without any
/// further training.
pub fn transfer_eval(
    checkpoint: impl AsRef<Path>,
    expected: Option<&NetConfig>,
    target: &[LabeledScene],
    dataset_id: &str,
    opts: &InferenceOptions,
) -> Result<EvalReport> {
    let path = checkpoint.as_ref();
    let net: CountingNet<f32> = CountingNet::from_checkpoint(&read_checkpoint(path)?, expected)?;
    let mut report = evaluate(&net, target, dataset_id, "cross-dataset", opts)?;
    report.cross_dataset = true;
    report.checkpoint_sha256 = Some(file_sha256(path)?);
    Ok(report)
}

/// Seeded `k`-fold split of `0..n` into `(train, test)` index lists.
pub fn kfold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds < 2 || folds > n {
        return Err(Error::Config(format!("cannot split {n} items into {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[0xf01d]));
    Ok((0..folds)
        .map(|f| {
            let test: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % folds == f).map(|(_, &v)| v).collect();
            let train: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % folds != f).map(|(_, &v)| v).collect();
            (train, test)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{render_density_with, BorderMode, PointAnnotation};

    struct Constant {
        stride: usize,
        value: f32,
    }

    impl DensityModel for Constant {
        fn output_stride(&self) -> usize {
            self.stride
        }
        fn density(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
            let s = batch.shape();
            Ok(Tensor::full(vec![s[0], 1, s[2] / self.stride, s[3] / self.stride], self.value))
        }
    }

    /// Returns the ground-truth density of a fixed annotation.
    struct Oracle {
        ann: PointAnnotation,
    }

    impl DensityModel for Oracle {
        fn output_stride(&self) -> usize {
            4
        }
        fn density(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
            let s = batch.shape();
            let mut ann = self.ann.clone();
            ann.width = s[3] as u32;
            ann.height = s[2] as u32;
            let d = render_density_with(&ann, 15.0, (s[2] / 4, s[3] / 4), BorderMode::Renormalize)?;
            Ok(d.to_tensor())
        }
    }

    fn item(t: f64, p: f64) -> EvalItem {
        EvalItem { image_id: "x".into(), true_count: t, pred: p }
    }

    #[test]
    fn constant_head_counts_cells() {
        let m = Constant { stride: 16, value: 0.25 };
        let img = Image::filled(1, 224, 224, 0.5);
        assert!((predict_count(&m, &img, &InferenceOptions::default()).unwrap() - 196.0 * 0.25).abs() < 1e-9);
    }

    #[test]
    fn padding_is_excluded_from_the_sum() {
        let m = Constant { stride: 8, value: 1.0 };
        let img = Image::filled(1, 20, 12, 0.5);
        // 20x12 pixels at 1 per 8x8 cell is 240 / 64 = 3.75.
        assert!((predict_count(&m, &img, &InferenceOptions::default()).unwrap() - 3.75).abs() < 1e-9);
        let tiled = InferenceOptions { tile: Some(8), ..Default::default() };
        assert!((predict_count(&m, &img, &tiled).unwrap() - 3.75).abs() < 1e-9);
    }

    #[test]
    fn oracle_model_recovers_count() {
        let ann = PointAnnotation::new("o", 64, 64, vec![[10.0, 10.0], [30.0, 40.0], [50.0, 20.0]]).unwrap();
        let m = Oracle { ann };
        let p = predict_count(&m, &Image::filled(1, 64, 64, 0.0), &InferenceOptions::default()).unwrap();
        assert!((p - 3.0).abs() < 1e-4);
    }

    #[test]
    fn too_small_image_rejected() {
        let m = Constant { stride: 16, value: 1.0 };
        assert!(predict_count(&m, &Image::filled(1, 8, 64, 0.0), &InferenceOptions::default()).is_err());
    }

    #[test]
    fn metric_examples() {
        let (mae, mse) = mae_mse(&[item(5.0, 5.0), item(2.0, 2.0)]).unwrap();
        assert_eq!((mae, mse), (0.0, 0.0));
        let (mae, mse) = mae_mse(&[item(10.0, 13.0), item(10.0, 6.0)]).unwrap();
        assert_eq!(mae, 3.5);
        assert!((mse - 12.5f64.sqrt()).abs() < 1e-12);
        assert!(mae_mse(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = EvalReport::from_items("l", "d", vec![item(1.0, 2.0)]).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "image_id,true,pred,abs_err");
        assert_eq!(lines[1], "x,1,2,1");
        assert_eq!(&lines[2..], ["MAE,,,1", "MSE,,,1"]);
    }

    #[test]
    fn report_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = EvalReport::from_items("l", "d", vec![item(1.0, 2.5), item(3.0, 1.0)]).unwrap();
        let p = dir.path().join("r.csv");
        r.write(&p).unwrap();
        assert_eq!(EvalReport::read(&p).unwrap(), r);
    }

    #[test]
    fn folds_partition_indices() {
        let folds = kfold_split(23, 5, 1).unwrap();
        let mut all: Vec<usize> = folds.iter().flat_map(|(_, t)| t.clone()).collect();
        all.sort();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        for (train, test) in &folds {
            assert_eq!(train.len() + test.len(), 23);
            assert!(test.iter().all(|i| !train.contains(i)));
        }
        assert_eq!(folds, kfold_split(23, 5, 1).unwrap());
        assert!(kfold_split(3, 5, 1).is_err());
    }
}
