use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rankcount_core::data::LabeledScene;
use rankcount_core::density::render_density;
use rankcount_core::eval::{predict_density, DensityModel, EvalReport};
use rankcount_core::geom::Rect;

/// Markdown and CSV tables of reports on one dataset, best MAE first.
pub fn comparison_table(reports: &[EvalReport]) -> Result<(String, String)> {
    let Some(first) = reports.first() else { bail!("no reports to compare") };
    if let Some(other) = reports.iter().find(|r| r.dataset_id != first.dataset_id) {
        bail!(
            "reports cover different datasets: `{}` is on {} but `{}` is on {}",
            first.label,
            first.dataset_id,
            other.label,
            other.dataset_id
        );
    }
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.mae.total_cmp(&b.mae));
    let mut md =
        format!("Dataset `{}`\n\n| model | images | MAE | MSE | transfer |\n|---|---|---|---|---|\n", first.dataset_id);
    let mut csv = String::from("model,images,mae,mse,cross_dataset\n");
    for r in sorted {
        let _ = writeln!(
            md,
            "| {} | {} | {:.3} | {:.3} | {} |",
            r.label,
            r.items.len(),
            r.mae,
            r.mse,
            if r.cross_dataset { "yes" } else { "no" }
        );
        let _ = writeln!(csv, "{},{},{},{},{}", r.label, r.items.len(), r.mae, r.mse, r.cross_dataset);
    }
    Ok((md, csv))
}

fn pgm(width: usize, height: usize, values: &[f32], max: f32) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        values.iter().map(|&v| if max > 0.0 { (255.0 * (v.max(0.0) / max)).round().min(255.0) as u8 } else { 0 }),
    );
    out
}

/// Writes `<id>_image.pgm`, `<id>_gt.pgm`, `<id>_pred.pgm` (all at image
/// resolution, densities on a shared intensity scale) and `<id>_triptych.pgm`
/// with the three side by side. Returns the triptych path.
pub fn write_triptych(model: &dyn DensityModel, scene: &LabeledScene, scale: f64, dir: &Path) -> Result<PathBuf> {
    let (w, h) = (scene.image.width, scene.image.height);
    let resized;
    let input = if scale == 1.0 {
        &scene.image
    } else {
        let sw = ((w as f64 * scale).round() as usize).max(1);
        let sh = ((h as f64 * scale).round() as usize).max(1);
        resized = scene.image.crop_resize(&Rect::full(w as u32, h as u32), sw, sh);
        &resized
    };
    let pred = predict_density(model, input)?;
    let cell = pred.scale.0 / scale;
    let per_pixel = (cell * cell) as f32;
    let mut pred_px = Vec::with_capacity(w * h);
    for y in 0..h {
        let gy = ((y as f64 / cell) as usize).min(pred.height - 1);
        for x in 0..w {
            let gx = ((x as f64 / cell) as usize).min(pred.width - 1);
            pred_px.push(pred.grid[gy * pred.width + gx] / per_pixel);
        }
    }
    let gt = render_density(&scene.annotation, 15.0, (h, w))?;
    let max = gt.grid.iter().chain(&pred_px).cloned().fold(0.0f32, f32::max);

    let image_values: Vec<f32> = scene.image.data[..w * h].to_vec();
    let mut joined = Vec::with_capacity(3 * w * h);
    for y in 0..h {
        joined.extend(image_values[y * w..(y + 1) * w].iter().map(|v| v * max));
        joined.extend_from_slice(&gt.grid[y * w..(y + 1) * w]);
        joined.extend_from_slice(&pred_px[y * w..(y + 1) * w]);
    }
    let id = scene.id();
    let write = |name: String, bytes: Vec<u8>| -> Result<PathBuf> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    };
    write(format!("{id}_image.pgm"), pgm(w, h, &image_values, 1.0))?;
    write(format!("{id}_gt.pgm"), pgm(w, h, &gt.grid, max))?;
    write(format!("{id}_pred.pgm"), pgm(w, h, &pred_px, max))?;
    write(format!("{id}_triptych.pgm"), pgm(3 * w, h, &joined, max))
}
