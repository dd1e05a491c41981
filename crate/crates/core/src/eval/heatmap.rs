use std::path::Path;

use image::{Rgb, RgbImage};
use log::warn;
use ndarray::{s, Array4};

use crate::error::{Error, Result};
use crate::graph::softmax_with_temperature;
use crate::linalg::{self, Matrix};
use crate::models::Backbone;

/// Pairwise cosine similarity of the network's softmax predictions over the
/// first `requested` images. Fewer available images shrink the matrix with
/// a warning.
pub fn prediction_heatmap(network: &Backbone, images: &Array4<f64>, requested: usize) -> Result<Matrix> {
    let available = images.dim().0;
    if available == 0 {
        return Err(Error::InvalidArgument("heatmap needs at least one image".into()));
    }
    let n = if available < requested {
        warn!("heatmap requested {requested} instances, only {available} available");
        available
    } else {
        requested
    };
    let logits = network.forward(&images.slice(s![..n, .., .., ..]).to_owned()).logits;
    let p = softmax_with_temperature(&logits.view(), 1.0)?;
    let mut sim = linalg::cosine_similarity_matrix(&p.view());
    sim.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(sim)
}

/// Blue (−1) through white (0) to red (+1).
pub fn diverging_color(v: f64) -> Rgb<u8> {
    let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |t: f64| (255.0 * (1.0 - t)).round() as u8;
    if v >= 0.0 {
        Rgb([255, fade(v), fade(v)])
    } else {
        Rgb([fade(-v), fade(-v), 255])
    }
}

/// Renders `m` with a fixed [−1, 1] color scale, `cell` pixels per entry.
pub fn render_heatmap(m: &Matrix, cell: u32) -> RgbImage {
    let (r, c) = m.dim();
    let cell = cell.max(1);
    RgbImage::from_fn(c as u32 * cell, r as u32 * cell, |x, y| {
        diverging_color(m[[(y / cell) as usize, (x / cell) as usize]])
    })
}

pub fn save_heatmap_png(m: &Matrix, cell: u32, path: &Path) -> Result<()> {
    render_heatmap(m, cell).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_matrix_csv(m: &Matrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for row in m.outer_iter() {
        w.write_record(row.iter().map(|v| format!("{v:.17e}")))
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
