//! Minimal line chart rendered straight into pixels.

use std::path::Path;

use hkd_core::Error;
use image::{Rgb, RgbImage};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: f64 = 40.0;

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        put(img, x.round() as i64, y.round() as i64, c);
    }
}

fn dot(img: &mut RgbImage, (x, y): (f64, f64), c: Rgb<u8>) {
    for dx in -2..=2 {
        for dy in -2..=2 {
            put(img, x.round() as i64 + dx, y.round() as i64 + dy, c);
        }
    }
}

/// Draws `ys` against `xs` with ±`err` bars. No labels; the numbers live in
/// the accompanying CSV.
pub fn render_line_chart(xs: &[f64], ys: &[f64], err: &[f64]) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (left, right, top, bottom) = (MARGIN, W as f64 - MARGIN, MARGIN, H as f64 - MARGIN);
    line(&mut img, (left, bottom), (right, bottom), axis);
    line(&mut img, (left, bottom), (left, top), axis);
    if xs.is_empty() {
        return img;
    }
    let span = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
    let (x_lo, x_hi) = span(xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let lows = ys.iter().zip(err).map(|(y, e)| y - e);
    let highs = ys.iter().zip(err).map(|(y, e)| y + e);
    let (y_lo, y_hi) = span(lows.fold(f64::INFINITY, f64::min), highs.fold(f64::NEG_INFINITY, f64::max));
    let px = |x: f64| left + (x - x_lo) / (x_hi - x_lo) * (right - left);
    let py = |y: f64| bottom - (y - y_lo) / (y_hi - y_lo) * (bottom - top);
    let series = Rgb([200, 40, 40]);
    let bars = Rgb([120, 120, 200]);
    for i in 0..xs.len() {
        let x = px(xs[i]);
        line(&mut img, (x, py(ys[i] - err[i])), (x, py(ys[i] + err[i])), bars);
        if i + 1 < xs.len() {
            line(&mut img, (x, py(ys[i])), (px(xs[i + 1]), py(ys[i + 1])), series);
        }
        dot(&mut img, (x, py(ys[i])), series);
    }
    img
}

pub fn save_line_chart(xs: &[f64], ys: &[f64], err: &[f64], path: &Path) -> hkd_core::Result<()> {
    render_line_chart(xs, ys, err).save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_land_inside_the_plot_area() {
        let img = render_line_chart(&[1.0, 2.0, 4.0], &[50.0, 60.0, 55.0], &[1.0, 0.0, 2.0]);
        let red = img.pixels().filter(|p| **p == Rgb([200, 40, 40])).count();
        assert!(red > 50);
        assert_eq!(*img.get_pixel(5, 5), Rgb([255, 255, 255]));
    }

    #[test]
    fn single_point_does_not_divide_by_zero() {
        let img = render_line_chart(&[3.0], &[7.0], &[0.0]);
        assert!(img.pixels().any(|p| *p == Rgb([200, 40, 40])));
    }
}
