//! Overlaid histograms of generated and reference property values as PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 20;
const GENERATED: Rgb<u8> = Rgb([40, 90, 200]);
const REFERENCE: Rgb<u8> = Rgb([230, 120, 30]);

fn counts(values: &[f64], lo: f64, width: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    let n = values.len().max(1) as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

/// Side-by-side bars per bin: generated in blue, reference in orange.
pub fn histogram(path: &Path, generated: &[f64], reference: &[f64], bins: usize) -> Result<(), String> {
    let all = generated.iter().chain(reference).copied().filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let bins = bins.max(1);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let (g, r) = (counts(generated, lo, width, bins), counts(reference, lo, width, bins));
    let top = g.iter().chain(&r).copied().fold(0.0, f64::max).max(1e-12);

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let plot_w = WIDTH - 2 * MARGIN;
    let plot_h = HEIGHT - 2 * MARGIN;
    let slot = plot_w / bins as u32;
    let bar = (slot / 2).max(1);
    for b in 0..bins {
        for (k, (frac, color)) in [(g[b], GENERATED), (r[b], REFERENCE)].into_iter().enumerate() {
            let h = ((frac / top) * plot_h as f64).round() as u32;
            let x0 = MARGIN + b as u32 * slot + k as u32 * bar;
            for x in x0..(x0 + bar).min(WIDTH - MARGIN) {
                for y in (HEIGHT - MARGIN - h)..(HEIGHT - MARGIN) {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    for x in MARGIN..WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, Rgb([0, 0, 0]));
    }
    img.save(path).map_err(|e| format!("{}: {e}", path.display()))
}
