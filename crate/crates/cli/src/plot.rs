//! Static bar chart of a metrics report: PSNR in the upper panel, SSIM in
//! the lower one, restored entries in blue and baseline entries in grey.

use image::{Rgb, RgbImage};
use vtcd_core::metrics::{MetricsReport, VolumeMetrics};

const WIDTH: u32 = 640;
const PANEL: u32 = 200;
const MARGIN: u32 = 20;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const RESTORED: Rgb<u8> = Rgb([49, 110, 190]);
const BASELINE: Rgb<u8> = Rgb([160, 160, 160]);

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>) {
    for x in x0..x1.min(img.width()) {
        for y in y0..y1.min(img.height()) {
            img.put_pixel(x, y, c);
        }
    }
}

/// One panel with its top edge at `top`; values are scaled to `[0, max]`
/// and drawn clamped, so negative SSIM shows as an empty bar.
fn panel(img: &mut RgbImage, top: u32, series: &[(&[VolumeMetrics], Rgb<u8>)], value: fn(&VolumeMetrics) -> f64, max: f64) {
    let (left, right) = (MARGIN, WIDTH - MARGIN);
    let (y_top, y_bot) = (top + MARGIN, top + PANEL - MARGIN);
    let height = (y_bot - y_top) as f64;
    for k in 1..=4 {
        let y = y_bot - (height * k as f64 / 4.0) as u32;
        fill(img, left, y, right, y + 1, GRID);
    }
    let groups = series.iter().map(|(s, _)| s.len()).max().unwrap_or(0).max(1) as u32;
    let slot = (right - left) / groups;
    let bar = (slot / (series.len() as u32 + 1)).max(1);
    for (j, (entries, colour)) in series.iter().enumerate() {
        for (i, e) in entries.iter().enumerate() {
            let frac = (value(e) / max).clamp(0.0, 1.0);
            let h = (height * frac).round() as u32;
            let x = left + i as u32 * slot + bar / 2 + j as u32 * bar;
            fill(img, x, y_bot - h, x + bar.saturating_sub(1).max(1), y_bot, *colour);
        }
    }
    fill(img, left, y_top, left + 1, y_bot + 1, AXIS);
    fill(img, left, y_bot, right, y_bot + 1, AXIS);
}

pub fn render(report: &MetricsReport) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, 2 * PANEL, BACKGROUND);
    let mut series: Vec<(&[VolumeMetrics], Rgb<u8>)> = vec![(&report.per_volume, RESTORED)];
    if let Some(b) = &report.baseline {
        series.push((&b.per_volume, BASELINE));
    }
    let psnr_max = series
        .iter()
        .flat_map(|(s, _)| s.iter().map(|e| e.psnr_db))
        .filter(|v| v.is_finite())
        .fold(1.0f64, f64::max);
    panel(&mut img, 0, &series, |e| e.psnr_db, psnr_max);
    panel(&mut img, PANEL, &series, |e| e.ssim, 1.0);
    img
}
