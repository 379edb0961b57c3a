//! Plots and image grids.

use std::path::Path;

use image::{Rgb, RgbImage};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ResultsTable;
use crate::semantic_codec::ImageBatch;

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

/// PSNR (or SSIM) against SNR for every method of one channel. Noise-free
/// rows are left out of the plot.
pub fn plot_metric_vs_snr(table: &ResultsTable, channel: &str, metric: &str, path: &Path) -> Result<()> {
    let rows: Vec<_> = table
        .rows
        .iter()
        .filter(|r| r.channel == channel && r.snr_db.is_finite())
        .collect();
    let value = |r: &crate::metrics::ResultRow| if metric == "ssim" { r.ssim } else { r.psnr };
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.dedup();
    let xs = rows.iter().map(|r| r.snr_db);
    let ys = rows.iter().map(|r| value(r)).filter(|v| v.is_finite());
    let (x0, x1) = xs.fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(x), b.max(x)));
    let (y0, y1) = ys.fold((f64::MAX, f64::MIN), |(a, b), y| (a.min(y), b.max(y)));
    let (x0, x1) = if x0 > x1 { (0.0, 1.0) } else if x0 == x1 { (x0 - 1.0, x1 + 1.0) } else { (x0, x1) };
    let (y0, y1) = if y0 > y1 { (0.0, 1.0) } else { (y0 - 0.05 * (y1 - y0 + 1.0), y1 + 0.05 * (y1 - y0 + 1.0)) };

    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} vs SNR ({channel})", metric.to_uppercase()), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("SNR (dB)")
        .y_desc(if metric == "ssim" { "SSIM" } else { "PSNR (dB)" })
        .draw()
        .map_err(plot_err)?;
    for (i, m) in methods.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.method == *m && value(r).is_finite())
            .map(|r| (r.snr_db, value(r)))
            .collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(*m)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// One row of the visual comparison grid.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub label: String,
    pub images: ImageBatch,
    /// Per-image PSNR; empty for the reference row.
    pub psnr: Vec<f64>,
    /// Per-image PSNR gain in percent over the comparison row, if known.
    pub gain_percent: Vec<Option<f64>>,
}

/// Sidecar describing the grid, since only numbers are drawn into the PNG.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridIndex {
    pub snr_db: f64,
    pub channel: String,
    pub rows: Vec<GridIndexRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridIndexRow {
    pub label: String,
    pub psnr: Vec<f64>,
    pub gain_percent: Vec<Option<f64>>,
}

const SCALE: usize = 3;
const GAP: usize = 4;
const GLYPH_SCALE: usize = 2;
const TEXT_ROWS: usize = 2;

/// 3×5 bitmaps, one row per byte (low three bits, MSB on the left).
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '%' => [0b101, 0b001, 0b010, 0b100, 0b101],
        'd' => [0b001, 0b001, 0b111, 0b101, 0b111],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        ' ' => [0; 5],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x0: usize, y0: usize, text: &str, color: Rgb<u8>) {
    let mut x = x0;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..3 {
                    if row >> (2 - dx) & 1 == 1 {
                        for sy in 0..GLYPH_SCALE {
                            for sx in 0..GLYPH_SCALE {
                                let (px, py) = (x + dx * GLYPH_SCALE + sx, y0 + dy * GLYPH_SCALE + sy);
                                if (px as u32) < img.width() && (py as u32) < img.height() {
                                    img.put_pixel(px as u32, py as u32, color);
                                }
                            }
                        }
                    }
                }
            }
        }
        x += 4 * GLYPH_SCALE;
    }
}

/// Tiles every row's images (upscaled) with the PSNR and gain printed under
/// each tile.
pub fn render_grid(rows: &[GridRow]) -> Result<RgbImage> {
    let first = rows.first().ok_or_else(|| Error::Plot("grid has no rows".into()))?;
    let (h, w) = (first.images.height(), first.images.width());
    let cols = first.images.batch();
    if rows.iter().any(|r| r.images.batch() != cols || r.images.height() != h || r.images.width() != w) {
        return Err(Error::Plot("grid rows differ in size".into()));
    }
    let text_h = TEXT_ROWS * 6 * GLYPH_SCALE + 2;
    let tile_w = w * SCALE;
    let tile_h = h * SCALE + text_h;
    let width = cols * tile_w + (cols + 1) * GAP;
    let height = rows.len() * tile_h + (rows.len() + 1) * GAP;
    let mut canvas = RgbImage::from_pixel(width as u32, height as u32, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for c in 0..cols {
            let rgb = row.images.to_rgb8(c)?;
            let (ox, oy) = (GAP + c * (tile_w + GAP), GAP + r * (tile_h + GAP));
            for y in 0..h * SCALE {
                for x in 0..w * SCALE {
                    let p = ((y / SCALE) * w + x / SCALE) * 3;
                    canvas.put_pixel((ox + x) as u32, (oy + y) as u32, Rgb([rgb[p], rgb[p + 1], rgb[p + 2]]));
                }
            }
            let ty = oy + h * SCALE + 2;
            if let Some(p) = row.psnr.get(c) {
                draw_text(&mut canvas, ox, ty, &format!("{p:.2}dB"), Rgb([0, 0, 0]));
            }
            if let Some(Some(g)) = row.gain_percent.get(c) {
                let color = if *g >= 0.0 { Rgb([0, 120, 0]) } else { Rgb([180, 0, 0]) };
                draw_text(&mut canvas, ox, ty + 6 * GLYPH_SCALE, &format!("{g:+.1}%"), color);
            }
        }
    }
    Ok(canvas)
}

pub fn save_grid(rows: &[GridRow], path: &Path) -> Result<()> {
    render_grid(rows)?.save(path)?;
    Ok(())
}
