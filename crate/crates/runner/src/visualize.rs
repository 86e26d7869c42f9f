//! Side-by-side PNG panels: current observation, prediction heatmap, query
//! mask and detection heatmap, with ground-truth and detection markers.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{s, Array2};

use p2d_core::detection::DetectionBox;
use p2d_core::grid::GridSpec;
use p2d_core::model::ModelOutput;
use p2d_core::query::class_agnostic_heatmap;
use p2d_core::scene::{Frame, SceneObject};

use crate::error::Result;

const GT: Rgb<u8> = Rgb([60, 220, 90]);
const DET: Rgb<u8> = Rgb([240, 60, 200]);
const SEPARATOR: usize = 4;

/// Black-red-yellow-white ramp over `[0, 1]`.
fn heat(v: f32) -> Rgb<u8> {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let c = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([c(3.0 * v), c(3.0 * v - 1.0), c(3.0 * v - 2.0)])
}

pub struct Panel {
    pub title: &'static str,
    /// `[X, Y]` values in `[0, 1]`.
    pub values: Array2<f32>,
}

/// Builds the panels for one frame. Panels a mode does not produce are
/// omitted.
pub fn panels(frame: &Frame, num_classes: usize, output: &ModelOutput<f32>) -> Vec<Panel> {
    let occupancy = frame
        .observation
        .slice(s![.., .., ..num_classes])
        .map_axis(ndarray::Axis(2), |c| c.iter().copied().fold(0.0f32, f32::max));
    let mut out = vec![Panel {
        title: "observation",
        values: occupancy,
    }];
    if let Some(first) = &output.first_stage {
        out.push(Panel {
            title: "prediction",
            values: class_agnostic_heatmap(&first.heatmaps),
        });
    }
    if let Some(mask) = &output.query_mask {
        out.push(Panel {
            title: "queries",
            values: mask.mask.mapv(|m| if m { 1.0 } else { 0.0 }),
        });
    }
    out.push(Panel {
        title: "detection",
        values: class_agnostic_heatmap(&output.detection.heatmaps),
    });
    out
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Renders panels left to right; cell `(i, j)` maps to a `scale`-pixel
/// square with `x` to the right and `y` up.
pub fn render(grid: &GridSpec, panels: &[Panel], ground_truth: &[SceneObject], detections: &[DetectionBox], scale: usize) -> RgbImage {
    let scale = scale.max(1);
    let (nx, ny) = grid.shape();
    let pw = nx * scale;
    let width = panels.len() * pw + panels.len().saturating_sub(1) * SEPARATOR;
    let mut img = RgbImage::from_pixel(width.max(1) as u32, (ny * scale) as u32, Rgb([255, 255, 255]));
    let to_px = |x0: usize, wx: f64, wy: f64| {
        let (u, v) = grid.to_cell_coords(wx, wy);
        ((x0 as f64 + u * scale as f64).floor() as i64, ((ny as f64 - v) * scale as f64).floor() as i64)
    };
    for (p, panel) in panels.iter().enumerate() {
        let x0 = p * (pw + SEPARATOR);
        for ((i, j), &v) in panel.values.indexed_iter() {
            let color = heat(v);
            for dx in 0..scale {
                for dy in 0..scale {
                    img.put_pixel((x0 + i * scale + dx) as u32, ((ny - 1 - j) * scale + dy) as u32, color);
                }
            }
        }
        let r = (scale as i64 / 2).max(2);
        for gt in ground_truth {
            let (cx, cy) = to_px(x0, gt.center[0], gt.center[1]);
            for d in -r..=r {
                put(&mut img, cx + d, cy - r, GT);
                put(&mut img, cx + d, cy + r, GT);
                put(&mut img, cx - r, cy + d, GT);
                put(&mut img, cx + r, cy + d, GT);
            }
        }
        for det in detections {
            let (cx, cy) = to_px(x0, det.center[0], det.center[1]);
            for d in -r..=r {
                put(&mut img, cx + d, cy + d, DET);
                put(&mut img, cx + d, cy - d, DET);
            }
        }
    }
    img
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path)?;
    Ok(())
}
