//! Grid of per-iteration pseudo-masks for one unannotated image.
//!
//! Rows are the segmentation mean, the registration mean and the fused
//! confidence; columns are iterations. Cells are separated by
//! [`GAP`]-pixel white lines. A missing artifact becomes a gap marker: a dark
//! cell crossed by both diagonals.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};

use crate::error::{ensure, Error, Result};

pub const GAP: usize = 2;
pub const ROWS: [&str; 3] = ["seg", "reg", "fused"];
const GAP_VALUE: u8 = 255;
const MISSING_FILL: u8 = 32;
const MISSING_MARK: u8 = 200;

/// 16-bit confidence to 8 bits.
pub fn quantize(v: u16) -> u8 {
    ((v as f64) / 257.0).round() as u8
}

/// Iterations with a `pseudo/iter_<t>` directory, ascending.
pub fn available_iterations(run_dir: &Path) -> Result<Vec<usize>> {
    let dir = run_dir.join("pseudo");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut its: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("iter_")?.parse().ok())
        .collect();
    its.sort_unstable();
    Ok(its)
}

pub fn cell_path(run_dir: &Path, iteration: usize, image_id: &str, row: &str) -> PathBuf {
    run_dir.join("pseudo").join(format!("iter_{iteration}")).join(format!("{image_id}_{row}.png"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanelInfo {
    pub iterations: Vec<usize>,
    /// (iteration, row name) of every gap marker.
    pub missing: Vec<(usize, &'static str)>,
    pub cell: (usize, usize),
}

fn load_cell(path: &Path) -> Result<Option<ImageBuffer<Luma<u16>, Vec<u16>>>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(image::open(path)?.into_luma16()))
}

/// Renders columns for `0..=last` (every iteration up to the newest one on
/// disk) and writes an 8-bit PNG to `out`.
pub fn render_iteration_panel(run_dir: &Path, image_id: &str, out: &Path) -> Result<PanelInfo> {
    let found = available_iterations(run_dir)?;
    let last = *found.last().ok_or_else(|| Error::Contract(format!("no pseudo-masks under {}", run_dir.display())))?;
    let iterations: Vec<usize> = (0..=last).collect();
    let mut cells = vec![];
    let mut shape = None;
    for &t in &iterations {
        for row in ROWS {
            let c = load_cell(&cell_path(run_dir, t, image_id, row))?;
            if let Some(img) = &c {
                let s = (img.height() as usize, img.width() as usize);
                ensure!(shape.is_none_or(|x| x == s), "pseudo-mask sizes differ for {image_id}");
                shape = Some(s);
            }
            cells.push((t, row, c));
        }
    }
    let (h, w) = shape.ok_or_else(|| Error::Contract(format!("no pseudo-masks stored for image {image_id}")))?;
    let cols = iterations.len();
    let (pw, ph) = (cols * w + (cols - 1) * GAP, ROWS.len() * h + (ROWS.len() - 1) * GAP);
    let mut canvas: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_pixel(pw as u32, ph as u32, Luma([GAP_VALUE]));
    let mut missing = vec![];
    for (k, (t, row, cell)) in cells.into_iter().enumerate() {
        let (c, r) = (k / ROWS.len(), k % ROWS.len());
        let (x0, y0) = (c * (w + GAP), r * (h + GAP));
        for i in 0..h {
            for j in 0..w {
                let v = match &cell {
                    Some(img) => quantize(img.get_pixel(j as u32, i as u32)[0]),
                    // Both diagonals, scaled to non-square cells.
                    None if i * w / h == j || i * w / h == w - 1 - j => MISSING_MARK,
                    None => MISSING_FILL,
                };
                canvas.put_pixel((x0 + j) as u32, (y0 + i) as u32, Luma([v]));
            }
        }
        if cell.is_none() {
            missing.push((t, row));
        }
    }
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    canvas.save(out)?;
    Ok(PanelInfo { iterations, missing, cell: (h, w) })
}
