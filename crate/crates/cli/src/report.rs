//! Side-by-side grids: original, counterfactual and an absolute-difference
//! heatmap per benchmark record.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

use crate::read_manifest;

const PAD: u32 = 2;
const SCALE: u32 = 2;

/// Heatmap colour of a difference in `[0, 1]`: black through red to yellow.
fn heat(v: f64) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let r = (v * 2.0).min(1.0);
    let g = (v * 2.0 - 1.0).max(0.0);
    Rgb([(r * 255.0).round() as u8, (g * 255.0).round() as u8, 0])
}

/// Writes the grid next to the manifest (or to `out`) and returns its path.
pub fn cmd_report(manifest_path: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("report.png"));
    let mut rows = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let load = |f: &str| {
            image::open(dir.join(f))
                .with_context(|| format!("reading {}", dir.join(f).display()))
                .map(|i| i.to_rgb8())
        };
        rows.push((load(&r.original)?, load(&r.explanation)?));
    }
    let (w, h) = rows.first().map_or((32, 32), |(a, _)| a.dimensions());
    let (cw, ch) = (w * SCALE, h * SCALE);
    let n = rows.len().max(1) as u32;
    let mut grid = RgbImage::from_pixel(3 * cw + 4 * PAD, n * ch + (n + 1) * PAD, Rgb([255, 255, 255]));
    for (i, (a, b)) in rows.iter().enumerate() {
        let y0 = PAD + i as u32 * (ch + PAD);
        for y in 0..ch {
            for x in 0..cw {
                let pa = a.get_pixel(x / SCALE, y / SCALE);
                let pb = b.get_pixel(x / SCALE, y / SCALE);
                let diff = pa
                    .0
                    .iter()
                    .zip(pb.0.iter())
                    .map(|(&u, &v)| (u as f64 - v as f64).abs() / 255.0)
                    .fold(0.0, f64::max);
                grid.put_pixel(PAD + x, y0 + y, *pa);
                grid.put_pixel(2 * PAD + cw + x, y0 + y, *pb);
                grid.put_pixel(3 * PAD + 2 * cw + x, y0 + y, heat(diff));
            }
        }
    }
    grid.save(&out).with_context(|| format!("writing {}", out.display()))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_endpoints() {
        assert_eq!(heat(0.0), Rgb([0, 0, 0]));
        assert_eq!(heat(1.0), Rgb([255, 255, 0]));
        assert_eq!(heat(0.5), Rgb([255, 0, 0]));
    }
}
