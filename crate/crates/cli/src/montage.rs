//! Grayscale PNG grids: one row per sample, one column per image stack.

use std::path::Path;

use anyhow::{ensure, Result};
use dualglow::Tensor;
use image::{GrayImage, Luma};

const SCALE: u32 = 4;
const GAP: u32 = 2;

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Tiles the first channel of up to `rows` samples from each `[N, C, H, W]`
/// stack, side by side.
pub fn render(columns: &[&Tensor<f32>], rows: usize) -> Result<GrayImage> {
    ensure!(!columns.is_empty(), "montage needs at least one column");
    let (n, _, h, w) = columns[0].dims4()?;
    for c in columns {
        ensure!(c.dims4()?.0 == n && c.dims4()?.2 == h && c.dims4()?.3 == w, "montage columns differ in shape");
    }
    let rows = rows.min(n);
    let (tw, th) = (w as u32 * SCALE, h as u32 * SCALE);
    let width = columns.len() as u32 * (tw + GAP) + GAP;
    let height = rows as u32 * (th + GAP) + GAP;
    let mut img = GrayImage::from_pixel(width, height, Luma([255]));
    for (col, stack) in columns.iter().enumerate() {
        for r in 0..rows {
            let s = stack.sample(r)?;
            let x0 = GAP + col as u32 * (tw + GAP);
            let y0 = GAP + r as u32 * (th + GAP);
            for y in 0..th {
                for x in 0..tw {
                    let v = s.data()[(y / SCALE) as usize * w + (x / SCALE) as usize];
                    img.put_pixel(x0 + x, y0 + y, Luma([to_byte(v)]));
                }
            }
        }
    }
    Ok(img)
}

pub fn write(path: &Path, columns: &[&Tensor<f32>], rows: usize) -> Result<()> {
    render(columns, rows)?.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_intensity() {
        let a = Tensor::new(vec![2, 1, 2, 2], vec![-1.0, 1.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let img = render(&[&a, &a], 1).unwrap();
        assert_eq!(img.dimensions(), (2 * (8 + GAP) + GAP, 8 + 2 * GAP));
        assert_eq!(img.get_pixel(GAP, GAP).0, [0]);
        assert_eq!(img.get_pixel(GAP + 4, GAP).0, [255]);
        assert_eq!(img.get_pixel(GAP, GAP + 4).0, [128]);
        assert_eq!(img.get_pixel(0, 0).0, [255]);
    }
}
