//! Raster export of image grids.
//!
//! Cells are laid out row-major. Every cell occupies a tile two pixels taller
//! and wider than the image, with the extra pixels left white as a separator
//! on the right and bottom edges, so an `R x C` grid of `h x w` cells becomes
//! a `(h+2)*R` by `(w+2)*C` image. PNG is the primary format; PGM (binary
//! `P5`, grayscale only) is available so the output can be inspected with no
//! image tooling at all.

use std::path::Path;

use ndarray::{ArrayView4, Axis};
use rotvae::{Error, Result};

/// Width in pixels of the white strip after each cell (right and bottom).
pub const SEPARATOR: usize = 2;

/// Pixel size `(height, width)` of the exported image for a grid of
/// `rows x cols` cells each `h x w`.
pub fn grid_pixel_dims(rows: usize, cols: usize, h: usize, w: usize) -> (usize, usize) {
    (rows * (h + SEPARATOR), cols * (w + SEPARATOR))
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round() as u8
}

/// Render `cells` (`[rows * cols, channels, h, w]`, values in `[0, 1]`,
/// row-major cell order) into an 8-bit image file. The extension picks the
/// format: `.png` (1 or 3 channels) or `.pgm` (1 channel).
pub fn export_image_grid(
    cells: ArrayView4<'_, f32>,
    rows: usize,
    cols: usize,
    path: &Path,
) -> Result<()> {
    let (n, c, h, w) = cells.dim();
    if rows == 0 || cols == 0 || n != rows * cols {
        return Err(Error::Shape(format!(
            "grid of {rows} x {cols} cells needs {} images, got {n}",
            rows * cols
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty cell image".into()));
    }
    if c != 1 && c != 3 {
        return Err(Error::Shape(format!(
            "grid export handles 1 (gray) or 3 (RGB) channels, got {c}"
        )));
    }
    if let Some(&bad) = cells
        .iter()
        .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        return Err(Error::Numerical(format!(
            "pixel value {bad} outside [0, 1]"
        )));
    }

    let (out_h, out_w) = grid_pixel_dims(rows, cols, h, w);
    // White canvas; cells overwrite their tile's top-left h x w block, which
    // leaves the separator strips white.
    let mut buf = vec![255u8; out_h * out_w * c];
    for row in 0..rows {
        for col in 0..cols {
            let cell = cells.index_axis(Axis(0), row * cols + col);
            let y0 = row * (h + SEPARATOR);
            let x0 = col * (w + SEPARATOR);
            for y in 0..h {
                for x in 0..w {
                    let px = ((y0 + y) * out_w + x0 + x) * c;
                    for ch in 0..c {
                        buf[px + ch] = quantize(cell[[ch, y, x]]);
                    }
                }
            }
        }
    }

    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "png" => save_png(&buf, out_w, out_h, c, path),
        "pgm" => save_pgm(&buf, out_w, out_h, c, path),
        other => Err(Error::Config(format!(
            "unsupported image extension `.{other}` for {} (use .png or .pgm)",
            path.display()
        ))),
    }
}

fn save_png(buf: &[u8], w: usize, h: usize, c: usize, path: &Path) -> Result<()> {
    let map_err = |e: image::ImageError| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Config(format!("PNG encode failed for {}: {other}", path.display())),
    };
    match c {
        1 => image::GrayImage::from_raw(w as u32, h as u32, buf.to_vec())
            .expect("buffer sized to dimensions")
            .save(path)
            .map_err(map_err),
        3 => image::RgbImage::from_raw(w as u32, h as u32, buf.to_vec())
            .expect("buffer sized to dimensions")
            .save(path)
            .map_err(map_err),
        _ => unreachable!("channel count validated above"),
    }
}

fn save_pgm(buf: &[u8], w: usize, h: usize, c: usize, path: &Path) -> Result<()> {
    if c != 1 {
        return Err(Error::Config(format!(
            "PGM is grayscale only; {c}-channel grid needs .png"
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(buf);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read back a binary (`P5`) PGM file; used by tests to round-trip exports
/// without an image library. Returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |detail: &str| Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
        offset: 0,
    };
    // Header is exactly four whitespace-terminated tokens: P5, width,
    // height, maxval. The byte after the fourth separator starts the payload.
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_ascii_whitespace())
        .nth(3)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| fail("truncated header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| fail("non-ASCII header"))?;
    let mut fields = header.split_ascii_whitespace();
    if fields.next() != Some("P5") {
        return Err(fail("not a binary PGM (missing P5)"));
    }
    let mut dim = |name: &str| -> Result<usize> {
        fields
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| fail(&format!("bad {name}")))
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(fail("maxval must be 255"));
    }
    let data = &bytes[header_end..];
    if data.len() != w * h {
        return Err(fail("payload length does not match dimensions"));
    }
    Ok((w, h, data.to_vec()))
}
