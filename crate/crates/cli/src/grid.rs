//! Side-by-side slice grids as 8-bit grayscale PNG, each panel captioned with
//! its label and, where scored, PSNR / SSIM against its reference.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use font8x8::UnicodeFonts;
use h3d_marnet::metrics::{slice_quality, Quality, SsimParams};
use ndarray::{Array2, Axis};

use crate::{CliError, CliResult};

const GLYPH: usize = 8;
const CAPTION_ROWS: usize = 2;
const GAP: usize = 2;
const MIN_PANEL: usize = 128;

pub struct Panel {
    pub label: &'static str,
    /// Normalised display image in [-1, 1].
    pub image: Array2<f64>,
    pub score: Option<Quality>,
}

impl Panel {
    pub fn plain(label: &'static str, image: Array2<f64>) -> Self {
        Self { label, image, score: None }
    }

    /// Scores `image` against `reference` over `body`.
    pub fn scored(label: &'static str, image: Array2<f64>, reference: &Array2<f64>, body: &Array2<bool>) -> CliResult<Self> {
        let score = score(&image, reference, body)?;
        Ok(Self { label, image, score })
    }

    /// Shows `shown` but scores `scored` (the same slice in the reference's units).
    pub fn scored_shown(label: &'static str, shown: Array2<f64>, scored: &Array2<f64>, reference: &Array2<f64>, body: &Array2<bool>) -> CliResult<Self> {
        Ok(Self { label, image: shown, score: score(scored, reference, body)? })
    }
}

fn score(image: &Array2<f64>, reference: &Array2<f64>, body: &Array2<bool>) -> CliResult<Option<Quality>> {
    if !body.iter().any(|&b| b) {
        return Ok(None);
    }
    let q = slice_quality(
        image.view().insert_axis(Axis(0)),
        reference.view().insert_axis(Axis(0)),
        Some(body.view().insert_axis(Axis(0))),
        &[0],
        2.0,
        &SsimParams::default(),
    )?;
    Ok(Some(q))
}

fn caption(q: Option<Quality>) -> String {
    match q {
        Some(q) if q.psnr.is_infinite() => format!("inf {:.3}", q.ssim),
        Some(q) => format!("{:.2}dB {:.3}", q.psnr, q.ssim),
        None => String::new(),
    }
}

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![0; width * height] }
    }

    fn text(&mut self, x0: usize, y0: usize, max_chars: usize, s: &str) {
        for (i, ch) in s.chars().take(max_chars).enumerate() {
            let Some(rows) = font8x8::BASIC_FONTS.get(ch) else { continue };
            for (dy, row) in rows.iter().enumerate() {
                for dx in 0..GLYPH {
                    if row & (1 << dx) != 0 {
                        let (x, y) = (x0 + i * GLYPH + dx, y0 + dy);
                        if x < self.width && y < self.height {
                            self.pixels[y * self.width + x] = 255;
                        }
                    }
                }
            }
        }
    }
}

/// Lays panels left to right; `None` leaves a blank captioned "n/a".
pub fn render(panels: &[Option<Panel>]) -> (usize, usize, Vec<u8>) {
    let (h, w) = panels.iter().flatten().next().map_or((1, 1), |p| p.image.dim());
    let scale = (MIN_PANEL / w.max(1)).max(1);
    let (ph, pw) = (h * scale, w * scale);
    let n = panels.len();
    let width = n * pw + (n.saturating_sub(1)) * GAP;
    let height = ph + CAPTION_ROWS * (GLYPH + 2) + 2;
    let mut c = Canvas::new(width, height);
    for (i, p) in panels.iter().enumerate() {
        let x0 = i * (pw + GAP);
        let chars = pw / GLYPH;
        let Some(p) = p else {
            c.text(x0, ph + 2, chars, "n/a");
            continue;
        };
        for y in 0..ph {
            for x in 0..pw {
                let v = p.image[[y / scale, x / scale]];
                c.pixels[y * width + x0 + x] = (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        c.text(x0, ph + 2, chars, p.label);
        c.text(x0, ph + 2 + GLYPH + 2, chars, &caption(p.score));
    }
    (width, height, c.pixels)
}

pub fn write_grid(path: &Path, panels: &[Option<Panel>]) -> CliResult<()> {
    let (width, height, pixels) = render(panels);
    let png_err = |source| CliError::Png { path: path.to_path_buf(), source };
    let file = File::create(path).map_err(|e| CliError::Core(h3d_marnet::Error::Io { path: path.to_path_buf(), source: e }))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_intensity_mapping() {
        let img = Array2::from_shape_fn((4, 4), |(y, _)| if y < 2 { -1.0 } else { 1.0 });
        let (w, h, px) = render(&[Some(Panel::plain("A", img.clone())), None, Some(Panel::plain("B", img))]);
        let pw = 4 * (MIN_PANEL / 4);
        assert_eq!(w, 3 * pw + 2 * GAP);
        assert_eq!(h, pw + CAPTION_ROWS * (GLYPH + 2) + 2);
        assert_eq!(px[0], 0);
        assert_eq!(px[(pw - 1) * w], 255);
        // blank middle panel
        assert!(px[..pw * w].chunks(w).all(|row| row[pw + GAP..2 * pw + GAP].iter().all(|&p| p == 0)));
    }

    #[test]
    fn perfect_prediction_is_captioned_inf() {
        let img = Array2::from_shape_fn((16, 16), |(y, x)| (y as f64 - x as f64) / 16.0);
        let body = Array2::from_elem((16, 16), true);
        let p = Panel::scored("S", img.clone(), &img, &body).unwrap();
        assert_eq!(caption(p.score), "inf 1.000");
        let empty = Array2::from_elem((16, 16), false);
        assert!(Panel::scored("S", img.clone(), &img, &empty).unwrap().score.is_none());
    }
}
