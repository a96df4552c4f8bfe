//! Binary masks: random grid occlusions, body-shape occlusions, resampling
//! to latent resolution, and the 8-bit PNG encoding.

use std::path::Path;

use image::{GrayImage, Luma};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::raster::Raster;

/// `height × width` binary grid; `true` marks a masked (or selected) pixel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

/// Half-open pixel rectangle `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        ensure!(bits.len() == height * width, "mask {height}x{width} needs {} bits, got {}", height * width, bits.len());
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.bits.len() as f64
    }

    pub fn same_size(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn invert(&self) -> Mask {
        Mask { height: self.height, width: self.width, bits: self.bits.iter().map(|b| !b).collect() }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert!(self.same_size(other));
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Mask { height: self.height, width: self.width, bits }
    }

    pub fn intersect(&self, other: &Mask) -> Mask {
        assert!(self.same_size(other));
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Mask { height: self.height, width: self.width, bits }
    }

    /// `self ⊆ other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_size(other) && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn fill_rect(&mut self, r: Rect) {
        for y in r.y0..r.y1 {
            self.bits[y * self.width + r.x0..y * self.width + r.x1].fill(true);
        }
    }

    /// Tight bounding box of the set pixels, `None` when empty.
    pub fn bbox(&self) -> Option<Rect> {
        let mut r: Option<Rect> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    let b = r.get_or_insert(Rect { y0: y, x0: x, y1: y + 1, x1: x + 1 });
                    b.y0 = b.y0.min(y);
                    b.x0 = b.x0.min(x);
                    b.y1 = b.y1.max(y + 1);
                    b.x1 = b.x1.max(x + 1);
                }
            }
        }
        r
    }

    /// Square (Chebyshev) dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let mut horiz = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                horiz[y * w + x] = (lo..=hi).any(|xx| self.bits[y * w + xx]);
            }
        }
        Mask::from_fn(h, w, |y, x| {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            (lo..=hi).any(|yy| horiz[yy * w + x])
        })
    }

    /// Single-channel 8-bit PNG, `0 ↦ 0`, `1 ↦ 255`.
    pub fn encode_png(&self) -> Vec<u8> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).expect("PNG encoding into memory cannot fail");
        out.into_inner()
    }

    /// Decodes any PNG, converting to 8-bit luma and thresholding at 128.
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::invalid(format!("not a decodable PNG mask: {e}")))?;
        Ok(Self::from_luma(&img.to_luma8()))
    }

    fn from_luma(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Self { height: h as usize, width: w as usize, bits: img.as_raw().iter().map(|&v| v >= 128).collect() }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()).map_err(|e| Error::io("writing mask", path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io("reading mask", path, e),
            source => Error::Image { path: path.to_path_buf(), source },
        })?;
        Ok(Self::from_luma(&img.to_luma8()))
    }
}

/// How training masks are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Grid with probability `random_ratio`, body shape otherwise.
    Mixed,
    Grid,
    BodyShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub mode: MaskMode,
    pub repeats_range: [usize; 2],
    /// Nominal rectangle side as a fraction of `min(h, w)`.
    pub grid_cell_fraction: f64,
    /// Probability of the grid branch in `Mixed` mode.
    pub random_ratio: f64,
    pub body_dilate_px: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { mode: MaskMode::Mixed, repeats_range: [1, 30], grid_cell_fraction: 0.15, random_ratio: 0.5, body_dilate_px: 0 }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.repeats_range;
        ensure!(lo <= hi, "repeats_range [{lo}, {hi}] is empty");
        ensure!(
            self.grid_cell_fraction > 0.0 && self.grid_cell_fraction <= 1.0,
            "grid_cell_fraction must lie in (0, 1], got {}",
            self.grid_cell_fraction
        );
        ensure!((0.0..=1.0).contains(&self.random_ratio), "random_ratio must lie in [0, 1], got {}", self.random_ratio);
        Ok(())
    }
}

/// The rectangles behind [`random_grid_mask`], drawn from the same stream.
pub fn grid_rectangles<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    rng: &mut R,
    repeats_range: [usize; 2],
    cell_fraction: f64,
) -> Result<Vec<Rect>> {
    ensure!(h > 0 && w > 0, "mask dimensions must be positive, got {h}x{w}");
    let [lo, hi] = repeats_range;
    ensure!(lo <= hi, "repeats_range [{lo}, {hi}] is empty");
    ensure!(cell_fraction > 0.0 && cell_fraction <= 1.0, "cell_fraction must lie in (0, 1], got {cell_fraction}");
    let k = rng.random_range(lo..=hi);
    let nominal = cell_fraction * h.min(w) as f64;
    let side = |rng: &mut R| ((rng.random_range(0.5..=1.5) * nominal).round() as usize).max(1);
    Ok((0..k)
        .map(|_| {
            let (rh, rw) = (side(rng), side(rng));
            let cy = rng.random_range(0..h) as isize;
            let cx = rng.random_range(0..w) as isize;
            let y0 = (cy - rh as isize / 2).max(0) as usize;
            let x0 = (cx - rw as isize / 2).max(0) as usize;
            let y1 = ((cy - rh as isize / 2) + rh as isize).clamp(1, h as isize) as usize;
            let x1 = ((cx - rw as isize / 2) + rw as isize).clamp(1, w as isize) as usize;
            Rect { y0, x0, y1: y1.max(y0 + 1), x1: x1.max(x0 + 1) }
        })
        .collect())
}

/// Union of `k ~ U[repeats_range]` random axis-aligned rectangles.
pub fn random_grid_mask<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    rng: &mut R,
    repeats_range: [usize; 2],
    cell_fraction: f64,
) -> Result<Mask> {
    let mut m = Mask::zeros(h, w);
    for r in grid_rectangles(h, w, rng, repeats_range, cell_fraction)? {
        m.fill_rect(r);
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyShapeVariant {
    FullBody,
    SubBox,
}

/// Silhouette occlusion: the whole figure or a random box of it, equally likely.
pub fn body_shape_mask<R: Rng + ?Sized>(segmentation: &Mask, rng: &mut R, dilate_px: usize) -> Result<Mask> {
    let variant = if rng.random_bool(0.5) { BodyShapeVariant::FullBody } else { BodyShapeVariant::SubBox };
    body_shape_mask_variant(segmentation, rng, dilate_px, variant)
}

/// [`body_shape_mask`] with the variant fixed.
///
/// The sub-box variant keeps the silhouette pixels inside a random box whose
/// overlap with the silhouette is at least a quarter of its area.
pub fn body_shape_mask_variant<R: Rng + ?Sized>(
    segmentation: &Mask,
    rng: &mut R,
    dilate_px: usize,
    variant: BodyShapeVariant,
) -> Result<Mask> {
    let bb = segmentation.bbox().ok_or_else(|| Error::invalid("body shape mask needs a nonempty silhouette"))?;
    let base = match variant {
        BodyShapeVariant::FullBody => segmentation.clone(),
        BodyShapeVariant::SubBox => {
            let total = segmentation.count();
            let (bh, bw) = (bb.y1 - bb.y0, bb.x1 - bb.x0);
            let mut chosen = None;
            for _ in 0..64 {
                let rh = ((bh as f64 * rng.random_range(0.4..=1.0)).round() as usize).clamp(1, bh);
                let rw = ((bw as f64 * rng.random_range(0.4..=1.0)).round() as usize).clamp(1, bw);
                let y0 = bb.y0 + rng.random_range(0..=bh - rh);
                let x0 = bb.x0 + rng.random_range(0..=bw - rw);
                let r = Rect { y0, x0, y1: y0 + rh, x1: x0 + rw };
                let mut boxed = Mask::zeros(segmentation.height, segmentation.width);
                boxed.fill_rect(r);
                let cut = segmentation.intersect(&boxed);
                if cut.count() * 4 >= total {
                    chosen = Some(cut);
                    break;
                }
            }
            chosen.unwrap_or_else(|| segmentation.clone())
        }
    };
    Ok(base.dilate(dilate_px))
}

/// Which generator produced a training mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskBranch {
    Grid,
    BodyShape,
}

/// Draws a training occlusion according to `spec`.
pub fn sample_training_mask<R: Rng + ?Sized>(segmentation: &Mask, rng: &mut R, spec: &MaskSpec) -> Result<(MaskBranch, Mask)> {
    spec.validate()?;
    let branch = match spec.mode {
        MaskMode::Grid => MaskBranch::Grid,
        MaskMode::BodyShape => MaskBranch::BodyShape,
        MaskMode::Mixed => {
            if rng.random_bool(spec.random_ratio) {
                MaskBranch::Grid
            } else {
                MaskBranch::BodyShape
            }
        }
    };
    let m = match branch {
        MaskBranch::Grid => {
            random_grid_mask(segmentation.height, segmentation.width, rng, spec.repeats_range, spec.grid_cell_fraction)?
        }
        MaskBranch::BodyShape => body_shape_mask(segmentation, rng, spec.body_dilate_px)?,
    };
    Ok((branch, m))
}

/// Number of set pixels in each `factor × factor` cell, row-major over cells.
pub fn cell_counts(m: &Mask, factor: usize) -> Result<Vec<usize>> {
    ensure!(factor > 0, "downsample factor must be positive");
    ensure!(
        m.height % factor == 0 && m.width % factor == 0,
        "mask {}x{} is not divisible by factor {factor}",
        m.height,
        m.width
    );
    let (ch, cw) = (m.height / factor, m.width / factor);
    let mut counts = vec![0usize; ch * cw];
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(y, x) {
                counts[(y / factor) * cw + x / factor] += 1;
            }
        }
    }
    Ok(counts)
}

/// Latent-resolution mask: a cell is set iff at least half its footprint is set.
pub fn downsample_mask(m: &Mask, factor: usize) -> Result<Mask> {
    let counts = cell_counts(m, factor)?;
    let need = factor * factor;
    Mask::from_bits(m.height / factor, m.width / factor, counts.into_iter().map(|c| 2 * c >= need).collect())
}

/// Replaces masked pixels by `fill`.
pub fn apply_mask(image: &Raster, m: &Mask, fill: f32) -> Result<Raster> {
    ensure!(
        image.height() == m.height && image.width() == m.width,
        "image {}x{} and mask {}x{} differ in size",
        image.height(),
        image.width(),
        m.height,
        m.width
    );
    let mut out = image.clone();
    for (i, &b) in m.bits.iter().enumerate() {
        if b {
            out.data_mut()[i * 3..i * 3 + 3].fill(fill);
        }
    }
    Ok(out)
}
