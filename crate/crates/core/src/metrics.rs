//! Masked-region quality metrics and embedding similarities.
//!
//! Pixel metrics compare a completion with the ground truth inside the
//! source mask. Embedding and perceptual metrics go through string-keyed
//! backends; the built-in ones are small seeded stand-ins for the usual
//! pretrained networks.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::{Arc, Mutex, OnceLock};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::mask::{Mask, Rect};
use crate::model::semantic::{word_vector, words};
use crate::raster::Raster;
use crate::util::sub_rng;

/// Reported for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub const TOY_CLIP: &str = "toy-clip";
pub const TOY_DINO: &str = "toy-dino";
pub const TOY_LPIPS: &str = "toy-lpips";
pub const TOY_DREAMSIM: &str = "toy-dreamsim";

/// Peak signal-to-noise ratio over the masked pixels, for values in `[0, 1]`.
pub fn masked_psnr(a: &Raster, b: &Raster, m: &Mask) -> Result<f64> {
    check_inputs(a, b, m)?;
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                for (p, q) in a.pixel(y, x).iter().zip(b.pixel(y, x)) {
                    sum += (*p as f64 - q as f64).powi(2);
                }
                n += 3;
            }
        }
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn check_inputs(a: &Raster, b: &Raster, m: &Mask) -> Result<()> {
    ensure!(a.same_size(b), "images differ in size ({}x{} vs {}x{})", a.height(), a.width(), b.height(), b.width());
    ensure!(m.height() == a.height() && m.width() == a.width(), "mask does not match the image size");
    ensure!(!m.is_empty(), "mask is empty");
    Ok(())
}

/// Normalized 1D Gaussian taps.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let taps: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Structural similarity with an 11×11 Gaussian window (σ 1.5), averaged
/// over RGB channels and over every masked pixel as a window center.
///
/// Pixels outside the mask, including those past the image border, read as
/// 0 in both images, so the value depends only on masked pixels and is
/// defined for masks of any shape.
pub fn masked_ssim(a: &Raster, b: &Raster, m: &Mask) -> Result<f64> {
    check_inputs(a, b, m)?;
    let r = m.bbox().expect("mask is nonempty");
    let half = SSIM_WINDOW / 2;
    // Crop of the bounding box grown by the window radius on every side.
    let (h, w) = (r.y1 - r.y0 + 2 * half, r.x1 - r.x0 + 2 * half);
    let at = |y: usize, x: usize| -> Option<(usize, usize)> {
        let (yy, xx) = ((r.y0 + y).checked_sub(half)?, (r.x0 + x).checked_sub(half)?);
        (yy < m.height() && xx < m.width() && m.get(yy, xx)).then_some((yy, xx))
    };
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let centers: Vec<(usize, usize)> =
        (half..h - half).flat_map(|y| (half..w - half).map(move |x| (y, x))).filter(|&(y, x)| at(y, x).is_some()).collect();

    let mut total = 0.0;
    for ch in 0..3 {
        let crop = |img: &Raster| -> Vec<f64> {
            (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| at(y, x).map_or(0.0, |(yy, xx)| img.pixel(yy, xx)[ch] as f64)).collect()
        };
        let (pa, pb) = (crop(a), crop(b));
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
        let maps = [pa.clone(), pb.clone(), prod(&pa, &pa), prod(&pb, &pb), prod(&pa, &pb)];
        let filtered: Vec<Vec<f64>> = maps.iter().map(|p| separable_valid(p, h, w, &taps)).collect();
        let vw = w - 2 * half;
        let mut sum = 0.0;
        for &(y, x) in &centers {
            let i = (y - half) * vw + (x - half);
            let (mu_a, mu_b) = (filtered[0][i], filtered[1][i]);
            let va = filtered[2][i] - mu_a * mu_a;
            let vb = filtered[3][i] - mu_b * mu_b;
            let cov = filtered[4][i] - mu_a * mu_b;
            sum += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
        }
        total += sum / centers.len() as f64;
    }
    Ok(total / 3.0)
}

/// Valid-mode separable filtering of an `h × w` map.
fn separable_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (vh, vw) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * vw];
    for y in 0..h {
        for x in 0..vw {
            rows[y * vw + x] = taps.iter().enumerate().map(|(i, t)| t * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; vh * vw];
    for y in 0..vh {
        for x in 0..vw {
            out[y * vw + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * vw + x]).sum();
        }
    }
    out
}

/// Image or text input to an embedding backend.
#[derive(Clone, Copy, Debug)]
pub enum Query<'a> {
    Image(&'a Raster),
    Text(&'a str),
}

/// Maps images (and optionally text) to vectors compared by cosine.
pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> &str;

    fn embed_image(&self, image: &Raster) -> Vec<f32>;

    /// Text embedding in the image space; backends without a text tower
    /// return a configuration error.
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;
}

/// Backend registry lookup.
pub fn embedding_backend(id: &str) -> Result<Arc<dyn EmbeddingBackend>> {
    static CLIP: OnceLock<Arc<ToyEmbedder>> = OnceLock::new();
    static DINO: OnceLock<Arc<ToyEmbedder>> = OnceLock::new();
    match id {
        TOY_CLIP => Ok(CLIP.get_or_init(|| Arc::new(ToyEmbedder::clip())).clone()),
        TOY_DINO => Ok(DINO.get_or_init(|| Arc::new(ToyEmbedder::dino())).clone()),
        other => Err(Error::Config(format!("unknown embedding backend {other:?} (known: {TOY_CLIP}, {TOY_DINO})"))),
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Cosine similarity of backend embeddings, ×100.
pub fn embedding_similarity(a: Query<'_>, b: &Raster, backend: &str) -> Result<f64> {
    let be = embedding_backend(backend)?;
    let ea = match a {
        Query::Image(img) => be.embed_image(img),
        Query::Text(t) => be.embed_text(t)?,
    };
    Ok(100.0 * cosine(&ea, &be.embed_image(b)))
}

/// Seeded patch embedder.
///
/// The image is cut into `patch × patch` blocks; each centered block goes
/// through a fixed random projection (optionally `tanh`) and the per-patch
/// outputs are concatenated, so the embedding keeps coarse layout.
struct ToyEmbedder {
    id: &'static str,
    patch: usize,
    width: usize,
    nonlinear: bool,
    text: bool,
    seed: u64,
    projections: Mutex<HashMap<usize, Arc<Vec<f32>>>>,
}

impl ToyEmbedder {
    fn clip() -> Self {
        ToyEmbedder { id: TOY_CLIP, patch: 8, width: 16, nonlinear: false, text: true, seed: 0xc11b, projections: Mutex::default() }
    }

    fn dino() -> Self {
        ToyEmbedder { id: TOY_DINO, patch: 4, width: 8, nonlinear: true, text: false, seed: 0xd170, projections: Mutex::default() }
    }

    fn projection(&self, patch_dim: usize) -> Arc<Vec<f32>> {
        let mut cache = self.projections.lock().unwrap();
        Arc::clone(cache.entry(patch_dim).or_insert_with(|| {
            let mut rng = sub_rng(self.seed ^ patch_dim as u64, "embedding");
            let normal = Normal::new(0.0f32, (1.0 / patch_dim as f32).sqrt()).unwrap();
            Arc::new((0..patch_dim * self.width).map(|_| normal.sample(&mut rng)).collect())
        }))
    }
}

impl EmbeddingBackend for ToyEmbedder {
    fn id(&self) -> &str {
        self.id
    }

    fn embed_image(&self, image: &Raster) -> Vec<f32> {
        let p = self.patch.min(image.height()).min(image.width()).max(1);
        let (gh, gw) = (image.height() / p, image.width() / p);
        let patch_dim = p * p * 3;
        let proj = self.projection(patch_dim);
        let mut out = Vec::with_capacity(gh * gw * self.width);
        let mut block = Vec::with_capacity(patch_dim);
        for gy in 0..gh {
            for gx in 0..gw {
                block.clear();
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        block.extend(image.pixel(y, x).iter().map(|c| 2.0 * c - 1.0));
                    }
                }
                for j in 0..self.width {
                    let v: f32 = block.iter().enumerate().map(|(i, b)| b * proj[i * self.width + j]).sum();
                    out.push(if self.nonlinear { v.tanh() } else { v });
                }
            }
        }
        out
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        if !self.text {
            return Err(Error::Config(format!("embedding backend {} has no text encoder", self.id)));
        }
        // Bag of words spread over the same layout as an image of the default size.
        let dim = (64 / self.patch).pow(2) * self.width;
        let mut out = vec![0.0f32; dim];
        for w in words(text) {
            for (o, v) in out.iter_mut().zip(word_vector(&w, dim, self.seed)) {
                *o += v;
            }
        }
        Ok(out)
    }
}

/// Seeded filter bank evaluated at several scales.
struct FilterBank {
    id: &'static str,
    size: usize,
    count: usize,
    scales: usize,
    nonlinear: bool,
    filters: Vec<f32>,
}

impl FilterBank {
    fn new(id: &'static str, size: usize, count: usize, scales: usize, nonlinear: bool, seed: u64) -> Self {
        let fan_in = size * size * 3;
        let mut rng = sub_rng(seed, "filters");
        let normal = Normal::new(0.0f32, (1.0 / fan_in as f32).sqrt()).unwrap();
        let filters = (0..fan_in * count).map(|_| normal.sample(&mut rng)).collect();
        FilterBank { id, size, count, scales, nonlinear, filters }
    }

    /// Zero-padded responses at one scale, `[h, w, count]`.
    fn responses(&self, img: &[f32], h: usize, w: usize) -> Vec<f32> {
        let half = self.size / 2;
        let mut out = vec![0.0f32; h * w * self.count];
        for y in 0..h {
            for x in 0..w {
                let o = &mut out[(y * w + x) * self.count..(y * w + x + 1) * self.count];
                let mut k = 0;
                for dy in 0..self.size {
                    for dx in 0..self.size {
                        let (yy, xx) = ((y + dy) as isize - half as isize, (x + dx) as isize - half as isize);
                        let inside = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
                        for c in 0..3 {
                            let v = if inside { img[(yy as usize * w + xx as usize) * 3 + c] } else { 0.0 };
                            if v != 0.0 {
                                for (j, oj) in o.iter_mut().enumerate() {
                                    *oj += v * self.filters[k * self.count + j];
                                }
                            }
                            k += 1;
                        }
                    }
                }
                if self.nonlinear {
                    o.iter_mut().for_each(|e| *e = e.tanh());
                }
            }
        }
        out
    }

    fn distance(&self, a: &Raster, b: &Raster, r: Rect) -> f64 {
        let crop = |img: &Raster| -> Vec<f32> {
            (r.y0..r.y1).flat_map(|y| (r.x0..r.x1).map(move |x| (y, x))).flat_map(|(y, x)| img.pixel(y, x).map(|c| 2.0 * c - 1.0)).collect()
        };
        let (mut pa, mut pb) = (crop(a), crop(b));
        let (mut h, mut w) = (r.y1 - r.y0, r.x1 - r.x0);
        let mut total = 0.0;
        let mut used = 0;
        for _ in 0..self.scales {
            let (ra, rb) = (self.responses(&pa, h, w), self.responses(&pb, h, w));
            total += ra.iter().zip(&rb).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / ra.len() as f64;
            used += 1;
            if h < 2 || w < 2 {
                break;
            }
            pa = pool2(&pa, h, w);
            pb = pool2(&pb, h, w);
            h /= 2;
            w /= 2;
        }
        total / used as f64
    }
}

/// 2×2 average pooling of an interleaved RGB map (odd edges dropped).
fn pool2(p: &[f32], h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * 3];
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..3 {
                let at = |yy: usize, xx: usize| p[(yy * w + xx) * 3 + c];
                out[(y * ow + x) * 3 + c] = 0.25 * (at(2 * y, 2 * x) + at(2 * y + 1, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x + 1));
            }
        }
    }
    out
}

fn filter_bank(id: &str) -> Result<&'static FilterBank> {
    static LPIPS: OnceLock<FilterBank> = OnceLock::new();
    static DREAMSIM: OnceLock<FilterBank> = OnceLock::new();
    match id {
        TOY_LPIPS => Ok(LPIPS.get_or_init(|| FilterBank::new(TOY_LPIPS, 3, 32, 3, false, 0x1a1f))),
        TOY_DREAMSIM => Ok(DREAMSIM.get_or_init(|| FilterBank::new(TOY_DREAMSIM, 5, 24, 2, true, 0xd5e3))),
        other => Err(Error::Config(format!("unknown perceptual backend {other:?} (known: {TOY_LPIPS}, {TOY_DREAMSIM})"))),
    }
}

/// Multi-scale mean absolute difference of filter responses on the mask's
/// bounding-box crop; zero exactly when the crops are equal.
pub fn perceptual_distance(a: &Raster, b: &Raster, m: &Mask, backend: &str) -> Result<f64> {
    let bank = filter_bank(backend)?;
    check_inputs(a, b, m)?;
    debug_assert_eq!(bank.id, backend);
    Ok(bank.distance(a, b, m.bbox().expect("mask is nonempty")))
}

/// One column of the report, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ClipI,
    ClipT,
    Dino,
    DreamSim,
    Lpips,
    Psnr,
    Ssim,
}

impl Metric {
    pub const ALL: [Metric; 7] = [Metric::ClipI, Metric::ClipT, Metric::Dino, Metric::DreamSim, Metric::Lpips, Metric::Psnr, Metric::Ssim];

    /// Machine-readable column name.
    pub fn key(self) -> &'static str {
        match self {
            Metric::ClipI => "clip_i",
            Metric::ClipT => "clip_t",
            Metric::Dino => "dino",
            Metric::DreamSim => "dreamsim",
            Metric::Lpips => "lpips",
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
        }
    }

    /// Column title in text tables.
    pub fn title(self) -> &'static str {
        match self {
            Metric::ClipI => "CLIP-I",
            Metric::ClipT => "CLIP-T",
            Metric::Dino => "DINO",
            Metric::DreamSim => "DreamSim",
            Metric::Lpips => "LPIPS",
            Metric::Psnr => "PSNR",
            Metric::Ssim => "SSIM",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::DreamSim | Metric::Lpips)
    }
}

/// Which backend computes each embedding or perceptual metric.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub clip: String,
    pub dino: String,
    pub lpips: String,
    pub dreamsim: String,
    /// Embed the mask's bounding-box crop instead of the full image for
    /// CLIP-I and DINO.
    pub embed_crop: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { clip: TOY_CLIP.into(), dino: TOY_DINO.into(), lpips: TOY_LPIPS.into(), dreamsim: TOY_DREAMSIM.into(), embed_crop: false }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        embedding_backend(&self.clip)?;
        embedding_backend(&self.dino)?;
        filter_bank(&self.lpips)?;
        filter_bank(&self.dreamsim)?;
        Ok(())
    }
}

/// Metric values for one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub group_id: String,
    pub values: BTreeMap<Metric, f64>,
}

fn crop_raster(img: &Raster, r: Rect) -> Raster {
    Raster::from_fn(r.y1 - r.y0, r.x1 - r.x0, |y, x| img.pixel(r.y0 + y, r.x0 + x))
}

/// Every metric for one completion; CLIP-T only when a prompt is given.
pub fn evaluate_group(group_id: &str, completed: &Raster, truth: &Raster, mask: &Mask, prompt: Option<&str>, cfg: &MetricConfig) -> Result<MetricRow> {
    check_inputs(completed, truth, mask)?;
    let (ea, eb) = if cfg.embed_crop {
        let r = mask.bbox().expect("mask is nonempty");
        (crop_raster(completed, r), crop_raster(truth, r))
    } else {
        (completed.clone(), truth.clone())
    };
    let mut values = BTreeMap::new();
    values.insert(Metric::ClipI, embedding_similarity(Query::Image(&ea), &eb, &cfg.clip)?);
    if let Some(p) = prompt {
        values.insert(Metric::ClipT, embedding_similarity(Query::Text(p), completed, &cfg.clip)?);
    }
    values.insert(Metric::Dino, embedding_similarity(Query::Image(&ea), &eb, &cfg.dino)?);
    values.insert(Metric::DreamSim, perceptual_distance(completed, truth, mask, &cfg.dreamsim)?);
    values.insert(Metric::Lpips, perceptual_distance(completed, truth, mask, &cfg.lpips)?);
    values.insert(Metric::Psnr, masked_psnr(completed, truth, mask)?);
    values.insert(Metric::Ssim, masked_ssim(completed, truth, mask)?);
    Ok(MetricRow { group_id: group_id.to_string(), values })
}

/// Per-group rows with corpus means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub columns: Vec<Metric>,
    /// Sorted by group id.
    pub rows: Vec<MetricRow>,
    pub means: BTreeMap<Metric, f64>,
    pub backends: MetricConfig,
    pub group_count: usize,
}

/// Averages rows that all carry the same metrics.
pub fn aggregate_report(mut rows: Vec<MetricRow>, backends: &MetricConfig) -> Result<MetricReport> {
    ensure!(!rows.is_empty(), "no rows to aggregate");
    let columns: Vec<Metric> = rows[0].values.keys().copied().collect();
    ensure!(!columns.is_empty(), "rows carry no metrics");
    for r in &rows {
        let cols: Vec<Metric> = r.values.keys().copied().collect();
        ensure!(cols == columns, "group {} has columns {:?}, expected {:?}", r.group_id, cols, columns);
    }
    rows.sort_by(|a, b| a.group_id.cmp(&b.group_id));
    let means = columns.iter().map(|&c| (c, rows.iter().map(|r| r.values[&c]).sum::<f64>() / rows.len() as f64)).collect();
    Ok(MetricReport { columns, group_count: rows.len(), rows, means, backends: backends.clone() })
}

impl MetricReport {
    /// One row per group and a final `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group_id");
        for c in &self.columns {
            out.push(',');
            out.push_str(c.key());
        }
        out.push('\n');
        let mut line = |id: &str, values: &BTreeMap<Metric, f64>| {
            out.push_str(id);
            for c in &self.columns {
                let _ = write!(out, ",{}", values[c]);
            }
            out.push('\n');
        };
        for r in &self.rows {
            line(&r.group_id, &r.values);
        }
        line("MEAN", &self.means);
        out
    }

    /// Aligned text table of the means, with arrows for the better direction.
    pub fn to_table(&self) -> String {
        let heads: Vec<String> = self.columns.iter().map(|c| format!("{} {}", c.title(), if c.higher_is_better() { "↑" } else { "↓" })).collect();
        let cells: Vec<String> = self.columns.iter().map(|c| format_value(*c, self.means[c])).collect();
        let widths: Vec<usize> = heads.iter().zip(&cells).map(|(h, c)| h.chars().count().max(c.len())).collect();
        let label = format!("mean of {} groups", self.group_count);
        let lw = label.len().max("metric".len());
        let mut out = format!("{:<lw$}", "metric");
        for (h, w) in heads.iter().zip(&widths) {
            let pad = w - h.chars().count();
            let _ = write!(out, "  {}{h}", " ".repeat(pad));
        }
        let _ = write!(out, "\n{label:<lw$}");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        out
    }
}

/// Fixed decimals per metric, as in the usual tables.
pub fn format_value(m: Metric, v: f64) -> String {
    match m {
        Metric::DreamSim | Metric::Lpips | Metric::Ssim => format!("{v:.4}"),
        _ => format!("{v:.2}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(h: usize, w: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_fn(h, w, |_, _| [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)])
    }

    fn block(h: usize, w: usize, r: Rect) -> Mask {
        let mut m = Mask::zeros(h, w);
        m.fill_rect(r);
        m
    }

    fn changed_outside(a: &Raster, m: &Mask) -> Raster {
        let mut b = a.clone();
        for y in 0..m.height() {
            for x in 0..m.width() {
                if !m.get(y, x) {
                    b.set_pixel(y, x, [0.0, 1.0, 0.5]);
                }
            }
        }
        b
    }

    #[test]
    fn psnr_cases() {
        let a = noise_image(16, 16, 1);
        let m = block(16, 16, Rect { y0: 2, x0: 3, y1: 10, x1: 12 });
        assert_eq!(masked_psnr(&a, &a, &m).unwrap(), PSNR_CAP);
        let mut b = a.clone();
        for y in 0..16 {
            for x in 0..16 {
                if m.get(y, x) {
                    b.set_pixel(y, x, a.pixel(y, x).map(|v| v + 0.1));
                }
            }
        }
        assert!((masked_psnr(&a, &b, &m).unwrap() - 20.0).abs() < 0.01);
        assert_eq!(masked_psnr(&a, &changed_outside(&a, &m), &m).unwrap(), PSNR_CAP);
        assert!(masked_psnr(&a, &a, &Mask::zeros(16, 16)).is_err());
        assert!(masked_psnr(&a, &noise_image(8, 16, 2), &m).is_err());
    }

    /// Direct 2D windowed sums, no separable filtering.
    fn ssim_oracle(a: &Raster, b: &Raster, m: &Mask) -> f64 {
        let half = 5i64;
        let g = |d: f64| (-(d * d) / (2.0 * 1.5 * 1.5)).exp();
        let norm: f64 = (0..11).flat_map(|i| (0..11).map(move |j| g(i as f64 - 5.0) * g(j as f64 - 5.0))).sum();
        let mut total = 0.0;
        for c in 0..3 {
            let (mut s, mut n) = (0.0, 0);
            for y in 0..m.height() as i64 {
                for x in 0..m.width() as i64 {
                    if !m.get(y as usize, x as usize) {
                        continue;
                    }
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..11i64 {
                        for dx in 0..11i64 {
                            let wgt = g(dy as f64 - 5.0) * g(dx as f64 - 5.0) / norm;
                            let (yy, xx) = (y + dy - half, x + dx - half);
                            let inside = (0..m.height() as i64).contains(&yy) && (0..m.width() as i64).contains(&xx) && m.get(yy as usize, xx as usize);
                            let p = if inside { a.pixel(yy as usize, xx as usize)[c] as f64 } else { 0.0 };
                            let q = if inside { b.pixel(yy as usize, xx as usize)[c] as f64 } else { 0.0 };
                            ma += wgt * p;
                            mb += wgt * q;
                            saa += wgt * p * p;
                            sbb += wgt * q * q;
                            sab += wgt * p * q;
                        }
                    }
                    let (c1, c2) = (0.0001, 0.0009);
                    s += ((2.0 * ma * mb + c1) * (2.0 * (sab - ma * mb) + c2))
                        / ((ma * ma + mb * mb + c1) * ((saa - ma * ma) + (sbb - mb * mb) + c2));
                    n += 1;
                }
            }
            total += s / n as f64;
        }
        total / 3.0
    }

    #[test]
    fn ssim_cases() {
        let a = noise_image(32, 32, 3);
        let m = Mask::from_fn(32, 32, |y, x| (y as f64 - 15.0).powi(2) + (x as f64 - 16.0).powi(2) < 120.0);
        assert!((masked_ssim(&a, &a, &m).unwrap() - 1.0).abs() < 1e-12);
        assert!((masked_ssim(&a, &changed_outside(&a, &m), &m).unwrap() - 1.0).abs() < 1e-12);
        let inv = Raster::from_fn(32, 32, |y, x| a.pixel(y, x).map(|v| 1.0 - v));
        let v = masked_ssim(&a, &inv, &m).unwrap();
        assert!(v < 1.0);
        assert!((v - ssim_oracle(&a, &inv, &m)).abs() < 1e-6);
        // thin and touching the border: every masked pixel still centers a window
        let thin = block(32, 32, Rect { y0: 0, x0: 3, y1: 20, x1: 6 });
        assert!((masked_ssim(&a, &a, &thin).unwrap() - 1.0).abs() < 1e-12);
        assert!((masked_ssim(&a, &inv, &thin).unwrap() - ssim_oracle(&a, &inv, &thin)).abs() < 1e-6);
    }

    #[test]
    fn embedding_cases() {
        let a = noise_image(64, 64, 4);
        for id in [TOY_CLIP, TOY_DINO] {
            assert!((embedding_similarity(Query::Image(&a), &a, id).unwrap() - 100.0).abs() < 1e-9);
        }
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert!(matches!(embedding_similarity(Query::Image(&a), &a, "clip-vit-l"), Err(Error::Config(_))));
        assert!(matches!(embedding_similarity(Query::Text("a red hat"), &a, TOY_DINO), Err(Error::Config(_))));
        let t = embedding_similarity(Query::Text("a red hat"), &a, TOY_CLIP).unwrap();
        assert!((-100.0..=100.0).contains(&t));
    }

    #[test]
    fn perceptual_cases() {
        let a = noise_image(32, 32, 5);
        let m = block(32, 32, Rect { y0: 4, x0: 4, y1: 24, x1: 28 });
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noise: Vec<[f32; 3]> = (0..32 * 32).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let noisy = |eps: f32| Raster::from_fn(32, 32, |y, x| {
            let (p, n) = (a.pixel(y, x), noise[y * 32 + x]);
            [p[0] + eps * n[0], p[1] + eps * n[1], p[2] + eps * n[2]]
        });
        for id in [TOY_LPIPS, TOY_DREAMSIM] {
            assert_eq!(perceptual_distance(&a, &a, &m, id).unwrap(), 0.0);
            assert_eq!(perceptual_distance(&a, &changed_outside(&a, &m), &m, id).unwrap(), 0.0);
            let b = noisy(0.1);
            let (ab, ba) = (perceptual_distance(&a, &b, &m, id).unwrap(), perceptual_distance(&b, &a, &m, id).unwrap());
            assert!((ab - ba).abs() < 1e-9);
            let d: Vec<f64> = [0.05, 0.1, 0.2].iter().map(|&e| perceptual_distance(&a, &noisy(e), &m, id).unwrap()).collect();
            assert!(d[0] > 0.0 && d[0] < d[1] && d[1] < d[2], "{id}: {d:?}");
        }
        assert!(matches!(perceptual_distance(&a, &a, &m, "lpips-alex"), Err(Error::Config(_))));
    }

    fn row(id: &str, v: &[(Metric, f64)]) -> MetricRow {
        MetricRow { group_id: id.into(), values: v.iter().copied().collect() }
    }

    #[test]
    fn aggregate_cases() {
        let cfg = MetricConfig::default();
        let one = aggregate_report(vec![row("a", &[(Metric::Psnr, 20.0), (Metric::Ssim, 0.5)])], &cfg).unwrap();
        assert_eq!(one.means[&Metric::Psnr], 20.0);
        assert_eq!(one.means[&Metric::Ssim], 0.5);
        let two = aggregate_report(vec![row("b", &[(Metric::Psnr, 40.0)]), row("a", &[(Metric::Psnr, 20.0)])], &cfg).unwrap();
        assert_eq!(two.means[&Metric::Psnr], 30.0);
        assert_eq!(two.rows[0].group_id, "a");
        assert!(aggregate_report(vec![row("a", &[(Metric::Psnr, 1.0)]), row("b", &[(Metric::Ssim, 1.0)])], &cfg).is_err());
        assert!(aggregate_report(Vec::new(), &cfg).is_err());
        let many: Vec<MetricRow> = (0..417).map(|i| row(&format!("g{i:03}"), &[(Metric::Psnr, i as f64)])).collect();
        let rep = aggregate_report(many, &cfg).unwrap();
        assert_eq!(rep.group_count, 417);
        assert!((rep.means[&Metric::Psnr] - 208.0).abs() < 1e-9);
    }

    #[test]
    fn csv_and_table_layout() {
        let all: Vec<(Metric, f64)> = Metric::ALL.iter().map(|&m| (m, 1.0)).collect();
        let rep = aggregate_report(vec![row("g1", &all), row("g0", &all)], &MetricConfig::default()).unwrap();
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "group_id,clip_i,clip_t,dino,dreamsim,lpips,psnr,ssim");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("MEAN,"));
        let table = rep.to_table();
        let heads = table.lines().next().unwrap();
        let pos: Vec<usize> = Metric::ALL.iter().map(|m| heads.find(m.title()).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(table.lines().map(|l| l.chars().count()).collect::<std::collections::HashSet<_>>().len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn metrics_ignore_pixels_outside_the_mask(seed in any::<u64>(), y0 in 0usize..8, x0 in 0usize..8) {
            let a = noise_image(24, 24, seed);
            let b = noise_image(24, 24, seed ^ 0xff);
            let m = block(24, 24, Rect { y0, x0, y1: y0 + 14, x1: x0 + 13 });
            let b2 = {
                let mut t = changed_outside(&b, &m);
                for y in 0..24 { for x in 0..24 { if m.get(y, x) { t.set_pixel(y, x, b.pixel(y, x)); } } }
                t
            };
            prop_assert_eq!(masked_psnr(&a, &b, &m).unwrap(), masked_psnr(&a, &b2, &m).unwrap());
            prop_assert_eq!(masked_ssim(&a, &b, &m).unwrap(), masked_ssim(&a, &b2, &m).unwrap());
            prop_assert_eq!(perceptual_distance(&a, &b, &m, TOY_LPIPS).unwrap(), perceptual_distance(&a, &b2, &m, TOY_LPIPS).unwrap());
        }

        #[test]
        fn pixel_metrics_are_symmetric(seed in any::<u64>()) {
            let a = noise_image(20, 20, seed);
            let b = noise_image(20, 20, seed.wrapping_add(1));
            let m = Mask::ones(20, 20);
            prop_assert_eq!(masked_psnr(&a, &b, &m).unwrap(), masked_psnr(&b, &a, &m).unwrap());
            prop_assert!((masked_ssim(&a, &b, &m).unwrap() - masked_ssim(&b, &a, &m).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn report_means_ignore_row_order(values in prop::collection::vec(0.0f64..100.0, 1..20), rot in 0usize..20) {
            let rows: Vec<MetricRow> = values.iter().enumerate().map(|(i, &v)| row(&format!("g{i:02}"), &[(Metric::Psnr, v)])).collect();
            let mut shuffled = rows.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            let cfg = MetricConfig::default();
            let (a, b) = (aggregate_report(rows, &cfg).unwrap(), aggregate_report(shuffled, &cfg).unwrap());
            prop_assert_eq!(&a.means, &b.means);
            let direct = values.iter().sum::<f64>() / values.len() as f64;
            prop_assert!((a.means[&Metric::Psnr] - direct).abs() < 1e-9);
        }
    }
}
