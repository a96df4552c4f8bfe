//! Global semantic tokens for references and prompts.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::tensor::Tensor;
use crate::util::{fnv1a64, sub_rng};

/// Id of the built-in backend.
pub const TOY_LINEAR: &str = "toy-linear";

const TOY_SEED: u64 = 0x5e4a_471c;
const MAX_PROMPT_TOKENS: usize = 32;

/// Produces fixed-width tokens from images and text.
pub trait SemanticBackend: Send + Sync {
    fn id(&self) -> &str;

    fn dim(&self) -> usize;

    /// Tokens emitted per image.
    fn tokens_per_image(&self) -> usize;

    /// `[tokens_per_image, dim]`.
    fn embed_image(&self, image: &Raster) -> Tensor<f32>;

    /// `[n, dim]` with `n ≥ 0`; empty for blank text.
    fn embed_text(&self, text: &str) -> Tensor<f32>;
}

/// Looks up a backend by id.
pub fn semantic_backend(id: &str, dim: usize, tokens_per_image: usize) -> Result<Arc<dyn SemanticBackend>> {
    match id {
        TOY_LINEAR => Ok(Arc::new(ToyLinear::new(dim, tokens_per_image))),
        other => Err(Error::Config(format!("unknown semantic backend {other:?} (known: {TOY_LINEAR})"))),
    }
}

/// Lowercased alphanumeric words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase)
}

/// Unit-variance pseudo-random vector determined by `(word, salt)`.
pub fn word_vector(word: &str, dim: usize, salt: u64) -> Vec<f32> {
    let mut rng = sub_rng(salt ^ fnv1a64(word.as_bytes()), "word");
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    (0..dim).map(|_| normal.sample(&mut rng)).collect()
}

/// Seeded linear patch embedding pooled over horizontal bands, plus a
/// seeded bag-of-words text embedder.
pub struct ToyLinear {
    dim: usize,
    tokens: usize,
    projections: Mutex<HashMap<usize, Arc<Vec<f32>>>>,
}

impl ToyLinear {
    pub fn new(dim: usize, tokens_per_image: usize) -> Self {
        ToyLinear { dim, tokens: tokens_per_image.max(1), projections: Mutex::new(HashMap::new()) }
    }

    fn projection(&self, patch_dim: usize) -> Arc<Vec<f32>> {
        let mut cache = self.projections.lock().unwrap();
        let dim = self.dim;
        Arc::clone(cache.entry(patch_dim).or_insert_with(|| {
            let mut rng = sub_rng(TOY_SEED ^ patch_dim as u64, "semantic-patch");
            let normal = Normal::new(0.0f32, (1.0 / patch_dim as f32).sqrt()).unwrap();
            Arc::new((0..patch_dim * dim).map(|_| normal.sample(&mut rng)).collect())
        }))
    }
}

impl SemanticBackend for ToyLinear {
    fn id(&self) -> &str {
        TOY_LINEAR
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn tokens_per_image(&self) -> usize {
        self.tokens
    }

    fn embed_image(&self, image: &Raster) -> Tensor<f32> {
        // An 8×8 grid of patches; patch row r feeds band r * tokens / 8.
        let grid = 8.min(image.height()).min(image.width());
        let (ph, pw) = (image.height() / grid, image.width() / grid);
        let patch_dim = ph * pw * 3;
        let proj = self.projection(patch_dim);
        let mut sums = vec![vec![0.0f32; patch_dim]; self.tokens];
        let mut counts = vec![0usize; self.tokens];
        for gy in 0..grid {
            let band = gy * self.tokens / grid;
            for gx in 0..grid {
                let acc = &mut sums[band];
                let mut k = 0;
                for y in gy * ph..(gy + 1) * ph {
                    for x in gx * pw..(gx + 1) * pw {
                        for c in image.pixel(y, x) {
                            acc[k] += 2.0 * c - 1.0;
                            k += 1;
                        }
                    }
                }
                counts[band] += 1;
            }
        }
        let mut out = vec![0.0f32; self.tokens * self.dim];
        for (t, (sum, &n)) in sums.iter().zip(&counts).enumerate() {
            if n == 0 {
                continue;
            }
            let row = &mut out[t * self.dim..(t + 1) * self.dim];
            for (i, &s) in sum.iter().enumerate() {
                let s = s / n as f32;
                for (o, &w) in row.iter_mut().zip(&proj[i * self.dim..(i + 1) * self.dim]) {
                    *o += s * w;
                }
            }
        }
        Tensor::new([self.tokens, self.dim], out)
    }

    fn embed_text(&self, text: &str) -> Tensor<f32> {
        let scale = 1.0 / (self.dim as f32).sqrt();
        let rows: Vec<f32> = words(text)
            .take(MAX_PROMPT_TOKENS)
            .flat_map(|w| word_vector(&w, self.dim, TOY_SEED).into_iter().map(move |v| v * scale))
            .collect();
        Tensor::new([rows.len() / self.dim, self.dim], rows)
    }
}

/// Where a semantic token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenOrigin {
    ReferenceImage,
    TextPrompt,
    NullToken,
}

/// Semantic tokens in the backend's space with their origins.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticTokens {
    pub tokens: Tensor<f32>,
    pub origin: Vec<TokenOrigin>,
}
