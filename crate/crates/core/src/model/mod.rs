//! The dual-branch denoiser.

pub mod attention;
mod cache;
pub mod checkpoint;
mod latent;
mod params;
pub mod semantic;
pub(crate) mod unet;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cache::{CacheEntry, FeatureCache};
pub use latent::{decode_latent, encode_image_to_latent, LatentGrid};
pub use params::Weights;
pub use semantic::{SemanticBackend, SemanticTokens, TokenOrigin};

use crate::error::{ensure, Error, Result};
use crate::mask::{apply_mask, downsample_mask, Mask};
use crate::raster::Raster;
use crate::synth::ReferencePart;
use crate::tensor::{Graph, Tensor};
pub(crate) use params::Bind;
use unet::{ItemConditioning, KeptPerLayer};

/// How references reach the Complete branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceEncoderMode {
    /// Reference-branch tokens in every region-focused attention layer, plus semantic tokens.
    Backbone,
    /// Semantic tokens only; region-focused attention degenerates to self-attention.
    SemanticOnly,
}

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub latent_factor: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_levels: Vec<usize>,
    pub token_dim: usize,
    pub heads: usize,
    pub semantic_token_count: usize,
    pub semantic_dim: usize,
    pub semantic_backend: String,
    pub use_reference_mask: bool,
    pub use_prompt: bool,
    pub reference_encoder_mode: ReferenceEncoderMode,
    pub train_reference_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            latent_factor: 4,
            base_channels: 32,
            channel_multipliers: vec![1, 2],
            attention_levels: vec![0, 1],
            token_dim: 64,
            heads: 4,
            semantic_token_count: 4,
            semantic_dim: 64,
            semantic_backend: semantic::TOY_LINEAR.to_string(),
            use_reference_mask: true,
            use_prompt: true,
            reference_encoder_mode: ReferenceEncoderMode::Backbone,
            train_reference_encoder: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_multipliers.len();
        ensure!(self.latent_factor > 0 && self.image_size > 0, "image_size and latent_factor must be positive");
        ensure!(self.image_size % self.latent_factor == 0, "image_size {} not divisible by latent_factor {}", self.image_size, self.latent_factor);
        ensure!(levels > 0, "channel_multipliers must not be empty");
        ensure!(self.channel_multipliers.iter().all(|&m| m > 0) && self.base_channels > 0, "channel counts must be positive");
        let side = self.image_size / self.latent_factor;
        ensure!(side % (1 << (levels - 1)) == 0, "latent side {side} cannot be halved {} times", levels - 1);
        ensure!(!self.attention_levels.is_empty(), "at least one attention level is required");
        let unique: BTreeSet<usize> = self.attention_levels.iter().copied().collect();
        ensure!(unique.len() == self.attention_levels.len(), "attention_levels has duplicates");
        ensure!(unique.iter().all(|&l| l < levels), "attention level outside 0..{levels}");
        ensure!(self.heads > 0 && self.token_dim % self.heads == 0, "token_dim {} not divisible by {} heads", self.token_dim, self.heads);
        ensure!(self.semantic_token_count > 0 && self.semantic_dim > 0, "semantic token shape must be positive");
        semantic::semantic_backend(&self.semantic_backend, self.semantic_dim, self.semantic_token_count)?;
        Ok(())
    }

    pub fn latent_side(&self) -> usize {
        self.image_size / self.latent_factor
    }

    pub fn latent_channels(&self) -> usize {
        unet::latent_channels(self)
    }

    /// Pixel size of one token at the `i`-th attention layer.
    pub fn layer_factors(&self) -> Vec<usize> {
        let mut levels = self.attention_levels.clone();
        levels.sort_unstable();
        levels.into_iter().map(|l| self.latent_factor << l).collect()
    }

    /// Token count of each attention layer.
    pub fn layer_tokens(&self) -> Vec<usize> {
        self.layer_factors().into_iter().map(|f| (self.image_size / f).pow(2)).collect()
    }

    fn sorted(mut self) -> Self {
        self.attention_levels.sort_unstable();
        self
    }
}

/// One Complete-branch evaluation.
pub struct ForwardItem<'a> {
    pub noisy: &'a LatentGrid,
    pub latent_mask: &'a Mask,
    pub masked: &'a LatentGrid,
    pub t: usize,
    pub cache: &'a FeatureCache,
}

/// The Reference and Complete branches with their weights.
#[derive(Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights<f32>,
    backend: Arc<dyn SemanticBackend>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).field("parameters", &self.weights.parameter_count()).finish()
    }
}

impl Model {
    /// Random initialization; the Reference branch starts as a copy of the Complete encoder.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let config = config.sorted();
        let weights = unet::init_weights(&config, &mut ChaCha8Rng::seed_from_u64(seed));
        let backend = semantic::semantic_backend(&config.semantic_backend, config.semantic_dim, config.semantic_token_count)?;
        Ok(Model { config, weights, backend })
    }

    /// Wraps existing weights after checking names and shapes against the config.
    pub fn from_weights(config: ModelConfig, weights: Weights<f32>) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        ensure_same_layout(&model.weights, &weights)?;
        model.weights = weights;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<f32> {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Weights<f32> {
        &mut self.weights
    }

    pub fn backend(&self) -> &dyn SemanticBackend {
        self.backend.as_ref()
    }

    /// Whether a parameter belongs to the Reference branch.
    pub fn is_reference_param(name: &str) -> bool {
        name.starts_with(unet::REF_PREFIX)
    }

    /// Validated references in canonical order, with pixels outside each
    /// reference mask cleared when reference masks are in use.
    pub fn prepare_references(&self, refs: &[ReferencePart]) -> Result<Vec<ReferencePart>> {
        let n = self.config.image_size;
        ensure!(refs.len() <= 6, "at most 6 references are supported, got {}", refs.len());
        let mut out: Vec<ReferencePart> = Vec::with_capacity(refs.len());
        for r in refs {
            r.validate()?;
            ensure!(r.image.height() == n && r.image.width() == n, "reference {} is {}x{}, expected {n}x{n}", r.label, r.image.height(), r.image.width());
            ensure!(!out.iter().any(|o| o.label == r.label), "duplicate reference label {}", r.label);
            let mut r = r.clone();
            if self.config.use_reference_mask {
                r.image = apply_mask(&r.image, &r.mask.invert(), 0.0)?;
            }
            out.push(r);
        }
        out.sort_by_key(|r| r.label);
        Ok(out)
    }

    /// Reference tokens then prompt tokens; the null token when there are none.
    pub fn semantic_encode(&self, refs: &[ReferencePart], prompt: Option<&str>) -> Result<SemanticTokens> {
        let refs = self.prepare_references(refs)?;
        let d = self.config.semantic_dim;
        let mut data = Vec::new();
        let mut origin = Vec::new();
        for r in &refs {
            let t = self.backend.embed_image(&r.image);
            origin.extend(std::iter::repeat_n(TokenOrigin::ReferenceImage, t.rows()));
            data.extend_from_slice(t.data());
        }
        if let Some(p) = prompt.filter(|_| self.config.use_prompt) {
            let t = self.backend.embed_text(p);
            origin.extend(std::iter::repeat_n(TokenOrigin::TextPrompt, t.rows()));
            data.extend_from_slice(t.data());
        }
        if origin.is_empty() {
            data.extend_from_slice(self.weights.get("null").expect("null token").data());
            origin.push(TokenOrigin::NullToken);
        }
        Ok(SemanticTokens { tokens: Tensor::new([origin.len(), d], data), origin })
    }

    /// Runs the Reference branch at timestep zero for every reference.
    pub fn reference_encode(&self, refs: &[ReferencePart]) -> Result<FeatureCache> {
        self.encode_conditions(refs, None)
    }

    /// Reference features plus prompt tokens (dropped when prompts are disabled).
    pub fn encode_conditions(&self, refs: &[ReferencePart], prompt: Option<&str>) -> Result<FeatureCache> {
        let refs = self.prepare_references(refs)?;
        let text = prompt.filter(|_| self.config.use_prompt).map(|p| self.backend.embed_text(p)).filter(|t| t.rows() > 0);
        let mut cache = FeatureCache { entries: Default::default(), text };
        if refs.is_empty() {
            return Ok(cache);
        }
        let semantic: Vec<Tensor<f32>> = refs.iter().map(|r| self.backend.embed_image(&r.image)).collect();
        let layers: Vec<Vec<Tensor<f32>>> = match self.config.reference_encoder_mode {
            ReferenceEncoderMode::SemanticOnly => vec![Vec::new(); refs.len()],
            ReferenceEncoderMode::Backbone => {
                let g = Graph::<f32>::inference();
                let frozen = |_: &str| false;
                let bind = Bind::new(&g, &self.weights, &frozen);
                let x = self.reference_inputs(&refs)?;
                let tokens: Vec<Option<Tensor<f32>>> = semantic.iter().cloned().map(Some).collect();
                let feats = unet::forward_reference(&bind, &self.config, x, &tokens);
                let per_layer: Vec<Tensor<f32>> = feats.layers.iter().map(|&v| g.value(v)).collect();
                (0..refs.len())
                    .map(|i| {
                        per_layer
                            .iter()
                            .map(|t| {
                                let n = t.rows() / refs.len();
                                t.narrow_rows(i * n, n)
                            })
                            .collect()
                    })
                    .collect()
            }
        };
        for ((r, sem), layers) in refs.iter().zip(semantic).zip(layers) {
            let kept = self.kept_tokens(&r.mask)?.iter().map(|k| k.as_ref().clone()).collect();
            cache.entries.insert(r.label, CacheEntry { layers, kept, semantic: sem });
        }
        Ok(cache)
    }

    pub(crate) fn kept_tokens(&self, reference_mask: &Mask) -> Result<KeptPerLayer> {
        self.config
            .layer_factors()
            .into_iter()
            .map(|f| {
                if self.config.use_reference_mask {
                    attention::kept_tokens(reference_mask, f).map(Arc::new)
                } else {
                    Ok(Arc::new((0..(self.config.image_size / f).pow(2)).collect()))
                }
            })
            .collect()
    }

    /// Stacked Reference-branch inputs: `(latent, zero mask, latent)` per token.
    pub(crate) fn reference_inputs<T: crate::tensor::Real>(&self, refs: &[ReferencePart]) -> Result<Tensor<T>> {
        let c = self.config.latent_channels();
        let n = self.config.latent_side().pow(2);
        let mut data = Vec::with_capacity(refs.len() * n * (2 * c + 1));
        for r in refs {
            let lat = encode_image_to_latent(&r.image, self.config.latent_factor)?.affine(2.0, -1.0);
            for tok in lat.values.chunks(c) {
                data.extend(tok.iter().map(|&v| T::lit(v as f64)));
                data.push(T::zero());
                data.extend(tok.iter().map(|&v| T::lit(v as f64)));
            }
        }
        Ok(Tensor::new([refs.len() * n, 2 * c + 1], data))
    }

    /// Latent-resolution mask and the scaled latent of the occluded source.
    pub fn source_inputs(&self, source: &Raster, mask: &Mask) -> Result<(Mask, LatentGrid)> {
        let n = self.config.image_size;
        ensure!(source.height() == n && source.width() == n, "source is {}x{}, expected {n}x{n}", source.height(), source.width());
        let masked = apply_mask(source, mask, 0.0)?;
        let latent = encode_image_to_latent(&masked, self.config.latent_factor)?.affine(2.0, -1.0);
        Ok((downsample_mask(mask, self.config.latent_factor)?, latent))
    }

    /// Noise prediction for one latent.
    pub fn complete_forward(&self, noisy: &LatentGrid, latent_mask: &Mask, masked: &LatentGrid, t: usize, cache: &FeatureCache) -> Result<LatentGrid> {
        let mut out = self.complete_forward_batch(&[ForwardItem { noisy, latent_mask, masked, t, cache }])?;
        Ok(out.pop().unwrap())
    }

    /// Noise predictions for several independent latents in one pass.
    pub fn complete_forward_batch(&self, items: &[ForwardItem<'_>]) -> Result<Vec<LatentGrid>> {
        ensure!(!items.is_empty(), "empty batch");
        let side = self.config.latent_side();
        let c = self.config.latent_channels();
        let mut x = Vec::with_capacity(items.len() * side * side * (2 * c + 1));
        let mut ts = Vec::with_capacity(items.len());
        for it in items {
            for (name, lat) in [("noisy latent", it.noisy), ("masked latent", it.masked)] {
                ensure!((lat.h, lat.w, lat.channels) == (side, side, c), "{name} is {}x{}x{}, expected {side}x{side}x{c}", lat.h, lat.w, lat.channels);
            }
            ensure!(it.latent_mask.height() == side && it.latent_mask.width() == side, "latent mask must be {side}x{side}");
            ensure!(it.t < crate::diffusion::TRAIN_STEPS, "timestep {} outside [0, {})", it.t, crate::diffusion::TRAIN_STEPS);
            self.check_cache(it.cache)?;
            push_complete_input(&mut x, it.noisy, it.latent_mask, it.masked);
            ts.push(it.t as f64);
        }
        let backbone = self.config.reference_encoder_mode == ReferenceEncoderMode::Backbone;
        let mut slots = 0;
        let mut layer_data: Vec<Vec<f32>> = vec![Vec::new(); self.config.attention_levels.len()];
        let mut conds = Vec::with_capacity(items.len());
        for it in items {
            let mut refs = Vec::new();
            if backbone {
                for e in it.cache.entries.values() {
                    for (buf, t) in layer_data.iter_mut().zip(&e.layers) {
                        buf.extend_from_slice(t.data());
                    }
                    refs.push((slots, e.kept.iter().map(|k| Arc::new(k.clone())).collect()));
                    slots += 1;
                }
            }
            conds.push(ItemConditioning { refs, image: it.cache.image_tokens(), text: it.cache.text.clone() });
        }
        let g = Graph::<f32>::inference();
        let frozen = |_: &str| false;
        let bind = Bind::new(&g, &self.weights, &frozen);
        let feats = (slots > 0).then(|| unet::RefFeatures {
            layers: layer_data.into_iter().map(|d| g.constant(Tensor::new([d.len() / self.config.token_dim, self.config.token_dim], d))).collect(),
        });
        let out = unet::forward_complete(&bind, &self.config, Tensor::new([items.len() * side * side, 2 * c + 1], x), &ts, &conds, feats.as_ref());
        let v = g.value(out);
        let per = side * side * c;
        Ok((0..items.len()).map(|i| LatentGrid { h: side, w: side, channels: c, values: v.data()[i * per..(i + 1) * per].to_vec() }).collect())
    }

    fn check_cache(&self, cache: &FeatureCache) -> Result<()> {
        let tokens = self.config.layer_tokens();
        for (label, e) in &cache.entries {
            let bad = |what: &str| Error::Config(format!("cache entry {label}: {what} does not match this model"));
            if e.semantic.shape() != [self.config.semantic_token_count, self.config.semantic_dim] {
                return Err(bad("semantic tokens"));
            }
            if e.kept.len() != tokens.len() || e.kept.iter().zip(&tokens).any(|(k, &n)| k.iter().any(|&i| i >= n) || k.is_empty()) {
                return Err(bad("kept token indices"));
            }
            if self.config.reference_encoder_mode == ReferenceEncoderMode::Backbone
                && (e.layers.len() != tokens.len() || e.layers.iter().zip(&tokens).any(|(t, &n)| t.shape() != [n, self.config.token_dim]))
            {
                return Err(bad("layer tokens"));
            }
        }
        if let Some(t) = &cache.text {
            if t.cols() != self.config.semantic_dim {
                return Err(Error::Config("prompt token width does not match this model".into()));
            }
        }
        Ok(())
    }
}

/// Appends `(noisy, mask, masked)` channel rows for every token.
pub(crate) fn push_complete_input<T: crate::tensor::Real>(out: &mut Vec<T>, noisy: &LatentGrid, latent_mask: &Mask, masked: &LatentGrid) {
    let c = noisy.channels;
    for (i, (a, b)) in noisy.values.chunks(c).zip(masked.values.chunks(c)).enumerate() {
        out.extend(a.iter().map(|&v| T::lit(v as f64)));
        out.push(if latent_mask.bits()[i] { T::one() } else { T::zero() });
        out.extend(b.iter().map(|&v| T::lit(v as f64)));
    }
}

fn ensure_same_layout(expected: &Weights<f32>, got: &Weights<f32>) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Config(format!("checkpoint has {} weight arrays, the config needs {}", got.len(), expected.len())));
    }
    for (name, t) in expected.iter() {
        match got.get(name) {
            None => return Err(Error::Config(format!("checkpoint lacks weight {name}"))),
            Some(g) if g.shape() != t.shape() => {
                return Err(Error::Config(format!("weight {name} has shape {:?}, the config needs {:?}", g.shape(), t.shape())))
            }
            Some(_) => {}
        }
    }
    Ok(())
}
