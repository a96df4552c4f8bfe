//! Token U-Net shared by both branches.
//!
//! Feature maps are channels-last token matrices `[batch * h * w, c]`.
//! Each level has a residual block and, at attention levels, a transformer
//! block whose self-attention is region-focused; the Reference branch runs
//! the encoder half only and returns the normalized tokens entering each
//! attention layer.

use std::sync::Arc;

use rand::Rng;

use super::attention::{decoupled_packed, rfa_packed, AttentionWeights, DecoupledWeights};
use super::params::{depth_to_space_map, space_to_depth_map, Bind, Init, Weights};
use super::ModelConfig;
use crate::tensor::{Real, Segment, Tensor, Var};

/// Width of the sinusoidal timestep features.
const TIME_FEATURES: usize = 64;
/// Prefix of Reference-branch parameter names.
pub(crate) const REF_PREFIX: &str = "ref.";

pub(crate) fn channels(cfg: &ModelConfig, level: usize) -> usize {
    cfg.base_channels * cfg.channel_multipliers[level]
}

pub(crate) fn input_channels(cfg: &ModelConfig) -> usize {
    2 * latent_channels(cfg) + 1
}

pub(crate) fn latent_channels(cfg: &ModelConfig) -> usize {
    cfg.latent_factor * cfg.latent_factor * 3
}

pub(crate) fn time_dim(cfg: &ModelConfig) -> usize {
    4 * cfg.base_channels
}

/// Side length of the token grid at `level`.
pub(crate) fn level_side(cfg: &ModelConfig, level: usize) -> usize {
    cfg.image_size / cfg.latent_factor >> level
}

fn init_resblock<R: Rng>(init: &mut Init<'_, R>, name: &str, cin: usize, cout: usize, tdim: usize) {
    init.norm(&format!("{name}.n1"), cin);
    init.linear(&format!("{name}.c1"), 9 * cin, cout);
    init.linear(&format!("{name}.t"), tdim, cout);
    init.zero_linear(&format!("{name}.s"), tdim, cout);
    init.norm(&format!("{name}.n2"), cout);
    init.linear(&format!("{name}.c2"), 9 * cout, cout);
    if cin != cout {
        init.linear(&format!("{name}.skip"), cin, cout);
    }
}

fn init_attention<R: Rng>(init: &mut Init<'_, R>, name: &str, c: usize, d: usize) {
    init.norm(&format!("{name}.nin"), c);
    init.linear(&format!("{name}.pin"), c, d);
    for ln in ["ln1", "ln2", "ln3"] {
        init.norm(&format!("{name}.{ln}"), d);
    }
    for m in ["wq", "wk", "wv", "wo", "cq", "cka", "cva", "ckb", "cvb", "co"] {
        init.matrix(&format!("{name}.{m}"), d, d);
    }
    init.linear(&format!("{name}.ff1"), d, 4 * d);
    init.linear(&format!("{name}.ff2"), 4 * d, d);
    init.zero_linear(&format!("{name}.pout"), d, c);
}

/// Fresh Complete-branch weights, plus a Reference-branch copy of the encoder.
pub(crate) fn init_weights<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Weights<f32> {
    let mut init = Init { weights: Weights::default(), rng };
    let tdim = time_dim(cfg);
    let d = cfg.token_dim;
    init.linear("time.l1", TIME_FEATURES, tdim);
    init.linear("time.l2", tdim, tdim);
    init.linear("cin", 9 * input_channels(cfg), channels(cfg, 0));
    init.linear("sem_proj", cfg.semantic_dim, d);
    init.linear("text_proj", cfg.semantic_dim, d);
    init.vector("null", &[1, cfg.semantic_dim], 1.0 / (cfg.semantic_dim as f32).sqrt());
    let levels = cfg.channel_multipliers.len();
    for i in 0..levels {
        let c = channels(cfg, i);
        init_resblock(&mut init, &format!("enc{i}.r"), c, c, tdim);
        if cfg.attention_levels.contains(&i) {
            init_attention(&mut init, &format!("enc{i}.a"), c, d);
        }
        if i + 1 < levels {
            init.linear(&format!("down{i}"), 4 * c, channels(cfg, i + 1));
        }
    }
    let top = channels(cfg, levels - 1);
    init_resblock(&mut init, "mid.r", top, top, tdim);
    for i in (0..levels).rev() {
        let c = channels(cfg, i);
        init_resblock(&mut init, &format!("dec{i}.r"), 2 * c, c, tdim);
        if i > 0 {
            init.linear(&format!("up{i}"), c, 4 * channels(cfg, i - 1));
        }
    }
    init.norm("out.n", channels(cfg, 0));
    init.zero_linear("out.c", 9 * channels(cfg, 0), latent_channels(cfg));
    let hidden = 4 * cfg.token_dim;
    init.linear("tok.l1", input_channels(cfg), hidden);
    init.norm("tok.n", hidden);
    init.zero_linear("tok.s", tdim, hidden);
    init.linear("tok.t", tdim, hidden);
    init.zero_linear("tok.l2", hidden, latent_channels(cfg));

    let mut weights = init.weights;
    let copies: Vec<(String, Tensor<f32>)> =
        weights.iter().filter(|(n, _)| is_reference_encoder_param(cfg, n)).map(|(n, t)| (format!("{REF_PREFIX}{n}"), t.clone())).collect();
    for (n, t) in copies {
        weights.insert(n, t);
    }
    weights
}

/// Complete-branch parameters the Reference branch mirrors.
fn is_reference_encoder_param(cfg: &ModelConfig, name: &str) -> bool {
    let Some(&last) = cfg.attention_levels.iter().max() else { return false };
    let head = name.split('.').next().unwrap_or("");
    if ["time", "cin", "sem_proj", "text_proj", "null"].contains(&head) {
        return true;
    }
    let level = |prefix: &str| head.strip_prefix(prefix).and_then(|s| s.parse::<usize>().ok());
    level("enc").is_some_and(|i| i <= last) || level("down").is_some_and(|i| i < last)
}

/// Sinusoidal timestep features, one row per timestep.
pub(crate) fn timestep_features<T: Real>(ts: &[f64]) -> Tensor<T> {
    let half = TIME_FEATURES / 2;
    let mut data = Vec::with_capacity(ts.len() * TIME_FEATURES);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() * t);
        let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.sin(), a.cos())).unzip();
        data.extend(s.into_iter().chain(c).map(T::lit));
    }
    Tensor::new([ts.len(), TIME_FEATURES], data)
}

/// Fixed 2D sinusoidal position code for a `side × side` grid, tiled `batch` times.
pub(crate) fn position_code<T: Real>(side: usize, d: usize, batch: usize) -> Tensor<T> {
    let quarter = (d / 4).max(1);
    let mut one = vec![T::zero(); side * side * d];
    for y in 0..side {
        for x in 0..side {
            let row = &mut one[(y * side + x) * d..(y * side + x + 1) * d];
            for i in 0..quarter {
                let f = (-(100f64.ln()) * i as f64 / quarter as f64).exp();
                let vals = [(y as f64 * f).sin(), (y as f64 * f).cos(), (x as f64 * f).sin(), (x as f64 * f).cos()];
                for (k, v) in vals.into_iter().enumerate() {
                    if let Some(slot) = row.get_mut(k * quarter + i) {
                        *slot = T::lit(v);
                    }
                }
            }
        }
    }
    let data: Vec<T> = (0..batch).flat_map(|_| one.iter().copied()).collect();
    Tensor::new([batch * side * side, d], data)
}

/// Kept token indices of one reference, per attention layer.
pub(crate) type KeptPerLayer = Vec<Arc<Vec<usize>>>;

/// Reference tokens of a whole batch: per attention layer, all references'
/// full token blocks stacked in slot order.
pub(crate) struct RefFeatures {
    pub layers: Vec<Var>,
}

/// Conditioning of one item in a Complete-branch batch.
pub(crate) struct ItemConditioning<T> {
    /// `(slot, kept per layer)` in canonical order.
    pub refs: Vec<(usize, KeptPerLayer)>,
    /// `[n, semantic_dim]` image tokens; `None` means the null token.
    pub image: Option<Tensor<T>>,
    /// `[n, semantic_dim]` prompt tokens; `None` means the null token.
    pub text: Option<Tensor<T>>,
}

fn temb<T: Real>(b: &Bind<'_, T>, p: &str, ts: &[f64]) -> Var {
    let g = b.g;
    let feats = g.constant(timestep_features(ts));
    let h = g.silu(b.linear(feats, &format!("{p}time.l1")));
    g.silu(b.linear(h, &format!("{p}time.l2")))
}

fn resblock<T: Real>(b: &Bind<'_, T>, x: Var, name: &str, temb: Var, batch: usize, side: usize, cout: usize) -> Var {
    let g = b.g;
    let cin = *g.shape(x).last().unwrap();
    let h = b.conv3(g.silu(b.norm(x, &format!("{name}.n1"))), &format!("{name}.c1"), batch, side, side);
    // Timestep scale and shift on the normalized activations.
    let h = b.norm(h, &format!("{name}.n2"));
    let h = g.add(h, g.mul_group_rows(h, b.linear(temb, &format!("{name}.s"))));
    let h = g.add_group_rows(h, b.linear(temb, &format!("{name}.t")));
    let h = b.conv3(g.silu(h), &format!("{name}.c2"), batch, side, side);
    let skip = if cin == cout { x } else { b.linear(x, &format!("{name}.skip")) };
    g.add(skip, h)
}

/// Per-forward semantic streams, already projected to token width.
struct SemanticStreams {
    text: Var,
    text_segments: Vec<Segment>,
    image: Var,
    image_segments: Vec<Segment>,
}

fn semantic_streams<T: Real>(b: &Bind<'_, T>, p: &str, items: &[(Option<&Tensor<T>>, Option<&Tensor<T>>)], tokens: usize) -> SemanticStreams {
    let text: Vec<Option<&Tensor<T>>> = items.iter().map(|it| it.0).collect();
    let image: Vec<Option<&Tensor<T>>> = items.iter().map(|it| it.1).collect();
    let (text, text_segments) = semantic_stream(b, p, &text, tokens, "text_proj");
    let (image, image_segments) = semantic_stream(b, p, &image, tokens, "sem_proj");
    SemanticStreams { text, text_segments, image, image_segments }
}

/// Packs per-item token blocks behind a leading null row; items without
/// tokens attend to the null row alone.
fn semantic_stream<T: Real>(b: &Bind<'_, T>, p: &str, items: &[Option<&Tensor<T>>], tokens: usize, proj: &str) -> (Var, Vec<Segment>) {
    let g = b.g;
    let null = b.p(&format!("{p}null"));
    let mut blocks = vec![null];
    let mut index = Vec::new();
    let mut segments = Vec::new();
    let mut next = 1;
    for (i, item) in items.iter().enumerate() {
        let start = index.len();
        match item.filter(|t| t.rows() > 0) {
            Some(t) => {
                blocks.push(g.constant(t.clone()));
                index.extend(next..next + t.rows());
                next += t.rows();
            }
            None => index.push(0),
        }
        segments.push(Segment { q_start: i * tokens, q_len: tokens, kv_start: start, kv_len: index.len() - start });
    }
    let all = if blocks.len() == 1 { null } else { g.concat_rows(&blocks) };
    let projected = b.linear(all, &format!("{p}{proj}"));
    (g.gather_rows(projected, index), segments)
}

struct LayerRefs<'a> {
    feats: Option<Var>,
    items: &'a [Vec<(usize, KeptPerLayer)>],
    layer: usize,
}

/// Transformer block; returns the block output and the captured `ln1` tokens.
#[allow(clippy::too_many_arguments)]
fn attention_block<T: Real>(
    b: &Bind<'_, T>,
    cfg: &ModelConfig,
    h: Var,
    name: &str,
    batch: usize,
    side: usize,
    refs: &LayerRefs<'_>,
    sem: &SemanticStreams,
    capture_only: bool,
) -> (Var, Var) {
    let g = b.g;
    let n = side * side;
    let pos = g.constant(position_code(side, cfg.token_dim, batch));
    let x = g.add(b.linear(b.norm(h, &format!("{name}.nin")), &format!("{name}.pin")), pos);
    let n1 = b.norm(x, &format!("{name}.ln1"));
    if capture_only {
        return (h, n1);
    }
    let w = |m: &str| b.p(&format!("{name}.{m}"));

    // f_concat per item: its own tokens, then each reference's kept tokens.
    let (kv, segments) = match refs.feats {
        Some(feats) if refs.items.iter().any(|r| !r.is_empty()) => {
            let combined = g.concat_rows(&[n1, feats]);
            let base = batch * n;
            let mut index = Vec::new();
            let mut segments = Vec::with_capacity(batch);
            for (i, item) in refs.items.iter().enumerate() {
                let start = index.len();
                index.extend(i * n..(i + 1) * n);
                for (slot, kept) in item {
                    index.extend(kept[refs.layer].iter().map(|&k| base + slot * n + k));
                }
                segments.push(Segment { q_start: i * n, q_len: n, kv_start: start, kv_len: index.len() - start });
            }
            (g.gather_rows(combined, index), segments)
        }
        _ => (n1, (0..batch).map(|i| Segment { q_start: i * n, q_len: n, kv_start: i * n, kv_len: n }).collect()),
    };
    let attn = AttentionWeights { wq: w("wq"), wk: w("wk"), wv: w("wv"), wo: w("wo") };
    let x = g.add(x, rfa_packed(g, n1, kv, segments, &attn, cfg.heads));

    let cross = DecoupledWeights { wq: w("cq"), wk_text: w("cka"), wv_text: w("cva"), wk_image: w("ckb"), wv_image: w("cvb"), wo: w("co") };
    let n2 = b.norm(x, &format!("{name}.ln2"));
    let c = decoupled_packed(g, n2, sem.text, sem.text_segments.clone(), sem.image, sem.image_segments.clone(), &cross, cfg.heads);
    let x = g.add(x, c);

    let n3 = b.norm(x, &format!("{name}.ln3"));
    let f = b.linear(g.silu(b.linear(n3, &format!("{name}.ff1"))), &format!("{name}.ff2"));
    let x = g.add(x, f);
    (g.add(h, b.linear(x, &format!("{name}.pout"))), n1)
}

/// Reference branch at timestep zero over `batch` stacked inputs
/// (`[batch * side², input_channels]`). Returns one packed token matrix per
/// attention layer.
pub(crate) fn forward_reference<T: Real>(b: &Bind<'_, T>, cfg: &ModelConfig, x: Tensor<T>, image_tokens: &[Option<Tensor<T>>]) -> RefFeatures {
    let g = b.g;
    let p = REF_PREFIX;
    let batch = image_tokens.len();
    let last = *cfg.attention_levels.iter().max().expect("reference branch needs an attention level");
    let temb = temb(b, p, &vec![0.0; batch]);
    let items: Vec<(Option<&Tensor<T>>, Option<&Tensor<T>>)> = image_tokens.iter().map(|t| (None, t.as_ref())).collect();
    let no_refs: Vec<Vec<(usize, KeptPerLayer)>> = vec![Vec::new(); batch];
    let mut h = b.conv3(g.constant(x), &format!("{p}cin"), batch, level_side(cfg, 0), level_side(cfg, 0));
    let mut layers = Vec::new();
    for level in 0..=last {
        let side = level_side(cfg, level);
        let sem = semantic_streams(b, p, &items, side * side);
        h = resblock(b, h, &format!("{p}enc{level}.r"), temb, batch, side, channels(cfg, level));
        if cfg.attention_levels.contains(&level) {
            let refs = LayerRefs { feats: None, items: &no_refs, layer: layers.len() };
            let (out, n1) = attention_block(b, cfg, h, &format!("{p}enc{level}.a"), batch, side, &refs, &sem, level == last);
            h = out;
            layers.push(n1);
        }
        if level < last {
            let c = channels(cfg, level);
            let down = g.remap(h, space_to_depth_map(batch, side, side, c), [batch * side * side / 4, 4 * c]);
            h = b.linear(down, &format!("{p}down{level}"));
        }
    }
    RefFeatures { layers }
}

/// Complete branch: noise prediction `[batch * side², latent_channels]`.
pub(crate) fn forward_complete<T: Real>(
    b: &Bind<'_, T>,
    cfg: &ModelConfig,
    x: Tensor<T>,
    ts: &[f64],
    items: &[ItemConditioning<T>],
    refs: Option<&RefFeatures>,
) -> Var {
    let g = b.g;
    let batch = items.len();
    let levels = cfg.channel_multipliers.len();
    let temb = temb(b, "", ts);
    let sem_items: Vec<(Option<&Tensor<T>>, Option<&Tensor<T>>)> = items.iter().map(|it| (it.text.as_ref(), it.image.as_ref())).collect();
    let ref_items: Vec<Vec<(usize, KeptPerLayer)>> = items.iter().map(|it| it.refs.clone()).collect();
    let side0 = level_side(cfg, 0);
    let x = g.constant(x);
    let mut h = b.conv3(x, "cin", batch, side0, side0);
    let mut skips = Vec::with_capacity(levels);
    let mut layer = 0;
    for level in 0..levels {
        let side = level_side(cfg, level);
        h = resblock(b, h, &format!("enc{level}.r"), temb, batch, side, channels(cfg, level));
        if cfg.attention_levels.contains(&level) {
            let sem = semantic_streams(b, "", &sem_items, side * side);
            let layer_refs = LayerRefs { feats: refs.map(|r| r.layers[layer]), items: &ref_items, layer };
            h = attention_block(b, cfg, h, &format!("enc{level}.a"), batch, side, &layer_refs, &sem, false).0;
            layer += 1;
        }
        skips.push(h);
        if level + 1 < levels {
            let c = channels(cfg, level);
            let down = g.remap(h, space_to_depth_map(batch, side, side, c), [batch * side * side / 4, 4 * c]);
            h = b.linear(down, &format!("down{level}"));
        }
    }
    let top = levels - 1;
    h = resblock(b, h, "mid.r", temb, batch, level_side(cfg, top), channels(cfg, top));
    for level in (0..levels).rev() {
        let side = level_side(cfg, level);
        h = g.concat_cols(h, skips[level]);
        h = resblock(b, h, &format!("dec{level}.r"), temb, batch, side, channels(cfg, level));
        if level > 0 {
            let c = channels(cfg, level - 1);
            let wide = b.linear(h, &format!("up{level}"));
            h = g.remap(wide, depth_to_space_map(batch, side, side, c), [batch * side * side * 4, c]);
        }
    }
    let h = g.silu(b.norm(h, "out.n"));
    // A per-token path from the input keeps every latent channel reachable
    // despite the narrower trunk.
    let tok = b.norm(b.linear(x, "tok.l1"), "tok.n");
    let tok = g.add(tok, g.mul_group_rows(tok, b.linear(temb, "tok.s")));
    let tok = g.silu(g.add_group_rows(tok, b.linear(temb, "tok.t")));
    g.add(b.conv3(h, "out.c", batch, side0, side0), b.linear(tok, "tok.l2"))
}
