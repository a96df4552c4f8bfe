//! Region-focused attention and decoupled cross-attention.
//!
//! Both are written against graph variables so the same code serves
//! training, inference and gradient checks. The `*_packed` forms run many
//! independent problems in one call through attention [`Segment`]s.

use crate::error::{ensure, Error, Result};
use crate::mask::{cell_counts, downsample_mask, Mask};
use crate::tensor::{Graph, Real, Segment, Tensor, Var};

/// Bias-free projections of one attention; all are `[d, d]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Shared query and output projections with separate key/value pairs for
/// the text stream (branch a) and the image stream (branch b).
#[derive(Clone, Copy, Debug)]
pub struct DecoupledWeights {
    pub wq: Var,
    pub wk_text: Var,
    pub wv_text: Var,
    pub wk_image: Var,
    pub wv_image: Var,
    pub wo: Var,
}

/// Rows of `tokens` listed in `kept`, in order. Tokens not listed are dropped.
pub fn mask_reference_features<T: Real>(tokens: &Tensor<T>, kept: &[usize]) -> Result<Tensor<T>> {
    let (n, d) = (tokens.rows(), tokens.cols());
    if let Some(&bad) = kept.iter().find(|&&i| i >= n) {
        return Err(Error::Invariant(format!("kept token {bad} out of range for {n} tokens")));
    }
    let mut data = Vec::with_capacity(kept.len() * d);
    for &i in kept {
        data.extend_from_slice(&tokens.data()[i * d..(i + 1) * d]);
    }
    Ok(Tensor::new([kept.len(), d], data))
}

/// Token indices of a layer with `factor`-pixel cells that a reference mask keeps.
///
/// When no cell reaches half coverage the single best-covered cell is kept.
pub fn kept_tokens(reference_mask: &Mask, factor: usize) -> Result<Vec<usize>> {
    let down = downsample_mask(reference_mask, factor)?;
    let kept: Vec<usize> = down.bits().iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    if !kept.is_empty() {
        return Ok(kept);
    }
    let counts = cell_counts(reference_mask, factor)?;
    let best = counts.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))).map(|(i, _)| i);
    Ok(best.into_iter().collect())
}

fn check_width<T: Real>(g: &Graph<T>, v: Var, d: usize, what: &str) -> Result<()> {
    let shape = g.shape(v);
    ensure!(shape.len() == 2 && shape[1] == d, "{what} has shape {shape:?}, expected [_, {d}]");
    Ok(())
}

fn check_square<T: Real>(g: &Graph<T>, w: Var, d: usize) -> Result<()> {
    let shape = g.shape(w);
    ensure!(shape == [d, d], "projection has shape {shape:?}, expected [{d}, {d}]");
    Ok(())
}

/// `softmax(Q Kᵀ / √d_head) V` with `Q` from `f_input` and `K`, `V` from the
/// concatenation of `f_input` and the (already masked) reference sequences.
pub fn rfa_attention<T: Real>(g: &Graph<T>, f_input: Var, refs: &[Var], w: &AttentionWeights, heads: usize) -> Result<Var> {
    let shape = g.shape(f_input);
    ensure!(shape.len() == 2, "f_input must be a token matrix");
    let (m, d) = (shape[0], shape[1]);
    ensure!(heads > 0 && d % heads == 0, "token width {d} not divisible by {heads} heads");
    for r in refs {
        check_width(g, *r, d, "reference tokens")?;
    }
    for p in [w.wq, w.wk, w.wv, w.wo] {
        check_square(g, p, d)?;
    }
    let mut parts = vec![f_input];
    parts.extend(refs.iter().copied().filter(|&r| g.shape(r)[0] > 0));
    let concat = if parts.len() == 1 { f_input } else { g.concat_rows(&parts) };
    let kv_len = g.shape(concat)[0];
    Ok(rfa_packed(g, f_input, concat, vec![Segment { q_start: 0, q_len: m, kv_start: 0, kv_len }], w, heads))
}

pub(crate) fn rfa_packed<T: Real>(g: &Graph<T>, x: Var, kv: Var, segments: Vec<Segment>, w: &AttentionWeights, heads: usize) -> Var {
    let q = g.matmul(x, w.wq);
    let k = g.matmul(kv, w.wk);
    let v = g.matmul(kv, w.wv);
    let a = g.attention(q, k, v, heads, segments);
    g.matmul(a, w.wo)
}

/// Sum of two cross-attentions sharing one query: `x` attends to `text`
/// (branch a) and, separately, to `image` (branch b).
pub fn decoupled_cross_attention<T: Real>(
    g: &Graph<T>,
    x: Var,
    text: Var,
    image: Var,
    w: &DecoupledWeights,
    heads: usize,
) -> Result<Var> {
    let shape = g.shape(x);
    ensure!(shape.len() == 2, "queries must be a token matrix");
    let (m, d) = (shape[0], shape[1]);
    ensure!(heads > 0 && d % heads == 0, "token width {d} not divisible by {heads} heads");
    check_width(g, text, d, "text tokens")?;
    check_width(g, image, d, "image tokens")?;
    ensure!(g.shape(text)[0] > 0 && g.shape(image)[0] > 0, "semantic token streams must be nonempty");
    for p in [w.wq, w.wk_text, w.wv_text, w.wk_image, w.wv_image, w.wo] {
        check_square(g, p, d)?;
    }
    let seg = |n: usize| vec![Segment { q_start: 0, q_len: m, kv_start: 0, kv_len: n }];
    Ok(decoupled_packed(g, x, text, seg(g.shape(text)[0]), image, seg(g.shape(image)[0]), w, heads))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn decoupled_packed<T: Real>(
    g: &Graph<T>,
    x: Var,
    text: Var,
    text_segments: Vec<Segment>,
    image: Var,
    image_segments: Vec<Segment>,
    w: &DecoupledWeights,
    heads: usize,
) -> Var {
    let q = g.matmul(x, w.wq);
    let a = g.attention(q, g.matmul(text, w.wk_text), g.matmul(text, w.wv_text), heads, text_segments);
    let b = g.attention(q, g.matmul(image, w.wk_image), g.matmul(image, w.wv_image), heads, image_segments);
    g.matmul(g.add(a, b), w.wo)
}

/// Concrete weights for the tensor-level helpers below.
#[derive(Clone, Debug)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

impl<T: Real> AttentionParams<T> {
    pub fn identity(d: usize) -> Self {
        let eye = Tensor::from_fn([d, d], |i| if i / d == i % d { T::one() } else { T::zero() });
        AttentionParams { wq: eye.clone(), wk: eye.clone(), wv: eye.clone(), wo: eye }
    }

    fn bind(&self, g: &Graph<T>) -> AttentionWeights {
        AttentionWeights {
            wq: g.constant(self.wq.clone()),
            wk: g.constant(self.wk.clone()),
            wv: g.constant(self.wv.clone()),
            wo: g.constant(self.wo.clone()),
        }
    }
}

/// Tensor-in, tensor-out [`rfa_attention`].
pub fn rfa_attention_eval<T: Real>(f_input: &Tensor<T>, refs: &[Tensor<T>], w: &AttentionParams<T>, heads: usize) -> Result<Tensor<T>> {
    let g = Graph::inference();
    let x = g.constant(f_input.clone());
    let refs: Vec<Var> = refs.iter().map(|r| g.constant(r.clone())).collect();
    let out = rfa_attention(&g, x, &refs, &w.bind(&g), heads)?;
    Ok(g.value(out))
}
