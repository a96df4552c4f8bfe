//! Region-focused attention and decoupled cross-attention on toy tokens,
//! including a gradient through the autodiff graph.
//!
//! `cargo run --example attention`

use refcomplete::model::attention::{decoupled_cross_attention, kept_tokens, mask_reference_features, rfa_attention, AttentionWeights, DecoupledWeights};
use refcomplete::tensor::{Graph, Tensor};
use refcomplete::Mask;

fn tensor(rows: usize, cols: usize, seed: f64) -> Tensor<f64> {
    Tensor::from_fn([rows, cols], |i| ((i as f64 + 1.0) * seed).sin())
}

fn main() -> refcomplete::Result<()> {
    let d = 4;
    // A 4×4 reference feature map whose mask keeps the top-left quadrant.
    let reference = tensor(16, d, 0.7);
    let mask = Mask::from_fn(8, 8, |y, x| y < 4 && x < 4);
    let kept = kept_tokens(&mask, 2)?;
    let masked = mask_reference_features(&reference, &kept)?;
    println!("reference tokens kept: {} of 16", masked.rows());

    let g = Graph::<f64>::new();
    let x = g.leaf(tensor(6, d, 0.3));
    let r = g.constant(masked);
    let w = AttentionWeights { wq: g.leaf(tensor(d, d, 0.11)), wk: g.leaf(tensor(d, d, 0.13)), wv: g.leaf(tensor(d, d, 0.17)), wo: g.leaf(tensor(d, d, 0.19)) };
    let y = rfa_attention(&g, x, &[r], &w, 2)?;
    println!("region-focused output shape {:?}", g.shape(y));

    let text = g.constant(tensor(3, d, 0.23));
    let image = g.constant(tensor(2, d, 0.29));
    let dw = DecoupledWeights {
        wq: g.leaf(tensor(d, d, 0.31)),
        wk_text: g.leaf(tensor(d, d, 0.37)),
        wv_text: g.leaf(tensor(d, d, 0.41)),
        wk_image: g.leaf(tensor(d, d, 0.43)),
        wv_image: g.leaf(tensor(d, d, 0.47)),
        wo: g.leaf(tensor(d, d, 0.53)),
    };
    let z = decoupled_cross_attention(&g, y, text, image, &dw, 2)?;
    let loss = g.dot_const(z, Tensor::full(g.shape(z), 1.0));
    let grads = g.backward(loss);
    let gx = grads.get(x).expect("input gradient");
    println!("loss {:.6}, |d loss / d x| = {:.6}", g.value(loss).data()[0], gx.iter().map(|v| v * v).sum::<f64>().sqrt());
    Ok(())
}
