//! Completes one benchmark image with and without its references.
//!
//! `cargo run --release --example complete [CHECKPOINT]`
//!
//! Without a checkpoint an untrained model is used, which shows the
//! pipeline but not the quality.

use refcomplete::benchmark::synthetic_benchmark;
use refcomplete::diffusion::{sample_completion, SamplerConfig};
use refcomplete::metrics::masked_psnr;
use refcomplete::model::checkpoint;
use refcomplete::{Model, ModelConfig};

fn main() -> refcomplete::Result<()> {
    let model = match std::env::args().nth(1) {
        Some(p) => checkpoint::load(p.as_ref())?,
        None => Model::new(ModelConfig { image_size: 32, base_channels: 8, token_dim: 16, heads: 2, semantic_dim: 16, ..Default::default() }, 0)?,
    };
    let (groups, _) = synthetic_benchmark(1, 5, model.config().image_size)?;
    let g = &groups[0];
    let sampler = SamplerConfig { steps: 20, ..Default::default() };
    let out = std::env::temp_dir();
    for (name, refs) in [("with_refs", &g.references[..]), ("without_refs", &[][..])] {
        let cache = model.encode_conditions(refs, g.prompt.as_deref())?;
        let done = sample_completion(&model, &cache, &g.source, &g.source_mask, &sampler, 7)?;
        let path = out.join(format!("refcomplete-{name}.png"));
        done.save_png(&path)?;
        println!("{name}: PSNR {:.2} dB -> {}", masked_psnr(&done, &g.ground_truth, &g.source_mask)?, path.display());
    }
    Ok(())
}
