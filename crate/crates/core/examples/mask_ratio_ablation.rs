//! Sweeps the grid-mask ratio: trains one model per ratio and evaluates each.
//!
//! `cargo run --release --example mask_ratio_ablation [ITERATIONS]`

use refcomplete::benchmark::{run_mask_ratio_ablation, synthetic_benchmark, AblationSetup, EvalOptions};
use refcomplete::dataset::training_figures;
use refcomplete::diffusion::SamplerConfig;
use refcomplete::training::TrainConfig;
use refcomplete::ModelConfig;

fn main() -> refcomplete::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let model = ModelConfig { image_size: 32, base_channels: 8, token_dim: 16, heads: 2, semantic_dim: 16, ..Default::default() };
    let figures = training_figures(8, 0);
    let (benchmark, _) = synthetic_benchmark(3, 1, model.image_size)?;
    let setup = AblationSetup {
        model,
        train: TrainConfig { iterations, batch_size: 4, checkpoint_every: 0, ..Default::default() },
        figures: &figures,
        benchmark: &benchmark,
        eval: EvalOptions { sampler: SamplerConfig { steps: 10, ..Default::default() }, ..Default::default() },
    };
    let sweep = run_mask_ratio_ablation(&setup, &[0.0, 0.25, 0.5, 0.75, 1.0], None)?;
    println!("{}", sweep.to_table());
    Ok(())
}
