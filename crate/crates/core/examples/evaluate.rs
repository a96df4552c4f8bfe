//! Scores the identity oracle and an untrained model on a synthetic benchmark.
//!
//! `cargo run --release --example evaluate`

use refcomplete::benchmark::{run_eval, synthetic_benchmark, EvalOptions, IdentityOracle, ModelCompleter};
use refcomplete::diffusion::SamplerConfig;
use refcomplete::{Model, ModelConfig};

fn main() -> refcomplete::Result<()> {
    let (groups, _) = synthetic_benchmark(3, 1, 32)?;
    let opts = EvalOptions { sampler: SamplerConfig { steps: 10, ..Default::default() }, ..Default::default() };
    println!("identity oracle\n{}", run_eval(&IdentityOracle, &groups, &opts, None)?.report.to_table());

    let model = Model::new(ModelConfig { image_size: 32, base_channels: 8, token_dim: 16, heads: 2, semantic_dim: 16, ..Default::default() }, 0)?;
    let dir = std::env::temp_dir().join("refcomplete-eval");
    let outcome = run_eval(&ModelCompleter(&model), &groups, &opts, Some(&dir))?;
    println!("untrained model\n{}", outcome.report.to_table());
    println!("reports and completions in {}", dir.display());
    Ok(())
}
