//! Trains a small model on procedural figures and saves a checkpoint.
//!
//! `cargo run --release --example train [ITERATIONS]`

use refcomplete::dataset::training_figures;
use refcomplete::model::checkpoint;
use refcomplete::training::{train_loop, TrainConfig, TrainingData};
use refcomplete::ModelConfig;

fn main() -> refcomplete::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let model = ModelConfig { image_size: 32, base_channels: 8, token_dim: 16, heads: 2, semantic_dim: 16, ..Default::default() };
    let cfg = TrainConfig { iterations, batch_size: 4, checkpoint_every: 0, ..Default::default() };
    let data = TrainingData::Procedural { figures: training_figures(16, 0), image_size: model.image_size };
    let out = train_loop(&data, &model, &cfg, None)?;
    for (i, chunk) in out.losses.chunks(iterations.div_ceil(10).max(1)).enumerate() {
        println!("steps {:>4}+ loss {:.4}", i * chunk.len(), chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    let path = std::env::temp_dir().join("refcomplete-example.ckpt");
    checkpoint::save(&out.model, &path)?;
    println!("{} parameters saved to {}", out.model.weights().parameter_count(), path.display());
    Ok(())
}
