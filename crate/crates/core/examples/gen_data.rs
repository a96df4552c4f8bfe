//! Writes a small procedural dataset: training pairs plus a benchmark.
//!
//! `cargo run --example gen_data [OUT_DIR]`

use refcomplete::dataset::{generate_dataset, read_training_pairs, DatasetOptions};
use refcomplete::MaskSpec;

fn main() -> refcomplete::Result<()> {
    let dir = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("refcomplete-data"));
    let opts = DatasetOptions { figures: 8, benchmark_groups: 4, seed: 0, image_size: 64, mask: MaskSpec::default() };
    let manifest = generate_dataset(&dir, &opts)?;
    println!("{} pairs and {} benchmark groups in {}", manifest.pairs, manifest.benchmark_groups, dir.display());
    for s in read_training_pairs(&dir, &manifest)?.iter().take(3) {
        let labels: Vec<&str> = s.references.iter().map(|r| r.label.as_str()).collect();
        println!("{}: {:?} mask, {:.0}% covered, refs {labels:?}", s.figure_id, s.mask_branch, 100.0 * s.source_mask.coverage());
        println!("  prompt: {}", s.prompt);
    }
    Ok(())
}
