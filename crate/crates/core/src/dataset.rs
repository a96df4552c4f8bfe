//! A generated dataset on disk: training pairs, the figure specs they came
//! from, and a held-out benchmark.
//!
//! ```text
//! <dir>/dataset.json
//! <dir>/train/<figure_id>/{target,occluded,mask}.png, refs/, meta.json
//! <dir>/benchmark/manifest.json, <group_id>/...
//! ```

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::{synthetic_benchmark, write_benchmark};
use crate::error::{ensure, Error, Result};
use crate::mask::MaskSpec;
use crate::synth::{build_training_pair, read_training_sample, write_training_sample, FigureSpec, TrainingSample};
use crate::util::{create_dir, read_json, sub_rng, write_json};

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    /// Number of training pairs under `train/`.
    pub pairs: usize,
    pub figures: Vec<FigureSpec>,
    /// Benchmark manifest, relative to the dataset directory.
    pub benchmark: String,
    pub benchmark_groups: usize,
}

impl DatasetManifest {
    pub fn benchmark_manifest(&self, dir: &Path) -> PathBuf {
        dir.join(&self.benchmark)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetOptions {
    pub figures: usize,
    pub benchmark_groups: usize,
    pub seed: u64,
    pub image_size: usize,
    pub mask: MaskSpec,
}

/// `count` training identities `fig-0000, fig-0001, …`.
pub fn training_figures(count: usize, seed: u64) -> Vec<FigureSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|i| FigureSpec::random(&format!("fig-{i:04}"), &mut rng)).collect()
}

/// Writes one training pair per figure plus the benchmark. The output depends
/// only on `opts`, so two runs with the same seed produce identical trees.
pub fn generate_dataset(dir: &Path, opts: &DatasetOptions) -> Result<DatasetManifest> {
    ensure!(opts.figures >= 1, "figures must be ≥1");
    ensure!(opts.benchmark_groups >= 1, "benchmark_groups must be ≥1");
    opts.mask.validate()?;
    let figures = training_figures(opts.figures, opts.seed);
    let train = dir.join("train");
    create_dir(&train)?;
    let mut rng = sub_rng(opts.seed, "pairs");
    for spec in &figures {
        let sample = build_training_pair(spec, &mut rng, &opts.mask, opts.image_size)?;
        write_training_sample(&train.join(&spec.figure_id), &sample)?;
    }
    let bench_seed: u64 = sub_rng(opts.seed, "benchmark").random();
    let (groups, prov) = synthetic_benchmark(opts.benchmark_groups, bench_seed, opts.image_size)?;
    write_benchmark(&dir.join("benchmark"), &groups, Some(&prov))?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        seed: opts.seed,
        image_size: opts.image_size,
        pairs: figures.len(),
        figures,
        benchmark: format!("benchmark/{}", crate::benchmark::MANIFEST),
        benchmark_groups: opts.benchmark_groups,
    };
    write_json(&dir.join(DATASET_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    let m: DatasetManifest = read_json(&path)?;
    if m.version != DATASET_VERSION {
        return Err(Error::Format { path, detail: format!("unsupported dataset version {}", m.version) });
    }
    if m.figures.len() != m.pairs {
        return Err(Error::Format { path, detail: format!("{} figures listed for {} pairs", m.figures.len(), m.pairs) });
    }
    Ok(m)
}

/// Loads the stored training pairs in figure order.
pub fn read_training_pairs(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<TrainingSample>> {
    manifest.figures.iter().map(|f| read_training_sample(&dir.join("train").join(&f.figure_id))).collect()
}
