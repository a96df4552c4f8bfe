//! Benchmark groups on disk and the evaluation runner.
//!
//! A benchmark directory holds `manifest.json` plus, per group,
//! `<group_id>/{source,mask,gt}.png` and `<group_id>/refs/<label>{,_mask}.png`.
//! Manifest paths are relative to the manifest's directory.

use std::path::{Component, Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_completion, SamplerConfig};
use crate::error::{ensure, Error, Result};
use crate::mask::Mask;
use crate::metrics::{aggregate_report, evaluate_group, format_value, Metric, MetricConfig, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::raster::Raster;
use crate::synth::{build_benchmark_group, FigureSpec, GroupProvenance, PartLabel, ReferencePart};
use crate::training::{train_loop, TrainConfig, TrainingData};
use crate::util::{create_dir, fnv1a64, read_json, write_json};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// One evaluation unit.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkGroup {
    pub group_id: String,
    pub source: Raster,
    pub source_mask: Mask,
    pub references: Vec<ReferencePart>,
    pub prompt: Option<String>,
    pub ground_truth: Raster,
}

impl BenchmarkGroup {
    pub fn validate(&self) -> Result<()> {
        let id = &self.group_id;
        ensure!(!self.source_mask.is_empty(), "group {id}: source mask is empty");
        ensure!(!self.references.is_empty(), "group {id}: no references");
        ensure!(self.source.same_size(&self.ground_truth), "group {id}: source and ground truth differ in size");
        ensure!(
            self.source_mask.height() == self.source.height() && self.source_mask.width() == self.source.width(),
            "group {id}: mask size does not match the source"
        );
        for r in &self.references {
            r.validate()?;
            ensure!(r.image.same_size(&self.source), "group {id}: reference {} differs in size", r.label);
        }
        for y in 0..self.source.height() {
            for x in 0..self.source.width() {
                ensure!(
                    self.source_mask.get(y, x) || self.source.pixel(y, x) == self.ground_truth.pixel(y, x),
                    "group {id}: ground truth differs from the source outside the mask at ({y}, {x})"
                );
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub groups: Vec<GroupEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupEntry {
    pub group_id: String,
    pub source: String,
    pub mask: String,
    pub ground_truth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub references: Vec<ReferenceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<ProvenanceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceEntry {
    pub label: PartLabel,
    pub image: String,
    pub mask: String,
    #[serde(default)]
    pub caption: String,
}

/// How a synthetic group was rendered.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvenanceEntry {
    pub source_figure_id: String,
    pub reference_figure_id: String,
    pub source_background: u32,
    pub reference_background: u32,
    pub glyph_part: PartLabel,
}

impl Manifest {
    pub fn group(&self, id: &str) -> Option<&GroupEntry> {
        self.groups.iter().find(|g| g.group_id == id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.group_id.as_str()).collect()
    }
}

fn is_safe_relative(path: &str) -> bool {
    let p = Path::new(path);
    !path.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)))
}

fn is_safe_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl GroupEntry {
    /// Named files of this group: `source`, `mask`, `gt`, `refs/<label>`, `refs/<label>_mask`.
    pub fn assets(&self) -> Vec<(String, &str)> {
        let mut out = vec![("source".to_string(), self.source.as_str()), ("mask".into(), self.mask.as_str()), ("gt".into(), self.ground_truth.as_str())];
        for r in &self.references {
            out.push((format!("refs/{}", r.label), r.image.as_str()));
            out.push((format!("refs/{}_mask", r.label), r.mask.as_str()));
        }
        out
    }

    pub fn asset(&self, name: &str) -> Option<&str> {
        self.assets().into_iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    fn check(&self) -> Result<()> {
        ensure!(is_safe_id(&self.group_id), "group id {:?} must be nonempty ASCII letters, digits, '-' or '_'", self.group_id);
        for (name, path) in self.assets() {
            ensure!(is_safe_relative(path), "group {}: {name} path {path:?} must be relative and stay inside the benchmark", self.group_id);
        }
        Ok(())
    }

    /// Reads and validates the group's files.
    pub fn load(&self, root: &Path) -> Result<BenchmarkGroup> {
        let load = || -> Result<BenchmarkGroup> {
            self.check()?;
            let mut references = Vec::with_capacity(self.references.len());
            for r in &self.references {
                references.push(ReferencePart {
                    label: r.label,
                    image: Raster::load_png(&root.join(&r.image))?,
                    mask: Mask::load_png(&root.join(&r.mask))?,
                    caption: r.caption.clone(),
                });
            }
            let group = BenchmarkGroup {
                group_id: self.group_id.clone(),
                source: Raster::load_png(&root.join(&self.source))?,
                source_mask: Mask::load_png(&root.join(&self.mask))?,
                references,
                prompt: self.prompt.clone(),
                ground_truth: Raster::load_png(&root.join(&self.ground_truth))?,
            };
            group.validate()?;
            Ok(group)
        };
        load().map_err(|e| match e {
            Error::Group { .. } => e,
            e => Error::in_group(&self.group_id)(e),
        })
    }
}

/// Parses and checks a manifest without touching the group files.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let manifest: Manifest = read_json(path)?;
    let bad = |detail: String| Error::Format { path: path.to_path_buf(), detail };
    if manifest.version != MANIFEST_VERSION {
        return Err(bad(format!("unsupported manifest version {}", manifest.version)));
    }
    if manifest.groups.is_empty() {
        return Err(bad("manifest lists no groups".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for g in &manifest.groups {
        if !seen.insert(g.group_id.as_str()) {
            return Err(bad(format!("duplicate group id {}", g.group_id)));
        }
        g.check().map_err(Error::in_group(&g.group_id))?;
    }
    Ok(manifest)
}

/// Loads every group, failing on the first invalid one.
pub fn load_benchmark(manifest_path: &Path) -> Result<Vec<BenchmarkGroup>> {
    let manifest = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    manifest.groups.iter().map(|g| g.load(root)).collect()
}

/// Writes groups in the on-disk layout and returns the manifest path.
pub fn write_benchmark(dir: &Path, groups: &[BenchmarkGroup], provenance: Option<&[GroupProvenance]>) -> Result<PathBuf> {
    ensure!(!groups.is_empty(), "no groups to write");
    if let Some(p) = provenance {
        ensure!(p.len() == groups.len(), "{} provenance records for {} groups", p.len(), groups.len());
    }
    let mut entries = Vec::with_capacity(groups.len());
    for (i, g) in groups.iter().enumerate() {
        g.validate()?;
        ensure!(is_safe_id(&g.group_id), "group id {:?} is not usable as a directory name", g.group_id);
        let id = &g.group_id;
        create_dir(&dir.join(id).join("refs"))?;
        g.source.save_png(&dir.join(id).join("source.png"))?;
        g.source_mask.save_png(&dir.join(id).join("mask.png"))?;
        g.ground_truth.save_png(&dir.join(id).join("gt.png"))?;
        let mut references = Vec::with_capacity(g.references.len());
        for r in &g.references {
            let image = format!("{id}/refs/{}.png", r.label);
            let mask = format!("{id}/refs/{}_mask.png", r.label);
            r.image.save_png(&dir.join(&image))?;
            r.mask.save_png(&dir.join(&mask))?;
            references.push(ReferenceEntry { label: r.label, image, mask, caption: r.caption.clone() });
        }
        entries.push(GroupEntry {
            group_id: id.clone(),
            source: format!("{id}/source.png"),
            mask: format!("{id}/mask.png"),
            ground_truth: format!("{id}/gt.png"),
            prompt: g.prompt.clone(),
            references,
            provenance: provenance.map(|p| ProvenanceEntry {
                source_figure_id: p[i].source_figure_id.clone(),
                reference_figure_id: p[i].reference_figure_id.clone(),
                source_background: p[i].source_background,
                reference_background: p[i].reference_background,
                glyph_part: p[i].glyph_part,
            }),
        });
    }
    let path = dir.join(MANIFEST);
    write_json(&path, &Manifest { version: MANIFEST_VERSION, groups: entries })?;
    Ok(path)
}

/// `count` held-out groups `g000, g001, …` from figures `bench-000, …`.
pub fn synthetic_benchmark(count: usize, seed: u64, image_size: usize) -> Result<(Vec<BenchmarkGroup>, Vec<GroupProvenance>)> {
    ensure!(count >= 1, "benchmark needs at least one group");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::with_capacity(count);
    let mut prov = Vec::with_capacity(count);
    for i in 0..count {
        let spec = FigureSpec::random(&format!("bench-{i:03}"), &mut rng);
        let (g, p) = build_benchmark_group(&spec, &format!("g{i:03}"), &mut rng, image_size)?;
        groups.push(g);
        prov.push(p);
    }
    Ok((groups, prov))
}

/// Anything that can fill a group's mask.
pub trait Completer: Sync {
    fn name(&self) -> String;

    fn complete(&self, group: &BenchmarkGroup, references: &[ReferencePart], prompt: Option<&str>, sampler: &SamplerConfig, seed: u64) -> Result<Raster>;
}

/// Checkpoint name that selects [`IdentityOracle`].
pub const IDENTITY_ORACLE: &str = "oracle:identity";

/// Returns the ground truth; the upper bound of every metric.
pub struct IdentityOracle;

impl Completer for IdentityOracle {
    fn name(&self) -> String {
        IDENTITY_ORACLE.into()
    }

    fn complete(&self, group: &BenchmarkGroup, _: &[ReferencePart], _: Option<&str>, _: &SamplerConfig, _: u64) -> Result<Raster> {
        Ok(group.ground_truth.clone())
    }
}

/// Reference encoding followed by guided DDIM sampling.
pub struct ModelCompleter<'a>(pub &'a Model);

impl Completer for ModelCompleter<'_> {
    fn name(&self) -> String {
        "model".into()
    }

    fn complete(&self, group: &BenchmarkGroup, references: &[ReferencePart], prompt: Option<&str>, sampler: &SamplerConfig, seed: u64) -> Result<Raster> {
        let cache = self.0.encode_conditions(references, prompt)?;
        sample_completion(self.0, &cache, &group.source, &group.source_mask, sampler, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub sampler: SamplerConfig,
    pub metrics: MetricConfig,
    pub seed: u64,
    /// Use only the first `n` references of each group.
    pub max_references: Option<usize>,
    /// Complete without any reference (the prompt is kept).
    pub drop_references: bool,
    /// Parallel groups; 0 picks the machine's parallelism.
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { sampler: SamplerConfig::default(), metrics: MetricConfig::default(), seed: 0, max_references: None, drop_references: false, workers: 0 }
    }
}

/// Sampling seed of one group: independent of evaluation order.
pub fn group_seed(seed: u64, group_id: &str) -> u64 {
    seed ^ fnv1a64(group_id.as_bytes())
}

pub struct EvalOutcome {
    pub report: MetricReport,
    /// Completions in report order.
    pub completed: Vec<(String, Raster)>,
}

/// Completes every group and scores it against its ground truth.
///
/// With `results_dir`, writes `report.csv`, `report.txt`, `report.json` and
/// `<group_id>/completed.png` there.
pub fn run_eval(completer: &dyn Completer, groups: &[BenchmarkGroup], opts: &EvalOptions, results_dir: Option<&Path>) -> Result<EvalOutcome> {
    ensure!(!groups.is_empty(), "benchmark has no groups");
    opts.sampler.validate()?;
    opts.metrics.validate()?;
    // CLIP-T needs a prompt for every group.
    let all_prompts = groups.iter().all(|g| g.prompt.is_some());
    let one = |g: &BenchmarkGroup| -> Result<(Raster, crate::metrics::MetricRow)> {
        let refs: &[ReferencePart] = if opts.drop_references {
            &[]
        } else {
            &g.references[..opts.max_references.unwrap_or(usize::MAX).min(g.references.len())]
        };
        let prompt = g.prompt.as_deref();
        let out = completer.complete(g, refs, prompt, &opts.sampler, group_seed(opts.seed, &g.group_id))?;
        let row = evaluate_group(&g.group_id, &out, &g.ground_truth, &g.source_mask, prompt.filter(|_| all_prompts), &opts.metrics)?;
        Ok((out, row))
    };
    let workers = match opts.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(groups.len());
    let results: Vec<Result<(Raster, crate::metrics::MetricRow)>> = if workers <= 1 {
        groups.iter().map(|g| one(g).map_err(Error::in_group(&g.group_id))).collect()
    } else {
        let chunk = groups.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = groups
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|g| one(g).map_err(Error::in_group(&g.group_id))).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let mut completed = Vec::with_capacity(groups.len());
    let mut rows = Vec::with_capacity(groups.len());
    for (g, r) in groups.iter().zip(results) {
        let (img, row) = r?;
        completed.push((g.group_id.clone(), img));
        rows.push(row);
    }
    completed.sort_by(|a, b| a.0.cmp(&b.0));
    let report = aggregate_report(rows, &opts.metrics)?;
    if let Some(dir) = results_dir {
        write_report(dir, &report)?;
        for (id, img) in &completed {
            create_dir(&dir.join(id))?;
            img.save_png(&dir.join(id).join("completed.png"))?;
        }
    }
    Ok(EvalOutcome { report, completed })
}

/// `report.csv`, `report.txt` and `report.json` in `dir`.
pub fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    create_dir(dir)?;
    let write = |name: &str, text: String| std::fs::write(dir.join(name), text).map_err(|e| Error::io("writing report", dir.join(name), e));
    write("report.csv", report.to_csv())?;
    write("report.txt", report.to_table())?;
    write_json(&dir.join("report.json"), report)
}

/// Mask-ratio sweep points.
pub const DEFAULT_RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Metrics of the mask-ratio table.
pub const MASK_RATIO_ROWS: [Metric; 3] = [Metric::ClipI, Metric::Dino, Metric::DreamSim];

/// Inputs shared by every run of the mask-ratio sweep.
pub struct AblationSetup<'a> {
    pub model: ModelConfig,
    /// `mask.random_ratio` is overridden per run.
    pub train: TrainConfig,
    pub figures: &'a [FigureSpec],
    pub benchmark: &'a [BenchmarkGroup],
    pub eval: EvalOptions,
}

/// One report per grid-mask ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRatioAblation {
    pub ratios: Vec<f64>,
    pub reports: Vec<MetricReport>,
}

fn ratio_label(r: f64) -> String {
    format!("{}%", (r * 100.0).round() as i64)
}

impl MaskRatioAblation {
    /// Metric rows by ratio columns.
    pub fn to_table(&self) -> String {
        let heads: Vec<String> = self.ratios.iter().map(|&r| ratio_label(r)).collect();
        let rows: Vec<(String, Vec<String>)> = MASK_RATIO_ROWS
            .iter()
            .map(|&m| (format!("{} {}", m.title(), if m.higher_is_better() { "↑" } else { "↓" }), self.reports.iter().map(|r| format_value(m, r.means[&m])).collect()))
            .collect();
        let lw = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0).max("random mask".len());
        let widths: Vec<usize> = (0..heads.len()).map(|i| rows.iter().map(|(_, c)| c[i].len()).chain([heads[i].len()]).max().unwrap()).collect();
        let mut out = format!("{:<lw$}", "random mask");
        for (h, w) in heads.iter().zip(&widths) {
            out.push_str(&format!("  {h:>w$}"));
        }
        out.push('\n');
        for (label, cells) in rows {
            out.push_str(&label);
            out.push_str(&" ".repeat(lw - label.chars().count()));
            for (c, w) in cells.iter().zip(&widths) {
                out.push_str(&format!("  {c:>w$}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric");
        for &r in &self.ratios {
            out.push(',');
            out.push_str(&ratio_label(r));
        }
        out.push('\n');
        for m in MASK_RATIO_ROWS {
            out.push_str(m.key());
            for r in &self.reports {
                out.push_str(&format!(",{}", r.means[&m]));
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model per grid-mask ratio (same seed) and evaluates each on
/// the same benchmark. With `out_dir`, every run gets `ratio_<pct>/` with its
/// training log, checkpoint and report, and the grid goes to
/// `mask_ratio.{csv,txt,json}`.
pub fn run_mask_ratio_ablation(setup: &AblationSetup<'_>, ratios: &[f64], out_dir: Option<&Path>) -> Result<MaskRatioAblation> {
    ensure!(!ratios.is_empty(), "no ratios to sweep");
    for &r in ratios {
        ensure!((0.0..=1.0).contains(&r), "mask ratio {r} is outside [0, 1]");
    }
    ensure!(!setup.figures.is_empty(), "no training figures");
    let data = TrainingData::Procedural { figures: setup.figures.to_vec(), image_size: setup.model.image_size };
    let mut reports = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut train = setup.train.clone();
        train.mask.random_ratio = ratio;
        let run_dir = out_dir.map(|d| d.join(format!("ratio_{:03}", (ratio * 100.0).round() as i64)));
        log::info!("mask ratio {}: training {} steps", ratio_label(ratio), train.iterations);
        let trained = train_loop(&data, &setup.model, &train, run_dir.as_deref())?;
        let eval = run_eval(&ModelCompleter(&trained.model), setup.benchmark, &setup.eval, run_dir.map(|d| d.join("eval")).as_deref())?;
        reports.push(eval.report);
    }
    let out = MaskRatioAblation { ratios: ratios.to_vec(), reports };
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        let write = |name: &str, text: String| std::fs::write(dir.join(name), text).map_err(|e| Error::io("writing ablation", dir.join(name), e));
        write("mask_ratio.csv", out.to_csv())?;
        write("mask_ratio.txt", out.to_table())?;
        write_json(&dir.join("mask_ratio.json"), &out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::PSNR_CAP;

    fn small_benchmark(n: usize) -> Vec<BenchmarkGroup> {
        synthetic_benchmark(n, 11, 64).unwrap().0
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (groups, prov) = synthetic_benchmark(3, 5, 64).unwrap();
        let path = write_benchmark(dir.path(), &groups, Some(&prov)).unwrap();
        assert_eq!(load_benchmark(&path).unwrap(), groups);
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.ids(), vec!["g000", "g001", "g002"]);
        assert!(m.group("g001").unwrap().provenance.is_some());
        assert_eq!(m.group("g001").unwrap().asset("gt"), Some("g001/gt.png"));
    }

    #[test]
    fn missing_file_names_group_and_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_benchmark(dir.path(), &small_benchmark(2), None).unwrap();
        std::fs::remove_file(dir.path().join("g001/mask.png")).unwrap();
        let err = load_benchmark(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("g001") && msg.contains("mask.png"), "{msg}");
        assert!(err.is_io());
    }

    #[test]
    fn empty_and_unsafe_manifests_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST);
        std::fs::write(&path, r#"{"version":1,"groups":[]}"#).unwrap();
        assert!(load_benchmark(&path).unwrap_err().to_string().contains("no groups"));
        let evil = r#"{"version":1,"groups":[{"group_id":"a","source":"../x.png","mask":"m.png","ground_truth":"g.png","references":[]}]}"#;
        std::fs::write(&path, evil).unwrap();
        assert!(read_manifest(&path).is_err());
    }

    #[test]
    fn identity_oracle_hits_metric_optima() {
        let groups = small_benchmark(3);
        let opts = EvalOptions { workers: 2, ..Default::default() };
        let out = run_eval(&IdentityOracle, &groups, &opts, None).unwrap();
        for r in &out.report.rows {
            assert_eq!(r.values[&Metric::Psnr], PSNR_CAP);
            assert!((r.values[&Metric::Ssim] - 1.0).abs() < 1e-12);
            assert_eq!(r.values[&Metric::Lpips], 0.0);
            assert_eq!(r.values[&Metric::DreamSim], 0.0);
            assert!((r.values[&Metric::ClipI] - 100.0).abs() < 1e-9);
        }
        assert_eq!(out.report.columns, Metric::ALL.to_vec());
    }

    #[test]
    fn eval_is_deterministic_and_writes_results() {
        let groups = small_benchmark(2);
        let model = Model::new(ModelConfig { base_channels: 8, token_dim: 16, heads: 2, semantic_dim: 16, ..Default::default() }, 3).unwrap();
        let opts = EvalOptions { sampler: SamplerConfig { steps: 3, ..Default::default() }, workers: 1, ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let a = run_eval(&ModelCompleter(&model), &groups, &opts, Some(dir.path())).unwrap();
        let b = run_eval(&ModelCompleter(&model), &groups, &EvalOptions { workers: 2, ..opts.clone() }, None).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.completed, b.completed);
        assert!(dir.path().join("report.csv").exists());
        assert!(dir.path().join("g000/completed.png").exists());
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn ablation_table_has_one_column_per_ratio() {
        let report = run_eval(&IdentityOracle, &small_benchmark(1), &EvalOptions::default(), None).unwrap().report;
        let abl = MaskRatioAblation { ratios: DEFAULT_RATIOS.to_vec(), reports: vec![report; 5] };
        let table = abl.to_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        for h in ["0%", "25%", "50%", "75%", "100%"] {
            assert!(lines[0].contains(h));
        }
        assert!(lines[1].starts_with("CLIP-I") && lines[2].starts_with("DINO") && lines[3].starts_with("DreamSim"));
        assert_eq!(abl.to_csv().lines().next().unwrap(), "metric,0%,25%,50%,75%,100%");
    }
}
