//! Training recipe: reference dropping, mask sampling, Adam updates,
//! checkpoints and the loss log.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{ensure, Error, Result};
use crate::mask::MaskSpec;
use crate::model::unet::{self, ItemConditioning, KeptPerLayer};
use crate::model::Bind;
use crate::model::{checkpoint, encode_image_to_latent, push_complete_input, LatentGrid, Model, ModelConfig, ReferenceEncoderMode};
use crate::synth::{build_training_pair, FigureSpec, ReferencePart, TrainingSample};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub p_drop_all: f64,
    pub p_drop_each: f64,
    pub mask: MaskSpec,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables them.
    pub checkpoint_every: usize,
    /// Restrict the loss to masked latent cells.
    pub masked_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            iterations: 2000,
            p_drop_all: 0.2,
            p_drop_each: 0.2,
            mask: MaskSpec::default(),
            seed: 0,
            checkpoint_every: 500,
            masked_loss: false,
        }
    }
}

impl TrainConfig {
    /// Full-scale optimizer settings.
    pub fn full_scale() -> Self {
        TrainConfig { learning_rate: 2e-5, batch_size: 64, iterations: 30_000, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.learning_rate.is_finite() && self.learning_rate >= 0.0, "learning_rate must be >= 0");
        ensure!(self.batch_size > 0, "batch_size must be positive");
        for (name, p) in [("p_drop_all", self.p_drop_all), ("p_drop_each", self.p_drop_each)] {
            ensure!((0.0..=1.0).contains(&p), "{name} must be in [0, 1], got {p}");
        }
        self.mask.validate()
    }
}

/// Which references survive one drop event; `None` when everything is dropped.
pub fn draw_drop<R: Rng + ?Sized>(n: usize, rng: &mut R, p_all: f64, p_each: f64) -> Option<Vec<bool>> {
    if rng.random_bool(p_all) {
        return None;
    }
    Some((0..n).map(|_| !rng.random_bool(p_each)).collect())
}

/// Drops every reference with probability `p_all`; otherwise drops each one
/// independently with probability `p_each`.
pub fn drop_references<R: Rng + ?Sized>(refs: &[ReferencePart], rng: &mut R, p_all: f64, p_each: f64) -> Vec<ReferencePart> {
    match draw_drop(refs.len(), rng, p_all, p_each) {
        None => Vec::new(),
        Some(keep) => refs.iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r.clone()).collect(),
    }
}

/// First-order adaptive-moment optimizer, β = (0.9, 0.999).
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    steps: Vec<u32>,
}

impl Adam {
    pub fn new(learning_rate: f64, param_lens: impl IntoIterator<Item = usize>) -> Self {
        let lens: Vec<usize> = param_lens.into_iter().collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: lens.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; lens.len()],
        }
    }

    /// Updates parameter `i` in place from its gradient.
    pub fn update(&mut self, i: usize, param: &mut [f32], grad: &[f32]) {
        self.steps[i] += 1;
        let t = self.steps[i] as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let lr = (self.learning_rate / c1) as f32;
        let (c2, eps) = (c2 as f32, self.epsilon as f32);
        for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(self.m[i].iter_mut()).zip(self.v[i].iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * *m / ((*v / c2).sqrt() + eps);
        }
    }
}

/// Model, optimizer and random stream of a training run.
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: Model, config: &TrainConfig) -> Self {
        let adam = Adam::new(config.learning_rate, model.weights().tensors().iter().map(Tensor::len));
        TrainState { model, adam, step: 0, rng: crate::util::sub_rng(config.seed, "train-step") }
    }
}

struct Prepared {
    x: Vec<f32>,
    eps: Vec<f32>,
    t: f64,
    refs: Vec<ReferencePart>,
    prompt: Option<String>,
    latent_mask: crate::mask::Mask,
}

fn prepare<R: Rng + ?Sized>(model: &Model, s: &TrainingSample, schedule: &NoiseSchedule, config: &TrainConfig, rng: &mut R) -> Result<Prepared> {
    let cfg = model.config();
    let t = rng.random_range(0..schedule.len());
    let x0 = encode_image_to_latent(&s.target, cfg.latent_factor)?.affine(2.0, -1.0);
    let eps = LatentGrid { values: (0..x0.values.len()).map(|_| StandardNormal.sample(rng)).collect(), ..x0.clone() };
    let (refs, prompt) = match draw_drop(s.references.len(), rng, config.p_drop_all, config.p_drop_each) {
        None => (Vec::new(), None),
        Some(keep) => {
            let refs = s.references.iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r.clone()).collect();
            (refs, Some(s.prompt.clone()).filter(|p| cfg.use_prompt && !p.is_empty()))
        }
    };
    let noisy = q_sample(&x0, t, &eps, schedule)?;
    let (latent_mask, masked) = model.source_inputs(&s.target, &s.source_mask)?;
    let mut x = Vec::new();
    push_complete_input(&mut x, &noisy, &latent_mask, &masked);
    Ok(Prepared { x, eps: eps.values, t: t as f64, refs: model.prepare_references(&refs)?, prompt, latent_mask })
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step(state: &mut TrainState, batch: &[TrainingSample], schedule: &NoiseSchedule, config: &TrainConfig) -> Result<f64> {
    ensure!(!batch.is_empty(), "empty batch");
    let model = &state.model;
    let cfg = model.config().clone();
    let items: Vec<Prepared> = batch.iter().map(|s| prepare(model, s, schedule, config, &mut state.rng)).collect::<Result<_>>()?;

    let g = Graph::<f32>::new();
    let train_ref = cfg.train_reference_encoder;
    let trainable = move |name: &str| train_ref || !Model::is_reference_param(name);
    let bind = Bind::new(&g, model.weights(), &trainable);
    let backbone = cfg.reference_encoder_mode == ReferenceEncoderMode::Backbone;

    let mut all_refs: Vec<&ReferencePart> = Vec::new();
    let mut conds = Vec::with_capacity(items.len());
    for it in &items {
        let mut slots: Vec<(usize, KeptPerLayer)> = Vec::new();
        if backbone {
            for r in &it.refs {
                slots.push((all_refs.len(), model.kept_tokens(&r.mask)?));
                all_refs.push(r);
            }
        }
        let image = stack(it.refs.iter().map(|r| model.backend().embed_image(&r.image)));
        let text = it.prompt.as_deref().map(|p| model.backend().embed_text(p)).filter(|t| t.rows() > 0);
        conds.push(ItemConditioning { refs: slots, image, text });
    }
    let feats = if all_refs.is_empty() {
        None
    } else {
        let owned: Vec<ReferencePart> = all_refs.iter().map(|r| (*r).clone()).collect();
        let tokens: Vec<Option<Tensor<f32>>> = owned.iter().map(|r| Some(model.backend().embed_image(&r.image))).collect();
        Some(unet::forward_reference(&bind, &cfg, model.reference_inputs(&owned)?, &tokens))
    };
    let width = 2 * cfg.latent_channels() + 1;
    let x: Vec<f32> = items.iter().flat_map(|it| it.x.iter().copied()).collect();
    let rows = x.len() / width;
    let ts: Vec<f64> = items.iter().map(|it| it.t).collect();
    let pred = unet::forward_complete(&bind, &cfg, Tensor::new([rows, width], x), &ts, &conds, feats.as_ref());
    let eps: Vec<f32> = items.iter().flat_map(|it| it.eps.iter().copied()).collect();
    let target = g.constant(Tensor::new([rows, cfg.latent_channels()], eps));
    let loss_var = if config.masked_loss {
        let n = cfg.latent_side().pow(2);
        let idx: Vec<usize> =
            items.iter().enumerate().flat_map(|(i, it)| it.latent_mask.bits().iter().enumerate().filter(|(_, &b)| b).map(move |(k, _)| i * n + k)).collect();
        ensure!(!idx.is_empty(), "masked loss with no masked latent cells in the batch");
        g.mse(g.gather_rows(pred, idx.clone()), g.gather_rows(target, idx))
    } else {
        g.mse(pred, target)
    };
    let loss = g.value(loss_var).data()[0] as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { step: state.step, loss });
    }
    let mut grads = g.backward(loss_var);
    let updates = bind.collect(&mut grads);
    drop(bind);
    let weights = state.model.weights_mut();
    for (i, grad) in updates {
        let mut p = weights.tensors()[i].data().to_vec();
        state.adam.update(i, &mut p, &grad);
        let shape = weights.tensors()[i].shape().to_vec();
        weights.set(i, Tensor::new(shape, p));
    }
    state.step += 1;
    Ok(loss)
}

fn stack(tensors: impl Iterator<Item = Tensor<f32>>) -> Option<Tensor<f32>> {
    let ts: Vec<Tensor<f32>> = tensors.collect();
    let cols = ts.first()?.cols();
    let data: Vec<f32> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Some(Tensor::new([data.len() / cols, cols], data))
}

/// Where training examples come from.
pub enum TrainingData {
    /// A fixed set, sampled with replacement.
    Samples(Vec<TrainingSample>),
    /// Fresh pairs (new poses, backgrounds and masks) rendered from these figures each step.
    Procedural { figures: Vec<FigureSpec>, image_size: usize },
}

impl TrainingData {
    fn validate(&self) -> Result<()> {
        match self {
            TrainingData::Samples(s) => ensure!(!s.is_empty(), "training set is empty"),
            TrainingData::Procedural { figures, .. } => ensure!(!figures.is_empty(), "no figures to train on"),
        }
        Ok(())
    }

    fn batch<R: Rng + ?Sized>(&self, n: usize, mask: &MaskSpec, rng: &mut R) -> Result<Vec<TrainingSample>> {
        (0..n)
            .map(|_| match self {
                TrainingData::Samples(s) => Ok(s[rng.random_range(0..s.len())].clone()),
                TrainingData::Procedural { figures, image_size } => {
                    let f = &figures[rng.random_range(0..figures.len())];
                    build_training_pair(f, rng, mask, *image_size)
                }
            })
            .collect()
    }
}

/// Result of [`train_loop`].
pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains from scratch. With `out_dir`, writes `loss.csv` (`step,loss`),
/// `step_<n>.ckpt` every `checkpoint_every` steps and `model.ckpt` at the end.
pub fn train_loop(data: &TrainingData, model_config: &ModelConfig, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    data.validate()?;
    let model = Model::new(model_config.clone(), config.seed)?;
    train_model(model, data, config, out_dir)
}

/// Continues training an existing model.
pub fn train_model(model: Model, data: &TrainingData, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    data.validate()?;
    let schedule = NoiseSchedule::default();
    let mut state = TrainState::new(model, config);
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut log = match out_dir {
        Some(dir) => {
            crate::util::create_dir(dir)?;
            let path = dir.join("loss.csv");
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io("creating loss log", &path, e))?;
            writeln!(f, "step,loss").map_err(|e| Error::io("writing loss log", &path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut losses = Vec::with_capacity(config.iterations);
    for step in 0..config.iterations {
        let batch = data.batch(config.batch_size, &config.mask, &mut data_rng)?;
        let loss = train_step(&mut state, &batch, &schedule, config)?;
        losses.push(loss);
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{step},{loss}").map_err(|e| Error::io("writing loss log", path.as_path(), e))?;
        }
        if step % 50 == 0 || step + 1 == config.iterations {
            log::info!("step {step}: loss {loss:.5}");
        }
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < config.iterations {
                checkpoint::save(&state.model, &dir.join(format!("step_{}.ckpt", step + 1)))?;
            }
        }
    }
    let checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("model.ckpt");
            checkpoint::save(&state.model, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome { model: state.model, losses, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_figure, FigureSpec, PartLabel, Pose};

    fn tiny() -> ModelConfig {
        ModelConfig { image_size: 32, base_channels: 8, token_dim: 16, heads: 2, semantic_dim: 8, semantic_token_count: 2, ..Default::default() }
    }

    fn samples(n: usize) -> Vec<TrainingSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|i| {
                let spec = FigureSpec::random(&format!("t{i}"), &mut rng);
                build_training_pair(&spec, &mut rng, &MaskSpec::default(), 32).unwrap()
            })
            .collect()
    }

    fn refs(n: usize) -> Vec<ReferencePart> {
        let spec = FigureSpec::random("r", &mut ChaCha8Rng::seed_from_u64(1));
        let fig = generate_figure(&spec, &Pose::neutral(), 0, 32, 0).unwrap();
        let mask = fig.silhouette.clone();
        PartLabel::ALL.iter().take(n).map(|&label| ReferencePart { label, image: fig.image.clone(), mask: mask.clone(), caption: String::new() }).collect()
    }

    #[test]
    fn drop_extremes() {
        let r = refs(6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert!(drop_references(&r, &mut rng, 1.0, 0.0).is_empty());
            assert_eq!(drop_references(&r, &mut rng, 0.0, 0.0), r);
        }
    }

    #[test]
    fn drop_rates_follow_the_two_stage_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut empty, mut kept) = (0usize, 0usize);
        let trials = 10_000;
        for _ in 0..trials {
            match draw_drop(6, &mut rng, 0.2, 0.2) {
                None => empty += 1,
                Some(k) => kept += k.iter().filter(|&&b| b).count(),
            }
        }
        // survival of one reference = (1 - 0.2) * (1 - 0.2)
        assert!((empty as f64 / trials as f64 - 0.2).abs() < 0.015);
        assert!((kept as f64 / (6 * trials) as f64 - 0.64).abs() < 0.015);
    }

    #[test]
    fn adam_first_step_has_learning_rate_magnitude() {
        let mut adam = Adam::new(0.1, [2]);
        let mut p = vec![1.0f32, -1.0];
        adam.update(0, &mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-5 && (p[1] + 0.9).abs() < 1e-5, "{p:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = samples(2);
        let cfg = TrainConfig { batch_size: 2, seed: 3, ..Default::default() };
        let run = || {
            let mut st = TrainState::new(Model::new(tiny(), 1).unwrap(), &cfg);
            let l = train_step(&mut st, &data, &NoiseSchedule::default(), &cfg).unwrap();
            (l, st.model.weights().clone())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(a.0.is_finite());
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let data = samples(2);
        let cfg = TrainConfig { batch_size: 2, learning_rate: 0.0, ..Default::default() };
        let model = Model::new(tiny(), 1).unwrap();
        let before = model.weights().clone();
        let mut st = TrainState::new(model, &cfg);
        let l = train_step(&mut st, &data, &NoiseSchedule::default(), &cfg).unwrap();
        assert!(l.is_finite());
        assert_eq!(st.model.weights(), &before);
    }

    #[test]
    fn frozen_reference_branch_is_untouched() {
        let data = TrainingData::Samples(samples(3));
        let cfg = TrainConfig { batch_size: 2, iterations: 3, p_drop_all: 0.0, p_drop_each: 0.0, ..Default::default() };
        let frozen = ModelConfig { train_reference_encoder: false, ..tiny() };
        let init = Model::new(frozen.clone(), cfg.seed).unwrap();
        let out = train_loop(&data, &frozen, &cfg, None).unwrap();
        let mut changed = 0;
        for (name, t) in out.model.weights().iter() {
            if Model::is_reference_param(name) {
                assert_eq!(init.weights().get(name), Some(t), "{name} moved");
            } else if init.weights().get(name) != Some(t) {
                changed += 1;
            }
        }
        assert!(changed > 0);
        let trained = train_loop(&data, &tiny(), &cfg, None).unwrap();
        let moved = trained.model.weights().iter().filter(|(n, t)| Model::is_reference_param(n) && init.weights().get(n) != Some(*t)).count();
        assert!(moved > 0);
    }

    #[test]
    fn loop_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let data = TrainingData::Samples(samples(2));
        let cfg = TrainConfig { batch_size: 1, iterations: 4, checkpoint_every: 2, ..Default::default() };
        let out = train_loop(&data, &tiny(), &cfg, Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 4);
        assert!(dir.path().join("step_2.ckpt").exists());
        let back = checkpoint::load(out.checkpoint.as_deref().unwrap()).unwrap();
        assert_eq!(back.weights(), out.model.weights());
    }

    #[test]
    fn zero_iterations_return_the_initialization() {
        let data = TrainingData::Samples(samples(1));
        let cfg = TrainConfig { iterations: 0, ..Default::default() };
        let out = train_loop(&data, &tiny(), &cfg, None).unwrap();
        assert_eq!(out.model.weights(), Model::new(tiny(), cfg.seed).unwrap().weights());
        assert!(out.losses.is_empty());
    }
}
