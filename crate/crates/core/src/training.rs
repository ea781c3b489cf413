//! Mix-and-separate training: mixture sampling, the magnitude-weighted
//! binary cross-entropy objective, modality mixup of the queries, and Adam
//! with linear warm-up and global-norm clipping.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    mix_queries, mix_seed, sample_mixup_weights, MixupWeights, Modality, QueryEmbedding,
};
use crate::error::{Error, Result};
use crate::sepnet::{save_checkpoint, Gradients, Real, SepNetHyper, SeparationModel};
use crate::spectral::{ideal_binary_masks, Mask, Spectrogram, Stft, Waveform};
use crate::synthdata::{Dataset, QueryTriplet, Split};

/// Predictions are clamped to `[MASK_EPS, 1 - MASK_EPS]` inside the loss.
pub const MASK_EPS: f64 = 1e-7;
/// Added to the loss normalizer.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_sources: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Peak learning rate reached at the end of warm-up.
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Blend the modalities of `modality_subset` with random weights. When
    /// disabled, each example uses one modality of the subset at random.
    pub mixup_enabled: bool,
    pub modality_subset: Vec<Modality>,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_sources: 2,
            batch_size: 16,
            total_steps: 5000,
            lr: 1e-3,
            warmup_steps: 500,
            clip_norm: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
            mixup_enabled: true,
            modality_subset: Modality::SINGLE.to_vec(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, hyper: &SepNetHyper) -> Result<()> {
        if self.n_sources < 2 {
            return Err(Error::invalid("n_sources must be >= 2"));
        }
        if hyper.k < self.n_sources {
            return Err(Error::invalid(format!(
                "model has k = {} intermediate masks, fewer than {} sources",
                hyper.k, self.n_sources
            )));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::invalid(
                "batch_size and total_steps must be positive",
            ));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("lr and clip_norm must be positive"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::invalid(
                "adam betas must lie in [0, 1) and eps be positive",
            ));
        }
        if self.modality_subset.is_empty() {
            return Err(Error::invalid("modality_subset must not be empty"));
        }
        for (i, m) in self.modality_subset.iter().enumerate() {
            if *m == Modality::Mixed {
                return Err(Error::invalid(
                    "modality_subset lists single modalities only",
                ));
            }
            if self.modality_subset[..i].contains(m) {
                return Err(Error::invalid(format!("modality {m} listed twice")));
            }
        }
        Ok(())
    }

    /// Query-mixing weights for one example.
    pub fn sample_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> MixupWeights {
        let has = |m| self.modality_subset.contains(&m);
        if self.mixup_enabled {
            loop {
                let w = sample_mixup_weights(rng);
                let w = MixupWeights {
                    audio: if has(Modality::Audio) { w.audio } else { 0.0 },
                    image: if has(Modality::Image) { w.image } else { 0.0 },
                    text: if has(Modality::Text) { w.text } else { 0.0 },
                };
                if MixupWeights::new(w.audio, w.image, w.text).is_ok() {
                    return w;
                }
            }
        }
        let m = self.modality_subset[rng.gen_range(0..self.modality_subset.len())];
        MixupWeights::only(m).expect("single modality")
    }
}

/// One mixture with its supervision.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub classes: Vec<u32>,
    pub sources: Vec<Waveform>,
    pub mixture: Waveform,
    pub spectrogram: Spectrogram,
    pub targets: Vec<Mask>,
    pub queries: Vec<QueryTriplet>,
}

impl TrainingExample {
    /// Sums the sources and derives the mixture spectrogram and ideal
    /// binary targets.
    pub fn from_sources(
        stft: &Stft,
        classes: Vec<u32>,
        sources: Vec<Waveform>,
        queries: Vec<QueryTriplet>,
    ) -> Result<Self> {
        if sources.len() != classes.len() || sources.len() != queries.len() {
            return Err(Error::invalid(
                "classes, sources and queries must have equal length",
            ));
        }
        let mixture = Waveform::sum(&sources)?;
        let spectra = sources
            .iter()
            .map(|s| stft.analyze(s))
            .collect::<Result<Vec<_>>>()?;
        let targets = ideal_binary_masks(&spectra)?;
        let spectrogram = stft.analyze(&mixture)?;
        Ok(Self {
            classes,
            sources,
            mixture,
            spectrogram,
            targets,
            queries,
        })
    }
}

/// Draws `n` distinct classes and one random instance of each from `split`.
pub fn sample_mixture<R: Rng + ?Sized>(
    dataset: &Dataset,
    n: usize,
    split: Split,
    rng: &mut R,
) -> Result<TrainingExample> {
    let n_classes = dataset.n_classes();
    if n == 0 || n > n_classes {
        return Err(Error::invalid(format!(
            "cannot draw {n} distinct classes from {n_classes}"
        )));
    }
    let range = match split {
        Split::Train => dataset.manifest().splits.train,
        Split::Eval => dataset.manifest().splits.eval,
    };
    let classes: Vec<u32> = sample(rng, n_classes, n)
        .into_iter()
        .map(|c| c as u32)
        .collect();
    let mut sources = Vec::with_capacity(n);
    let mut queries = Vec::with_capacity(n);
    for &c in &classes {
        let index = rng.gen_range(0..range.count);
        sources.push(dataset.source(c, split, index)?);
        queries.push(dataset.query_triplet(c, split, index)?);
    }
    TrainingExample::from_sources(dataset.stft(), classes, sources, queries)
}

fn check_geometry(x: &[f64], m: &[f64], m_hat: &[f64]) -> Result<()> {
    if x.len() != m.len() || x.len() != m_hat.len() {
        return Err(Error::GeometryMismatch(format!(
            "magnitude {} / target {} / prediction {} cells",
            x.len(),
            m.len(),
            m_hat.len()
        )));
    }
    Ok(())
}

/// Magnitude-weighted binary cross-entropy summed over all cells.
pub fn wbce_unnormalized(x: &[f64], m: &[f64], m_hat: &[f64]) -> Result<f64> {
    check_geometry(x, m, m_hat)?;
    Ok(x.iter()
        .zip(m)
        .zip(m_hat)
        .map(|((&x, &m), &p)| {
            let p = p.clamp(MASK_EPS, 1.0 - MASK_EPS);
            x * (-m * p.ln() - (1.0 - m) * (1.0 - p).ln())
        })
        .sum())
}

/// [`wbce_unnormalized`] divided by `sum(X) + 1e-8`, which makes the loss
/// independent of spectrogram size and input gain.
pub fn wbce_loss(x: &[f64], m: &[f64], m_hat: &[f64]) -> Result<f64> {
    let raw = wbce_unnormalized(x, m, m_hat)?;
    Ok(raw / (x.iter().sum::<f64>() + NORM_EPS))
}

/// Derivative of [`wbce_loss`] with respect to each predicted cell.
pub fn wbce_grad(x: &[f64], m: &[f64], m_hat: &[f64]) -> Result<Vec<f64>> {
    check_geometry(x, m, m_hat)?;
    let norm = x.iter().sum::<f64>() + NORM_EPS;
    Ok(x.iter()
        .zip(m)
        .zip(m_hat)
        .map(|((&x, &m), &p)| {
            if p <= MASK_EPS || p >= 1.0 - MASK_EPS {
                // the clamp is flat here
                return 0.0;
            }
            x * (p - m) / (p * (1.0 - p)) / norm
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct LossAndGrad {
    /// Sum of the per-source losses.
    pub loss: f64,
    pub per_source: Vec<f64>,
    pub grads: Gradients,
    /// Loss gradient with respect to each source's audio, image and text
    /// embedding.
    pub query_grads: Vec<[Vec<f64>; 3]>,
}

/// Mixed query for each source of `example`.
pub fn example_queries(
    example: &TrainingExample,
    weights: &MixupWeights,
) -> Result<Vec<QueryEmbedding>> {
    example
        .queries
        .iter()
        .map(|t| mix_queries(&t.audio, &t.image, &t.text, weights))
        .collect()
}

/// Loss summed over the sources of one example and its gradient.
pub fn loss_and_grad<T: Real>(
    model: &SeparationModel<T>,
    example: &TrainingExample,
    weights: &MixupWeights,
) -> Result<LossAndGrad> {
    let n = example.classes.len();
    if model.hyper().k < n {
        return Err(Error::invalid(format!(
            "model has k = {} intermediate masks, fewer than {n} sources",
            model.hyper().k
        )));
    }
    let queries = example_queries(example, weights)?;
    let refs: Vec<&[f64]> = queries.iter().map(|q| q.vector()).collect();
    let s = &example.spectrogram;
    let x = s.magnitude();
    let trace = model.forward(x, s.frames(), s.bins(), &refs)?;
    let mut per_source = Vec::with_capacity(n);
    let mut upstream = Vec::with_capacity(n);
    for (head, target) in trace.heads.iter().zip(&example.targets) {
        let m_hat: Vec<f64> = head.mask.iter().map(|v| v.f64()).collect();
        per_source.push(wbce_loss(x, target.values(), &m_hat)?);
        let g = wbce_grad(x, target.values(), &m_hat)?;
        upstream.push(g.into_iter().map(T::of).collect());
    }
    let back = model.backward(&trace, &upstream)?;
    let w = weights.normalized();
    let query_grads = back
        .query_grads
        .iter()
        .map(|g| {
            let part = |wi: f64| g.iter().map(|v| v * wi).collect::<Vec<f64>>();
            [part(w[0]), part(w[1]), part(w[2])]
        })
        .collect();
    Ok(LossAndGrad {
        loss: per_source.iter().sum(),
        per_source,
        grads: back.grads,
        query_grads,
    })
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[f64],
    state: &mut AdamState,
    step: u64,
    lr: f64,
    config: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    for len in [grads.len(), state.m.len(), state.v.len()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: len,
            });
        }
    }
    if step == 0 {
        return Err(Error::invalid("adam steps count from 1"));
    }
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(step.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(step.min(i32::MAX as u64) as i32);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let p = params[i].f64() - lr * m_hat / (v_hat.sqrt() + config.eps);
        params[i] = T::of(p);
    }
    Ok(())
}

/// Linear warm-up from 0 at step 0 to the peak at `warmup_steps`, then flat.
pub fn lr_schedule(step: usize, config: &TrainConfig) -> f64 {
    if config.warmup_steps == 0 || step >= config.warmup_steps {
        config.lr
    } else {
        config.lr * step as f64 / config.warmup_steps as f64
    }
}

/// Rescales `grads` to global norm `clip_norm` if it is larger; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, clip_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    norm
}

/// One line of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Where training writes its artifacts. With no directory nothing is written.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

pub const LOSS_HISTORY_FILE: &str = "loss_history.jsonl";
pub const FINAL_CHECKPOINT_FILE: &str = "model.ckpt";

pub fn checkpoint_name(step: usize) -> String {
    format!("model_step{step:06}.ckpt")
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: SeparationModel<f32>,
    pub history: Vec<LossRecord>,
}

/// Trains a freshly initialized model. Every random choice derives from
/// `config.seed`, so two runs with the same inputs are bit-identical.
pub fn train(
    dataset: &Dataset,
    hyper: &SepNetHyper,
    config: &TrainConfig,
    output: &TrainOutput,
) -> Result<TrainResult> {
    train_with(dataset, hyper, config, output, |_| {})
}

/// [`train`] with a callback invoked after every step.
pub fn train_with(
    dataset: &Dataset,
    hyper: &SepNetHyper,
    config: &TrainConfig,
    output: &TrainOutput,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainResult> {
    config.validate(hyper)?;
    if hyper.embed_dim != dataset.space().config().dim {
        return Err(Error::DimensionMismatch {
            expected: dataset.space().config().dim,
            actual: hyper.embed_dim,
        });
    }
    if config.n_sources > dataset.n_classes() {
        return Err(Error::invalid(format!(
            "{} sources need at least as many classes, dataset has {}",
            config.n_sources,
            dataset.n_classes()
        )));
    }
    let mut log = match &output.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_HISTORY_FILE);
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };

    let mut model = SeparationModel::<f32>::init(hyper.clone(), mix_seed(&[config.seed, 0x1217]))?;
    let mut state = AdamState::new(model.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0xDA7A]));
    let mut history = Vec::with_capacity(config.total_steps);
    for step in 1..=config.total_steps {
        let mut grads = model.zero_gradients();
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            let example = sample_mixture(dataset, config.n_sources, Split::Train, &mut rng)?;
            let weights = config.sample_weights(&mut rng);
            let lg = loss_and_grad(&model, &example, &weights)?;
            loss += lg.loss;
            grads.add_assign(&lg.grads);
        }
        let b = config.batch_size as f64;
        loss /= b;
        grads.scale(1.0 / b);
        if !loss.is_finite() || grads.values.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("training loss or gradient"));
        }
        let grad_norm = clip_gradients(&mut grads, config.clip_norm);
        let lr = lr_schedule(step, config);
        adam_step(
            model.params_mut(),
            &grads.values,
            &mut state,
            step as u64,
            lr,
            &config.adam,
        )?;
        let record = LossRecord {
            step,
            lr,
            loss,
            grad_norm,
        };
        if let Some((path, w)) = &mut log {
            let line = serde_json::to_string(&record).expect("plain record");
            writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        on_step(&record);
        history.push(record);
        if let Some(dir) = &output.dir {
            if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
                save_checkpoint(&model, dir.join(checkpoint_name(step)))?;
            }
        }
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = &output.dir {
        save_checkpoint(&model, dir.join(FINAL_CHECKPOINT_FILE))?;
    }
    Ok(TrainResult { model, history })
}

/// Reads a loss history written by [`train`].
pub fn read_loss_history(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Corrupt {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}
