//! Separation quality metrics and the evaluation harness.
//!
//! SDR here is the plain energy ratio `10 log10(|s|^2 / |s - s_hat|^2)`
//! capped to +-60 dB. There is no permutation search and no distortion
//! filter: every estimate is bound by its query to a known reference.
//! Estimates are never rescaled, so the metric is scale-sensitive.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    average_audio_queries, build_query_set, compose_queries, mix_seed, naive_negative_query,
    negative_query, query_aug, EmbeddingProvider, Modality, QueryEmbedding, QueryEntry, QuerySet,
};
use crate::error::{Error, Result};
use crate::sepnet::SeparationModel;
use crate::spectral::{apply_mask, Mask, MaskKind, Spectrogram, Waveform};
use crate::synthdata::{simulate_ood_description, Dataset, Split};
use crate::training::{sample_mixture, TrainingExample};

pub const SDR_CAP_DB: f64 = 60.0;
pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 1000;

fn check_lengths(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// Signal-to-distortion ratio in dB, capped to `[-60, 60]`.
pub fn sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    check_lengths(reference, estimate)?;
    let signal = reference.energy();
    if signal <= 0.0 {
        return Err(Error::invalid("SDR of a silent reference is undefined"));
    }
    let error: f64 = reference
        .samples()
        .iter()
        .zip(estimate.samples())
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    if error == 0.0 {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (signal / error).log10()).clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

/// SDR of the estimate minus SDR of the unprocessed mixture.
pub fn sdr_improvement(
    reference: &Waveform,
    estimate: &Waveform,
    mixture: &Waveform,
) -> Result<f64> {
    Ok(sdr(reference, estimate)? - sdr(reference, mixture)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    /// Bootstrap standard deviation of the mean.
    pub std: f64,
    pub median: f64,
}

pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("median of an empty list"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Mean, bootstrap standard deviation of the mean, and median.
pub fn bootstrap_stats(values: &[f64], n_resamples: usize, seed: u64) -> Result<Stats> {
    if values.is_empty() {
        return Err(Error::invalid("bootstrap of an empty list"));
    }
    if n_resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bootstrap input"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..n_resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let mm = means.iter().sum::<f64>() / n_resamples as f64;
    let var = means.iter().map(|m| (m - mm) * (m - mm)).sum::<f64>() / n_resamples as f64;
    Ok(Stats {
        n,
        mean,
        std: var.sqrt(),
        median: median(values)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "TQSS")]
    Tqss,
    #[serde(rename = "IQSS")]
    Iqss,
    #[serde(rename = "AQSS")]
    Aqss,
    #[serde(rename = "composed")]
    Composed,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Tqss, Task::Iqss, Task::Aqss, Task::Composed];

    pub fn name(self) -> &'static str {
        match self {
            Task::Tqss => "TQSS",
            Task::Iqss => "IQSS",
            Task::Aqss => "AQSS",
            Task::Composed => "composed",
        }
    }

    pub fn modality(self) -> Modality {
        match self {
            Task::Tqss => Modality::Text,
            Task::Iqss => Modality::Image,
            Task::Aqss => Modality::Audio,
            Task::Composed => Modality::Mixed,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tqss" | "text" => Ok(Task::Tqss),
            "iqss" | "image" => Ok(Task::Iqss),
            "aqss" | "audio" => Ok(Task::Aqss),
            "composed" | "mixed" => Ok(Task::Composed),
            _ => Err(Error::Unknown {
                kind: "task",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMethod {
    /// `(1 + alpha) Q - alpha Q_N`
    Proportional,
    /// `Q - alpha Q_N`
    Naive,
}

impl fmt::Display for NegativeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NegativeMethod::Proportional => "proportional",
            NegativeMethod::Naive => "naive",
        })
    }
}

impl FromStr for NegativeMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proportional" => Ok(NegativeMethod::Proportional),
            "naive" => Ok(NegativeMethod::Naive),
            _ => Err(Error::Unknown {
                kind: "negative-query method",
                name: s.to_string(),
            }),
        }
    }
}

/// Applies a negative query with the chosen method.
pub fn apply_negative(
    q: &QueryEmbedding,
    qn: &QueryEmbedding,
    alpha: f64,
    method: NegativeMethod,
) -> Result<QueryEmbedding> {
    match method {
        NegativeMethod::Proportional => negative_query(q, qn, alpha),
        NegativeMethod::Naive => naive_negative_query(q, qn, alpha),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Number of evaluation mixtures per task.
    pub n_eval: usize,
    pub n_sources: usize,
    pub seed: u64,
    /// Negative-query weight; 0 disables the negative query.
    pub alpha: f64,
    pub negative_method: NegativeMethod,
    pub query_aug: bool,
    /// Audio instances averaged into an audio query.
    pub audio_queries: usize,
    /// Composition weights in (audio, image, text) order.
    pub composed_weights: [f64; 3],
    /// When set, every query (text included) is a noisy instance embedding
    /// with this noise level.
    pub query_sigma: Option<f64>,
    /// When set, text queries are simulated free-form descriptions with this
    /// perturbation magnitude.
    pub ood_magnitude: Option<f64>,
    pub bootstrap_resamples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_eval: 100,
            n_sources: 2,
            seed: 0,
            alpha: 0.0,
            negative_method: NegativeMethod::Proportional,
            query_aug: false,
            audio_queries: 5,
            composed_weights: [1.0, 1.0, 1.0],
            query_sigma: None,
            ood_magnitude: None,
            bootstrap_resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_eval == 0 || self.audio_queries == 0 || self.bootstrap_resamples == 0 {
            return Err(Error::invalid(
                "n_eval, audio_queries and bootstrap_resamples must be positive",
            ));
        }
        if self.n_sources < 2 {
            return Err(Error::invalid(
                "evaluation mixtures need at least two sources",
            ));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid("alpha must be finite and >= 0"));
        }
        if self.composed_weights.iter().any(|w| !(*w >= 0.0))
            || self.composed_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::invalid(
                "composition weights must be >= 0 with a positive sum",
            ));
        }
        if let Some(s) = self.query_sigma {
            if !(s >= 0.0) {
                return Err(Error::invalid("query_sigma must be >= 0"));
            }
        }
        if let Some(m) = self.ood_magnitude {
            if !(m >= 0.0) {
                return Err(Error::invalid("ood_magnitude must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdrRecord {
    pub sample_id: usize,
    pub task: Task,
    pub target_class: u32,
    pub interferer_class: u32,
    pub sdr: f64,
    pub sdr_improvement: f64,
    pub alpha: f64,
    pub negative_method: NegativeMethod,
    pub query_aug: bool,
    /// Class chosen by retrieval when query augmentation is on.
    pub retrieved_class: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: Task,
    pub config: EvalConfig,
    pub sdr: Stats,
    pub sdr_improvement: Stats,
    pub records: Vec<SdrRecord>,
}

impl ExperimentReport {
    pub fn from_records(task: Task, config: EvalConfig, records: Vec<SdrRecord>) -> Result<Self> {
        let seed = mix_seed(&[config.seed, 0xB007]);
        let s: Vec<f64> = records.iter().map(|r| r.sdr).collect();
        let i: Vec<f64> = records.iter().map(|r| r.sdr_improvement).collect();
        Ok(Self {
            task,
            sdr: bootstrap_stats(&s, config.bootstrap_resamples, seed)?,
            sdr_improvement: bootstrap_stats(&i, config.bootstrap_resamples, seed)?,
            config,
            records,
        })
    }

    /// Recomputes the aggregates from the stored records.
    pub fn recompute(&self) -> Result<Self> {
        Self::from_records(self.task, self.config.clone(), self.records.clone())
    }

    /// Fraction of records whose retrieval picked the target class.
    pub fn retrieval_accuracy(&self) -> Option<f64> {
        let hits: Vec<bool> = self
            .records
            .iter()
            .filter_map(|r| r.retrieved_class.map(|c| c == r.target_class))
            .collect();
        if hits.is_empty() {
            return None;
        }
        Some(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
    }

    /// One JSON object per line: a header with config and aggregates, then
    /// one line per sample.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            task: Task,
            config: &'a EvalConfig,
            sdr: Stats,
            sdr_improvement: Stats,
        }
        let mut out = serde_json::to_string(&Header {
            task: self.task,
            config: &self.config,
            sdr: self.sdr,
            sdr_improvement: self.sdr_improvement,
        })
        .expect("plain header");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain record"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            task: Task,
            config: EvalConfig,
            sdr: Stats,
            sdr_improvement: Stats,
        }
        let bad = |e: serde_json::Error| Error::Config(format!("malformed report: {e}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let h: Header = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Config("empty report".into()))?,
        )
        .map_err(bad)?;
        let records = lines
            .map(|l| serde_json::from_str(l).map_err(bad))
            .collect::<Result<Vec<SdrRecord>>>()?;
        Ok(Self {
            task: h.task,
            config: h.config,
            sdr: h.sdr,
            sdr_improvement: h.sdr_improvement,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_jsonl())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Human-readable table of task reports.
pub fn summary_table(reports: &[ExperimentReport]) -> String {
    let mut s = format!(
        "{:<10} {:>5} {:>16} {:>9} {:>16} {:>9}\n",
        "task", "n", "mean SDR", "med SDR", "mean SDRi", "med SDRi"
    );
    for r in reports {
        s.push_str(&format!(
            "{:<10} {:>5} {:>9.2} ± {:<4.2} {:>9.2} {:>9.2} ± {:<4.2} {:>9.2}\n",
            r.task.name(),
            r.sdr.n,
            r.sdr.mean,
            r.sdr.std,
            r.sdr.median,
            r.sdr_improvement.mean,
            r.sdr_improvement.std,
            r.sdr_improvement.median
        ));
    }
    s
}

/// Evaluation mixture `index`; identical across tasks and settings for a
/// given seed, so comparisons are paired.
pub fn eval_mixture(
    dataset: &Dataset,
    config: &EvalConfig,
    index: usize,
) -> Result<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, index as u64, 0xE7A1]));
    sample_mixture(dataset, config.n_sources, Split::Eval, &mut rng)
}

/// Runs the network on `mixture` with one query and returns the soft mask
/// and the reconstructed waveform.
pub fn separate(
    model: &SeparationModel<f32>,
    dataset: &Dataset,
    mixture: &Waveform,
    spectrogram: &Spectrogram,
    query: &QueryEmbedding,
) -> Result<(Mask, Waveform)> {
    if query.dim() != model.hyper().embed_dim {
        return Err(Error::DimensionMismatch {
            expected: model.hyper().embed_dim,
            actual: query.dim(),
        });
    }
    let trace = model.forward(
        spectrogram.magnitude(),
        spectrogram.frames(),
        spectrogram.bins(),
        &[query.vector()],
    )?;
    let values: Vec<f64> = trace.heads[0].mask.iter().map(|&v| v as f64).collect();
    let mask = Mask::new(
        spectrogram.frames(),
        spectrogram.bins(),
        MaskKind::Soft,
        values,
    )?;
    let masked = apply_mask(spectrogram, &mask)?;
    let estimate = dataset.stft().synthesize(&masked, mixture.len())?;
    Ok((mask, estimate))
}

/// Per-task query construction. Owns the retrieval sets so that repeated
/// evaluations do not rebuild them.
pub struct QueryBuilder<'a> {
    dataset: &'a Dataset,
    config: &'a EvalConfig,
    query_sets: Vec<(Task, QuerySet)>,
}

impl<'a> QueryBuilder<'a> {
    pub fn new(dataset: &'a Dataset, config: &'a EvalConfig) -> Result<Self> {
        config.validate()?;
        let labels = dataset.labels();
        let mut query_sets = Vec::new();
        for task in Task::ALL {
            let set = match task.modality() {
                Modality::Mixed => {
                    let entries = labels
                        .iter()
                        .map(|(id, label)| {
                            Ok(QueryEntry {
                                class_id: *id,
                                label: label.clone(),
                                embedding: Self::compose_anchor(dataset, config, *id)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    QuerySet::new(dataset.space().dim(), entries)?
                }
                m => build_query_set(dataset.space(), &labels, m)?,
            };
            query_sets.push((task, set));
        }
        Ok(Self {
            dataset,
            config,
            query_sets,
        })
    }

    fn compose_anchor(
        dataset: &Dataset,
        config: &EvalConfig,
        class: u32,
    ) -> Result<QueryEmbedding> {
        let s = dataset.space();
        let w = config.composed_weights;
        compose_queries(&[
            (s.anchor(class, Modality::Audio)?, w[0]),
            (s.anchor(class, Modality::Image)?, w[1]),
            (s.anchor(class, Modality::Text)?, w[2]),
        ])
    }

    pub fn query_set(&self, task: Task) -> &QuerySet {
        &self
            .query_sets
            .iter()
            .find(|(t, _)| *t == task)
            .expect("all tasks")
            .1
    }

    /// The raw query of `task` for the target source of an evaluation
    /// mixture. `rng` drives audio-instance choice and description noise.
    pub fn raw_query<R: Rng + ?Sized>(
        &self,
        task: Task,
        class: u32,
        eval_index: u64,
        rng: &mut R,
    ) -> Result<QueryEmbedding> {
        let manifest = self.dataset.manifest();
        let base = self.dataset.space();
        let noisy;
        let space = match self.config.query_sigma {
            Some(s) => {
                noisy = base.with_sigma_inst(s);
                &noisy
            }
            None => base,
        };
        let inst = manifest.instance(Split::Eval, eval_index);
        let noisy_single = |m: Modality| -> Result<QueryEmbedding> {
            match self.config.query_sigma {
                Some(_) => space.embed(class, m, inst),
                None => space.anchor(class, m),
            }
        };
        let text = |rng: &mut R| -> Result<QueryEmbedding> {
            if let Some(m) = self.config.ood_magnitude {
                return Ok(simulate_ood_description(class, base, m, rng)?.embedding);
            }
            noisy_single(Modality::Text)
        };
        let audio = |rng: &mut R| -> Result<QueryEmbedding> {
            let train = manifest.splits.train;
            let samples = (0..self.config.audio_queries)
                .map(|_| {
                    let j = rng.gen_range(0..train.count);
                    space.embed(class, Modality::Audio, manifest.instance(Split::Train, j))
                })
                .collect::<Result<Vec<_>>>()?;
            average_audio_queries(&samples)
        };
        match task {
            Task::Tqss => text(rng),
            Task::Iqss => noisy_single(Modality::Image),
            Task::Aqss => audio(rng),
            Task::Composed => {
                // noiseless composition mixes the three anchors
                let a = match self.config.query_sigma {
                    Some(_) => audio(rng)?,
                    None => space.anchor(class, Modality::Audio)?,
                };
                let w = self.config.composed_weights;
                compose_queries(&[
                    (a, w[0]),
                    (noisy_single(Modality::Image)?, w[1]),
                    (text(rng)?, w[2]),
                ])
            }
        }
    }

    /// Same-modality anchor of the interfering class.
    pub fn negative_anchor(&self, task: Task, class: u32) -> Result<QueryEmbedding> {
        match task.modality() {
            Modality::Mixed => Self::compose_anchor(self.dataset, self.config, class),
            m => self.dataset.space().anchor(class, m),
        }
    }

    /// Raw query, then the negative query if `alpha > 0`, then retrieval if
    /// enabled. Returns the final query and the retrieved class.
    pub fn build<R: Rng + ?Sized>(
        &self,
        task: Task,
        target: u32,
        interferer: u32,
        eval_index: u64,
        rng: &mut R,
    ) -> Result<(QueryEmbedding, Option<u32>)> {
        let mut q = self.raw_query(task, target, eval_index, rng)?;
        if self.config.alpha > 0.0 {
            let qn = self.negative_anchor(task, interferer)?;
            q = apply_negative(&q, &qn, self.config.alpha, self.config.negative_method)?;
        }
        if self.config.query_aug {
            let hit = query_aug(&q, self.query_set(task))?;
            let class = hit.class_id;
            return Ok((hit.embedding.clone(), Some(class)));
        }
        Ok((q, None))
    }
}

/// Evaluates `task` on `config.n_eval` held-out mixtures. Source 0 of each
/// mixture is the target and source 1 the interferer.
pub fn run_task(
    model: &SeparationModel<f32>,
    dataset: &Dataset,
    task: Task,
    config: &EvalConfig,
) -> Result<ExperimentReport> {
    if model.hyper().embed_dim != dataset.space().dim() {
        return Err(Error::DimensionMismatch {
            expected: dataset.space().dim(),
            actual: model.hyper().embed_dim,
        });
    }
    let builder = QueryBuilder::new(dataset, config)?;
    let mut records = Vec::with_capacity(config.n_eval);
    for i in 0..config.n_eval {
        let ex = eval_mixture(dataset, config, i)?;
        let (target, interferer) = (ex.classes[0], ex.classes[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, i as u64, 0x0E57]));
        let eval_index = rng.gen_range(0..dataset.manifest().splits.eval.count);
        let (q, retrieved) = builder.build(task, target, interferer, eval_index, &mut rng)?;
        let (_, estimate) = separate(model, dataset, &ex.mixture, &ex.spectrogram, &q)?;
        let reference = &ex.sources[0];
        records.push(SdrRecord {
            sample_id: i,
            task,
            target_class: target,
            interferer_class: interferer,
            sdr: sdr(reference, &estimate)?,
            sdr_improvement: sdr_improvement(reference, &estimate, &ex.mixture)?,
            alpha: config.alpha,
            negative_method: config.negative_method,
            query_aug: config.query_aug,
            retrieved_class: retrieved,
        });
    }
    ExperimentReport::from_records(task, config.clone(), records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub method: NegativeMethod,
    pub sdr: Stats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub task: Task,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Max minus min mean SDR over the grid for one method.
    pub fn range(&self, method: NegativeMethod) -> Option<f64> {
        let means: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.sdr.mean)
            .collect();
        if means.is_empty() {
            return None;
        }
        let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
        Some(max - min)
    }

    pub fn mean_at(&self, alpha: f64, method: NegativeMethod) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.alpha == alpha && r.method == method)
            .map(|r| r.sdr.mean)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<8} {:<13} {:>16} {:>9}\n",
            "alpha", "method", "mean SDR", "med SDR"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<8} {:<13} {:>9.2} ± {:<4.2} {:>9.2}\n",
                r.alpha,
                r.method.to_string(),
                r.sdr.mean,
                r.sdr.std,
                r.sdr.median
            ));
        }
        s
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| {
                let mut line = serde_json::to_string(&serde_json::json!({
                    "task": self.task,
                    "alpha": r.alpha,
                    "method": r.method,
                    "sdr": r.sdr,
                }))
                .expect("plain row");
                line.push('\n');
                line
            })
            .collect()
    }
}

/// Mean SDR as a function of the negative-query weight for each method.
pub fn nq_sweep(
    model: &SeparationModel<f32>,
    dataset: &Dataset,
    task: Task,
    alphas: &[f64],
    methods: &[NegativeMethod],
    base: &EvalConfig,
) -> Result<SweepTable> {
    if alphas.is_empty() || methods.is_empty() {
        return Err(Error::invalid("sweep grid must not be empty"));
    }
    let mut rows = Vec::with_capacity(alphas.len() * methods.len());
    for &method in methods {
        for &alpha in alphas {
            let config = EvalConfig {
                alpha,
                negative_method: method,
                ..base.clone()
            };
            let report = run_task(model, dataset, task, &config)?;
            rows.push(SweepRow {
                alpha,
                method,
                sdr: report.sdr,
            });
        }
    }
    Ok(SweepTable { task, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugRow {
    pub name: String,
    pub query_aug: bool,
    pub ood: bool,
    pub sdr: Stats,
    pub retrieval_accuracy: Option<f64>,
}

/// In-domain and out-of-domain text queries, each with and without
/// retrieval. Rows: in-domain raw, in-domain + retrieval, OOD raw,
/// OOD + retrieval.
pub fn query_aug_comparison(
    model: &SeparationModel<f32>,
    dataset: &Dataset,
    ood_magnitude: f64,
    base: &EvalConfig,
) -> Result<Vec<AugRow>> {
    let mut rows = Vec::with_capacity(4);
    for (name, ood, aug) in [
        ("in-domain", false, false),
        ("in-domain + query-aug", false, true),
        ("out-of-domain", true, false),
        ("out-of-domain + query-aug", true, true),
    ] {
        let config = EvalConfig {
            query_aug: aug,
            ood_magnitude: ood.then_some(ood_magnitude),
            query_sigma: None,
            ..base.clone()
        };
        let report = run_task(model, dataset, Task::Tqss, &config)?;
        rows.push(AugRow {
            name: name.to_string(),
            query_aug: aug,
            ood,
            sdr: report.sdr,
            retrieval_accuracy: report.retrieval_accuracy(),
        });
    }
    Ok(rows)
}

pub fn aug_table(rows: &[AugRow]) -> String {
    let mut s = format!(
        "{:<27} {:>16} {:>9} {:>10}\n",
        "query", "mean SDR", "med SDR", "retrieval"
    );
    for r in rows {
        let acc = r
            .retrieval_accuracy
            .map(|a| format!("{:.1}%", 100.0 * a))
            .unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<27} {:>9.2} ± {:<4.2} {:>9.2} {:>10}\n",
            r.name, r.sdr.mean, r.sdr.std, r.sdr.median, acc
        ));
    }
    s
}

/// 8-bit grayscale image stored row-major from the top row down.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        if x < self.width && y < self.height {
            self.pixels[y * self.width + x] = v;
        }
    }

    /// Binary portable graymap (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Unsupported("not a binary 8-bit PGM".into());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad());
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| bad())?
                    .to_string(),
            );
        }
        pos += 1;
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(bad());
        }
        let width: usize = fields[1].parse().map_err(|_| bad())?;
        let height: usize = fields[2].parse().map_err(|_| bad())?;
        let pixels = bytes.get(pos..).ok_or_else(bad)?.to_vec();
        if pixels.len() != width * height {
            return Err(bad());
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Image of a `frames x bins` grid with time to the right and frequency
/// upward (DC in the bottom row).
fn grid_image(frames: usize, bins: usize, value: impl Fn(usize, usize) -> u8) -> GrayImage {
    let mut img = GrayImage::new(frames, bins);
    for t in 0..frames {
        for f in 0..bins {
            img.set(t, bins - 1 - f, value(t, f));
        }
    }
    img
}

/// Log-magnitude image spanning 60 dB below the peak. An all-zero
/// spectrogram renders black.
pub fn spectrogram_image(s: &Spectrogram) -> Result<GrayImage> {
    if s.magnitude().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spectrogram magnitude"));
    }
    let peak = s.magnitude().iter().cloned().fold(0.0f64, f64::max);
    Ok(grid_image(s.frames(), s.bins(), |t, f| {
        if peak == 0.0 {
            return 0;
        }
        let db = 20.0 * (s.magnitude_at(t, f) / peak).max(1e-12).log10();
        (((db + 60.0) / 60.0).clamp(0.0, 1.0) * 255.0).round() as u8
    }))
}

pub fn render_spectrogram(s: &Spectrogram, path: impl AsRef<Path>) -> Result<()> {
    spectrogram_image(s)?.save(path)
}

/// Mask image, 0 black and 1 white.
pub fn mask_image(m: &Mask) -> GrayImage {
    grid_image(m.frames(), m.bins(), |t, f| {
        (m.at(t, f).clamp(0.0, 1.0) * 255.0).round() as u8
    })
}

pub fn render_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    mask_image(m).save(path)
}

/// Line plot of mean SDR against alpha, one line per method: proportional
/// solid white, naive dashed gray.
pub fn sweep_plot(table: &SweepTable) -> GrayImage {
    let (w, h, margin) = (320usize, 200usize, 20usize);
    let mut img = GrayImage::new(w, h);
    for x in margin..w - margin {
        img.set(x, h - margin, 128);
    }
    for y in margin..=h - margin {
        img.set(margin, y, 128);
    }
    let alphas: Vec<f64> = table.rows.iter().map(|r| r.alpha).collect();
    let means: Vec<f64> = table.rows.iter().map(|r| r.sdr.mean).collect();
    if means.is_empty() {
        return img;
    }
    let (amin, amax) = bounds(&alphas);
    let (smin, smax) = bounds(&means);
    let px = |a: f64| margin as f64 + (a - amin) / (amax - amin) * (w - 2 * margin) as f64;
    let py = |s: f64| (h - margin) as f64 - (s - smin) / (smax - smin) * (h - 2 * margin) as f64;
    for (method, shade, dashed) in [
        (NegativeMethod::Proportional, 255u8, false),
        (NegativeMethod::Naive, 160u8, true),
    ] {
        let mut pts: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| (px(r.alpha), py(r.sdr.mean)))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for seg in pts.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for i in 0..=steps {
                if dashed && (i / 4) % 2 == 1 {
                    continue;
                }
                let t = i as f64 / steps as f64;
                let x = a.0 + t * (b.0 - a.0);
                let y = a.1 + t * (b.1 - a.1);
                img.set(x.round() as usize, y.round() as usize, shade);
            }
        }
        for &(x, y) in &pts {
            for dx in 0..5 {
                for dy in 0..5 {
                    img.set(
                        (x.round() as usize + dx).saturating_sub(2),
                        (y.round() as usize + dy).saturating_sub(2),
                        shade,
                    );
                }
            }
        }
    }
    img
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-9 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}
