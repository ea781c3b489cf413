//! Parametric sound classes, dataset manifests, and simulated out-of-domain
//! text descriptions.
//!
//! Every waveform is a pure function of `(class parameters, instance seed)`,
//! so a manifest alone regenerates the whole dataset bit-exactly.

use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    mix_seed, EmbeddingProvider, Modality, QueryEmbedding, SpaceConfig, SyntheticSpace,
};
use crate::error::{Error, Result};
use crate::spectral::{Stft, StftConfig, Waveform};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Peak amplitude of every generated source.
pub const SOURCE_PEAK: f64 = 0.5;
/// Average-spectrum cosine similarity two classes must stay below.
pub const SEPARABILITY_BOUND: f64 = 0.9;
/// Norm of the paraphrase shift relative to the perturbation magnitude.
pub const PARAPHRASE_SHIFT: f64 = 0.1;
/// Default out-of-domain perturbation magnitude.
pub const DEFAULT_OOD_MAGNITUDE: f64 = 0.3;

const AUDIT_RETRIES: u32 = 16;
const AUDIT_INSTANCES: u64 = 16;
const NOISE_PARTIALS: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    PureTone,
    HarmonicStack,
    Chirp,
    AmNoise,
    FilteredNoise,
    ClickTrain,
    FmTone,
    BeatingPair,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 8] = [
        GeneratorKind::PureTone,
        GeneratorKind::HarmonicStack,
        GeneratorKind::Chirp,
        GeneratorKind::AmNoise,
        GeneratorKind::FilteredNoise,
        GeneratorKind::ClickTrain,
        GeneratorKind::FmTone,
        GeneratorKind::BeatingPair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::PureTone => "pure_tone",
            GeneratorKind::HarmonicStack => "harmonic_stack",
            GeneratorKind::Chirp => "chirp",
            GeneratorKind::AmNoise => "am_noise",
            GeneratorKind::FilteredNoise => "filtered_noise",
            GeneratorKind::ClickTrain => "click_train",
            GeneratorKind::FmTone => "fm_tone",
            GeneratorKind::BeatingPair => "beating_pair",
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A sound class and the parameter ranges its instances are drawn from.
///
/// `freq_range` is the fundamental, carrier, sweep, or noise band in Hz
/// depending on the kind; `mod_range` is the modulation, click, or beat rate
/// in Hz. Kinds without a modulation ignore `mod_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoundClass {
    pub class_id: u32,
    pub label: String,
    pub kind: GeneratorKind,
    pub freq_range: [f64; 2],
    pub mod_range: [f64; 2],
}

impl SoundClass {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] >= 0.0 && r[0] <= r[1];
        if !ok(self.freq_range) || !ok(self.mod_range) {
            return Err(Error::invalid(format!(
                "class {}: ranges must be finite, nonnegative and ordered",
                self.label
            )));
        }
        if self.freq_range[0] <= 0.0 && self.kind != GeneratorKind::ClickTrain {
            return Err(Error::invalid(format!(
                "class {}: frequency must be positive",
                self.label
            )));
        }
        if self.kind == GeneratorKind::ClickTrain && self.mod_range[0] <= 0.0 {
            return Err(Error::invalid(format!(
                "class {}: click rate must be positive",
                self.label
            )));
        }
        if self.label.is_empty()
            || self
                .label
                .contains(|c: char| c.is_whitespace() || c == ':' || c == '+' || c == '@')
        {
            return Err(Error::invalid(format!(
                "class label {:?} is not a plain identifier",
                self.label
            )));
        }
        Ok(())
    }
}

/// The eight shipped classes, laid out to occupy mostly distinct bands below
/// 4 kHz.
pub fn default_classes() -> Vec<SoundClass> {
    use GeneratorKind::*;
    let spec: [(GeneratorKind, [f64; 2], [f64; 2]); 8] = [
        (PureTone, [420.0, 600.0], [0.0, 0.0]),
        (HarmonicStack, [85.0, 105.0], [0.0, 0.0]),
        (Chirp, [650.0, 1300.0], [0.0, 0.0]),
        (AmNoise, [1400.0, 1800.0], [4.0, 8.0]),
        (FilteredNoise, [2500.0, 3100.0], [0.0, 0.0]),
        (ClickTrain, [0.0, 4000.0], [8.0, 15.0]),
        (FmTone, [1950.0, 2250.0], [3.0, 6.0]),
        (BeatingPair, [3300.0, 3500.0], [2.0, 6.0]),
    ];
    spec.iter()
        .enumerate()
        .map(|(i, &(kind, freq_range, mod_range))| SoundClass {
            class_id: i as u32,
            label: kind.name().to_string(),
            kind,
            freq_range,
            mod_range,
        })
        .collect()
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn band_noise(rng: &mut ChaCha8Rng, band: [f64; 2], n: usize, sr: f64) -> Vec<f64> {
    let partials: Vec<(f64, f64)> = (0..NOISE_PARTIALS)
        .map(|_| (draw(rng, band), rng.gen_range(0.0..TAU)))
        .collect();
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            partials.iter().map(|&(f, p)| (TAU * f * t + p).sin()).sum()
        })
        .collect()
}

/// Deterministic instance of `class`, peak-normalized to [`SOURCE_PEAK`].
pub fn generate_source(
    class: &SoundClass,
    seed: u64,
    duration_s: f64,
    sample_rate: u32,
) -> Result<Waveform> {
    class.validate()?;
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::invalid("duration must be positive"));
    }
    if sample_rate == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    if n == 0 {
        return Err(Error::invalid("duration shorter than one sample"));
    }
    let nyquist = sr / 2.0;
    if class.kind != GeneratorKind::ClickTrain && class.freq_range[1] >= nyquist {
        return Err(Error::invalid(format!(
            "class {}: frequency range reaches Nyquist ({nyquist} Hz)",
            class.label
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, class.class_id as u64, 0x50C]));
    let phase: f64 = rng.gen_range(0.0..TAU);
    let time = |i: usize| i as f64 / sr;
    let mut x: Vec<f64> = match class.kind {
        GeneratorKind::PureTone => {
            let f = draw(&mut rng, class.freq_range);
            (0..n).map(|i| (TAU * f * time(i) + phase).sin()).collect()
        }
        GeneratorKind::HarmonicStack => {
            let f0 = draw(&mut rng, class.freq_range);
            let harmonics: Vec<(f64, f64)> = (1..=4)
                .filter(|&h| f0 * h as f64 <= nyquist * 0.95)
                .map(|h| (h as f64, rng.gen_range(0.0..TAU)))
                .collect();
            (0..n)
                .map(|i| {
                    harmonics
                        .iter()
                        .map(|&(h, p)| (TAU * f0 * h * time(i) + p).sin() / h)
                        .sum()
                })
                .collect()
        }
        GeneratorKind::Chirp => {
            let a = draw(&mut rng, class.freq_range);
            let b = draw(&mut rng, class.freq_range);
            let dur = n as f64 / sr;
            // phase of a linear sweep from a to b over the segment
            (0..n)
                .map(|i| {
                    let t = time(i);
                    (TAU * (a * t + (b - a) * t * t / (2.0 * dur)) + phase).sin()
                })
                .collect()
        }
        GeneratorKind::AmNoise => {
            let rate = draw(&mut rng, class.mod_range);
            let noise = band_noise(&mut rng, class.freq_range, n, sr);
            noise
                .into_iter()
                .enumerate()
                .map(|(i, v)| v * (0.55 + 0.45 * (TAU * rate * time(i) + phase).sin()))
                .collect()
        }
        GeneratorKind::FilteredNoise => band_noise(&mut rng, class.freq_range, n, sr),
        GeneratorKind::ClickTrain => {
            let rate = draw(&mut rng, class.mod_range);
            let period = sr / rate;
            let offset = rng.gen_range(0.0..period);
            let decay = sr / 2000.0;
            let mut x = vec![0.0; n];
            let mut onset = offset;
            while (onset as usize) < n {
                let start = onset as usize;
                for (j, v) in x[start..]
                    .iter_mut()
                    .take((decay * 8.0) as usize + 1)
                    .enumerate()
                {
                    let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                    *v += sign * (-(j as f64) / decay).exp();
                }
                onset += period;
            }
            x
        }
        GeneratorKind::FmTone => {
            let fc = draw(&mut rng, class.freq_range);
            let rate = draw(&mut rng, class.mod_range);
            let dev = 0.25 * (class.freq_range[1] - class.freq_range[0]).max(40.0);
            (0..n)
                .map(|i| {
                    let t = time(i);
                    (TAU * fc * t + dev / rate * (TAU * rate * t).sin() + phase).sin()
                })
                .collect()
        }
        GeneratorKind::BeatingPair => {
            let f = draw(&mut rng, class.freq_range);
            let beat = draw(&mut rng, class.mod_range);
            let p2: f64 = rng.gen_range(0.0..TAU);
            (0..n)
                .map(|i| {
                    let t = time(i);
                    (TAU * f * t + phase).sin() + (TAU * (f + beat) * t + p2).sin()
                })
                .collect()
        }
    };
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= SOURCE_PEAK / peak);
    }
    Waveform::new(x, sample_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::Unknown {
                kind: "split",
                name: s.to_string(),
            }),
        }
    }
}

/// A half-open range of instance indices `[start, start + count)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRange {
    pub start: u64,
    pub count: u64,
}

impl SeedRange {
    fn end(&self) -> u64 {
        self.start.saturating_add(self.count)
    }

    fn overlaps(&self, other: &SeedRange) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: SeedRange,
    pub eval: SeedRange,
}

impl Default for Splits {
    fn default() -> Self {
        Self {
            train: SeedRange {
                start: 0,
                count: 1_000_000,
            },
            eval: SeedRange {
                start: 1_000_000,
                count: 100_000,
            },
        }
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub sample_rate: u32,
    pub segment_secs: f64,
    pub stft: StftConfig,
    pub embedding_seed: u64,
    pub embedding: SpaceConfig,
    pub splits: Splits,
    pub classes: Vec<SoundClass>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "manifest schema version {} unsupported (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.classes.len() < 2 {
            return Err(Error::invalid("a dataset needs at least two classes"));
        }
        if self.sample_rate == 0 || !(self.segment_secs > 0.0) {
            return Err(Error::invalid(
                "sample_rate and segment_secs must be positive",
            ));
        }
        self.stft.validate()?;
        for (i, c) in self.classes.iter().enumerate() {
            c.validate()?;
            if c.class_id as usize != i {
                return Err(Error::invalid("class ids must be 0..n in order"));
            }
            if self.classes[..i].iter().any(|o| o.label == c.label) {
                return Err(Error::invalid(format!("duplicate class label {}", c.label)));
            }
        }
        if self.splits.train.count == 0 || self.splits.eval.count == 0 {
            return Err(Error::invalid("splits must be non-empty"));
        }
        if self.splits.train.overlaps(&self.splits.eval) {
            return Err(Error::invalid("train and eval instance ranges overlap"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn class_by_label(&self, label: &str) -> Result<&SoundClass> {
        self.classes
            .iter()
            .find(|c| c.label == label)
            .ok_or_else(|| Error::Unknown {
                kind: "class",
                name: label.to_string(),
            })
    }

    pub fn class(&self, class_id: u32) -> Result<&SoundClass> {
        self.classes
            .get(class_id as usize)
            .ok_or_else(|| Error::Unknown {
                kind: "class",
                name: class_id.to_string(),
            })
    }

    /// Generator seed of instance `index` of `split`; distinct splits never
    /// share an instance.
    pub fn instance(&self, split: Split, index: u64) -> u64 {
        let r = match split {
            Split::Train => self.splits.train,
            Split::Eval => self.splits.eval,
        };
        r.start + index % r.count
    }

    pub fn segment_len(&self) -> usize {
        (self.segment_secs * self.sample_rate as f64).round() as usize
    }

    pub fn source(&self, class_id: u32, split: Split, index: u64) -> Result<Waveform> {
        let class = self.class(class_id)?;
        let inst = self.instance(split, index);
        generate_source(
            class,
            mix_seed(&[self.seed, inst]),
            self.segment_secs,
            self.sample_rate,
        )
    }

    pub fn space(&self) -> Result<SyntheticSpace> {
        SyntheticSpace::new(self.classes.len(), self.embedding_seed, self.embedding)
    }
}

fn average_spectrum(
    class: &SoundClass,
    stft: &Stft,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; stft.config().bins()];
    for j in 0..AUDIT_INSTANCES {
        let w = generate_source(class, mix_seed(&[seed, j, 0xA0D1]), 0.5, sample_rate)?;
        let s = stft.analyze(&w)?;
        for f in 0..s.frames() {
            for (b, a) in acc.iter_mut().enumerate() {
                *a += s.magnitude_at(f, b);
            }
        }
    }
    Ok(acc)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Largest pairwise average-spectrum cosine similarity, with the offending
/// pair of labels.
pub fn separability_audit(
    classes: &[SoundClass],
    sample_rate: u32,
    stft: StftConfig,
    seed: u64,
) -> Result<(f64, String, String)> {
    let stft = Stft::new(stft)?;
    let spectra = classes
        .iter()
        .map(|c| average_spectrum(c, &stft, sample_rate, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut worst = (f64::NEG_INFINITY, String::new(), String::new());
    for i in 0..classes.len() {
        for j in i + 1..classes.len() {
            let c = cosine(&spectra[i], &spectra[j]);
            if c > worst.0 {
                worst = (c, classes[i].label.clone(), classes[j].label.clone());
            }
        }
    }
    Ok(worst)
}

/// Extra classes beyond the shipped eight: random kinds in random bands.
fn random_class(class_id: u32, rng: &mut ChaCha8Rng, sample_rate: u32) -> SoundClass {
    let kind = GeneratorKind::ALL[rng.gen_range(0..GeneratorKind::ALL.len())];
    let top = sample_rate as f64 * 0.45;
    let lo = rng.gen_range(80.0..top * 0.85);
    let hi = (lo * rng.gen_range(1.1..1.4)).min(top);
    let (freq_range, mod_range) = match kind {
        GeneratorKind::ClickTrain => ([0.0, top], [rng.gen_range(3.0..20.0), 25.0]),
        GeneratorKind::PureTone | GeneratorKind::Chirp | GeneratorKind::FilteredNoise => {
            ([lo, hi], [0.0, 0.0])
        }
        GeneratorKind::HarmonicStack => ([lo / 4.0, hi / 4.0], [0.0, 0.0]),
        _ => ([lo, hi], [2.0, 8.0]),
    };
    SoundClass {
        class_id,
        label: format!("{}_{}", kind.name(), class_id),
        kind,
        freq_range,
        mod_range,
    }
}

/// Builds a manifest with `n_classes` classes at 8 kHz with the default
/// segment length. The first eight are the shipped classes; further classes
/// are drawn at random and redrawn until the separability audit passes.
pub fn build_catalog(n_classes: usize, seed: u64) -> Result<DatasetManifest> {
    build_catalog_with(n_classes, seed, 8000, 0.5, StftConfig::default())
}

pub fn build_catalog_with(
    n_classes: usize,
    seed: u64,
    sample_rate: u32,
    segment_secs: f64,
    stft: StftConfig,
) -> Result<DatasetManifest> {
    if n_classes < 2 {
        return Err(Error::invalid("a catalog needs at least two classes"));
    }
    let base = default_classes();
    let mut last = None;
    for attempt in 0..AUDIT_RETRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, attempt as u64, 0xCA7]));
        let classes: Vec<SoundClass> = (0..n_classes as u32)
            .map(|i| match base.get(i as usize) {
                Some(c) => c.clone(),
                None => random_class(i, &mut rng, sample_rate),
            })
            .collect();
        let manifest = DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            seed,
            sample_rate,
            segment_secs,
            stft,
            // TOML integers are signed 64-bit
            embedding_seed: mix_seed(&[seed, 0xE5]) >> 1,
            embedding: SpaceConfig::default(),
            splits: Splits::default(),
            classes,
        };
        manifest.validate()?;
        let (worst, a, b) = separability_audit(&manifest.classes, sample_rate, stft, seed)?;
        if worst < SEPARABILITY_BOUND {
            return Ok(manifest);
        }
        last = Some(format!(
            "{a} and {b} have average-spectrum cosine {worst:.3}"
        ));
        if n_classes <= base.len() {
            break;
        }
    }
    Err(Error::AuditFailed(last.unwrap_or_default()))
}

/// The three per-modality query embeddings of one source instance.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTriplet {
    pub audio: QueryEmbedding,
    pub image: QueryEmbedding,
    pub text: QueryEmbedding,
}

impl QueryTriplet {
    pub fn get(&self, m: Modality) -> Result<&QueryEmbedding> {
        match m {
            Modality::Audio => Ok(&self.audio),
            Modality::Image => Ok(&self.image),
            Modality::Text => Ok(&self.text),
            Modality::Mixed => Err(Error::invalid("a triplet holds single modalities only")),
        }
    }
}

/// A manifest together with the embedding space and STFT it implies.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: DatasetManifest,
    space: SyntheticSpace,
    stft: Stft,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let space = manifest.space()?;
        let stft = Stft::new(manifest.stft)?;
        Ok(Self {
            manifest,
            space,
            stft,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn space(&self) -> &SyntheticSpace {
        &self.space
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.classes.len()
    }

    pub fn labels(&self) -> Vec<(u32, String)> {
        self.manifest
            .classes
            .iter()
            .map(|c| (c.class_id, c.label.clone()))
            .collect()
    }

    pub fn source(&self, class_id: u32, split: Split, index: u64) -> Result<Waveform> {
        self.manifest.source(class_id, split, index)
    }

    /// Text queries are class anchors; image and audio queries are the
    /// instance embeddings of this very source.
    pub fn query_triplet(&self, class_id: u32, split: Split, index: u64) -> Result<QueryTriplet> {
        let inst = self.manifest.instance(split, index);
        Ok(QueryTriplet {
            audio: self.space.embed(class_id, Modality::Audio, inst)?,
            image: self.space.embed(class_id, Modality::Image, inst)?,
            text: self.space.anchor(class_id, Modality::Text)?,
        })
    }
}

/// A simulated free-form description of a class.
#[derive(Debug, Clone, PartialEq)]
pub struct OodDescription {
    pub class_id: u32,
    pub embedding: QueryEmbedding,
    pub magnitude: f64,
}

/// Fixed unit direction standing in for systematic paraphrase drift.
pub fn paraphrase_direction(space: &SyntheticSpace) -> Vec<f64> {
    let v = space.noise(1.0, mix_seed(&[space.seed(), 0x9A2A]));
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// The class text anchor plus isotropic noise with per-component standard
/// deviation `magnitude` plus a paraphrase shift of norm
/// `PARAPHRASE_SHIFT * magnitude`.
pub fn simulate_ood_description<R: Rng + ?Sized>(
    class_id: u32,
    space: &SyntheticSpace,
    magnitude: f64,
    rng: &mut R,
) -> Result<OodDescription> {
    if !(magnitude >= 0.0) || !magnitude.is_finite() {
        return Err(Error::invalid(
            "perturbation magnitude must be finite and >= 0",
        ));
    }
    let anchor = space.anchor(class_id, Modality::Text)?;
    let noise_seed: u64 = rng.gen();
    if magnitude == 0.0 {
        return Ok(OodDescription {
            class_id,
            embedding: anchor,
            magnitude,
        });
    }
    let noise = space.noise(magnitude, noise_seed);
    let shift = paraphrase_direction(space);
    let v: Vec<f64> = anchor
        .vector()
        .iter()
        .zip(noise.iter().zip(&shift))
        .map(|(a, (n, s))| a + n + PARAPHRASE_SHIFT * magnitude * s)
        .collect();
    Ok(OodDescription {
        class_id,
        embedding: QueryEmbedding::new(v, Modality::Text)?,
        magnitude,
    })
}
