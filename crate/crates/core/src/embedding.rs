//! Query embeddings and the algebra performed on them: modality mixing,
//! negative queries, and nearest-class retrieval against a stored query set.
//!
//! Embeddings are kept in `f64` so that the algebra is exact enough to test
//! identities at 1e-12; the separation network converts to `f32` on input.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Image,
    Text,
    Mixed,
}

impl Modality {
    pub const SINGLE: [Modality; 3] = [Modality::Audio, Modality::Image, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Mixed => "mixed",
        }
    }

    fn index(self) -> usize {
        match self {
            Modality::Audio => 0,
            Modality::Image => 1,
            Modality::Text => 2,
            Modality::Mixed => 3,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            "mixed" => Ok(Modality::Mixed),
            other => Err(Error::Unknown {
                kind: "modality",
                name: other.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A D-dimensional query feature tagged with the modality it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    vector: Vec<f64>,
    modality: Modality,
}

impl QueryEmbedding {
    pub fn new(vector: Vec<f64>, modality: Modality) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::invalid("embedding must have at least one dimension"));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query embedding"));
        }
        Ok(Self { vector, modality })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    /// Unit-norm copy; a zero vector is returned unchanged.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            return self.clone();
        }
        Self {
            vector: self.vector.iter().map(|v| v / n).collect(),
            modality: self.modality,
        }
    }

    /// Components rounded to `f32`, the precision the network consumes.
    pub fn to_f32(&self) -> Vec<f32> {
        self.vector.iter().map(|&v| v as f32).collect()
    }

    fn check_dim(&self, other: &QueryEmbedding) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }
}

/// Per-modality mixing weights, each in `[0, 1]` with a positive sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupWeights {
    pub audio: f64,
    pub image: f64,
    pub text: f64,
}

pub const MIN_WEIGHT_SUM: f64 = 1e-6;

impl MixupWeights {
    pub fn new(audio: f64, image: f64, text: f64) -> Result<Self> {
        for w in [audio, image, text] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::invalid(format!("mixup weight {w} outside [0, 1]")));
            }
        }
        if audio + image + text < MIN_WEIGHT_SUM {
            return Err(Error::invalid("mixup weights sum to (nearly) zero"));
        }
        Ok(Self { audio, image, text })
    }

    pub fn equal() -> Self {
        Self {
            audio: 1.0,
            image: 1.0,
            text: 1.0,
        }
    }

    /// All weight on one modality.
    pub fn only(m: Modality) -> Result<Self> {
        match m {
            Modality::Audio => Self::new(1.0, 0.0, 0.0),
            Modality::Image => Self::new(0.0, 1.0, 0.0),
            Modality::Text => Self::new(0.0, 0.0, 1.0),
            Modality::Mixed => Err(Error::invalid("cannot select the mixed modality")),
        }
    }

    pub fn sum(&self) -> f64 {
        self.audio + self.image + self.text
    }

    /// Weights divided by their sum, in (audio, image, text) order.
    pub fn normalized(&self) -> [f64; 3] {
        let s = self.sum();
        [self.audio / s, self.image / s, self.text / s]
    }
}

/// Three independent uniform draws on `[0, 1]`, redrawn while their sum is
/// below [`MIN_WEIGHT_SUM`].
pub fn sample_mixup_weights<R: Rng + ?Sized>(rng: &mut R) -> MixupWeights {
    loop {
        let (a, v, t) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
        if a + v + t >= MIN_WEIGHT_SUM {
            return MixupWeights {
                audio: a,
                image: v,
                text: t,
            };
        }
    }
}

/// Weighted modality mix `(w_a Q_A + w_v Q_V + w_t Q_T) / (w_a + w_v + w_t)`.
pub fn mix_queries(
    audio: &QueryEmbedding,
    image: &QueryEmbedding,
    text: &QueryEmbedding,
    w: &MixupWeights,
) -> Result<QueryEmbedding> {
    audio.check_dim(image)?;
    audio.check_dim(text)?;
    let w = MixupWeights::new(w.audio, w.image, w.text)?;
    let s = w.sum();
    let vector = audio
        .vector
        .iter()
        .zip(&image.vector)
        .zip(&text.vector)
        .map(|((a, v), t)| (w.audio * a + w.image * v + w.text * t) / s)
        .collect();
    QueryEmbedding::new(vector, Modality::Mixed)
}

/// Weighted mean of any number of queries with non-negative weights.
pub fn compose_queries(parts: &[(QueryEmbedding, f64)]) -> Result<QueryEmbedding> {
    let (first, _) = parts
        .first()
        .ok_or_else(|| Error::invalid("composition needs at least one query"))?;
    let mut total = 0.0;
    let mut acc = vec![0.0; first.dim()];
    for (q, w) in parts {
        first.check_dim(q)?;
        if !(*w >= 0.0) || !w.is_finite() {
            return Err(Error::invalid(format!(
                "composition weight {w} must be >= 0"
            )));
        }
        total += w;
        for (a, v) in acc.iter_mut().zip(&q.vector) {
            *a += w * v;
        }
    }
    if total < MIN_WEIGHT_SUM {
        return Err(Error::invalid("composition weights sum to (nearly) zero"));
    }
    acc.iter_mut().for_each(|a| *a /= total);
    let modality = if parts.iter().all(|(q, _)| q.modality == first.modality) {
        first.modality
    } else {
        Modality::Mixed
    };
    QueryEmbedding::new(acc, modality)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!(
            "negative query weight {alpha} must be >= 0"
        )));
    }
    Ok(())
}

/// Proportionally re-weighted negative query `(1 + alpha) Q - alpha Q_N`.
pub fn negative_query(
    q: &QueryEmbedding,
    qn: &QueryEmbedding,
    alpha: f64,
) -> Result<QueryEmbedding> {
    q.check_dim(qn)?;
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(q.clone());
    }
    let vector = q
        .vector
        .iter()
        .zip(&qn.vector)
        .map(|(a, n)| (1.0 + alpha) * a - alpha * n)
        .collect();
    QueryEmbedding::new(vector, q.modality)
}

/// Plain subtraction `Q - alpha Q_N`.
pub fn naive_negative_query(
    q: &QueryEmbedding,
    qn: &QueryEmbedding,
    alpha: f64,
) -> Result<QueryEmbedding> {
    q.check_dim(qn)?;
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(q.clone());
    }
    let vector = q
        .vector
        .iter()
        .zip(&qn.vector)
        .map(|(a, n)| a - alpha * n)
        .collect();
    QueryEmbedding::new(vector, q.modality)
}

pub fn cosine_similarity(a: &QueryEmbedding, b: &QueryEmbedding) -> Result<f64> {
    a.check_dim(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Componentwise mean of audio-instance embeddings.
pub fn average_audio_queries(samples: &[QueryEmbedding]) -> Result<QueryEmbedding> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("no audio samples to average"))?;
    let mut acc = vec![0.0; first.dim()];
    for s in samples {
        first.check_dim(s)?;
        if s.modality != Modality::Audio {
            return Err(Error::invalid(format!(
                "expected audio embeddings, got {}",
                s.modality
            )));
        }
        for (a, v) in acc.iter_mut().zip(&s.vector) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    QueryEmbedding::new(acc, Modality::Audio)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEntry {
    pub class_id: u32,
    pub label: String,
    pub embedding: QueryEmbedding,
}

/// One stored embedding per class label, used for retrieval.
///
/// Vectors are stored at `f32` precision so that the on-disk form is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    dim: usize,
    entries: Vec<QueryEntry>,
}

const QUERY_SET_MAGIC: &[u8; 8] = b"QSEPQSET";
const QUERY_SET_VERSION: u32 = 1;

impl QuerySet {
    pub fn new(dim: usize, entries: Vec<QueryEntry>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("query set dimension must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut stored = Vec::with_capacity(entries.len());
        for e in entries {
            if !seen.insert(e.class_id) {
                return Err(Error::invalid(format!("duplicate class id {}", e.class_id)));
            }
            if e.embedding.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: e.embedding.dim(),
                });
            }
            let v = e
                .embedding
                .vector
                .iter()
                .map(|&x| x as f32 as f64)
                .collect();
            stored.push(QueryEntry {
                embedding: QueryEmbedding::new(v, e.embedding.modality)?,
                ..e
            });
        }
        Ok(Self {
            dim,
            entries: stored,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[QueryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class_id: u32) -> Option<&QueryEntry> {
        self.entries.iter().find(|e| e.class_id == class_id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(QUERY_SET_MAGIC);
        buf.extend_from_slice(&QUERY_SET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&e.class_id.to_le_bytes());
            buf.push(e.embedding.modality.index() as u8);
            buf.extend_from_slice(&(e.label.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.label.as_bytes());
            for &v in &e.embedding.vector {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| corrupt("truncated header"))?;
        if &magic != QUERY_SET_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let read_u32 = |r: &mut Cursor<&[u8]>| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| corrupt("truncated data"))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = read_u32(&mut r)?;
        if version != QUERY_SET_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: QUERY_SET_VERSION,
            });
        }
        let dim = read_u32(&mut r)? as usize;
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let class_id = read_u32(&mut r)?;
            let mut m = [0u8; 1];
            r.read_exact(&mut m)
                .map_err(|_| corrupt("truncated data"))?;
            let modality = *[
                Modality::Audio,
                Modality::Image,
                Modality::Text,
                Modality::Mixed,
            ]
            .get(m[0] as usize)
            .ok_or_else(|| corrupt("bad modality tag"))?;
            let len = read_u32(&mut r)? as usize;
            if len > bytes.len() {
                return Err(corrupt("label length exceeds file size"));
            }
            let mut label = vec![0u8; len];
            r.read_exact(&mut label)
                .map_err(|_| corrupt("truncated label"))?;
            let label = String::from_utf8(label).map_err(|_| corrupt("label is not UTF-8"))?;
            let mut vector = Vec::with_capacity(dim);
            for _ in 0..dim {
                vector.push(f32::from_bits(read_u32(&mut r)?) as f64);
            }
            let embedding =
                QueryEmbedding::new(vector, modality).map_err(|e| corrupt(&e.to_string()))?;
            entries.push(QueryEntry {
                class_id,
                label,
                embedding,
            });
        }
        if (r.position() as usize) != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Self::new(dim, entries).map_err(|e| corrupt(&e.to_string()))
    }
}

/// Retrieves the stored entry most cosine-similar to `q_des`; ties go to the
/// lowest class id.
pub fn query_aug<'a>(q_des: &QueryEmbedding, qs: &'a QuerySet) -> Result<&'a QueryEntry> {
    if qs.is_empty() {
        return Err(Error::invalid("query set is empty"));
    }
    if q_des.dim() != qs.dim {
        return Err(Error::DimensionMismatch {
            expected: qs.dim,
            actual: q_des.dim(),
        });
    }
    let mut best: Option<(&QueryEntry, f64)> = None;
    for e in &qs.entries {
        let s = cosine_similarity(q_des, &e.embedding)?;
        best = match best {
            Some((b, bs)) if bs > s || (bs == s && b.class_id < e.class_id) => Some((b, bs)),
            _ => Some((e, s)),
        };
    }
    Ok(best.expect("non-empty").0)
}

/// Frozen map from `(class, modality, instance)` to a query embedding.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;

    /// The instance-free embedding of a class in one modality (for text,
    /// the embedding of the class label itself).
    fn anchor(&self, class_id: u32, modality: Modality) -> Result<QueryEmbedding>;

    /// The embedding of one particular instance (a clip, a video, a phrasing).
    fn embed(&self, class_id: u32, modality: Modality, instance: u64) -> Result<QueryEmbedding>;
}

pub fn build_query_set(
    provider: &dyn EmbeddingProvider,
    classes: &[(u32, String)],
    modality: Modality,
) -> Result<QuerySet> {
    let entries = classes
        .iter()
        .map(|(id, label)| {
            Ok(QueryEntry {
                class_id: *id,
                label: label.clone(),
                embedding: provider.anchor(*id, modality)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    QuerySet::new(provider.dim(), entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub dim: usize,
    /// Norm of the per-modality offset added to each class anchor.
    pub modality_gap: f64,
    /// Per-component standard deviation of the isotropic instance noise.
    pub sigma_inst: f64,
    /// L2-normalize every emitted embedding.
    pub normalize: bool,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            modality_gap: 0.5,
            sigma_inst: 0.05,
            normalize: false,
        }
    }
}

/// Synthetic joint embedding space.
///
/// Each class gets a unit anchor direction and each modality a fixed offset
/// of norm `modality_gap`; all of these are mutually orthogonal. Instances
/// add isotropic Gaussian noise with per-component standard deviation
/// `sigma_inst`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpace {
    config: SpaceConfig,
    seed: u64,
    class_anchors: Vec<Vec<f64>>,
    modality_offsets: [Vec<f64>; 3],
}

pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 folding
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

impl SyntheticSpace {
    pub fn new(n_classes: usize, seed: u64, config: SpaceConfig) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::invalid("embedding space needs at least one class"));
        }
        if n_classes + 3 > config.dim {
            return Err(Error::invalid(format!(
                "dimension {} too small for {n_classes} orthogonal classes plus 3 modality offsets",
                config.dim
            )));
        }
        if !(config.modality_gap >= 0.0) || !(config.sigma_inst >= 0.0) {
            return Err(Error::invalid("modality_gap and sigma_inst must be >= 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xA5C0]));
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n_classes + 3);
        while basis.len() < n_classes + 3 {
            let mut v: Vec<f64> = (0..config.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                basis.push(v);
            }
        }
        let offsets: Vec<Vec<f64>> = basis
            .split_off(n_classes)
            .into_iter()
            .map(|v| v.into_iter().map(|x| x * config.modality_gap).collect())
            .collect();
        let modality_offsets = [offsets[0].clone(), offsets[1].clone(), offsets[2].clone()];
        Ok(Self {
            config,
            seed,
            class_anchors: basis,
            modality_offsets,
        })
    }

    pub fn config(&self) -> &SpaceConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_classes(&self) -> usize {
        self.class_anchors.len()
    }

    /// Same geometry with a different instance-noise level.
    pub fn with_sigma_inst(&self, sigma_inst: f64) -> Self {
        let mut out = self.clone();
        out.config.sigma_inst = sigma_inst;
        out
    }

    /// Unit direction identifying the class independent of modality.
    pub fn class_direction(&self, class_id: u32) -> Result<&[f64]> {
        self.class_anchors
            .get(class_id as usize)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Unknown {
                kind: "class",
                name: class_id.to_string(),
            })
    }

    fn finish(&self, v: Vec<f64>, modality: Modality) -> Result<QueryEmbedding> {
        let q = QueryEmbedding::new(v, modality)?;
        Ok(if self.config.normalize {
            q.normalized()
        } else {
            q
        })
    }

    fn raw_anchor(&self, class_id: u32, modality: Modality) -> Result<Vec<f64>> {
        let dir = self.class_direction(class_id)?;
        if modality == Modality::Mixed {
            return Err(Error::invalid("providers embed single modalities only"));
        }
        let off = &self.modality_offsets[modality.index()];
        Ok(dir.iter().zip(off).map(|(a, o)| a + o).collect())
    }

    /// Isotropic Gaussian vector with per-component standard deviation `std`.
    pub fn noise(&self, std: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.config.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            })
            .collect()
    }
}

impl EmbeddingProvider for SyntheticSpace {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn anchor(&self, class_id: u32, modality: Modality) -> Result<QueryEmbedding> {
        let v = self.raw_anchor(class_id, modality)?;
        self.finish(v, modality)
    }

    fn embed(&self, class_id: u32, modality: Modality, instance: u64) -> Result<QueryEmbedding> {
        let mut v = self.raw_anchor(class_id, modality)?;
        let seed = mix_seed(&[
            self.seed,
            class_id as u64,
            modality.index() as u64,
            instance,
        ]);
        for (x, n) in v.iter_mut().zip(self.noise(self.config.sigma_inst, seed)) {
            *x += n;
        }
        self.finish(v, modality)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn q(v: &[f64]) -> QueryEmbedding {
        QueryEmbedding::new(v.to_vec(), Modality::Text).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn mix_equal_weights_is_the_mean() {
        let m = mix_queries(
            &q(&[1.0, 0.0, 0.0]),
            &q(&[0.0, 1.0, 0.0]),
            &q(&[0.0, 0.0, 1.0]),
            &MixupWeights::equal(),
        )
        .unwrap();
        for v in m.vector() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(m.modality(), Modality::Mixed);
    }

    #[test]
    fn mix_single_weight_selects_modality() {
        let a = q(&[0.3, -2.0, 5.5]);
        let m = mix_queries(
            &a,
            &q(&[9.0, 9.0, 9.0]),
            &q(&[-1.0, 4.0, 2.0]),
            &MixupWeights::new(1.0, 0.0, 0.0).unwrap(),
        )
        .unwrap();
        assert_eq!(m.vector(), a.vector());
    }

    #[test]
    fn mix_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (a, v, t) = (
                rand_vec(&mut rng, 16),
                rand_vec(&mut rng, 16),
                rand_vec(&mut rng, 16),
            );
            let w = sample_mixup_weights(&mut rng);
            let m = mix_queries(&q(&a), &q(&v), &q(&t), &w).unwrap();
            for i in 0..16 {
                let mut num = 0.0;
                num += w.audio * a[i];
                num += w.image * v[i];
                num += w.text * t[i];
                let expect = num / (w.audio + w.image + w.text);
                assert!((m.vector()[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mix_errors() {
        let w = MixupWeights::equal();
        assert!(mix_queries(&q(&[1.0]), &q(&[1.0, 2.0]), &q(&[1.0]), &w).is_err());
        let zero = MixupWeights {
            audio: 0.0,
            image: 0.0,
            text: 0.0,
        };
        assert!(mix_queries(&q(&[1.0]), &q(&[1.0]), &q(&[1.0]), &zero).is_err());
        assert!(MixupWeights::new(1.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn mixup_weight_sampling() {
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(sample_mixup_weights(&mut a), sample_mixup_weights(&mut b));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let w = sample_mixup_weights(&mut rng);
            assert!(w.sum() >= MIN_WEIGHT_SUM);
            for (s, x) in sums.iter_mut().zip([w.audio, w.image, w.text]) {
                assert!((0.0..=1.0).contains(&x));
                *s += x;
            }
        }
        for s in sums {
            assert!((s / n as f64 - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn negative_query_examples() {
        let base = q(&[0.1, -0.7]);
        let n = q(&[5.0, 3.0]);
        let same = negative_query(&base, &n, 0.0).unwrap();
        assert_eq!(same.vector(), base.vector());
        let r = negative_query(&q(&[1.0, 0.0]), &q(&[0.0, 1.0]), 0.5).unwrap();
        assert_eq!(r.vector(), &[1.5, -0.5]);
        assert!(negative_query(&base, &n, -0.1).is_err());
        assert!(negative_query(&base, &q(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn naive_negative_query_examples() {
        let r = naive_negative_query(&q(&[1.0, 0.0]), &q(&[0.0, 1.0]), 1.0).unwrap();
        assert_eq!(r.vector(), &[1.0, -1.0]);
        let base = q(&[0.2, 0.4]);
        assert_eq!(
            naive_negative_query(&base, &q(&[1.0, 1.0]), 0.0).unwrap(),
            base
        );
        assert!(naive_negative_query(&base, &q(&[1.0, 1.0]), -1.0).is_err());
    }

    #[test]
    fn cosine_examples() {
        let a = q(&[0.3, 0.4]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(
            cosine_similarity(&q(&[1.0, 0.0]), &q(&[0.0, 1.0])).unwrap(),
            0.0
        );
        assert!(cosine_similarity(&a, &q(&[0.0, 0.0])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y) = (rand_vec(&mut rng, 32), rand_vec(&mut rng, 32));
        let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
        for i in 0..32 {
            dot += x[i] * y[i];
            nx += x[i] * x[i];
            ny += y[i] * y[i];
        }
        let expect = dot / (nx.sqrt() * ny.sqrt());
        assert!((cosine_similarity(&q(&x), &q(&y)).unwrap() - expect).abs() < 1e-12);
    }

    fn set_of(vectors: &[(u32, Vec<f64>)]) -> QuerySet {
        QuerySet::new(
            vectors[0].1.len(),
            vectors
                .iter()
                .map(|(id, v)| QueryEntry {
                    class_id: *id,
                    label: format!("class{id}"),
                    embedding: q(v),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn query_aug_examples() {
        let qs = set_of(&[(0, vec![0.9, 0.1]), (1, vec![0.0, 1.0])]);
        assert_eq!(query_aug(&q(&[1.0, 0.0]), &qs).unwrap().class_id, 0);
        assert_eq!(query_aug(&q(&[0.0, 1.0]), &qs).unwrap().class_id, 1);
        // tie between two identical directions goes to the lower id
        let tied = set_of(&[(5, vec![1.0, 1.0]), (2, vec![2.0, 2.0])]);
        assert_eq!(query_aug(&q(&[1.0, 1.0]), &tied).unwrap().class_id, 2);
        assert!(query_aug(&q(&[1.0, 0.0, 0.0]), &qs).is_err());
        let empty = QuerySet::new(2, vec![]).unwrap();
        assert!(query_aug(&q(&[1.0, 0.0]), &empty).is_err());
    }

    #[test]
    fn query_aug_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vectors: Vec<(u32, Vec<f64>)> = (0..50).map(|i| (i, rand_vec(&mut rng, 24))).collect();
        let qs = set_of(&vectors);
        for _ in 0..100 {
            let d = rand_vec(&mut rng, 24);
            let mut best = (0u32, f64::MIN);
            for e in qs.entries() {
                let v = e.embedding.vector();
                let dot: f64 = d.iter().zip(v).map(|(a, b)| a * b).sum();
                let c = dot
                    / (d.iter().map(|x| x * x).sum::<f64>().sqrt()
                        * v.iter().map(|x| x * x).sum::<f64>().sqrt());
                if c > best.1 {
                    best = (e.class_id, c);
                }
            }
            assert_eq!(query_aug(&q(&d), &qs).unwrap().class_id, best.0);
        }
    }

    #[test]
    fn average_examples() {
        let a = QueryEmbedding::new(vec![0.5, -1.0], Modality::Audio).unwrap();
        assert_eq!(average_audio_queries(std::slice::from_ref(&a)).unwrap(), a);
        let neg = QueryEmbedding::new(vec![-0.5, 1.0], Modality::Audio).unwrap();
        assert_eq!(
            average_audio_queries(&[a.clone(), neg]).unwrap().vector(),
            &[0.0, 0.0]
        );
        assert!(average_audio_queries(&[]).is_err());
        assert!(average_audio_queries(&[a.clone(), q(&[1.0, 1.0])]).is_err());
        let short = QueryEmbedding::new(vec![1.0], Modality::Audio).unwrap();
        assert!(average_audio_queries(&[a, short]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 10)).collect();
        let qs: Vec<QueryEmbedding> = samples
            .iter()
            .map(|v| QueryEmbedding::new(v.clone(), Modality::Audio).unwrap())
            .collect();
        let m = average_audio_queries(&qs).unwrap();
        for i in 0..10 {
            let mut s = 0.0;
            for v in &samples {
                s += v[i];
            }
            assert!((m.vector()[i] - s / 5.0).abs() < 1e-12);
        }
    }

    fn catalog(n: u32) -> Vec<(u32, String)> {
        (0..n).map(|i| (i, format!("class_{i}"))).collect()
    }

    #[test]
    fn query_set_build_and_round_trip() {
        let space = SyntheticSpace::new(8, 11, SpaceConfig::default()).unwrap();
        let qs = build_query_set(&space, &catalog(8), Modality::Text).unwrap();
        assert_eq!(qs.len(), 8);
        let again = build_query_set(&space, &catalog(8), Modality::Text).unwrap();
        assert_eq!(qs, again);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.qset");
        qs.save(&path).unwrap();
        assert_eq!(QuerySet::load(&path).unwrap(), qs);

        let dup = vec![(1, "a".to_string()), (1, "b".to_string())];
        assert!(build_query_set(&space, &dup, Modality::Text).is_err());
    }

    #[test]
    fn query_set_rejects_corruption() {
        let space = SyntheticSpace::new(4, 1, SpaceConfig::default()).unwrap();
        let qs = build_query_set(&space, &catalog(4), Modality::Image).unwrap();
        let bytes = qs.to_bytes();
        let p = Path::new("mem");
        assert!(QuerySet::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            QuerySet::from_bytes(&bad, p),
            Err(Error::Corrupt { .. })
        ));
        let mut ver = bytes.clone();
        ver[8] = 9;
        assert!(matches!(
            QuerySet::from_bytes(&ver, p),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(QuerySet::from_bytes(&extra, p).is_err());
    }

    #[test]
    fn synthetic_space_geometry() {
        let cfg = SpaceConfig::default();
        let space = SyntheticSpace::new(8, 5, cfg).unwrap();
        for c in 0..8u32 {
            let d = space.class_direction(c).unwrap();
            assert!((d.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            for c2 in 0..c {
                let e = space.class_direction(c2).unwrap();
                assert!(d.iter().zip(e).map(|(a, b)| a * b).sum::<f64>().abs() < 1e-12);
            }
            let t = space.anchor(c, Modality::Text).unwrap();
            let i = space.anchor(c, Modality::Image).unwrap();
            let gap: f64 = t
                .vector()
                .iter()
                .zip(i.vector())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((gap - cfg.modality_gap * 2f64.sqrt()).abs() < 1e-9);
        }
        // frozen: same inputs, same vectors; different instances differ
        let a = space.embed(3, Modality::Audio, 17).unwrap();
        assert_eq!(a, space.embed(3, Modality::Audio, 17).unwrap());
        assert_ne!(a, space.embed(3, Modality::Audio, 18).unwrap());
        assert!(space.embed(8, Modality::Audio, 0).is_err());
        assert!(space.anchor(0, Modality::Mixed).is_err());
        assert!(SyntheticSpace::new(62, 0, cfg).is_err());
    }

    #[test]
    fn instance_noise_has_requested_spread() {
        let space = SyntheticSpace::new(8, 5, SpaceConfig::default()).unwrap();
        let noisy = space.with_sigma_inst(0.2);
        let mut sq = 0.0;
        for i in 0..200 {
            let e = noisy.embed(1, Modality::Image, i).unwrap();
            let a = noisy.anchor(1, Modality::Image).unwrap();
            sq += e
                .vector()
                .iter()
                .zip(a.vector())
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>();
        }
        let std = (sq / (200.0 * 64.0)).sqrt();
        assert!((std - 0.2).abs() < 0.005, "{std}");
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, d)
    }

    proptest! {
        #[test]
        fn mix_is_scale_invariant_in_weights(
            a in vec_strategy(8), v in vec_strategy(8), t in vec_strategy(8),
            wa in 0.01f64..1.0, wv in 0.0f64..1.0, wt in 0.0f64..1.0, c in 0.05f64..1.0,
        ) {
            let w1 = MixupWeights::new(wa, wv, wt).unwrap();
            let w2 = MixupWeights::new(wa * c, wv * c, wt * c).unwrap();
            let m1 = mix_queries(&q(&a), &q(&v), &q(&t), &w1).unwrap();
            let m2 = mix_queries(&q(&a), &q(&v), &q(&t), &w2).unwrap();
            for (x, y) in m1.vector().iter().zip(m2.vector()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn negative_query_is_affine_in_alpha(
            base in vec_strategy(8), n in vec_strategy(8),
            a1 in 0.0f64..3.0, a2 in 0.0f64..3.0,
        ) {
            let q1 = negative_query(&q(&base), &q(&n), a1).unwrap();
            let q2 = negative_query(&q(&base), &q(&n), a2).unwrap();
            let naive = naive_negative_query(&q(&base), &q(&n), a1).unwrap();
            for i in 0..8 {
                let diff = q2.vector()[i] - q1.vector()[i];
                prop_assert!((diff - (a2 - a1) * (base[i] - n[i])).abs() < 1e-12);
                let ident = base[i] + a1 * (base[i] - n[i]);
                prop_assert!((q1.vector()[i] - ident).abs() < 1e-12);
                prop_assert!((q1.vector()[i] - naive.vector()[i] - a1 * base[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn query_aug_ignores_positive_rescaling(
            d in vec_strategy(6), s in 0.01f64..100.0, seed in 0u64..100,
        ) {
            prop_assume!(d.iter().any(|x| x.abs() > 1e-3));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vectors: Vec<(u32, Vec<f64>)> = (0..10).map(|i| (i, rand_vec(&mut rng, 6))).collect();
            let qs = set_of(&vectors);
            let scaled: Vec<f64> = d.iter().map(|x| x * s).collect();
            prop_assert_eq!(
                query_aug(&q(&d), &qs).unwrap().class_id,
                query_aug(&q(&scaled), &qs).unwrap().class_id
            );
        }
    }
}
