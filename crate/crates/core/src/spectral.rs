//! STFT analysis/synthesis, magnitude extraction and spectrogram masks.
//!
//! Frames use a periodic Hann window for both analysis and synthesis. The
//! waveform is front-padded by `window_size - hop` zeros so that every input
//! sample lies in the fully overlapped region, which makes weighted
//! overlap-add an exact inverse whenever the squared window satisfies the
//! constant overlap-add condition for the chosen hop.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono sampled audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("waveform is empty"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// An all-zero waveform of `len` samples.
    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Sample-wise sum of equally long waveforms sharing one rate.
    pub fn sum(parts: &[Waveform]) -> Result<Waveform> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("cannot sum an empty list of waveforms"))?;
        let mut out = vec![0.0; first.len()];
        for p in parts {
            if p.sample_rate != first.sample_rate {
                return Err(Error::SampleRateMismatch {
                    expected: first.sample_rate,
                    actual: p.sample_rate,
                });
            }
            if p.len() != first.len() {
                return Err(Error::GeometryMismatch(format!(
                    "waveform lengths {} and {}",
                    first.len(),
                    p.len()
                )));
            }
            for (o, s) in out.iter_mut().zip(&p.samples) {
                *o += s;
            }
        }
        Waveform::new(out, first.sample_rate)
    }
}

/// STFT geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 512,
            hop: 128,
            window_size: 512,
        }
    }
}

impl StftConfig {
    /// 1024-point frames with a 256-sample hop, as used for 16 kHz material.
    pub fn full_scale() -> Self {
        Self {
            fft_size: 1024,
            hop: 256,
            window_size: 1024,
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size == 0 || self.hop == 0 || self.window_size == 0 {
            return Err(Error::invalid("STFT sizes must be positive"));
        }
        if self.window_size > self.fft_size {
            return Err(Error::invalid(format!(
                "window_size {} exceeds fft_size {}",
                self.window_size, self.fft_size
            )));
        }
        if self.hop > self.window_size {
            return Err(Error::invalid(format!(
                "hop {} exceeds window_size {}",
                self.hop, self.window_size
            )));
        }
        Ok(())
    }

    fn front_pad(&self) -> usize {
        self.window_size - self.hop
    }

    /// Number of frames needed to cover `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        (len + self.front_pad()).div_ceil(self.hop)
    }

    /// Longest waveform a spectrogram with `frames` frames can reconstruct.
    pub fn max_len_for(&self, frames: usize) -> usize {
        (frames * self.hop).saturating_sub(self.front_pad())
    }
}

/// Periodic Hann window.
pub fn hann_window(size: usize) -> Vec<f64> {
    (0..size)
        .map(|n| {
            let s = (PI * n as f64 / size as f64).sin();
            s * s
        })
        .collect()
}

/// Complex STFT plus its magnitude, stored frame-major (`frames x bins`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    config: StftConfig,
    sample_rate: u32,
    complex_bins: Vec<Complex64>,
    magnitude: Vec<f64>,
}

impl Spectrogram {
    /// Builds a spectrogram from raw complex bins, deriving the magnitude.
    pub fn from_complex(
        config: StftConfig,
        sample_rate: u32,
        frames: usize,
        complex_bins: Vec<Complex64>,
    ) -> Result<Self> {
        config.validate()?;
        let bins = config.bins();
        if complex_bins.len() != frames * bins {
            return Err(Error::GeometryMismatch(format!(
                "{} complex values for {frames} frames x {bins} bins",
                complex_bins.len()
            )));
        }
        if complex_bins
            .iter()
            .any(|c| !c.re.is_finite() || !c.im.is_finite())
        {
            return Err(Error::NonFinite("spectrogram"));
        }
        let magnitude = complex_bins.iter().map(|c| c.norm()).collect();
        Ok(Self {
            frames,
            bins,
            config,
            sample_rate,
            complex_bins,
            magnitude,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn complex_bins(&self) -> &[Complex64] {
        &self.complex_bins
    }

    /// Magnitude grid X, frame-major.
    pub fn magnitude(&self) -> &[f64] {
        &self.magnitude
    }

    pub fn at(&self, frame: usize, bin: usize) -> Complex64 {
        self.complex_bins[frame * self.bins + bin]
    }

    pub fn magnitude_at(&self, frame: usize, bin: usize) -> f64 {
        self.magnitude[frame * self.bins + bin]
    }

    pub fn same_geometry(&self, other: &Spectrogram) -> bool {
        self.frames == other.frames && self.bins == other.bins && self.config == other.config
    }

    fn check_geometry(&self, frames: usize, bins: usize) -> Result<()> {
        if self.frames != frames || self.bins != bins {
            return Err(Error::GeometryMismatch(format!(
                "spectrogram is {}x{}, other operand is {frames}x{bins}",
                self.frames, self.bins
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Binary,
    Soft,
}

/// A `frames x bins` mask over a spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    frames: usize,
    bins: usize,
    kind: MaskKind,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(frames: usize, bins: usize, kind: MaskKind, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * bins {
            return Err(Error::GeometryMismatch(format!(
                "{} mask values for {frames}x{bins}",
                values.len()
            )));
        }
        let ok = match kind {
            MaskKind::Binary => values.iter().all(|&v| v == 0.0 || v == 1.0),
            MaskKind::Soft => values.iter().all(|&v| (0.0..=1.0).contains(&v)),
        };
        if !ok {
            return Err(Error::invalid(format!(
                "mask values out of range for {kind:?} mask"
            )));
        }
        Ok(Self {
            frames,
            bins,
            kind,
            values,
        })
    }

    pub fn filled(frames: usize, bins: usize, value: f64) -> Result<Self> {
        let kind = if value == 0.0 || value == 1.0 {
            MaskKind::Binary
        } else {
            MaskKind::Soft
        };
        Self::new(frames, bins, kind, vec![value; frames * bins])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.values[frame * self.bins + bin]
    }

    /// Multiplies every value by `factor` in `[0, 1]`, yielding a soft mask.
    pub fn scaled(&self, factor: f64) -> Result<Mask> {
        if !(0.0..=1.0).contains(&factor) {
            return Err(Error::invalid("mask scale must lie in [0, 1]"));
        }
        Mask::new(
            self.frames,
            self.bins,
            MaskKind::Soft,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }
}

/// Reusable FFT plans for one [`StftConfig`].
#[derive(Clone)]
pub struct Stft {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Stft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stft")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Stft {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            config,
            window: hann_window(config.window_size),
            forward: planner.plan_fft_forward(config.fft_size),
            inverse: planner.plan_fft_inverse(config.fft_size),
        })
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn analyze(&self, w: &Waveform) -> Result<Spectrogram> {
        let StftConfig {
            fft_size,
            hop,
            window_size,
        } = self.config;
        let bins = self.config.bins();
        let frames = self.config.frames_for(w.len());
        let pad = self.config.front_pad();
        let samples = w.samples();

        let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
        let mut out = Vec::with_capacity(frames * bins);
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            let start = (t * hop) as isize - pad as isize;
            for (n, win) in self.window.iter().enumerate().take(window_size) {
                let idx = start + n as isize;
                if idx >= 0 && (idx as usize) < samples.len() {
                    buf[n].re = samples[idx as usize] * win;
                }
            }
            self.forward.process(&mut buf);
            out.extend_from_slice(&buf[..bins]);
        }
        Spectrogram::from_complex(self.config, w.sample_rate(), frames, out)
    }

    /// Constant value of the overlapped squared window, or a COLA error.
    fn overlap_gain(&self) -> Result<f64> {
        let StftConfig {
            hop, window_size, ..
        } = self.config;
        let sq: Vec<f64> = self.window.iter().map(|w| w * w).collect();
        let sums: Vec<f64> = (0..hop)
            .map(|n| sq.iter().skip(n).step_by(hop).sum())
            .collect();
        let max = sums.iter().cloned().fold(f64::MIN, f64::max);
        let min = sums.iter().cloned().fold(f64::MAX, f64::min);
        if max <= 0.0 || (max - min) > 1e-9 * max {
            return Err(Error::ColaViolation { window_size, hop });
        }
        Ok(sums.iter().sum::<f64>() / hop as f64)
    }

    pub fn synthesize(&self, s: &Spectrogram, out_len: usize) -> Result<Waveform> {
        if s.config != self.config {
            return Err(Error::GeometryMismatch(format!(
                "spectrogram config {:?} differs from synthesis config {:?}",
                s.config, self.config
            )));
        }
        let gain = self.overlap_gain()?;
        let StftConfig {
            fft_size,
            hop,
            window_size,
        } = self.config;
        let bins = self.config.bins();
        if out_len == 0 {
            return Err(Error::invalid("output length must be positive"));
        }
        if out_len > self.config.max_len_for(s.frames) {
            return Err(Error::GeometryMismatch(format!(
                "{} frames cannot cover {out_len} samples",
                s.frames
            )));
        }
        let pad = self.config.front_pad();
        let mut out = vec![0.0; out_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); fft_size];
        let scale = 1.0 / fft_size as f64;
        for t in 0..s.frames {
            let row = &s.complex_bins[t * bins..(t + 1) * bins];
            buf[..bins].copy_from_slice(row);
            for k in bins..fft_size {
                buf[k] = row[fft_size - k].conj();
            }
            // DC and Nyquist of a real signal carry no imaginary part.
            buf[0].im = 0.0;
            if fft_size % 2 == 0 {
                buf[fft_size / 2].im = 0.0;
            }
            self.inverse.process(&mut buf);
            let start = (t * hop) as isize - pad as isize;
            for (n, win) in self.window.iter().enumerate().take(window_size) {
                let idx = start + n as isize;
                if idx >= 0 && (idx as usize) < out_len {
                    out[idx as usize] += buf[n].re * scale * win;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= gain);
        Waveform::new(out, s.sample_rate)
    }
}

pub fn stft(w: &Waveform, config: StftConfig) -> Result<Spectrogram> {
    Stft::new(config)?.analyze(w)
}

pub fn istft(s: &Spectrogram, out_len: usize) -> Result<Waveform> {
    Stft::new(s.config)?.synthesize(s, out_len)
}

/// Scales complex bins elementwise by the mask, keeping the mixture phase.
pub fn apply_mask(s: &Spectrogram, m: &Mask) -> Result<Spectrogram> {
    s.check_geometry(m.frames, m.bins)?;
    let complex_bins: Vec<Complex64> = s
        .complex_bins
        .iter()
        .zip(&m.values)
        .map(|(c, &v)| c * v)
        .collect();
    let magnitude = s
        .magnitude
        .iter()
        .zip(&m.values)
        .map(|(x, v)| x * v)
        .collect();
    Ok(Spectrogram {
        frames: s.frames,
        bins: s.bins,
        config: s.config,
        sample_rate: s.sample_rate,
        complex_bins,
        magnitude,
    })
}

/// Ideal binary masks for every source: a bin belongs to the source with the
/// strictly largest magnitude, ties going to the lowest index.
pub fn ideal_binary_masks(sources: &[Spectrogram]) -> Result<Vec<Mask>> {
    let first = sources
        .first()
        .ok_or_else(|| Error::invalid("ideal binary mask needs at least one source"))?;
    for s in sources {
        if !s.same_geometry(first) {
            return Err(Error::GeometryMismatch(
                "source spectrograms differ in geometry".into(),
            ));
        }
    }
    let cells = first.frames * first.bins;
    let mut values = vec![vec![0.0; cells]; sources.len()];
    for p in 0..cells {
        let mut best = 0;
        for (i, s) in sources.iter().enumerate().skip(1) {
            if s.magnitude[p] > sources[best].magnitude[p] {
                best = i;
            }
        }
        values[best][p] = 1.0;
    }
    values
        .into_iter()
        .map(|v| Mask::new(first.frames, first.bins, MaskKind::Binary, v))
        .collect()
}

pub fn ideal_binary_mask(sources: &[Spectrogram], i: usize) -> Result<Mask> {
    if i >= sources.len() {
        return Err(Error::invalid(format!(
            "source index {i} out of range for {} sources",
            sources.len()
        )));
    }
    Ok(ideal_binary_masks(sources)?.swap_remove(i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 8000).unwrap()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    // Direct O(N^2) DFT of one windowed frame.
    fn naive_dft(frame: &[f64], fft_size: usize) -> Vec<Complex64> {
        (0..fft_size / 2 + 1)
            .map(|k| {
                frame
                    .iter()
                    .enumerate()
                    .fold(Complex64::new(0.0, 0.0), |acc, (n, &x)| {
                        let ang = -2.0 * PI * (k * n) as f64 / fft_size as f64;
                        acc + Complex64::new(x * ang.cos(), x * ang.sin())
                    })
            })
            .collect()
    }

    #[test]
    fn waveform_rejects_bad_input() {
        assert!(Waveform::new(vec![], 8000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![f64::NAN], 8000).is_err());
    }

    #[test]
    fn full_scale_geometry() {
        let cfg = StftConfig::full_scale();
        let w = random_wave(65535, 1);
        let s = stft(&w, cfg).unwrap();
        assert_eq!(s.bins(), 513);
        assert_eq!(s.frames(), (65535 + 768usize).div_ceil(256));
        let back = istft(&s, 65535).unwrap();
        assert!(rel_err(back.samples(), w.samples()) < 1e-6);
    }

    #[test]
    fn zero_waveform_gives_zero_magnitude() {
        let s = stft(
            &Waveform::silence(1000, 8000).unwrap(),
            StftConfig::default(),
        )
        .unwrap();
        assert!(s.magnitude().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn bin_centered_sinusoid_concentrates_in_its_bin() {
        let cfg = StftConfig::default();
        let k = 40;
        let freq = k as f64 * 8000.0 / cfg.fft_size as f64;
        let w = Waveform::new(
            (0..4000)
                .map(|n| (2.0 * PI * freq * n as f64 / 8000.0).sin())
                .collect(),
            8000,
        )
        .unwrap();
        let s = stft(&w, cfg).unwrap();
        // interior frame, fully inside the signal
        let t = 10;
        let row: Vec<f64> = (0..s.bins()).map(|b| s.magnitude_at(t, b)).collect();
        let peak = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, k);
        let total: f64 = row.iter().map(|m| m * m).sum();
        let near: f64 = row[k - 1..=k + 1].iter().map(|m| m * m).sum();
        assert!(near / total > 0.99);

        // compare against a direct DFT of the same windowed frame
        let win = hann_window(cfg.window_size);
        let start = t * cfg.hop - (cfg.window_size - cfg.hop);
        let frame: Vec<f64> = (0..cfg.window_size)
            .map(|n| w.samples()[start + n] * win[n])
            .collect();
        let oracle = naive_dft(&frame, cfg.fft_size);
        for (b, o) in oracle.iter().enumerate() {
            assert!((s.at(t, b) - o).norm() <= 1e-6 * (1.0 + o.norm()));
        }
    }

    #[test]
    fn single_frame_matches_naive_dft() {
        let cfg = StftConfig {
            fft_size: 64,
            hop: 48,
            window_size: 48,
        };
        // 1 sample of front pad coverage: frames_for(len) == 1 when len + 0 <= hop
        let w = random_wave(48, 7);
        let s = stft(&w, cfg).unwrap();
        assert_eq!(s.frames(), 1);
        let win = hann_window(48);
        let frame: Vec<f64> = w.samples().iter().zip(&win).map(|(x, h)| x * h).collect();
        let oracle = naive_dft(&frame, 64);
        for (b, o) in oracle.iter().enumerate() {
            assert!((s.at(0, b) - o).norm() <= 1e-6 * o.norm().max(1.0));
        }
    }

    #[test]
    fn window_shorter_than_fft_round_trips() {
        let cfg = StftConfig {
            fft_size: 256,
            hop: 50,
            window_size: 200,
        };
        let w = random_wave(3001, 3);
        let back = istft(&stft(&w, cfg).unwrap(), 3001).unwrap();
        assert!(rel_err(back.samples(), w.samples()) < 1e-6);
    }

    #[test]
    fn half_overlap_hann_is_rejected() {
        let cfg = StftConfig {
            fft_size: 512,
            hop: 256,
            window_size: 512,
        };
        let s = stft(&random_wave(2000, 2), cfg).unwrap();
        assert!(matches!(istft(&s, 2000), Err(Error::ColaViolation { .. })));
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        let w = random_wave(100, 1);
        let bad = [(0, 1, 1), (64, 0, 64), (64, 16, 128), (64, 65, 64)];
        for (fft_size, hop, window_size) in bad {
            let cfg = StftConfig {
                fft_size,
                hop,
                window_size,
            };
            assert!(stft(&w, cfg).is_err());
        }
    }

    #[test]
    fn istft_rejects_overlong_output() {
        let s = stft(&random_wave(1000, 1), StftConfig::default()).unwrap();
        assert!(istft(&s, 100_000).is_err());
    }

    #[test]
    fn zero_spectrogram_synthesizes_silence() {
        let cfg = StftConfig::default();
        let s = stft(&Waveform::silence(900, 8000).unwrap(), cfg).unwrap();
        let w = istft(&s, 900).unwrap();
        assert!(w.samples().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_and_zero_masks() {
        let w = random_wave(2000, 9);
        let s = stft(&w, StftConfig::default()).unwrap();
        let ones = Mask::filled(s.frames(), s.bins(), 1.0).unwrap();
        let masked = apply_mask(&s, &ones).unwrap();
        assert_eq!(masked, s);
        let back = istft(&masked, 2000).unwrap();
        assert!(rel_err(back.samples(), w.samples()) < 1e-6);
        let zeros = Mask::filled(s.frames(), s.bins(), 0.0).unwrap();
        let silent = apply_mask(&s, &zeros).unwrap();
        assert!(silent.magnitude().iter().all(|&m| m == 0.0));
        assert!(istft(&silent, 2000)
            .unwrap()
            .samples()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn soft_mask_multiplies_magnitude_elementwise() {
        let s = stft(&random_wave(1500, 4), StftConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..s.frames() * s.bins()).map(|_| rng.gen()).collect();
        let m = Mask::new(s.frames(), s.bins(), MaskKind::Soft, vals.clone()).unwrap();
        let out = apply_mask(&s, &m).unwrap();
        for t in 0..s.frames() {
            for b in 0..s.bins() {
                let expect = s.magnitude_at(t, b) * vals[t * s.bins() + b];
                assert!((out.magnitude_at(t, b) - expect).abs() <= 1e-12 * (1.0 + expect));
                assert!((out.at(t, b).norm() - expect).abs() <= 1e-9 * (1.0 + expect));
            }
        }
    }

    #[test]
    fn mask_geometry_mismatch() {
        let s = stft(&random_wave(1500, 4), StftConfig::default()).unwrap();
        let m = Mask::filled(s.frames() + 1, s.bins(), 1.0).unwrap();
        assert!(matches!(
            apply_mask(&s, &m),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn mask_value_checks() {
        assert!(Mask::new(1, 2, MaskKind::Binary, vec![0.0, 0.5]).is_err());
        assert!(Mask::new(1, 2, MaskKind::Soft, vec![0.0, 1.5]).is_err());
        assert!(Mask::new(1, 2, MaskKind::Soft, vec![0.0]).is_err());
    }

    fn spec_from_mags(mags: &[f64], bins_cfg: StftConfig, frames: usize) -> Spectrogram {
        Spectrogram::from_complex(
            bins_cfg,
            8000,
            frames,
            mags.iter().map(|&m| Complex64::new(m, 0.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn ibm_dominance_and_ties() {
        let cfg = StftConfig {
            fft_size: 2,
            hop: 1,
            window_size: 1,
        };
        // 1 frame x 2 bins
        let a = spec_from_mags(&[3.0, 2.0], cfg, 1);
        let b = spec_from_mags(&[1.0, 2.0], cfg, 1);
        let m0 = ideal_binary_mask(&[a.clone(), b.clone()], 0).unwrap();
        let m1 = ideal_binary_mask(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(m0.values(), &[1.0, 1.0]);
        assert_eq!(m1.values(), &[0.0, 0.0]);
        assert!(ideal_binary_mask(&[a, b], 2).is_err());
        assert!(ideal_binary_masks(&[]).is_err());
    }

    #[test]
    fn ibm_partition_matches_argmax_oracle() {
        let cfg = StftConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let frames = 5;
        let cells = frames * cfg.bins();
        let srcs: Vec<Spectrogram> = (0..3)
            .map(|_| {
                let mags: Vec<f64> = (0..cells).map(|_| rng.gen_range(0..4) as f64).collect();
                spec_from_mags(&mags, cfg, frames)
            })
            .collect();
        let masks = ideal_binary_masks(&srcs).unwrap();
        for p in 0..cells {
            let mut arg = 0;
            let mut best = -1.0;
            for (i, s) in srcs.iter().enumerate() {
                if s.magnitude()[p] > best {
                    best = s.magnitude()[p];
                    arg = i;
                }
            }
            let sum: f64 = masks.iter().map(|m| m.values()[p]).sum();
            assert_eq!(sum, 1.0);
            assert_eq!(masks[arg].values()[p], 1.0);
        }
    }

    #[test]
    fn ibm_geometry_mismatch() {
        let a = stft(&random_wave(1000, 1), StftConfig::default()).unwrap();
        let b = stft(&random_wave(2000, 1), StftConfig::default()).unwrap();
        assert!(ideal_binary_masks(&[a, b]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn round_trip_under_cola(
                seed in 0u64..1000,
                len in 200usize..3000,
                cfg_idx in 0usize..3,
            ) {
                let cfg = [
                    StftConfig { fft_size: 512, hop: 128, window_size: 512 },
                    StftConfig { fft_size: 256, hop: 64, window_size: 192 },
                    StftConfig { fft_size: 128, hop: 32, window_size: 96 },
                ][cfg_idx];
                let w = random_wave(len, seed);
                let back = istft(&stft(&w, cfg).unwrap(), len).unwrap();
                prop_assert!(rel_err(back.samples(), w.samples()) < 1e-6);
            }

            #[test]
            fn mask_scaling_is_linear(seed in 0u64..1000, a in 0.0f64..=1.0) {
                let s = stft(&random_wave(600, seed), StftConfig::default()).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
                let m = Mask::new(
                    s.frames(),
                    s.bins(),
                    MaskKind::Soft,
                    (0..s.frames() * s.bins()).map(|_| rng.gen()).collect(),
                ).unwrap();
                let base = apply_mask(&s, &m).unwrap();
                let scaled = apply_mask(&s, &m.scaled(a).unwrap()).unwrap();
                for (x, y) in scaled.magnitude().iter().zip(base.magnitude()) {
                    prop_assert!((x - a * y).abs() <= 1e-12 * (1.0 + y));
                }
            }
        }
    }
}
