//! Synthetic style-annotated corpus with a known generative rule.
//!
//! Every phoneme `p` owns a spectral template `T_p` and a duration `d_p`.
//! Frame `f` of an utterance spoken by phoneme `p` with style `(a, b)` is
//!
//! ```text
//! mel[f, j] = T_p[j] * (1 + a * sin(2 pi f / F0)) + b * (j / B - 0.5) + noise
//! ```
//!
//! `a` (modulation depth) plays the role of emotional intensity and `b`
//! (spectral tilt) a second, independent style factor. Because the rule is
//! known, [`style_oracle`] can read the style back out of any spectrogram.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use core::f64::consts::PI;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::seq2seq::{MelGram, PhonemeSequence};
#[allow(unused_imports)] // float math for no_std; inherent methods need std
use num_traits::Float;

/// Emotional intensity of a one-shot reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityLevel {
    Low,
    Medium,
    High,
}

impl IntensityLevel {
    pub const ALL: [IntensityLevel; 3] = [IntensityLevel::Low, IntensityLevel::Medium, IntensityLevel::High];

    pub fn as_str(self) -> &'static str {
        match self {
            IntensityLevel::Low => "low",
            IntensityLevel::Medium => "medium",
            IntensityLevel::High => "high",
        }
    }
}

impl core::str::FromStr for IntensityLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        IntensityLevel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown intensity level {s:?}")))
    }
}

/// Ground-truth style of an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleFactors {
    /// Modulation depth in `[0, 1]`.
    pub intensity: f64,
    /// Spectral slope in `[-1, 1]`.
    pub tilt: f64,
}

impl StyleFactors {
    pub fn new(intensity: f64, tilt: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&intensity) || !(-1.0..=1.0).contains(&tilt) {
            return Err(Error::InvalidArgument(format!(
                "style out of range: intensity {intensity}, tilt {tilt}"
            )));
        }
        Ok(Self { intensity, tilt })
    }

    pub fn neutral() -> Self {
        Self {
            intensity: 0.0,
            tilt: 0.0,
        }
    }
}

/// Least-squares style estimate; unlike [`StyleFactors`] it is not range
/// limited.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleEstimate {
    pub intensity: f64,
    pub tilt: f64,
}

/// Corpus generation parameters. Field defaults are the reference setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab: usize,
    pub bands: usize,
    /// Seed for phoneme templates and durations.
    pub template_seed: u64,
    pub n_train: usize,
    /// Inclusive phoneme-count range of an utterance.
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    /// Inclusive per-phoneme duration range, in frames.
    pub min_duration: usize,
    pub max_duration: usize,
    /// Range templates are drawn from.
    pub template_range: [f64; 2],
    pub train_intensity: [f64; 2],
    pub train_tilt: [f64; 2],
    /// Intensities of the low/medium/high one-shot references.
    pub held_out_intensities: [f64; 3],
    /// Modulation period in frames.
    pub period: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub n_prompts: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab: 32,
            bands: 20,
            template_seed: 1234,
            n_train: 256,
            min_phonemes: 3,
            max_phonemes: 7,
            min_duration: 4,
            max_duration: 8,
            template_range: [0.2, 1.0],
            train_intensity: [0.0, 0.3],
            train_tilt: [-0.5, 0.5],
            held_out_intensities: [0.5, 0.7, 0.9],
            period: 12.0,
            noise: 0.01,
            n_prompts: 50,
        }
    }
}

fn ordered(r: [f64; 2], lo: f64, hi: f64) -> bool {
    r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(String::from(msg)));
        if self.vocab == 0 || self.bands == 0 {
            return bad("vocab and bands must be positive");
        }
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return bad("invalid phoneme-count range");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("invalid duration range");
        }
        if !ordered(self.template_range, f64::MIN, f64::MAX) {
            return bad("invalid template range");
        }
        if !ordered(self.train_intensity, 0.0, 1.0) {
            return bad("train intensity range must lie in [0, 1]");
        }
        if !ordered(self.train_tilt, -1.0, 1.0) {
            return bad("train tilt range must lie in [-1, 1]");
        }
        let h = self.held_out_intensities;
        if !(h[0] < h[1] && h[1] < h[2]) || h.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return bad("held-out intensities must be strictly increasing within [0, 1]");
        }
        if h.iter()
            .any(|&x| x >= self.train_intensity[0] && x <= self.train_intensity[1])
        {
            return bad("held-out intensities overlap the training range");
        }
        if !(self.period > 0.0) || !(self.noise >= 0.0) {
            return bad("period must be positive and noise non-negative");
        }
        Ok(())
    }

    pub fn held_out(&self) -> impl Iterator<Item = (IntensityLevel, f64)> {
        IntensityLevel::ALL.into_iter().zip(self.held_out_intensities)
    }
}

/// Templates and durations of every phoneme.
#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeInventory {
    bands: usize,
    templates: Vec<Vec<f64>>,
    durations: Vec<usize>,
}

impl PhonemeInventory {
    pub fn from_spec(spec: &CorpusSpec) -> Self {
        let mut rng = RngStream::new(spec.template_seed, "templates");
        let [lo, hi] = spec.template_range;
        let mut templates = Vec::with_capacity(spec.vocab);
        let mut durations = Vec::with_capacity(spec.vocab);
        for _ in 0..spec.vocab {
            // Single-precision values so rendered frames are exact templates.
            templates.push((0..spec.bands).map(|_| f64::from(rng.uniform(lo, hi) as f32)).collect());
            durations.push(rng.int_inclusive(spec.min_duration, spec.max_duration));
        }
        Self {
            bands: spec.bands,
            templates,
            durations,
        }
    }

    pub fn template(&self, phoneme: usize) -> &[f64] {
        &self.templates[phoneme]
    }

    pub fn duration(&self, phoneme: usize) -> usize {
        self.durations[phoneme]
    }

    /// Total rendered length of a sequence.
    pub fn frames_for(&self, seq: &PhonemeSequence) -> usize {
        seq.ids().iter().map(|&p| self.durations[p]).sum()
    }

    /// Phoneme id of every frame.
    pub fn segmentation(&self, seq: &PhonemeSequence) -> Vec<usize> {
        seq.ids()
            .iter()
            .flat_map(|&p| core::iter::repeat(p).take(self.durations[p]))
            .collect()
    }
}

fn modulation(f: usize, period: f64) -> f64 {
    libm::sin(2.0 * PI * f as f64 / period)
}

fn ramp(j: usize, bands: usize) -> f64 {
    j as f64 / bands as f64 - 0.5
}

/// Renders a spectrogram by the corpus rule. Noise, when `spec.noise > 0`,
/// is drawn from `rng`.
pub fn render_utterance(
    phonemes: &PhonemeSequence,
    style: StyleFactors,
    spec: &CorpusSpec,
    inventory: &PhonemeInventory,
    rng: &mut RngStream,
) -> Result<MelGram> {
    if let Some(&bad) = phonemes.ids().iter().find(|&&p| p >= spec.vocab) {
        return Err(Error::InvalidArgument(format!("phoneme {bad} outside vocabulary")));
    }
    let segments = inventory.segmentation(phonemes);
    let b = spec.bands;
    let mut data = Vec::with_capacity(segments.len() * b);
    for (f, &p) in segments.iter().enumerate() {
        let m = 1.0 + style.intensity * modulation(f, spec.period);
        for (j, t) in inventory.template(p).iter().enumerate() {
            let mut x = t * m + style.tilt * ramp(j, b);
            if spec.noise > 0.0 {
                x += spec.noise * rng.standard_normal();
            }
            data.push(x);
        }
    }
    MelGram::from_f64(segments.len(), b, &data)
}

/// Template whose best per-frame fit `c * T + s * ramp` leaves the smallest
/// residual.
fn best_template(frame: &[f64], inventory: &PhonemeInventory) -> usize {
    let b = frame.len();
    let rm: Vec<f64> = (0..b).map(|j| ramp(j, b)).collect();
    let mut best = (0, f64::INFINITY);
    for (p, t) in inventory.templates.iter().enumerate() {
        let (stt, str_, srr) = (dot(t, t), dot(t, &rm), dot(&rm, &rm));
        let (sty, sry) = (dot(t, frame), dot(&rm, frame));
        let det = stt * srr - str_ * str_;
        let (c, s) = if det.abs() > 1e-12 {
            ((sty * srr - sry * str_) / det, (stt * sry - str_ * sty) / det)
        } else {
            (sty / stt, 0.0)
        };
        let resid: f64 = (0..b)
            .map(|j| {
                let r = frame[j] - c * t[j] - s * rm[j];
                r * r
            })
            .sum();
        if resid < best.1 {
            best = (p, resid);
        }
    }
    best.0
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    crate::numerics::dot(a, b)
}

/// Least-squares estimate of `(a, b)` under the rendering rule.
///
/// With `phonemes` whose rendered length equals the spectrogram length the
/// true segmentation is used. Otherwise each frame is assigned the template
/// that fits it best.
pub fn style_oracle(
    mel: &MelGram,
    phonemes: Option<&PhonemeSequence>,
    spec: &CorpusSpec,
    inventory: &PhonemeInventory,
) -> Result<StyleEstimate> {
    if mel.bands() != spec.bands {
        return Err(Error::DimensionMismatch {
            expected: spec.bands,
            got: mel.bands(),
        });
    }
    let segments = match phonemes {
        Some(seq) if inventory.frames_for(seq) == mel.frames() => inventory.segmentation(seq),
        _ => (0..mel.frames())
            .map(|f| best_template(&mel.row_f64(f), inventory))
            .collect(),
    };
    let b = mel.bands();
    // Normal equations for residual = a * x1 + b * x2.
    let (mut s11, mut s12, mut s22, mut s1y, mut s2y) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (f, &p) in segments.iter().enumerate() {
        let s = modulation(f, spec.period);
        let t = inventory.template(p);
        for j in 0..b {
            let y = f64::from(mel.get(f, j)) - t[j];
            let (x1, x2) = (t[j] * s, ramp(j, b));
            s11 += x1 * x1;
            s12 += x1 * x2;
            s22 += x2 * x2;
            s1y += x1 * y;
            s2y += x2 * y;
        }
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() <= 1e-12 * (s11 * s22).max(1e-300) {
        // No modulation observable (e.g. a single frame at phase zero).
        return Ok(StyleEstimate {
            intensity: 0.0,
            tilt: s2y / s22,
        });
    }
    Ok(StyleEstimate {
        intensity: (s1y * s22 - s2y * s12) / det,
        tilt: (s11 * s2y - s12 * s1y) / det,
    })
}

/// One corpus record.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub phonemes: PhonemeSequence,
    pub mel: MelGram,
    pub style: StyleFactors,
}

/// Text prompt used for one-shot synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub id: String,
    pub phonemes: PhonemeSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub seed: u64,
    pub train: Vec<Utterance>,
    /// One reference per [`IntensityLevel`], in order.
    pub one_shot: Vec<(IntensityLevel, Utterance)>,
    pub prompts: Vec<Prompt>,
}

impl Corpus {
    pub fn inventory(&self) -> PhonemeInventory {
        PhonemeInventory::from_spec(&self.spec)
    }

    /// Looks an utterance up by id across the training and one-shot sets.
    pub fn utterance(&self, id: &str) -> Option<&Utterance> {
        self.train
            .iter()
            .chain(self.one_shot.iter().map(|(_, u)| u))
            .find(|u| u.id == id)
    }

    pub fn prompt(&self, id: &str) -> Option<&Prompt> {
        self.prompts.iter().find(|p| p.id == id)
    }

    /// Training utterance with the lowest intensity.
    pub fn most_neutral(&self) -> Option<&Utterance> {
        self.train
            .iter()
            .min_by(|a, b| a.style.intensity.total_cmp(&b.style.intensity))
    }
}

fn random_phonemes(spec: &CorpusSpec, rng: &mut RngStream) -> PhonemeSequence {
    let len = rng.int_inclusive(spec.min_phonemes, spec.max_phonemes);
    let ids = (0..len).map(|_| rng.int_inclusive(0, spec.vocab - 1)).collect();
    PhonemeSequence::new(ids, spec.vocab).expect("ids drawn within vocabulary")
}

/// Generates the training set, one reference per held-out intensity, and the
/// evaluation prompts. Every record draws from its own stream keyed by id.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let inventory = PhonemeInventory::from_spec(spec);
    let data = RngStream::new(seed, "data");
    let [ilo, ihi] = spec.train_intensity;
    let [tlo, thi] = spec.train_tilt;

    let mut train = Vec::with_capacity(spec.n_train);
    for i in 0..spec.n_train {
        let id = format!("train-{i:05}");
        let mut rng = data.derive(&id);
        let phonemes = random_phonemes(spec, &mut rng);
        let style = StyleFactors::new(rng.uniform(ilo, ihi), rng.uniform(tlo, thi))?;
        let mel = render_utterance(&phonemes, style, spec, &inventory, &mut rng)?;
        train.push(Utterance {
            id,
            phonemes,
            mel,
            style,
        });
    }

    let mut one_shot = Vec::with_capacity(3);
    for (level, a) in spec.held_out() {
        let id = format!("oneshot-{}", level.as_str());
        let mut rng = data.derive(&id);
        let phonemes = random_phonemes(spec, &mut rng);
        let style = StyleFactors::new(a, rng.uniform(tlo, thi))?;
        let mel = render_utterance(&phonemes, style, spec, &inventory, &mut rng)?;
        one_shot.push((
            level,
            Utterance {
                id,
                phonemes,
                mel,
                style,
            },
        ));
    }

    let prompts = (0..spec.n_prompts)
        .map(|i| {
            let id = format!("prompt-{i:03}");
            let mut rng = data.derive(&id);
            Prompt {
                phonemes: random_phonemes(spec, &mut rng),
                id,
            }
        })
        .collect();

    Ok(Corpus {
        spec: spec.clone(),
        seed,
        train,
        one_shot,
        prompts,
    })
}
