//! Optimizer, training loop and metric bookkeeping.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Arch;
use crate::model::{Model, ModelConfig};
use crate::numerics::RngStream;
use crate::params::ParamStore;
use crate::synthdata::Utterance;
use crate::tape::Tape;
#[allow(unused_imports)] // float math for no_std; inherent methods need std
use num_traits::Float;

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Arch,
    /// Householder vectors; ignored for vanilla.
    pub k: usize,
    pub latent_dim: usize,
    pub vocab: usize,
    pub bands: usize,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub attn_dim: usize,
    pub ref_channels: [usize; 2],
    pub ref_hidden: usize,
    pub learning_rate: f64,
    /// KL weight reached after warm-up.
    pub beta_max: f64,
    /// Fraction of steps over which beta rises linearly from zero.
    pub beta_warmup: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Probability of zeroing each teacher-forced decoder input frame.
    pub frame_dropout: f64,
    /// Runs whose loss exceeds this are aborted as diverged.
    pub max_loss: f64,
    pub seed: u64,
    pub corpus: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Arch3,
            k: 16,
            latent_dim: 16,
            vocab: 32,
            bands: 20,
            embed_dim: 16,
            enc_hidden: 32,
            dec_hidden: 64,
            attn_dim: 32,
            ref_channels: [8, 16],
            ref_hidden: 32,
            learning_rate: 2e-3,
            beta_max: 1e-4,
            beta_warmup: 0.2,
            steps: 20_000,
            batch_size: 8,
            clip_norm: 5.0,
            frame_dropout: 1.0,
            max_loss: 1e3,
            seed: 0,
            corpus: None,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            k: self.k,
            latent_dim: self.latent_dim,
            vocab: self.vocab,
            bands: self.bands,
            embed_dim: self.embed_dim,
            enc_hidden: self.enc_hidden,
            dec_hidden: self.dec_hidden,
            attn_dim: self.attn_dim,
            ref_channels: self.ref_channels,
            ref_hidden: self.ref_hidden,
        }
    }

    /// `k` as reported in tables: zero for the baseline.
    pub fn flow_len(&self) -> usize {
        self.model_config().flow_len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.arch.has_flow() && self.k == 0 {
            return bad(format!("{} needs at least one Householder vector", self.arch.as_str()));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.beta_max >= 0.0) || !(0.0..=1.0).contains(&self.beta_warmup) {
            return bad("learning_rate, beta_max or beta_warmup out of range".into());
        }
        if !(0.0..=1.0).contains(&self.frame_dropout) {
            return bad("frame_dropout must be in [0, 1]".into());
        }
        if !(self.clip_norm > 0.0) || !(self.max_loss > 0.0) {
            return bad("clip_norm and max_loss must be positive".into());
        }
        Ok(())
    }

    /// KL weight at `step`: linear from 0 to `beta_max` over the warm-up
    /// fraction, constant afterwards.
    pub fn beta(&self, step: usize) -> f64 {
        let warm = self.beta_warmup * self.steps as f64;
        if warm <= 0.0 {
            self.beta_max
        } else {
            self.beta_max * (step as f64 / warm).min(1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every tensor of a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Vec<f64>]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [Vec<f64>], grads: &[Vec<f64>], state: &mut AdamState, hyper: AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                got: g.len(),
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(hyper.beta1, t);
    let c2 = 1.0 - libm::pow(hyper.beta2, t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub kl: f64,
    pub recon: f64,
    pub beta: f64,
    pub wall_ms: u64,
}

/// Append-only per-step training metrics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn push(&mut self, record: MetricRecord) -> Result<()> {
        if !record.kl.is_finite() || !record.recon.is_finite() {
            return Err(Error::NonFinite(format!("metrics at step {}", record.step)));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Mean `(kl, recon)` over the last 10% of records (at least one).
    pub fn final_metrics(&self) -> Option<(f64, f64)> {
        if self.records.is_empty() {
            return None;
        }
        let n = (self.records.len() as f64 * 0.1).ceil().max(1.0) as usize;
        let tail = &self.records[self.records.len() - n..];
        let kl = tail.iter().map(|r| r.kl).sum::<f64>() / n as f64;
        let recon = tail.iter().map(|r| r.recon).sum::<f64>() / n as f64;
        Some((kl, recon))
    }
}

/// Trained parameters with the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub step: usize,
    pub final_kl: Option<f64>,
    pub final_recon: Option<f64>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::with_params(self.config.model_config(), &self.params)?;
        model.seq2seq.feedback_scale = 1.0 - self.config.frame_dropout;
        Ok(model)
    }

    /// Untrained checkpoint for a configuration.
    pub fn initial(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Model::new(config.model_config(), config.seed)?;
        model.store.round_to_f32();
        Ok(Self {
            config: config.clone(),
            params: model.store,
            step: 0,
            final_kl: None,
            final_recon: None,
        })
    }
}

/// A run aborted because the loss became non-finite or exceeded `max_loss`.
#[derive(Debug, Clone, PartialEq)]
pub struct Divergence {
    pub step: usize,
    pub kl: f64,
    pub recon: f64,
    pub log: MetricLog,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at step {}: kl {}, recon {}", .0.step, .0.kl, .0.recon)]
    Diverged(alloc::boxed::Box<Divergence>),
    #[error(transparent)]
    Model(#[from] Error),
}

/// Runs `config.steps` Adam steps on `train_set`.
///
/// Each step draws a batch (with replacement) from the `batch` stream and
/// posterior noise from the `training-noise` stream. Parameters are rounded
/// to single precision after every update, which makes checkpoints exact.
/// `clock` supplies the `wall_ms` column.
pub fn train(
    config: &TrainConfig,
    train_set: &[Utterance],
    clock: &mut dyn FnMut() -> u64,
) -> core::result::Result<(Checkpoint, MetricLog), TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set").into());
    }
    let mut model = Model::new(config.model_config(), config.seed)?;
    model.store.round_to_f32();
    let mut adam = AdamState::new(model.store.tensors());
    let hyper = AdamHyper {
        lr: config.learning_rate,
        ..AdamHyper::default()
    };
    let mut batch_rng = RngStream::new(config.seed, "batch");
    let mut noise_rng = RngStream::new(config.seed, "training-noise");
    let mut log = MetricLog::default();
    let d = config.latent_dim;
    let inv_batch = 1.0 / config.batch_size as f64;

    for step in 0..config.steps {
        let beta = config.beta(step);
        let mut tape = Tape::new();
        let mut total = None;
        let (mut kl_sum, mut recon_sum) = (0.0, 0.0);
        for _ in 0..config.batch_size {
            let utt = &train_set[batch_rng.int_inclusive(0, train_set.len() - 1)];
            let eps = noise_rng.normal_vec(d);
            let keep: Vec<bool> = (0..utt.mel.frames())
                .map(|_| noise_rng.uniform(0.0, 1.0) >= config.frame_dropout)
                .collect();
            let terms = model.utterance_loss_masked(&mut tape, &utt.phonemes, &utt.mel, &eps, beta, Some(&keep))?;
            kl_sum += tape.scalar(terms.kl);
            recon_sum += tape.scalar(terms.recon);
            total = Some(match total {
                None => terms.loss,
                Some(t) => tape.add(t, terms.loss),
            });
        }
        let total = total.expect("batch is non-empty");
        let loss = tape.affine(total, inv_batch, 0.0);
        let (kl, recon) = (kl_sum * inv_batch, recon_sum * inv_batch);
        let value = tape.scalar(loss);
        if !value.is_finite() || value > config.max_loss {
            return Err(TrainError::Diverged(alloc::boxed::Box::new(Divergence {
                step,
                kl,
                recon,
                log,
            })));
        }
        let mut grads = tape.backward(loss).params(&model.store);
        clip_grad_norm(&mut grads, config.clip_norm);
        adam_step(model.store.tensors_mut(), &grads, &mut adam, hyper)?;
        model.store.round_to_f32();
        log.push(MetricRecord {
            step,
            kl,
            recon,
            beta,
            wall_ms: clock(),
        })?;
    }

    let fin = log.final_metrics();
    let ckpt = Checkpoint {
        config: config.clone(),
        params: model.store,
        step: config.steps,
        final_kl: fin.map(|f| f.0),
        final_recon: fin.map(|f| f.1),
    };
    Ok((ckpt, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, CorpusSpec};

    fn tiny_config(arch: Arch, steps: usize) -> TrainConfig {
        TrainConfig {
            arch,
            k: 2,
            latent_dim: 4,
            embed_dim: 4,
            enc_hidden: 8,
            dec_hidden: 8,
            attn_dim: 4,
            ref_channels: [2, 4],
            ref_hidden: 8,
            learning_rate: 5e-3,
            steps,
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    fn corpus(n: usize) -> Vec<Utterance> {
        let spec = CorpusSpec {
            n_train: n,
            ..CorpusSpec::default()
        };
        generate_corpus(&spec, 1).unwrap().train
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![vec![1.0, -2.0]];
        let mut st = AdamState::new(&p);
        st.m[0] = vec![0.5, 0.5];
        st.v[0] = vec![0.25, 0.25];
        st.step = 0;
        let mut q = p.clone();
        // Non-zero moments still move parameters; with fresh moments nothing
        // moves.
        adam_step(&mut q, &[vec![0.0, 0.0]], &mut st, AdamHyper::default()).unwrap();
        assert!((st.m[0][0] - 0.45).abs() < 1e-15);
        assert!((st.v[0][0] - 0.25 * 0.999).abs() < 1e-15);
        let mut fresh = AdamState::new(&p);
        adam_step(&mut p, &[vec![0.0, 0.0]], &mut fresh, AdamHyper::default()).unwrap();
        assert_eq!(p, vec![vec![1.0, -2.0]]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-3, 0.5, -7.0, 120.0] {
            let mut p = vec![vec![0.0]];
            let mut st = AdamState::new(&p);
            let hyper = AdamHyper::default();
            adam_step(&mut p, &[vec![g]], &mut st, hyper).unwrap();
            // m_hat = g, v_hat = g^2 => step = lr * g / (|g| + eps).
            let want = -hyper.lr * g / (g.abs() + hyper.eps);
            assert!((p[0][0] - want).abs() < 1e-15);
            assert!((p[0][0].abs() - hyper.lr).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![vec![0.0, 1.0]];
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &[vec![1.0]], &mut st, AdamHyper::default()).is_err());
        assert!(adam_step(&mut p, &[], &mut st, AdamHyper::default()).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = vec![vec![0.3, -0.1, 2.0]];
            let mut st = AdamState::new(&p);
            for i in 0..100 {
                let g: Vec<f64> = p[0].iter().map(|x| 2.0 * x + f64::from(i) * 1e-3).collect();
                adam_step(&mut p, &[g], &mut st, AdamHyper::default()).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small, vec![vec![0.1]]);
    }

    #[test]
    fn beta_schedule() {
        let c = TrainConfig {
            steps: 100,
            beta_max: 1.0,
            beta_warmup: 0.2,
            ..TrainConfig::default()
        };
        assert_eq!(c.beta(0), 0.0);
        assert!((c.beta(10) - 0.5).abs() < 1e-15);
        assert_eq!(c.beta(20), 1.0);
        assert_eq!(c.beta(99), 1.0);
        let flat = TrainConfig {
            beta_warmup: 0.0,
            beta_max: 0.3,
            ..c
        };
        assert_eq!(flat.beta(0), 0.3);
    }

    #[test]
    fn final_metrics_use_last_tenth() {
        let mut log = MetricLog::default();
        for s in 0..20 {
            log.push(MetricRecord {
                step: s,
                kl: s as f64,
                recon: 1.0,
                beta: 0.0,
                wall_ms: 0,
            })
            .unwrap();
        }
        assert_eq!(log.final_metrics(), Some((18.5, 1.0)));
        assert!(MetricLog::default().final_metrics().is_none());
        assert!(log
            .push(MetricRecord {
                step: 20,
                kl: f64::NAN,
                recon: 0.0,
                beta: 0.0,
                wall_ms: 0
            })
            .is_err());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = tiny_config(Arch::Arch3, 0);
        let (ckpt, log) = train(&cfg, &corpus(3), &mut || 0).unwrap();
        assert!(log.is_empty());
        assert_eq!(ckpt, Checkpoint::initial(&cfg).unwrap());
        assert_eq!(ckpt.final_kl, None);
    }

    #[test]
    fn training_is_deterministic_and_reduces_reconstruction() {
        let data = corpus(5);
        let cfg = tiny_config(Arch::Arch3, 200);
        let (a, log_a) = train(&cfg, &data, &mut || 0).unwrap();
        let (b, log_b) = train(&cfg, &data, &mut || 0).unwrap();
        assert_eq!(log_a, log_b);
        assert_eq!(a, b);
        let first = log_a.records()[..10].iter().map(|r| r.recon).sum::<f64>();
        let last = log_a.records()[190..].iter().map(|r| r.recon).sum::<f64>();
        assert!(last < first, "recon did not decrease: {first} -> {last}");
        // Parameters are exactly single precision.
        assert!(a.params.tensors().iter().flatten().all(|&x| f64::from(x as f32) == x));
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            max_loss: 1e-6,
            ..tiny_config(Arch::Vanilla, 5)
        };
        match train(&cfg, &corpus(3), &mut || 0) {
            Err(TrainError::Diverged(d)) => assert_eq!(d.step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig {
            k: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            k: 0,
            arch: Arch::Vanilla,
            ..TrainConfig::default()
        }
        .validate()
        .is_ok());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            frame_dropout: 1.5,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            frame_dropout: f64::NAN,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            frame_dropout: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_ok());
        assert!(train(&TrainConfig::default(), &[], &mut || 0).is_err());
    }
}
