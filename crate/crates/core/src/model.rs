//! The full text-conditioned VAE: reference encoder, Householder flow and
//! sequence-to-sequence synthesizer sharing one parameter store.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::flow::{AffineMap, Arch, FlowStack};
use crate::numerics::{DiagGaussian, Mat64};
use crate::params::{Init, ParamId, ParamStore};
use crate::seq2seq::{broadcast_concat, MelGram, PhonemeSequence, Seq2Seq, Seq2SeqConfig};
use crate::tape::{Tape, Var};
use crate::vae::{kl_per_dim, reparameterize, EncoderVars, ReferenceEncoder, ReferenceEncoderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Number of Householder vectors; ignored for [`Arch::Vanilla`].
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
}

impl ModelConfig {
    pub fn flow_len(&self) -> usize {
        if self.arch.has_flow() {
            self.k
        } else {
            0
        }
    }
}

#[derive(Debug, Clone)]
enum FlowParams {
    None,
    /// `K - 1` affine maps, each `(A, b)`.
    Chained(Vec<(ParamId, ParamId)>),
    FromEncoder,
    /// One `K x d` tensor of globally shared vectors.
    Shared(ParamId),
}

/// Tape handles for one utterance's loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub loss: Var,
    pub kl: Var,
    pub recon: Var,
}

/// Tape handles for one utterance's latent path.
#[derive(Debug, Clone)]
pub struct LatentVars {
    pub encoder: EncoderVars,
    pub z0: Var,
    pub zk: Var,
    pub vectors: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: ReferenceEncoder,
    pub seq2seq: Seq2Seq,
    flow: FlowParams,
}

impl Model {
    /// Fresh model. Each tensor is seeded by its own name, so tensors shared
    /// between architectures start identical under equal seeds.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let c = config;
        if c.latent_dim == 0 || c.bands == 0 || c.vocab == 0 {
            return Err(Error::InvalidArgument("model dimensions must be positive".into()));
        }
        let mut store = ParamStore::new(seed);
        let k = c.flow_len();
        let encoder = ReferenceEncoder::new(
            &mut store,
            ReferenceEncoderConfig {
                bands: c.bands,
                channels: c.ref_channels,
                hidden: c.ref_hidden,
                latent_dim: c.latent_dim,
                vector_heads: if k == 0 { 0 } else { c.arch.encoder_vectors(k) },
            },
        );
        let seq2seq = Seq2Seq::new(
            &mut store,
            Seq2SeqConfig {
                vocab: c.vocab,
                embed_dim: c.embed_dim,
                enc_hidden: c.enc_hidden,
                dec_hidden: c.dec_hidden,
                attn_dim: c.attn_dim,
                bands: c.bands,
                latent_dim: c.latent_dim,
            },
        );
        let d = c.latent_dim;
        let flow = match c.arch {
            _ if k == 0 => FlowParams::None,
            Arch::Vanilla => FlowParams::None,
            Arch::Arch1 => FlowParams::Chained(
                (1..k)
                    .map(|i| {
                        let a = store.register(&format!("flow.affine.{i}.a"), d, d, Init::IdentityPlusNoise(0.01));
                        let b = store.register(&format!("flow.affine.{i}.b"), 1, d, Init::Normal(0.01));
                        (a, b)
                    })
                    .collect(),
            ),
            Arch::Arch2 => FlowParams::FromEncoder,
            Arch::Arch3 => FlowParams::Shared(store.register("flow.shared", k, d, Init::UnitRows)),
        };
        Ok(Self {
            config,
            store,
            encoder,
            seq2seq,
            flow,
        })
    }

    /// Model with parameters taken from `store` (names and shapes must match).
    pub fn with_params(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, store.seed())?;
        m.store.load_from(store)?;
        Ok(m)
    }

    /// Reflection vectors on the tape, in application order.
    fn flow_vectors(&self, tape: &mut Tape, enc: &EncoderVars) -> Result<Vec<Var>> {
        let d = self.config.latent_dim;
        let k = self.config.flow_len();
        let heads = || enc.vectors.ok_or(Error::MissingTrace("encoder vector heads"));
        Ok(match &self.flow {
            FlowParams::None => Vec::new(),
            FlowParams::Chained(maps) => {
                let mut v = heads()?;
                let mut out = Vec::with_capacity(k);
                out.push(v);
                for &(a, b) in maps {
                    let (a, b) = (tape.param(&self.store, a), tape.param(&self.store, b));
                    let av = tape.matvec(a, v);
                    v = tape.add(av, b);
                    out.push(v);
                }
                out
            }
            FlowParams::FromEncoder => {
                let h = heads()?;
                (0..k).map(|i| tape.slice(h, i * d, d)).collect()
            }
            FlowParams::Shared(id) => {
                let s = tape.param(&self.store, *id);
                (0..k).map(|i| tape.slice(s, i * d, d)).collect()
            }
        })
    }

    /// Encoder, reparameterized sample and flow for one reference.
    pub fn latent(&self, tape: &mut Tape, mel: &MelGram, eps: &[f64]) -> Result<LatentVars> {
        check_len(self.config.latent_dim, eps.len())?;
        let encoder = self.encoder.forward(tape, &self.store, mel)?;
        let z0 = reparameterize(tape, encoder.mu, encoder.log_var, eps);
        let vectors = self.flow_vectors(tape, &encoder)?;
        let mut zk = z0;
        for &v in &vectors {
            zk = tape.reflect(v, zk)?;
        }
        Ok(LatentVars {
            encoder,
            z0,
            zk,
            vectors,
        })
    }

    fn conditioned(&self, tape: &mut Tape, phonemes: &PhonemeSequence, zk: Var) -> Result<Vec<Var>> {
        let enc = self.seq2seq.phoneme_encode(tape, &self.store, phonemes)?;
        Ok(broadcast_concat(tape, &enc, zk))
    }

    /// Autoencoding loss for one utterance: the target spectrogram is both the
    /// reference-encoder input and the decoder target.
    pub fn utterance_loss(
        &self,
        tape: &mut Tape,
        phonemes: &PhonemeSequence,
        mel: &MelGram,
        eps: &[f64],
        beta: f64,
    ) -> Result<LossTerms> {
        self.utterance_loss_masked(tape, phonemes, mel, eps, beta, None)
    }

    /// [`Model::utterance_loss`] with decoder input dropout: teacher-forced
    /// frame `t` is zeroed where `keep[t]` is false.
    pub fn utterance_loss_masked(
        &self,
        tape: &mut Tape,
        phonemes: &PhonemeSequence,
        mel: &MelGram,
        eps: &[f64],
        beta: f64,
        keep: Option<&[bool]>,
    ) -> Result<LossTerms> {
        let lat = self.latent(tape, mel, eps)?;
        let cond = self.conditioned(tape, phonemes, lat.zk)?;
        let (_, recon) = self
            .seq2seq
            .decode_teacher_forced_masked(tape, &self.store, &cond, mel, keep)?;
        let kl = kl_per_dim(tape, lat.encoder.mu, lat.encoder.log_var);
        let weighted = tape.affine(kl, beta, 0.0);
        let loss = tape.add(recon, weighted);
        Ok(LossTerms { loss, kl, recon })
    }

    /// Posterior and concrete flow stack for a reference spectrogram.
    pub fn posterior(&self, mel: &MelGram) -> Result<(DiagGaussian, FlowStack)> {
        let mut tape = Tape::new();
        let enc = self.encoder.forward(&mut tape, &self.store, mel)?;
        let vectors = self.flow_vectors(&mut tape, &enc)?;
        let posterior = DiagGaussian::new(tape.value(enc.mu).to_vec(), tape.value(enc.log_var).to_vec())?;
        let vs = vectors
            .iter()
            .map(|&v| crate::flow::HouseholderVector::new(tape.value(v).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((posterior, FlowStack::new(self.config.arch, vs)?))
    }

    /// Arch1 affine maps in dense form.
    pub fn affine_maps(&self) -> Vec<AffineMap> {
        let d = self.config.latent_dim;
        match &self.flow {
            FlowParams::Chained(maps) => maps
                .iter()
                .map(|&(a, b)| AffineMap {
                    a: Mat64::from_vec(d, d, self.store.get(a).to_vec()).expect("square map"),
                    b: self.store.get(b).to_vec(),
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Arch3 shared vectors.
    pub fn shared_vectors(&self) -> Vec<Vec<f64>> {
        match &self.flow {
            FlowParams::Shared(id) => self
                .store
                .get(*id)
                .chunks(self.config.latent_dim)
                .map(<[f64]>::to_vec)
                .collect(),
            _ => Vec::new(),
        }
    }

    /// One-shot synthesis: the reference is encoded at its posterior mean,
    /// flowed, attached to every prompt encoding, and the decoder runs free
    /// for `n_frames`.
    pub fn synthesize(&self, reference: &MelGram, prompt: &PhonemeSequence, n_frames: usize) -> Result<MelGram> {
        let mut tape = Tape::new();
        let zeros = alloc::vec![0.0; self.config.latent_dim];
        let lat = self.latent(&mut tape, reference, &zeros)?;
        let cond = self.conditioned(&mut tape, prompt, lat.zk)?;
        self.seq2seq
            .decode_free_running(&mut tape, &self.store, &cond, n_frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{compose_flow, source_vectors};
    use crate::numerics::{grad_check, RngStream};
    use crate::vae::reference_encode;
    use alloc::vec;

    pub(crate) fn tiny(arch: Arch, k: usize) -> ModelConfig {
        ModelConfig {
            arch,
            k,
            latent_dim: 3,
            vocab: 5,
            bands: 4,
            embed_dim: 3,
            enc_hidden: 4,
            dec_hidden: 4,
            attn_dim: 3,
            ref_channels: [2, 2],
            ref_hidden: 4,
        }
    }

    fn sample(seed: u64) -> (PhonemeSequence, MelGram) {
        let mut rng = RngStream::new(seed, "sample");
        let mel = MelGram::from_f64(6, 4, &rng.normal_vec(24)).unwrap();
        (PhonemeSequence::new(vec![0, 3, 1], 5).unwrap(), mel)
    }

    fn loss_value(m: &Model, eps: &[f64]) -> f64 {
        let (p, mel) = sample(1);
        let mut tape = Tape::new();
        let t = m.utterance_loss(&mut tape, &p, &mel, eps, 0.5).unwrap();
        tape.scalar(t.loss)
    }

    #[test]
    fn vanilla_has_no_flow_parameters() {
        let m = Model::new(tiny(Arch::Vanilla, 16), 3).unwrap();
        assert!(m.store.ids().all(|id| !m.store.name(id).starts_with("flow.")));
        assert!(m.store.id("ref.vectors.w").is_none());
    }

    #[test]
    fn shared_parameters_initialize_identically() {
        let v = Model::new(tiny(Arch::Vanilla, 0), 3).unwrap();
        for arch in [Arch::Arch1, Arch::Arch2, Arch::Arch3] {
            let f = Model::new(tiny(arch, 4), 3).unwrap();
            for id in v.store.ids() {
                let name = v.store.name(id);
                assert_eq!(v.store.get(id), f.store.by_name(name).unwrap(), "{name}");
            }
        }
    }

    #[test]
    fn empty_flow_reduces_to_vanilla() {
        let eps = [0.3, -0.2, 0.9];
        let vanilla = Model::new(tiny(Arch::Vanilla, 0), 8).unwrap();
        let empty = Model::new(tiny(Arch::Arch3, 0), 8).unwrap();
        assert_eq!(loss_value(&vanilla, &eps), loss_value(&empty, &eps));
        let flowed = Model::new(tiny(Arch::Arch3, 2), 8).unwrap();
        assert_ne!(loss_value(&vanilla, &eps), loss_value(&flowed, &eps));
    }

    #[test]
    fn tape_flow_matches_plain_flow() {
        let (_, mel) = sample(2);
        let eps = [0.1, 0.2, -0.4];
        for arch in [Arch::Arch1, Arch::Arch2, Arch::Arch3] {
            let m = Model::new(tiny(arch, 4), 5).unwrap();
            let mut tape = Tape::new();
            let lat = m.latent(&mut tape, &mel, &eps).unwrap();
            let (post, heads) = reference_encode(&m.encoder, &m.store, &mel).unwrap();
            let vs = source_vectors(arch, 4, 3, &heads, &m.shared_vectors(), &m.affine_maps()).unwrap();
            let stack = FlowStack::new(arch, vs).unwrap();
            let s = crate::vae::posterior_sample(&post, &stack, &eps).unwrap();
            for (a, b) in tape.value(lat.zk).iter().zip(&s.zk) {
                assert!((a - b).abs() < 1e-12);
            }
            let (_, stack2) = m.posterior(&mel).unwrap();
            assert_eq!(stack2, stack);
            assert_eq!(compose_flow(&stack2, &s.z0).unwrap(), s.zk);
        }
    }

    #[test]
    fn full_loss_gradient_check() {
        for arch in Arch::ALL {
            let m = Model::new(tiny(arch, 2), 11).unwrap();
            let (p, mel) = sample(3);
            let eps = [0.5, -0.3, 0.2];
            let ids: Vec<ParamId> = m.store.ids().collect();
            // Random point: initial weights plus noise, so no gradient is tiny.
            let mut rng = crate::numerics::RngStream::new(5, "grad-point");
            let x0: Vec<f64> = ids
                .iter()
                .flat_map(|&id| m.store.get(id).to_vec())
                .map(|w| w + 0.2 * rng.standard_normal())
                .collect();
            let f = |x: &[f64]| {
                let mut mm = m.clone();
                let mut off = 0;
                for &id in &ids {
                    let n = mm.store.get(id).len();
                    mm.store.get_mut(id).copy_from_slice(&x[off..off + n]);
                    off += n;
                }
                let mut tape = Tape::new();
                let t = mm.utterance_loss(&mut tape, &p, &mel, &eps, 0.7).unwrap();
                let g = tape.backward(t.loss).params(&mm.store);
                (tape.scalar(t.loss), g.into_iter().flatten().collect())
            };
            let err = grad_check(f, &x0, 1e-5).unwrap();
            assert!(err < 1e-4, "{arch:?}: {err}");
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let m = Model::new(tiny(Arch::Arch3, 2), 12).unwrap();
        let (p, mel) = sample(4);
        let a = m.synthesize(&mel, &p, 7).unwrap();
        assert_eq!((a.frames(), a.bands()), (7, 4));
        assert_eq!(a, m.synthesize(&mel, &p, 7).unwrap());
    }
}
