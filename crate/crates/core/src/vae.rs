//! Reference encoder, posterior sampling through the flow, and the ELBO.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::flow::{compose_flow, FlowStack};
use crate::nn::{Gru, Linear};
use crate::numerics::{gaussian_sample, DiagGaussian, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::params::{Init, ParamId, ParamStore};
use crate::seq2seq::MelGram;
use crate::tape::{ConvShape, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceEncoderConfig {
    pub bands: usize,
    pub channels: [usize; 2],
    pub hidden: usize,
    pub latent_dim: usize,
    /// Householder vectors emitted by the encoder (0, 1 or K).
    pub vector_heads: usize,
}

/// Two stride-2 convolutions over the spectrogram, a GRU over the
/// downsampled time axis, and linear heads on its last state.
#[derive(Debug, Clone)]
pub struct ReferenceEncoder {
    pub config: ReferenceEncoderConfig,
    pub conv: [(ParamId, ParamId); 2],
    pub gru: Gru,
    pub mu: Linear,
    pub log_var: Linear,
    pub vectors: Option<Linear>,
}

/// Tape handles for the encoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub mu: Var,
    /// Raw (unclamped) log-variance head.
    pub log_var: Var,
    pub vectors: Option<Var>,
}

fn conv_out(n: usize) -> usize {
    (n - 1) / ConvShape::STRIDE + 1
}

impl ReferenceEncoder {
    pub fn new(store: &mut ParamStore, config: ReferenceEncoderConfig) -> Self {
        let [c1, c2] = config.channels;
        let conv = [(1, c1, "ref.conv1"), (c1, c2, "ref.conv2")].map(|(cin, cout, name)| {
            let k = store.register(&format!("{name}.kernel"), cout, cin * 9, Init::Glorot);
            let b = store.register(&format!("{name}.bias"), 1, cout, Init::Zeros);
            (k, b)
        });
        let width = conv_out(conv_out(config.bands));
        let gru = Gru::new(store, "ref.gru", c2 * width, config.hidden);
        let d = config.latent_dim;
        let head = |store: &mut ParamStore, name| {
            Linear::with_init(store, name, config.hidden, d, Init::Normal(0.01), Some(Init::Zeros))
        };
        let mu = head(store, "ref.mu");
        let log_var = head(store, "ref.log_var");
        let vectors = (config.vector_heads > 0).then(|| {
            let n = config.vector_heads;
            let w = store.register("ref.vectors.w", n * d, config.hidden, Init::Normal(0.01));
            // Unit-norm rows keep the initial reflectors well away from zero.
            let b = store.register("ref.vectors.b", n, d, Init::UnitRows);
            Linear {
                w,
                b: Some(b),
                in_dim: config.hidden,
                out_dim: n * d,
            }
        });
        Self {
            config,
            conv,
            gru,
            mu,
            log_var,
            vectors,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mel: &MelGram) -> Result<EncoderVars> {
        if mel.frames() == 0 {
            return Err(Error::Empty("reference mel-spectrogram"));
        }
        check_len(self.config.bands, mel.bands())?;
        let [c1, c2] = self.config.channels;
        let shape1 = ConvShape {
            in_channels: 1,
            out_channels: c1,
            height: mel.frames(),
            width: mel.bands(),
        };
        let shape2 = ConvShape {
            in_channels: c1,
            out_channels: c2,
            height: shape1.out_height(),
            width: shape1.out_width(),
        };
        let mut x = tape.input(mel.to_f64());
        for (&(k, b), shape) in self.conv.iter().zip([shape1, shape2]) {
            let (k, b) = (tape.param(store, k), tape.param(store, b));
            let y = tape.conv2d(x, k, b, shape)?;
            x = tape.relu(y);
        }
        let (steps, width) = (shape2.out_height(), shape2.out_width());
        let mut h = tape.input(vec![0.0; self.config.hidden]);
        for t in 0..steps {
            let idx = (0..c2)
                .flat_map(|c| (0..width).map(move |w| (c * steps + t) * width + w))
                .collect();
            let frame = tape.gather(x, idx);
            h = self.gru.step(tape, store, frame, h);
        }
        Ok(EncoderVars {
            mu: self.mu.forward(tape, store, h),
            log_var: self.log_var.forward(tape, store, h),
            vectors: self.vectors.as_ref().map(|l| l.forward(tape, store, h)),
        })
    }
}

/// Posterior and flattened vector-head outputs for one spectrogram.
pub fn reference_encode(
    encoder: &ReferenceEncoder,
    store: &ParamStore,
    mel: &MelGram,
) -> Result<(DiagGaussian, Vec<f64>)> {
    let mut tape = Tape::new();
    let out = encoder.forward(&mut tape, store, mel)?;
    let posterior = DiagGaussian::new(tape.value(out.mu).to_vec(), tape.value(out.log_var).to_vec())?;
    let heads = out.vectors.map(|v| tape.value(v).to_vec()).unwrap_or_default();
    Ok((posterior, heads))
}

/// Pre- and post-flow latent of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z0: Vec<f64>,
    pub zk: Vec<f64>,
    pub posterior: DiagGaussian,
    pub stack: FlowStack,
}

/// Samples `z0 = mu + sigma * eps` from the posterior and pushes it through the
/// flow.
pub fn posterior_sample(posterior: &DiagGaussian, stack: &FlowStack, eps: &[f64]) -> Result<LatentSample> {
    let z0 = gaussian_sample(posterior, eps)?;
    let zk = compose_flow(stack, &z0)?;
    Ok(LatentSample {
        z0,
        zk,
        posterior: posterior.clone(),
        stack: stack.clone(),
    })
}

/// `recon + beta * kl`.
pub fn elbo_loss(recon_l2: f64, kl: f64, beta: f64) -> Result<f64> {
    if !(recon_l2 >= 0.0 && kl >= 0.0 && beta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "ELBO terms must be non-negative (recon {recon_l2}, kl {kl}, beta {beta})"
        )));
    }
    Ok(recon_l2 + beta * kl)
}

/// KL to the standard normal, averaged over latent dimensions, on the tape.
pub fn kl_per_dim(tape: &mut Tape, mu: Var, log_var: Var) -> Var {
    let lv = tape.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX);
    let var = tape.exp(lv);
    let mu2 = tape.mul(mu, mu);
    let a = tape.add(var, mu2);
    let b = tape.sub(a, lv);
    let c = tape.affine(b, 0.5, -0.5);
    tape.mean(c)
}

/// `mu + exp(log_var / 2) * eps` on the tape, with the clamp applied.
pub fn reparameterize(tape: &mut Tape, mu: Var, log_var: Var, eps: &[f64]) -> Var {
    let lv = tape.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX);
    let half = tape.affine(lv, 0.5, 0.0);
    let sd = tape.exp(half);
    let e = tape.input(eps.to_vec());
    let noise = tape.mul(sd, e);
    tape.add(mu, noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Arch, HouseholderVector};
    use crate::numerics::{diag_gaussian_kl, grad_check, RngStream};

    fn config(vector_heads: usize) -> ReferenceEncoderConfig {
        ReferenceEncoderConfig {
            bands: 6,
            channels: [2, 3],
            hidden: 4,
            latent_dim: 3,
            vector_heads,
        }
    }

    fn random_mel(seed: u64, frames: usize, bands: usize) -> MelGram {
        MelGram::from_f64(frames, bands, &RngStream::new(seed, "mel").normal_vec(frames * bands)).unwrap()
    }

    #[test]
    fn zero_heads_give_standard_posterior() {
        let mut store = ParamStore::new(1);
        let enc = ReferenceEncoder::new(&mut store, config(0));
        for id in [enc.mu.w, enc.mu.b.unwrap(), enc.log_var.w, enc.log_var.b.unwrap()] {
            store.get_mut(id).iter_mut().for_each(|x| *x = 0.0);
        }
        let (post, heads) = reference_encode(&enc, &store, &MelGram::zeros(5, 6)).unwrap();
        assert_eq!(post, DiagGaussian::standard(3));
        assert!(heads.is_empty());
    }

    #[test]
    fn output_shapes_and_determinism() {
        let mut store = ParamStore::new(2);
        let enc = ReferenceEncoder::new(&mut store, config(4));
        let mel = random_mel(2, 7, 6);
        let (post, heads) = reference_encode(&enc, &store, &mel).unwrap();
        assert_eq!(post.dim(), 3);
        assert_eq!(heads.len(), 4 * 3);
        assert_eq!(
            (post.clone(), heads.clone()),
            reference_encode(&enc, &store, &mel).unwrap()
        );
        // A single frame is a valid reference.
        assert!(reference_encode(&enc, &store, &random_mel(3, 1, 6)).is_ok());
        assert!(reference_encode(&enc, &store, &random_mel(3, 4, 5)).is_err());
    }

    #[test]
    fn posterior_sample_cases() {
        let post = DiagGaussian::new(vec![0.5, -1.0, 2.0], vec![0.1, 0.2, -0.3]).unwrap();
        let v = HouseholderVector::new(vec![0.3, 0.4, -0.1]).unwrap();
        let stack = FlowStack::new(Arch::Arch3, vec![v.clone()]).unwrap();
        let s = posterior_sample(&post, &stack, &[0.0; 3]).unwrap();
        assert_eq!(s.z0, post.mu());
        for (a, b) in s.zk.iter().zip(v.matrix().matvec(post.mu()).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
        let vanilla = posterior_sample(&post, &FlowStack::identity(Arch::Vanilla), &[0.3, 0.1, -0.2]).unwrap();
        assert_eq!(vanilla.zk, vanilla.z0);
    }

    #[test]
    fn elbo_arithmetic() {
        assert_eq!(elbo_loss(1.0, 2.0, 0.0).unwrap(), 1.0);
        assert_eq!(elbo_loss(1.0, 2.0, 1.0).unwrap(), 3.0);
        assert!((elbo_loss(0.7, 0.4, 0.1).unwrap() - 0.74).abs() < 1e-15);
        assert!(elbo_loss(-0.1, 0.0, 1.0).is_err());
        assert!(elbo_loss(0.1, -1.0, 1.0).is_err());
        assert!(elbo_loss(0.1, 1.0, -1.0).is_err());
    }

    #[test]
    fn tape_kl_matches_closed_form() {
        let mu = vec![0.3, -1.2, 0.0, 2.0];
        let lv = vec![0.5, -0.7, 1.1, 0.0];
        let mut tape = Tape::new();
        let (m, l) = (tape.input(mu.clone()), tape.input(lv.clone()));
        let kl = kl_per_dim(&mut tape, m, l);
        let want = diag_gaussian_kl(&DiagGaussian::new(mu, lv).unwrap()) / 4.0;
        assert!((tape.scalar(kl) - want).abs() < 1e-14);
    }

    #[test]
    fn encoder_gradient_check() {
        let mut store = ParamStore::new(4);
        let enc = ReferenceEncoder::new(&mut store, config(2));
        let mel = random_mel(4, 6, 6);
        let w = RngStream::new(4, "w").normal_vec(3 + 3 + 6);
        // Gradient with respect to the whole parameter vector, through every
        // head.
        let ids: Vec<ParamId> = store.ids().collect();
        let sizes: Vec<usize> = ids.iter().map(|&id| store.get(id).len()).collect();
        let x0: Vec<f64> = ids.iter().flat_map(|&id| store.get(id).to_vec()).collect();
        let f = |x: &[f64]| {
            let mut s = store.clone();
            let mut off = 0;
            for (&id, &n) in ids.iter().zip(&sizes) {
                s.get_mut(id).copy_from_slice(&x[off..off + n]);
                off += n;
            }
            let mut tape = Tape::new();
            let out = enc.forward(&mut tape, &s, &mel).unwrap();
            let all = tape.concat(&[out.mu, out.log_var, out.vectors.unwrap()]);
            let wv = tape.input(w.clone());
            let loss = tape.dot(all, wv);
            let g = tape.backward(loss).params(&s);
            (tape.scalar(loss), g.into_iter().flatten().collect())
        };
        assert!(grad_check(f, &x0, 1e-5).unwrap() < 1e-4);
    }
}
