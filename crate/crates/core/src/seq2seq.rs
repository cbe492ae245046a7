//! Phoneme encoder, additive attention and the autoregressive mel decoder.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_len, Error, Result};
use crate::nn::{Gru, Linear};
use crate::numerics::{all_finite, Mat64};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Phoneme ids of one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PhonemeSequence(Vec<usize>);

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty("phoneme sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidArgument(alloc::format!(
                "phoneme id {bad} outside vocabulary of {vocab}"
            )));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Frame-by-band energy array standing in for a mel-spectrogram.
///
/// Values are stored in single precision so that the on-disk representation
/// is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct MelGram {
    frames: usize,
    bands: usize,
    data: Vec<f32>,
}

impl MelGram {
    pub fn new(frames: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || bands == 0 {
            return Err(Error::Empty("mel-spectrogram"));
        }
        check_len(frames * bands, data.len())?;
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("mel-spectrogram".into()));
        }
        Ok(Self { frames, bands, data })
    }

    /// Rounds `f64` values to single precision.
    pub fn from_f64(frames: usize, bands: usize, data: &[f64]) -> Result<Self> {
        Self::new(frames, bands, data.iter().map(|&x| x as f32).collect())
    }

    pub fn zeros(frames: usize, bands: usize) -> Self {
        Self {
            frames,
            bands,
            data: vec![0.0; frames * bands],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, f: usize) -> &[f32] {
        &self.data[f * self.bands..(f + 1) * self.bands]
    }

    pub fn get(&self, f: usize, b: usize) -> f32 {
        self.data[f * self.bands + b]
    }

    pub fn row_f64(&self, f: usize) -> Vec<f64> {
        self.row(f).iter().map(|&x| f64::from(x)).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| f64::from(x)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seq2SeqConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub attn_dim: usize,
    pub bands: usize,
    pub latent_dim: usize,
}

impl Seq2SeqConfig {
    /// Width of one conditioned encoder row: phoneme encoding plus latent.
    pub fn cond_dim(&self) -> usize {
        self.enc_hidden + self.latent_dim
    }
}

/// Single-head additive attention `score(q, k) = v . tanh(W_q q + b + W_k k)`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    pub key: ParamId,
    pub energy: ParamId,
    pub attn_dim: usize,
}

/// Keys prepared once per utterance: the raw rows (also used as values) and
/// their projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionKeys {
    pub rows: Var,
    pub projected: Var,
    pub len: usize,
}

impl Attention {
    pub fn prepare(&self, tape: &mut Tape, store: &ParamStore, rows: &[Var]) -> AttentionKeys {
        let wk = tape.param(store, self.key);
        let projected: Vec<Var> = rows.iter().map(|&r| tape.matvec(wk, r)).collect();
        AttentionKeys {
            rows: tape.concat(rows),
            projected: tape.concat(&projected),
            len: rows.len(),
        }
    }

    /// Returns `(context, weights)`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, query: Var, keys: &AttentionKeys) -> (Var, Var) {
        let pq = self.query.forward(tape, store, query);
        let energy = tape.param(store, self.energy);
        let scores = tape.additive_scores(pq, keys.projected, energy);
        let weights = tape.softmax(scores);
        let context = tape.matvec_t(keys.rows, weights);
        (context, weights)
    }
}

/// Phoneme encoder, attention and decoder parameters.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub config: Seq2SeqConfig,
    pub embedding: ParamId,
    pub encoder: Gru,
    pub attention: Attention,
    pub decoder: Gru,
    pub output: Linear,
    /// Multiplier on each fed-back frame in free-running decoding. Set to the
    /// keep probability of decoder input dropout, as for any dropout at
    /// inference; 1 when training used none.
    pub feedback_scale: f64,
}

impl Seq2Seq {
    pub fn new(store: &mut ParamStore, config: Seq2SeqConfig) -> Self {
        let c = config;
        let cond = c.cond_dim();
        Self {
            config,
            embedding: store.register("s2s.embed", c.vocab, c.embed_dim, Init::Normal(0.5)),
            encoder: Gru::new(store, "s2s.enc", c.embed_dim, c.enc_hidden),
            attention: Attention {
                query: Linear::new(store, "s2s.attn.query", c.dec_hidden, c.attn_dim),
                key: store.register("s2s.attn.key", c.attn_dim, cond, Init::Glorot),
                energy: store.register("s2s.attn.energy", 1, c.attn_dim, Init::Glorot),
                attn_dim: c.attn_dim,
            },
            decoder: Gru::new(store, "s2s.dec", c.bands + cond, c.dec_hidden),
            output: Linear::new(store, "s2s.out", c.dec_hidden + cond, c.bands),
            feedback_scale: 1.0,
        }
    }

    /// One hidden vector per phoneme.
    pub fn phoneme_encode(&self, tape: &mut Tape, store: &ParamStore, seq: &PhonemeSequence) -> Result<Vec<Var>> {
        if seq.is_empty() {
            return Err(Error::Empty("phoneme sequence"));
        }
        let (e, hd) = (self.config.embed_dim, self.config.enc_hidden);
        let table = tape.param(store, self.embedding);
        let mut h = tape.input(vec![0.0; hd]);
        let mut out = Vec::with_capacity(seq.len());
        for &id in seq.ids() {
            check_vocab(id, self.config.vocab)?;
            let x = tape.gather(table, (id * e..(id + 1) * e).collect());
            h = self.encoder.step(tape, store, x, h);
            out.push(h);
        }
        Ok(out)
    }

    fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        conditioned: &[Var],
        n_frames: usize,
        mut next_input: impl FnMut(&mut Tape, usize, Var) -> Var,
    ) -> Result<Vec<Var>> {
        if conditioned.is_empty() {
            return Err(Error::Empty("conditioned encoder rows"));
        }
        for &r in conditioned {
            check_len(self.config.cond_dim(), tape.dim(r))?;
        }
        let keys = self.attention.prepare(tape, store, conditioned);
        let mut h = tape.input(vec![0.0; self.config.dec_hidden]);
        let mut prev = tape.input(vec![0.0; self.config.bands]);
        let mut frames = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            let (context, _) = self.attention.step(tape, store, h, &keys);
            let x = tape.concat(&[prev, context]);
            h = self.decoder.step(tape, store, x, h);
            let features = tape.concat(&[h, context]);
            let y = self.output.forward(tape, store, features);
            frames.push(y);
            prev = next_input(tape, t, y);
        }
        Ok(frames)
    }

    /// Teacher-forced decoding: frame `t` is predicted from the ground-truth
    /// frame `t - 1` (zeros for the first frame). Returns the predicted frames
    /// and the mean squared error over frames and bands.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        conditioned: &[Var],
        target: &MelGram,
    ) -> Result<(Vec<Var>, Var)> {
        self.decode_teacher_forced_masked(tape, store, conditioned, target, None)
    }

    /// Teacher forcing where ground-truth frame `t` is replaced by zeros
    /// whenever `keep[t]` is false (decoder input dropout).
    pub fn decode_teacher_forced_masked(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        conditioned: &[Var],
        target: &MelGram,
        keep: Option<&[bool]>,
    ) -> Result<(Vec<Var>, Var)> {
        check_len(self.config.bands, target.bands())?;
        if let Some(k) = keep {
            check_len(target.frames(), k.len())?;
        }
        let bands = self.config.bands;
        let frames = self.decode(tape, store, conditioned, target.frames(), |tape, t, _| {
            if keep.is_none_or(|k| k[t]) {
                tape.input(target.row_f64(t))
            } else {
                tape.input(vec![0.0; bands])
            }
        })?;
        let predicted = tape.concat(&frames);
        let truth = tape.input(target.to_f64());
        let loss = tape.mse(predicted, truth);
        Ok((frames, loss))
    }

    /// Free-running decoding: every step consumes the previous generated frame
    /// (rounded to single precision, exactly as stored in the output) times
    /// `feedback_scale`.
    pub fn decode_free_running(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        conditioned: &[Var],
        n_frames: usize,
    ) -> Result<MelGram> {
        if n_frames == 0 {
            return Err(Error::Empty("frame count"));
        }
        let frames = self.decode(tape, store, conditioned, n_frames, |tape, _, y| {
            let scale = self.feedback_scale;
            let rounded = tape.value(y).iter().map(|&x| f64::from(x as f32) * scale).collect();
            tape.input(rounded)
        })?;
        let mut data = Vec::with_capacity(n_frames * self.config.bands);
        for f in frames {
            data.extend_from_slice(tape.value(f));
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite("decoder output".into()));
        }
        MelGram::from_f64(n_frames, self.config.bands, &data)
    }
}

fn check_vocab(id: usize, vocab: usize) -> Result<()> {
    if id < vocab {
        Ok(())
    } else {
        Err(Error::InvalidArgument(alloc::format!(
            "phoneme id {id} outside vocabulary of {vocab}"
        )))
    }
}

/// Appends `z` to every encoder row.
pub fn broadcast_concat(tape: &mut Tape, encodings: &[Var], z: Var) -> Vec<Var> {
    encodings.iter().map(|&e| tape.concat(&[e, z])).collect()
}

/// Dense form of [`broadcast_concat`]: `L x H` rows become `L x (H + d)`.
pub fn broadcast_concat_dense(encodings: &Mat64, z: &[f64]) -> Mat64 {
    let rows: Vec<Vec<f64>> = (0..encodings.rows())
        .map(|r| {
            let mut row = encodings.row(r).to_vec();
            row.extend_from_slice(z);
            row
        })
        .collect();
    Mat64::from_rows(&rows).expect("rows share a width")
}

/// Encodes a phoneme sequence outside of any training graph.
pub fn phoneme_encode(model: &Seq2Seq, store: &ParamStore, seq: &PhonemeSequence) -> Result<Mat64> {
    let mut tape = Tape::new();
    let rows = model.phoneme_encode(&mut tape, store, seq)?;
    let rows: Vec<Vec<f64>> = rows.iter().map(|&r| tape.value(r).to_vec()).collect();
    Mat64::from_rows(&rows)
}

/// One attention read outside of any training graph. `keys` rows are the
/// conditioned encoder rows. Returns `(context, weights)`.
pub fn attention_step(
    model: &Seq2Seq,
    store: &ParamStore,
    query: &[f64],
    keys: &Mat64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(model.config.dec_hidden, query.len())?;
    check_len(model.config.cond_dim(), keys.cols())?;
    if keys.rows() == 0 {
        return Err(Error::Empty("attention keys"));
    }
    let mut tape = Tape::new();
    let rows: Vec<Var> = (0..keys.rows()).map(|r| tape.input(keys.row(r).to_vec())).collect();
    let q = tape.input(query.to_vec());
    let prepared = model.attention.prepare(&mut tape, store, &rows);
    let (ctx, w) = model.attention.step(&mut tape, store, q, &prepared);
    Ok((tape.value(ctx).to_vec(), tape.value(w).to_vec()))
}

/// Teacher-forced decoding of dense conditioned rows; returns the prediction
/// (rounded to single precision) and the L2 loss.
pub fn decode_teacher_forced(
    model: &Seq2Seq,
    store: &ParamStore,
    conditioned: &Mat64,
    target: &MelGram,
) -> Result<(MelGram, f64)> {
    let mut tape = Tape::new();
    let rows: Vec<Var> = (0..conditioned.rows())
        .map(|r| tape.input(conditioned.row(r).to_vec()))
        .collect();
    let (frames, loss) = model.decode_teacher_forced(&mut tape, store, &rows, target)?;
    let mut data = Vec::new();
    for f in frames {
        data.extend_from_slice(tape.value(f));
    }
    Ok((
        MelGram::from_f64(target.frames(), target.bands(), &data)?,
        tape.scalar(loss),
    ))
}

/// Free-running decoding of dense conditioned rows.
pub fn decode_free_running(
    model: &Seq2Seq,
    store: &ParamStore,
    conditioned: &Mat64,
    n_frames: usize,
) -> Result<MelGram> {
    let mut tape = Tape::new();
    let rows: Vec<Var> = (0..conditioned.rows())
        .map(|r| tape.input(conditioned.row(r).to_vec()))
        .collect();
    model.decode_free_running(&mut tape, store, &rows, n_frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, grad_check, RngStream};

    fn tiny() -> Seq2SeqConfig {
        Seq2SeqConfig {
            vocab: 6,
            embed_dim: 3,
            enc_hidden: 4,
            dec_hidden: 5,
            attn_dim: 3,
            bands: 4,
            latent_dim: 2,
        }
    }

    fn build(seed: u64) -> (Seq2Seq, ParamStore) {
        let mut store = ParamStore::new(seed);
        let m = Seq2Seq::new(&mut store, tiny());
        (m, store)
    }

    fn random_mat(rng: &mut RngStream, rows: usize, cols: usize) -> Mat64 {
        Mat64::from_vec(rows, cols, rng.normal_vec(rows * cols)).unwrap()
    }

    #[test]
    fn phoneme_sequence_validation() {
        assert!(PhonemeSequence::new(vec![], 4).is_err());
        assert!(PhonemeSequence::new(vec![1, 4], 4).is_err());
        assert_eq!(PhonemeSequence::new(vec![0, 3], 4).unwrap().len(), 2);
    }

    #[test]
    fn encoder_shapes_and_order_sensitivity() {
        let (m, store) = build(1);
        let one = phoneme_encode(&m, &store, &PhonemeSequence::new(vec![2], 6).unwrap()).unwrap();
        assert_eq!((one.rows(), one.cols()), (1, 4));
        let seq = PhonemeSequence::new(vec![0, 1, 2, 5], 6).unwrap();
        let a = phoneme_encode(&m, &store, &seq).unwrap();
        assert_eq!(a, phoneme_encode(&m, &store, &seq).unwrap());
        let perm = PhonemeSequence::new(vec![5, 2, 1, 0], 6).unwrap();
        assert_ne!(a.row(3), phoneme_encode(&m, &store, &perm).unwrap().row(3));
    }

    #[test]
    fn broadcast_concat_suffix() {
        let mut rng = RngStream::new(2, "bc");
        let enc = random_mat(&mut rng, 3, 4);
        let z = rng.normal_vec(2);
        let c = broadcast_concat_dense(&enc, &z);
        assert_eq!(c.cols(), 6);
        for r in 0..3 {
            assert_eq!(&c.row(r)[4..], z.as_slice());
            assert_eq!(&c.row(r)[..4], enc.row(r));
        }
        let zero = broadcast_concat_dense(&random_mat(&mut rng, 1, 4), &[0.0, 0.0]);
        assert_eq!(&zero.row(0)[4..], &[0.0, 0.0]);

        let mut tape = Tape::new();
        let rows = [tape.input(enc.row(0).to_vec())];
        let zv = tape.input(z.clone());
        let out = broadcast_concat(&mut tape, &rows, zv);
        assert_eq!(tape.value(out[0]), c.row(0));
    }

    #[test]
    fn attention_single_row_and_uniform() {
        let (m, store) = build(3);
        let mut rng = RngStream::new(3, "att");
        let q = rng.normal_vec(5);
        let single = random_mat(&mut rng, 1, 6);
        let (ctx, w) = attention_step(&m, &store, &q, &single).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(ctx, single.row(0));
        let row = rng.normal_vec(6);
        let same = Mat64::from_rows(&[row.clone(), row.clone(), row.clone(), row]).unwrap();
        let (_, w) = attention_step(&m, &store, &q, &same).unwrap();
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn attention_matches_naive_reference() {
        let (m, store) = build(4);
        let mut rng = RngStream::new(4, "naive");
        let q = rng.normal_vec(5);
        let keys = random_mat(&mut rng, 5, 6);
        let (ctx, w) = attention_step(&m, &store, &q, &keys).unwrap();

        let wq = Mat64::from_vec(3, 5, store.get(m.attention.query.w).to_vec()).unwrap();
        let bq = store.get(m.attention.query.b.unwrap());
        let wk = Mat64::from_vec(3, 6, store.get(m.attention.key).to_vec()).unwrap();
        let v = store.get(m.attention.energy);
        let pq = wq.matvec(&q).unwrap();
        let scores: Vec<f64> = (0..5)
            .map(|i| {
                let pk = wk.matvec(keys.row(i)).unwrap();
                let t: Vec<f64> = (0..3).map(|d| (pq[d] + bq[d] + pk[d]).tanh()).collect();
                dot(v, &t)
            })
            .collect();
        let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
        for i in 0..5 {
            assert!((w[i] - (scores[i] - mx).exp() / z).abs() < 1e-12);
        }
        for c in 0..6 {
            let want: f64 = (0..5).map(|i| w[i] * keys[(i, c)]).sum();
            assert!((ctx[c] - want).abs() < 1e-12);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_weight_decoder_losses() {
        let (m, mut store) = build(5);
        for t in store.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        let cond = Mat64::zeros(2, 6);
        let zero = MelGram::zeros(3, 4);
        let (_, l0) = decode_teacher_forced(&m, &store, &cond, &zero).unwrap();
        assert_eq!(l0, 0.0);
        let ones = MelGram::new(3, 4, vec![1.0; 12]).unwrap();
        let (_, l1) = decode_teacher_forced(&m, &store, &cond, &ones).unwrap();
        assert_eq!(l1, 1.0);
    }

    #[test]
    fn decoder_shape_mismatch() {
        let (m, store) = build(5);
        let cond = Mat64::zeros(2, 6);
        assert!(decode_teacher_forced(&m, &store, &cond, &MelGram::zeros(3, 5)).is_err());
        assert!(decode_teacher_forced(&m, &store, &Mat64::zeros(2, 5), &MelGram::zeros(3, 4)).is_err());
        assert!(decode_free_running(&m, &store, &cond, 0).is_err());
    }

    #[test]
    fn free_running_equals_teacher_forcing_on_own_output() {
        let (m, store) = build(6);
        let mut rng = RngStream::new(6, "fr");
        let cond = random_mat(&mut rng, 3, 6);
        let free = decode_free_running(&m, &store, &cond, 9).unwrap();
        assert_eq!(free, decode_free_running(&m, &store, &cond, 9).unwrap());
        let (tf, loss) = decode_teacher_forced(&m, &store, &cond, &free).unwrap();
        assert_eq!(tf, free);
        assert!(loss < 1e-14);
        let first = decode_free_running(&m, &store, &cond, 1).unwrap();
        assert_eq!(first.row(0), free.row(0));
    }

    /// Straightforward re-implementation with explicit loops, sharing no
    /// code with the tape path.
    fn naive_teacher_forced_loss(m: &Seq2Seq, store: &ParamStore, cond: &Mat64, target: &MelGram) -> f64 {
        let c = m.config;
        let get = |id: ParamId| store.get(id);
        let mv = |w: &[f64], x: &[f64]| -> Vec<f64> {
            w.chunks(x.len())
                .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect()
        };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let gru = |g: &Gru, x: &[f64], h: &[f64]| -> Vec<f64> {
            let hd = g.hidden;
            let gx: Vec<f64> = mv(get(g.w), x).iter().zip(get(g.bx)).map(|(a, b)| a + b).collect();
            let gh: Vec<f64> = mv(get(g.u), h).iter().zip(get(g.bh)).map(|(a, b)| a + b).collect();
            (0..hd)
                .map(|i| {
                    let u = sig(gx[i] + gh[i]);
                    let r = sig(gx[hd + i] + gh[hd + i]);
                    let n = (gx[2 * hd + i] + r * gh[2 * hd + i]).tanh();
                    n + u * (h[i] - n)
                })
                .collect()
        };
        let mut h = vec![0.0; c.dec_hidden];
        let mut prev = vec![0.0; c.bands];
        let mut sq = 0.0;
        for t in 0..target.frames() {
            let pq: Vec<f64> = mv(get(m.attention.query.w), &h)
                .iter()
                .zip(get(m.attention.query.b.unwrap()))
                .map(|(a, b)| a + b)
                .collect();
            let scores: Vec<f64> = (0..cond.rows())
                .map(|i| {
                    let pk = mv(get(m.attention.key), cond.row(i));
                    (0..c.attn_dim)
                        .map(|d| get(m.attention.energy)[d] * (pq[d] + pk[d]).tanh())
                        .sum()
                })
                .collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            let mut ctx = vec![0.0; c.cond_dim()];
            for i in 0..cond.rows() {
                let w = (scores[i] - mx).exp() / z;
                for k in 0..ctx.len() {
                    ctx[k] += w * cond[(i, k)];
                }
            }
            let mut x = prev.clone();
            x.extend_from_slice(&ctx);
            h = gru(&m.decoder, &x, &h);
            let mut feat = h.clone();
            feat.extend_from_slice(&ctx);
            let y: Vec<f64> = mv(get(m.output.w), &feat)
                .iter()
                .zip(get(m.output.b.unwrap()))
                .map(|(a, b)| a + b)
                .collect();
            for b in 0..c.bands {
                let d = y[b] - f64::from(target.get(t, b));
                sq += d * d;
            }
            prev = target.row_f64(t);
        }
        sq / (target.frames() * c.bands) as f64
    }

    #[test]
    fn teacher_forced_loss_matches_naive_loops() {
        let (m, store) = build(7);
        let mut rng = RngStream::new(7, "naive-dec");
        let cond = random_mat(&mut rng, 3, 6);
        let target = MelGram::from_f64(5, 4, &rng.normal_vec(20)).unwrap();
        let (_, loss) = decode_teacher_forced(&m, &store, &cond, &target).unwrap();
        let want = naive_teacher_forced_loss(&m, &store, &cond, &target);
        assert!((loss - want).abs() < 1e-10, "{loss} vs {want}");
    }

    #[test]
    fn decoder_gradient_check() {
        let (m, store) = build(8);
        let mut rng = RngStream::new(8, "dec-grad");
        let target = MelGram::from_f64(4, 4, &rng.normal_vec(16)).unwrap();
        let cond0 = rng.normal_vec(2 * 6);
        let f = |x: &[f64]| {
            let mut tape = Tape::new();
            let rows = [tape.input(x[..6].to_vec()), tape.input(x[6..].to_vec())];
            let (_, loss) = m.decode_teacher_forced(&mut tape, &store, &rows, &target).unwrap();
            let g = tape.backward(loss);
            let mut grad = g.wrt(&tape, rows[0]);
            grad.extend(g.wrt(&tape, rows[1]));
            (tape.scalar(loss), grad)
        };
        assert!(grad_check(f, &cond0, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn masked_teacher_forcing() {
        let (m, store) = build(9);
        let mut rng = RngStream::new(9, "mask");
        let cond = rng.normal_vec(2 * 6);
        let a = MelGram::from_f64(4, 4, &rng.normal_vec(16)).unwrap();
        let b = MelGram::from_f64(4, 4, &rng.normal_vec(16)).unwrap();
        let run = |target: &MelGram, keep: Option<&[bool]>| {
            let mut tape = Tape::new();
            let rows = [tape.input(cond[..6].to_vec()), tape.input(cond[6..].to_vec())];
            let (frames, loss) = m
                .decode_teacher_forced_masked(&mut tape, &store, &rows, target, keep)
                .unwrap();
            let out: Vec<Vec<f64>> = frames.iter().map(|&f| tape.value(f).to_vec()).collect();
            (out, tape.scalar(loss))
        };
        assert_eq!(run(&a, Some(&[true; 4])), run(&a, None));
        // With every input dropped the predictions ignore the target.
        assert_eq!(run(&a, Some(&[false; 4])).0, run(&b, Some(&[false; 4])).0);
        assert_ne!(run(&a, None).0, run(&b, None).0);
        let mut tape = Tape::new();
        let rows = [tape.input(cond[..6].to_vec())];
        assert!(m
            .decode_teacher_forced_masked(&mut tape, &store, &rows, &a, Some(&[true; 3]))
            .is_err());
    }

    #[test]
    fn zero_feedback_matches_fully_dropped_teacher_forcing() {
        let (mut m, store) = build(10);
        m.feedback_scale = 0.0;
        let mut rng = RngStream::new(10, "feedback");
        let cond = random_mat(&mut rng, 3, 6);
        let free = decode_free_running(&m, &store, &cond, 5).unwrap();
        let target = MelGram::from_f64(5, 4, &rng.normal_vec(20)).unwrap();
        let mut tape = Tape::new();
        let rows: Vec<Var> = (0..3).map(|r| tape.input(cond.row(r).to_vec())).collect();
        let (frames, _) = m
            .decode_teacher_forced_masked(&mut tape, &store, &rows, &target, Some(&[false; 5]))
            .unwrap();
        let forced: Vec<f64> = frames.iter().flat_map(|&f| tape.value(f).to_vec()).collect();
        assert_eq!(free, MelGram::from_f64(5, 4, &forced).unwrap());
    }
}
