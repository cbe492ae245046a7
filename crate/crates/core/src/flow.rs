//! Householder reflections and the normalizing flow built from them.
//!
//! A flow step maps `z` to `z - 2 v (v . z) / |v|^2`. Each step is orthogonal
//! with determinant -1, so a stack of `K` steps turns samples of a diagonal
//! Gaussian into samples of a full-covariance Gaussian without changing the
//! density volume.
//!
//! Three architectures decide where the vectors come from:
//!
//! * [`Arch::Arch1`]: the reference encoder predicts `v_1`; every further
//!   vector is an affine map of the previous one.
//! * [`Arch::Arch2`]: the reference encoder predicts all `K` vectors.
//! * [`Arch::Arch3`]: `K` trainable vectors shared by every utterance.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{dot, Mat64};
#[allow(unused_imports)] // float math for no_std; inherent methods need std
use num_traits::Float;

/// Reflectors shorter than this are rejected.
pub const HOUSEHOLDER_EPS: f64 = 1e-8;

/// Model family: the baseline VAE or one of the three flow architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Vanilla,
    Arch1,
    Arch2,
    Arch3,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Vanilla, Arch::Arch1, Arch::Arch2, Arch::Arch3];

    pub fn has_flow(self) -> bool {
        self != Arch::Vanilla
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Vanilla => "vanilla",
            Arch::Arch1 => "arch1",
            Arch::Arch2 => "arch2",
            Arch::Arch3 => "arch3",
        }
    }

    /// Number of vectors the reference encoder must emit for a `k`-step flow.
    pub fn encoder_vectors(self, k: usize) -> usize {
        match self {
            Arch::Arch1 => 1,
            Arch::Arch2 => k,
            Arch::Vanilla | Arch::Arch3 => 0,
        }
    }
}

impl core::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown architecture {s}")))
    }
}

/// A non-degenerate reflection vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HouseholderVector(Vec<f64>);

impl HouseholderVector {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = dot(&v, &v).sqrt();
        if !(n >= HOUSEHOLDER_EPS) {
            return Err(Error::DegenerateReflector { norm: n });
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Dense `I - 2 v v^T / |v|^2`.
    pub fn matrix(&self) -> Mat64 {
        let d = self.dim();
        let nn = dot(&self.0, &self.0);
        let mut m = Mat64::identity(d);
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] -= 2.0 * self.0[i] * self.0[j] / nn;
            }
        }
        m
    }
}

/// `z - 2 v (v . z) / |v|^2`.
pub fn apply_householder(v: &HouseholderVector, z: &[f64]) -> Result<Vec<f64>> {
    check_len(v.dim(), z.len())?;
    let v = v.as_slice();
    let c = 2.0 * dot(v, z) / dot(v, v);
    Ok(z.iter().zip(v).map(|(z, v)| z - c * v).collect())
}

/// Vector-Jacobian product of one reflection: given `dL/dy` at `y = H_v z`,
/// returns `(dL/dv, dL/dz)`.
pub fn householder_backward(v: &[f64], z: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nn = dot(v, v);
    let s = dot(v, z);
    let gv_dot = dot(gy, v);
    let gz = gy.iter().zip(v).map(|(g, v)| g - 2.0 * gv_dot / nn * v).collect();
    let gv = (0..v.len())
        .map(|i| -2.0 * (s / nn * gy[i] + gv_dot / nn * z[i] - 2.0 * gv_dot * s / (nn * nn) * v[i]))
        .collect();
    (gv, gz)
}

/// Ordered reflections `h_1 .. h_K` tagged with the architecture that produced
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    arch: Arch,
    vectors: Vec<HouseholderVector>,
}

impl FlowStack {
    pub fn new(arch: Arch, vectors: Vec<HouseholderVector>) -> Result<Self> {
        if let Some(first) = vectors.first() {
            for v in &vectors {
                check_len(first.dim(), v.dim())?;
            }
        }
        if arch == Arch::Vanilla && !vectors.is_empty() {
            return Err(Error::InvalidArgument("vanilla stack must be empty".into()));
        }
        Ok(Self { arch, vectors })
    }

    /// Empty stack: the flow is the identity.
    pub fn identity(arch: Arch) -> Self {
        Self {
            arch,
            vectors: Vec::new(),
        }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn k(&self) -> usize {
        self.vectors.len()
    }

    pub fn vectors(&self) -> &[HouseholderVector] {
        &self.vectors
    }

    /// Dense product `H_K ... H_1`; identity of size `dim` for an empty stack.
    pub fn matrix(&self, dim: usize) -> Result<Mat64> {
        let mut m = Mat64::identity(dim);
        for v in &self.vectors {
            check_len(dim, v.dim())?;
            m = v.matrix().matmul(&m)?;
        }
        Ok(m)
    }
}

/// `z_K = H_K ... H_1 z_0`.
pub fn compose_flow(stack: &FlowStack, z0: &[f64]) -> Result<Vec<f64>> {
    stack
        .vectors
        .iter()
        .try_fold(z0.to_vec(), |z, v| apply_householder(v, &z))
}

/// Log-absolute-determinant of the flow Jacobian. Reflections are
/// orthogonal, so this is identically zero.
pub fn flow_logdet(_stack: &FlowStack) -> f64 {
    0.0
}

/// Intermediate states `z_0 .. z_K` of one flow evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrace {
    states: Vec<Vec<f64>>,
}

impl FlowTrace {
    pub fn output(&self) -> &[f64] {
        self.states.last().map_or(&[], Vec::as_slice)
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }
}

pub fn forward_traced(stack: &FlowStack, z0: &[f64]) -> Result<FlowTrace> {
    let mut states = Vec::with_capacity(stack.k() + 1);
    states.push(z0.to_vec());
    for v in &stack.vectors {
        let next = apply_householder(v, states.last().expect("non-empty"))?;
        states.push(next);
    }
    Ok(FlowTrace { states })
}

/// Backpropagates `upstream = dL/dz_K` through the flow.
///
/// Returns `dL/dz_0` and `dL/dh_i` for every vector. The trace must come
/// from [`forward_traced`] on the same stack.
pub fn flow_backward(
    stack: &FlowStack,
    trace: Option<&FlowTrace>,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let trace = trace.ok_or(Error::MissingTrace("flow forward pass was not traced"))?;
    if trace.states.len() != stack.k() + 1 {
        return Err(Error::MissingTrace("trace does not match the flow stack"));
    }
    check_len(trace.states[0].len(), upstream.len())?;
    let mut g = upstream.to_vec();
    let mut grad_vectors = vec![Vec::new(); stack.k()];
    for (i, v) in stack.vectors.iter().enumerate().rev() {
        let (gv, gz) = householder_backward(v.as_slice(), &trace.states[i], &g);
        grad_vectors[i] = gv;
        g = gz;
    }
    Ok((g, grad_vectors))
}

/// Square affine map `v -> A v + b` used by [`Arch::Arch1`].
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub a: Mat64,
    pub b: Vec<f64>,
}

impl AffineMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            a: Mat64::identity(dim),
            b: vec![0.0; dim],
        }
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.b.len(), self.a.rows())?;
        let mut out = self.a.matvec(v)?;
        out.iter_mut().zip(&self.b).for_each(|(o, b)| *o += b);
        Ok(out)
    }
}

/// Produces the `k` reflection vectors for an architecture.
///
/// * `head_outputs`: flattened reference-encoder vector heads
///   (`1 x dim` for Arch1, `k x dim` for Arch2, ignored otherwise).
/// * `shared`: the `k` global vectors of Arch3.
/// * `affine`: the `k - 1` maps chaining Arch1's vectors.
pub fn source_vectors(
    arch: Arch,
    k: usize,
    dim: usize,
    head_outputs: &[f64],
    shared: &[Vec<f64>],
    affine: &[AffineMap],
) -> Result<Vec<HouseholderVector>> {
    match arch {
        Arch::Vanilla => Ok(Vec::new()),
        Arch::Arch1 => {
            check_len(dim, head_outputs.len())?;
            check_len(k.saturating_sub(1), affine.len())?;
            if k == 0 {
                return Ok(Vec::new());
            }
            let mut out = Vec::with_capacity(k);
            let mut v = head_outputs.to_vec();
            out.push(HouseholderVector::new(v.clone())?);
            for map in affine {
                v = map.apply(&v)?;
                out.push(HouseholderVector::new(v.clone())?);
            }
            Ok(out)
        }
        Arch::Arch2 => {
            check_len(k * dim, head_outputs.len())?;
            head_outputs
                .chunks(dim.max(1))
                .take(k)
                .map(|c| HouseholderVector::new(c.to_vec()))
                .collect()
        }
        Arch::Arch3 => {
            check_len(k, shared.len())?;
            shared
                .iter()
                .map(|v| {
                    check_len(dim, v.len())?;
                    HouseholderVector::new(v.clone())
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, norm, RngStream};
    use crate::params::ParamStore;
    use crate::tape::Tape;

    fn hv(v: &[f64]) -> HouseholderVector {
        HouseholderVector::new(v.to_vec()).unwrap()
    }

    fn random_stack(rng: &mut RngStream, k: usize, dim: usize) -> FlowStack {
        let vs = (0..k).map(|_| hv(&rng.normal_vec(dim))).collect();
        FlowStack::new(Arch::Arch3, vs).unwrap()
    }

    #[test]
    fn reflects_first_coordinate() {
        assert_eq!(
            apply_householder(&hv(&[1.0, 0.0]), &[3.0, 4.0]).unwrap(),
            vec![-3.0, 4.0]
        );
    }

    #[test]
    fn parallel_vector_is_negated() {
        let out = apply_householder(&hv(&[2.0, 0.0, 0.0]), &[2.0, 0.0, 0.0]).unwrap();
        assert_eq!(out, vec![-2.0, 0.0, 0.0]);
    }

    #[test]
    fn matches_dense_reflection() {
        let mut rng = RngStream::new(1, "dense");
        for _ in 0..20 {
            let v = hv(&rng.normal_vec(8));
            let z = rng.normal_vec(8);
            let fast = apply_householder(&v, &z).unwrap();
            let dense = v.matrix().matvec(&z).unwrap();
            for (a, b) in fast.iter().zip(&dense) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_reflector_rejected() {
        assert!(matches!(
            HouseholderVector::new(vec![1e-9, 0.0]),
            Err(Error::DegenerateReflector { .. })
        ));
        assert!(HouseholderVector::new(vec![f64::NAN]).is_err());
        assert!(apply_householder(&hv(&[1.0, 0.0]), &[1.0]).is_err());
    }

    #[test]
    fn involution_and_norm() {
        let mut rng = RngStream::new(2, "inv");
        for _ in 0..200 {
            let v = hv(&rng.normal_vec(16));
            let z = rng.normal_vec(16);
            let back = apply_householder(&v, &apply_householder(&v, &z).unwrap()).unwrap();
            for (a, b) in back.iter().zip(&z) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn compose_edge_cases() {
        let z = [0.5, -1.0, 2.0];
        assert_eq!(compose_flow(&FlowStack::identity(Arch::Arch3), &z).unwrap(), z.to_vec());
        let v = hv(&[0.3, 0.1, -0.7]);
        let one = FlowStack::new(Arch::Arch2, vec![v.clone()]).unwrap();
        assert_eq!(compose_flow(&one, &z).unwrap(), apply_householder(&v, &z).unwrap());
    }

    #[test]
    fn compose_matches_matrix_product() {
        let mut rng = RngStream::new(3, "compose");
        let stack = random_stack(&mut rng, 2, 5);
        let z = rng.normal_vec(5);
        let h = stack.vectors()[1]
            .matrix()
            .matmul(&stack.vectors()[0].matrix())
            .unwrap();
        let want = h.matvec(&z).unwrap();
        let got = compose_flow(&stack, &z).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_preserved_for_paper_grid() {
        let mut rng = RngStream::new(4, "norm");
        for k in [2, 4, 8, 16] {
            let stack = random_stack(&mut rng, k, 16);
            let z = rng.normal_vec(16);
            assert!((norm(&compose_flow(&stack, &z).unwrap()) - norm(&z)).abs() < 1e-9);
        }
    }

    #[test]
    fn logdet_is_zero_and_determinants_alternate() {
        let mut rng = RngStream::new(5, "det");
        let s1 = random_stack(&mut rng, 1, 6);
        let s2 = random_stack(&mut rng, 2, 6);
        assert_eq!(flow_logdet(&s1), 0.0);
        let d1 = s1.matrix(6).unwrap().determinant().unwrap();
        let d2 = s2.matrix(6).unwrap().determinant().unwrap();
        assert!((d1 + 1.0).abs() < 1e-10);
        assert!((d2 - 1.0).abs() < 1e-10);
        assert!(d1.abs().ln().abs() < 1e-10);
    }

    #[test]
    fn arch3_ignores_encoder_outputs() {
        let shared = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let a = source_vectors(Arch::Arch3, 2, 2, &[5.0, 6.0], &shared, &[]).unwrap();
        let b = source_vectors(Arch::Arch3, 2, 2, &[-1.0, 9.0], &shared, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn arch1_identity_chain_repeats_first_vector() {
        let v1 = [0.2, -0.4, 0.9];
        let maps = vec![AffineMap::identity(3); 3];
        let vs = source_vectors(Arch::Arch1, 4, 3, &v1, &[], &maps).unwrap();
        assert_eq!(vs.len(), 4);
        assert!(vs.iter().all(|v| v.as_slice() == v1));
    }

    #[test]
    fn arch2_slices_encoder_outputs() {
        let heads: Vec<f64> = (1..=12).map(f64::from).collect();
        let vs = source_vectors(Arch::Arch2, 4, 3, &heads, &[], &[]).unwrap();
        for (i, v) in vs.iter().enumerate() {
            assert_eq!(v.as_slice(), &heads[3 * i..3 * i + 3]);
        }
    }

    #[test]
    fn source_count_mismatch() {
        assert!(source_vectors(Arch::Arch2, 4, 3, &[1.0; 9], &[], &[]).is_err());
        assert!(source_vectors(Arch::Arch3, 2, 2, &[], &[vec![1.0, 0.0]], &[]).is_err());
        let maps = vec![AffineMap::identity(2)];
        assert!(source_vectors(Arch::Arch1, 3, 2, &[1.0, 0.0], &[], &maps).is_err());
    }

    #[test]
    fn backward_with_zero_upstream() {
        let mut rng = RngStream::new(6, "zero");
        let stack = random_stack(&mut rng, 3, 4);
        let z0 = rng.normal_vec(4);
        let trace = forward_traced(&stack, &z0).unwrap();
        let (gz, gv) = flow_backward(&stack, Some(&trace), &[0.0; 4]).unwrap();
        assert!(gz.iter().all(|&x| x == 0.0));
        assert!(gv.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_requires_matching_trace() {
        let mut rng = RngStream::new(7, "trace");
        let stack = random_stack(&mut rng, 2, 3);
        assert!(matches!(
            flow_backward(&stack, None, &[1.0; 3]),
            Err(Error::MissingTrace(_))
        ));
        let other = random_stack(&mut rng, 3, 3);
        let trace = forward_traced(&other, &[1.0, 2.0, 3.0]).unwrap();
        assert!(flow_backward(&stack, Some(&trace), &[1.0; 3]).is_err());
    }

    #[test]
    fn backward_matches_central_differences() {
        // x = [v (4), z0 (4)], loss = w . flow(z0) with one reflector.
        let mut rng = RngStream::new(8, "fd");
        let w = rng.normal_vec(4);
        let f = |x: &[f64]| {
            let stack = FlowStack::new(Arch::Arch3, vec![hv(&x[..4])]).unwrap();
            let trace = forward_traced(&stack, &x[4..]).unwrap();
            let (gz, gv) = flow_backward(&stack, Some(&trace), &w).unwrap();
            let mut g = gv[0].clone();
            g.extend(gz);
            (dot(&w, trace.output()), g)
        };
        let x = rng.normal_vec(8);
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn deep_backward_matches_central_differences() {
        let mut rng = RngStream::new(9, "fd-deep");
        let (k, d) = (4, 5);
        let w = rng.normal_vec(d);
        let f = |x: &[f64]| {
            let vs = x[..k * d].chunks(d).map(hv).collect();
            let stack = FlowStack::new(Arch::Arch2, vs).unwrap();
            let trace = forward_traced(&stack, &x[k * d..]).unwrap();
            let (gz, gv) = flow_backward(&stack, Some(&trace), &w).unwrap();
            let mut g: Vec<f64> = gv.into_iter().flatten().collect();
            g.extend(gz);
            (dot(&w, trace.output()), g)
        };
        let x = rng.normal_vec(k * d + d);
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn shared_vectors_accumulate_over_batch() {
        let mut rng = RngStream::new(10, "batch");
        let stack = random_stack(&mut rng, 2, 4);
        let z_a = rng.normal_vec(4);
        let z_b = rng.normal_vec(4);
        let w = rng.normal_vec(4);

        let mut store = ParamStore::new(0);
        let ids: Vec<_> = stack
            .vectors()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                store
                    .insert(&alloc::format!("h{i}"), 1, 4, v.as_slice().to_vec())
                    .unwrap()
            })
            .collect();
        let mut tape = Tape::new();
        let wv = tape.input(w.clone());
        let mut terms = Vec::new();
        for z in [&z_a, &z_b] {
            let mut cur = tape.input(z.clone());
            for &id in &ids {
                let v = tape.param(&store, id);
                cur = tape.reflect(v, cur).unwrap();
            }
            terms.push(tape.dot(cur, wv));
        }
        let total = tape.add(terms[0], terms[1]);
        let batch = tape.backward(total).params(&store);

        let mut expected = vec![vec![0.0; 4]; 2];
        for z in [&z_a, &z_b] {
            let trace = forward_traced(&stack, z).unwrap();
            let (_, gv) = flow_backward(&stack, Some(&trace), &w).unwrap();
            for (e, g) in expected.iter_mut().zip(gv) {
                e.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        for (got, want) in batch.iter().zip(&expected) {
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn arch_names_round_trip() {
        for a in Arch::ALL {
            assert_eq!(a.as_str().parse::<Arch>().unwrap(), a);
        }
        assert!("arch4".parse::<Arch>().is_err());
    }
}
