//! Layers shared by the reference encoder and the synthesizer.

use alloc::format;

use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::with_init(store, name, in_dim, out_dim, Init::Glorot, Some(Init::Zeros))
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        w_init: Init,
        b_init: Option<Init>,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), out_dim, in_dim, w_init);
        let b = b_init.map(|init| store.register(&format!("{name}.b"), 1, out_dim, init));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matvec(w, x);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => y,
        }
    }
}

/// Gated recurrent unit.
///
/// ```text
/// u = sigmoid(W_u x + b_u + U_u h + c_u)
/// r = sigmoid(W_r x + b_r + U_r h + c_r)
/// n = tanh(W_n x + b_n + r * (U_n h + c_n))
/// h' = n + u * (h - n)
/// ```
#[derive(Debug, Clone)]
pub struct Gru {
    pub w: ParamId,
    pub u: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            w: store.register(&format!("{name}.w"), 3 * hidden, input, Init::Glorot),
            u: store.register(&format!("{name}.u"), 3 * hidden, hidden, Init::Glorot),
            bx: store.register(&format!("{name}.bx"), 1, 3 * hidden, Init::Zeros),
            bh: store.register(&format!("{name}.bh"), 1, 3 * hidden, Init::Zeros),
            input,
            hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let (w, u) = (tape.param(store, self.w), tape.param(store, self.u));
        let (bx, bh) = (tape.param(store, self.bx), tape.param(store, self.bh));
        let gx = tape.matvec(w, x);
        let gx = tape.add(gx, bx);
        let gh = tape.matvec(u, h);
        let gh = tape.add(gh, bh);
        let (gx_u, gh_u) = (tape.slice(gx, 0, hd), tape.slice(gh, 0, hd));
        let pre_u = tape.add(gx_u, gh_u);
        let upd = tape.sigmoid(pre_u);
        let (gx_r, gh_r) = (tape.slice(gx, hd, hd), tape.slice(gh, hd, hd));
        let pre_r = tape.add(gx_r, gh_r);
        let reset = tape.sigmoid(pre_r);
        let (gx_n, gh_n) = (tape.slice(gx, 2 * hd, hd), tape.slice(gh, 2 * hd, hd));
        let gated = tape.mul(reset, gh_n);
        let pre_n = tape.add(gx_n, gated);
        let cand = tape.tanh(pre_n);
        let diff = tape.sub(h, cand);
        let keep = tape.mul(upd, diff);
        tape.add(cand, keep)
    }
}
