//! Parameterized building blocks. Each composite is written once against
//! tape variables so that the trainable layers and the standalone
//! primitives in [`super::ops`] share a single definition.

use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamId, ParamStore};
use super::tape::{AttentionMask, Tape, Var};
use crate::error::Result;

/// Tape handles for an affine map.
#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub w: Var,
    pub b: Option<Var>,
}

pub fn affine_vars(tape: &mut Tape, x: Var, p: AffineVars) -> Result<Var> {
    tape.linear(x, p.w, p.b)
}

/// Tape handles for the two-layer MLP `affine -> layer norm -> relu -> affine`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2Vars {
    pub first: AffineVars,
    pub gain: Var,
    pub bias: Var,
    pub second: AffineVars,
}

pub fn mlp2_vars(tape: &mut Tape, x: Var, p: Mlp2Vars) -> Result<Var> {
    let h = tape.linear(x, p.first.w, p.first.b)?;
    let h = tape.layer_norm(h, p.gain, p.bias)?;
    let h = tape.relu(h);
    tape.linear(h, p.second.w, p.second.b)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Single-head attention of `queries` over `context`.
pub fn attention_vars(
    tape: &mut Tape,
    queries: Var,
    context: Var,
    p: AttentionVars,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    let q = tape.linear(queries, p.wq, None)?;
    let k = tape.linear(context, p.wk, None)?;
    let v = tape.linear(context, p.wv, None)?;
    tape.attention(q, k, v, mask)
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

/// One GRU update:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 - z) ⊙ h + z ⊙ h̃`.
pub fn gru_vars(tape: &mut Tape, x: Var, h: Var, p: GruVars) -> Result<Var> {
    let zx = tape.linear(x, p.w_z, Some(p.b_z))?;
    let zh = tape.linear(h, p.u_z, None)?;
    let z = tape.add(zx, zh)?;
    let z = tape.sigmoid(z);

    let rx = tape.linear(x, p.w_r, Some(p.b_r))?;
    let rh = tape.linear(h, p.u_r, None)?;
    let r = tape.add(rx, rh)?;
    let r = tape.sigmoid(r);

    let rh = tape.mul(r, h)?;
    let cx = tape.linear(x, p.w_h, Some(p.b_h))?;
    let ch = tape.linear(rh, p.u_h, None)?;
    let cand = tape.add(cx, ch)?;
    let cand = tape.tanh(cand);

    // h + z ⊙ (h̃ - h)
    let diff = tape.sub(cand, h)?;
    let step = tape.mul(z, diff)?;
    tape.add(h, step)
}

/// `x W^T + b`, weights stored as (out, in).
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), out_dim, in_dim, Init::Glorot, rng);
        let b = bias.then(|| store.add(format!("{name}.bias"), 1, out_dim, Init::Zeros, rng));
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn vars(&self, tape: &mut Tape) -> AffineVars {
        AffineVars {
            w: tape.param(self.w),
            b: self.b.map(|b| tape.param(b)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.vars(tape);
        affine_vars(tape, x, p)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), 1, dim, Init::Ones, rng),
            bias: store.add(format!("{name}.bias"), 1, dim, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Two-layer MLP: affine, layer norm, ReLU, affine.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub first: Linear,
    pub norm: LayerNorm,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Mlp2 {
            first: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), hidden, rng),
            second: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, true, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.first.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = Mlp2Vars {
            first: self.first.vars(tape),
            gain: tape.param(self.norm.gain),
            bias: tape.param(self.norm.bias),
            second: self.second.vars(tape),
        };
        mlp2_vars(tape, x, p)
    }
}

/// Single-head attention projections `W_Q`, `W_K`, `W_V` (d x d, no bias).
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Attention {
            wq: store.add(format!("{name}.wq"), dim, dim, Init::Glorot, rng),
            wk: store.add(format!("{name}.wk"), dim, dim, Init::Glorot, rng),
            wv: store.add(format!("{name}.wv"), dim, dim, Init::Glorot, rng),
            dim,
        }
    }

    fn vars(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            wq: tape.param(self.wq),
            wk: tape.param(self.wk),
            wv: tape.param(self.wv),
        }
    }

    pub fn self_attend(
        &self,
        tape: &mut Tape,
        x: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let p = self.vars(tape);
        attention_vars(tape, x, x, p, mask)
    }

    pub fn cross(&self, tape: &mut Tape, queries: Var, context: Var) -> Result<Var> {
        let p = self.vars(tape);
        attention_vars(tape, queries, context, p, None)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut w = |suffix: &str, rows: usize, cols: usize, init: Init| {
            store.add(format!("{name}.{suffix}"), rows, cols, init, rng)
        };
        Gru {
            w_z: w("w_z", hidden, in_dim, Init::Glorot),
            u_z: w("u_z", hidden, hidden, Init::Glorot),
            b_z: w("b_z", 1, hidden, Init::Zeros),
            w_r: w("w_r", hidden, in_dim, Init::Glorot),
            u_r: w("u_r", hidden, hidden, Init::Glorot),
            b_r: w("b_r", 1, hidden, Init::Zeros),
            w_h: w("w_h", hidden, in_dim, Init::Glorot),
            u_h: w("u_h", hidden, hidden, Init::Glorot),
            b_h: w("b_h", 1, hidden, Init::Zeros),
            in_dim,
            hidden,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let p = GruVars {
            w_z: tape.param(self.w_z),
            u_z: tape.param(self.u_z),
            b_z: tape.param(self.b_z),
            w_r: tape.param(self.w_r),
            u_r: tape.param(self.u_r),
            b_r: tape.param(self.b_r),
            w_h: tape.param(self.w_h),
            u_h: tape.param(self.u_h),
            b_h: tape.param(self.b_h),
        };
        gru_vars(tape, x, h, p)
    }
}
