//! Composite layers built from tape primitives.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Shape, Tape, Var};
use crate::error::Result;

/// Affine map `x·W + b` with `W: in×out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Result<Self> {
        Ok(Linear {
            weight: store.linear_init(format!("{name}.weight"), Shape::new(inp, out), rng)?,
            bias: store.zeros(format!("{name}.bias"), Shape::new(1, out))?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> LinearVars {
        LinearVars {
            weight: tape.param(store, self.weight),
            bias: tape.param(store, self.bias),
        }
    }
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row(y, self.bias)
    }
}

/// Learnable LayerNorm affine (gain starts at 1, bias at 0).
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.filled(format!("{name}.gain"), Shape::new(1, width), 1.0)?,
            bias: store.zeros(format!("{name}.bias"), Shape::new(1, width))?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> NormVars {
        NormVars {
            gain: tape.param(store, self.gain),
            bias: tape.param(store, self.bias),
        }
    }
}

impl NormVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias)
    }
}

/// Gated recurrent unit acting row-wise on a `s×d` state.
///
/// `z = σ(x·W_z + h·U_z + b_z)`, `r = σ(x·W_r + h·U_r + b_r)`,
/// `h̃ = tanh(x·W_h + r ⊙ (h·U_h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    w_z: Var,
    w_r: Var,
    w_h: Var,
    u_z: Var,
    u_r: Var,
    u_h: Var,
    b_z: Var,
    b_r: Var,
    b_h: Var,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        let sq = Shape::new(d, d);
        let row = Shape::new(1, d);
        Ok(Gru {
            w_z: store.linear_init(format!("{name}.w_z"), sq, rng)?,
            w_r: store.linear_init(format!("{name}.w_r"), sq, rng)?,
            w_h: store.linear_init(format!("{name}.w_h"), sq, rng)?,
            u_z: store.linear_init(format!("{name}.u_z"), sq, rng)?,
            u_r: store.linear_init(format!("{name}.u_r"), sq, rng)?,
            u_h: store.linear_init(format!("{name}.u_h"), sq, rng)?,
            b_z: store.zeros(format!("{name}.b_z"), row)?,
            b_r: store.zeros(format!("{name}.b_r"), row)?,
            b_h: store.zeros(format!("{name}.b_h"), row)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> GruVars {
        GruVars {
            w_z: tape.param(store, self.w_z),
            w_r: tape.param(store, self.w_r),
            w_h: tape.param(store, self.w_h),
            u_z: tape.param(store, self.u_z),
            u_r: tape.param(store, self.u_r),
            u_h: tape.param(store, self.u_h),
            b_z: tape.param(store, self.b_z),
            b_r: tape.param(store, self.b_r),
            b_h: tape.param(store, self.b_h),
        }
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r, self.b_h,
        ]
    }
}

fn gate(tape: &mut Tape, x: Var, h: Var, w: Var, u: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let pre = tape.add(xw, hu)?;
    let pre = tape.add_row(pre, b)?;
    Ok(tape.sigmoid(pre))
}

/// One GRU update; `hidden` and `input` must share their shape.
pub fn gru_cell(tape: &mut Tape, p: &GruVars, hidden: Var, input: Var) -> Result<Var> {
    let (sh, si) = (tape.shape(hidden), tape.shape(input));
    if sh != si {
        return Err(crate::error::Error::dim("gru_cell", sh, si));
    }
    let z = gate(tape, input, hidden, p.w_z, p.u_z, p.b_z)?;
    let r = gate(tape, input, hidden, p.w_r, p.u_r, p.b_r)?;
    let xw = tape.matmul(input, p.w_h)?;
    let hu = tape.matmul(hidden, p.u_h)?;
    let rhu = tape.mul(r, hu)?;
    let pre = tape.add(xw, rhu)?;
    let pre = tape.add_row(pre, p.b_h)?;
    let cand = tape.tanh(pre);
    let delta = tape.sub(cand, hidden)?;
    let step = tape.mul(z, delta)?;
    tape.add(hidden, step)
}

/// Cosine similarity of two equally sized vectors, as a scalar node.
pub fn cosine_sim(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let (sx, sy) = (tape.shape(x), tape.shape(y));
    if sx.numel() != sy.numel() {
        return Err(crate::error::Error::dim("cosine_sim", sx, sy));
    }
    let both = if sx.rows == 1 && sy.rows == 1 {
        tape.concat_rows(&[x, y])?
    } else {
        let xt = if sx.rows == 1 { x } else { tape.transpose(x) };
        let yt = if sy.rows == 1 { y } else { tape.transpose(y) };
        tape.concat_rows(&[xt, yt])?
    };
    let unit = tape.l2_normalize_rows(both)?;
    let a = tape.slice_rows(unit, 0, 1)?;
    let b = tape.slice_rows(unit, 1, 1)?;
    let prod = tape.mul(a, b)?;
    Ok(tape.sum(prod))
}

/// Pairwise cosine similarities `cos(x_i, y_j)` of two row sets.
pub fn cosine_matrix(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let xn = tape.l2_normalize_rows(x)?;
    let yn = tape.l2_normalize_rows(y)?;
    let yt = tape.transpose(yn);
    tape.matmul(xn, yt)
}
