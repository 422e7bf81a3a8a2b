use alloc::vec::Vec;

use super::variant::BlockVariant;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Bound, Tape, Var};

/// Learnable combination coefficients bound onto the current tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coefficients {
    None,
    Gammas {
        g1: Var,
        g2: Var,
    },
    /// Paired gate `g, 1 - g`.
    Gate {
        w: Var,
        b: Var,
    },
    /// Two independent gates (sigmoid or tanh by variant).
    Gates {
        w: [Var; 2],
        b: [Var; 2],
    },
    Mix {
        k: Var,
    },
    Dlcl {
        weights: Var,
    },
}

impl Coefficients {
    /// Looks up the coefficients of `variant` under `scope` (the block's
    /// `coef` scope, e.g. `enc.block2.coef`).
    pub fn bind(variant: BlockVariant, bound: &Bound, scope: &str) -> Result<Self> {
        let at = |s: &str| bound.at(scope, s);
        Ok(match variant {
            BlockVariant::Rk2LearnableScalar => Coefficients::Gammas { g1: at("gamma1")?, g2: at("gamma2")? },
            BlockVariant::Rk2GatedSigmoidPair => Coefficients::Gate { w: at("gate.w")?, b: at("gate.b")? },
            BlockVariant::Rk2GatedSigmoid | BlockVariant::Rk2Tanh => {
                Coefficients::Gates { w: [at("gate1.w")?, at("gate2.w")?], b: [at("gate1.b")?, at("gate2.b")?] }
            }
            BlockVariant::Multistep => Coefficients::Mix { k: at("k")? },
            BlockVariant::Dlcl => Coefficients::Dlcl { weights: at("dlcl")? },
            _ => Coefficients::None,
        })
    }
}

/// Cross-block memory for the multistep variants.
#[derive(Debug, Clone, Default)]
pub struct BlockState {
    depth: usize,
    y_prev: Option<Var>,
    y0: Option<Var>,
    /// `(block index, F(y_l))` for every earlier block.
    history: Vec<(usize, Var)>,
}

impl BlockState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Blocks applied so far.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn y_prev(&self) -> Option<Var> {
        self.y_prev
    }

    pub fn history(&self) -> &[(usize, Var)] {
        &self.history
    }
}

/// Pre-activation of a gate: `[F1, F2] W + b`, one value per row.
pub fn gate_logits<T: Scalar>(tape: &mut Tape<T>, f1: Var, f2: Var, w: Var, b: Var) -> Result<Var> {
    let s1 = tape.shape(f1)?.to_vec();
    let s2 = tape.shape(f2)?;
    if s1.is_empty() || s1 != s2 {
        return Err(Error::dim("rk2_gate", &s1, s2));
    }
    let d = s1[s1.len() - 1];
    let w_numel = tape.value(w)?.numel();
    if w_numel != 2 * d {
        return Err(Error::dim("rk2_gate", &[2 * d], tape.shape(w)?));
    }
    let w = if tape.shape(w)? == [2 * d, 1] { w } else { tape.reshape(w, &[2 * d, 1])? };
    let b = if tape.shape(b)? == [1] { b } else { tape.reshape(b, &[1])? };
    let cat = tape.concat(f1, f2)?;
    let z = tape.matmul(cat, w)?;
    tape.add_bias(z, b)
}

/// `sigmoid([F1, F2] W + b)`: one gate value in `(0, 1)` per position,
/// shaped `[.., 1]`.
pub fn rk2_gate<T: Scalar>(tape: &mut Tape<T>, f1: Var, f2: Var, w: Var, b: Var) -> Result<Var> {
    let z = gate_logits(tape, f1, f2, w, b)?;
    tape.sigmoid(z)
}

fn half<T: Scalar>() -> T {
    T::from_f64(0.5)
}

/// Advances `y` by one block of `variant`.
///
/// `f` is the shared stage function; every evaluation inside the block
/// reuses it (and therefore the same parameters). `state` carries earlier
/// block inputs for the multistep variants and is updated in place.
pub fn block_forward<T, F>(
    tape: &mut Tape<T>,
    variant: BlockVariant,
    coeffs: &Coefficients,
    f: &mut F,
    y: Var,
    state: &mut BlockState,
) -> Result<Var>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let out = match variant {
        BlockVariant::Euler => {
            let f1 = f(tape, y)?;
            tape.add(y, f1)?
        }
        BlockVariant::Rk2
        | BlockVariant::Rk2GammaOne
        | BlockVariant::Rk2LearnableScalar
        | BlockVariant::Rk2GatedSigmoid
        | BlockVariant::Rk2GatedSigmoidPair
        | BlockVariant::Rk2Tanh => {
            let f1 = f(tape, y)?;
            let probe = tape.add(y, f1)?;
            let f2 = f(tape, probe)?;
            let (t1, t2) = match (variant, coeffs) {
                (BlockVariant::Rk2, _) => (tape.scalar_mul(f1, half())?, tape.scalar_mul(f2, half())?),
                (BlockVariant::Rk2GammaOne, _) => (f1, f2),
                (BlockVariant::Rk2LearnableScalar, &Coefficients::Gammas { g1, g2 }) => {
                    (tape.scale(f1, g1)?, tape.scale(f2, g2)?)
                }
                (BlockVariant::Rk2GatedSigmoidPair, &Coefficients::Gate { w, b }) => {
                    let g = rk2_gate(tape, f1, f2, w, b)?;
                    let rest = tape.affine(g, -T::one(), T::one())?;
                    (tape.row_scale(f1, g)?, tape.row_scale(f2, rest)?)
                }
                (BlockVariant::Rk2GatedSigmoid | BlockVariant::Rk2Tanh, &Coefficients::Gates { w, b }) => {
                    let mut gates = [f1, f2];
                    for (gate, (wi, bi)) in gates.iter_mut().zip(w.into_iter().zip(b)) {
                        let z = gate_logits(tape, f1, f2, wi, bi)?;
                        *gate = if variant == BlockVariant::Rk2Tanh { tape.tanh(z)? } else { tape.sigmoid(z)? };
                    }
                    (tape.row_scale(f1, gates[0])?, tape.row_scale(f2, gates[1])?)
                }
                _ => return Err(Error::State("coefficients do not match the block variant")),
            };
            let acc = tape.add(y, t1)?;
            tape.add(acc, t2)?
        }
        BlockVariant::Rk4 => {
            let f1 = f(tape, y)?;
            let s = tape.scalar_mul(f1, half())?;
            let p2 = tape.add(y, s)?;
            let f2 = f(tape, p2)?;
            let s = tape.scalar_mul(f2, half())?;
            let p3 = tape.add(y, s)?;
            let f3 = f(tape, p3)?;
            let p4 = tape.add(y, f3)?;
            let f4 = f(tape, p4)?;
            let sixth = T::one() / T::from_f64(6.0);
            let third = T::one() / T::from_f64(3.0);
            let mut acc = y;
            for (fi, w) in [(f1, sixth), (f2, third), (f3, third), (f4, sixth)] {
                let term = tape.scalar_mul(fi, w)?;
                acc = tape.add(acc, term)?;
            }
            acc
        }
        BlockVariant::Leapfrog => {
            let prev = previous_input(state, y)?;
            let f1 = f(tape, y)?;
            let twice = tape.scalar_mul(f1, T::from_f64(2.0))?;
            tape.add(prev, twice)?
        }
        BlockVariant::Multistep => {
            let &Coefficients::Mix { k } = coeffs else {
                return Err(Error::State("multistep block needs its mixing coefficient"));
            };
            let prev = previous_input(state, y)?;
            let f1 = f(tape, y)?;
            let k = tape.clamp(k, T::zero(), T::one())?;
            let rest = tape.affine(k, -T::one(), T::one())?;
            let a = tape.scale(y, k)?;
            let b = tape.scale(prev, rest)?;
            let mixed = tape.add(a, b)?;
            tape.add(mixed, f1)?
        }
        BlockVariant::Dlcl => {
            let &Coefficients::Dlcl { weights } = coeffs else {
                return Err(Error::State("DLCL block needs its layer weights"));
            };
            let y0 = if state.depth == 0 { y } else { state.y0.ok_or(Error::State("DLCL block is missing y_0"))? };
            if state.history.len() != state.depth {
                return Err(Error::State("DLCL history does not match block depth"));
            }
            let n = tape.value(weights)?.numel();
            if n != state.depth + 1 {
                return Err(Error::dim("dlcl", &[state.depth + 1], tape.shape(weights)?));
            }
            let f1 = f(tape, y)?;
            state.y0 = Some(y0);
            state.history.push((state.depth, f1));
            let flat = if tape.shape(weights)?.len() == 1 { weights } else { tape.reshape(weights, &[n])? };
            let mut acc = y0;
            for l in 0..n {
                let wl = if n == 1 { flat } else { tape.slice_last(flat, l, 1)? };
                let term = tape.scale(state.history[l].1, wl)?;
                acc = tape.add(acc, term)?;
            }
            acc
        }
        BlockVariant::PolyNet => {
            let f1 = f(tape, y)?;
            let f2 = f(tape, f1)?;
            let acc = tape.add(y, f1)?;
            tape.add(acc, f2)?
        }
    };
    if matches!(variant, BlockVariant::Leapfrog | BlockVariant::Multistep) {
        state.y_prev = Some(y);
    }
    state.depth += 1;
    Ok(out)
}

fn previous_input(state: &BlockState, y: Var) -> Result<Var> {
    if state.depth == 0 {
        // y_{-1} := y_0 at the first block.
        Ok(y)
    } else {
        state.y_prev.ok_or(Error::State("block needs the previous block input"))
    }
}
