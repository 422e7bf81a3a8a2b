use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Bound, Tape, Var};

/// Layer-norm epsilon used unless a config overrides it.
pub const DEFAULT_LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SublayerKind {
    /// Multi-head self-attention.
    San,
    /// Position-wise feed-forward network.
    Ffn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SublayerSpec {
    pub kind: SublayerKind,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

/// How a parameter tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    /// Uniform in `±bound`.
    Uniform(f64),
    Constant(f64),
}

impl SublayerSpec {
    pub fn san(d_model: usize, heads: usize) -> Self {
        Self { kind: SublayerKind::San, d_model, heads, ffn_dim: d_model, dropout: 0.0, ln_eps: DEFAULT_LN_EPS }
    }

    pub fn ffn(d_model: usize, ffn_dim: usize) -> Self {
        Self { kind: SublayerKind::Ffn, d_model, heads: 1, ffn_dim, dropout: 0.0, ln_eps: DEFAULT_LN_EPS }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::invalid("d_model must be positive"));
        }
        match self.kind {
            SublayerKind::San if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) => {
                Err(Error::invalid("d_model must be divisible by heads"))
            }
            SublayerKind::Ffn if self.ffn_dim < self.d_model => Err(Error::invalid("ffn_dim must be >= d_model")),
            _ if !(0.0..1.0).contains(&self.dropout) => Err(Error::invalid("dropout must lie in [0, 1)")),
            _ => Ok(()),
        }
    }

    /// Parameter tensors relative to the sublayer scope.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>, Init)> {
        let d = self.d_model;
        let x = |fan_in, fan_out| Init::Xavier { fan_in, fan_out };
        let mut out = vec![("ln.gain", vec![d], Init::Ones), ("ln.bias", vec![d], Init::Zeros)];
        match self.kind {
            SublayerKind::San => {
                for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
                    out.push((w, vec![d, d], x(d, d)));
                    out.push((b, vec![d], Init::Zeros));
                }
            }
            SublayerKind::Ffn => {
                out.push(("w1", vec![d, self.ffn_dim], x(d, self.ffn_dim)));
                out.push(("b1", vec![self.ffn_dim], Init::Zeros));
                out.push(("w2", vec![self.ffn_dim, d], x(self.ffn_dim, d)));
                out.push(("b2", vec![d], Init::Zeros));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

/// Randomness for dropout; `None` disables dropout (evaluation).
pub struct Dropout<'a> {
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { rng: None }
    }

    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        Self { rng: Some(rng) }
    }

    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var, p: f64) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if p > 0.0 => tape.dropout(x, p, rng),
            _ => Ok(x),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionParams {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            ln_gain: bound.at(prefix, "ln.gain")?,
            ln_bias: bound.at(prefix, "ln.bias")?,
            wq: bound.at(prefix, "wq")?,
            bq: bound.at(prefix, "bq")?,
            wk: bound.at(prefix, "wk")?,
            bk: bound.at(prefix, "bk")?,
            wv: bound.at(prefix, "wv")?,
            bv: bound.at(prefix, "bv")?,
            wo: bound.at(prefix, "wo")?,
            bo: bound.at(prefix, "bo")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnParams {
    pub fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            ln_gain: bound.at(prefix, "ln.gain")?,
            ln_bias: bound.at(prefix, "ln.bias")?,
            w1: bound.at(prefix, "w1")?,
            b1: bound.at(prefix, "b1")?,
            w2: bound.at(prefix, "w2")?,
            b2: bound.at(prefix, "b2")?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SublayerParams {
    San(AttentionParams),
    Ffn(FfnParams),
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_bias(h, b)
}

/// Pre-norm multi-head attention increment (no residual).
///
/// `y` is `[batch, len_q, d]`. Keys and values come from `memory`
/// (`[batch, len_k, d]`) when given, otherwise from the normalised `y`.
/// `mask` is an additive `[batch, len_q, len_k]` tensor.
pub fn attention_f<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &SublayerSpec,
    p: &AttentionParams,
    y: Var,
    memory: Option<Var>,
    mask: Option<Var>,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let shape = tape.shape(y)?.to_vec();
    if shape.len() != 3 || shape[2] != spec.d_model {
        return Err(Error::dim("attention", &shape, &[spec.d_model]));
    }
    let heads = spec.heads;
    let dh = spec.d_model / heads;
    let x = tape.layer_norm(y, p.ln_gain, p.ln_bias, T::from_f64(spec.ln_eps))?;
    let kv_src = memory.unwrap_or(x);
    let q = linear(tape, x, p.wq, p.bq)?;
    let q = tape.scalar_mul(q, T::one() / T::from_usize(dh).sqrt())?;
    let k = linear(tape, kv_src, p.wk, p.bk)?;
    let v = linear(tape, kv_src, p.wv, p.bv)?;
    let mut merged: Option<Var> = None;
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_last(q, h * dh, dh)?, tape.slice_last(k, h * dh, dh)?, tape.slice_last(v, h * dh, dh)?)
        };
        let kt = tape.transpose(kh)?;
        let mut scores = tape.matmul(qh, kt)?;
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let weights = tape.softmax(scores)?;
        let weights = dropout.apply(tape, weights, spec.dropout)?;
        let out = tape.matmul(weights, vh)?;
        merged = Some(match merged {
            None => out,
            Some(acc) => tape.concat(acc, out)?,
        });
    }
    let merged = merged.ok_or_else(|| Error::invalid("attention needs at least one head"))?;
    linear(tape, merged, p.wo, p.bo)
}

/// Pre-norm feed-forward increment: `relu(LN(y) W1 + b1) W2 + b2`.
pub fn ffn_f<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &SublayerSpec,
    p: &FfnParams,
    y: Var,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let x = tape.layer_norm(y, p.ln_gain, p.ln_bias, T::from_f64(spec.ln_eps))?;
    let h = linear(tape, x, p.w1, p.b1)?;
    let h = tape.relu(h)?;
    let h = dropout.apply(tape, h, spec.dropout)?;
    linear(tape, h, p.w2, p.b2)
}

/// The increment `F(y)` of one self-attention or feed-forward sublayer.
pub fn sublayer_f<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &SublayerSpec,
    params: &SublayerParams,
    y: Var,
    mask: Option<Var>,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    match (spec.kind, params) {
        (SublayerKind::San, SublayerParams::San(p)) => attention_f(tape, spec, p, y, None, mask, dropout),
        (SublayerKind::Ffn, SublayerParams::Ffn(p)) => ffn_f(tape, spec, p, y, dropout),
        _ => Err(Error::invalid("sublayer kind does not match its parameters")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tensor};

    fn store_for(spec: &SublayerSpec, prefix: &str, fill: impl Fn(&str, usize) -> f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        for (name, shape, init) in spec.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| match init {
                    Init::Ones => 1.0,
                    Init::Zeros => 0.0,
                    _ => fill(name, i),
                })
                .collect();
            store.insert(alloc::format!("{prefix}.{name}"), Tensor::new(&shape, data).unwrap()).unwrap();
        }
        store
    }

    fn input(tape: &mut Tape<f64>, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i * 37 % 19) as f64 - 9.0) / 7.0).collect();
        tape.constant(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn zero_output_projection_gives_zero_increment() {
        for spec in [SublayerSpec::san(8, 2), SublayerSpec::ffn(8, 16)] {
            let store =
                store_for(
                    &spec,
                    "s",
                    |name, i| {
                        if name == "wo" || name == "w2" {
                            0.0
                        } else {
                            ((i % 7) as f64 - 3.0) / 10.0
                        }
                    },
                );
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let params = match spec.kind {
                SublayerKind::San => SublayerParams::San(AttentionParams::bind(&bound, "s").unwrap()),
                SublayerKind::Ffn => SublayerParams::Ffn(FfnParams::bind(&bound, "s").unwrap()),
            };
            let y = input(&mut tape, &[2, 3, 8]);
            let out = sublayer_f(&mut tape, &spec, &params, y, None, &mut Dropout::off()).unwrap();
            assert_eq!(tape.shape(out).unwrap(), &[2, 3, 8]);
            assert!(tape.data(out).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ffn_matches_hand_evaluation() {
        // d = 2, ffn_dim = 2, W1 = 0.5 I, b1 = [0.1, -2], W2 = I, b2 = [0.25, 0].
        let spec = SublayerSpec::ffn(2, 2);
        let mut store = ParamStore::<f64>::new();
        let t = |s: &[usize], d: &[f64]| Tensor::from_f64(s, d).unwrap();
        store.insert("f.ln.gain", t(&[2], &[1.0, 1.0])).unwrap();
        store.insert("f.ln.bias", t(&[2], &[0.0, 0.0])).unwrap();
        store.insert("f.w1", t(&[2, 2], &[0.5, 0.0, 0.0, 0.5])).unwrap();
        store.insert("f.b1", t(&[2], &[0.1, -2.0])).unwrap();
        store.insert("f.w2", t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        store.insert("f.b2", t(&[2], &[0.25, 0.0])).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = FfnParams::bind(&bound, "f").unwrap();
        let y = tape.constant(t(&[1, 1, 2], &[3.0, 1.0]));
        let out = ffn_f(&mut tape, &spec, &p, y, &mut Dropout::off()).unwrap();
        // LN([3, 1]) = [1, -1] * 1/sqrt(1 + 1e-6)
        let s = 1.0 / (1.0f64 + 1e-6).sqrt();
        let h = [(0.5 * s + 0.1f64).max(0.0), (-0.5 * s - 2.0f64).max(0.0)];
        let want = [h[0] + 0.25, h[1]];
        let got = tape.data(out).unwrap();
        assert!((got[0] - want[0]).abs() < 1e-14 && (got[1] - want[1]).abs() < 1e-14);
    }

    #[test]
    fn single_position_attention_returns_value_projection() {
        let spec = SublayerSpec::san(4, 1);
        let store = store_for(&spec, "a", |name, i| match name {
            "wo" => {
                if i % 5 == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            "bo" => 0.0,
            _ => ((i * 3 % 11) as f64 - 5.0) / 8.0,
        });
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = AttentionParams::bind(&bound, "a").unwrap();
        let y = input(&mut tape, &[1, 1, 4]);
        let out = attention_f(&mut tape, &spec, &p, y, None, None, &mut Dropout::off()).unwrap();
        let x = tape.layer_norm(y, p.ln_gain, p.ln_bias, 1e-6).unwrap();
        let v = linear(&mut tape, x, p.wv, p.bv).unwrap();
        let (a, b) = (tape.data(out).unwrap(), tape.data(v).unwrap());
        for (u, w) in a.iter().zip(b) {
            assert!((u - w).abs() < 1e-14);
        }
    }

    #[test]
    fn mask_shape_mismatch_is_dimension_error() {
        let spec = SublayerSpec::san(4, 2);
        let store = store_for(&spec, "a", |_, i| (i % 3) as f64 / 10.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = AttentionParams::bind(&bound, "a").unwrap();
        let y = input(&mut tape, &[1, 3, 4]);
        let mask = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let err = attention_f(&mut tape, &spec, &p, y, None, Some(mask), &mut Dropout::off()).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn spec_validation() {
        assert!(SublayerSpec::san(6, 4).validate().is_err());
        assert!(SublayerSpec::ffn(8, 4).validate().is_err());
        assert!(SublayerSpec::san(8, 2).with_dropout(1.0).validate().is_err());
        assert!(SublayerSpec::ffn(8, 32).with_dropout(0.1).validate().is_ok());
        assert_eq!(SublayerSpec::san(8, 2).param_count(), 2 * 8 + 4 * (64 + 8));
    }
}
