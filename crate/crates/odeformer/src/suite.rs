//! Verification suites: finite-difference gradient checks of every tape
//! primitive and block variant, the linear-probe gradient grid, the gate
//! identity and parameter parity.

use odeformer_core::blocks::{
    analytic_depth_gradient, attention_f, block_forward, ffn_f, probe_stack_gradient, AttentionParams, BlockState,
    BlockVariant, Coefficients, Dropout, FfnParams, SublayerSpec,
};
use odeformer_core::model::ModelConfig;
use odeformer_core::tensor::{grad_check, Bound, ParamStore, Tape, Tensor, Var};
use odeformer_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference step of every check.
pub const EPS: f64 = 1e-5;

/// Deterministic, non-degenerate test values.
pub fn wave(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 0.731 + phase).sin() * 0.9).collect()
}

fn t(shape: &[usize], data: &[f64]) -> Result<Tensor<f64>> {
    Tensor::from_f64(shape, data)
}

/// `sum(y * w)` with a fixed non-uniform `w`, so every output component
/// gets a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y)?.to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(t(&shape, &wave(n, 0.3))?);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Case = (&'static str, Tensor<f64>, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>);

/// Worst relative error of each tape primitive.
pub fn primitive_checks() -> Result<Vec<(String, f64)>> {
    let x23 = t(&[2, 3], &wave(6, 0.0))?;
    let other = t(&[2, 3], &wave(6, 1.7))?;
    let m34 = t(&[3, 4], &wave(12, 2.1))?;
    let b3 = t(&[3], &[0.2, -0.1, 0.4])?;
    let g3 = t(&[3], &[1.2, 0.7, -0.4])?;
    let c = |v: &Tensor<f64>| v.clone();

    let cases: Vec<Case> = vec![
        ("matmul", c(&x23), {
            let m = c(&m34);
            Box::new(move |tp, x| {
                let b = tp.constant(m.clone());
                let y = tp.matmul(x, b)?;
                weighted_sum(tp, y)
            })
        }),
        ("matmul rhs", c(&m34), {
            let a = c(&x23);
            Box::new(move |tp, b| {
                let a = tp.constant(a.clone());
                let y = tp.matmul(a, b)?;
                weighted_sum(tp, y)
            })
        }),
        ("batched matmul", t(&[2, 2, 3], &wave(12, 0.5))?, {
            let b = t(&[2, 3, 2], &wave(12, 0.9))?;
            Box::new(move |tp, a| {
                let b = tp.constant(b.clone());
                let y = tp.matmul(a, b)?;
                weighted_sum(tp, y)
            })
        }),
        ("add", c(&x23), {
            let o = c(&other);
            Box::new(move |tp, x| {
                let o = tp.constant(o.clone());
                let y = tp.add(x, o)?;
                weighted_sum(tp, y)
            })
        }),
        ("add_bias", c(&b3), {
            let x = c(&x23);
            Box::new(move |tp, b| {
                let x = tp.constant(x.clone());
                let y = tp.add_bias(x, b)?;
                weighted_sum(tp, y)
            })
        }),
        ("mul", c(&x23), {
            let o = c(&other);
            Box::new(move |tp, x| {
                let o = tp.constant(o.clone());
                let y = tp.mul(x, o)?;
                weighted_sum(tp, y)
            })
        }),
        (
            "scalar_mul",
            c(&x23),
            Box::new(|tp, x| {
                let y = tp.scalar_mul(x, -1.3)?;
                weighted_sum(tp, y)
            }),
        ),
        ("scale", t(&[1], &[0.7])?, {
            let x = c(&x23);
            Box::new(move |tp, s| {
                let x = tp.constant(x.clone());
                let y = tp.scale(x, s)?;
                weighted_sum(tp, y)
            })
        }),
        ("row_scale", t(&[2, 1], &[0.7, -0.3])?, {
            let x = c(&x23);
            Box::new(move |tp, g| {
                let x = tp.constant(x.clone());
                let y = tp.row_scale(x, g)?;
                weighted_sum(tp, y)
            })
        }),
        (
            "concat",
            c(&x23),
            Box::new(|tp, x| {
                let o = tp.constant(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4])?);
                let y = tp.concat(o, x)?;
                weighted_sum(tp, y)
            }),
        ),
        (
            "slice_last",
            c(&x23),
            Box::new(|tp, x| {
                let y = tp.slice_last(x, 1, 2)?;
                weighted_sum(tp, y)
            }),
        ),
        (
            "relu",
            t(&[2, 3], &[0.5, -0.4, 0.3, -0.2, 0.8, 0.1])?,
            Box::new(|tp, x| {
                let y = tp.relu(x)?;
                weighted_sum(tp, y)
            }),
        ),
        (
            "sigmoid",
            c(&x23),
            Box::new(|tp, x| {
                let y = tp.sigmoid(x)?;
                weighted_sum(tp, y)
            }),
        ),
        (
            "tanh",
            c(&x23),
            Box::new(|tp, x| {
                let y = tp.tanh(x)?;
                weighted_sum(tp, y)
            }),
        ),
        (
            "clamp",
            t(&[4], &[-1.5, 0.2, 0.7, 1.6])?,
            Box::new(|tp, x| {
                let y = tp.clamp(x, 0.0, 1.0)?;
                weighted_sum(tp, y)
            }),
        ),
        (
            "softmax",
            c(&x23),
            Box::new(|tp, x| {
                let y = tp.softmax(x)?;
                weighted_sum(tp, y)
            }),
        ),
        ("layer_norm", c(&x23), {
            let (g, b) = (c(&g3), c(&b3));
            Box::new(move |tp, x| {
                let g = tp.constant(g.clone());
                let b = tp.constant(b.clone());
                let y = tp.layer_norm(x, g, b, 1e-6)?;
                weighted_sum(tp, y)
            })
        }),
        ("layer_norm gain", c(&g3), {
            let (x, b) = (c(&x23), c(&b3));
            Box::new(move |tp, g| {
                let x = tp.constant(x.clone());
                let b = tp.constant(b.clone());
                let y = tp.layer_norm(x, g, b, 1e-6)?;
                weighted_sum(tp, y)
            })
        }),
        ("layer_norm bias", c(&b3), {
            let (x, g) = (c(&x23), c(&g3));
            Box::new(move |tp, b| {
                let x = tp.constant(x.clone());
                let g = tp.constant(g.clone());
                let y = tp.layer_norm(x, g, b, 1e-6)?;
                weighted_sum(tp, y)
            })
        }),
        (
            "embedding",
            t(&[4, 3], &wave(12, 0.2))?,
            Box::new(|tp, table| {
                let y = tp.embedding(table, &[3, 0, 3, 1, 2], &[5])?;
                weighted_sum(tp, y)
            }),
        ),
        (
            "transpose",
            t(&[2, 2, 3], &wave(12, 0.0))?,
            Box::new(|tp, x| {
                let y = tp.transpose(x)?;
                weighted_sum(tp, y)
            }),
        ),
        (
            "reshape",
            c(&x23),
            Box::new(|tp, x| {
                let y = tp.reshape(x, &[3, 2])?;
                weighted_sum(tp, y)
            }),
        ),
        (
            "sum",
            c(&x23),
            Box::new(|tp, x| {
                let y = tp.tanh(x)?;
                tp.sum(y)
            }),
        ),
        (
            "dropout",
            c(&x23),
            Box::new(|tp, x| {
                // the same mask on every evaluation
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let y = tp.dropout(x, 0.4, &mut rng)?;
                weighted_sum(tp, y)
            }),
        ),
        ("cross_entropy", t(&[3, 4], &wave(12, 0.4))?, Box::new(|tp, z| tp.cross_entropy(z, &[1, 0, 3], 0.1, None))),
    ];
    cases.into_iter().map(|(name, x, f)| Ok((name.to_string(), grad_check(f, &x, EPS)?))).collect()
}

/// Finite-difference check of `loss` with respect to every parameter of
/// `store`, with the same relative error measure as [`grad_check`].
pub fn param_grad_check<F>(store: &ParamStore<f64>, eps: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut work = store.clone();
    let mut tape = Tape::new();
    let bound = work.bind(&mut tape);
    let l = loss(&mut tape, &bound)?;
    tape.backward(l)?;
    work.zero_grads();
    work.accumulate_grads(&tape, &bound)?;
    let analytic: Vec<(String, Vec<f64>)> =
        work.iter().map(|(n, t)| (n.to_string(), t.grad().map_or(vec![0.0; t.numel()], <[f64]>::to_vec))).collect();

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = s.bind_frozen(&mut tape);
        let l = loss(&mut tape, &bound)?;
        tape.value(l)?.item()
    };
    let mut worst = 0.0f64;
    for (name, grads) in analytic {
        for (i, a) in grads.into_iter().enumerate() {
            let base = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = base + eps;
            let plus = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = base - eps;
            let minus = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs()));
        }
    }
    Ok(worst)
}

/// A three-block stack of one variant over a fused attention + FFN
/// increment with random small parameters.
pub struct BlockFixture {
    pub variant: BlockVariant,
    pub san: SublayerSpec,
    pub ffn: SublayerSpec,
    pub depth: usize,
    pub store: ParamStore<f64>,
    pub input: Tensor<f64>,
}

impl BlockFixture {
    pub fn new(variant: BlockVariant, seed: u64) -> Result<Self> {
        let (d, heads, ffn_dim, depth) = (4, 2, 8, 3);
        let san = SublayerSpec::san(d, heads);
        let ffn = SublayerSpec::ffn(d, ffn_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (scope, spec) in [("s", &san), ("f", &ffn)] {
            for (name, shape, _) in spec.param_shapes() {
                let n: usize = shape.iter().product();
                let base = if name == "ln.gain" { 1.0 } else { 0.0 };
                let data: Vec<f64> = (0..n).map(|_| base + rng.gen_range(-0.5..0.5)).collect();
                store.insert(format!("{scope}.{name}"), t(&shape, &data)?)?;
            }
        }
        for k in 0..depth {
            for spec in variant.coefficients(d, k) {
                let n: usize = spec.shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| spec.init + rng.gen_range(-0.2..0.2)).collect();
                store.insert(format!("blk{k}.coef.{}", spec.name), t(&spec.shape, &data)?)?;
            }
        }
        let input: Vec<f64> = (0..2 * 3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Ok(Self { variant, san, ffn, depth, store, input: t(&[2, 3, d], &input)? })
    }

    /// Runs the stack on `y`; `F(y) = a + FFN(y + a)` with `a = SAN(y)`.
    pub fn forward(&self, tape: &mut Tape<f64>, bound: &Bound, y: Var) -> Result<Var> {
        let sp = AttentionParams::bind(bound, "s")?;
        let fp = FfnParams::bind(bound, "f")?;
        let mut f = |tape: &mut Tape<f64>, y: Var| -> Result<Var> {
            let mut off = Dropout::off();
            let a = attention_f(tape, &self.san, &sp, y, None, None, &mut off)?;
            let mid = tape.add(y, a)?;
            let b = ffn_f(tape, &self.ffn, &fp, mid, &mut off)?;
            tape.add(a, b)
        };
        let mut state = BlockState::new();
        let mut y = y;
        for k in 0..self.depth {
            let coeffs = Coefficients::bind(self.variant, bound, &format!("blk{k}.coef"))?;
            y = block_forward(tape, self.variant, &coeffs, &mut f, y, &mut state)?;
        }
        Ok(y)
    }

    /// Worst relative error with respect to the stack input.
    pub fn input_check(&self) -> Result<f64> {
        grad_check(
            |tape, x| {
                let bound = self.store.bind_frozen(tape);
                let y = self.forward(tape, &bound, x)?;
                weighted_sum(tape, y)
            },
            &self.input,
            EPS,
        )
    }

    /// Worst relative error over every sublayer weight and coefficient.
    pub fn param_check(&self) -> Result<f64> {
        param_grad_check(&self.store, EPS, |tape, bound| {
            let x = tape.constant(self.input.clone());
            let y = self.forward(tape, bound, x)?;
            weighted_sum(tape, y)
        })
    }
}

/// `(variant, input error, parameter error)` for all twelve variants.
pub fn block_checks(seed: u64) -> Result<Vec<(BlockVariant, f64, f64)>> {
    BlockVariant::ALL
        .into_iter()
        .map(|v| {
            let fx = BlockFixture::new(v, seed)?;
            Ok((v, fx.input_check()?, fx.param_check()?))
        })
        .collect()
}

/// One cell of the linear-probe gradient grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCell {
    pub variant: BlockVariant,
    pub c: f64,
    pub span: usize,
    pub analytic: f64,
    pub autodiff: f64,
}

impl ProbeCell {
    pub fn rel_error(&self) -> f64 {
        (self.analytic - self.autodiff).abs() / self.analytic.abs().max(f64::MIN_POSITIVE)
    }
}

/// `dy_L/dy_t` by formula and by autodiff for `L - t` in `spans`, on a
/// stack of depth 8.
pub fn probe_grid(variants: &[BlockVariant], cs: &[f64], spans: &[usize]) -> Result<Vec<ProbeCell>> {
    let depth = spans.iter().copied().max().unwrap_or(1).max(1);
    let mut out = Vec::new();
    for &variant in variants {
        for &c in cs {
            for &span in spans {
                let t = depth - span;
                out.push(ProbeCell {
                    variant,
                    c,
                    span,
                    analytic: analytic_depth_gradient(variant, c, depth, t)?,
                    autodiff: probe_stack_gradient(variant, c, depth, t)?,
                });
            }
        }
    }
    Ok(out)
}

/// Largest `|pair - rk2|` over `trials` random inputs, with the paired
/// gate zeroed and one random shared increment per trial.
pub fn gate_identity(trials: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut pair = BlockFixture::new(BlockVariant::Rk2GatedSigmoidPair, seed + trial as u64)?;
        let names: Vec<String> = pair.store.names().filter(|n| n.contains(".coef.")).map(str::to_string).collect();
        for n in names {
            pair.store.get_mut(&n)?.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rk2 = BlockFixture::new(BlockVariant::Rk2, seed + trial as u64)?;
        rk2.store = pair.store.clone();
        rk2.input = pair.input.clone();
        let run = |fx: &BlockFixture| -> Result<Vec<f64>> {
            let mut tape = Tape::new();
            let bound = fx.store.bind_frozen(&mut tape);
            let x = tape.constant(fx.input.clone());
            let y = fx.forward(&mut tape, &bound, x)?;
            Ok(tape.data(y)?.to_vec())
        };
        let (a, b) = (run(&pair)?, run(&rk2)?);
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

/// `(variant, params - Euler params, expected coefficient total)` for an
/// encoder-decoder of the given size.
pub fn parameter_parity(vocab: usize, d_model: usize, depth: usize) -> Vec<(BlockVariant, i64, i64)> {
    let model = |v| ModelConfig::encoder_decoder(vocab, d_model, depth, depth).with_variant(v);
    let euler = model(BlockVariant::Euler).param_count() as i64;
    BlockVariant::ALL
        .into_iter()
        .map(|v| {
            let extra = model(v).param_count() as i64 - euler;
            let declared: usize = (0..depth).map(|k| v.coefficient_count(d_model, k)).sum();
            (v, extra, declared as i64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        for (name, err) in primitive_checks().unwrap() {
            assert!(err < 1e-6, "{name}: {err:e}");
        }
    }

    #[test]
    fn rk2_fixture_passes_both_checks() {
        let fx = BlockFixture::new(BlockVariant::Rk2GatedSigmoidPair, 3).unwrap();
        assert!(fx.input_check().unwrap() < 1e-6);
        assert!(fx.param_check().unwrap() < 1e-6);
    }

    #[test]
    fn parity_of_declared_variants() {
        for (v, extra, declared) in parameter_parity(32, 64, 6) {
            assert_eq!(extra, declared, "{v}");
            match v {
                BlockVariant::Rk2 | BlockVariant::Rk4 => assert_eq!(extra, 0),
                BlockVariant::Rk2LearnableScalar => assert_eq!(extra, 6 * 2),
                BlockVariant::Rk2GatedSigmoidPair => assert_eq!(extra, 6 * (2 * 64 + 1)),
                _ => {}
            }
        }
    }
}
