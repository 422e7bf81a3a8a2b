use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

use rand::RngCore;

use super::{ModelConfig, Position, SeqBatch, TokenBatch};
use crate::blocks::{
    attention_f, block_forward, ffn_f, AttentionParams, BlockState, BlockVariant, Coefficients, Dropout, FfnParams,
    OdeGranularity,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{log_sum_exp, Bound, ParamStore, Tape, Tensor, Var};

/// Additive attention mask value for blocked positions.
const BLOCKED: f64 = -1e9;

/// Stage-function evaluations per residual unit, in execution order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageTrace {
    /// Encoder (or LM) units.
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
}

/// One forward pass: a fresh tape with the parameters bound onto it.
pub struct Pass<'a, T> {
    pub tape: Tape<T>,
    pub bound: Bound,
    pub trace: StageTrace,
    dropout: Dropout<'a>,
}

impl<'a, T: Scalar> Pass<'a, T> {
    /// Gradient-tracking pass with dropout drawn from `rng`.
    pub fn train(params: &ParamStore<T>, rng: &'a mut dyn RngCore) -> Self {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        Self { tape, bound, trace: StageTrace::default(), dropout: Dropout::train(rng) }
    }

    /// Gradient-tracking pass without dropout.
    pub fn tracked(params: &ParamStore<T>) -> Self {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        Self { tape, bound, trace: StageTrace::default(), dropout: Dropout::off() }
    }

    /// Inference pass: parameters are constants, dropout is off.
    pub fn eval(params: &ParamStore<T>) -> Self {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        Self { tape, bound, trace: StageTrace::default(), dropout: Dropout::off() }
    }
}

fn check_len(cfg: &ModelConfig, len: usize) -> Result<()> {
    if len > cfg.max_len {
        return Err(Error::Length { len, max: cfg.max_len });
    }
    Ok(())
}

fn sinusoid<T: Scalar>(rows: usize, len: usize, d: usize) -> Tensor<T> {
    let mut table = vec![T::zero(); len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / libm::pow(10000.0, i as f64 / d as f64);
            table[pos * d + i] = T::from_f64(libm::sin(angle));
            if i + 1 < d {
                table[pos * d + i + 1] = T::from_f64(libm::cos(angle));
            }
        }
    }
    let data = table.repeat(rows);
    Tensor::new(&[rows, len, d], data).expect("shape matches data")
}

/// `sqrt(d) * embed[token] + position`, shaped `[rows, len, d]`.
fn embed<T: Scalar>(cfg: &ModelConfig, pass: &mut Pass<'_, T>, stack: &str, tokens: &TokenBatch) -> Result<Var> {
    check_len(cfg, tokens.len())?;
    let (rows, len, d) = (tokens.rows(), tokens.len(), cfg.d_model);
    let table = pass.bound.at(stack, "embed")?;
    let tape = &mut pass.tape;
    let e = tape.embedding(table, tokens.ids(), &[rows, len])?;
    let e = tape.scalar_mul(e, T::from_usize(d).sqrt())?;
    let pos = match cfg.position {
        Position::Sinusoidal => tape.constant(sinusoid(rows, len, d)),
        Position::LearnedAbsolute => {
            let ids: Vec<usize> = (0..rows).flat_map(|_| 0..len).collect();
            let table = pass.bound.at(stack, "pos")?;
            tape.embedding(table, &ids, &[rows, len])?
        }
    };
    tape.add(e, pos)
}

/// Additive `[rows, q_len, k_len]` mask hiding padded keys and, when
/// `causal`, future positions. `None` if nothing is hidden.
fn attention_mask<T: Scalar>(tape: &mut Tape<T>, q_len: usize, keys: &TokenBatch, causal: bool) -> Option<Var> {
    if !causal && !keys.has_padding() {
        return None;
    }
    let (rows, k_len) = (keys.rows(), keys.len());
    let blocked = T::from_f64(BLOCKED);
    let mut data = vec![T::zero(); rows * q_len * k_len];
    for r in 0..rows {
        for q in 0..q_len {
            for k in 0..k_len {
                if keys.is_pad(r, k) || (causal && k > q) {
                    data[(r * q_len + q) * k_len + k] = blocked;
                }
            }
        }
    }
    Some(tape.constant(Tensor::new(&[rows, q_len, k_len], data).expect("shape matches data")))
}

fn final_norm<T: Scalar>(pass: &mut Pass<'_, T>, cfg: &ModelConfig, stack: &str, x: Var) -> Result<Var> {
    let g = pass.bound.at(stack, "ln.gain")?;
    let b = pass.bound.at(stack, "ln.bias")?;
    pass.tape.layer_norm(x, g, b, T::from_f64(cfg.ln_eps))
}

fn output_logits<T: Scalar>(pass: &mut Pass<'_, T>, cfg: &ModelConfig, stack: &str, h: Var) -> Result<Var> {
    let w = if cfg.tie_embeddings {
        let e = pass.bound.at(stack, "embed")?;
        pass.tape.transpose(e)?
    } else {
        pass.bound.at(stack, "out")?
    };
    pass.tape.matmul(h, w)
}

/// Which sublayers of one layer a residual unit covers.
#[derive(Clone, Copy)]
enum Unit {
    Fused,
    San,
    Ffn,
}

/// Runs the ODE block stack of `stack` over `x`.
fn ode_stack<T: Scalar>(
    cfg: &ModelConfig,
    pass: &mut Pass<'_, T>,
    stack: &str,
    mut x: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let (san, ffn) = (cfg.san_spec(), cfg.ffn_spec());
    let mut state = BlockState::new();
    let Pass { tape, bound, trace, dropout } = pass;
    for i in 0..cfg.enc_depth {
        let block = format!("{stack}.block{i}");
        let ap = AttentionParams::bind(bound, &format!("{block}.san"))?;
        let fp = FfnParams::bind(bound, &format!("{block}.ffn"))?;
        // (unit, takes the configured variant, coefficient scope)
        let units: &[(Unit, bool, &str)] = match cfg.granularity {
            OdeGranularity::Fused => &[(Unit::Fused, true, "coef")],
            OdeGranularity::SublayerWise => &[(Unit::San, true, "san.coef"), (Unit::Ffn, true, "ffn.coef")],
            OdeGranularity::SanOnly => &[(Unit::San, true, "san.coef"), (Unit::Ffn, false, "")],
            OdeGranularity::FfnOnly => &[(Unit::San, false, ""), (Unit::Ffn, true, "ffn.coef")],
        };
        for &(unit, ode, scope) in units {
            let calls = Cell::new(0usize);
            let mut f = |tape: &mut Tape<T>, y: Var| -> Result<Var> {
                calls.set(calls.get() + 1);
                match unit {
                    Unit::San => attention_f(tape, &san, &ap, y, None, mask, dropout),
                    Unit::Ffn => ffn_f(tape, &ffn, &fp, y, dropout),
                    Unit::Fused => {
                        let a = attention_f(tape, &san, &ap, y, None, mask, dropout)?;
                        let mid = tape.add(y, a)?;
                        let b = ffn_f(tape, &ffn, &fp, mid, dropout)?;
                        tape.add(a, b)
                    }
                }
            };
            if ode {
                let coeffs = Coefficients::bind(cfg.variant, bound, &format!("{block}.{scope}"))?;
                for _ in 0..cfg.repeats {
                    calls.set(0);
                    x = block_forward(tape, cfg.variant, &coeffs, &mut f, x, &mut state)?;
                    trace.encoder.push(calls.get());
                }
            } else {
                let mut plain = BlockState::new();
                x = block_forward(tape, BlockVariant::Euler, &Coefficients::None, &mut f, x, &mut plain)?;
                trace.encoder.push(calls.get());
            }
        }
    }
    final_norm(pass, cfg, stack, x)
}

fn require_seq2seq(cfg: &ModelConfig) -> Result<()> {
    if cfg.is_lm() {
        return Err(Error::invalid("encoder-decoder operation on a language-model config"));
    }
    Ok(())
}

fn require_lm(cfg: &ModelConfig) -> Result<()> {
    if !cfg.is_lm() {
        return Err(Error::invalid("language-model operation on an encoder-decoder config"));
    }
    Ok(())
}

/// Encoder states `[rows, src_len, d]` after the final layer norm.
pub fn encode<T: Scalar>(cfg: &ModelConfig, pass: &mut Pass<'_, T>, source: &TokenBatch) -> Result<Var> {
    require_seq2seq(cfg)?;
    let x = embed(cfg, pass, "enc", source)?;
    let mask = attention_mask(&mut pass.tape, source.len(), source, false);
    ode_stack(cfg, pass, "enc", x, mask)
}

/// Decoder logits `[rows, tgt_len, vocab]` for the decoder input
/// `target_in`, attending to `memory` (the encoder states of `source`).
///
/// Every decoder layer is one Euler step over the fused increment of its
/// causal self-attention, cross-attention and feed-forward sublayers.
pub fn decode<T: Scalar>(
    cfg: &ModelConfig,
    pass: &mut Pass<'_, T>,
    memory: Var,
    source: &TokenBatch,
    target_in: &TokenBatch,
) -> Result<Var> {
    require_seq2seq(cfg)?;
    if source.rows() != target_in.rows() {
        return Err(Error::dim("decode", &[source.rows()], &[target_in.rows()]));
    }
    let mut x = embed(cfg, pass, "dec", target_in)?;
    let q_len = target_in.len();
    let self_mask = attention_mask(&mut pass.tape, q_len, target_in, true);
    let cross_mask = attention_mask(&mut pass.tape, q_len, source, false);
    let (san, ffn) = (cfg.san_spec(), cfg.ffn_spec());
    {
        let Pass { tape, bound, trace, dropout } = &mut *pass;
        for i in 0..cfg.dec_depth {
            let block = format!("dec.block{i}");
            let sp = AttentionParams::bind(bound, &format!("{block}.self"))?;
            let cp = AttentionParams::bind(bound, &format!("{block}.cross"))?;
            let fp = FfnParams::bind(bound, &format!("{block}.ffn"))?;
            let calls = Cell::new(0usize);
            let mut f = |tape: &mut Tape<T>, y: Var| -> Result<Var> {
                calls.set(calls.get() + 1);
                let a = attention_f(tape, &san, &sp, y, None, self_mask, dropout)?;
                let y1 = tape.add(y, a)?;
                let c = attention_f(tape, &san, &cp, y1, Some(memory), cross_mask, dropout)?;
                let y2 = tape.add(y1, c)?;
                let b = ffn_f(tape, &ffn, &fp, y2, dropout)?;
                let ac = tape.add(a, c)?;
                tape.add(ac, b)
            };
            let mut state = BlockState::new();
            x = block_forward(tape, BlockVariant::Euler, &Coefficients::None, &mut f, x, &mut state)?;
            trace.decoder.push(calls.get());
        }
    }
    let h = final_norm(pass, cfg, "dec", x)?;
    output_logits(pass, cfg, "dec", h)
}

/// Teacher-forced logits for `batch.target.inputs()`.
pub fn seq2seq_logits<T: Scalar>(cfg: &ModelConfig, pass: &mut Pass<'_, T>, batch: &SeqBatch) -> Result<Var> {
    let memory = encode(cfg, pass, &batch.source)?;
    decode(cfg, pass, memory, &batch.source, &batch.target.inputs()?)
}

/// Label-smoothed cross-entropy of the next target token, averaged over
/// non-pad labels.
pub fn seq2seq_loss<T: Scalar>(
    cfg: &ModelConfig,
    pass: &mut Pass<'_, T>,
    batch: &SeqBatch,
    smoothing: T,
) -> Result<Var> {
    let logits = seq2seq_logits(cfg, pass, batch)?;
    let labels = batch.target.labels()?;
    pass.tape.cross_entropy(logits, labels.ids(), smoothing, cfg.pad_id)
}

/// Encoder states as a plain tensor (inference).
pub fn encode_states<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>, source: &TokenBatch) -> Result<Tensor<T>> {
    let mut pass = Pass::eval(params);
    let states = encode(cfg, &mut pass, source)?;
    Ok(pass.tape.value(states)?.clone())
}

/// Logits `[rows, vocab]` for the token following `prefix`.
pub fn decode_step<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    prefix: &TokenBatch,
    memory: &Tensor<T>,
    source: &TokenBatch,
) -> Result<Tensor<T>> {
    let mut pass = Pass::eval(params);
    let mem = pass.tape.constant(memory.clone());
    let logits = decode(cfg, &mut pass, mem, source, prefix)?;
    let (rows, len, v) = (prefix.rows(), prefix.len(), cfg.vocab_size);
    let all = pass.tape.data(logits)?;
    let mut out = Vec::with_capacity(rows * v);
    for r in 0..rows {
        let at = (r * len + len - 1) * v;
        out.extend_from_slice(&all[at..at + v]);
    }
    Tensor::new(&[rows, v], out)
}

/// Index of the largest value; ties go to the lowest index.
fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from BOS. Each output stops before EOS or after
/// `max_out_len` tokens.
pub fn greedy_decode<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    source: &TokenBatch,
    max_out_len: usize,
) -> Result<Vec<Vec<usize>>> {
    require_seq2seq(cfg)?;
    let rows = source.rows();
    let mut outputs = vec![Vec::new(); rows];
    if max_out_len == 0 {
        return Ok(outputs);
    }
    let memory = encode_states(cfg, params, source)?;
    let mut prefix = vec![cfg.bos_id; rows];
    let mut done = vec![false; rows];
    for step in 1..=max_out_len {
        let batch = TokenBatch::new(rows, step, prefix.clone(), cfg.pad_id)?;
        let logits = decode_step(cfg, params, &batch, &memory, source)?;
        let mut next = Vec::with_capacity(rows);
        for r in 0..rows {
            let tok = argmax(&logits.data()[r * cfg.vocab_size..(r + 1) * cfg.vocab_size]);
            if !done[r] {
                if tok == cfg.eos_id {
                    done[r] = true;
                } else {
                    outputs[r].push(tok);
                }
            }
            next.push(tok);
        }
        if done.iter().all(|&d| d) {
            break;
        }
        // rebuild [rows, step + 1] from the old prefix and the new column
        let mut grown = Vec::with_capacity(rows * (step + 1));
        for r in 0..rows {
            grown.extend_from_slice(&prefix[r * step..(r + 1) * step]);
            grown.push(next[r]);
        }
        prefix = grown;
    }
    Ok(outputs)
}

/// Causal LM logits `[rows, len, vocab]` for every position of `tokens`.
pub fn lm_logits<T: Scalar>(cfg: &ModelConfig, pass: &mut Pass<'_, T>, tokens: &TokenBatch) -> Result<Var> {
    require_lm(cfg)?;
    let x = embed(cfg, pass, "lm", tokens)?;
    let mask = attention_mask(&mut pass.tape, tokens.len(), tokens, true);
    let h = ode_stack(cfg, pass, "lm", x, mask)?;
    output_logits(pass, cfg, "lm", h)
}

/// Mean next-token loss over `batch.labels()`; the model reads
/// `batch.inputs()`.
pub fn lm_loss<T: Scalar>(cfg: &ModelConfig, pass: &mut Pass<'_, T>, batch: &TokenBatch, smoothing: T) -> Result<Var> {
    let logits = lm_logits(cfg, pass, &batch.inputs()?)?;
    let labels = batch.labels()?;
    pass.tape.cross_entropy(logits, labels.ids(), smoothing, cfg.pad_id)
}

/// Per-position next-token cross-entropy `[rows, len - 1]` (no smoothing).
/// Positions whose label is padding hold 0.
pub fn lm_forward<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>, batch: &TokenBatch) -> Result<Tensor<T>> {
    let mut pass = Pass::eval(params);
    let inputs = batch.inputs()?;
    let logits = lm_logits(cfg, &mut pass, &inputs)?;
    let labels = batch.labels()?;
    let v = cfg.vocab_size;
    let z = pass.tape.data(logits)?;
    let losses = labels
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if Some(t) == cfg.pad_id {
                return Ok(T::zero());
            }
            let row = &z[i * v..(i + 1) * v];
            if t >= v {
                return Err(Error::dim("lm_forward", &[v], &[t]));
            }
            Ok(log_sum_exp(row) - row[t])
        })
        .collect::<Result<Vec<T>>>()?;
    Tensor::new(&[labels.rows(), labels.len()], losses)
}

/// `exp` of the mean loss over non-pad labels of `batch`.
pub fn perplexity<T: Scalar>(losses: &Tensor<T>, batch: &TokenBatch) -> Result<f64> {
    let labels = batch.labels()?;
    let count = labels.token_count();
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = losses.data().iter().map(|v| v.as_f64()).sum();
    Ok(libm::exp(total / count as f64))
}
