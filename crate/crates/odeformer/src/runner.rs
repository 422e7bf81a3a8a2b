//! Training objectives and evaluation for the tasks.

use odeformer_core::model::{
    lm_forward, lm_loss, seq2seq_logits, seq2seq_loss, ModelConfig, Pass, SeqBatch, TokenBatch,
};
use odeformer_core::tensor::{ParamStore, Var};
use odeformer_core::train::Objective;
use odeformer_core::{Result, Scalar};
use rand_chacha::ChaCha8Rng;

use crate::tasks::{CharCorpus, SeqTask};

/// Encoder-decoder training on freshly sampled copy / reverse batches.
pub struct SeqObjective<'a> {
    pub model: &'a ModelConfig,
    pub task: &'a SeqTask,
    pub batch_size: usize,
}

impl<T: Scalar> Objective<T> for SeqObjective<'_> {
    fn loss(&mut self, pass: &mut Pass<'_, T>, _step: usize, rng: &mut ChaCha8Rng, smoothing: T) -> Result<Var> {
        let batch = self
            .task
            .sample(rng, self.batch_size)
            .map_err(|e| odeformer_core::Error::InvalidArgument(e.to_string()))?;
        seq2seq_loss(self.model, pass, &batch, smoothing)
    }
}

/// Causal LM training on random windows of the training split.
pub struct LmObjective<'a> {
    pub model: &'a ModelConfig,
    pub corpus: &'a CharCorpus,
    pub seq_len: usize,
    pub batch_size: usize,
}

impl<T: Scalar> Objective<T> for LmObjective<'_> {
    fn loss(&mut self, pass: &mut Pass<'_, T>, _step: usize, rng: &mut ChaCha8Rng, smoothing: T) -> Result<Var> {
        let batch = self
            .corpus
            .sample_train(rng, self.batch_size, self.seq_len)
            .map_err(|e| odeformer_core::Error::InvalidArgument(e.to_string()))?;
        lm_loss(self.model, pass, &batch, smoothing)
    }
}

/// Teacher-forced next-token accuracy and mean loss over non-pad labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqEval {
    pub accuracy: f64,
    pub loss: f64,
}

pub fn eval_seq<T: Scalar>(model: &ModelConfig, params: &ParamStore<T>, set: &[SeqBatch]) -> Result<SeqEval> {
    let (mut hits, mut count, mut loss) = (0usize, 0usize, 0.0f64);
    for batch in set {
        let mut pass = Pass::eval(params);
        let logits = seq2seq_logits(model, &mut pass, batch)?;
        let labels = batch.target.labels()?;
        let z = pass.tape.data(logits)?;
        let v = model.vocab_size;
        for (i, &t) in labels.ids().iter().enumerate() {
            if Some(t) == model.pad_id {
                continue;
            }
            let row = &z[i * v..(i + 1) * v];
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            hits += usize::from(best == t);
            let max = row[best].as_f64();
            let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
            loss += lse - row[t].as_f64();
            count += 1;
        }
    }
    if count == 0 {
        return Err(odeformer_core::Error::EmptyBatch);
    }
    Ok(SeqEval { accuracy: hits as f64 / count as f64, loss: loss / count as f64 })
}

/// Perplexity over a list of evaluation windows: `exp` of the mean
/// next-token loss over every predicted token.
pub fn eval_perplexity<T: Scalar>(model: &ModelConfig, params: &ParamStore<T>, batches: &[TokenBatch]) -> Result<f64> {
    let (mut total, mut count) = (0.0f64, 0usize);
    for b in batches {
        let losses = lm_forward(model, params, b)?;
        total += losses.data().iter().map(|v| v.as_f64()).sum::<f64>();
        count += b.labels()?.token_count();
    }
    if count == 0 {
        return Err(odeformer_core::Error::EmptyBatch);
    }
    Ok((total / count as f64).exp())
}
