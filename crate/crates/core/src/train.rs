//! Optimisation: Adam, the warmup / inverse-square-root schedule, label
//! smoothing, gradient clipping and a training loop with telemetry.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{block_forward, BlockState, BlockVariant, Coefficients};
use crate::error::{Error, Result};
use crate::model::Pass;
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Element type used for a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Parse { kind: "precision", value: s.into() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Sequences per batch.
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 100,
            total_steps: 1000,
            batch_size: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.997,
            adam_eps: 1e-8,
            label_smoothing: 0.1,
            clip_norm: None,
            seed: 1,
            precision: Precision::F32,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |b: f64| b > 0.0 && b < 1.0;
        if !open_unit(self.adam_beta1) || !open_unit(self.adam_beta2) {
            return Err(Error::invalid("Adam betas must lie in (0, 1)"));
        }
        if self.warmup_steps == 0 {
            return Err(Error::invalid("warmup_steps must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label_smoothing must lie in [0, 1)"));
        }
        if !(self.peak_lr > 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("peak_lr and adam_eps must be positive"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::invalid("batch_size and log_every must be positive"));
        }
        Ok(())
    }
}

/// Linear warmup to `peak_lr` at `warmup_steps`, then
/// `peak_lr * sqrt(warmup_steps / step)`. Steps count from 1.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    let (s, w) = (step.max(1) as f64, cfg.warmup_steps as f64);
    if s <= w {
        cfg.peak_lr * s / w
    } else {
        cfg.peak_lr * libm::sqrt(w / s)
    }
}

/// First and second moments, keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T> {
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Fails with the first parameter (by name) whose gradient is not finite.
pub fn check_grads<T: Scalar>(params: &ParamStore<T>) -> Result<()> {
    for (name, t) in params.iter() {
        if t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGrad { name: name.to_string() });
        }
    }
    Ok(())
}

/// One bias-corrected Adam update with learning rate `lr`.
///
/// Every gradient is checked before anything is written, so on error the
/// parameters and moments are untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    check_grads(params)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = T::from_f64(1.0 - libm::pow(b1, t as f64));
    let c2 = T::from_f64(1.0 - libm::pow(b2, t as f64));
    let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
    let (lr, eps) = (T::from_f64(lr), T::from_f64(cfg.adam_eps));
    for (name, p) in params.iter_mut() {
        let Some(g) = p.grad().map(<[T]>::to_vec) else { continue };
        let n = g.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
        for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * *gi;
            *vi = b2 * *vi + (T::one() - b2) * *gi * *gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grads<T: Scalar>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for (_, p) in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|v| *v = *v * s);
            }
        }
    }
    norm
}

/// `(1 - eps) * NLL(target) + eps * mean_c NLL(c)`, averaged over rows whose
/// target is not `pad`.
pub fn smoothed_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    eps: T,
    pad: Option<usize>,
) -> Result<Var> {
    tape.cross_entropy(logits, targets, eps, pad)
}

/// `stack.blockN` for a parameter inside a numbered block.
fn block_key(name: &str) -> Option<(&str, usize, usize)> {
    let mut parts = name.splitn(3, '.');
    let stack = parts.next()?;
    let block = parts.next()?;
    let index = block.strip_prefix("block")?.parse().ok()?;
    Some((stack, index, stack.len() + 1 + block.len()))
}

/// L2 norm of the gradients of each block (`enc.block3`, ...), ordered by
/// stack name and then block index.
pub fn block_grad_norms<T: Scalar>(params: &ParamStore<T>) -> Vec<(String, f64)> {
    let mut sums: BTreeMap<(String, usize), (String, f64)> = BTreeMap::new();
    for (name, t) in params.iter() {
        let Some((stack, index, end)) = block_key(name) else { continue };
        let sq: f64 = t.grad().map_or(0.0, |g| g.iter().map(|v| v.as_f64() * v.as_f64()).sum());
        sums.entry((stack.to_string(), index)).or_insert_with(|| (name[..end].to_string(), 0.0)).1 += sq;
    }
    sums.into_values().map(|(k, sq)| (k, libm::sqrt(sq))).collect()
}

/// Current values of the learnable block coefficients (gate weight
/// matrices excluded), by parameter name.
pub fn coefficient_snapshot<T: Scalar>(params: &ParamStore<T>) -> Vec<(String, Vec<f64>)> {
    params
        .iter()
        .filter(|(name, _)| name.contains(".coef.") && !name.ends_with(".w"))
        .map(|(name, t)| (name.to_string(), t.data().iter().map(|v| v.as_f64()).collect()))
        .collect()
}

/// Telemetry of one logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub block_grad_norms: Vec<(String, f64)>,
    pub coeffs: Vec<(String, Vec<f64>)>,
    pub secs: f64,
}

impl MetricsRow {
    /// Norm of the lowest block over the norm of the highest block of the
    /// first stack.
    pub fn bottom_top_ratio(&self) -> Option<f64> {
        let first = self.block_grad_norms.first()?;
        let stack = first.0.split('.').next()?;
        let last = self.block_grad_norms.iter().rfind(|(k, _)| k.split('.').next() == Some(stack))?;
        (last.1 > 0.0).then(|| first.1 / last.1)
    }
}

/// What the loop should do after a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Hooks into [`train`].
pub trait TrainObserver<T> {
    /// Called for every logged step.
    fn on_metrics(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }

    /// Called after every update; returning [`Control::Stop`] ends the run.
    fn after_step(&mut self, _step: usize, _params: &ParamStore<T>) -> Result<Control> {
        Ok(Control::Continue)
    }

    /// Seconds since the run started (the core crate has no clock).
    fn elapsed_secs(&self) -> f64 {
        0.0
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl<T> TrainObserver<T> for Silent {}

/// Observer that keeps every metrics row.
#[derive(Debug, Default)]
pub struct Collect {
    pub rows: Vec<MetricsRow>,
}

impl<T> TrainObserver<T> for Collect {
    fn on_metrics(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }
}

/// Produces the scalar training loss of one step.
pub trait Objective<T: Scalar> {
    /// `rng` is the data stream for this run.
    fn loss(&mut self, pass: &mut Pass<'_, T>, step: usize, rng: &mut ChaCha8Rng, smoothing: T) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub last_loss: Option<f64>,
    pub stopped_early: bool,
}

/// Runs up to `cfg.total_steps` optimisation steps on `params`.
///
/// On error the parameters hold the values from the last successful step.
pub fn train<T, O, W>(
    params: &mut ParamStore<T>,
    objective: &mut O,
    cfg: &TrainConfig,
    observer: &mut W,
) -> Result<TrainSummary>
where
    T: Scalar,
    O: Objective<T>,
    W: TrainObserver<T>,
{
    cfg.validate()?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d0d0);
    let mut adam = AdamState::new();
    let smoothing = T::from_f64(cfg.label_smoothing);
    let mut summary = TrainSummary { steps: 0, last_loss: None, stopped_early: false };
    for step in 1..=cfg.total_steps {
        let lr = lr_at(cfg, step);
        let (loss, grad_norm, row_grads) = {
            let mut pass = Pass::train(params, &mut dropout_rng);
            let loss = objective.loss(&mut pass, step, &mut data_rng, smoothing)?;
            let value = pass.tape.value(loss)?.item()?.as_f64();
            pass.tape.backward(loss)?;
            params.zero_grads();
            params.accumulate_grads(&pass.tape, &pass.bound)?;
            check_grads(params)?;
            let logged = step == 1 || step % cfg.log_every == 0;
            let norm = params.grad_norm();
            (value, norm, logged.then(|| block_grad_norms(params)))
        };
        if let Some(max) = cfg.clip_norm {
            clip_grads(params, max);
        }
        adam_step(params, &mut adam, cfg, lr)?;
        summary.steps = step;
        summary.last_loss = Some(loss);
        if let Some(block_grad_norms) = row_grads {
            let row = MetricsRow {
                step,
                lr,
                loss,
                grad_norm,
                block_grad_norms,
                coeffs: coefficient_snapshot(params),
                secs: observer.elapsed_secs(),
            };
            observer.on_metrics(&row)?;
        }
        if observer.after_step(step, params)? == Control::Stop {
            summary.stopped_early = step < cfg.total_steps;
            break;
        }
    }
    Ok(summary)
}

/// Diagnostic stack of `depth` blocks with `F_k(y) = c y + b_k`, a learnable
/// bias per block, and loss `sum(y_L)` over a fixed input.
///
/// The gradient reaching `b_k` is `dy_{k+1}/db_k` times
/// `a^(depth - 1 - k)` where `a` is the per-block factor of
/// [`crate::blocks::analytic_depth_gradient`], so the bottom/top bias
/// gradient ratio is `a^(depth - 1)` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub variant: BlockVariant,
    pub c: f64,
    pub depth: usize,
    pub width: usize,
}

impl LinearProbe {
    pub fn init_params<T: Scalar>(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for k in 0..self.depth {
            store.insert(format!("probe.block{k}.bias"), Tensor::zeros(&[self.width]))?;
            for spec in self.variant.coefficients(self.width, k) {
                let n: usize = spec.shape.iter().product();
                let data = vec![spec.init; n];
                store.insert(format!("probe.block{k}.coef.{}", spec.name), Tensor::from_f64(&spec.shape, &data)?)?;
            }
        }
        Ok(store)
    }
}

impl<T: Scalar> Objective<T> for LinearProbe {
    fn loss(&mut self, pass: &mut Pass<'_, T>, _step: usize, _rng: &mut ChaCha8Rng, _smoothing: T) -> Result<Var> {
        let input: Vec<f64> = (0..self.width).map(|i| 0.5 + 0.1 * i as f64).collect();
        let mut y = pass.tape.constant(Tensor::from_f64(&[1, self.width], &input)?);
        let c = T::from_f64(self.c);
        let mut state = BlockState::new();
        for k in 0..self.depth {
            let scope = format!("probe.block{k}");
            let bias = pass.bound.at(&scope, "bias")?;
            let coeffs = Coefficients::bind(self.variant, &pass.bound, &format!("{scope}.coef"))?;
            let mut f = |tape: &mut Tape<T>, y: Var| -> Result<Var> {
                let cy = tape.scalar_mul(y, c)?;
                tape.add_bias(cy, bias)
            };
            y = block_forward(&mut pass.tape, self.variant, &coeffs, &mut f, y, &mut state)?;
        }
        pass.tape.sum(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::analytic_depth_gradient;

    fn cfg() -> TrainConfig {
        TrainConfig { peak_lr: 0.01, warmup_steps: 8, ..TrainConfig::default() }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg();
        assert_eq!(lr_at(&c, 8), 0.01);
        assert_eq!(lr_at(&c, 4), 0.005);
        assert!((lr_at(&c, 32) - 0.005).abs() < 1e-15);
        // continuous at the peak
        assert!((lr_at(&c, 9) - 0.01 * (8.0f64 / 9.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(TrainConfig { adam_beta2: 1.0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { warmup_steps: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { label_smoothing: 1.0, ..cfg() }.validate().is_err());
        assert!("F64".parse::<Precision>().unwrap() == Precision::F64);
    }

    fn store(values: &[f64], grad: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let mut t = Tensor::from_f64(&[values.len()], values).unwrap();
        t.set_grad(Some(grad.to_vec()));
        s.insert("w", t).unwrap();
        s
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = store(&[0.5], &[1.0]);
        let mut st = AdamState::new();
        adam_step(&mut p, &mut st, &cfg(), 1e-3).unwrap();
        // m_hat = 1, v_hat = 1: update = lr / (1 + eps)
        let moved = 0.5 - p.get("w").unwrap().data()[0];
        assert!((moved - 1e-3).abs() < 1e-6);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(&[0.5, -1.0], &[0.0, 0.0]);
        let mut st = AdamState::new();
        adam_step(&mut p, &mut st, &cfg(), 1e-3).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.5, -1.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut p = store(&[0.5, -1.0], &[f64::NAN, 1.0]);
        let before = p.clone();
        let mut st = AdamState::new();
        let err = adam_step(&mut p, &mut st, &cfg(), 1e-3).unwrap_err();
        assert_eq!(err, Error::NonFiniteGrad { name: "w".into() });
        assert!(p.same_values(&before));
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut p = store(&[0.0, 0.0], &[3.0, 4.0]);
        let pre = clip_grads(&mut p, 1.0);
        assert_eq!(pre, 5.0);
        assert!(p.grad_norm() <= 1.0 + 1e-6);
        let mut q = store(&[0.0], &[0.5]);
        clip_grads(&mut q, 1.0);
        assert_eq!(q.get("w").unwrap().grad().unwrap(), &[0.5]);
    }

    #[test]
    fn smoothing_examples() {
        let mut tape = Tape::<f64>::new();
        // uniform logits: ln V for any smoothing
        let z = tape.constant(Tensor::zeros(&[2, 10]));
        for eps in [0.0, 0.1, 0.5] {
            let l = smoothed_cross_entropy(&mut tape, z, &[3, 7], eps, None).unwrap();
            assert!((tape.data(l).unwrap()[0] - 10f64.ln()).abs() < 1e-12);
        }
        // margin-30 one-hot logits, eps 0.1: ~0.1 * (9/10) * 30
        let mut row = vec![0.0; 10];
        row[4] = 30.0;
        let z = tape.constant(Tensor::from_f64(&[1, 10], &row).unwrap());
        let l = smoothed_cross_entropy(&mut tape, z, &[4], 0.1, None).unwrap();
        assert!((tape.data(l).unwrap()[0] - 2.7).abs() < 1e-3);
        let pad = tape.constant(Tensor::zeros(&[1, 10]));
        assert_eq!(smoothed_cross_entropy(&mut tape, pad, &[0], 0.1, Some(0)), Err(Error::EmptyBatch));
    }

    #[test]
    fn block_norms_group_and_order() {
        let mut s = ParamStore::<f64>::new();
        for (name, g) in [
            ("enc.block10.ffn.w1", 3.0),
            ("enc.block2.san.wq", 3.0),
            ("enc.block2.ffn.w1", 4.0),
            ("enc.embed", 100.0),
            ("dec.block0.self.wq", 1.0),
        ] {
            let mut t = Tensor::from_f64(&[1], &[0.0]).unwrap();
            t.set_grad(Some(vec![g]));
            s.insert(name, t).unwrap();
        }
        let norms = block_grad_norms(&s);
        let keys: Vec<&str> = norms.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, ["dec.block0", "enc.block2", "enc.block10"]);
        assert_eq!(norms[1].1, 5.0);
    }

    #[test]
    fn zero_steps_change_nothing() {
        let probe = LinearProbe { variant: BlockVariant::Rk2, c: 0.1, depth: 3, width: 2 };
        let mut p = probe.init_params::<f64>().unwrap();
        let before = p.clone();
        let mut obs = Collect::default();
        let cfg = TrainConfig { total_steps: 0, ..cfg() };
        let s = train(&mut p, &mut probe.clone(), &cfg, &mut obs).unwrap();
        assert_eq!(s.steps, 0);
        assert!(obs.rows.is_empty());
        assert!(p.same_values(&before));
    }

    #[test]
    fn probe_telemetry_matches_closed_form() {
        for variant in [BlockVariant::Rk2, BlockVariant::Rk2GammaOne] {
            let probe = LinearProbe { variant, c: 0.1, depth: 12, width: 4 };
            let mut p = probe.init_params::<f64>().unwrap();
            let mut obs = Collect::default();
            let cfg = TrainConfig { total_steps: 1, ..cfg() };
            train(&mut p, &mut probe.clone(), &cfg, &mut obs).unwrap();
            let row = &obs.rows[0];
            assert_eq!(row.block_grad_norms.len(), 12);
            let ratio = row.bottom_top_ratio().unwrap();
            let want = analytic_depth_gradient(variant, 0.1, 12, 1).unwrap();
            assert!(((ratio - want) / want).abs() < 1e-12, "{variant}: {ratio} vs {want}");
        }
    }

    #[test]
    fn learned_coefficients_are_logged_only_when_present() {
        let run = |variant| {
            let probe = LinearProbe { variant, c: 0.1, depth: 2, width: 2 };
            let mut p = probe.init_params::<f64>().unwrap();
            let mut obs = Collect::default();
            let cfg = TrainConfig { total_steps: 10, ..cfg() };
            train(&mut p, &mut probe.clone(), &cfg, &mut obs).unwrap();
            obs.rows
        };
        let rows = run(BlockVariant::Rk2LearnableScalar);
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), [1, 10]);
        let names: Vec<&str> = rows[1].coeffs.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(
            names,
            [
                "probe.block0.coef.gamma1",
                "probe.block0.coef.gamma2",
                "probe.block1.coef.gamma1",
                "probe.block1.coef.gamma2"
            ]
        );
        // gammas moved away from their init of 1
        assert!(rows[1].coeffs[0].1[0] != 1.0);
        assert!(run(BlockVariant::Rk2).iter().all(|r| r.coeffs.is_empty()));
    }

    #[test]
    fn training_is_deterministic() {
        let probe = LinearProbe { variant: BlockVariant::Rk2GatedSigmoidPair, c: 0.2, depth: 3, width: 3 };
        let run = || {
            let mut p = probe.init_params::<f64>().unwrap();
            let cfg = TrainConfig { total_steps: 20, ..cfg() };
            train(&mut p, &mut probe.clone(), &cfg, &mut Silent).unwrap();
            p
        };
        assert!(run().same_values(&run()));
    }
}
