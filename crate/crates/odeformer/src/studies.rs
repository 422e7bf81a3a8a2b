//! Experiment drivers. Each study is a pure function of its [`RunConfig`]
//! (seeds included) and returns a [`StudyReport`].

use std::cell::{Cell, RefCell};
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail};
use odeformer_core::blocks::{analytic_depth_gradient, probe_stack_gradient, BlockVariant};
use odeformer_core::model::{init_params, lm_forward, ModelConfig, TokenBatch};
use odeformer_core::ode::{empirical_order, OdeProblem, RkScheme};
use odeformer_core::tensor::ParamStore;
use odeformer_core::train::{train, Collect, Control, LinearProbe, MetricsRow, Precision, TrainConfig};
use odeformer_core::{Error, Scalar};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::metrics::{MetricsWriter, RunObserver};
use crate::report::{median, Seed, StudyReport, Timing};
use crate::runner::{eval_perplexity, eval_seq, LmObjective, SeqObjective};
use crate::suite;
use crate::tasks::{CharCorpus, TaskKind, BOS, EOS, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    OrderStudy,
    GradcheckSuite,
    CopyTask,
    LmTruncation,
    SchemaComparison,
    ScalingComparison,
    DepthSweep,
    GradientNormStudy,
}

impl Study {
    pub const ALL: [Study; 8] = [
        Study::OrderStudy,
        Study::GradcheckSuite,
        Study::CopyTask,
        Study::LmTruncation,
        Study::SchemaComparison,
        Study::ScalingComparison,
        Study::DepthSweep,
        Study::GradientNormStudy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::OrderStudy => "order_study",
            Study::GradcheckSuite => "gradcheck_suite",
            Study::CopyTask => "copy_task",
            Study::LmTruncation => "lm_truncation",
            Study::SchemaComparison => "schema_comparison",
            Study::ScalingComparison => "scaling_comparison",
            Study::DepthSweep => "depth_sweep",
            Study::GradientNormStudy => "gradient_norm_study",
        }
    }

    /// Desk-scale defaults; a config file overrides any of them.
    pub fn defaults(self) -> RunConfig {
        use BlockVariant::*;
        let mut cfg = RunConfig::default();
        let lm = |cfg: &mut RunConfig| {
            cfg.task.kind = TaskKind::CharLm;
            cfg.task.seq_len = 32;
            cfg.model.dec_depth = 0;
            cfg.model.max_len = 32;
            cfg.model.d_model = 32;
            cfg.model.ffn_dim = 64;
            cfg.train.peak_lr = 3e-3;
            cfg.train.warmup_steps = 100;
            cfg.train.total_steps = 1000;
            cfg.study.eval_rows = 32;
        };
        match self {
            Study::OrderStudy | Study::GradcheckSuite => {
                cfg.train.precision = Precision::F64;
                cfg.study.metrics = false;
            }
            Study::CopyTask => {
                cfg.study.variants = vec![Euler, Rk2];
                cfg.train.total_steps = 5000;
            }
            Study::DepthSweep => {
                cfg.study.variants = vec![Euler, Rk2, Rk2GammaOne, Rk4];
                cfg.study.depths = vec![2, 4, 6, 8];
                cfg.train.total_steps = 1000;
                cfg.study.target_accuracy = 1.0;
                cfg.study.eval_every = 250;
            }
            Study::LmTruncation => {
                lm(&mut cfg);
                cfg.study.variants = vec![Euler, Rk2, Rk4, Rk2LearnableScalar];
                cfg.study.depths = vec![1, 2];
            }
            Study::SchemaComparison => {
                lm(&mut cfg);
                cfg.study.variants = vec![
                    Euler,
                    Leapfrog,
                    Multistep,
                    Dlcl,
                    PolyNet,
                    Rk2,
                    Rk2GammaOne,
                    Rk2LearnableScalar,
                    Rk2GatedSigmoidPair,
                    Rk4,
                ];
                cfg.study.depths = vec![2];
            }
            Study::ScalingComparison => {
                lm(&mut cfg);
                cfg.study.variants = SCALING_VARIANTS.to_vec();
                cfg.study.depths = vec![1];
            }
            Study::GradientNormStudy => {
                lm(&mut cfg);
                cfg.study.variants = vec![Rk2, Rk2GammaOne];
                cfg.study.depths = vec![12];
                cfg.model.d_model = 16;
                cfg.model.ffn_dim = 32;
                cfg.task.seq_len = 16;
                cfg.model.max_len = 16;
                cfg.train.total_steps = 2000;
            }
        }
        cfg
    }

    pub fn run(self, cfg: &RunConfig, metrics_dir: Option<&Path>) -> anyhow::Result<StudyReport> {
        let mut report = match self {
            Study::OrderStudy => order_study()?,
            Study::GradcheckSuite => gradcheck_suite()?,
            Study::CopyTask => copy_task(cfg, metrics_dir)?,
            Study::LmTruncation => lm_truncation(cfg, metrics_dir)?,
            Study::SchemaComparison => schema_comparison(cfg, metrics_dir)?,
            Study::ScalingComparison => scaling_comparison(cfg, metrics_dir)?,
            Study::DepthSweep => depth_sweep(cfg, metrics_dir)?,
            Study::GradientNormStudy => gradient_norm_study(cfg, metrics_dir)?,
        };
        report.add_medians();
        Ok(report)
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Study {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let wanted = s.replace('-', "_");
        Study::ALL.into_iter().find(|st| st.name() == wanted).ok_or_else(|| anyhow!("unknown study '{s}'"))
    }
}

/// The scaling-function rows; the first is a plain Euler block applied
/// twice with shared weights.
pub const SCALING_VARIANTS: [BlockVariant; 7] = [
    BlockVariant::Euler,
    BlockVariant::Rk2,
    BlockVariant::Rk2GammaOne,
    BlockVariant::Rk2LearnableScalar,
    BlockVariant::Rk2GatedSigmoid,
    BlockVariant::Rk2GatedSigmoidPair,
    BlockVariant::Rk2Tanh,
];

/// Row label of the shared-weight Euler-twice model.
pub const EULER_TWICE: &str = "EulerTwice";

// ---------------------------------------------------------------------------
// cells

/// Output files of one trained cell.
#[derive(Debug, Clone)]
pub struct CellFiles {
    pub metrics: PathBuf,
    pub last_good: PathBuf,
}

impl CellFiles {
    fn new(dir: Option<&Path>, study: &str, label: &str, depth: usize, seed: u64) -> Option<Self> {
        dir.map(|d| {
            let stem = format!("{study}-{label}-d{depth}-s{seed}");
            Self { metrics: d.join(format!("{stem}.metrics.csv")), last_good: d.join(format!("{stem}.last_good.ckpt")) }
        })
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Overflow { .. } | Error::NonFiniteGrad { .. })
}

/// Runs [`train`]; on a numerical failure the last good parameters are
/// written to `files.last_good` and `Ok(false)` is returned.
fn guarded_train<T: Scalar, O: odeformer_core::train::Objective<T>>(
    params: &mut ParamStore<T>,
    objective: &mut O,
    tcfg: &TrainConfig,
    observer: &mut RunObserver<'_, T>,
    files: Option<&CellFiles>,
) -> anyhow::Result<bool> {
    match train(params, objective, tcfg, observer) {
        Ok(_) => Ok(true),
        Err(e) => {
            if let Some(f) = files {
                checkpoint::save(params, &f.last_good)?;
            }
            if let Some(inner) = observer.take_failure() {
                return Err(inner);
            }
            if is_divergence(&e) {
                Ok(false)
            } else {
                Err(e.into())
            }
        }
    }
}

fn sink(files: Option<&CellFiles>) -> anyhow::Result<Option<MetricsWriter>> {
    files.map(|f| MetricsWriter::create(&f.metrics)).transpose()
}

/// Encoder-decoder model of a copy / reverse cell.
pub fn seq_model(cfg: &RunConfig, variant: BlockVariant, depth: usize) -> ModelConfig {
    let mut m = cfg.cell_model(cfg.task.vocab_size, variant, depth);
    m.dec_depth = m.dec_depth.max(1);
    m.pad_id = Some(PAD);
    m.bos_id = BOS;
    m.eos_id = EOS;
    m
}

/// Causal LM of a corpus cell.
pub fn lm_model(cfg: &RunConfig, vocab: usize, variant: BlockVariant, depth: usize) -> ModelConfig {
    let mut m = cfg.cell_model(vocab, variant, depth);
    m.dec_depth = 0;
    m.pad_id = None;
    m.bos_id = 0;
    m.eos_id = 0;
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopyOutcome {
    /// First evaluation step at or above the target accuracy.
    pub steps_to_target: Option<usize>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    /// Teacher-forced loss on the evaluation set after training.
    pub eval_loss: f64,
    pub rows: Vec<MetricsRow>,
    pub diverged: bool,
    pub secs: f64,
}

pub fn copy_cell<T: Scalar>(
    cfg: &RunConfig,
    model: &ModelConfig,
    seed: u64,
    files: Option<&CellFiles>,
) -> anyhow::Result<CopyOutcome> {
    model.validate()?;
    let task = cfg.task.seq_task();
    let eval = task.eval_set(seed, cfg.study.eval_batches, cfg.study.eval_rows)?;
    let mut params = init_params::<T>(model, seed)?;
    let initial = eval_seq(model, &params, &eval)?;
    let tcfg = cfg.cell_train(seed);
    let hit = Cell::new(None);
    let last = RefCell::new(None);
    let target = cfg.study.target_accuracy;
    let mut observer = RunObserver::new(sink(files)?).with_probe(cfg.study.eval_every, |step, p: &ParamStore<T>| {
        let e = eval_seq(model, p, &eval)?;
        *last.borrow_mut() = Some(e);
        if e.accuracy >= target {
            hit.set(Some(step));
            return Ok(Control::Stop);
        }
        Ok(Control::Continue)
    });
    let mut objective = SeqObjective { model, task: &task, batch_size: tcfg.batch_size };
    let ok = guarded_train(&mut params, &mut objective, &tcfg, &mut observer, files)?;
    let secs = observer.secs();
    let rows = std::mem::take(&mut observer.rows);
    drop(observer);
    let end = match (hit.get(), *last.borrow()) {
        (Some(_), Some(e)) => e,
        _ => eval_seq(model, &params, &eval)?,
    };
    Ok(CopyOutcome {
        steps_to_target: hit.get(),
        initial_accuracy: initial.accuracy,
        final_accuracy: end.accuracy,
        eval_loss: end.loss,
        rows,
        diverged: !ok || !end.loss.is_finite(),
        secs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmOutcome {
    pub valid_ppl: f64,
    /// Mean of the last (up to) ten logged training losses.
    pub train_loss: f64,
    pub rows: Vec<MetricsRow>,
    pub diverged: bool,
    pub secs: f64,
}

pub fn lm_cell<T: Scalar>(
    cfg: &RunConfig,
    corpus: &CharCorpus,
    valid: &[TokenBatch],
    model: &ModelConfig,
    seed: u64,
    files: Option<&CellFiles>,
) -> anyhow::Result<LmOutcome> {
    model.validate()?;
    if cfg.task.seq_len > model.max_len {
        bail!("seq_len {} exceeds max_len {}", cfg.task.seq_len, model.max_len);
    }
    let mut params = init_params::<T>(model, seed)?;
    let tcfg = cfg.cell_train(seed);
    let mut observer = RunObserver::new(sink(files)?);
    let mut objective = LmObjective { model, corpus, seq_len: cfg.task.seq_len, batch_size: tcfg.batch_size };
    let ok = guarded_train(&mut params, &mut objective, &tcfg, &mut observer, files)?;
    let tail: Vec<f64> = observer.rows.iter().rev().take(10).map(|r| r.loss).collect();
    let valid_ppl = if ok { eval_perplexity(model, &params, valid)? } else { f64::NAN };
    Ok(LmOutcome {
        valid_ppl,
        train_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        secs: observer.secs(),
        rows: std::mem::take(&mut observer.rows),
        diverged: !ok,
    })
}

macro_rules! at_precision {
    ($p:expr, $f:ident ( $($a:expr),* $(,)? )) => {
        match $p {
            Precision::F32 => $f::<f32>($($a),*),
            Precision::F64 => $f::<f64>($($a),*),
        }
    };
}

fn load_corpus(cfg: &RunConfig) -> anyhow::Result<CharCorpus> {
    match &cfg.task.corpus {
        Some(p) => CharCorpus::load(p),
        None => Ok(CharCorpus::bundled()),
    }
}

fn note(study: &str, cell: &str, secs: f64, what: &str) {
    eprintln!("[{study}] {cell}: {what} ({secs:.1}s)");
}

fn fmt_med(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4}")
    } else {
        x.to_string()
    }
}

/// Runs LM cells for `labels x depths x seeds`, adding `valid_ppl` and
/// `train_loss` rows. `models` maps a label and depth to its model.
fn lm_grid(
    report: &mut StudyReport,
    cfg: &RunConfig,
    metrics_dir: Option<&Path>,
    labels: &[String],
    models: impl Fn(&str, usize, usize) -> ModelConfig,
) -> anyhow::Result<()> {
    let corpus = load_corpus(cfg)?;
    let valid = CharCorpus::eval_batches(corpus.valid(), cfg.study.eval_rows, cfg.task.seq_len)?;
    for &depth in &cfg.study.depths {
        for label in labels {
            let model = models(label, corpus.vocab_size(), depth);
            for &seed in &cfg.study.seeds {
                let files = CellFiles::new(metrics_dir, &report.study, label, depth, seed);
                let out =
                    at_precision!(cfg.train.precision, lm_cell(cfg, &corpus, &valid, &model, seed, files.as_ref()))?;
                let cell = format!("{label} depth {depth} seed {seed}");
                note(&report.study, &cell, out.secs, &format!("valid ppl {:.4}", out.valid_ppl));
                report.push(label, depth, "valid_ppl", Seed::Run(seed), out.valid_ppl);
                report.push(label, depth, "train_loss", Seed::Run(seed), out.train_loss);
                report.timings.push(Timing { cell, secs: out.secs });
            }
        }
    }
    Ok(())
}

/// Adds a check that median `metric` of `lo` is at most that of `hi`.
fn check_le(report: &mut StudyReport, metric: &str, depth: usize, lo: &str, hi: &str) {
    let a = median(&report.values(lo, depth, metric));
    let b = median(&report.values(hi, depth, metric));
    report.check(
        format!("{lo} <= {hi} ({metric}, depth {depth})"),
        a <= b,
        format!("median {} vs {}", fmt_med(a), fmt_med(b)),
    );
}

// ---------------------------------------------------------------------------
// studies

/// Order tolerances per preset.
pub fn order_band(scheme: &str) -> (f64, f64) {
    match scheme {
        "euler" => (0.9, 1.1),
        "rk2" => (1.9, 2.1),
        _ => (3.7, 4.3),
    }
}

pub fn order_study() -> anyhow::Result<StudyReport> {
    let mut report = StudyReport::new(Study::OrderStudy.name());
    let counts = [16, 32, 64, 128];
    let mut csv = String::from("scheme,problem,n_steps,error,estimated_order\n");
    for problem in [OdeProblem::exponential(-1.0), OdeProblem::cosine()] {
        for scheme in RkScheme::presets() {
            let est = empirical_order(&scheme, &problem, &counts)?;
            for r in &est.rows {
                let local = r.local_order.map_or(String::new(), |p| p.to_string());
                let _ = writeln!(csv, "{},{},{},{},{}", r.scheme, est.problem, r.n_steps, r.error, local);
                report.push(&r.scheme, r.n_steps, &format!("error {}", est.problem), Seed::Fixed, r.error);
            }
            report.push(scheme.name(), 0, &format!("order {}", est.problem), Seed::Fixed, est.order);
            let (lo, hi) = order_band(scheme.name());
            report.check(
                format!("{} order on {}", scheme.name(), est.problem),
                (lo..=hi).contains(&est.order),
                format!("p = {:.4}, band [{lo}, {hi}]", est.order),
            );
        }
    }
    report.extra.push(("orders.csv".into(), csv));
    Ok(report)
}

pub fn gradcheck_suite() -> anyhow::Result<StudyReport> {
    const TOL: f64 = 1e-6;
    let mut report = StudyReport::new(Study::GradcheckSuite.name());

    let prims = suite::primitive_checks()?;
    let worst = prims.iter().map(|p| p.1).fold(0.0, f64::max);
    for (name, err) in &prims {
        report.push(format!("primitive {name}"), 0, "max_rel_error", Seed::Fixed, *err);
    }
    report.check(
        "primitive gradients",
        worst < TOL,
        format!("{} primitives, worst {worst:.2e} < {TOL:e}", prims.len()),
    );

    let blocks = suite::block_checks(11)?;
    let mut worst = 0.0f64;
    for (v, input, params) in &blocks {
        report.push(v, 3, "input_rel_error", Seed::Fixed, *input);
        report.push(v, 3, "param_rel_error", Seed::Fixed, *params);
        worst = worst.max(*input).max(*params);
    }
    report.check("block gradients", worst < TOL, format!("{} variants, worst {worst:.2e} < {TOL:e}", blocks.len()));

    let variants = [BlockVariant::Rk2, BlockVariant::Rk2GammaOne];
    let spans: Vec<usize> = (1..=8).collect();
    let grid = suite::probe_grid(&variants, &[0.01, 0.1, 0.5], &spans)?;
    let mut worst = 0.0f64;
    for cell in &grid {
        report.push(cell.variant, cell.span, &format!("analytic c={}", cell.c), Seed::Fixed, cell.analytic);
        report.push(cell.variant, cell.span, &format!("autodiff c={}", cell.c), Seed::Fixed, cell.autodiff);
        worst = worst.max(cell.rel_error());
    }
    report.check(
        "depth gradient formula",
        worst < 1e-10,
        format!("{} cells, worst relative error {worst:.2e} < 1e-10", grid.len()),
    );
    let rk2_8 = analytic_depth_gradient(BlockVariant::Rk2, 0.1, 8, 0)?;
    let one_8 = analytic_depth_gradient(BlockVariant::Rk2GammaOne, 0.1, 8, 0)?;
    report.check(
        "depth gradient powers",
        (rk2_8 - 1.105f64.powi(8)).abs() < 1e-12 && (one_8 - 1.21f64.powi(8)).abs() < 1e-12,
        format!("RK2 {rk2_8:.6}, RK2GammaOne {one_8:.6} at c = 0.1, L - t = 8"),
    );
    let zero = variants.iter().map(|&v| probe_stack_gradient(v, 0.0, 5, 2)).collect::<Result<Vec<_>, _>>()?;
    report.check("zero field passes gradient", zero.iter().all(|&g| g == 1.0), format!("{zero:?}"));

    let gate = suite::gate_identity(100, 1000)?;
    report.push(BlockVariant::Rk2GatedSigmoidPair, 3, "zero_gate_max_abs_diff", Seed::Fixed, gate);
    report.check("zeroed gate equals RK2", gate <= 1e-12, format!("max |diff| {gate:e} over 100 inputs"));

    let parity = suite::parameter_parity(32, 64, 6);
    let mut ok = true;
    for (v, extra, declared) in &parity {
        report.push(v, 6, "extra_params", Seed::Fixed, *extra as f64);
        ok &= extra == declared;
    }
    let pick = |v| parity.iter().find(|p| p.0 == v).map_or(-1, |p| p.1);
    let want = [
        (BlockVariant::Rk2, 0),
        (BlockVariant::Rk4, 0),
        (BlockVariant::Rk2LearnableScalar, 6 * 2),
        (BlockVariant::Rk2GatedSigmoidPair, 6 * (2 * 64 + 1)),
    ];
    ok &= want.iter().all(|&(v, n)| pick(v) == n);
    report.check(
        "parameter parity",
        ok,
        format!(
            "extra over Euler at depth 6, width 64: RK2 {}, RK4 {}, learnable {}, gated pair {}",
            pick(BlockVariant::Rk2),
            pick(BlockVariant::Rk4),
            pick(BlockVariant::Rk2LearnableScalar),
            pick(BlockVariant::Rk2GatedSigmoidPair)
        ),
    );
    Ok(report)
}

fn steps_value(o: &CopyOutcome) -> f64 {
    o.steps_to_target.map_or(f64::INFINITY, |s| s as f64)
}

/// Loss of the logged row closest to `step` from below.
fn loss_near(rows: &[MetricsRow], step: usize) -> f64 {
    rows.iter().rfind(|r| r.step <= step).map_or(f64::NAN, |r| r.loss)
}

fn copy_grid(report: &mut StudyReport, cfg: &RunConfig, metrics_dir: Option<&Path>) -> anyhow::Result<()> {
    for &depth in &cfg.study.depths {
        for &v in &cfg.study.variants {
            let model = seq_model(cfg, v, depth);
            for &seed in &cfg.study.seeds {
                let label = v.to_string();
                let files = CellFiles::new(metrics_dir, &report.study, &label, depth, seed);
                let out = at_precision!(cfg.train.precision, copy_cell(cfg, &model, seed, files.as_ref()))?;
                let cell = format!("{label} depth {depth} seed {seed}");
                let what = match out.steps_to_target {
                    Some(s) => format!("target reached at step {s}"),
                    None => format!("final accuracy {:.4}", out.final_accuracy),
                };
                note(&report.study, &cell, out.secs, &what);
                let s = Seed::Run(seed);
                report.push(v, depth, "steps_to_target", s, steps_value(&out));
                report.push(v, depth, "initial_accuracy", s, out.initial_accuracy);
                report.push(v, depth, "final_accuracy", s, out.final_accuracy);
                report.push(v, depth, "eval_loss", s, out.eval_loss);
                report.push(v, depth, "train_loss_step1", s, loss_near(&out.rows, 1));
                report.push(v, depth, "train_loss_step50", s, loss_near(&out.rows, 50));
                report.push(v, depth, "train_loss_last", s, out.rows.last().map_or(f64::NAN, |r| r.loss));
                report.push(v, depth, "diverged", s, f64::from(u8::from(out.diverged)));
                report.timings.push(Timing { cell, secs: out.secs });
            }
        }
    }
    Ok(())
}

pub fn copy_task(cfg: &RunConfig, metrics_dir: Option<&Path>) -> anyhow::Result<StudyReport> {
    let mut report = StudyReport::new(Study::CopyTask.name());
    copy_grid(&mut report, cfg, metrics_dir)?;
    let budget = cfg.train.total_steps as f64;
    for &depth in &cfg.study.depths {
        for &v in &cfg.study.variants {
            let name = v.to_string();
            let steps = median(&report.values(&name, depth, "steps_to_target"));
            report.check(
                format!("{name} reaches {} token accuracy (depth {depth})", cfg.study.target_accuracy),
                steps <= budget,
                format!("median steps {}", fmt_med(steps)),
            );
            let early = median(&report.values(&name, depth, "train_loss_step50"));
            let late = median(&report.values(&name, depth, "train_loss_last"));
            report.check(
                format!("{name} loss decreases (depth {depth})"),
                late < early,
                format!("median loss {} at step 50, {} at the end", fmt_med(early), fmt_med(late)),
            );
        }
        let has = |v: BlockVariant| cfg.study.variants.contains(&v);
        if has(BlockVariant::Euler) && has(BlockVariant::Rk2) {
            check_le(&mut report, "steps_to_target", depth, "RK2", "Euler");
        }
    }
    Ok(report)
}

pub fn lm_truncation(cfg: &RunConfig, metrics_dir: Option<&Path>) -> anyhow::Result<StudyReport> {
    let mut report = StudyReport::new(Study::LmTruncation.name());
    let labels: Vec<String> = cfg.study.variants.iter().map(|v| v.to_string()).collect();
    lm_grid(&mut report, cfg, metrics_dir, &labels, |label, vocab, depth| {
        lm_model(cfg, vocab, label.parse().expect("label is a variant tag"), depth)
    })?;
    let has = |v: BlockVariant| cfg.study.variants.contains(&v);
    for &depth in &cfg.study.depths {
        if has(BlockVariant::Rk4) && has(BlockVariant::Rk2) {
            check_le(&mut report, "valid_ppl", depth, "RK4", "RK2");
        }
        if has(BlockVariant::Rk2) && has(BlockVariant::Euler) {
            check_le(&mut report, "valid_ppl", depth, "RK2", "Euler");
        }
    }
    if has(BlockVariant::Rk2LearnableScalar) && has(BlockVariant::Rk2) && cfg.study.depths.contains(&1) {
        check_le(&mut report, "valid_ppl", 1, "RK2LearnableScalar", "RK2");
    }
    let floor = report.rows.iter().filter(|r| r.metric == "valid_ppl").all(|r| r.value >= 1.0);
    report.check("perplexity at least 1", floor, "every cell");
    Ok(report)
}

pub fn schema_comparison(cfg: &RunConfig, metrics_dir: Option<&Path>) -> anyhow::Result<StudyReport> {
    let mut report = StudyReport::new(Study::SchemaComparison.name());
    let depth = cfg.study.depths[0];
    let mut one = cfg.clone();
    one.study.depths = vec![depth];
    let labels: Vec<String> = cfg.study.variants.iter().map(|v| v.to_string()).collect();
    lm_grid(&mut report, &one, metrics_dir, &labels, |label, vocab, depth| {
        lm_model(cfg, vocab, label.parse().expect("label is a variant tag"), depth)
    })?;
    let mut copy = one.clone();
    copy.task.kind = TaskKind::Copy;
    copy.model.max_len = copy.model.max_len.max(copy.task.seq_max + 2);
    copy_grid(&mut report, &copy, metrics_dir)?;

    let mut ranked: Vec<(String, f64, f64)> = labels
        .iter()
        .map(|l| {
            (
                l.clone(),
                median(&report.values(l, depth, "valid_ppl")),
                median(&report.values(l, depth, "steps_to_target")),
            )
        })
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut csv = String::from("rank,variant,depth,median_valid_ppl,median_copy_steps\n");
    for (i, (l, ppl, steps)) in ranked.iter().enumerate() {
        let _ = writeln!(csv, "{},{l},{depth},{ppl},{steps}", i + 1);
    }
    report.extra.push(("schema_ranked.csv".into(), csv));

    if cfg.study.variants.contains(&BlockVariant::Leapfrog) {
        let leap = median(&report.values("Leapfrog", depth, "valid_ppl"));
        let rk: Vec<BlockVariant> = cfg.study.variants.iter().copied().filter(|v| v.tag().starts_with("RK")).collect();
        for v in rk {
            check_le(&mut report, "valid_ppl", depth, v.tag(), "Leapfrog");
        }
        report.push("Leapfrog", depth, "reference_ppl", Seed::Median, leap);
    }

    let poly = probe_stack_gradient(BlockVariant::PolyNet, 0.1, 1, 0)?;
    report.push(BlockVariant::PolyNet, 1, "probe_factor c=0.1", Seed::Fixed, poly);
    report.check("PolyNet probe factor", (poly - 1.11).abs() < 1e-12, format!("{poly}"));

    let corpus = load_corpus(cfg)?;
    let m_euler = lm_model(cfg, corpus.vocab_size(), BlockVariant::Euler, 1);
    let m_dlcl = lm_model(cfg, corpus.vocab_size(), BlockVariant::Dlcl, 1);
    let params: ParamStore<f64> = init_params(&m_dlcl, 7)?;
    let batch = CharCorpus::eval_batches(corpus.valid(), 2, cfg.task.seq_len)?.remove(0);
    let a = lm_forward(&m_euler, &params, &batch)?;
    let b = lm_forward(&m_dlcl, &params, &batch)?;
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    report.push(BlockVariant::Dlcl, 1, "first_block_vs_euler_max_abs_diff", Seed::Fixed, diff);
    report.check("DLCL first block equals Euler", diff <= 1e-12, format!("max |diff| {diff:e}"));
    Ok(report)
}

pub fn scaling_comparison(cfg: &RunConfig, metrics_dir: Option<&Path>) -> anyhow::Result<StudyReport> {
    let mut report = StudyReport::new(Study::ScalingComparison.name());
    let labels: Vec<String> = cfg
        .study
        .variants
        .iter()
        .map(|&v| if v == BlockVariant::Euler { EULER_TWICE.to_string() } else { v.to_string() })
        .collect();
    lm_grid(&mut report, cfg, metrics_dir, &labels, |label, vocab, depth| {
        if label == EULER_TWICE {
            let mut m = lm_model(cfg, vocab, BlockVariant::Euler, depth);
            m.repeats = 2;
            m
        } else {
            lm_model(cfg, vocab, label.parse().expect("label is a variant tag"), depth)
        }
    })?;
    let has = |v: BlockVariant| cfg.study.variants.contains(&v);
    if has(BlockVariant::Rk2GatedSigmoidPair) && has(BlockVariant::Rk2) {
        for &depth in &cfg.study.depths {
            check_le(&mut report, "valid_ppl", depth, "RK2GatedSigmoidPair", "RK2");
        }
    }
    let gate = suite::gate_identity(10, 2000)?;
    report.push(BlockVariant::Rk2GatedSigmoidPair, 3, "zero_gate_max_abs_diff", Seed::Fixed, gate);
    report.check("zeroed gate equals RK2", gate == 0.0, format!("max |diff| {gate:e}"));
    Ok(report)
}

pub fn depth_sweep(cfg: &RunConfig, metrics_dir: Option<&Path>) -> anyhow::Result<StudyReport> {
    let mut report = StudyReport::new(Study::DepthSweep.name());
    copy_grid(&mut report, cfg, metrics_dir)?;
    let deepest = *cfg.study.depths.iter().max().expect("depths validated non-empty");
    for &v in &cfg.study.variants {
        let name = v.to_string();
        let finite = report
            .values(&name, deepest, "eval_loss")
            .iter()
            .chain(&report.values(&name, deepest, "train_loss_last"))
            .all(|x| x.is_finite())
            && report.values(&name, deepest, "diverged").iter().all(|&d| d == 0.0);
        report.check(format!("{name} finite at depth {deepest}"), finite, "every seed");
        let counts: Vec<usize> = cfg.study.depths.iter().map(|&d| seq_model(cfg, v, d).param_count()).collect();
        for (&d, &n) in cfg.study.depths.iter().zip(&counts) {
            report.push(v, d, "param_count", Seed::Fixed, n as f64);
        }
        let mut sorted: Vec<(usize, usize)> = cfg.study.depths.iter().copied().zip(counts).collect();
        sorted.sort();
        report.check(
            format!("{name} parameters grow with depth"),
            sorted.windows(2).all(|w| w[0].1 <= w[1].1),
            format!("{sorted:?}"),
        );
    }
    Ok(report)
}

/// Geometric mean of the bottom/top block gradient ratio over logged rows.
pub fn mean_ratio(rows: &[MetricsRow]) -> f64 {
    let logs: Vec<f64> = rows.iter().filter_map(|r| r.bottom_top_ratio()).map(f64::ln).collect();
    if logs.is_empty() {
        return f64::NAN;
    }
    (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

pub fn gradient_norm_study(cfg: &RunConfig, metrics_dir: Option<&Path>) -> anyhow::Result<StudyReport> {
    let mut report = StudyReport::new(Study::GradientNormStudy.name());
    let depth = cfg.study.depths[0];
    let corpus = load_corpus(cfg)?;
    let valid = CharCorpus::eval_batches(corpus.valid(), cfg.study.eval_rows, cfg.task.seq_len)?;
    let mut curves = String::from("variant,seed,step,block,grad_norm\n");
    let mut finite = true;
    for &v in &cfg.study.variants {
        let model = lm_model(cfg, corpus.vocab_size(), v, depth);
        for &seed in &cfg.study.seeds {
            let label = v.to_string();
            let files = CellFiles::new(metrics_dir, &report.study, &label, depth, seed);
            let out = at_precision!(cfg.train.precision, lm_cell(cfg, &corpus, &valid, &model, seed, files.as_ref()))?;
            for r in &out.rows {
                for (block, norm) in &r.block_grad_norms {
                    finite &= norm.is_finite();
                    let _ = writeln!(curves, "{label},{seed},{},{block},{norm}", r.step);
                }
            }
            let ratio = mean_ratio(&out.rows);
            let first = out.rows.first().and_then(MetricsRow::bottom_top_ratio).unwrap_or(f64::NAN);
            let cell = format!("{label} depth {depth} seed {seed}");
            note(&report.study, &cell, out.secs, &format!("mean bottom/top ratio {ratio:.4}"));
            report.push(v, depth, "mean_bottom_top_ratio", Seed::Run(seed), ratio);
            report.push(v, depth, "step1_bottom_top_ratio", Seed::Run(seed), first);
            report.push(v, depth, "valid_ppl", Seed::Run(seed), out.valid_ppl);
            report.timings.push(Timing { cell, secs: out.secs });
        }
    }
    report.extra.push(("gradient_norm_curves.csv".into(), curves));
    report.check("gradient norms finite", finite, "every logged block norm");
    let has = |v: BlockVariant| cfg.study.variants.contains(&v);
    if has(BlockVariant::Rk2GammaOne) && has(BlockVariant::Rk2) {
        check_le(&mut report, "mean_bottom_top_ratio", depth, "RK2", "RK2GammaOne");
    }

    let c = 0.1;
    for v in [BlockVariant::Rk2, BlockVariant::Rk2GammaOne] {
        let mut probe = LinearProbe { variant: v, c, depth, width: 4 };
        let mut params: ParamStore<f64> = probe.init_params()?;
        let tcfg = TrainConfig { total_steps: 1, precision: Precision::F64, ..TrainConfig::default() };
        let mut rows = Collect::default();
        train(&mut params, &mut probe, &tcfg, &mut rows)?;
        let got = rows.rows.first().and_then(MetricsRow::bottom_top_ratio).unwrap_or(f64::NAN);
        let want = analytic_depth_gradient(v, c, depth, 1)?;
        report.push(v, depth, "probe_ratio", Seed::Fixed, got);
        report.push(v, depth, "probe_ratio_analytic", Seed::Fixed, want);
        report.check(
            format!("{v} probe ratio matches formula"),
            ((got - want) / want).abs() < 1e-9,
            format!("{got:.6} vs {want:.6}"),
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn study_names_parse() {
        for s in Study::ALL {
            assert_eq!(s.name().parse::<Study>().unwrap(), s);
            assert_eq!(s.name().replace('_', "-").parse::<Study>().unwrap(), s);
            s.defaults().validate().unwrap();
        }
    }

    #[test]
    fn order_study_passes() {
        let r = order_study().unwrap();
        assert_eq!(r.checks.len(), 6);
        assert!(r.passed(), "{:?}", r.summary_lines());
    }

    #[test]
    fn geometric_mean_ratio() {
        let row = |a: f64, b: f64| MetricsRow {
            step: 1,
            lr: 0.0,
            loss: 0.0,
            grad_norm: 0.0,
            block_grad_norms: vec![("lm.block0".into(), a), ("lm.block1".into(), b)],
            coeffs: vec![],
            secs: 0.0,
        };
        let r = mean_ratio(&[row(2.0, 1.0), row(8.0, 1.0)]);
        assert!((r - 4.0).abs() < 1e-12);
    }
}
