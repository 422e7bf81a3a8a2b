//! Metrics CSV sink and the observer used by every study run.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use odeformer_core::tensor::ParamStore;
use odeformer_core::train::{Control, MetricsRow, TrainObserver};
use odeformer_core::Error;
use serde_json::{Map, Value};

pub const METRICS_HEADER: [&str; 7] = ["step", "lr", "loss", "grad_norm", "block_grad_norms", "coeffs", "secs"];

fn json_number(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

/// `{"enc.block0": 0.12, ...}` in block order.
pub fn block_norms_json(row: &MetricsRow) -> String {
    let map: Map<String, Value> = row.block_grad_norms.iter().map(|(k, v)| (k.clone(), json_number(*v))).collect();
    Value::Object(map).to_string()
}

/// `{"enc.block0.coef.gamma1": [1.0], ...}`.
pub fn coeffs_json(row: &MetricsRow) -> String {
    let map: Map<String, Value> = row
        .coeffs
        .iter()
        .map(|(k, v)| (k.clone(), Value::Array(v.iter().map(|x| json_number(*x)).collect())))
        .collect();
    Value::Object(map).to_string()
}

/// Metrics CSV flushed after every row so an aborted run keeps its
/// telemetry.
pub struct MetricsWriter {
    out: csv::Writer<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> anyhow::Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut out = csv::Writer::from_writer(BufWriter::new(file));
        out.write_record(METRICS_HEADER)?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> anyhow::Result<()> {
        self.out.write_record([
            row.step.to_string(),
            row.lr.to_string(),
            row.loss.to_string(),
            row.grad_norm.to_string(),
            block_norms_json(row),
            coeffs_json(row),
            format!("{:.3}", row.secs),
        ])?;
        self.out.flush()?;
        Ok(())
    }
}

type Probe<'a, T> = Box<dyn FnMut(usize, &ParamStore<T>) -> anyhow::Result<Control> + 'a>;

/// Keeps metrics rows, optionally streams them to CSV, and runs a periodic
/// evaluation hook that may stop training.
pub struct RunObserver<'a, T> {
    start: Instant,
    sink: Option<MetricsWriter>,
    pub rows: Vec<MetricsRow>,
    every: usize,
    probe: Option<Probe<'a, T>>,
    failure: Option<anyhow::Error>,
}

impl<'a, T> RunObserver<'a, T> {
    pub fn new(sink: Option<MetricsWriter>) -> Self {
        Self { start: Instant::now(), sink, rows: Vec::new(), every: 0, probe: None, failure: None }
    }

    /// Calls `probe(step, params)` every `every` steps.
    pub fn with_probe(
        mut self,
        every: usize,
        probe: impl FnMut(usize, &ParamStore<T>) -> anyhow::Result<Control> + 'a,
    ) -> Self {
        self.every = every;
        self.probe = Some(Box::new(probe));
        self
    }

    /// The error behind a failed hook, if any.
    pub fn take_failure(&mut self) -> Option<anyhow::Error> {
        self.failure.take()
    }

    pub fn secs(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn fail(&mut self, e: anyhow::Error) -> Error {
        let msg = format!("{e:#}");
        self.failure = Some(e);
        Error::InvalidArgument(msg)
    }
}

impl<T> TrainObserver<T> for RunObserver<'_, T> {
    fn on_metrics(&mut self, row: &MetricsRow) -> odeformer_core::Result<()> {
        if let Some(sink) = self.sink.as_mut() {
            if let Err(e) = sink.write(row) {
                return Err(self.fail(e));
            }
        }
        self.rows.push(row.clone());
        Ok(())
    }

    fn after_step(&mut self, step: usize, params: &ParamStore<T>) -> odeformer_core::Result<Control> {
        if self.every == 0 || !step.is_multiple_of(self.every) {
            return Ok(Control::Continue);
        }
        let Some(probe) = self.probe.as_mut() else {
            return Ok(Control::Continue);
        };
        match probe(step, params) {
            Ok(c) => Ok(c),
            Err(e) => Err(self.fail(e)),
        }
    }

    fn elapsed_secs(&self) -> f64 {
        self.secs()
    }
}
