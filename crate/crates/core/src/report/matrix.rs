use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, RunMode};
use super::{tflops_over, KernelClass, MemoryModel, ReportError};
use crate::attnref::{attention_backward, attention_forward};
use crate::cpmech::{run_backward, run_exact, run_forward, CpSetup, Phantom};
use crate::fabric::{CommLog, StageTimeline};
use crate::masks::{attention_flops, Direction, MaskSpec};
use crate::numcore::{Precision, Real, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub metric: String,
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_id: String,
    pub config: RunConfig,
    /// Median over repeats, in a fixed order.
    pub metrics: Vec<MetricValue>,
    #[serde(default)]
    pub error: Option<String>,
    /// Logs of the first repeat.
    #[serde(default)]
    pub forward_log: Option<CommLog>,
    #[serde(default)]
    pub backward_log: Option<CommLog>,
}

impl RunResult {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == name).map(|m| m.value)
    }
}

/// Middle value; mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

struct Sample {
    metrics: Vec<(&'static str, f64, &'static str)>,
    forward_log: CommLog,
    backward_log: Option<CommLog>,
}

/// Communication time not hidden behind compute, on the worst rank.
fn exposed(t: &StageTimeline, world: usize) -> f64 {
    (0..world)
        .map(|r| t.rank_records(r).map(|x| x.time - x.compute_time).sum::<f64>())
        .fold(0.0, f64::max)
}

fn timing_metrics(
    out: &mut Vec<(&'static str, f64, &'static str)>,
    dir: Direction,
    flops: u64,
    log: &CommLog,
    t: &StageTimeline,
    world: usize,
) -> Result<(), ReportError> {
    let fwd = dir == Direction::Forward;
    out.push((if fwd { "forward_flops" } else { "backward_flops" }, flops as f64, "flop"));
    out.push((if fwd { "forward_time" } else { "backward_time" }, t.total, "s"));
    out.push((
        if fwd { "forward_tflops" } else { "backward_tflops" },
        tflops_over(flops, t.total, world)?,
        "TFLOPs/s",
    ));
    out.push((
        if fwd { "forward_comm_bytes" } else { "backward_comm_bytes" },
        log.total_bytes() as f64,
        "bytes",
    ));
    out.push((
        if fwd { "forward_exposed_comm" } else { "backward_exposed_comm" },
        exposed(t, world),
        "s",
    ));
    Ok(())
}

fn cost_repeat(cfg: &RunConfig, spec: &MaskSpec) -> Result<Sample, ReportError> {
    let cp = cfg.cp_config();
    let multiple = cp.seq_multiple()?;
    let extra = spec.seq_len().div_ceil(multiple) * multiple - spec.seq_len();
    let setup = CpSetup::new(&cp, cfg.layout, &spec.with_padding(extra))?;
    let topo = cfg.topology();
    let l = cfg.layout;
    let shards = |heads: usize| -> Vec<Phantom> {
        (0..cfg.world_size)
            .map(|r| Phantom::new(heads, setup.rank_plan.rows(r), l.head_dim, cfg.precision.bytes()))
            .collect()
    };
    let q = shards(l.q_heads);
    let kv = shards(l.kv_heads);
    let fwd = run_forward(&setup, &topo, &q, &kv, &kv)?;
    let mut metrics = Vec::new();
    timing_metrics(
        &mut metrics,
        Direction::Forward,
        attention_flops(spec, &l, Direction::Forward),
        &fwd.log,
        &fwd.timeline,
        cfg.world_size,
    )?;
    let mut backward_log = None;
    if cfg.backward {
        let bwd = run_backward(&fwd, &topo, &q)?;
        timing_metrics(
            &mut metrics,
            Direction::Backward,
            attention_flops(spec, &l, Direction::Backward),
            &bwd.log,
            &bwd.timeline,
            cfg.world_size,
        )?;
        backward_log = Some(bwd.log);
    }
    Ok(Sample {
        metrics,
        forward_log: fwd.log,
        backward_log,
    })
}

fn rand_tensor<T: Real>(rng: &mut ChaCha8Rng, h: usize, s: usize, d: usize) -> Tensor3<T> {
    Tensor3::from_fn(h, s, d, |_, _, _| T::of_f64(rng.random_range(-1.0..1.0))).expect("finite inputs")
}

fn exact_repeat<T: Real>(cfg: &RunConfig, spec: &MaskSpec, seed: u64) -> Result<Sample, ReportError> {
    let l = cfg.layout;
    let s = cfg.seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q: Tensor3<T> = rand_tensor(&mut rng, l.q_heads, s, l.head_dim);
    let k = rand_tensor(&mut rng, l.kv_heads, s, l.head_dim);
    let v = rand_tensor(&mut rng, l.kv_heads, s, l.head_dim);
    let d_out = rand_tensor(&mut rng, l.q_heads, s, l.head_dim);
    let run = run_exact(
        &cfg.cp_config(),
        &cfg.topology(),
        &q,
        &k,
        &v,
        cfg.backward.then_some(&d_out),
        l,
        spec,
    )?;
    let oracle = attention_forward(&q, &k, &v, &l, spec)?;
    let mut metrics = Vec::new();
    timing_metrics(
        &mut metrics,
        Direction::Forward,
        attention_flops(spec, &l, Direction::Forward),
        &run.forward_log,
        &run.forward_timeline,
        cfg.world_size,
    )?;
    let fwd_err = run.out.max_abs_diff(&oracle.out)?;
    metrics.push(("forward_max_abs_err", fwd_err, "abs"));
    if let (Some((dq, dk, dv)), Some(log), Some(t)) = (&run.grads, &run.backward_log, &run.backward_timeline) {
        timing_metrics(
            &mut metrics,
            Direction::Backward,
            attention_flops(spec, &l, Direction::Backward),
            log,
            t,
            cfg.world_size,
        )?;
        let g = attention_backward(&q, &k, &v, &oracle, &d_out, &l, spec)?;
        let err = dq.max_abs_diff(&g.dq)?.max(dk.max_abs_diff(&g.dk)?).max(dv.max_abs_diff(&g.dv)?);
        metrics.push(("backward_max_abs_err", err, "abs"));
    }
    Ok(Sample {
        metrics,
        forward_log: run.forward_log,
        backward_log: run.backward_log,
    })
}

fn one_repeat(cfg: &RunConfig, rep: usize) -> Result<Sample, ReportError> {
    let seed = cfg.repeat_seed(rep);
    let spec = cfg.mask_spec(seed)?;
    let mut sample = match (cfg.mode, cfg.precision) {
        (RunMode::Cost, _) => cost_repeat(cfg, &spec)?,
        (RunMode::Exact, Precision::F64) => exact_repeat::<f64>(cfg, &spec, seed)?,
        (RunMode::Exact, Precision::F32) => exact_repeat::<f32>(cfg, &spec, seed)?,
    };
    let l = cfg.layout;
    sample.metrics.push(("unmasked_pairs", spec.count_unmasked() as f64, "pairs"));
    for (name, kernel) in [
        ("naive_activation_bytes", KernelClass::NaiveFullMask),
        ("fused_activation_bytes", KernelClass::FusedLinear),
    ] {
        let mut m = MemoryModel::new(kernel, 1, cfg.seq_len as u64, l.q_heads as u64, l.head_dim as u64);
        m.elem_bytes = cfg.precision.bytes() as u64;
        sample.metrics.push((name, m.peak_bytes() as f64, "bytes"));
    }
    Ok(sample)
}

/// Runs every repeat of one config and reduces metrics to medians.
pub fn run_config(cfg: &RunConfig, index: usize) -> RunResult {
    let mut result = RunResult {
        config_id: cfg.config_id(index),
        config: cfg.clone(),
        metrics: Vec::new(),
        error: None,
        forward_log: None,
        backward_log: None,
    };
    if let Err(e) = cfg.validate() {
        result.error = Some(e.to_string());
        return result;
    }
    let mut samples = Vec::with_capacity(cfg.repeats);
    for rep in 0..cfg.repeats {
        match one_repeat(cfg, rep) {
            Ok(s) => samples.push(s),
            Err(e) => {
                result.error = Some(format!("repeat {rep}: {e}"));
                return result;
            }
        }
    }
    let first = &samples[0];
    result.metrics = first
        .metrics
        .iter()
        .enumerate()
        .map(|(i, (name, _, unit))| MetricValue {
            metric: name.to_string(),
            value: median(&samples.iter().map(|s| s.metrics[i].1).collect::<Vec<_>>()),
            unit: unit.to_string(),
        })
        .collect();
    let first = samples.swap_remove(0);
    result.forward_log = Some(first.forward_log);
    result.backward_log = first.backward_log;
    result
}

/// Runs configs in order; failures are recorded and the matrix continues.
pub fn run_matrix(configs: &[RunConfig]) -> Vec<RunResult> {
    configs.iter().enumerate().map(|(i, c)| run_config(c, i)).collect()
}
