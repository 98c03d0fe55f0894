use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attnref::{attention_backward, attention_forward};
use crate::cpmech::{run_exact, CpConfig, Mechanism, ProcessGrid, CP_PATTERNS};
use crate::fabric::Topology;
use crate::masks::MaskSpec;
use crate::numcore::{HeadLayout, Tensor3};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyCase {
    pub name: String,
    pub forward_err: f64,
    pub backward_err: f64,
    pub forward_tol: f64,
    pub backward_tol: f64,
    pub error: Option<String>,
}

impl VerifyCase {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.forward_err <= self.forward_tol && self.backward_err <= self.backward_tol
    }
}

fn grid_for(m: Mechanism, n: usize) -> CpConfig {
    let c = CpConfig::new(m, n);
    match m {
        Mechanism::Usp if n >= 2 => c.with_grid(ProcessGrid::new(2, n / 2)),
        Mechanism::LoongTrain if n >= 4 => c.with_grid(ProcessGrid::double_ring(1, 2, n / 2)),
        _ => c,
    }
}

/// Every mechanism on every supported pattern against the single-device
/// reference, at f64.
pub fn verify_suite(seq_len: usize, worlds: &[usize]) -> Vec<VerifyCase> {
    let mut out = Vec::new();
    let layouts = [
        ("mha", HeadLayout::mha(8, 4)),
        ("gqa", HeadLayout::new(8, 2, 4).expect("valid layout")),
    ];
    for (pi, pattern) in CP_PATTERNS.into_iter().enumerate() {
        let mut b = MaskSpec::builder(pattern, seq_len);
        if pattern.needs_documents() {
            let a = seq_len / 3;
            b = b.doc_lens(&[a, seq_len - a - 3, 3]);
        }
        let spec = b.build().expect("valid mask");
        for (lname, layout) in layouts {
            let mut rng = ChaCha8Rng::seed_from_u64(pi as u64);
            let mut t = |h: usize| Tensor3::from_fn(h, seq_len, layout.head_dim, |_, _, _| rng.random_range(-1.0..1.0)).expect("finite");
            let (q, k, v, d_out) = (t(layout.q_heads), t(layout.kv_heads), t(layout.kv_heads), t(layout.q_heads));
            let fwd = attention_forward(&q, &k, &v, &layout, &spec).expect("reference forward");
            let g = attention_backward(&q, &k, &v, &fwd, &d_out, &layout, &spec).expect("reference backward");
            for &n in worlds {
                for m in Mechanism::ALL {
                    let exact = matches!(m, Mechanism::Ulysses | Mechanism::RingAllGather);
                    let mut case = VerifyCase {
                        name: format!("{m} {} {lname} N={n} S={seq_len}", pattern.snake_name()),
                        forward_err: 0.0,
                        backward_err: 0.0,
                        forward_tol: if exact { 1e-12 } else { 1e-10 },
                        backward_tol: 1e-9,
                        error: None,
                    };
                    let cfg = grid_for(m, n);
                    match run_exact(&cfg, &Topology::with_world(n), &q, &k, &v, Some(&d_out), layout, &spec) {
                        Ok(run) => {
                            let (dq, dk, dv) = run.grads.expect("gradients requested");
                            case.forward_err = run.out.max_abs_diff(&fwd.out).unwrap_or(f64::INFINITY);
                            case.backward_err = [dq.max_abs_diff(&g.dq), dk.max_abs_diff(&g.dk), dv.max_abs_diff(&g.dv)]
                                .into_iter()
                                .map(|e| e.unwrap_or(f64::INFINITY))
                                .fold(0.0, f64::max);
                        }
                        Err(e) => case.error = Some(e.to_string()),
                    }
                    out.push(case);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let cases = verify_suite(16, &[2]);
        assert_eq!(cases.len(), 4 * 2 * 5);
        for c in &cases {
            assert!(c.passed(), "{c:?}");
        }
    }
}
