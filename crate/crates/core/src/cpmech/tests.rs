use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attnref::{attention_backward, attention_forward};
use crate::fabric::CommKind;
use crate::masks::MaskPattern;

fn rand_t(rng: &mut ChaCha8Rng, h: usize, r: usize, c: usize) -> Tensor3<f64> {
    Tensor3::from_fn(h, r, c, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
}

struct Case {
    layout: HeadLayout,
    spec: MaskSpec,
    q: Tensor3<f64>,
    k: Tensor3<f64>,
    v: Tensor3<f64>,
    d_out: Tensor3<f64>,
}

fn case(pattern: MaskPattern, s: usize, layout: HeadLayout, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = MaskSpec::builder(pattern, s);
    let spec = if pattern.needs_documents() {
        let a = s / 3;
        b.doc_lens(&[a, s - a - 2, 2]).build().unwrap()
    } else {
        b.build().unwrap()
    };
    let (h, hk, d) = (layout.q_heads, layout.kv_heads, layout.head_dim);
    Case {
        layout,
        spec,
        q: rand_t(&mut rng, h, s, d),
        k: rand_t(&mut rng, hk, s, d),
        v: rand_t(&mut rng, hk, s, d),
        d_out: rand_t(&mut rng, h, s, d),
    }
}

fn check(config: &CpConfig, c: &Case, tol: f64) {
    let topo = Topology::with_world(config.world_size);
    let run = run_exact(config, &topo, &c.q, &c.k, &c.v, Some(&c.d_out), c.layout, &c.spec).unwrap();
    let fwd = attention_forward(&c.q, &c.k, &c.v, &c.layout, &c.spec).unwrap();
    let g = attention_backward(&c.q, &c.k, &c.v, &fwd, &c.d_out, &c.layout, &c.spec).unwrap();
    let label = format!("{} N={} {}", config.mechanism, config.world_size, c.spec.pattern());
    assert!(run.out.max_abs_diff(&fwd.out).unwrap() <= tol, "{label} out");
    let lse_err = run
        .lse
        .iter()
        .zip(&fwd.lse)
        .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() })
        .fold(0.0, f64::max);
    assert!(lse_err <= tol, "{label} lse {lse_err}");
    let (dq, dk, dv) = run.grads.unwrap();
    assert!(dq.max_abs_diff(&g.dq).unwrap() <= tol, "{label} dq");
    assert!(dk.max_abs_diff(&g.dk).unwrap() <= tol, "{label} dk");
    assert!(dv.max_abs_diff(&g.dv).unwrap() <= tol, "{label} dv");
}

fn configs(n: usize) -> Vec<CpConfig> {
    let mut out: Vec<CpConfig> = [Mechanism::Ulysses, Mechanism::RingP2p, Mechanism::RingAllGather]
        .into_iter()
        .map(|m| CpConfig::new(m, n))
        .collect();
    let u = if n >= 2 { 2 } else { 1 };
    out.push(CpConfig::new(Mechanism::Usp, n).with_grid(ProcessGrid::new(u, n / u)));
    let inner = if n >= 4 { 2 } else { 1 };
    out.push(CpConfig::new(Mechanism::LoongTrain, n).with_grid(ProcessGrid::double_ring(1, inner, n / inner)));
    out
}

#[test]
fn every_mechanism_matches_reference() {
    let layout = HeadLayout::new(4, 2, 4).unwrap();
    for (i, p) in CP_PATTERNS.into_iter().enumerate() {
        let c = case(p, 16, layout, i as u64);
        for n in [1, 2, 4] {
            for cfg in configs(n) {
                check(&cfg, &c, 1e-10);
            }
        }
    }
}

#[test]
fn two_level_grids_match_reference() {
    let layout = HeadLayout::new(4, 2, 4).unwrap();
    let c = case(MaskPattern::CausalDocument, 32, layout, 9);
    check(&CpConfig::new(Mechanism::Usp, 8).with_grid(ProcessGrid::new(2, 4)), &c, 1e-10);
    check(
        &CpConfig::new(Mechanism::LoongTrain, 8).with_grid(ProcessGrid::double_ring(2, 2, 2)),
        &c,
        1e-10,
    );
    check(
        &CpConfig::new(Mechanism::LoongTrain, 6).with_grid(ProcessGrid::double_ring(1, 3, 2)),
        &c,
        1e-10,
    );
}

#[test]
fn single_rank_ring_is_bitwise() {
    let layout = HeadLayout::mha(2, 4);
    let c = case(MaskPattern::Causal, 12, layout, 3);
    let topo = Topology::with_world(1);
    let run = run_exact(
        &CpConfig::new(Mechanism::RingP2p, 1),
        &topo,
        &c.q,
        &c.k,
        &c.v,
        None,
        layout,
        &c.spec,
    )
    .unwrap();
    let fwd = attention_forward(&c.q, &c.k, &c.v, &layout, &c.spec).unwrap();
    assert_eq!(run.out, fwd.out);
    assert!(run.forward_log.is_empty());
}

#[test]
fn odd_lengths_are_padded() {
    let layout = HeadLayout::mha(2, 4);
    let c = case(MaskPattern::Causal, 10, layout, 4);
    check(&CpConfig::new(Mechanism::RingP2p, 2), &c, 1e-10);
    let topo = Topology::with_world(2);
    let run = run_exact(
        &CpConfig::new(Mechanism::RingP2p, 2),
        &topo,
        &c.q,
        &c.k,
        &c.v,
        None,
        layout,
        &c.spec,
    )
    .unwrap();
    assert_eq!(run.padded, 2);
}

#[test]
fn rejects_unsupported_inputs() {
    let spec = MaskSpec::builder(MaskPattern::CausalSlidingWindow, 16).window(4).build().unwrap();
    let err = CpSetup::new(&CpConfig::new(Mechanism::RingP2p, 2), HeadLayout::mha(2, 4), &spec).unwrap_err();
    assert!(matches!(err, CpError::Capability(_)), "{err}");
    let causal = MaskSpec::causal(16);
    let err = CpSetup::new(&CpConfig::new(Mechanism::Ulysses, 4), HeadLayout::new(6, 2, 4).unwrap(), &causal).unwrap_err();
    assert!(matches!(err, CpError::Capability(_)), "{err}");
    let err = CpSetup::new(&CpConfig::new(Mechanism::RingP2p, 4), HeadLayout::mha(2, 4), &MaskSpec::causal(12)).unwrap_err();
    assert!(err.to_string().contains("pad"), "{err}");
    let bad_grid = CpConfig::new(Mechanism::Ulysses, 4).with_grid(ProcessGrid::new(2, 2));
    assert!(bad_grid.resolved_grid().is_err());
}

#[test]
fn ring_sends_each_block_n_minus_one_times() {
    let layout = HeadLayout::mha(2, 4);
    let n = 4;
    let c = case(MaskPattern::Causal, 16, layout, 5);
    let topo = Topology::with_world(n);
    let run = run_exact(
        &CpConfig::new(Mechanism::RingP2p, n),
        &topo,
        &c.q,
        &c.k,
        &c.v,
        None,
        layout,
        &c.spec,
    )
    .unwrap();
    let log = &run.forward_log;
    assert_eq!(log.len(), n * (n - 1));
    // one K and one V shard of 2 heads x 4 rows x 4 dims in f64
    let block = 2 * 2 * 4 * 4 * 8;
    assert!(log
        .events
        .iter()
        .all(|e| e.kind == CommKind::P2p && e.bytes == block && e.dst == (e.src + 1) % n));
}

#[test]
fn ulysses_traffic_is_all_to_all() {
    let layout = HeadLayout::mha(4, 2);
    let n = 4;
    let c = case(MaskPattern::Full, 8, layout, 6);
    let topo = Topology::with_world(n);
    let run = run_exact(
        &CpConfig::new(Mechanism::Ulysses, n),
        &topo,
        &c.q,
        &c.k,
        &c.v,
        None,
        layout,
        &c.spec,
    )
    .unwrap();
    let log = &run.forward_log;
    assert!(log.events.iter().all(|e| e.kind == CommKind::AllToAll && e.src != e.dst));
    // q, k, v and the output (plus its lse): 4 collectives of n(n-1) pairs
    assert_eq!(log.len(), 4 * n * (n - 1));
    let chunk = 2 * 2 * 8;
    assert_eq!(
        log.filter(|e| e.label == "a2a_q").map(|e| e.bytes).sum::<u64>(),
        (n * (n - 1) * chunk) as u64
    );
}

#[test]
fn single_window_double_ring_logs_like_ring() {
    let layout = HeadLayout::mha(2, 4);
    let n = 4;
    let c = case(MaskPattern::Causal, 16, layout, 7);
    let topo = Topology::with_world(n);
    let ring = run_exact(
        &CpConfig::new(Mechanism::RingP2p, n),
        &topo,
        &c.q,
        &c.k,
        &c.v,
        None,
        layout,
        &c.spec,
    )
    .unwrap();
    let loong = CpConfig::new(Mechanism::LoongTrain, n).with_grid(ProcessGrid::double_ring(1, n, 1));
    let dbl = run_exact(&loong, &topo, &c.q, &c.k, &c.v, None, layout, &c.spec).unwrap();
    assert_eq!(ring.forward_log, dbl.forward_log);
    assert_eq!(ring.out, dbl.out);
}

#[test]
fn phantom_runs_log_like_real_runs() {
    let layout = HeadLayout::new(4, 2, 4).unwrap();
    let c = case(MaskPattern::CausalDocument, 32, layout, 8);
    for cfg in configs(4) {
        let topo = Topology::with_world(4);
        let setup = CpSetup::new(&cfg, layout, &c.spec).unwrap();
        let plan = &setup.rank_plan;
        let real = run_forward(&setup, &topo, &shard(&c.q, plan), &shard(&c.k, plan), &shard(&c.v, plan)).unwrap();
        let ph = |h: usize| -> Vec<Phantom> { (0..4).map(|r| Phantom::new(h, plan.rows(r), 4, 8)).collect() };
        let fake = run_forward(&setup, &topo, &ph(4), &ph(2), &ph(2)).unwrap();
        assert_eq!(real.log, fake.log, "{}", cfg.mechanism);
        assert_eq!(real.timeline, fake.timeline, "{}", cfg.mechanism);
        let fb = run_backward(&fake, &topo, &ph(4)).unwrap();
        assert!(fb.grads.iter().all(|g| g.1.dims() == (2, 8, 4)));
    }
}

#[test]
fn gather_respects_memory_cap() {
    let layout = HeadLayout::mha(2, 4);
    let c = case(MaskPattern::Causal, 16, layout, 10);
    let mut cfg = CpConfig::new(Mechanism::RingAllGather, 2);
    cfg.gather_cap_bytes = Some(100);
    let topo = Topology::with_world(2);
    let err = run_exact(&cfg, &topo, &c.q, &c.k, &c.v, None, layout, &c.spec).unwrap_err();
    assert!(matches!(err, CpError::MemoryCap { cap: 100, .. }), "{err}");
}

#[test]
fn mechanism_names_round_trip() {
    for m in Mechanism::ALL {
        assert_eq!(m.name().parse::<Mechanism>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
    }
    assert!("ringo".parse::<Mechanism>().is_err());
}
