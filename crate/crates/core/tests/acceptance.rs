//! End-to-end acceptance checks, one test per release criterion. Each test
//! finishes by printing a single "criterion N: PASS" line with the measured
//! numbers behind the verdict (visible under --nocapture; the test name
//! itself carries the criterion number either way).

use ringtrain::comm::wire::Dtype;
use ringtrain::comm::{barrier, bootstrap_loopback, bootstrap_tcp, ring_allreduce, TcpBootstrap};
use ringtrain::comm::RingEndpoint;
use ringtrain::harness::mlperf::{epoch_value, line_grammar, EventLog};
use ringtrain::harness::{bucket_plan_for, parse_log, run_training, RunSummary};
use ringtrain::model::{
    epoch_plan, gradient_check, init_params, iterations_per_epoch, ModelSpec, ParamSegment,
    SegmentKind,
};
use ringtrain::optim::batched_norms;
use ringtrain::rng::{DetRng, StreamKind};
use ringtrain::sched::{validate_trace, TraceKind};
use ringtrain::sim::{calibration_config, scalability_curve, simulate_iteration};
use ringtrain::RunConfig;
use std::collections::BTreeMap;
use std::net::TcpListener;
use std::thread;
use std::time::{Duration, Instant};

fn best_eval(s: &RunSummary) -> f64 {
    s.evals
        .iter()
        .map(|e| e.accuracy)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// The 10-class, 32-feature blob task: 20,000 training samples plus a
/// 2,000 sample holdout, no batchnorm so a divergence surfaces as a
/// rejected step instead of a panic inside the statistics update.
fn blob_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.layer_dims = vec![32, 64, 10];
    cfg.batchnorm = false;
    cfg.dataset_n = 20_000;
    cfg.eval_n = 2_000;
    cfg.world_size = 1;
    cfg.eval_period = 1;
    cfg.eval_offset = 0;
    cfg.seed = 100_000;
    cfg
}

#[test]
fn criterion_01_warmup_and_lars_stabilize_the_large_batch() {
    let mut baseline = blob_config();
    baseline.batch_per_rank = 256;
    baseline.epochs = 15;
    baseline.base_lr = 0.2;
    baseline.warmup_epochs = 1;
    baseline.lars_enabled = false;
    let base = run_training(&baseline).unwrap();
    let base_best = best_eval(&base);
    assert!(!base.diverged, "baseline must train cleanly");
    assert!(base_best >= 0.90, "baseline failed to learn: {base_best}");

    let mut large = blob_config();
    large.batch_per_rank = 4096;
    large.epochs = 40;
    large.base_lr = 16.0;
    large.warmup_epochs = 8;
    large.lars_enabled = true;
    let t0 = Instant::now();
    let big = run_training(&large).unwrap();
    let large_secs = t0.elapsed().as_secs_f64();
    let large_best = best_eval(&big);
    assert!(!big.diverged, "warmup plus LARS must keep batch 4096 stable");
    assert!(large_secs <= 60.0, "large-batch run took {large_secs:.1}s");
    assert!(
        large_best >= base_best - 0.02,
        "batch 4096 best {large_best:.4} vs baseline best {base_best:.4}"
    );

    let mut stress = large.clone();
    stress.warmup_epochs = 0;
    stress.lars_enabled = false;
    let hot = run_training(&stress).unwrap();
    let stress_best = best_eval(&hot);
    assert!(
        hot.diverged || stress_best <= base_best - 0.05,
        "same lr without warmup or LARS should diverge or trail by 5 points, \
         got best {stress_best:.4} vs baseline {base_best:.4}"
    );

    println!(
        "criterion 1: PASS (baseline best {:.2}%, batch-4096 warmup+LARS best {:.2}% in {:.1}s, \
         same lr without them {})",
        100.0 * base_best,
        100.0 * large_best,
        large_secs,
        if hot.diverged {
            "diverged".to_string()
        } else {
            format!("reached only {:.2}%", 100.0 * stress_best)
        }
    );
}

/// Fixed global batch of 64, split evenly across the world. Power-of-two
/// shards of a power-of-two batch are what the canonical reduction tree
/// needs for bit equality.
fn equivalence_config(world: usize, fp16: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.layer_dims = vec![16, 32, 10];
    cfg.batchnorm = false;
    cfg.dataset_n = 1_920;
    cfg.eval_n = 256;
    cfg.world_size = world;
    cfg.batch_per_rank = 64 / world;
    cfg.epochs = 2;
    cfg.eval_period = 4;
    cfg.eval_offset = 1;
    cfg.base_lr = 0.1;
    cfg.warmup_epochs = 1;
    cfg.fp16_comm = fp16;
    cfg
}

#[test]
fn criterion_02_world_size_leaves_the_bits_alone() {
    let t0 = Instant::now();
    let reference = run_training(&equivalence_config(1, false)).unwrap();
    let exact = &reference.per_rank[0].params.values;

    for world in [2usize, 4, 8] {
        let run = run_training(&equivalence_config(world, false)).unwrap();
        for r in &run.per_rank {
            assert_eq!(
                &r.params.values, exact,
                "f32 world {world} rank {} drifted from the single-process bits",
                r.rank
            );
        }
        assert_eq!(run.evals, reference.evals, "world {world} evals differ");
    }

    let norm: f64 = exact.iter().map(|&v| (v as f64) * (v as f64)).sum();
    let mut worst = 0.0f64;
    for world in [1usize, 2, 4, 8] {
        let run = run_training(&equivalence_config(world, true)).unwrap();
        for pair in run.per_rank.windows(2) {
            assert_eq!(
                pair[0].params.values, pair[1].params.values,
                "fp16 world {world}: ranks disagree"
            );
        }
        let got = &run.per_rank[0].params.values;
        let diff: f64 = got
            .iter()
            .zip(exact)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        let rel = (diff / norm).sqrt();
        assert!(rel <= 1e-2, "fp16 world {world} relative error {rel:.3e}");
        worst = worst.max(rel);
    }

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 120.0, "equivalence suite took {secs:.1}s");
    println!(
        "criterion 2: PASS (f32 bitwise across worlds 1/2/4/8, fp16 worst relative error {:.2e}, {:.1}s)",
        worst, secs
    );
}

const REDUCE_CASES: usize = 100;

fn case_shape(world: usize, case: usize) -> (usize, bool) {
    let mut rng = DetRng::new(
        0xA11_0000 ^ ((world as u64) << 32) ^ case as u64,
        StreamKind::Data,
    );
    let len = 1 + rng.below(400) as usize;
    (len, case % 2 == 0)
}

fn case_contribution(world: usize, case: usize, rank: usize, len: usize, integer: bool) -> Vec<f32> {
    let mut rng = DetRng::new(
        ((world * 64 + rank) as u64) << 32 | case as u64,
        StreamKind::Data,
    );
    (0..len)
        .map(|_| {
            if integer {
                rng.below(2001) as f32 - 1000.0
            } else {
                let scale = (rng.below(9) as i32 - 4) as f32;
                rng.trunc_normal() as f32 * scale.exp2()
            }
        })
        .collect()
}

/// Every rank reduces all cases in sequence; returns per-rank results.
fn reduce_all_cases(endpoints: Vec<RingEndpoint>) -> Vec<Vec<Vec<f32>>> {
    let world = endpoints.len();
    let handles: Vec<_> = endpoints
        .into_iter()
        .enumerate()
        .map(|(rank, mut ep)| {
            thread::spawn(move || -> Vec<Vec<f32>> {
                (0..REDUCE_CASES)
                    .map(|case| {
                        let (len, integer) = case_shape(world, case);
                        let mut buf = case_contribution(world, case, rank, len, integer);
                        ring_allreduce(&mut buf, &mut ep, case as u64, 0, Dtype::F32).unwrap();
                        buf
                    })
                    .collect()
            })
        })
        .collect();
    handles.into_iter().map(|h| h.join().unwrap()).collect()
}

fn check_against_sequential_oracle(world: usize, results: &[Vec<Vec<f32>>], transport: &str) {
    for case in 0..REDUCE_CASES {
        let (len, integer) = case_shape(world, case);
        let contribs: Vec<Vec<f32>> =
            (0..world).map(|r| case_contribution(world, case, r, len, integer)).collect();
        for r in 1..world {
            assert_eq!(
                results[0][case], results[r][case],
                "{transport} world {world} case {case}: ranks disagree"
            );
        }
        let got = &results[0][case];
        for e in 0..len {
            let seq: f64 = contribs.iter().map(|c| c[e] as f64).sum();
            if integer {
                assert_eq!(
                    got[e] as f64, seq,
                    "{transport} world {world} case {case} element {e}: integer sum not exact"
                );
            } else {
                let mag: f64 = contribs.iter().map(|c| (c[e] as f64).abs()).sum();
                let rel = (got[e] as f64 - seq).abs() / mag.max(1.0);
                assert!(
                    rel <= 1e-6,
                    "{transport} world {world} case {case} element {e}: relative error {rel:.3e}"
                );
            }
        }
    }
}

/// Forms a TCP ring on an ephemeral port; rank 0 owns the prebound
/// rendezvous listener.
fn tcp_ring(world: usize) -> Vec<RingEndpoint> {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let mut prebound = Some(listener);
    let handles: Vec<_> = (0..world)
        .map(|rank| {
            let cfg = TcpBootstrap {
                world,
                rank,
                rendezvous: addr.clone(),
                timeout: Duration::from_secs(30),
            };
            let pre = if rank == 0 { prebound.take() } else { None };
            thread::spawn(move || bootstrap_tcp(&cfg, pre).unwrap())
        })
        .collect();
    let mut eps: Vec<RingEndpoint> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    eps.sort_by_key(|e| e.rank());
    eps
}

#[test]
fn criterion_03_ring_matches_the_sequential_sum() {
    for world in [2usize, 3, 5, 8] {
        let results = reduce_all_cases(bootstrap_loopback(world));
        check_against_sequential_oracle(world, &results, "loopback");

        let results = reduce_all_cases(tcp_ring(world));
        check_against_sequential_oracle(world, &results, "tcp");
    }
    println!(
        "criterion 3: PASS (worlds 2/3/5/8, {REDUCE_CASES} buffers each on loopback and tcp, \
         integer sums exact, float sums within 1e-6)"
    );
}

#[test]
fn criterion_04_init_needs_no_broadcast() {
    let spec = ModelSpec::new(vec![32, 64, 32, 10], vec![true, true]).unwrap();
    let handles: Vec<_> = tcp_ring(8)
        .into_iter()
        .map(|mut ep| {
            let spec = spec.clone();
            thread::spawn(move || {
                let params = init_params(&spec, 100_000);
                barrier(&mut ep).unwrap();
                (params, ep.stats())
            })
        })
        .collect();
    let outputs: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();

    let reference = &outputs[0].0.values;
    for (rank, (params, stats)) in outputs.iter().enumerate() {
        assert_eq!(
            &params.values, reference,
            "rank {rank} initialized different bits"
        );
        assert_eq!(
            stats.data_bytes, 0,
            "rank {rank} sent {} parameter bytes during startup",
            stats.data_bytes
        );
        assert!(stats.control_bytes > 0, "rank {rank} never touched the wire");
    }
    println!(
        "criterion 4: PASS (8 tcp ranks, seed 100000, {} params bitwise identical, 0 data bytes on the wire)",
        reference.len()
    );
}

#[test]
fn criterion_05_batched_norms_match_the_per_segment_oracle() {
    let kinds = [
        SegmentKind::Weight,
        SegmentKind::Bias,
        SegmentKind::BnGamma,
        SegmentKind::BnBeta,
    ];
    let mut rng = DetRng::new(550_816, StreamKind::Data);
    for layout in 0..100usize {
        let nseg = 1 + rng.below(20) as usize;
        let mut segments = Vec::new();
        let mut offset = 0usize;
        for i in 0..nseg {
            let len = 1 + rng.below(200) as usize;
            segments.push(ParamSegment {
                name: format!("s{i}"),
                offset,
                len,
                shape: vec![len],
                kind: kinds[i % kinds.len()],
            });
            offset += len;
        }
        let values: Vec<f32> = (0..offset)
            .map(|_| {
                let scale = (rng.below(41) as i32 - 20) as f32;
                rng.trunc_normal() as f32 * scale.exp2()
            })
            .collect();

        let got = batched_norms(&values, &segments);
        for (i, seg) in segments.iter().enumerate() {
            let mut ss = 0.0f64;
            for &v in &values[seg.range()] {
                ss += v as f64 * v as f64;
            }
            assert_eq!(
                got[i].to_bits(),
                ss.sqrt().to_bits(),
                "layout {layout} segment {i}: norms differ in the bits"
            );
        }
    }
    println!("criterion 5: PASS (100 random layouts, per-segment norms bitwise equal)");
}

/// Four dense layers plus batchnorm, 1.09M parameters (4.4 MB of f32
/// gradients), so all four thresholds land on different bucket plans.
fn bucketing_config(threshold: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.layer_dims = vec![64, 512, 1024, 512, 10];
    cfg.batchnorm = true;
    cfg.dataset_n = 128;
    cfg.eval_n = 64;
    cfg.world_size = 2;
    cfg.batch_per_rank = 32;
    cfg.epochs = 2;
    cfg.eval_period = 4;
    cfg.eval_offset = 1;
    cfg.base_lr = 0.05;
    cfg.warmup_epochs = 1;
    cfg.bucket_bytes = threshold;
    cfg
}

#[test]
fn criterion_06_bucketing_conserves_bytes_and_rejects_broken_traces() {
    let thresholds = [64 * 1024u64, 1 << 20, 4 << 20, u64::MAX];
    let mut runs = Vec::new();
    for &threshold in &thresholds {
        let cfg = bucketing_config(threshold);
        let run = run_training(&cfg).unwrap();
        assert!(!run.diverged);
        let plan = bucket_plan_for(&cfg.model_spec().unwrap(), threshold);
        let grad_bytes = 4 * run.per_rank[0].params.values.len() as u64;
        assert_eq!(plan.total_bytes(), grad_bytes, "plan drops or invents bytes");

        for r in &run.per_rank {
            let mut per_iter: BTreeMap<u64, u64> = BTreeMap::new();
            for e in &r.trace {
                if let TraceKind::AllreduceStart { bytes, .. } = e.kind {
                    *per_iter.entry(e.iteration).or_insert(0) += bytes;
                }
            }
            assert_eq!(per_iter.len(), 4, "expected 4 iterations of traffic");
            for (&it, &bytes) in &per_iter {
                assert_eq!(
                    bytes, grad_bytes,
                    "threshold {threshold} rank {} iteration {it}: {bytes} bytes moved",
                    r.rank
                );
            }
            let violations = validate_trace(&r.trace, &plan, grad_bytes);
            assert!(violations.is_empty(), "threshold {threshold}: {violations:?}");
        }
        runs.push((threshold, run, plan, grad_bytes));
    }

    let reference = &runs[0].1.per_rank[0].params.values;
    for (threshold, run, _, _) in &runs[1..] {
        for r in &run.per_rank {
            assert_eq!(
                &r.params.values, reference,
                "threshold {threshold} changed the final weights"
            );
        }
    }

    // Three broken traces, each derived from a real healthy one.
    let (_, run, plan, grad_bytes) = &runs[1];
    let trace = &run.per_rank[0].trace;
    assert!(plan.group_count() >= 2, "fault cases need at least two groups");
    let start_positions: Vec<usize> = trace
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            e.iteration == trace[0].iteration
                && matches!(e.kind, TraceKind::AllreduceStart { .. })
        })
        .map(|(i, _)| i)
        .collect();

    let mut duplicated = trace.clone();
    let dup = duplicated[start_positions[0]].clone();
    duplicated.insert(start_positions[0] + 1, dup);
    assert!(
        !validate_trace(&duplicated, plan, *grad_bytes).is_empty(),
        "duplicated bucket start went unnoticed"
    );

    let mut reordered = trace.clone();
    let tmp = reordered[start_positions[0]].kind.clone();
    reordered[start_positions[0]].kind = reordered[start_positions[1]].kind.clone();
    reordered[start_positions[1]].kind = tmp;
    assert!(
        !validate_trace(&reordered, plan, *grad_bytes).is_empty(),
        "out-of-order bucket starts went unnoticed"
    );

    let mut inflated = trace.clone();
    if let TraceKind::AllreduceStart { bytes, .. } = &mut inflated[start_positions[0]].kind {
        *bytes += 4;
    }
    assert!(
        !validate_trace(&inflated, plan, *grad_bytes).is_empty(),
        "wrong byte count went unnoticed"
    );

    println!(
        "criterion 6: PASS (thresholds 64KiB/1MiB/4MiB/unbounded move {} bytes per iteration, \
         weights threshold-invariant, 3 injected faults rejected)",
        runs[0].3
    );
}

#[test]
fn criterion_07_update_counts_at_imagenet_scale() {
    let plan = epoch_plan(1_280_000, 2048, 40);
    assert_eq!(plan.full_iters, 15);
    assert_eq!(plan.extra_batch, 25);
    assert_eq!(plan.iterations(), 16);
    assert_eq!(iterations_per_epoch(1_280_000, 2048, 40), 16);
    assert_eq!(90 * plan.iterations(), 1_440);
    println!("criterion 7: PASS (1,280,000 over 2048x40 gives 16 updates/epoch, 1440 over 90 epochs)");
}

#[test]
fn criterion_08_simulator_curves_have_the_right_shape() {
    let worlds: Vec<u32> = (0..=12).map(|e| 1u32 << e).collect();

    let mut ideal = calibration_config();
    ideal.bandwidth_bytes_per_sec = f64::INFINITY;
    ideal.latency_sec = 0.0;
    for p in scalability_curve(&ideal, &worlds) {
        assert!(
            (p.efficiency - 1.0).abs() <= 1e-12,
            "ideal comm, world {}: efficiency {}",
            p.world,
            p.efficiency
        );
    }

    let cal = calibration_config();
    let curve = scalability_curve(&cal, &worlds);
    for pair in curve.windows(2) {
        assert!(
            pair[1].efficiency <= pair[0].efficiency + 1e-12,
            "efficiency rose from world {} to {}",
            pair[0].world,
            pair[1].world
        );
    }

    for &world in &worlds {
        let mut on = cal.clone();
        on.world = world;
        on.overlap = true;
        let mut off = on.clone();
        off.overlap = false;
        let t_on = simulate_iteration(&on).iteration_time_us;
        let t_off = simulate_iteration(&off).iteration_time_us;
        assert!(
            t_on <= t_off + 1e-9,
            "world {world}: overlap {t_on}us vs serial {t_off}us"
        );
    }

    let at_2048 = curve.iter().find(|p| p.world == 2048).unwrap();
    assert!(
        (at_2048.efficiency - 0.77).abs() <= 0.01,
        "calibration point drifted: {}",
        at_2048.efficiency
    );
    println!(
        "criterion 8: PASS (ideal efficiency 1.0, curve nonincreasing, overlap never slower, \
         calibration {:.4} at world 2048)",
        at_2048.efficiency
    );
}

#[test]
fn criterion_09_log_lines_match_the_reference_format() {
    let mut log = EventLog::new("resnet");
    log.event("run_start", None);
    log.event("run_set_random_seed", Some("100000".into()));
    log.event("train_epoch", Some("0".into()));
    log.event("eval_accuracy", Some(epoch_value(0, 0.5)));
    log.event("run_stop", None);
    log.event("run_final", None);
    for line in &log.lines {
        assert!(line_grammar().is_match(line), "emitted line breaks grammar: {line}");
    }

    let run = run_training(&equivalence_config(1, false)).unwrap();
    for line in &run.log_lines {
        assert!(line_grammar().is_match(line), "training log breaks grammar: {line}");
    }

    let parsed = parse_log(include_str!("fixtures/reference_run.log")).unwrap();
    assert!(
        (parsed.elapsed_seconds - 74.654471397).abs() < 1e-9,
        "reference elapsed {}",
        parsed.elapsed_seconds
    );
    assert_eq!(parsed.accuracy.len(), 4);
    assert_eq!(parsed.accuracy[0].0, 1);
    assert!((parsed.accuracy[0].1 - 0.00289).abs() < 1e-12);
    let last = parsed.final_accuracy().unwrap();
    assert!((last - 0.75082).abs() < 1e-12, "reference accuracy {last}");
    println!(
        "criterion 9: PASS (every emitted line matches the grammar; reference log parses to \
         {:.9}s elapsed, final accuracy {:.5})",
        parsed.elapsed_seconds, last
    );
}

#[test]
fn criterion_10_analytic_gradients_survive_finite_differences() {
    // First four trials pin the coverage corners (batchnorm x smoothing),
    // the rest roam.
    let corners = [(true, 0.1f32), (true, 0.0), (false, 0.1), (false, 0.0)];
    let mut rng = DetRng::new(20_260_816, StreamKind::Data);
    let mut total_checked = 0usize;
    let mut total_skipped = 0usize;
    for trial in 0..20u64 {
        let (with_bn, smoothing) = match corners.get(trial as usize) {
            Some(&c) => c,
            None => (
                rng.below(2) == 1,
                if rng.below(2) == 1 { 0.1 } else { 0.0 },
            ),
        };
        let hidden = 1 + rng.below(2) as usize;
        let mut dims = vec![2 + rng.below(4) as usize];
        for _ in 0..hidden {
            dims.push(3 + rng.below(6) as usize);
        }
        dims.push(2 + rng.below(3) as usize);
        let batch = 2 + rng.below(7) as usize;
        let spec = ModelSpec::new(dims.clone(), vec![with_bn; hidden]).unwrap();
        let (checked, skipped) =
            gradient_check(&spec, 9_000 + trial, batch, smoothing, 1e-5, 1e-5).unwrap_or_else(
                |e| panic!("trial {trial} dims {dims:?} bn {with_bn} smoothing {smoothing}: {e}"),
            );
        total_checked += checked;
        total_skipped += skipped;
    }
    println!(
        "criterion 10: PASS (20 random nets, {total_checked} coordinates checked against \
         central differences, {total_skipped} kink skips)"
    );
}
