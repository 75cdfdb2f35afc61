//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

use robustsim::ckptplan::{step_stall, CkptDurations, CkptPolicy, ShardLedger, StepCopies};
use robustsim::cli::{cmd_sweep, CATASTROPHIC_WEIGHT};
use robustsim::detection::AlertSource;
use robustsim::diagnosis::{dual_phase_replay, Resolution, Stage};
use robustsim::recovery::{default_was_scales, size_pool, was_table, RestartPolicy, UpdateTrigger, Urgency};
use robustsim::report::{RestartKind, RunOutcome, SimReport};
use robustsim::scenario::{self, ScenarioConfig, UpdateEvent};
use robustsim::simkernel::{run, FaultEvent, FaultKind, SegmentClass};
use robustsim::topology::{Axis, ParallelTopology};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("took {took:.1?}, limit {limit:?}"))
}

// ---- 1 ----

fn replay_exhaustive() -> Result<String, String> {
    let started = Instant::now();
    let mut cases = 0usize;
    let mut mismatches: Vec<(usize, usize, usize, usize, usize)> = Vec::new();
    for z in 1..=256usize {
        for m in (1..=z).filter(|m| z % m == 0) {
            let n = z / m;
            let formula = if m <= n { 1 } else { m.div_ceil(n) };
            for x in 0..z {
                cases += 1;
                let out = dual_phase_replay(z, m, x).map_err(|e| format!("z={z} m={m} x={x}: {e}"))?;
                // Brute force: every machine matching both congruences.
                let oracle: BTreeSet<usize> = (0..z).filter(|&y| y / m == x / m && y % n == x % n).collect();
                ensure(out.suspects == oracle, || format!("z={z} m={m} x={x}: {:?} != {oracle:?}", out.suspects))?;
                ensure(out.suspects.contains(&x), || format!("z={z} m={m} x={x}: faulty not suspected"))?;
                if out.suspects.len() != formula {
                    mismatches.push((z, m, n, x, out.suspects.len()));
                }
            }
        }
    }
    within(Duration::from_secs(10), started)?;
    match mismatches.first() {
        None => Ok(format!("{cases} cases")),
        Some(&(z, m, n, x, got)) => Err(format!(
            "|S| differs from the cardinality formula in {} of {cases} cases, first z={z} m={m} n={n} x={x}: |S|={got}, formula {}",
            mismatches.len(),
            m.div_ceil(n)
        )),
    }
}

// ---- 2 ----

fn sdc_replay_pipeline() -> Result<String, String> {
    let direct = dual_phase_replay(24, 4, 13).map_err(|e| e.to_string())?;
    ensure(direct.suspects == BTreeSet::from([13]), || format!("direct {:?}", direct.suspects))?;
    let r = run(&scenario::fig6_sdc()).map_err(|e| e.to_string())?;
    let i = r.incidents.first().ok_or("no incident")?;
    ensure(i.stages.contains(&Stage::Replay), || format!("stages {:?}", i.stages))?;
    ensure(i.suspects == Some(BTreeSet::from([13])), || format!("suspects {:?}", i.suspects))?;
    ensure(i.evicted == BTreeSet::from([13]), || format!("evicted {:?}", i.evicted))?;
    ensure(i.resolution == Some(Resolution::Replay), || format!("{:?}", i.resolution))?;
    Ok(format!("stages {:?}", i.stages))
}

// ---- 3, 4 ----

fn topology_grid() -> Vec<ParallelTopology> {
    let sizes = [1, 2, 4, 8];
    let mut out = Vec::new();
    for tp in sizes {
        for pp in sizes.into_iter().filter(|&p| p >= 2) {
            for dp in sizes.into_iter().filter(|&d| d % 2 == 0) {
                if tp * pp * dp > 512 {
                    continue;
                }
                for rpm in BTreeSet::from([1, tp]) {
                    out.push(ParallelTopology::new(tp, pp, dp, rpm).unwrap());
                }
            }
        }
    }
    out
}

fn backup_survivability() -> Result<String, String> {
    let started = Instant::now();
    let mut evictions = 0;
    for topo in topology_grid() {
        let mut ledger = ShardLedger::new(topo, 2, 100).map_err(|e| format!("{topo:?}: {e}"))?;
        for step in 1..=3 {
            ledger.record(StepCopies {
                step,
                own_ready_ms: step * 1000,
                backup_ready_ms: step * 1000 + 500,
            });
        }
        let now = 10_000;
        for axis in [Axis::Tp, Axis::Pp, Axis::Dp] {
            for g in topo.groups(axis) {
                let evicted: BTreeSet<usize> = topo.group_machines(g).unwrap().into_iter().collect();
                evictions += 1;
                let p = ledger
                    .latest_recoverable(&evicted, now)
                    .map_err(|u| format!("{topo:?} evicting {g}: rank {} lost", u.rank))?;
                ensure(p.step == 3, || format!("{topo:?} evicting {g}: step {}", p.step))?;
            }
        }
    }
    within(Duration::from_secs(60), started)?;
    Ok(format!("{evictions} group evictions"))
}

fn backup_pairing() -> Result<String, String> {
    let mut checked = 0;
    for topo in topology_grid() {
        let plan = topo.backup_plan().map_err(|e| format!("{topo:?}: {e}"))?;
        let ranks = topo.rank_count();
        for r in 0..ranks {
            let p = plan.peer_of(r);
            ensure(p < ranks && p != r, || format!("{topo:?}: rank {r} -> {p}"))?;
            ensure(plan.peer_of(p) == r, || format!("{topo:?}: not an involution at {r}"))?;
            // Independent group check.
            let (a, b) = (topo.rank_to_coord(r).unwrap(), topo.rank_to_coord(p).unwrap());
            let shared = (a.pp == b.pp && a.dp == b.dp) || (a.tp == b.tp && a.dp == b.dp) || (a.tp == b.tp && a.pp == b.pp);
            ensure(!shared, || format!("{topo:?}: {r} and {p} share a group"))?;
        }
        checked += 1;
    }
    let small = ParallelTopology::new(2, 4, 2, 2).unwrap().backup_plan().unwrap();
    ensure(small.peer_of(8) == 2 && small.peer_of(9) == 3, || {
        format!("8 -> {}, 9 -> {}", small.peer_of(8), small.peer_of(9))
    })?;
    ensure(small.peer_of(2) == 8 && small.peer_of(3) == 9, || "pairing not symmetric".into())?;
    Ok(format!("{checked} topologies, 8<->2 and 9<->3"))
}

// ---- 5 ----

fn standby_quantile() -> Result<String, String> {
    let q = 0.99;
    for n in [16u64, 128, 1024, 4096] {
        for p in [0.0, 1e-4, 1e-3, 1e-2, 0.1, 1.0] {
            let oracle = if p == 0.0 {
                0
            } else if p == 1.0 {
                n
            } else {
                let b = Binomial::new(p, n).unwrap();
                (0..=n).find(|&k| b.cdf(k) >= q).unwrap()
            };
            let got = size_pool(n, p, q);
            ensure(got == oracle, || format!("N={n} p={p}: {got} != {oracle}"))?;
        }
    }
    let cell = size_pool(1024, 1e-3, q);
    ensure(cell == 4, || format!("(1024, 1e-3) = {cell}"))?;
    Ok("24 cells, (1024, 1e-3) = 4".into())
}

// ---- 6 ----

fn hang_aggregation() -> Result<String, String> {
    let cfg = scenario::fig4_hang();
    ensure(
        (cfg.topology.tp_size, cfg.topology.pp_size, cfg.topology.dp_size) == (2, 4, 4),
        || "topology".into(),
    )?;
    let r = run(&cfg).map_err(|e| e.to_string())?;
    ensure(r.incidents.len() == 1, || format!("{} incidents", r.incidents.len()))?;
    let i = &r.incidents[0];
    ensure(i.evicted == BTreeSet::from([12, 13, 14, 15]), || format!("evicted {:?}", i.evicted))?;
    ensure(i.resolution == Some(Resolution::Aggregation), || format!("{:?}", i.resolution))?;
    ensure(i.stages.is_empty(), || format!("stages {:?}", i.stages))?;
    Ok(format!("evicted {:?}", i.evicted))
}

// ---- 7 ----

fn detection_latency() -> Result<String, String> {
    let bounds: BTreeMap<&str, f64> = [
        ("nic-crash", 30.0),
        ("port-flapping", 30.0),
        ("switch-down", 60.0),
        ("gpu-driver-hang", 10.0),
        ("gpu-high-temp", 10.0),
        ("gpu-lost", 10.0),
        ("os-kernel-fault", 2.0),
    ]
    .into();
    let with = run(&scenario::table8_detection()).map_err(|e| e.to_string())?;
    let mut cfg = scenario::table8_detection();
    cfg.detection.inspections_enabled = false;
    let without = run(&cfg).map_err(|e| e.to_string())?;
    let mut seen = Vec::new();
    for (report, inspect) in [(&with, true), (&without, false)] {
        ensure(report.incidents.len() == bounds.len(), || format!("{} incidents", report.incidents.len()))?;
        for i in &report.incidents {
            let kind = i.kinds.join("+");
            let bound = *bounds.get(kind.as_str()).ok_or_else(|| format!("unexpected {kind}"))?;
            let lat = i.detection_latency_s;
            ensure(lat.fract() == 0.0, || format!("{kind}: {lat} is not whole seconds"))?;
            if inspect {
                ensure(matches!(i.detected_by, AlertSource::Inspection { .. }), || format!("{kind}: {:?}", i.detected_by))?;
                ensure(lat <= bound, || format!("{kind}: {lat} s > {bound} s"))?;
                seen.push(format!("{kind} {lat}"));
            } else {
                ensure(lat == 600.0, || format!("{kind} without inspection: {lat} s"))?;
            }
        }
    }
    Ok(seen.join(", "))
}

// ---- 8 ----

fn restart_policy_ordering() -> Result<String, String> {
    let cfg = ScenarioConfig::new("was", 0, ParallelTopology::new(2, 4, 2, 2).unwrap(), 10);
    let r = &cfg.recovery;
    let table = was_table(
        &default_was_scales(r.fail_prob),
        &RestartPolicy::ALL,
        r.quantile,
        CATASTROPHIC_WEIGHT,
        &r.restart,
    );
    ensure(table.rows.len() == 4, || format!("{} scales", table.rows.len()))?;
    let mut ratios = Vec::new();
    for row in &table.rows {
        let get = |p| table.get(row.machines, p).unwrap();
        let (ours, resched, requeue, oracle) = (
            get(RestartPolicy::Ours),
            get(RestartPolicy::Reschedule),
            get(RestartPolicy::Requeue),
            get(RestartPolicy::Oracle),
        );
        ensure(ours < resched && resched < requeue, || {
            format!("{} machines: ours {ours} reschedule {resched} requeue {requeue}", row.machines)
        })?;
        ensure(ours <= 2.0 * oracle, || format!("{} machines: ours {ours} oracle {oracle}", row.machines))?;
        ratios.push(format!("{:.2}", requeue / ours));
    }
    // The sweep command reports the same table.
    let sweep = cmd_sweep(&cfg, &[]).map_err(|e| e.to_string())?;
    ensure(sweep.was == table, || "sweep table differs".into())?;
    Ok(format!("requeue/ours {}", ratios.join(" ")))
}

// ---- 9 ----

fn mean_stall(policy: CkptPolicy, d: &CkptDurations) -> f64 {
    let steps = 64;
    (0..steps).map(|s| step_stall(policy, d, s)).sum::<f64>() / steps as f64
}

fn checkpoint_stall_ordering() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut points = 0;
    while points < 100 {
        let d = CkptDurations {
            d2h_s: rng.gen_range(0.1..5.0),
            serialize_s: rng.gen_range(0.1..10.0),
            backup_send_s: rng.gen_range(0.1..10.0),
            fwd_bwd_s: rng.gen_range(1.0..30.0),
            optimizer_s: rng.gen_range(0.1..5.0),
            backup_overhead_s: 0.0,
        };
        // Two host buffers must drain within two steps.
        if d.d2h_s + d.serialize_s + d.backup_send_s > 2.0 * (d.fwd_bwd_s + d.optimizer_s) {
            continue;
        }
        points += 1;
        let [a, m, b] = CkptPolicy::ALL.map(|p| mean_stall(p, &d));
        ensure(a <= m + 1e-9 && m <= b + 1e-9, || format!("{d:?}: async {a} memory-save {m} blocking {b}"))?;
    }
    let d = CkptDurations::default();
    let (a, b) = (mean_stall(CkptPolicy::ByterobustAsync, &d), mean_stall(CkptPolicy::MegatronBlocking, &d));
    ensure(a <= 0.01 * b, || format!("defaults: async {a} blocking {b}"))?;
    Ok(format!("100 grid points; defaults async {a:.3} s vs blocking {b:.2} s"))
}

// ---- 10 ----

fn update_schedule(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = ParallelTopology::new(2, 4, 2, 2).unwrap();
    let horizon = 10 * 86_400 / 15;
    let mut s = ScenarioConfig::new(format!("updates-{seed}"), seed, topo, horizon);
    let horizon_s = s.horizon_s();
    for _ in 0..rng.gen_range(0..12) {
        let kind = match rng.gen_range(0..3) {
            0 => FaultKind::CudaError,
            1 => FaultKind::GpuLost,
            _ => FaultKind::UserCodeBug { module: None },
        };
        let machines = if kind.is_job_level() { vec![] } else { vec![rng.gen_range(0..8)] };
        let mut f = FaultEvent::new(rng.gen_range(0.0..horizon_s).floor(), kind, machines);
        f.duration_s = Some(60.0);
        s.faults.push(f);
    }
    for _ in 0..rng.gen_range(1..15) {
        s.updates.push(UpdateEvent {
            submit_at_s: rng.gen_range(0.0..horizon_s).floor(),
            urgency: if rng.gen_bool(0.25) { Urgency::Urgent } else { Urgency::Lazy },
        });
    }
    s.updates.sort_by(|a, b| a.submit_at_s.total_cmp(&b.submit_at_s));
    s
}

fn check_updates(r: &SimReport) -> Result<(), String> {
    let window = 86_400_000;
    let failure_restarts: Vec<(u64, &Vec<usize>)> = r
        .restarts
        .iter()
        .filter(|x| matches!(x.kind, RestartKind::Failover | RestartKind::Reattempt))
        .map(|x| ((x.t_s * 1000.0).round() as u64, &x.updates_applied))
        .collect();
    let end_ms = (r.wall_clock_s * 1000.0).round() as u64;
    let mut applied_count: BTreeMap<usize, usize> = BTreeMap::new();
    for t in r.trace.iter().filter(|t| t.event == "update-applied") {
        let id: usize = t.detail.split_whitespace().nth(1).unwrap().parse().unwrap();
        *applied_count.entry(id).or_default() += 1;
    }
    for u in &r.updates {
        let times = applied_count.get(&u.id).copied().unwrap_or(0);
        ensure(times <= 1, || format!("{}: update {} applied {times} times", r.scenario, u.id))?;
        let sub = u.submitted_at_ms;
        match u.urgency {
            Urgency::Urgent => {
                ensure(u.applied_at_ms == Some(sub), || format!("{}: urgent {:?}", r.scenario, u))?;
            }
            Urgency::Lazy => {
                let first = failure_restarts.iter().find(|(t, _)| *t >= sub).map(|(t, _)| *t);
                let expected = match first {
                    Some(t) if t < sub + window => Some((t, UpdateTrigger::Failover)),
                    _ if sub + window <= end_ms => Some((sub + window, UpdateTrigger::WindowExpiry)),
                    _ => None,
                };
                let got = u.applied_at_ms.zip(u.applied_via);
                ensure(got == expected, || format!("{}: lazy {:?}, expected {expected:?}", r.scenario, u))?;
                if let Some((t, UpdateTrigger::Failover)) = got {
                    let hit = failure_restarts.iter().any(|(rt, ids)| *rt == t && ids.contains(&u.id));
                    ensure(hit, || format!("{}: update {} not on its restart", r.scenario, u.id))?;
                }
            }
        }
        ensure((u.applied_at_ms.is_some()) == (times == 1), || format!("{}: {:?} vs trace", r.scenario, u))?;
    }
    Ok(())
}

fn hot_update_semantics() -> Result<String, String> {
    let (mut lazy, mut urgent, mut via_failover) = (0, 0, 0);
    for seed in 0..40 {
        let r = run(&update_schedule(seed)).map_err(|e| e.to_string())?;
        check_updates(&r)?;
        for u in &r.updates {
            match u.urgency {
                Urgency::Urgent => urgent += 1,
                Urgency::Lazy => lazy += 1,
            }
            if u.applied_via == Some(UpdateTrigger::Failover) {
                via_failover += 1;
            }
        }
    }
    ensure(via_failover > 0, || "no lazy update ever rode a failover".into())?;
    Ok(format!("40 schedules, {lazy} lazy ({via_failover} at failover), {urgent} urgent"))
}

// ---- 11 ----

fn check_ledger(r: &SimReport) -> Result<(), String> {
    let segs = &r.ledger.segments;
    let end = (r.wall_clock_s * 1000.0).round() as u64;
    let mut t = 0;
    for s in segs {
        ensure(s.start_ms == t && s.end_ms > s.start_ms, || format!("{}: gap or overlap at {t}", r.scenario))?;
        t = s.end_ms;
    }
    ensure(t == end, || format!("{}: ledger ends at {t}, run at {end}", r.scenario))?;
    let w = (r.sliding_window_s * 1000.0).round() as u64;
    ensure(r.ettr_sliding.len() == segs.len(), || "series length".into())?;
    for (point, s) in r.ettr_sliding.iter().zip(segs) {
        let t = s.end_ms;
        let from = t.saturating_sub(w);
        let productive: u64 = segs
            .iter()
            .filter(|x| x.class == SegmentClass::Productive)
            .map(|x| x.end_ms.min(t).saturating_sub(x.start_ms.max(from)))
            .sum();
        let want = productive as f64 / (t - from) as f64;
        ensure((point.ettr - want).abs() < 1e-12, || {
            format!("{}: sliding at {t} is {}, brute force {want}", r.scenario, point.ettr)
        })?;
    }
    Ok(())
}

fn determinism_and_ledger() -> Result<String, String> {
    let started = Instant::now();
    let mut outcomes: BTreeMap<String, usize> = BTreeMap::new();
    for seed in 0..20 {
        let cfg = common::random_scenario(1000 + seed);
        let a = run(&cfg).map_err(|e| e.to_string())?;
        let b = run(&cfg).map_err(|e| e.to_string())?;
        ensure(a.trace == b.trace, || format!("{}: traces differ", cfg.name))?;
        ensure(a.to_json() == b.to_json(), || format!("{}: reports differ", cfg.name))?;
        check_ledger(&a)?;
        *outcomes.entry(format!("{:?}", a.outcome)).or_default() += 1;
    }
    within(Duration::from_secs(120), started)?;
    let _ = RunOutcome::Completed;
    Ok(format!("20 scenarios, outcomes {outcomes:?}"))
}

fn main() {
    let checks: [(&str, Check); 11] = [
        ("replay suspect sets, exhaustive to z=256", replay_exhaustive),
        ("silent corruption localized by replay to {13}", sdc_replay_pipeline),
        ("checkpoint survives any single group eviction", backup_survivability),
        ("backup peers: no shared group, involution, 8<->2 9<->3", backup_pairing),
        ("standby pool size equals exact binomial quantile", standby_quantile),
        ("hang over-evicts machines 12-15 by aggregation", hang_aggregation),
        ("detection latency with and without inspection", detection_latency),
        ("restart policy WAS ordering", restart_policy_ordering),
        ("checkpoint stall ordering", checkpoint_stall_ordering),
        ("hot update timing", hot_update_semantics),
        ("determinism and ledger soundness", determinism_and_ledger),
    ];
    let mut failed = 0;
    for (n, (name, check)) in checks.iter().enumerate() {
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = started.elapsed();
        match result {
            Ok(detail) => println!("PASS [{:>2}] {name}: {detail} ({took:.2?})", n + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {why} ({took:.2?})", n + 1);
            }
        }
    }
    println!("{} of {} criteria pass", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
