//! Acceptance criteria, one PASS/FAIL line each.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use prunesearch::analysis::{analysis_layers, compute_class_profiles, compute_filter_contributions, refine_pruning};
use prunesearch::data::Split;
use prunesearch::engine::gradient_check;
use prunesearch::eval::Evaluator;
use prunesearch::fixture::FixtureSpec;
use prunesearch::model::{pruned_count, weighted_sparsity, weighted_sparsity_of, PruneMask};
use prunesearch::policy::{compute_probabilities, compute_probabilities_for, PrioritySelector};
use prunesearch::pruning::{gradient_informed_mask, prune_layer_by_step, reverse_prune_by_step, GradientStats};
use prunesearch::retrain::{
    masks_monotone, progressive_target, BoostConfig, RetrainConfig, RetrainMode, Retrainer,
};
use prunesearch::rng::StreamRng;
use prunesearch::search::{
    acceptance_step, Acceptance, RankedList, SaSchedule, Search, SearchConfig, SearchState,
    SparsityGenotype,
};
use prunesearch::sensitivity::{SensitivityConfig, SensitivityState};
use prunesearch::structural::{channel_summary, run_structural, StructuralConfig};
use prunesearch::trace::trace_csv;
use rand::Rng;

use common::{dense_chain, desk_fixture, evaluator, toy_fixture, MonotoneWatch, ScriptedEvaluator};

const ORACLE_GAP: f64 = 0.05;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const DROP_LIMIT: f64 = 1.0;
const EXACT: f64 = 1e-12;
const SA_RATE_TOL: f64 = 0.01;
const GRAD_REL_ERR: f64 = 1e-3;
const DESK_MIN_SPARSITY: f64 = 0.30;
const DESK_BUDGET: Duration = Duration::from_secs(300);
const GRADIENT_MIN_SPARSITY: f64 = 0.60;
const STRUCTURAL_MIN_CHANNELS: f64 = 0.25;
const REFINE_TAU: f64 = 0.05;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn oracle_equivalence() -> Result<String, String> {
    let f = toy_fixture();
    let levels = [0.0, 0.2, 0.4, 0.6, 0.8];
    let sizes = f.model.sizes();
    if sizes.len() != 3 {
        return Err(format!("toy fixture has {} layers", sizes.len()));
    }
    let mut ev = evaluator(f);
    let baseline = ev.evaluate(&f.model, Split::Test).map_err(err)?.top1;
    let mut best_oracle = 0.0f64;
    let mut probe = f.model.clone();
    for a in levels {
        for b in levels {
            for c in levels {
                probe.apply_sparsities(&[a, b, c]).map_err(err)?;
                let top1 = ev.evaluate(&probe, Split::Test).map_err(err)?.top1;
                if baseline - top1 <= DROP_LIMIT {
                    best_oracle = best_oracle.max(weighted_sparsity_of(&sizes, &[a, b, c]));
                }
            }
        }
    }
    let started = Instant::now();
    let config = SearchConfig {
        iterations: 150,
        sparsity_levels: Some(levels.to_vec()),
        seed: 7,
        ..SearchConfig::default()
    };
    let outcome = prunesearch::search::run_search(&f.model, &mut ev, config).map_err(err)?;
    let elapsed = started.elapsed();
    let found = outcome.best.fitness;
    ensure(outcome.best.feasible, || "best solution infeasible".into())?;
    ensure(found >= best_oracle - ORACLE_GAP, || {
        format!("search {found:.4} vs oracle {best_oracle:.4}")
    })?;
    ensure(elapsed < ORACLE_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "search {found:.4}, oracle {best_oracle:.4} over 125 configs, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn equation_suite() -> Result<String, String> {
    let mut rng = StreamRng::new(11);
    for case in 0..1000 {
        let n = rng.gen_range(1..=8);
        let thr = rng.gen_range(0.1..3.0);
        let sizes: Vec<usize> = (0..n).map(|_| rng.gen_range(1..5000)).collect();
        let sens: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..4.0)).collect();
        let p = compute_probabilities(&sizes, &sens, thr).map_err(err)?;
        let total: f64 = p.iter().sum();
        ensure((total - 1.0).abs() < 1e-9, || format!("case {case}: sum {total}"))?;
        let any_open = sens.iter().any(|&s| s < thr);
        for i in 0..n {
            if any_open && sens[i] >= thr {
                ensure(p[i] == 0.0, || format!("case {case}: excluded layer {i} has mass {}", p[i]))?;
            }
            for j in 0..n {
                // at equal size, lower sensitivity never gets less mass
                if sizes[i] == sizes[j] && sens[i] <= sens[j] {
                    ensure(p[i] >= p[j], || format!("case {case}: monotonicity {i} vs {j}"))?;
                }
                // at equal sensitivity, mass is proportional to size
                if any_open && sens[i] == sens[j] && sens[i] < thr {
                    let lhs = p[i] * sizes[j] as f64;
                    let rhs = p[j] * sizes[i] as f64;
                    ensure((lhs - rhs).abs() < 1e-9, || format!("case {case}: size scaling"))?;
                }
            }
        }
        let mut bumped = sens.clone();
        let k = rng.gen_range(0..n);
        bumped[k] += rng.gen_range(0.0..1.0);
        let q = compute_probabilities(&sizes, &bumped, thr).map_err(err)?;
        if any_open && bumped.iter().any(|&s| s < thr) {
            ensure(q[k] <= p[k] + 1e-12, || format!("case {case}: raising sensitivity raised mass"))?;
        }
        let eligible: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        let pe = compute_probabilities_for(&sizes, &sens, thr, &eligible).map_err(err)?;
        if eligible.iter().any(|&e| e) {
            for i in 0..n {
                if !eligible[i] {
                    ensure(pe[i] == 0.0, || format!("case {case}: ineligible layer {i} has mass"))?;
                }
            }
        }
    }

    let cfg = SensitivityConfig::default();
    for case in 0..1000 {
        let mut s = SensitivityState::new("l", &cfg);
        let drops: Vec<(f64, f64)> = (0..rng.gen_range(1..20))
            .map(|_| (rng.gen_range(50.0..100.0), rng.gen_range(0.0..100.0)))
            .collect();
        for (i, &(b, p)) in drops.iter().enumerate() {
            s.record_impact(b, p).map_err(err)?;
            let lo = (i + 1).saturating_sub(cfg.window);
            let recent = &drops[lo..=i];
            let brute = recent.iter().map(|(b, p)| b - p).sum::<f64>() / recent.len() as f64;
            ensure((s.sensitivity() - brute).abs() < 1e-9, || {
                format!("case {case}: window mean {} vs {brute}", s.sensitivity())
            })?;
        }
        let before = s.step();
        let thr = rng.gen_range(0.1..3.0);
        let after = s.update_step(thr);
        let diff = thr - s.sensitivity();
        let expected_sign = if diff > 0.0 {
            after >= before
        } else if diff < 0.0 {
            after <= before
        } else {
            after == before
        };
        ensure(expected_sign, || format!("case {case}: step {before} -> {after} with thr-sens {diff}"))?;
        ensure((cfg.step_min..=cfg.step_max).contains(&after), || format!("case {case}: step {after} out of bounds"))?;
    }

    let mut s = SensitivityState::new("l", &cfg);
    s.record_impact(99.0, 98.5).map_err(err)?;
    let step = s.update_step(1.0);
    ensure((step - 0.075).abs() <= EXACT, || format!("step {step} != 0.075"))?;
    Ok("1000 policy instances, 1000 windows, step 0.05 -> 0.075".into())
}

fn mask_algebra() -> Result<String, String> {
    let mut rng = StreamRng::new(23);
    for case in 0..1000 {
        let widths: Vec<usize> = (0..rng.gen_range(2..4)).map(|_| rng.gen_range(2..12)).collect();
        let mut model = dense_chain(&widths, case);
        for i in 0..model.layer_count() {
            let s = (rng.gen_range(0..=6) as f64) / 10.0;
            model.set_layer_sparsity(i, s).map_err(err)?;
        }
        let layer = rng.gen_range(0..model.layer_count());
        let name = model.layer(layer).name().to_string();
        let s = model.mask(layer).target();
        let step = rng.gen_range(0.001..(1.0 - s).max(0.002)).min(1.0 - s);
        if step <= 0.0 {
            continue;
        }
        let masks = model.masks().to_vec();
        let weights: Vec<Vec<f32>> = model.layers().iter().map(|l| l.weights().to_vec()).collect();
        prune_layer_by_step(&mut model, &name, step).map_err(err)?;
        reverse_prune_by_step(&mut model, &name, step).map_err(err)?;
        ensure(model.masks() == masks.as_slice(), || format!("case {case}: masks differ"))?;
        for (a, b) in model.masks().iter().zip(&masks) {
            ensure(a.words() == b.words(), || format!("case {case}: mask words differ"))?;
        }
        for (l, w) in model.layers().iter().zip(&weights) {
            let same = l.weights().iter().zip(w).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same, || format!("case {case}: weights changed"))?;
        }
    }

    // hand counts: 100 and 300 weights
    let model = {
        let mut m = dense_chain(&[10, 10, 30], 1);
        m.set_layer_sparsity(0, 0.5).map_err(err)?;
        m.set_layer_sparsity(1, 0.1).map_err(err)?;
        m
    };
    let ws = weighted_sparsity(&model);
    ensure((ws - 80.0 / 400.0).abs() < EXACT, || format!("weighted sparsity {ws} != 0.2"))?;
    let hand = weighted_sparsity_of(&[100, 300], &[0.25, 0.75]);
    ensure((hand - 250.0 / 400.0).abs() < EXACT, || format!("weighted_sparsity_of {hand}"))?;
    let odd = weighted_sparsity_of(&[3, 7], &[0.5, 0.5]);
    let expected = (pruned_count(0.5, 3) + pruned_count(0.5, 7)) as f64 / 10.0;
    ensure((odd - expected).abs() < EXACT, || format!("rounded counts {odd} vs {expected}"))?;

    for case in 0..200u64 {
        let model = dense_chain(&[8, 12], case);
        let layer = model.layer(0);
        let s = rng.gen_range(0.0..1.0);
        let grads: Vec<f32> = (0..layer.parameter_count()).map(|_| rng.gen::<f32>()).collect();
        let g = GradientStats::new(layer.name(), grads).map_err(err)?;
        let gm = gradient_informed_mask(layer, s, &g, 1.0).map_err(err)?;
        let mm = PruneMask::magnitude(layer, s).map_err(err)?;
        ensure(gm.words() == mm.words(), || format!("case {case}: alpha=1 mask differs from magnitude"))?;
    }
    Ok("1000 prune/reverse round trips, hand counts, 200 alpha=1 masks".into())
}

fn sa_acceptance_rate() -> Result<String, String> {
    let sizes = [100usize];
    let current = SparsityGenotype::new(&sizes, vec![0.50], 99.0, 99.0, 1.0);
    let candidate = SparsityGenotype::new(&sizes, vec![0.48], 99.0, 99.0, 1.0);
    let sa = SaSchedule {
        t0: 0.1,
        ..SaSchedule::default()
    };
    let ranked = RankedList::new(10);
    let mut rng = StreamRng::new(5);
    let trials = 100_000;
    let accepted = (0..trials)
        .filter(|_| acceptance_step(&current, &candidate, &ranked, &sa, 0, &mut rng) == Acceptance::Candidate)
        .count();
    let rate = accepted as f64 / trials as f64;
    let expected = (-0.02f64 / 0.1).exp();
    ensure((rate - expected).abs() <= SA_RATE_TOL, || format!("rate {rate:.4} vs {expected:.4}"))?;
    Ok(format!("rate {rate:.4}, exp(-0.2) = {expected:.4}"))
}

fn gradient_check_suite() -> Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let r = gradient_check(seed);
        worst = worst.max(r.max_relative_error);
    }
    ensure(worst <= GRAD_REL_ERR, || format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e} over 10 nets"))
}

fn desk_search() -> Result<String, String> {
    let f = desk_fixture();
    let params = f.model.parameter_count();
    ensure((30_000..=70_000).contains(&params) && f.model.num_classes() == 10, || {
        format!("fixture has {params} parameters, {} classes", f.model.num_classes())
    })?;
    let mut ev = evaluator(f);
    let started = Instant::now();
    let outcome = prunesearch::search::run_search(
        &f.model,
        &mut ev,
        SearchConfig {
            seed: 1,
            ..SearchConfig::default()
        },
    )
    .map_err(err)?;
    let elapsed = started.elapsed();
    let drop = outcome.baseline.top1 - outcome.best.top1;
    ensure(outcome.best.fitness >= DESK_MIN_SPARSITY, || format!("sparsity {:.4}", outcome.best.fitness))?;
    ensure(drop <= DROP_LIMIT, || format!("drop {drop:.2}"))?;
    ensure(elapsed < DESK_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{params} params, sparsity {:.4}, drop {drop:.2}, {:.1}s",
        outcome.best.fitness,
        elapsed.as_secs_f64()
    ))
}

fn gradient_informed() -> Result<String, String> {
    let f = desk_fixture();
    let mut ev = MonotoneWatch::new(evaluator(f));
    let config = RetrainConfig {
        mode: RetrainMode::GradientInformed,
        epochs: 30,
        seed: 3,
        ..RetrainConfig::default()
    };
    let mut r = Retrainer::new(f.model.clone(), &mut ev, config).map_err(err)?;
    r.run(&mut ev, &mut |_| Ok(())).map_err(err)?;
    let report = r.report();
    let drop = report.baseline.top1 - report.final_result.top1;
    ensure(ev.violations.is_empty(), || format!("pruned set shrank in retrains {:?}", ev.violations))?;
    ensure(ev.retrains == 30, || format!("{} retrain calls", ev.retrains))?;
    ensure(report.weighted_sparsity >= GRADIENT_MIN_SPARSITY, || {
        format!("sparsity {:.4}", report.weighted_sparsity)
    })?;
    ensure(drop <= DROP_LIMIT, || format!("drop {drop:.2}"))?;
    let remeasured = ev.evaluate(r.result_model(), Split::Test).map_err(err)?.top1;
    ensure(remeasured == report.final_result.top1, || format!("reported {} remeasured {remeasured}", report.final_result.top1))?;
    Ok(format!(
        "sparsity {:.4}, drop {drop:.2}, 30 masked retrains monotone",
        report.weighted_sparsity
    ))
}

fn progressive() -> Result<String, String> {
    let target = progressive_target(0.1, 0.01, 43).map_err(err)?;
    ensure(target == 0.53, || format!("target {target}"))?;
    let config = RetrainConfig {
        mode: RetrainMode::Progressive,
        epochs: 43,
        progressive_start: 0.1,
        progressive_increment: 0.01,
        ..RetrainConfig::default()
    };
    let models = [
        dense_chain(&[7, 13, 5], 1),
        dense_chain(&[31, 9, 17, 4], 2),
        toy_fixture().model.clone(),
    ];
    for (k, model) in models.into_iter().enumerate() {
        let mut r = if k == 2 {
            let mut ev = evaluator(toy_fixture());
            let mut r = Retrainer::new(model, &mut ev, config.clone()).map_err(err)?;
            r.run(&mut ev, &mut |_| Ok(())).map_err(err)?;
            r
        } else {
            let mut ev = ScriptedEvaluator::new(&[], 50.0);
            let mut r = Retrainer::new(model, &mut ev, config.clone()).map_err(err)?;
            r.run(&mut ev, &mut |_| Ok(())).map_err(err)?;
            r
        };
        let m = r.model().clone();
        for i in 0..m.layer_count() {
            let mask = m.mask(i);
            ensure(mask.target() == 0.53, || format!("model {k} layer {i}: target {}", mask.target()))?;
            ensure(mask.pruned_count() == pruned_count(0.53, mask.len()), || {
                format!("model {k} layer {i}: {} pruned of {}", mask.pruned_count(), mask.len())
            })?;
        }
        let _ = &mut r;
    }
    Ok("uniform 0.53 after 43 epochs on 3 models".into())
}

/// Expected row: (epoch, layer, action, attempt, step, accepted, layer sparsity).
type Row = (usize, &'static str, &'static str, usize, f64, &'static str, f64);

fn boosted_state_machine() -> Result<String, String> {
    let model = dense_chain(&[10, 10, 10], 4);
    let boost = BoostConfig {
        priority: PrioritySelector::Names(vec!["d0".into(), "d1".into()]),
        scales: 2,
        steps: 3,
        step_value: 0.1,
        reduction_factor: 0.5,
        threshold0: 1.0,
        threshold1: 2,
    };
    #[rustfmt::skip]
    let script = [
        90.0,
        // epoch 1: d0 twice ok then a 1.1 drop; d1 four ok then exactly 1.0
        90.0, 89.5, 88.9,
        90.0, 90.0, 90.0, 90.0, 89.0,
        // epoch 2: d0 fails again (permanent); d1 six ok
        88.0,
        90.0, 90.0, 90.0, 90.0, 90.0, 90.0,
        // epoch 3: d0 skipped; d1 fails a second time (permanent)
        85.0,
        // epoch 4: both skipped
    ];
    #[rustfmt::skip]
    let expected: Vec<Row> = vec![
        (1, "d0", "prune", 1, 0.1, "accept", 0.1),
        (1, "d0", "prune", 2, 0.1, "accept", 0.2),
        (1, "d0", "prune", 3, 0.1, "revert", 0.2),
        (1, "d1", "prune", 1, 0.1, "accept", 0.1),
        (1, "d1", "prune", 2, 0.1, "accept", 0.2),
        (1, "d1", "prune", 3, 0.1, "accept", 0.3),
        (1, "d1", "prune", 4, 0.05, "accept", 0.35),
        (1, "d1", "prune", 5, 0.05, "revert", 0.35),
        (1, "", "retrain", 0, f64::NAN, "accept", f64::NAN),
        (2, "d0", "prune", 1, 0.1, "permanent", 0.2),
        (2, "d1", "prune", 1, 0.1, "accept", 0.45),
        (2, "d1", "prune", 2, 0.1, "accept", 0.55),
        (2, "d1", "prune", 3, 0.1, "accept", 0.65),
        (2, "d1", "prune", 4, 0.05, "accept", 0.7),
        (2, "d1", "prune", 5, 0.05, "accept", 0.75),
        (2, "d1", "prune", 6, 0.05, "accept", 0.8),
        (2, "", "retrain", 0, f64::NAN, "accept", f64::NAN),
        (3, "d0", "skip", 0, f64::NAN, "permanent", 0.2),
        (3, "d1", "prune", 1, 0.1, "permanent", 0.8),
        (3, "", "retrain", 0, f64::NAN, "accept", f64::NAN),
        (4, "d0", "skip", 0, f64::NAN, "permanent", 0.2),
        (4, "d1", "skip", 0, f64::NAN, "permanent", 0.8),
        (4, "", "retrain", 0, f64::NAN, "accept", f64::NAN),
    ];
    let mut ev = ScriptedEvaluator::new(&script, 90.0);
    let config = RetrainConfig {
        mode: RetrainMode::Boosted,
        epochs: 4,
        boost,
        ..RetrainConfig::default()
    };
    let mut r = Retrainer::new(model, &mut ev, config).map_err(err)?;
    r.run(&mut ev, &mut |_| Ok(())).map_err(err)?;
    let trace = &r.state().trace;
    ensure(trace.len() == expected.len(), || format!("{} rows, expected {}", trace.len(), expected.len()))?;
    for (k, (row, exp)) in trace.iter().zip(&expected).enumerate() {
        let (epoch, layer, action, attempt, step, accepted, sparsity) = *exp;
        let layer_ok = if layer.is_empty() { row.layers.is_empty() } else { row.layers == [layer] };
        let step_ok = if step.is_nan() { row.steps.is_empty() } else { row.steps.len() == 1 && (row.steps[0] - step).abs() < EXACT };
        let sparsity_ok = sparsity.is_nan() || (row.layer_sparsities.len() == 1 && (row.layer_sparsities[0] - sparsity).abs() < EXACT);
        ensure(
            row.iteration == epoch && layer_ok && row.action == action && row.attempt == attempt && step_ok && row.accepted == accepted && sparsity_ok,
            || format!("row {k}: got {row:?}, expected {exp:?}"),
        )?;
    }
    let state = r.state();
    ensure(state.skip_counts["d0"] == 2 && state.skip_counts["d1"] == 2, || format!("skip counts {:?}", state.skip_counts))?;
    ensure(state.permanently_skipped.len() == 2, || "both layers should be permanently skipped".into())?;
    ensure(ev.validation.is_empty(), || format!("{} scripted values unused", ev.validation.len()))?;
    ensure(ev.retrain_calls == 4, || format!("{} retrains", ev.retrain_calls))?;
    let s = r.model().sparsities();
    ensure((s[0] - 0.2).abs() < EXACT && (s[1] - 0.8).abs() < EXACT, || format!("final sparsities {s:?}"))?;
    Ok(format!("{} transcript rows match", expected.len()))
}

fn structural() -> Result<String, String> {
    let f = desk_fixture();
    let mut ev = evaluator(f);
    let mut model = f.model.clone();
    let out = run_structural(
        &mut model,
        &mut ev,
        &StructuralConfig {
            seed: 2,
            ..StructuralConfig::default()
        },
    )
    .map_err(err)?;
    let summary = channel_summary(&model);
    let final_top1 = ev.evaluate(&model, Split::Test).map_err(err)?.top1;
    let drop = out.state.baseline_top1 - final_top1;
    ensure(summary.channel_fraction_removed >= STRUCTURAL_MIN_CHANNELS, || {
        format!("removed {:.3} of channels", summary.channel_fraction_removed)
    })?;
    ensure(drop <= DROP_LIMIT, || format!("drop {drop:.2}"))?;
    Ok(format!(
        "removed {:.1}% of channels, drop {drop:.2}",
        100.0 * summary.channel_fraction_removed
    ))
}

fn refine_case(model: &mut prunesearch::model::ModelSnapshot, ev: &mut dyn Evaluator) -> Result<&'static str, String> {
    let layers = analysis_layers(model);
    let contribs = compute_filter_contributions(model, ev, &layers).map_err(err)?;
    let profiles = compute_class_profiles(model, ev, &layers).map_err(err)?;
    let before = model.masks().to_vec();
    let before_top1 = ev.evaluate(model, Split::Test).map_err(err)?.top1;
    let before_ws = weighted_sparsity(model);
    let out = refine_pruning(model, ev, &contribs, &profiles, REFINE_TAU, 0.0, Split::Test).map_err(err)?;
    let after_top1 = ev.evaluate(model, Split::Test).map_err(err)?.top1;
    let after_ws = weighted_sparsity(model);
    if model.masks() == before.as_slice() {
        let identical = model.masks().iter().zip(&before).all(|(a, b)| a.words() == b.words());
        ensure(identical && after_top1 == before_top1, || "unchanged masks but different state".into())?;
        return Ok(if out.reverted { "reverted" } else { "nothing to prune" });
    }
    ensure(!out.reverted, || "reported a revert but masks changed".into())?;
    ensure(after_ws > before_ws, || format!("sparsity {before_ws} -> {after_ws}"))?;
    ensure(after_top1 >= before_top1, || format!("top-1 {before_top1} -> {after_top1}"))?;
    ensure(masks_monotone(&before, model.masks()), || "refinement unpruned weights".into())?;
    Ok("increased")
}

fn filter_refinement() -> Result<String, String> {
    let f = desk_fixture();
    let mut ev = evaluator(f);
    let outcome = prunesearch::search::run_search(
        &f.model,
        &mut ev,
        SearchConfig {
            iterations: 120,
            seed: 9,
            ..SearchConfig::default()
        },
    )
    .map_err(err)?;
    let mut searched = f.model.clone();
    searched.apply_sparsities(&outcome.best.sparsities).map_err(err)?;
    let first = refine_case(&mut searched, &mut ev)?;

    // a dead first-layer filter must be found and removed at no cost
    let mut dead = f.model.clone();
    let conv = dead.layer(0).clone();
    let unit = conv.unit_size();
    let mut w = conv.weights().to_vec();
    w[..unit].iter_mut().for_each(|v| *v = 0.0);
    let mut b = conv.bias().map(<[f32]>::to_vec);
    if let Some(b) = b.as_mut() {
        b[0] = -1.0;
    }
    dead.replace_layer(0, conv.with_values(w, b).map_err(err)?).map_err(err)?;
    dead.apply_sparsities(&outcome.best.sparsities).map_err(err)?;
    let second = refine_case(&mut dead, &mut ev)?;
    ensure(second == "increased", || format!("dead filter case: {second}"))?;
    Ok(format!("post-search fixture: {first}; dead-filter fixture: {second}"))
}

fn search_config_for_resume() -> SearchConfig {
    SearchConfig {
        iterations: 80,
        seed: 42,
        ..SearchConfig::default()
    }
}

fn write_toy_fixture(dir: &Path) -> Result<(), String> {
    prunesearch::fixture::make_fixture(&FixtureSpec::toy(), dir).map_err(err)?;
    Ok(())
}

fn cli(out: &Path, fixture: &Path, extra: &[&str]) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_prunesearch"));
    cmd.arg("prune-search")
        .arg("--model")
        .arg(fixture.join("model"))
        .arg("--dataset")
        .arg(fixture.join("data"))
        .arg("--out")
        .arg(out)
        .args(["--seed", "42", "--set", "search.iterations=80", "--set", "checkpoint_every=5"])
        .args(extra)
        .stderr(std::process::Stdio::null());
    cmd
}

fn determinism_resume() -> Result<String, String> {
    let f = toy_fixture();
    let run = || -> Result<String, String> {
        let mut ev = evaluator(f);
        let o = prunesearch::search::run_search(&f.model, &mut ev, search_config_for_resume()).map_err(err)?;
        Ok(trace_csv(&o.trace))
    };
    let a = run()?;
    let b = run()?;
    ensure(a == b, || "same seed gave different traces".into())?;

    // in-process: stop, serialize, resume
    let mut ev = evaluator(f);
    let mut search = Search::new(&f.model, &mut ev, search_config_for_resume()).map_err(err)?;
    for _ in 0..37 {
        search.step(&mut ev).map_err(err)?;
    }
    let saved = serde_json::to_string(search.state()).map_err(err)?;
    drop(search);
    let state: SearchState = serde_json::from_str(&saved).map_err(err)?;
    let mut ev = evaluator(f);
    let mut resumed = Search::resume(&f.model, state).map_err(err)?;
    resumed.run(&mut ev).map_err(err)?;
    ensure(trace_csv(resumed.trace()) == a, || "in-process resume diverged".into())?;

    // through the binary: uninterrupted, --stop-after, and a killed process
    let tmp = tempfile::tempdir().map_err(err)?;
    let fx = tmp.path().join("fixture");
    write_toy_fixture(&fx)?;
    let full = tmp.path().join("full");
    let status = cli(&full, &fx, &[]).status().map_err(err)?;
    ensure(status.success(), || format!("full run exited {status}"))?;
    let reference = std::fs::read(full.join("trace.csv")).map_err(err)?;

    let stopped = tmp.path().join("stopped");
    let s1 = cli(&stopped, &fx, &["--stop-after", "23"]).status().map_err(err)?;
    let s2 = cli(&stopped, &fx, &["--resume"]).status().map_err(err)?;
    ensure(s1.success() && s2.success(), || "stop/resume run failed".into())?;
    let resumed = std::fs::read(stopped.join("trace.csv")).map_err(err)?;
    ensure(resumed == reference, || "stop-after/resume trace differs".into())?;

    let killed = tmp.path().join("killed");
    let mut child = cli(&killed, &fx, &[]).spawn().map_err(err)?;
    let ck = killed.join("checkpoint.json");
    let deadline = Instant::now() + Duration::from_secs(60);
    while !ck.exists() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    let _ = child.kill();
    let _ = child.wait();
    ensure(ck.exists(), || "no checkpoint before kill".into())?;
    let s3 = cli(&killed, &fx, &["--resume"]).status().map_err(err)?;
    ensure(s3.success(), || format!("resume after kill exited {s3}"))?;
    let after_kill = std::fs::read(killed.join("trace.csv")).map_err(err)?;
    ensure(after_kill == reference, || "kill/resume trace differs".into())?;
    let report_a = std::fs::read(full.join("masks.bin")).map_err(err)?;
    let report_b = std::fs::read(killed.join("masks.bin")).map_err(err)?;
    ensure(report_a == report_b, || "final masks differ".into())?;
    Ok("repeat, in-process resume, stop-after and kill/resume traces identical".into())
}

fn main() {
    let criteria: [(&str, Check); 12] = [
        ("oracle equivalence", oracle_equivalence),
        ("equation suite", equation_suite),
        ("mask algebra", mask_algebra),
        ("SA acceptance rate", sa_acceptance_rate),
        ("gradient check", gradient_check_suite),
        ("desk search", desk_search),
        ("gradient-informed retraining", gradient_informed),
        ("progressive", progressive),
        ("boosted state machine", boosted_state_machine),
        ("structural", structural),
        ("filter refinement", filter_refinement),
        ("determinism/resume", determinism_resume),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
