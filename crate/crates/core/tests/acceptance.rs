//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any failed.
//!
//! Criteria 4-7 and 9 share one full fixture pipeline run.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use stochdet_core::attack::AttackKind;
use stochdet_core::detect::{decide, first_pass_distance, run_state_machine};
use stochdet_core::model::{fixture_arch, loss_and_input_gradient, loss_value, param_gradients, LossSpec};
use stochdet_core::ops::softmax;
use stochdet_core::pipeline::{ExperimentConfig, Pipeline};
use stochdet_core::rng::Stream;
use stochdet_core::sim::{group_by_nnz, mask_stream_trace, simulate_layer, simulate_model, Schedule};
use stochdet_core::sparsify::{draw_plan, noisy_forward, FilterPlan, LayerPlan};
use stochdet_core::threshold::{filter_thresholds, profile_thresholds, RATE_STEPS};
use stochdet_core::{
    AcceleratorConfig, DetectionThresholds, Label, Model, NoiseConfig, NoiseMode, Tensor, Termination, ThresholdTable,
};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_input(s: &mut Stream) -> Tensor {
    Tensor::new(vec![1, 18, 18], (0..324).map(|_| s.next_f64()).collect()).unwrap()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Check {
    const PAIRS: usize = 20;
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    let mut rng = Stream::new(101);
    for pair in 0..PAIRS {
        let mut model = Model::init([1, 18, 18], fixture_arch(18, 4).unwrap(), 1000 + pair as u64).unwrap();
        let x = random_input(&mut rng);
        let origin = random_input(&mut rng);
        let p = model.predict(&x).unwrap();
        worst_sum = worst_sum.max((p.probs.iter().sum::<f64>() - 1.0).abs());
        let target = (p.argmax() + 1 + pair % 3) % 4;
        let tp = softmax(&(0..4).map(|_| 3.0 * rng.normal()).collect::<Vec<_>>());
        worst_sum = worst_sum.max((tp.probs.iter().sum::<f64>() - 1.0).abs());
        let losses = [
            ("cross_entropy", LossSpec::CrossEntropy { label: pair % 4 }),
            ("cw_margin", LossSpec::CwMargin { target, k: 1.0 }),
            (
                "composite",
                LossSpec::Composite { target, k: 1.0, c: 2.0, beta: 0.5, target_probs: tp.probs.clone(), origin },
            ),
        ];
        for (name, loss) in &losses {
            let (_, g, out) = loss_and_input_gradient(&model, &x, loss).unwrap();
            worst_sum = worst_sum.max((out.probs.iter().sum::<f64>() - 1.0).abs());
            let mut fd = Vec::with_capacity(x.len());
            let mut xp = x.clone();
            for i in 0..x.len() {
                let v = x.data()[i];
                xp.data_mut()[i] = v + H;
                let up = loss_value(&model, &xp, loss).unwrap();
                xp.data_mut()[i] = v - H;
                let down = loss_value(&model, &xp, loss).unwrap();
                xp.data_mut()[i] = v;
                fd.push((up - down) / (2.0 * H));
            }
            let e = rel_err(g.data(), &fd);
            worst = worst.max(e);
            ensure(e <= 1e-3, || format!("pair {pair} {name}: input gradient relative error {e:.2e}"))?;
        }

        // Parameter gradients of the training loss, every 5th coordinate.
        let label = pair % 4;
        let ce = LossSpec::CrossEntropy { label };
        let (_, grads, _) = param_gradients(&model, &x, label).unwrap();
        let (mut analytic, mut fd) = (Vec::new(), Vec::new());
        let layers: Vec<usize> = model.parametric_layers().collect();
        for l in layers {
            let g = grads[l].as_ref().unwrap();
            let n = g.weights.len();
            for i in (pair % 5..n).step_by(5) {
                let v = model.params()[l].as_ref().unwrap().weights.data()[i];
                let set = |m: &mut Model, val: f64| m.params_mut()[l].as_mut().unwrap().weights.data_mut()[i] = val;
                set(&mut model, v + H);
                let up = loss_value(&model, &x, &ce).unwrap();
                set(&mut model, v - H);
                let down = loss_value(&model, &x, &ce).unwrap();
                set(&mut model, v);
                analytic.push(g.weights[i]);
                fd.push((up - down) / (2.0 * H));
            }
            for b in 0..g.bias.len() {
                let v = model.params()[l].as_ref().unwrap().bias[b];
                let set = |m: &mut Model, val: f64| m.params_mut()[l].as_mut().unwrap().bias[b] = val;
                set(&mut model, v + H);
                let up = loss_value(&model, &x, &ce).unwrap();
                set(&mut model, v - H);
                let down = loss_value(&model, &x, &ce).unwrap();
                set(&mut model, v);
                analytic.push(g.bias[b]);
                fd.push((up - down) / (2.0 * H));
            }
        }
        let e = rel_err(&analytic, &fd);
        worst = worst.max(e);
        ensure(e <= 1e-3, || format!("pair {pair}: parameter gradient relative error {e:.2e}"))?;
    }
    ensure(worst_sum <= 1e-9, || format!("probability vector off unit sum by {worst_sum:.2e}"))?;
    Ok(format!("{PAIRS} pairs x 3 losses + params, worst rel err {worst:.2e}, worst |sum-1| {worst_sum:.1e}"))
}

// ---------------------------------------------------------------- criterion 2

/// Kept-weight mask by sorting: drop the `d` smallest magnitudes, where `d`
/// is the largest count not above the grid cap that does not split a tie.
fn oracle_mask(weights: &[f64], step: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[a].abs().total_cmp(&weights[b].abs()));
    let n = weights.len();
    let cap = step * n / RATE_STEPS;
    let mut d = cap;
    while d > 0 && d < n && weights[idx[d]].abs() == weights[idx[d - 1]].abs() {
        d -= 1;
    }
    let mut keep = vec![true; n];
    for &i in &idx[..d] {
        keep[i] = false;
    }
    keep
}

fn check_table(table: &ThresholdTable, model: &Model) -> Result<(), String> {
    for lt in &table.layers {
        let w = model.params()[lt.layer].as_ref().unwrap().weights.data();
        for (f, ft) in lt.filters.iter().enumerate() {
            let n = lt.weights_per_filter;
            for g in 1..RATE_STEPS {
                ensure(ft.tau[g] >= ft.tau[g - 1] && ft.drops[g] >= ft.drops[g - 1], || {
                    format!("layer {} filter {f}: table not monotone at step {g}", lt.layer)
                })?;
            }
            for g in 0..RATE_STEPS {
                ensure(ft.drops[g] <= g * n / RATE_STEPS, || format!("filter {f}: drops exceed the grid rate at {g}"))?;
                let rule: Vec<bool> = w[f * n..(f + 1) * n].iter().map(|x| x.abs() >= ft.tau[g]).collect();
                ensure(rule == oracle_mask(&w[f * n..(f + 1) * n], g), || {
                    format!("layer {} filter {f} step {g}: mask differs from sort oracle", lt.layer)
                })?;
            }
        }
    }
    Ok(())
}

fn criterion_2(trained: &Model) -> Check {
    let mut rng = Stream::new(202);
    let mut models = vec![trained.clone()];
    for s in 0..4 {
        models.push(Model::init([1, 18, 18], fixture_arch(18, 4).unwrap(), 50 + s).unwrap());
    }
    // A model with heavy magnitude ties.
    let mut tied = models[1].clone();
    for p in tied.params_mut().iter_mut().flatten() {
        for w in p.weights.data_mut() {
            *w = (rng.below(7) as f64 - 3.0) * 0.1;
        }
    }
    models.push(tied);
    let mut plans = 0;
    for model in &models {
        let table = profile_thresholds(model);
        check_table(&table, model)?;
        for pass in 0..10u64 {
            let x = random_input(&mut rng);
            let rate = rng.uniform(0.0, 0.95);
            let plan = draw_plan(model, &table, rate, pass).unwrap();
            ensure(plan == draw_plan(model, &table, rate, pass).unwrap(), || "plan not deterministic".into())?;
            for lp in &plan.layers {
                let w = model.params()[lp.layer].as_ref().unwrap().weights.data();
                let n = lp.weights_per_filter;
                for (f, fp) in lp.filters.iter().enumerate() {
                    ensure(lp.filter_mask(f) == oracle_mask(&w[f * n..(f + 1) * n], fp.grid_step).as_slice(), || {
                        format!("plan mask differs from oracle, layer {} filter {f}", lp.layer)
                    })?;
                }
            }
            let mut zeroed = model.clone();
            for lp in &plan.layers {
                let ws = zeroed.params_mut()[lp.layer].as_mut().unwrap().weights.data_mut();
                for (w, &keep) in ws.iter_mut().zip(&lp.mask) {
                    if !keep {
                        *w = 0.0;
                    }
                }
            }
            let a = noisy_forward(model, &plan, &x).unwrap();
            let b = zeroed.predict(&x).unwrap();
            let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
            ensure(bits(&a.probs) == bits(&b.probs) && bits(&a.logits) == bits(&b.logits), || {
                "masked forward differs from zeroed-weight forward".into()
            })?;
            plans += 1;
        }
    }
    // Standalone tie cases.
    for w in [vec![0.5; 9], vec![0.1, -0.1, 0.2, 0.2, -0.3, 0.3, 0.3, 0.0, 0.0]] {
        let ft = filter_thresholds(&w);
        for g in 0..RATE_STEPS {
            let rule: Vec<bool> = w.iter().map(|x| x.abs() >= ft.tau[g]).collect();
            ensure(rule == oracle_mask(&w, g), || format!("tie case {w:?} step {g}"))?;
        }
    }
    Ok(format!("{} models, {plans} plans: tables monotone, masks match oracle, forwards bitwise equal", models.len()))
}

// ---------------------------------------------------------------- criterion 3

type Case<'a> = (&'a str, usize, &'a [f64], Label, Termination, usize);

fn criterion_3() -> Check {
    use Label::{Adversarial as A, Benign as B};
    use Termination::{Average as Avg, Cap, Greedy};
    // t1' = 0.25, t1 = 0.5, t2 = 1.0, t2' = 1.75; midpoint 0.75.
    let t = DetectionThresholds::new(0.25, 0.5, 1.0, 1.75).unwrap();
    // (name, max_runs, distances, label, termination, runs used)
    let cases: &[Case] = &[
        ("greedy benign", 5, &[0.1], B, Greedy, 1),
        ("greedy adversarial", 5, &[1.9], A, Greedy, 1),
        ("at t1' falls through to average", 5, &[0.25], B, Avg, 1),
        ("at t2' falls through to average", 5, &[1.75], A, Avg, 1),
        ("average benign on pass 1", 5, &[0.4], B, Avg, 1),
        ("average adversarial on pass 1", 5, &[1.2], A, Avg, 1),
        ("average benign later", 5, &[0.8, 0.1], B, Avg, 2),
        ("average adversarial later", 5, &[0.9, 1.5], A, Avg, 2),
        ("no greedy after pass 1 (low)", 3, &[0.9, 0.2, 0.6], B, Cap, 3),
        ("no greedy after pass 1 (high)", 5, &[0.55, 1.9], A, Avg, 2),
        ("mean exactly t1 continues", 2, &[0.5, 0.5], B, Cap, 2),
        ("mean exactly t2 continues", 2, &[1.0, 1.0], A, Cap, 2),
        ("cap below midpoint", 3, &[0.6, 0.7, 0.65], B, Cap, 3),
        ("cap above midpoint", 3, &[0.9, 0.8, 0.85], A, Cap, 3),
        ("cap midpoint tie", 3, &[0.75, 0.75, 0.75], B, Cap, 3),
        ("single run cap", 1, &[0.7], B, Cap, 1),
        ("single run greedy beats cap", 1, &[0.1], B, Greedy, 1),
    ];
    for &(name, max_runs, seq, label, term, runs) in cases {
        let (l, tm, hist) = run_state_machine(&t, max_runs, |i| {
            seq.get(i - 1).copied().ok_or_else(|| stochdet_core::Error::InvalidArgument("sequence exhausted".into()))
        })
        .map_err(|e| format!("{name}: {e}"))?;
        ensure(l == label && tm == term && hist.len() == runs, || {
            format!("{name}: got {l:?}/{tm:?} after {}, want {label:?}/{term:?} after {runs}", hist.len())
        })?;
        for i in 1..runs {
            ensure(decide(&t, &seq[..i], max_runs).is_none(), || format!("{name}: decided early at {i}"))?;
        }
    }
    ensure(decide(&t, &[], 5).is_none(), || "empty history decided".into())?;
    ensure(run_state_machine(&t, 0, |_| Ok(0.0)).is_err(), || "max_runs 0 accepted".into())?;
    Ok(format!("{} table cases", cases.len()))
}

// ---------------------------------------------------------------- shared run

const POOL_SEEDS: u64 = 8;

struct Fixture {
    pipeline: Pipeline,
    model: Model,
    table: ThresholdTable,
    benign: Vec<Tensor>,
    cw_k2: Vec<Tensor>,
    accuracy: f64,
    elapsed: Duration,
}

fn run_pipeline(cfg: ExperimentConfig, dir: &Path) -> Result<(Pipeline, Duration), String> {
    let start = Instant::now();
    let p = Pipeline::with_output_dir(cfg, dir.to_path_buf()).map_err(|e| e.to_string())?;
    p.run().map_err(|e| format!("pipeline: {e}"))?;
    Ok((p, start.elapsed()))
}

fn fixture(dir: &Path) -> Result<Fixture, String> {
    let (pipeline, elapsed) = run_pipeline(ExperimentConfig::fixture(1), dir)?;
    let e = |e: stochdet_core::Error| e.to_string();
    let model = pipeline.model().map_err(e)?;
    let table = pipeline.table().map_err(e)?;
    let benign = pipeline.partitions().map_err(e)?.benign_eval.images;
    let entry = pipeline
        .attack_index()
        .map_err(e)?
        .into_iter()
        .find(|a| a.attack.kind == AttackKind::CwL2 && a.attack.k == 2.0)
        .ok_or("no cw k=2 set")?;
    let cw_k2 = pipeline.adversarial_set(&entry).map_err(e)?.successes().map(|s| s.perturbed.clone()).collect();
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("train_report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let accuracy = report["benign_eval_accuracy"].as_f64().ok_or("no accuracy in train report")?;
    Ok(Fixture { pipeline, model, table, benign, cw_k2, accuracy, elapsed })
}

/// First-pass distances pooled over `POOL_SEEDS` base seeds.
fn pooled(f: &Fixture, xs: &[Tensor], noise: &NoiseConfig) -> Vec<f64> {
    (0..POOL_SEEDS)
        .flat_map(|seed| xs.iter().map(move |x| (seed, x)))
        .map(|(seed, x)| first_pass_distance(&f.model, &f.table, x, noise, 1 + seed).unwrap())
        .collect()
}

/// Adversarial mean minus benign mean, in benign standard deviations.
fn separation(benign: &[f64], adv: &[f64]) -> f64 {
    let (bm, bs) = mean_std(benign);
    (mean_std(adv).0 - bm) / bs
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4(f: &Fixture) -> Check {
    ensure(f.accuracy >= 0.95, || format!("fixture accuracy {:.3} below 0.95", f.accuracy))?;
    ensure(f.benign.len() >= 200 && f.cw_k2.len() >= 200, || {
        format!("need 200 samples each, have {} benign and {} adversarial", f.benign.len(), f.cw_k2.len())
    })?;
    let noise = f.pipeline.config().noise;
    let sep = separation(&pooled(f, &f.benign, &noise), &pooled(f, &f.cw_k2, &noise));
    ensure(sep >= 2.0, || format!("separation {sep:.2} benign std below 2"))?;
    Ok(format!(
        "accuracy {:.3}, {} benign / {} adversarial x {POOL_SEEDS} seeds, separation {sep:.2} std",
        f.accuracy,
        f.benign.len(),
        f.cw_k2.len()
    ))
}

// ---------------------------------------------------------------- criterion 5

fn rate(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

fn cw_rates(p: &Pipeline) -> Result<(f64, Vec<(f64, f64)>), String> {
    let m = p.metrics().map_err(|e| e.to_string())?;
    let cw = m
        .attacks
        .iter()
        .filter(|a| a.attack.kind == AttackKind::CwL2)
        .map(|a| (a.attack.k, rate(a.detection.detection_rate)))
        .collect();
    Ok((rate(m.benign.fpr), cw))
}

fn criterion_5(f: &Fixture) -> Check {
    let (fpr, cw) = cw_rates(&f.pipeline)?;
    let at = |k: f64| cw.iter().find(|c| c.0 == k).map(|c| c.1).ok_or(format!("no cw k={k} set"));
    let (d0, d2, d5) = (at(0.0)?, at(2.0)?, at(5.0)?);
    let line = format!("fpr {fpr:.3}, detection k=0 {d0:.3} k=2 {d2:.3} k=5 {d5:.3}");
    ensure(fpr <= 0.10, || format!("{line}: fpr above 0.10"))?;
    ensure(d0 >= 0.7 && d2 >= 0.7 && d5 >= 0.7, || format!("{line}: detection below 0.70"))?;
    ensure((d5 - d0).abs() <= 0.15, || format!("{line}: k=5 more than 15 points from k=0"))?;
    Ok(line)
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6(f: &Fixture) -> Check {
    let m = f.pipeline.metrics().map_err(|e| e.to_string())?;
    let at = |beta: f64| {
        m.attacks
            .iter()
            .find(|a| a.attack.kind == AttackKind::DefenseAware && a.attack.beta == beta)
            .ok_or(format!("no defense-aware set at beta {beta}"))
    };
    let (lo, hi) = (at(1e-4)?, at(1e-1)?);
    let get = |v: Option<f64>| v.unwrap_or(f64::NAN);
    let (l1_lo, l1_hi) = (get(lo.mean_attack_l1), get(hi.mean_attack_l1));
    let (l2_lo, l2_hi) = (get(lo.mean_l2), get(hi.mean_l2));
    let (d_lo, d_hi) = (rate(lo.detection.detection_rate), rate(hi.detection.detection_rate));
    let line = format!(
        "beta 1e-4 vs 1e-1: successes {}/{}, l1 {l1_lo:.4}/{l1_hi:.4}, l2 {l2_lo:.4}/{l2_hi:.4}, detection {d_lo:.3}/{d_hi:.3}",
        lo.successes, hi.successes
    );
    ensure(lo.successes >= 50 && hi.successes >= 50, || format!("{line}: fewer than 50 successes"))?;
    ensure(l1_hi < l1_lo, || format!("{line}: l1 not lower at 1e-1"))?;
    ensure(l2_hi > l2_lo, || format!("{line}: l2 not higher at 1e-1"))?;
    ensure(d_lo > d_hi, || format!("{line}: detection not lower at 1e-1"))?;
    Ok(line)
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7(f: &Fixture) -> Check {
    let act = |level: f64| NoiseConfig { sr_lo: level, sr_hi: level, gamma: 4.0, mode: NoiseMode::Activation };
    let stats = |noise: &NoiseConfig| {
        let b = pooled(f, &f.benign, noise);
        let a = pooled(f, &f.cw_k2, noise);
        (mean_std(&b).0, mean_std(&a).0, separation(&b, &a))
    };
    let (b1, a1, s1) = stats(&act(0.1));
    let (b9, a9, s9) = stats(&act(0.9));
    let (_, _, sp) = stats(&f.pipeline.config().noise);
    let line = format!(
        "mean l1 benign {b1:.4}->{b9:.4}, adversarial {a1:.4}->{a9:.4}; separation act0.1 {s1:.2} act0.9 {s9:.2} sparsify {sp:.2}"
    );
    ensure(b9 > b1 && a9 > a1, || format!("{line}: level 0.9 does not exceed 0.1"))?;
    ensure(sp > s1 && sp > s9, || format!("{line}: sparsification separation not larger"))?;
    Ok(line)
}

// ---------------------------------------------------------------- criterion 8

fn prefix_plan(nnz: &[usize], m: usize) -> LayerPlan {
    let mut mask = Vec::new();
    let filters = nnz
        .iter()
        .map(|&n| {
            mask.extend((0..m).map(|i| i < n));
            FilterPlan { assigned_rate: 0.0, grid_step: 0, tau: 0.0, dropped: m - n, nnz: n }
        })
        .collect();
    LayerPlan { layer: 0, weights_per_filter: m, filters, mask }
}

fn chunk_cost(order: &[usize], g: usize) -> usize {
    order.chunks(g).map(|c| *c.iter().max().unwrap()).sum()
}

fn sorted_cost(nnz: &[usize], g: usize) -> usize {
    group_by_nnz(nnz, g).iter().map(|c| c.iter().map(|s| s.nnz).max().unwrap()).sum()
}

fn permutations(v: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permutations(v, k + 1, visit);
        v.swap(k, i);
    }
}

/// Independent replay: a lane may take its next active weight when it lies
/// within `w` of the lowest pending index.
fn replay_stalls(masks: &[Vec<bool>], w: usize) -> usize {
    let len = masks[0].len();
    let mut next: Vec<usize> = masks.iter().map(|m| m.iter().position(|&b| b).unwrap_or(len)).collect();
    let mut cycles = 0;
    while next.iter().any(|&n| n < len) {
        let base = *next.iter().filter(|&&n| n < len).min().unwrap();
        for (lane, n) in next.iter_mut().enumerate() {
            if *n < len && *n - base <= w {
                *n = (*n + 1..len).find(|&i| masks[lane][i]).unwrap_or(len);
            }
        }
        cycles += 1;
    }
    let densest = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).max().unwrap_or(0);
    cycles - densest
}

fn criterion_8(trained: &Model, table: &ThresholdTable) -> Check {
    // Hand examples.
    let cfg = AcceleratorConfig { group_size: 4, lookahead: 5, tiles: 1 };
    let plan = prefix_plan(&[3, 5, 2, 4], 5);
    let sched = Schedule { layer: 0, groups: group_by_nnz(&plan.nnz(), 4) };
    let lc = simulate_layer(&plan, &sched, &cfg, 1).map_err(|e| e.to_string())?;
    ensure(lc.sparse_cycles == 5 && lc.idle_mac_slots == 6, || {
        format!("[3,5,2,4]: {} cycles, {} idle", lc.sparse_cycles, lc.idle_mac_slots)
    })?;
    ensure(sorted_cost(&[2, 3, 4, 5], 2) == 8 && chunk_cost(&[5, 2, 4, 3], 2) == 9, || "8-vs-9 grouping case".into())?;
    let split: Vec<Vec<bool>> =
        ["111100000", "000011111"].iter().map(|s| s.chars().map(|c| c == '1').collect()).collect();
    let refs: Vec<&[bool]> = split.iter().map(Vec::as_slice).collect();
    let tr = mask_stream_trace(&refs, 1);
    ensure(tr.stalls == replay_stalls(&split, 1), || "split-mask stall count differs from replay".into())?;

    // Random chunkings.
    let mut rng = Stream::new(808);
    for trial in 0..1000 {
        let n = 2 + rng.below(30) as usize;
        let g = 1 + rng.below(6) as usize;
        let nnz: Vec<usize> = (0..n).map(|_| rng.below(73) as usize).collect();
        let mut order = nnz.clone();
        rng.shuffle(&mut order);
        ensure(sorted_cost(&nnz, g) <= chunk_cost(&order, g), || {
            format!("trial {trial}: random chunking beats sorted")
        })?;
    }
    // Exhaustive for up to 8 filters.
    let mut exhaustive = 0usize;
    for n in 1..=8 {
        for g in 1..=4 {
            for _ in 0..2 {
                let nnz: Vec<usize> = (0..n).map(|_| rng.below(20) as usize).collect();
                let best = sorted_cost(&nnz, g);
                let mut v = nnz.clone();
                let mut ok = true;
                permutations(&mut v, 0, &mut |p| {
                    ok &= best <= chunk_cost(p, g);
                    exhaustive += 1;
                });
                ensure(ok, || format!("{nnz:?} g={g}: a chunking beats sorted"))?;
            }
        }
    }

    // Window monotonicity against the replay oracle.
    for trial in 0..300 {
        let lanes = 1 + rng.below(4) as usize;
        let len = 4 + rng.below(40) as usize;
        let density = rng.next_f64();
        let masks: Vec<Vec<bool>> = (0..lanes).map(|_| (0..len).map(|_| rng.next_f64() < density).collect()).collect();
        let refs: Vec<&[bool]> = masks.iter().map(Vec::as_slice).collect();
        let mut prev = usize::MAX;
        for w in 1..=len {
            let s = mask_stream_trace(&refs, w).stalls;
            ensure(s == replay_stalls(&masks, w), || format!("trial {trial} W={w}: trace disagrees with replay"))?;
            ensure(s <= prev, || format!("trial {trial}: stalls rose at W={w}"))?;
            prev = s;
        }
        ensure(prev == 0, || format!("trial {trial}: stalls with W >= mask length"))?;
    }

    // Work conservation on every simulated layer of the trained model.
    let mut layers = 0;
    for pass in 0..40u64 {
        let rate = (pass % 10) as f64 / 10.0;
        let plan = draw_plan(trained, table, rate, pass).map_err(|e| e.to_string())?;
        for w in [1, 4, 16] {
            let cfg = AcceleratorConfig { group_size: 4, lookahead: w, tiles: 1 };
            let r = simulate_model(trained, &plan, &cfg).map_err(|e| e.to_string())?;
            for l in r.layers.iter().filter(|l| l.sparse) {
                let lp = plan.layer(l.layer).unwrap();
                let ideal =
                    group_by_nnz(&lp.nnz(), 4).iter().map(|g| g.iter().map(|s| s.nnz).max().unwrap()).sum::<usize>();
                ensure(l.consumed_weights == l.active_weights, || format!("layer {}: consumed != active", l.layer))?;
                ensure(l.sparse_cycles == (ideal * l.positions) as u64 + l.stall_cycles, || {
                    format!("layer {}: cycles != ideal + stalls", l.layer)
                })?;
                layers += 1;
            }
        }
    }
    Ok(format!("hand cases exact, 1000 random + {exhaustive} exhaustive chunkings, 300 window sweeps, {layers} layers conserved"))
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9(f: &Fixture, root: &Path) -> Check {
    const CSVS: [&str; 5] = ["metrics.csv", "cycles.csv", "histograms.csv", "k_sweep.csv", "beta_sweep.csv"];
    let dir_a = f.pipeline.output_dir();
    let (_, tb) = run_pipeline(ExperimentConfig::fixture(1), &root.join("b"))?;
    for name in CSVS {
        let a = std::fs::read(dir_a.join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(root.join("b").join(name)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name} differs between identical runs"))?;
    }
    let (pc, tc) = run_pipeline(ExperimentConfig::fixture(2), &root.join("c"))?;
    let logs_a = f.pipeline.verdict_log("benign").map_err(|e| e.to_string())?;
    let logs_c = pc.verdict_log("benign").map_err(|e| e.to_string())?;
    ensure(logs_a.records != logs_c.records, || "verdict logs unchanged by base_seed".into())?;
    let (fa, ca) = cw_rates(&f.pipeline)?;
    let (fc, cc) = cw_rates(&pc)?;
    let mut worst = (fa - fc).abs();
    for ((ka, da), (kc, dc)) in ca.iter().zip(&cc) {
        ensure(ka == kc, || "attack sets differ".into())?;
        worst = worst.max((da - dc).abs());
    }
    let total = f.elapsed + tb + tc;
    let line = format!(
        "csvs identical, verdicts differ, max aggregate shift {:.1} points, runs {:.0}s/{:.0}s/{:.0}s",
        worst * 100.0,
        f.elapsed.as_secs_f64(),
        tb.as_secs_f64(),
        tc.as_secs_f64()
    );
    ensure(worst <= 0.05, || format!("{line}: aggregates moved more than 5 points"))?;
    ensure(total < Duration::from_secs(30 * 60), || format!("{line}: over 30 minutes"))?;
    Ok(line)
}

// ---------------------------------------------------------------- driver

fn report(n: usize, limit: Option<Duration>, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let mut result = f();
    let took = start.elapsed();
    if let (Ok(line), Some(limit)) = (&result, limit) {
        if took > limit {
            result = Err(format!("{line}; took {:.0}s, limit {:.0}s", took.as_secs_f64(), limit.as_secs_f64()));
        }
    }
    match &result {
        Ok(line) => println!("PASS criterion {n}: {line} ({:.1}s)", took.as_secs_f64()),
        Err(line) => println!("FAIL criterion {n}: {line} ({:.1}s)", took.as_secs_f64()),
    }
    result.is_ok()
}

fn main() -> ExitCode {
    let min = |m: u64| Some(Duration::from_secs(60 * m));
    let mut ok = true;
    ok &= report(1, min(1), criterion_1);
    ok &= report(3, None, criterion_3);

    let tmp = tempfile::tempdir().expect("temp dir");
    let fixture = match fixture(&tmp.path().join("a")) {
        Ok(f) => {
            println!("fixture pipeline run: {:.0}s", f.elapsed.as_secs_f64());
            Some(f)
        }
        Err(e) => {
            println!("FAIL fixture pipeline: {e}");
            None
        }
    };
    match &fixture {
        Some(f) => {
            ok &= report(2, min(1), || criterion_2(&f.model));
            ok &= report(4, min(5), || criterion_4(f));
            ok &= report(5, min(10), || criterion_5(f));
            ok &= report(6, min(10), || criterion_6(f));
            ok &= report(7, min(5), || criterion_7(f));
            ok &= report(8, min(2), || criterion_8(&f.model, &f.table));
            ok &= report(9, None, || criterion_9(f, tmp.path()));
        }
        None => {
            for n in [2, 4, 5, 6, 7, 8, 9] {
                println!("FAIL criterion {n}: fixture pipeline did not run");
            }
            ok = false;
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
