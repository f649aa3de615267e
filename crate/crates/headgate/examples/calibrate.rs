// Scratch calibration harness (not part of the deliverable test suite).
use headgate::interventions::prune;
use headgate::model::{ModelConfig, Transformer};
use headgate::tasks::{accuracy, gen_planted_task, sample_low_resource, PlantKind, PlantOptions};
use headgate::trainer::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr0: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.02);
    let max_epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(100);
    let lambda: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(42);
    let patience: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(5);
    let gating = match args.get(6).map(|s| s.as_str()).unwrap_or("separate") {
        "none" => headgate::interventions::Gating::None,
        "shared" => headgate::interventions::Gating::Shared,
        _ => headgate::interventions::Gating::Separate,
    };
    let mode = match args.get(7).map(|s| s.as_str()).unwrap_or("hybrid") {
        "add" => headgate::interventions::EditMode::AdditiveOnly,
        "mul" => headgate::interventions::EditMode::MultiplicativeOnly,
        _ => headgate::interventions::EditMode::Hybrid,
    };

    let mcfg = ModelConfig::default();
    let model = Transformer::init(&mcfg).unwrap();
    let scale: f64 = args.get(8).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let planted = gen_planted_task(&model, &PlantOptions { seed: 42, kind: PlantKind::Additive, offset_scale: scale, ..PlantOptions::default() }).unwrap();
    eprintln!("task: base_acc={:.3} margin={:.3} scale_used={}", planted.plant.base_accuracy, planted.plant.teacher_margin, planted.plant.offset_scale_used);
    let task = sample_low_resource(&planted.task, 200, 42).unwrap();

    let cfg = TrainConfig {
        lambda_sparsity: lambda, lr0, max_epochs, patience, seed, gating, mode,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train(&model, &task, &cfg).unwrap();
    let dt = t0.elapsed();

    // Per-epoch dev accuracy + step stats
    let mut evals = vec![];
    let mut steps = vec![];
    for r in &out.records {
        match r {
            Record::Eval(e) => evals.push(e.clone()),
            Record::Step(s) => steps.push(s.clone()),
        }
    }
    eprint!("dev acc by epoch:");
    for (i, e) in evals.iter().enumerate() {
        if i % 5 == 0 || i + 1 == evals.len() { eprint!(" {}:{:.2}", i, e.accuracy); }
    }
    eprintln!();
    eprint!("xent by epoch:");
    for (i, s) in steps.iter().enumerate() {
        if i % 50 == 0 || i + 1 == steps.len() { eprint!(" {}:{:.3}", s.epoch, s.xent); }
    }
    eprintln!();

    let planted_set: std::collections::BTreeSet<_> = planted.plant.planted_heads.iter().cloned().collect();
    // Final-state map (not best): print per-head phi_a and |a| for planted & top non-planted
    eprintln!("best-snapshot head stats (layer,head, phi_a, phi_m, |a|, |m|):");
    let mut rows: Vec<_> = out.maps[0].entries.iter().map(|e| {
        let na = e.a.iter().map(|v| v*v).sum::<f64>().sqrt();
        let nm = e.m.iter().map(|v| v*v).sum::<f64>().sqrt();
        (e.layer, e.head, e.gate_a.phi, e.gate_m.phi, na, nm)
    }).collect();
    rows.sort_by(|a, b| b.4.partial_cmp(&a.4).unwrap());
    for (l, h, pa, pm, na, nm) in rows.iter().take(10) {
        let mark = if planted_set.contains(&(*l, *h)) { "*" } else { " " };
        eprintln!("  {mark}({l},{h}) phi_a={pa:+.2} phi_m={pm:+.2} |a|={na:.3} |m|={nm:.3}");
    }

    let frozen = &out.frozen[0];
    let pruned = prune(frozen, cfg.epsilon_prune);
    let open_a = pruned.open_additive_heads(cfg.epsilon_prune);
    let open_set: std::collections::BTreeSet<_> = open_a.iter().cloned().collect();
    let overlap = planted_set.intersection(&open_set).count();
    let val_acc = accuracy(&model, &[&pruned], &planted.task.val, &planted.task.answer_tokens, 64).unwrap();
    println!("lr0={lr0} epochs={max_epochs} lambda={lambda} seed={seed}: {:.0?} ({} steps, best epoch {} of {}), dev_acc={:.3} heldout_acc={:.3} open={} overlap={}/4",
        dt, out.steps_run, out.best_epoch, out.epochs_run, out.best_val_accuracy, val_acc, open_a.len(), overlap);
}
