// Deeper probes: grad check at default scale, oracle init, full-batch fit.
use headgate::hardconcrete::GateParams;
use headgate::interventions::*;
use headgate::model::*;
use headgate::numerics::{grad_check, RngStream};
use headgate::tasks::*;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "grad".into());
    let mcfg = ModelConfig::default();
    let model = Transformer::init(&mcfg).unwrap();

    match which.as_str() {
        "grad" => {
            // Gradient check at the DEFAULT model scale, one planted-style entry.
            let dh = mcfg.d_head();
            let mut rng = RngStream::new(3);
            let tokens = ndarray::Array2::from_shape_fn((4, 13), |_| 8 + rng.below(mcfg.vocab - 8));
            let mut mask = ndarray::Array2::from_elem((4, 13), false);
            for b in 0..4 { mask[(b, 12)] = true; }
            let batch = Batch::new(tokens, mask, mcfg.vocab).unwrap();
            let u_a = 0.45; let u_m = 0.55;
            let build = |params: &[f64]| -> (InterventionMap, Vec<GateDraw>) {
                let mut e = HeadEdit::zeros(2, 5, dh, 0.0, &GateParams::default());
                e.gate_a = GateParams::with_phi(params[0]);
                e.gate_m = GateParams::with_phi(params[1]);
                e.m = params[2..2+dh].to_vec();
                e.a = params[2+dh..2+2*dh].to_vec();
                let map = InterventionMap::new(Site::AttentionHead, Gating::Separate, EditMode::Hybrid, dh, GateParams::default(), vec![e]).unwrap();
                let (g_a, dga) = headgate::hardconcrete::sample_gate_with_grad(&map.entries[0].gate_a, u_a).unwrap();
                let (g_m, dgm) = headgate::hardconcrete::sample_gate_with_grad(&map.entries[0].gate_m, u_m).unwrap();
                (map, vec![GateDraw { g_a, g_m, dga_dphi: dga, dgm_dphi: dgm }])
            };
            let mut params = vec![0.3, -0.2];
            let mut prng = RngStream::new(17);
            params.extend((0..2*dh).map(|_| 0.5 * prng.normal()));
            let (map, draws) = build(&params);
            let plan = EditPlan::from_maps(&mcfg, &[&map], &[draws.clone()]).unwrap();
            let (logits, cache) = model.forward_train(&batch, &plan).unwrap();
            let (_, dlogits) = xent_loss_and_grad(&logits, &batch).unwrap();
            let mut grads = zero_grads(&[&map]);
            model.backward(&cache, &plan, &dlogits, &mut grads);
            let g = &grads[0][0];
            let mut analytic = vec![g.dg_a * draws[0].dga_dphi, g.dg_m * draws[0].dgm_dphi];
            analytic.extend_from_slice(&g.dm);
            analytic.extend_from_slice(&g.da);
            let f = |p: &[f64]| -> f64 {
                let (map, draws) = build(p);
                let logits = model.forward(&batch, &[&map], &[draws]).unwrap();
                xent_loss(&logits, &batch).unwrap()
            };
            let rep = grad_check(f, &params, &analytic, 1e-5).unwrap();
            println!("default-scale grad check: max rel err {:.2e} at coord {}", rep.max_rel_err, rep.worst_coord);
        }
        "oracle" => {
            // Init student at the exact teacher; check accuracy and xent.
            let planted = gen_planted_task(&model, &PlantOptions { seed: 42, ..PlantOptions::default() }).unwrap();
            let teacher = planted.teacher_map(mcfg.d_head());
            let acc = accuracy(&model, &[&teacher], &planted.task.val, &planted.task.answer_tokens, 64).unwrap();
            let batch = batch_examples(&planted.task.val[..64], mcfg.vocab).unwrap();
            let logits = model.forward_frozen(&batch, &[&teacher]).unwrap();
            let xent = xent_loss(&logits, &batch).unwrap();
            println!("teacher-as-student: val acc {acc:.3}, val xent {xent:.3}");
            let base_logits = model.forward_base(&batch).unwrap();
            let base_xent = xent_loss(&base_logits, &batch).unwrap();
            println!("base: val xent {base_xent:.3}");
        }
        _ => {
            // Full-batch ungated additive-only fit, lr arg2, epochs arg3.
            let lr0: f64 = std::env::args().nth(2).unwrap().parse().unwrap();
            let epochs: usize = std::env::args().nth(3).unwrap().parse().unwrap();
            let planted = gen_planted_task(&model, &PlantOptions { seed: 42, ..PlantOptions::default() }).unwrap();
            let task = sample_low_resource(&planted.task, 200, 42).unwrap();
            let cfg = headgate::trainer::TrainConfig {
                lambda_sparsity: 0.0, lr0, max_epochs: epochs, patience: epochs,
                batch_size: 200, gating: Gating::None, mode: EditMode::AdditiveOnly,
                ..Default::default()
            };
            let out = headgate::trainer::train(&model, &task, &cfg).unwrap();
            let mut xs = vec![];
            for r in &out.records { if let headgate::trainer::Record::Step(s) = r { xs.push((s.epoch, s.xent)); } }
            print!("full-batch xent:");
            for (e, x) in xs.iter() { if e % 20 == 0 { print!(" {e}:{x:.3}"); } }
            println!();
            println!("dev best acc {:.3} at epoch {}", out.best_val_accuracy, out.best_epoch);
            let planted_set: std::collections::BTreeSet<_> = planted.plant.planted_heads.iter().cloned().collect();
            let mut rows: Vec<_> = out.maps[0].entries.iter().map(|e| {
                let na = e.a.iter().map(|v| v*v).sum::<f64>().sqrt();
                (e.layer, e.head, na)
            }).collect();
            rows.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
            for (l, h, na) in rows.iter().take(8) {
                let mark = if planted_set.contains(&(*l, *h)) { "*" } else { " " };
                println!("  {mark}({l},{h}) |a|={na:.3}");
            }
        }
    }
}
