// Xent along the ray from zero-init toward the exact teacher edits.
use headgate::hardconcrete::GateParams;
use headgate::interventions::*;
use headgate::model::*;
use headgate::tasks::*;

fn main() {
    let bias: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(7.0);
    let nfav: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let mcfg = ModelConfig { favored_bias: bias, n_favored: nfav, ..ModelConfig::default() };
    let model = Transformer::init(&mcfg).unwrap();
    let planted = gen_planted_task(&model, &PlantOptions { seed: 42, ..PlantOptions::default() }).unwrap();
    let task = sample_low_resource(&planted.task, 200, 42).unwrap();
    let batch = batch_examples(&task.train, mcfg.vocab).unwrap();
    let dh = mcfg.d_head();

    // Student map = eps * teacher offsets on the planted heads, ungated.
    let acc_of = |eps: f64| -> (f64, f64) {
        let entries: Vec<FrozenEdit> = planted.plant.planted_heads.iter().enumerate().map(|(i, &(l, h))| FrozenEdit {
            layer: l, head: h, g_a: 1.0, g_m: 0.0,
            a: planted.plant.offsets_a[i].iter().map(|v| v * eps).collect(),
            m: vec![0.0; dh],
        }).collect();
        let fm = FrozenMap { site: Site::AttentionHead, d_head: dh, epsilon: 0.0, entries };
        let logits = model.forward_frozen(&batch, &[&fm]).unwrap();
        let xent = xent_loss(&logits, &batch).unwrap();
        let acc = accuracy(&model, &[&fm], &task.train, &task.answer_tokens, 200).unwrap();
        (xent, acc)
    };
    println!("eps: train_xent train_acc");
    for eps in [0.0, 0.1, 0.25, 0.5, 0.75, 1.0, 1.25] {
        let (x, a) = acc_of(eps);
        println!("  {eps:>4}: {x:.4} {a:.3}");
    }
    let _ = GateParams::default();
}
