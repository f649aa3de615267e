use headgate::model::{ModelConfig, Transformer};
use headgate::tasks::{gen_planted_task, PlantKind, PlantOptions};

fn main() {
    let mcfg = ModelConfig::default();
    let model = Transformer::init(&mcfg).unwrap();
    for kind in [PlantKind::Additive, PlantKind::Multiplicative, PlantKind::Hybrid] {
        for scale in [0.5, 1.0, 2.0, 4.0] {
            let p = gen_planted_task(&model, &PlantOptions {
                seed: 42, kind, offset_scale: scale, n_examples: 400, val_examples: 200, test_examples: 50,
                min_gap: 0.0, ..PlantOptions::default()
            }).unwrap();
            println!("{kind:?} scale={scale}: margin={:.3} base_acc={:.3} change_frac={:.3}",
                p.plant.teacher_margin, p.plant.base_accuracy, p.plant.logit_change_frac);
        }
    }
}
