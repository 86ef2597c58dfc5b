use gres3d::data::{self, GenConfig};
use gres3d::eval::{evaluate, EvalEntry};
use gres3d::model::{forward, ModelConfig};
use gres3d::trainer::{train_step, AdamState, TrainConfig};
use gres3d::model::ModelParams;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let n_samples: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let steps: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(600);
    let gen = GenConfig { seed: 11, scene_count: 8, samples_per_scene: 5, val_fraction: 0.0, ..GenConfig::default() };
    let dataset = data::generate_dataset(&gen).unwrap();
    let mcfg = ModelConfig::desk_scale();
    let tcfg = TrainConfig { base_lr: lr, total_steps: 1_000_000, batch_size: 8.min(n_samples), seed: 1, ..TrainConfig::default() };
    let all = dataset.samples_of(&dataset.manifest.splits.train);
    let subset: Vec<_> = all.into_iter().take(n_samples).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ModelParams::init(&mcfg, &mut rng);
    let mut state = AdamState::new(&params);
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            if order.is_empty() {
                order = (0..subset.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(subset[order.pop().unwrap()]);
        }
        train_step(&batch, &mut params, &mut state, &tcfg, &mcfg).unwrap();
    }
    let entries: Vec<EvalEntry> = subset
        .iter()
        .map(|&(scene, expr)| {
            let prediction = forward(scene, expr, &params, &mcfg).unwrap();
            EvalEntry {
                prediction,
                gt_point_mask: scene.instance_point_mask(&expr.target_instance_ids),
                gt_empty: expr.target_instance_ids.is_empty(),
                category: expr.category,
            }
        })
        .collect();
    let report = evaluate(&entries).unwrap();
    println!("n={n_samples} lr={lr} steps={steps}: miou={:.4} acc05={:.4}", report.miou, report.acc_05);
}
