use gres3d::data::{self, GenConfig};
use gres3d::losses::LossWeights;
use gres3d::model::{forward, ModelConfig, ModelParams};
use gres3d::trainer::{train_step, AdamState, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let gen = GenConfig { seed: 11, scene_count: 1, val_fraction: 0.0, ..GenConfig::default() };
    let dataset = data::generate_dataset(&gen).unwrap();
    let scene = &dataset.scenes[0];
    let expr = &dataset.manifest.samples.iter().find(|s| s.expression.target_instance_ids.len() == 1).unwrap().expression;
    let mcfg = ModelConfig::desk_scale();
    // constant-lr regime: huge total_steps keeps the poly factor near 1
    let tcfg = TrainConfig { base_lr: 1e-3, total_steps: 1_000_000, seed: 1, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ModelParams::init(&mcfg, &mut rng);
    let mut state = AdamState::new(&params);
    for step in 0..401 {
        let loss = train_step(&[(scene, expr)], &mut params, &mut state, &tcfg, &mcfg).unwrap();
        if step % 50 == 0 {
            let pred = forward(scene, expr, &params, &mcfg).unwrap();
            let gt = scene.instance_point_mask(&expr.target_instance_ids);
            let iou = gres3d::eval::sample_iou(&pred, &gt, false).unwrap();
            println!("step {step:4} loss {loss:8.4} iou {iou:.3} conf {:?}",
                pred.confidences.iter().map(|c| format!("{c:.2}")).collect::<Vec<_>>());
        }
    }
}
