use gres3d::data::{self, GenConfig};
use gres3d::model::{forward, ModelConfig, ModelParams};
use gres3d::trainer::{train_step, AdamState, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let gen = GenConfig { seed: 11, scene_count: 8, samples_per_scene: 5, val_fraction: 0.0, ..GenConfig::default() };
    let dataset = data::generate_dataset(&gen).unwrap();
    let scene = &dataset.scenes[0];
    // two expressions over the same scene with different single targets,
    // plus one zero-target expression
    let cands = data::expression_candidates(scene, &gen).unwrap();
    let st: Vec<_> = cands.iter().filter(|e| e.target_instance_ids.len() == 1).take(2).collect();
    let zt = cands.iter().find(|e| e.target_instance_ids.is_empty()).unwrap();
    println!("targets: {:?} vs {:?}", st[0].target_instance_ids, st[1].target_instance_ids);

    let mcfg = ModelConfig::desk_scale();
    let tcfg = TrainConfig { base_lr: 1e-3, total_steps: 1_000_000, batch_size: 3, seed: 1, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ModelParams::init(&mcfg, &mut rng);
    let mut state = AdamState::new(&params);
    let batch = vec![(scene, st[0]), (scene, st[1]), (scene, zt)];
    for step in 0..601 {
        let loss = train_step(&batch, &mut params, &mut state, &tcfg, &mcfg).unwrap();
        if step % 100 == 0 {
            let mut line = format!("step {step:4} loss {loss:8.4}");
            for (tag, expr) in [("A", st[0]), ("B", st[1]), ("Z", zt)] {
                let pred = forward(scene, expr, &params, &mcfg).unwrap();
                let gt = scene.instance_point_mask(&expr.target_instance_ids);
                let iou = gres3d::eval::sample_iou(&pred, &gt, expr.target_instance_ids.is_empty()).unwrap();
                line += &format!(" | {tag} iou {iou:.2} conf[{}]", pred.confidences.iter().map(|c| format!("{c:.1}")).collect::<Vec<_>>().join(","));
            }
            println!("{line}");
        }
    }
}
