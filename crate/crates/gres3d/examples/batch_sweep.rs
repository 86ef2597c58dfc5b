use gres3d::data::{self, GenConfig};
use gres3d::eval::{evaluate, EvalEntry};
use gres3d::model::{forward, ModelConfig};
use gres3d::trainer::{fit, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let batch: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let gen = GenConfig { seed: 11, scene_count: 8, samples_per_scene: 5, val_fraction: 0.0, ..GenConfig::default() };
    let dataset = data::generate_dataset(&gen).unwrap();
    let mcfg = ModelConfig::desk_scale();
    let tcfg = TrainConfig { total_steps: steps, batch_size: batch, seed, ..TrainConfig::default() };
    let t0 = Instant::now();
    let ckpt = fit(&dataset, &mcfg, &tcfg).unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    let entries: Vec<EvalEntry> = dataset
        .samples_of(&dataset.manifest.splits.train)
        .into_iter()
        .map(|(scene, expr)| {
            let prediction = forward(scene, expr, &ckpt.params, &ckpt.model_config).unwrap();
            EvalEntry {
                prediction,
                gt_point_mask: scene.instance_point_mask(&expr.target_instance_ids),
                gt_empty: expr.target_instance_ids.is_empty(),
                category: expr.category,
            }
        })
        .collect();
    let report = evaluate(&entries).unwrap();
    let zt_count = report.per_category.zt_dis.count + report.per_category.zt_nodis.count;
    let zt_acc = (report.per_category.zt_dis.acc_05 * report.per_category.zt_dis.count as f64
        + report.per_category.zt_nodis.acc_05 * report.per_category.zt_nodis.count as f64)
        / zt_count as f64;
    println!(
        "batch={batch} steps={steps} seed={seed}: miou={:.4} acc05={:.4} zt_acc={:.4} ({train_time:.0}s)",
        report.miou, report.acc_05, zt_acc
    );
}
