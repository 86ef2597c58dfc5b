use gres3d::data::{self, GenConfig};
use gres3d::geometry;
use gres3d::model::{forward, ModelConfig};
use gres3d::trainer::{fit, TrainConfig};

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let batch: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let gen = GenConfig { seed: 11, scene_count: 8, samples_per_scene: 5, val_fraction: 0.0, ..GenConfig::default() };
    let dataset = data::generate_dataset(&gen).unwrap();
    let mcfg = ModelConfig::desk_scale();
    let tcfg = TrainConfig { total_steps: steps, batch_size: batch, seed: 1, ..TrainConfig::default() };
    let ckpt = fit(&dataset, &mcfg, &tcfg).unwrap();

    for (si, sample) in dataset.manifest.samples.iter().enumerate().take(8) {
        let scene = &dataset.scenes[sample.scene];
        let expr = &sample.expression;
        let pred = forward(scene, expr, &ckpt.params, &ckpt.model_config).unwrap();
        let maj = geometry::superpoint_majority_instances(scene);
        // per-query: source instance, conf, iou of its raw mask vs each target
        let mut lines = Vec::new();
        for q in 0..pred.n_queries() {
            let home = maj[pred.query_sources[q]];
            let qmask = pred.query_superpoint_mask(q);
            let best: String = expr
                .target_instance_ids
                .iter()
                .map(|&t| {
                    let gt = geometry::instance_superpoint_mask(scene, t).unwrap();
                    let inter = qmask.values.iter().zip(&gt.values).filter(|(a, b)| **a && **b).count();
                    let uni = qmask.values.iter().zip(&gt.values).filter(|(a, b)| **a || **b).count();
                    format!("{:.2}", if uni == 0 { 0.0 } else { inter as f64 / uni as f64 })
                })
                .collect::<Vec<_>>()
                .join("/");
            lines.push(format!("q{q}[h{home} c{:.2} iou {best}]", pred.confidences[q]));
        }
        println!(
            "s{si} {:?} targets {:?}: {}",
            expr.category, expr.target_instance_ids,
            lines.join(" ")
        );
    }
}
