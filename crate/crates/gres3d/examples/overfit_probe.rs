use gres3d::autodiff::Tape;
use gres3d::data::{self, GenConfig};
use gres3d::eval::{evaluate, EvalEntry};
use gres3d::losses::{self, LossWeights};
use gres3d::model::{forward, forward_graph, ModelConfig, ModelParams};
use gres3d::trainer::{poly_lr, train_step, AdamState, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let gen = GenConfig {
        seed: 11,
        scene_count: 8,
        samples_per_scene: 5,
        val_fraction: 0.0,
        ..GenConfig::default()
    };
    let dataset = data::generate_dataset(&gen).unwrap();
    let mcfg = ModelConfig::desk_scale();
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let tcfg = TrainConfig { total_steps: steps, seed: 1, ..TrainConfig::default() };

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut params = ModelParams::init(&mcfg, &mut rng);
    let mut state = AdamState::new(&params);
    let samples = dataset.samples_of(&dataset.manifest.splits.train);
    let mut order: Vec<usize> = Vec::new();
    let t0 = Instant::now();
    for step in 0..tcfg.total_steps {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(samples[order.pop().unwrap()]);
        }
        let loss = train_step(&batch, &mut params, &mut state, &tcfg, &mcfg).unwrap();
        if step % 100 == 0 || step + 1 == tcfg.total_steps {
            // inspect components on one non-zt sample
            let (scene, expr) = samples.iter().find(|(_, e)| !e.target_instance_ids.is_empty()).unwrap();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let graph = forward_graph(&mut tape, &bound, scene, expr, &mcfg).unwrap();
            let labels = gres3d::geometry::gaussian_relevance_labels(scene, &graph.seed_sources, &expr.target_instance_ids, mcfg.alpha, mcfg.sigma).unwrap();
            let qgd = losses::loss_qgd(&mut tape, graph.relevance, &labels).unwrap();
            let asg = losses::assign_queries(&graph.query_sources, scene, expr).unwrap();
            let mask = losses::loss_mask(&mut tape, graph.mask_logits, &asg).unwrap();
            let tgt = losses::loss_tgt(&mut tape, graph.conf_logits, &asg.l_tgt).unwrap();
            let conf: Vec<f64> = tape.values(graph.conf_logits).to_vec();
            let maj = gres3d::geometry::superpoint_majority_instances(scene);
            let on_inst = graph.query_sources.iter().filter(|&&s| maj[s] >= 0).count();
            println!(
                "step {step:4} loss {loss:8.4} | qgd {:.4} mask {:.4} tgt {:.4} | lr {:.2e} | conf[{}] pos {:?} | q_on_inst {on_inst}/8",
                tape.values(qgd)[0], tape.values(mask)[0], tape.values(tgt)[0],
                poly_lr(step, &tcfg).unwrap(),
                conf.iter().map(|c| format!("{c:+.2}")).collect::<Vec<_>>().join(","),
                asg.l_tgt.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect::<Vec<_>>(),
            );
        }
    }
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());

    let entries: Vec<EvalEntry> = samples
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
    println!("miou={:.4} acc025={:.4} acc05={:.4}", report.miou, report.acc_025, report.acc_05);
}
