use gres3d::autodiff::Tape;
use gres3d::data::{self, GenConfig};
use gres3d::losses;
use gres3d::model::{forward_graph, ModelConfig, ModelParams};
use gres3d::trainer::{train_step, AdamState, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let gen = GenConfig { seed: 11, scene_count: 8, samples_per_scene: 5, val_fraction: 0.0, ..GenConfig::default() };
    let dataset = data::generate_dataset(&gen).unwrap();
    let scene = &dataset.scenes[0];
    let cands = data::expression_candidates(scene, &gen).unwrap();
    let st: Vec<_> = cands.iter().filter(|e| e.target_instance_ids.len() == 1).take(2).collect();
    let zt = cands.iter().find(|e| e.target_instance_ids.is_empty()).unwrap();

    let mcfg = ModelConfig::desk_scale();
    let tcfg = TrainConfig { base_lr: 1e-3, total_steps: 1_000_000, batch_size: 3, seed: 1, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ModelParams::init(&mcfg, &mut rng);
    let mut state = AdamState::new(&params);
    let batch = vec![(scene, st[0]), (scene, st[1]), (scene, zt)];
    for step in 0..401 {
        train_step(&batch, &mut params, &mut state, &tcfg, &mcfg).unwrap();
        if step % 80 == 0 {
            // raw conf logits for sample A and its positive query
            let mut tape = Tape::new();
            let (bound, ids) = params.bind_with_ids(&mut tape);
            let graph = forward_graph(&mut tape, &bound, scene, st[0], &mcfg).unwrap();
            let asg = losses::assign_queries(&graph.query_sources, scene, st[0]).unwrap();
            let logits = tape.values(graph.conf_logits).to_vec();
            let loss = losses::sample_loss(&mut tape, &graph, &bound, scene, st[0], &mcfg, &tcfg.weights).unwrap();
            tape.backward(loss).unwrap();
            let named = params.named();
            let b2_idx = named.iter().position(|(n, _)| n == "conf_b2").unwrap();
            let w2_idx = named.iter().position(|(n, _)| n == "conf_w2").unwrap();
            let g_b2 = tape.grad(ids[b2_idx]).unwrap()[0];
            let w2g = tape.grad(ids[w2_idx]).unwrap();
            let w2_gnorm = w2g.iter().map(|v| v * v).sum::<f64>().sqrt();
            println!(
                "step {step:3}: conf_b2 ={:+.4} grad_b2 {:+.2e} |grad_w2| {:.2e} | logits {:?} pos {:?}",
                params.conf_b2.values()[0], g_b2, w2_gnorm,
                logits.iter().map(|v| format!("{v:+.1}")).collect::<Vec<_>>(),
                asg.l_tgt.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect::<Vec<_>>()
            );
        }
    }
}
