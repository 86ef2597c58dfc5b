use gres3d::autodiff::Tape;
use gres3d::data::{self, GenConfig};
use gres3d::losses::{self, LossWeights};
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
    for step in 0..601 {
        train_step(&batch, &mut params, &mut state, &tcfg, &mcfg).unwrap();
        if step % 150 == 0 {
            for (tag, expr) in [("A", st[0]), ("Z", zt)] {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let graph = forward_graph(&mut tape, &bound, scene, expr, &mcfg).unwrap();
                let labels = gres3d::geometry::gaussian_relevance_labels(scene, &graph.seed_sources, &expr.target_instance_ids, mcfg.alpha, mcfg.sigma).unwrap();
                let qgd = losses::loss_qgd(&mut tape, graph.relevance, &labels).unwrap();
                let asg = losses::assign_queries(&graph.query_sources, scene, expr).unwrap();
                let mask = losses::loss_mask(&mut tape, graph.mask_logits, &asg).unwrap();
                let tgt = losses::loss_tgt(&mut tape, graph.conf_logits, &asg.l_tgt).unwrap();
                let pos_words = expr.positive_word_positions();
                let pos_q: Vec<usize> = asg.l_tgt.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(q, _)| q).collect();
                let qta = losses::loss_qta(&mut tape, graph.queries, graph.t, bound.w_q, bound.w_w, &pos_words, &pos_q, mcfg.tau).unwrap();
                println!(
                    "step {step:3} {tag}: qgd {:.3} mask {:.3} tgt {:.3} qta {:.3} | srcs {:?} pos {:?}",
                    tape.values(qgd)[0], tape.values(mask)[0], tape.values(tgt)[0], tape.values(qta)[0],
                    graph.query_sources, pos_q
                );
            }
        }
    }
}
