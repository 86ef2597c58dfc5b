use gres3d::autodiff::Tape;
use gres3d::data::{self, GenConfig};
use gres3d::losses::{self, LossWeights};
use gres3d::model::{forward_graph, ModelConfig, ModelParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let gen = GenConfig { seed: 11, scene_count: 1, val_fraction: 0.0, ..GenConfig::default() };
    let dataset = data::generate_dataset(&gen).unwrap();
    let scene = &dataset.scenes[0];
    let expr = &dataset.manifest.samples.iter().find(|s| s.expression.target_instance_ids.len() >= 2).unwrap().expression;
    let mcfg = ModelConfig::desk_scale();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParams::init(&mcfg, &mut rng);

    let mut tape = Tape::new();
    let (bound, ids) = params.bind_with_ids(&mut tape);
    let graph = forward_graph(&mut tape, &bound, scene, expr, &mcfg).unwrap();

    let ml = tape.values(graph.mask_logits);
    let mean_abs = ml.iter().map(|v| v.abs()).sum::<f64>() / ml.len() as f64;
    let max_abs = ml.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    println!("mask logits: mean|x|={mean_abs:.2} max|x|={max_abs:.2}");
    let r = tape.values(graph.relevance);
    println!("relevance R: {:?}", r.iter().map(|v| format!("{v:+.1}")).collect::<Vec<_>>());
    let q = tape.values(graph.queries);
    let qn: Vec<f64> = (0..mcfg.n_q).map(|i| q[i*mcfg.d..(i+1)*mcfg.d].iter().map(|v| v*v).sum::<f64>().sqrt()).collect();
    println!("query norms: {:?}", qn.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>());

    let loss = losses::sample_loss(&mut tape, &graph, &bound, scene, expr, &mcfg, &LossWeights::default()).unwrap();
    println!("loss={:.4}", tape.values(loss)[0]);
    tape.backward(loss).unwrap();
    let named = params.named();
    for (i, (name, _)) in named.iter().enumerate() {
        let g = tape.grad(ids[i]).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("  grad |{name}| = {norm:.4e}");
    }
}
