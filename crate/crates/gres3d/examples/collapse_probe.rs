use gres3d::autodiff::Tape;
use gres3d::data::{self, GenConfig};
use gres3d::geometry;
use gres3d::model::{encode_points, embed_text, qla_layer, qsa_layer, tsq_select, ModelConfig, ModelParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spread(vals: &[f64], rows: usize, cols: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..cols {
        let col: Vec<f64> = (0..rows).map(|r| vals[r * cols + c]).collect();
        let mean = col.iter().sum::<f64>() / rows as f64;
        total += (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64).sqrt();
    }
    total / cols as f64
}

fn main() {
    let gen = GenConfig { seed: 11, scene_count: 1, val_fraction: 0.0, ..GenConfig::default() };
    let dataset = data::generate_dataset(&gen).unwrap();
    let scene = &dataset.scenes[0];
    let expr = &dataset.manifest.samples.iter().find(|s| !s.expression.target_instance_ids.is_empty()).unwrap().expression;
    let mcfg = ModelConfig::desk_scale();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParams::init(&mcfg, &mut rng);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let s = encode_points(&mut tape, &bound, scene).unwrap();
    let t = embed_text(&mut tape, &bound, expr, &mcfg).unwrap();
    let centroids = geometry::superpoint_centroids(scene).unwrap();
    let sel = tsq_select(&mut tape, s, &centroids, t, &mcfg).unwrap();
    let n_s = scene.n_superpoints();

    let sv = tape.values(s);
    let norms: Vec<f64> = (0..n_s).map(|i| sv[i*mcfg.d..(i+1)*mcfg.d].iter().map(|v| v*v).sum::<f64>().sqrt()).collect();
    let mut sorted = norms.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    println!("|s| norms: min={:.2} median={:.2} max={:.2} spread={:.3}", sorted[0], sorted[n_s/2], sorted[n_s-1], spread(sv, n_s, mcfg.d));

    let mut q = sel.queries;
    let mut own: Vec<usize> = sel.query_sources.clone();
    for (li, layer) in bound.layers.iter().enumerate() {
        let (q_s, attn) = qsa_layer(&mut tape, q, s, layer, mcfg.d).unwrap();
        let a = tape.values(attn);
        let mut own_w = 0.0;
        let mut max_w = 0.0;
        for qi in 0..mcfg.n_q {
            let row = &a[qi*n_s..(qi+1)*n_s];
            own_w += row[own[qi]];
            max_w += row.iter().fold(0.0f64, |m, &v| m.max(v));
        }
        let (fused, _, _) = qla_layer(&mut tape, q_s, t, layer, mcfg.d).unwrap();
        println!(
            "layer {li}: own-w={:.3} max-w={:.3} q_s spread={:.4} fused spread={:.4}",
            own_w / mcfg.n_q as f64, max_w / mcfg.n_q as f64,
            spread(tape.values(q_s), mcfg.n_q, mcfg.d),
            spread(tape.values(fused), mcfg.n_q, mcfg.d),
        );
        q = fused;
        own = own.clone();
    }
}
