use gres3d::data::{self, GenConfig};
use gres3d::geometry;

fn main() {
    let gen = GenConfig { seed: 11, scene_count: 8, samples_per_scene: 5, val_fraction: 0.0, ..GenConfig::default() };
    let dataset = data::generate_dataset(&gen).unwrap();
    for (i, scene) in dataset.scenes.iter().enumerate() {
        let centroids = geometry::superpoint_centroids(scene).unwrap();
        let maj = geometry::superpoint_majority_instances(scene);
        let n_inst_cells = maj.iter().filter(|&&m| m >= 0).count();
        let seeds = geometry::fss(&centroids, 16).unwrap();
        let mut covered = vec![false; scene.n_instances()];
        let mut on_inst = 0;
        for &s in &seeds {
            if maj[s] >= 0 {
                on_inst += 1;
                covered[maj[s] as usize] = true;
            }
        }
        println!(
            "scene {i}: N_P={} N_S={} inst_cells={} K={} | seeds on inst {on_inst}/16, instances covered {}/{}",
            scene.n_points(), scene.n_superpoints(), n_inst_cells, scene.n_instances(),
            covered.iter().filter(|&&c| c).count(), scene.n_instances()
        );
    }
}
