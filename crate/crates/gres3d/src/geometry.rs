//! Geometric and set-level kernels over point-cloud scenes: superpoint
//! pooling, farthest superpoint sampling, instance masks, Gaussian relevance
//! labels and seed coverage statistics. Everything here is a pure function
//! over immutable inputs.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A colored point cloud with per-point superpoint and instance assignments.
///
/// Superpoint ids must be contiguous `0..n_superpoints` with no empty
/// superpoint; background points carry instance id −1; every other instance
/// id indexes into `instances`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub superpoint_id: Vec<usize>,
    pub instance_id: Vec<i64>,
    pub instances: Vec<Instance>,
}

/// Per-instance metadata: semantic class and point centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub class_id: usize,
    pub center: [f64; 3],
}

/// Binary mask over superpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpointMask {
    pub values: Vec<bool>,
}

impl SuperpointMask {
    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Expands to a per-point mask through superpoint membership.
    pub fn expand_to_points(&self, scene: &SceneCloud) -> Vec<bool> {
        scene.superpoint_id.iter().map(|&sp| self.values[sp]).collect()
    }
}

impl SceneCloud {
    pub fn n_points(&self) -> usize {
        self.positions.len()
    }

    pub fn n_superpoints(&self) -> usize {
        self.superpoint_id.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn n_instances(&self) -> usize {
        self.instances.len()
    }

    /// Checks every structural invariant; call after construction or load.
    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if self.colors.len() != n || self.superpoint_id.len() != n || self.instance_id.len() != n {
            return Err(Error::Structure(format!(
                "per-point arrays disagree: {} positions, {} colors, {} superpoint ids, {} instance ids",
                n,
                self.colors.len(),
                self.superpoint_id.len(),
                self.instance_id.len()
            )));
        }
        if n == 0 {
            return Err(Error::Structure("scene has no points".into()));
        }
        if self
            .colors
            .iter()
            .flatten()
            .any(|&c| !(0.0..=1.0).contains(&c))
        {
            return Err(Error::Structure("color outside [0, 1]".into()));
        }
        let n_sp = self.n_superpoints();
        let mut seen = vec![false; n_sp];
        for &sp in &self.superpoint_id {
            seen[sp] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Structure(format!("superpoint {missing} is empty")));
        }
        for &inst in &self.instance_id {
            if inst < -1 || inst >= self.instances.len() as i64 {
                return Err(Error::Structure(format!(
                    "point references unknown instance {inst}"
                )));
            }
        }
        Ok(())
    }

    /// Point indices per superpoint, in point order.
    pub fn superpoint_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.n_superpoints()];
        for (i, &sp) in self.superpoint_id.iter().enumerate() {
            members[sp].push(i);
        }
        members
    }

    /// Per-point mask for a set of instances (−1 entries never match).
    pub fn instance_point_mask(&self, instances: &[usize]) -> Vec<bool> {
        self.instance_id
            .iter()
            .map(|&id| id >= 0 && instances.contains(&(id as usize)))
            .collect()
    }
}

/// Mean-pools per-point feature rows into per-superpoint rows.
pub fn superpoint_pool(point_features: &Tensor, scene: &SceneCloud) -> Result<Tensor> {
    let shape = point_features.shape();
    if shape.len() != 2 || shape[0] != scene.n_points() {
        return Err(Error::Shape(format!(
            "expected {}xD point features, got {shape:?}",
            scene.n_points()
        )));
    }
    let dim = shape[1];
    let n_sp = scene.n_superpoints();
    let mut counts = vec![0usize; n_sp];
    for &sp in &scene.superpoint_id {
        counts[sp] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Structure(format!("superpoint {empty} is empty")));
    }
    let mut out = vec![0.0; n_sp * dim];
    for (i, &sp) in scene.superpoint_id.iter().enumerate() {
        let row = &point_features.values()[i * dim..(i + 1) * dim];
        for (o, &v) in out[sp * dim..(sp + 1) * dim].iter_mut().zip(row) {
            *o += v;
        }
    }
    for (sp, &c) in counts.iter().enumerate() {
        for o in &mut out[sp * dim..(sp + 1) * dim] {
            *o /= c as f64;
        }
    }
    Tensor::new(&[n_sp, dim], out)
}

/// Mean position of each superpoint's member points.
pub fn superpoint_centroids(scene: &SceneCloud) -> Result<Vec<[f64; 3]>> {
    let flat: Vec<f64> = scene.positions.iter().flatten().copied().collect();
    let pooled = superpoint_pool(&Tensor::new(&[scene.n_points(), 3], flat)?, scene)?;
    Ok(pooled
        .values()
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect())
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Farthest point sampling over superpoint centroids. Starts at index 0;
/// each step picks the centroid with the largest min-distance to the
/// selected set, breaking ties toward the lowest index.
pub fn fss(centroids: &[[f64; 3]], n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > centroids.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {n} of {} centroids",
            centroids.len()
        )));
    }
    let mut selected = Vec::with_capacity(n);
    selected.push(0);
    let mut min_d2: Vec<f64> = centroids.iter().map(|&c| dist2(c, centroids[0])).collect();
    while selected.len() < n {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        selected.push(best);
        for (i, d) in min_d2.iter_mut().enumerate() {
            let nd = dist2(centroids[i], centroids[best]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// The plurality instance of each superpoint (−1 for background), with
/// ties broken toward the smallest id; −1 participates in the vote, so a
/// background tie wins.
pub fn superpoint_majority_instances(scene: &SceneCloud) -> Vec<i64> {
    let n_sp = scene.n_superpoints();
    // counts[sp][k] votes for instance k-1 (slot 0 is background)
    let slots = scene.n_instances() + 1;
    let mut counts = vec![0usize; n_sp * slots];
    for (i, &sp) in scene.superpoint_id.iter().enumerate() {
        let slot = (scene.instance_id[i] + 1) as usize;
        counts[sp * slots + slot] += 1;
    }
    (0..n_sp)
        .map(|sp| {
            let row = &counts[sp * slots..(sp + 1) * slots];
            let mut best_slot = 0;
            let mut best = 0;
            for (slot, &c) in row.iter().enumerate() {
                if c > best {
                    best = c;
                    best_slot = slot;
                }
            }
            best_slot as i64 - 1
        })
        .collect()
}

/// Ground-truth superpoint mask of one instance: a superpoint belongs to
/// the instance iff the instance wins the plurality vote over its member
/// points.
pub fn instance_superpoint_mask(scene: &SceneCloud, instance: usize) -> Result<SuperpointMask> {
    if instance >= scene.n_instances() {
        return Err(Error::InvalidArgument(format!(
            "unknown instance {instance} (scene has {})",
            scene.n_instances()
        )));
    }
    let majority = superpoint_majority_instances(scene);
    Ok(SuperpointMask {
        values: majority.iter().map(|&m| m == instance as i64).collect(),
    })
}

/// Relevance labels for seed queries, one per seed.
///
/// For each mentioned instance, the member seed nearest the instance
/// center gets 1 and the other member seeds decay as
/// `exp(-alpha * d^2 / sigma^2)`; seeds in no mentioned instance stay 0,
/// and a seed claimed by several instances keeps the maximum label.
/// Membership is decided by the seed's source superpoint's plurality
/// instance.
pub fn gaussian_relevance_labels(
    scene: &SceneCloud,
    seed_sources: &[usize],
    mentioned: &[usize],
    alpha: f64,
    sigma: f64,
) -> Result<Vec<f64>> {
    if alpha <= 0.0 || sigma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "alpha and sigma must be positive, got {alpha} and {sigma}"
        )));
    }
    let n_sp = scene.n_superpoints();
    if let Some(&bad) = seed_sources.iter().find(|&&s| s >= n_sp) {
        return Err(Error::InvalidArgument(format!(
            "seed source {bad} out of range for {n_sp} superpoints"
        )));
    }
    let centroids = superpoint_centroids(scene)?;
    let majority = superpoint_majority_instances(scene);
    let mut labels = vec![0.0; seed_sources.len()];
    for &inst in mentioned {
        if inst >= scene.n_instances() {
            return Err(Error::InvalidArgument(format!("unknown instance {inst}")));
        }
        let center = scene.instances[inst].center;
        let members: Vec<(usize, f64)> = seed_sources
            .iter()
            .enumerate()
            .filter(|(_, &src)| majority[src] == inst as i64)
            .map(|(i, &src)| (i, dist2(centroids[src], center)))
            .collect();
        let Some(&(nearest, _)) = members
            .iter()
            .min_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"))
        else {
            continue;
        };
        for &(i, d2) in &members {
            let label = if i == nearest {
                1.0
            } else {
                (-alpha * d2 / (sigma * sigma)).exp()
            };
            if label > labels[i] {
                labels[i] = label;
            }
        }
    }
    Ok(labels)
}

/// Coverage rate and repetition rate of a seed set.
///
/// CR is the fraction of instances containing at least one seed; RR is the
/// fraction of instance-covering seeds that repeat an already covered
/// instance, and 0 when no seed covers any instance.
pub fn coverage_repetition_rates(
    seed_sources: &[usize],
    scene: &SceneCloud,
) -> Result<(f64, f64)> {
    let n_ins = scene.n_instances();
    if n_ins == 0 {
        return Err(Error::InvalidArgument(
            "coverage rate needs at least one instance".into(),
        ));
    }
    let majority = superpoint_majority_instances(scene);
    let mut covered = vec![false; n_ins];
    let mut covering_seeds = 0usize;
    for &src in seed_sources {
        let m = majority[src];
        if m >= 0 {
            covering_seeds += 1;
            covered[m as usize] = true;
        }
    }
    let covered_instances = covered.iter().filter(|&&c| c).count();
    let cr = covered_instances as f64 / n_ins as f64;
    let rr = if covering_seeds == 0 {
        0.0
    } else {
        (covering_seeds - covered_instances) as f64 / covering_seeds as f64
    };
    Ok((cr, rr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Minimal scene: points on a line, configurable grouping.
    fn scene_with(
        positions: Vec<[f64; 3]>,
        superpoint_id: Vec<usize>,
        instance_id: Vec<i64>,
        instances: Vec<Instance>,
    ) -> SceneCloud {
        let n = positions.len();
        let scene = SceneCloud {
            positions,
            colors: vec![[0.5, 0.5, 0.5]; n],
            superpoint_id,
            instance_id,
            instances,
        };
        scene.validate().unwrap();
        scene
    }

    fn instance_at(center: [f64; 3]) -> Instance {
        Instance { class_id: 0, center }
    }

    #[test]
    fn pool_two_points_one_superpoint() {
        let scene = scene_with(
            vec![[0.0; 3], [0.0; 3]],
            vec![0, 0],
            vec![-1, -1],
            vec![],
        );
        let feats = Tensor::new(&[2, 1], vec![1.0, 3.0]).unwrap();
        let pooled = superpoint_pool(&feats, &scene).unwrap();
        assert_eq!(pooled.values(), &[2.0]);
    }

    #[test]
    fn pool_identity_when_singleton_superpoints() {
        let scene = scene_with(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
            vec![0, 1, 2],
            vec![-1, -1, -1],
            vec![],
        );
        let feats = Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let pooled = superpoint_pool(&feats, &scene).unwrap();
        assert_eq!(pooled.values(), feats.values());
    }

    #[test]
    fn centroid_midpoint() {
        let scene = scene_with(
            vec![[0.0; 3], [2.0, 0.0, 0.0]],
            vec![0, 0],
            vec![-1, -1],
            vec![],
        );
        let c = superpoint_centroids(&scene).unwrap();
        assert_eq!(c, vec![[1.0, 0.0, 0.0]]);
    }

    #[test]
    fn fss_picks_far_point_over_near() {
        let centroids = vec![[0.0; 3], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        assert_eq!(fss(&centroids, 2).unwrap(), vec![0, 2]);
    }

    #[test]
    fn fss_square_corner_picks_diagonal() {
        let corners = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ];
        assert_eq!(fss(&corners, 2).unwrap(), vec![0, 2]);
    }

    #[test]
    fn fss_exhausts_to_permutation() {
        let centroids = vec![
            [0.0; 3],
            [3.0, 1.0, 0.0],
            [1.0, 4.0, 2.0],
            [5.0, 5.0, 5.0],
            [2.0, 2.0, 2.0],
        ];
        let mut picks = fss(&centroids, 5).unwrap();
        picks.sort_unstable();
        assert_eq!(picks, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fss_rejects_bad_counts() {
        let centroids = vec![[0.0; 3], [1.0, 0.0, 0.0]];
        assert!(fss(&centroids, 0).is_err());
        assert!(fss(&centroids, 3).is_err());
    }

    #[test]
    fn instance_mask_majority_rules() {
        // superpoint 0 fully in instance 0, superpoint 1 fully background,
        // superpoint 2 is a 3:2 split toward instance 1
        let scene = scene_with(
            vec![[0.0; 3]; 9],
            vec![0, 0, 1, 1, 2, 2, 2, 2, 2],
            vec![0, 0, -1, -1, 1, 1, 1, 0, 0],
            vec![instance_at([0.0; 3]), instance_at([1.0, 0.0, 0.0])],
        );
        let m0 = instance_superpoint_mask(&scene, 0).unwrap();
        assert_eq!(m0.values, vec![true, false, false]);
        let m1 = instance_superpoint_mask(&scene, 1).unwrap();
        assert_eq!(m1.values, vec![false, false, true]);
        assert!(instance_superpoint_mask(&scene, 2).is_err());
    }

    #[test]
    fn instance_mask_tie_goes_to_smallest_id() {
        let scene = scene_with(
            vec![[0.0; 3]; 2],
            vec![0, 0],
            vec![0, 1],
            vec![instance_at([0.0; 3]), instance_at([1.0, 0.0, 0.0])],
        );
        assert_eq!(
            instance_superpoint_mask(&scene, 0).unwrap().values,
            vec![true]
        );
        assert_eq!(
            instance_superpoint_mask(&scene, 1).unwrap().values,
            vec![false]
        );
    }

    /// Three singleton-superpoint seeds inside instance 0 at distances
    /// 0.0, 1.0, 2.0 from its center, plus one background seed.
    fn label_scene() -> SceneCloud {
        scene_with(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [9.0, 0.0, 0.0],
            ],
            vec![0, 1, 2, 3],
            vec![0, 0, 0, -1],
            vec![instance_at([0.0, 0.0, 0.0])],
        )
    }

    #[test]
    fn gaussian_labels_match_closed_form() {
        let scene = label_scene();
        let labels =
            gaussian_relevance_labels(&scene, &[0, 1, 2, 3], &[0], 1.0, 1.0).unwrap();
        assert_eq!(labels[0], 1.0);
        assert!((labels[1] - (-1.0f64).exp()).abs() < 1e-12);
        assert!((labels[2] - (-4.0f64).exp()).abs() < 1e-12);
        assert_eq!(labels[3], 0.0);
    }

    #[test]
    fn gaussian_labels_empty_mention_is_all_zero() {
        let scene = label_scene();
        let labels = gaussian_relevance_labels(&scene, &[0, 1, 2, 3], &[], 1.0, 1.0).unwrap();
        assert!(labels.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn coverage_full_and_repetition_formula() {
        // one instance, three seeds inside it, one background seed
        let scene = label_scene();
        let (cr, rr) = coverage_repetition_rates(&[0, 1, 2, 3], &scene).unwrap();
        assert_eq!(cr, 1.0);
        assert!((rr - 2.0 / 3.0).abs() < 1e-15);
        let (cr0, rr0) = coverage_repetition_rates(&[3], &scene).unwrap();
        assert_eq!((cr0, rr0), (0.0, 0.0));
    }

    // --- oracles -----------------------------------------------------

    /// Quadratic-time reference FPS used to pin down the fast path.
    pub(crate) fn fps_oracle(centroids: &[[f64; 3]], n: usize) -> Vec<usize> {
        let mut selected = vec![0usize];
        while selected.len() < n {
            let mut best = 0;
            let mut best_d = f64::NEG_INFINITY;
            for i in 0..centroids.len() {
                let d = selected
                    .iter()
                    .map(|&s| dist2(centroids[i], centroids[s]))
                    .fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = i;
                }
            }
            selected.push(best);
        }
        selected
    }

    proptest! {
        #[test]
        fn pool_matches_bruteforce_grouping(values in proptest::collection::vec(-10.0f64..10.0, 100)) {
            let n_sp = 7;
            let superpoint_id: Vec<usize> = (0..100).map(|i| i % n_sp).collect();
            let scene = scene_with(
                (0..100).map(|i| [i as f64, 0.0, 0.0]).collect(),
                superpoint_id.clone(),
                vec![-1; 100],
                vec![],
            );
            let feats = Tensor::new(&[100, 1], values.clone()).unwrap();
            let pooled = superpoint_pool(&feats, &scene).unwrap();
            for sp in 0..n_sp {
                let group: Vec<f64> = (0..100).filter(|&i| superpoint_id[i] == sp).map(|i| values[i]).collect();
                let mean = group.iter().sum::<f64>() / group.len() as f64;
                prop_assert!((pooled.values()[sp] - mean).abs() < 1e-12);
            }
        }

        #[test]
        fn fss_matches_oracle(points in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0), 1..64)) {
            let centroids: Vec<[f64; 3]> = points.iter().map(|&(x, y, z)| [x, y, z]).collect();
            let n = centroids.len();
            let got = fss(&centroids, n).unwrap();
            prop_assert_eq!(&got, &fps_oracle(&centroids, n));
            let mut dedup = got.clone();
            dedup.sort_unstable();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), n);
        }

        #[test]
        fn gaussian_labels_bounded_with_one_peak(seed_count in 1usize..8) {
            // singleton superpoints strung along a line, all in instance 0
            let n = seed_count + 1;
            let scene = scene_with(
                (0..n).map(|i| [i as f64 * 0.5, 0.0, 0.0]).collect(),
                (0..n).collect(),
                (0..n).map(|i| if i < seed_count { 0 } else { -1 }).collect(),
                vec![instance_at([0.7, 0.0, 0.0])],
            );
            let sources: Vec<usize> = (0..n).collect();
            let labels = gaussian_relevance_labels(&scene, &sources, &[0], 1.3, 0.9).unwrap();
            prop_assert!(labels.iter().all(|&l| (0.0..=1.0).contains(&l)));
            prop_assert_eq!(labels.iter().filter(|&&l| l == 1.0).count(), 1);
        }

        #[test]
        fn duplicate_seed_in_covered_instance_keeps_cr_and_rr_monotone(extra in 0usize..3) {
            let scene = label_scene();
            let base = vec![0usize, 3];
            let (cr0, rr0) = coverage_repetition_rates(&base, &scene).unwrap();
            let mut more = base.clone();
            for _ in 0..=extra {
                more.push(1); // seed 1 lies in the already covered instance
            }
            let (cr1, rr1) = coverage_repetition_rates(&more, &scene).unwrap();
            prop_assert_eq!(cr0, cr1);
            prop_assert!(rr1 >= rr0);
            prop_assert!((0.0..=1.0).contains(&cr1) && (0.0..=1.0).contains(&rr1));
        }
    }
}
