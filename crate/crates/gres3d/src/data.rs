//! Synthetic scene and expression generation, plus the on-disk dataset
//! format. Scenes are colored axis-aligned boxes on a floor; expressions
//! come from a small template grammar over a fixed vocabulary, with
//! component position labels known by construction. Everything is a pure
//! function of the generation config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Instance, SceneCloud};
use crate::model::{Category, Expression};

pub const FORMAT_VERSION: u32 = 1;

/// Fixed token vocabulary for the synthetic expression grammar.
pub const VOCAB: &[&str] = &[
    "the", "a", "an", "every", "all", "this", "that", "which", "it", "is",
    "are", "near", "beside", "far", "from", "left", "right", "corner",
    "center", "room", "floor", "red", "green", "blue", "yellow", "white",
    "gray", "big", "small", "tall", "short", "wide", "box", "chair",
    "table", "lamp", "ball", "sofa", "shelf", "plant", "crate", "stool",
    "desk", "bin", "nothing", "there", "find", "object",
];

pub const VOCAB_SIZE: usize = VOCAB.len();

/// Maximum tokens per expression accepted by the format.
pub const MAX_TOKENS: usize = 80;

/// Color palette instances are painted with; names must stay in `VOCAB`.
const PALETTE: &[(&str, [f64; 3])] = &[
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.75, 0.20]),
    ("blue", [0.20, 0.30, 0.85]),
    ("yellow", [0.90, 0.85, 0.20]),
    ("white", [0.92, 0.92, 0.92]),
    ("gray", [0.50, 0.50, 0.50]),
];

fn token_id(word: &str) -> usize {
    VOCAB
        .iter()
        .position(|&w| w == word)
        .unwrap_or_else(|| panic!("word {word:?} missing from vocabulary"))
}

/// Mix proportions of the five sample categories; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CategoryMix {
    pub zt_dis: f64,
    pub zt_nodis: f64,
    pub st_dis: f64,
    pub st_nodis: f64,
    pub mt: f64,
}

impl Default for CategoryMix {
    fn default() -> Self {
        CategoryMix {
            zt_dis: 0.15,
            zt_nodis: 0.15,
            st_dis: 0.20,
            st_nodis: 0.20,
            mt: 0.30,
        }
    }
}

impl CategoryMix {
    pub fn proportion(&self, cat: Category) -> f64 {
        match cat {
            Category::ZtDis => self.zt_dis,
            Category::ZtNodis => self.zt_nodis,
            Category::StDis => self.st_dis,
            Category::StNodis => self.st_nodis,
            Category::Mt => self.mt,
        }
    }
}

/// Scene and sample generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub scene_count: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    /// Class vocabulary; the last class is never placed, so expressions
    /// about it are guaranteed zero-target.
    pub classes: Vec<String>,
    pub points_per_instance_min: usize,
    pub points_per_instance_max: usize,
    /// Room extent in meters (x, y).
    pub room_extent: [f64; 2],
    /// Spatial grid pitch for superpoint construction (meters).
    pub superpoint_pitch: f64,
    pub floor_points: usize,
    pub samples_per_scene: usize,
    pub val_fraction: f64,
    pub category_mix: CategoryMix,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            scene_count: 8,
            instances_min: 4,
            instances_max: 6,
            classes: vec![
                "box".into(),
                "chair".into(),
                "table".into(),
                "lamp".into(),
                "ball".into(),
                "sofa".into(),
            ],
            points_per_instance_min: 60,
            points_per_instance_max: 120,
            room_extent: [7.0, 7.0],
            superpoint_pitch: 1.2,
            floor_points: 70,
            samples_per_scene: 5,
            val_fraction: 0.2,
            category_mix: CategoryMix::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let mix = &self.category_mix;
        let sum = mix.zt_dis + mix.zt_nodis + mix.st_dis + mix.st_nodis + mix.mt;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "category mix must sum to 1, got {sum}"
            )));
        }
        if [mix.zt_dis, mix.zt_nodis, mix.st_dis, mix.st_nodis, mix.mt]
            .iter()
            .any(|&p| p < 0.0)
        {
            return Err(Error::InvalidArgument("category mix has a negative entry".into()));
        }
        if self.scene_count == 0 || self.samples_per_scene == 0 {
            return Err(Error::InvalidArgument(
                "scene_count and samples_per_scene must be positive".into(),
            ));
        }
        if self.instances_min < 3 || self.instances_min > self.instances_max {
            return Err(Error::InvalidArgument(
                "need instances_min >= 3 and instances_min <= instances_max".into(),
            ));
        }
        if self.classes.len() < 4 {
            return Err(Error::InvalidArgument(
                "need at least 4 classes (two placed, one singleton, one absent)".into(),
            ));
        }
        for class in &self.classes {
            if !VOCAB.contains(&class.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "class {class:?} is not in the vocabulary"
                )));
            }
        }
        if self.points_per_instance_min == 0
            || self.points_per_instance_min > self.points_per_instance_max
        {
            return Err(Error::InvalidArgument("bad points-per-instance range".into()));
        }
        if self.room_extent.iter().any(|&e| e <= 2.0) {
            return Err(Error::InvalidArgument("room extent must exceed 2 m".into()));
        }
        if self.superpoint_pitch <= 0.0 {
            return Err(Error::InvalidArgument("superpoint pitch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument("val_fraction must lie in [0, 1)".into()));
        }
        if self.floor_points == 0 {
            return Err(Error::InvalidArgument("floor_points must be positive".into()));
        }
        Ok(())
    }
}

fn scene_rng(seed: u64, index: usize, salt: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&(index as u64).to_le_bytes());
    bytes[16..24].copy_from_slice(&salt.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

/// Axis-aligned footprint of one generated instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class_id: usize,
    pub color_id: usize,
}

fn boxes_overlap_xy(a: &InstanceBox, b: &InstanceBox, margin: f64) -> bool {
    a.min[0] - margin < b.max[0]
        && b.min[0] - margin < a.max[0]
        && a.min[1] - margin < b.max[1]
        && b.min[1] - margin < a.max[1]
}

/// Generates one scene and returns the instance layout alongside it.
pub fn generate_scene_with_layout(
    cfg: &GenConfig,
    index: usize,
) -> Result<(SceneCloud, Vec<InstanceBox>)> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index, 0x5ce9e);
    let k = rng.gen_range(cfg.instances_min..=cfg.instances_max);
    let n_classes = cfg.classes.len();

    // Fixed structure per scene: class 0 appears at least twice with the
    // first two palette colors, class 1 is a singleton, and the last class
    // is never placed. Extra instances avoid both reserved roles; extras of
    // class 0 avoid the first two colors so (class 0, color 0) stays a
    // unique reference.
    let mut class_color: Vec<(usize, usize)> = vec![(0, 0), (0, 1)];
    class_color.push((1, rng.gen_range(0..PALETTE.len())));
    for _ in 3..k {
        let class = loop {
            let c = rng.gen_range(0..n_classes - 1);
            if c != 1 {
                break c;
            }
        };
        let color = if class == 0 {
            rng.gen_range(2..PALETTE.len())
        } else {
            rng.gen_range(0..PALETTE.len())
        };
        class_color.push((class, color));
    }

    // place boxes without overlap
    let mut boxes: Vec<InstanceBox> = Vec::with_capacity(k);
    for &(class_id, color_id) in &class_color {
        let mut placed = false;
        for _attempt in 0..400 {
            let sx = rng.gen_range(0.5..1.1);
            let sy = rng.gen_range(0.5..1.1);
            let sz = rng.gen_range(0.8..1.6);
            let x0 = rng.gen_range(0.2..cfg.room_extent[0] - sx - 0.2);
            let y0 = rng.gen_range(0.2..cfg.room_extent[1] - sy - 0.2);
            // boxes float at shelf height: each instance is a z-isolated
            // cluster, so farthest sampling reliably seeds every one
            let z0 = rng.gen_range(0.8..2.0);
            let candidate = InstanceBox {
                min: [x0, y0, z0],
                max: [x0 + sx, y0 + sy, z0 + sz],
                class_id,
                color_id,
            };
            // generous margin keeps every instance an isolated cluster
            if boxes.iter().all(|b| !boxes_overlap_xy(b, &candidate, 0.9)) {
                boxes.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place instance {} of scene {index} without overlap",
                boxes.len()
            )));
        }
    }

    let mut positions = Vec::new();
    let mut colors = Vec::new();
    let mut instance_id: Vec<i64> = Vec::new();
    for (inst, b) in boxes.iter().enumerate() {
        let n = rng.gen_range(cfg.points_per_instance_min..=cfg.points_per_instance_max);
        let base = PALETTE[b.color_id].1;
        for _ in 0..n {
            positions.push([
                rng.gen_range(b.min[0]..b.max[0]),
                rng.gen_range(b.min[1]..b.max[1]),
                rng.gen_range(b.min[2]..b.max[2]),
            ]);
            colors.push([
                (base[0] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0),
                (base[1] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0),
                (base[2] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0),
            ]);
            instance_id.push(inst as i64);
        }
    }
    for _ in 0..cfg.floor_points {
        positions.push([
            rng.gen_range(0.0..cfg.room_extent[0]),
            rng.gen_range(0.0..cfg.room_extent[1]),
            rng.gen_range(0.0..0.02),
        ]);
        colors.push([
            (0.45 + rng.gen_range(-0.05..0.05f64)).clamp(0.0, 1.0),
            (0.35 + rng.gen_range(-0.05..0.05f64)).clamp(0.0, 1.0),
            (0.25 + rng.gen_range(-0.05..0.05f64)).clamp(0.0, 1.0),
        ]);
        instance_id.push(-1);
    }

    // superpoints: grid cells split by instance identity so no superpoint
    // ever straddles an instance boundary
    let pitch = cfg.superpoint_pitch;
    let mut cell_ids: BTreeMap<(i64, i64, i64, i64), usize> = BTreeMap::new();
    for (p, &inst) in positions.iter().zip(&instance_id) {
        let key = (
            inst,
            (p[0] / pitch).floor() as i64,
            (p[1] / pitch).floor() as i64,
            (p[2] / pitch).floor() as i64,
        );
        cell_ids.entry(key).or_insert(0);
    }
    for (rank, (_, id)) in cell_ids.iter_mut().enumerate() {
        *id = rank;
    }
    let superpoint_id: Vec<usize> = positions
        .iter()
        .zip(&instance_id)
        .map(|(p, &inst)| {
            cell_ids[&(
                inst,
                (p[0] / pitch).floor() as i64,
                (p[1] / pitch).floor() as i64,
                (p[2] / pitch).floor() as i64,
            )]
        })
        .collect();

    let mut instances = Vec::with_capacity(k);
    for (inst, b) in boxes.iter().enumerate() {
        let members: Vec<usize> = instance_id
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == inst as i64)
            .map(|(i, _)| i)
            .collect();
        let mut center = [0.0; 3];
        for &m in &members {
            for a in 0..3 {
                center[a] += positions[m][a];
            }
        }
        for c in center.iter_mut() {
            *c /= members.len() as f64;
        }
        instances.push(Instance {
            class_id: b.class_id,
            center,
        });
    }

    let scene = SceneCloud {
        positions,
        colors,
        superpoint_id,
        instance_id,
        instances,
    };
    scene.validate()?;
    Ok((scene, boxes))
}

/// Generates one scene, deterministic in (config seed, index).
pub fn generate_scene(cfg: &GenConfig, index: usize) -> Result<SceneCloud> {
    generate_scene_with_layout(cfg, index).map(|(scene, _)| scene)
}

/// Recovers each instance's palette color from its mean point color.
pub fn instance_palette_colors(scene: &SceneCloud) -> Vec<usize> {
    let mut sums = vec![[0.0; 3]; scene.n_instances()];
    let mut counts = vec![0usize; scene.n_instances()];
    for (&inst, col) in scene.instance_id.iter().zip(&scene.colors) {
        if inst >= 0 {
            let i = inst as usize;
            counts[i] += 1;
            for a in 0..3 {
                sums[i][a] += col[a];
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(sum, &c)| {
            let mean = [sum[0] / c as f64, sum[1] / c as f64, sum[2] / c as f64];
            PALETTE
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.1.iter().zip(&mean).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = b.1.iter().zip(&mean).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).expect("finite colors")
                })
                .map(|(i, _)| i)
                .expect("non-empty palette")
        })
        .collect()
}

/// Category of a sample given its target count and whether same-class
/// distractors remain in the scene.
pub fn categorize(n_targets: usize, distractors_present: bool) -> Category {
    match (n_targets, distractors_present) {
        (0, true) => Category::ZtDis,
        (0, false) => Category::ZtNodis,
        (1, true) => Category::StDis,
        (1, false) => Category::StNodis,
        _ => Category::Mt,
    }
}

fn expression(
    tokens: &[&str],
    labels: [&[usize]; 5],
    targets: Vec<usize>,
    category: Category,
) -> Expression {
    Expression {
        token_ids: tokens.iter().map(|w| token_id(w)).collect(),
        l_main: labels[0].to_vec(),
        l_attri: labels[1].to_vec(),
        l_auxi: labels[2].to_vec(),
        l_pron: labels[3].to_vec(),
        l_rel: labels[4].to_vec(),
        target_instance_ids: targets,
        category,
    }
}

/// Enumerates every template expression the scene supports, with targets
/// and categories computed from scene content.
pub fn expression_candidates(scene: &SceneCloud, cfg: &GenConfig) -> Result<Vec<Expression>> {
    cfg.validate()?;
    let colors = instance_palette_colors(scene);
    let class_members = |c: usize| -> Vec<usize> {
        scene
            .instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.class_id == c)
            .map(|(i, _)| i)
            .collect()
    };

    let mut out = Vec::new();
    for (class_idx, class) in cfg.classes.iter().enumerate() {
        let members = class_members(class_idx);
        let count = members.len();

        // "the <class>"
        out.push(expression(
            &["the", class],
            [&[1], &[], &[], &[], &[]],
            members.clone(),
            categorize(count, false),
        ));
        // "every <class>"
        if count >= 2 {
            out.push(expression(
                &["every", class],
                [&[1], &[], &[], &[], &[]],
                members.clone(),
                Category::Mt,
            ));
        }
        // color-qualified templates
        for (color_idx, &(color, _)) in PALETTE.iter().enumerate() {
            if count == 0 && color_idx > 0 {
                continue; // one zero-target phrasing per absent class is enough
            }
            let targets: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&m| colors[m] == color_idx)
                .collect();
            let category = categorize(targets.len(), count > targets.len());
            out.push(expression(
                &["the", color, class],
                [&[2], &[1], &[], &[], &[]],
                targets.clone(),
                category,
            ));
            out.push(expression(
                &["it", "is", "the", color, class],
                [&[4], &[3], &[], &[0], &[]],
                targets,
                category,
            ));
        }
    }

    // "the <class> near the <anchor>": needs a unique anchor instance
    for (class_idx, class) in cfg.classes.iter().enumerate() {
        let members = class_members(class_idx);
        if members.is_empty() {
            continue;
        }
        for (anchor_idx, anchor) in cfg.classes.iter().enumerate() {
            if anchor_idx == class_idx {
                continue;
            }
            let anchors = class_members(anchor_idx);
            if anchors.len() != 1 {
                continue;
            }
            let ac = scene.instances[anchors[0]].center;
            let nearest = members
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    let da: f64 = scene.instances[a]
                        .center
                        .iter()
                        .zip(&ac)
                        .map(|(x, y)| (x - y).powi(2))
                        .sum();
                    let db: f64 = scene.instances[b]
                        .center
                        .iter()
                        .zip(&ac)
                        .map(|(x, y)| (x - y).powi(2))
                        .sum();
                    da.partial_cmp(&db).expect("finite centers").then(a.cmp(&b))
                })
                .expect("members non-empty");
            out.push(expression(
                &["the", class, "near", "the", anchor],
                [&[1], &[], &[4], &[], &[2]],
                vec![nearest],
                categorize(1, members.len() > 1),
            ));
        }
    }

    for e in &out {
        e.validate()?;
        if e.token_ids.len() > MAX_TOKENS {
            return Err(Error::Generation("template exceeds the token bound".into()));
        }
    }
    Ok(out)
}

fn draw_category(mix: &CategoryMix, rng: &mut ChaCha8Rng) -> Category {
    let roll: f64 = rng.gen();
    let mut acc = 0.0;
    for cat in Category::ALL {
        acc += mix.proportion(cat);
        if roll < acc {
            return cat;
        }
    }
    Category::Mt
}

/// Draws template expressions for one scene following the category mix,
/// deterministic in (config seed, scene index).
pub fn generate_samples(
    scene: &SceneCloud,
    cfg: &GenConfig,
    scene_index: usize,
) -> Result<Vec<Expression>> {
    let candidates = expression_candidates(scene, cfg)?;
    let mut rng = scene_rng(cfg.seed, scene_index, 0x5a3b1e5);
    let mut out = Vec::with_capacity(cfg.samples_per_scene);
    for _ in 0..cfg.samples_per_scene {
        let want = draw_category(&cfg.category_mix, &mut rng);
        let bucket: Vec<&Expression> =
            candidates.iter().filter(|e| e.category == want).collect();
        let pick = if bucket.is_empty() {
            // every generated scene supports all five categories, but a
            // hand-written scene may not; fall back to anything available
            let i = rng.gen_range(0..candidates.len());
            &candidates[i]
        } else {
            bucket[rng.gen_range(0..bucket.len())]
        };
        out.push(pick.clone());
    }
    Ok(out)
}

/// One dataset entry: a scene reference plus an inline expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSample {
    pub scene: usize,
    pub expression: Expression,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub scenes: Vec<String>,
    pub splits: Splits,
    pub samples: Vec<DatasetSample>,
}

/// A manifest together with its loaded scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenes: Vec<SceneCloud>,
}

impl Dataset {
    /// (scene, expression) pairs of one split, in split order.
    pub fn samples_of<'a>(
        &'a self,
        indices: &[usize],
    ) -> Vec<(&'a SceneCloud, &'a Expression)> {
        indices
            .iter()
            .map(|&i| {
                let sample = &self.manifest.samples[i];
                (&self.scenes[sample.scene], &sample.expression)
            })
            .collect()
    }
}

/// Generates the full dataset: scenes, sampled expressions, and the
/// train/val split. Every category with a positive mix proportion is
/// guaranteed at least one sample.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut scenes = Vec::with_capacity(cfg.scene_count);
    let mut samples = Vec::new();
    for idx in 0..cfg.scene_count {
        let scene = generate_scene(cfg, idx)?;
        for expr in generate_samples(&scene, cfg, idx)? {
            samples.push(DatasetSample {
                scene: idx,
                expression: expr,
            });
        }
        scenes.push(scene);
    }

    // force coverage of requested categories the mix happened to miss;
    // when the dataset is smaller than the requested category count the
    // patch stops as soon as no duplicate slot remains
    let requested: Vec<Category> = Category::ALL
        .into_iter()
        .filter(|&c| cfg.category_mix.proportion(c) > 0.0)
        .collect();
    let candidates0 = expression_candidates(&scenes[0], cfg)?;
    for cat in requested {
        if samples.iter().any(|s| s.expression.category == cat) {
            continue;
        }
        let replacement = candidates0
            .iter()
            .find(|e| e.category == cat)
            .ok_or_else(|| {
                Error::Generation(format!("scene 0 offers no {cat} expression"))
            })?;
        let Some(victim) = samples.iter().rposition(|s| {
            let c = s.expression.category;
            samples.iter().filter(|o| o.expression.category == c).count() >= 2
        }) else {
            break;
        };
        samples[victim] = DatasetSample {
            scene: 0,
            expression: replacement.clone(),
        };
    }

    let mut rng = scene_rng(cfg.seed, usize::MAX, 0x59117);
    let mut splits = Splits::default();
    for i in 0..samples.len() {
        if rng.gen::<f64>() < cfg.val_fraction {
            splits.val.push(i);
        } else {
            splits.train.push(i);
        }
    }
    if splits.train.is_empty() {
        // degenerate tiny datasets still need a train split
        splits.train.push(0);
        splits.val.retain(|&i| i != 0);
    }

    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            scenes: (0..cfg.scene_count)
                .map(|i| format!("scenes/scene_{i}.json"))
                .collect(),
            splits,
            samples,
        },
        scenes,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    positions: Vec<f64>,
    colors: Vec<f64>,
    superpoint_id: Vec<usize>,
    instance_id: Vec<i64>,
    instances: Vec<InstanceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    class_id: usize,
    center: [f64; 3],
}

fn scene_to_file(scene: &SceneCloud) -> SceneFile {
    SceneFile {
        positions: scene.positions.iter().flatten().copied().collect(),
        colors: scene.colors.iter().flatten().copied().collect(),
        superpoint_id: scene.superpoint_id.clone(),
        instance_id: scene.instance_id.clone(),
        instances: scene
            .instances
            .iter()
            .map(|i| InstanceRecord {
                class_id: i.class_id,
                center: i.center,
            })
            .collect(),
    }
}

fn scene_from_file(file: SceneFile, path: &Path) -> Result<SceneCloud> {
    let chunk3 = |flat: &[f64], what: &str| -> Result<Vec<[f64; 3]>> {
        if flat.len() % 3 != 0 {
            return Err(Error::Format(format!(
                "{}: {what} length {} is not a multiple of 3",
                path.display(),
                flat.len()
            )));
        }
        Ok(flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    };
    let scene = SceneCloud {
        positions: chunk3(&file.positions, "positions")?,
        colors: chunk3(&file.colors, "colors")?,
        superpoint_id: file.superpoint_id,
        instance_id: file.instance_id,
        instances: file
            .instances
            .into_iter()
            .map(|r| Instance {
                class_id: r.class_id,
                center: r.center,
            })
            .collect(),
    };
    scene
        .validate()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(scene)
}

/// Writes `manifest.json` plus one file per scene under `scenes/`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    if dataset.manifest.scenes.len() != dataset.scenes.len() {
        return Err(Error::Format(format!(
            "manifest lists {} scenes but {} are loaded",
            dataset.manifest.scenes.len(),
            dataset.scenes.len()
        )));
    }
    fs::create_dir_all(dir.join("scenes"))?;
    let manifest_json = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), manifest_json)?;
    for (rel, scene) in dataset.manifest.scenes.iter().zip(&dataset.scenes) {
        let json = serde_json::to_string(&scene_to_file(scene))
            .map_err(|e| Error::Format(e.to_string()))?;
        fs::write(dir.join(rel), json)?;
    }
    Ok(())
}

/// Reads a dataset directory back; fails with the offending file named on
/// any version, field, or structure problem.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = fs::read_to_string(&manifest_path).map_err(|e| {
        Error::Format(format!("{}: {e}", manifest_path.display()))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format_version {} (expected {FORMAT_VERSION})",
            manifest_path.display(),
            manifest.format_version
        )));
    }
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for rel in &manifest.scenes {
        let path = dir.join(rel);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let file: SceneFile = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        scenes.push(scene_from_file(file, &path)?);
    }
    for (i, sample) in manifest.samples.iter().enumerate() {
        if sample.scene >= scenes.len() {
            return Err(Error::Format(format!(
                "sample {i} references missing scene {}",
                sample.scene
            )));
        }
        sample
            .expression
            .validate()
            .map_err(|e| Error::Format(format!("sample {i}: {e}")))?;
        for &inst in &sample.expression.target_instance_ids {
            if inst >= scenes[sample.scene].n_instances() {
                return Err(Error::Format(format!(
                    "sample {i} targets missing instance {inst}"
                )));
            }
        }
    }
    for &idx in manifest.splits.train.iter().chain(&manifest.splits.val) {
        if idx >= manifest.samples.len() {
            return Err(Error::Format(format!(
                "split references missing sample {idx}"
            )));
        }
    }
    Ok(Dataset { manifest, scenes })
}
