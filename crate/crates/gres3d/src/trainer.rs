//! Training loop: per-sample forward/backward, Adam with polynomial
//! learning-rate decay and global-norm gradient clipping, seeded shuffling,
//! and a binary checkpoint format (JSON metadata followed by little-endian
//! f64 tensor payloads).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::SceneCloud;
use crate::losses::{self, LossWeights};
use crate::model::{forward_graph, Expression, ModelConfig, ModelParams};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub total_steps: usize,
    pub poly_power: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            total_steps: 2000,
            poly_power: 4.0,
            batch_size: 4,
            seed: 0,
            weights: LossWeights::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::InvalidArgument("total_steps must be at least 1".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::InvalidArgument("base_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Polynomial decay: `base_lr * (1 - step/total)^power`.
pub fn poly_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside schedule of {} steps",
            cfg.total_steps
        )));
    }
    let frac = 1.0 - step as f64 / cfg.total_steps as f64;
    Ok(cfg.base_lr * frac.powf(cfg.poly_power))
}

/// Adam moment buffers, aligned with `ModelParams::named` order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Completed update count.
    pub step: usize,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }
}

/// One optimization step over a batch: mean loss and gradients over the
/// samples (in order), global-norm clipping, then an Adam update at the
/// current polynomial learning rate. Returns the batch loss.
pub fn train_step(
    batch: &[(&SceneCloud, &Expression)],
    params: &mut ModelParams,
    state: &mut AdamState,
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    tcfg.validate()?;
    let named = params.named();
    let mut grad_acc: Vec<Vec<f64>> = named.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut loss_sum = 0.0;

    for &(scene, expr) in batch {
        let mut tape = Tape::new();
        let (bound, ids) = params.bind_with_ids(&mut tape);
        let graph = forward_graph(&mut tape, &bound, scene, expr, mcfg)?;
        let loss = losses::sample_loss(&mut tape, &graph, &bound, scene, expr, mcfg, &tcfg.weights)?;
        let value = tape.values(loss)[0];
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {value} at step {}",
                state.step
            )));
        }
        loss_sum += value;
        tape.backward(loss).map_err(|e| {
            Error::Training(format!("backward failed at step {}: {e}", state.step))
        })?;
        for (acc, &id) in grad_acc.iter_mut().zip(&ids) {
            let g = tape.grad(id).expect("backward fills every grad");
            for (a, &gv) in acc.iter_mut().zip(g) {
                *a += gv;
            }
        }
    }

    let scale = 1.0 / batch.len() as f64;
    for acc in grad_acc.iter_mut() {
        for g in acc.iter_mut() {
            *g *= scale;
        }
    }

    // global-norm clipping
    let norm: f64 = grad_acc
        .iter()
        .flat_map(|g| g.iter())
        .map(|&g| g * g)
        .sum::<f64>()
        .sqrt();
    if tcfg.clip_norm > 0.0 && norm > tcfg.clip_norm {
        let s = tcfg.clip_norm / norm;
        for acc in grad_acc.iter_mut() {
            for g in acc.iter_mut() {
                *g *= s;
            }
        }
    }

    let lr = poly_lr(state.step, tcfg)?;
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - tcfg.beta1.powf(t);
    let bc2 = 1.0 - tcfg.beta2.powf(t);
    for (pi, (_, tensor)) in params.named_mut().into_iter().enumerate() {
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        let g = &grad_acc[pi];
        for (i, value) in tensor.values_mut().iter_mut().enumerate() {
            m[i] = tcfg.beta1 * m[i] + (1.0 - tcfg.beta1) * g[i];
            v[i] = tcfg.beta2 * v[i] + (1.0 - tcfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *value -= lr * m_hat / (v_hat.sqrt() + tcfg.eps);
        }
    }
    Ok(loss_sum * scale)
}

/// A trained model plus everything needed to reproduce or resume it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model_config: ModelConfig,
    pub step: usize,
    pub params: ModelParams,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

/// Initializes parameters from the seed and runs `total_steps` optimization
/// steps over the train split with seeded reshuffling.
pub fn fit(dataset: &Dataset, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<Checkpoint> {
    mcfg.validate()?;
    tcfg.validate()?;
    let train_indices = &dataset.manifest.splits.train;
    if train_indices.is_empty() {
        return Err(Error::Training("train split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut params = ModelParams::init(mcfg, &mut rng);
    let mut state = AdamState::new(&params);

    let samples = dataset.samples_of(train_indices);
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..tcfg.total_steps {
        let mut batch = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled above");
            batch.push(samples[idx]);
        }
        train_step(&batch, &mut params, &mut state, tcfg, mcfg)?;
    }

    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        model_config: mcfg.clone(),
        step: state.step,
        params,
        rng_seed: tcfg.seed,
        rng_word_pos: rng.get_word_pos(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    version: u32,
    model_config: ModelConfig,
    step: usize,
    rng_seed: u64,
    /// u128 serialized as decimal text.
    rng_word_pos: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
}

/// Writes the checkpoint: an 8-byte little-endian metadata length, the
/// JSON metadata, then every tensor as row-major little-endian f64 in
/// directory order.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let named = ckpt.params.named();
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0u64;
    for (name, tensor) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        offset += (tensor.len() * 8) as u64;
    }
    let meta = CheckpointMeta {
        version: ckpt.version,
        model_config: ckpt.model_config.clone(),
        step: ckpt.step,
        rng_seed: ckpt.rng_seed,
        rng_word_pos: ckpt.rng_word_pos.to_string(),
        tensors,
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;

    let mut file = fs::File::create(path)?;
    file.write_all(&(meta_json.len() as u64).to_le_bytes())?;
    file.write_all(&meta_json)?;
    for (_, tensor) in &named {
        for &v in tensor.values() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint back, verifying the version and that every expected
/// tensor is present exactly once with its expected shape.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    let meta_len = u64::from_le_bytes(len_bytes) as usize;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if rest.len() < meta_len {
        return Err(Error::Format(format!(
            "{}: corrupt header (metadata length {meta_len} exceeds file)",
            path.display()
        )));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&rest[..meta_len])
        .map_err(|e| Error::Format(format!("{}: corrupt metadata: {e}", path.display())))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            path.display(),
            meta.version
        )));
    }
    let rng_word_pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Format(format!("{}: bad rng_word_pos", path.display())))?;

    let payload = &rest[meta_len..];
    let mut params = ModelParams::zeros(&meta.model_config);
    let mut loaded = vec![false; meta.tensors.len()];
    for (name, tensor) in params.named_mut() {
        let (ti, entry) = meta
            .tensors
            .iter()
            .enumerate()
            .find(|(_, e)| e.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if loaded[ti] {
            return Err(Error::Format(format!("tensor {name} listed twice")));
        }
        loaded[ti] = true;
        if entry.shape != tensor.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        let start = entry.offset as usize;
        let bytes = tensor.len() * 8;
        if start + bytes > payload.len() {
            return Err(Error::Format(format!("tensor {name} payload truncated")));
        }
        for (i, chunk) in payload[start..start + bytes].chunks_exact(8).enumerate() {
            tensor.values_mut()[i] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    if let Some(extra) = loaded.iter().position(|&l| !l) {
        return Err(Error::Format(format!(
            "unexpected tensor {} in checkpoint",
            meta.tensors[extra].name
        )));
    }
    Ok(Checkpoint {
        version: meta.version,
        model_config: meta.model_config,
        step: meta.step,
        params,
        rng_seed: meta.rng_seed,
        rng_word_pos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_config, tiny_expression, tiny_scene};

    #[test]
    fn poly_lr_endpoints_and_midpoint() {
        let cfg = TrainConfig {
            base_lr: 1e-4,
            total_steps: 100,
            ..TrainConfig::default()
        };
        assert_eq!(poly_lr(0, &cfg).unwrap(), 1e-4);
        assert_eq!(poly_lr(100, &cfg).unwrap(), 0.0);
        assert!((poly_lr(50, &cfg).unwrap() - 1e-4 * 0.0625).abs() < 1e-18);
        assert!(poly_lr(101, &cfg).is_err());
    }

    #[test]
    fn poly_lr_is_monotone_nonincreasing() {
        let cfg = TrainConfig {
            total_steps: 37,
            poly_power: 4.0,
            ..TrainConfig::default()
        };
        let mut prev = f64::INFINITY;
        for step in 0..=37 {
            let lr = poly_lr(step, &cfg).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_loss_weights_leave_params_fixed() {
        use rand::SeedableRng;
        let mcfg = tiny_config();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut params = ModelParams::init(&mcfg, &mut rng);
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let tcfg = TrainConfig {
            weights: LossWeights {
                lambda_qgd: 0.0,
                lambda_mask: 0.0,
                lambda_tgt: 0.0,
                lambda_qta: 0.0,
            },
            total_steps: 5,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let scene = tiny_scene();
        let expr = tiny_expression();
        for _ in 0..3 {
            train_step(&[(&scene, &expr)], &mut params, &mut state, &tcfg, &mcfg).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn repeated_steps_reduce_the_loss() {
        use rand::SeedableRng;
        let mcfg = tiny_config();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut params = ModelParams::init(&mcfg, &mut rng);
        let mut state = AdamState::new(&params);
        let tcfg = TrainConfig {
            base_lr: 3e-3,
            total_steps: 200,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let scene = tiny_scene();
        let expr = tiny_expression();
        let first = train_step(&[(&scene, &expr)], &mut params, &mut state, &tcfg, &mcfg).unwrap();
        let mut last = first;
        for _ in 1..50 {
            last = train_step(&[(&scene, &expr)], &mut params, &mut state, &tcfg, &mcfg).unwrap();
        }
        assert!(
            last < first,
            "loss did not improve: first {first}, last {last}"
        );
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let mcfg = tiny_config();
        let tcfg = TrainConfig {
            total_steps: 4,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let gen = crate::data::GenConfig {
            scene_count: 1,
            instances_min: 3,
            instances_max: 3,
            points_per_instance_min: 10,
            points_per_instance_max: 15,
            floor_points: 30,
            room_extent: [5.0, 5.0],
            superpoint_pitch: 1.5,
            samples_per_scene: 4,
            val_fraction: 0.0,
            ..crate::data::GenConfig::default()
        };
        let mut mcfg = mcfg;
        mcfg.vocab_size = crate::data::VOCAB_SIZE;
        let ds = crate::data::generate_dataset(&gen).unwrap();
        // keep the tiny model applicable to the generated scene
        mcfg.n_seed = 4.min(ds.scenes[0].n_superpoints());
        mcfg.n_q = 2;
        let a = fit(&ds, &mcfg, &tcfg).unwrap();
        let b = fit(&ds, &mcfg, &tcfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        use rand::SeedableRng;
        let mcfg = tiny_config();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(&mcfg, &mut rng);
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            model_config: mcfg,
            step: 17,
            params,
            rng_seed: 3,
            rng_word_pos: 123456789,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(ckpt, back);
    }

    #[test]
    fn corrupt_header_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"nonsense").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_shape_error_names_the_tensor() {
        use rand::SeedableRng;
        let mcfg = tiny_config();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::init(&mcfg, &mut rng);
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            model_config: mcfg,
            step: 0,
            params,
            rng_seed: 0,
            rng_word_pos: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();

        // rewrite the metadata with a wrong shape for w_t
        let bytes = std::fs::read(&path).unwrap();
        let meta_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let meta = String::from_utf8(bytes[8..8 + meta_len].to_vec()).unwrap();
        let tampered = meta.replacen("\"name\":\"w_t\",\"shape\":[4,4]", "\"name\":\"w_t\",\"shape\":[4,5]", 1);
        assert_ne!(meta, tampered);
        let mut out = Vec::new();
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[8 + meta_len..]);
        std::fs::write(&path, out).unwrap();

        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("w_t"), "{err}");
    }

    #[test]
    fn version_bump_is_rejected() {
        use rand::SeedableRng;
        let mcfg = tiny_config();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(&mcfg, &mut rng);
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            model_config: mcfg,
            step: 0,
            params,
            rng_seed: 0,
            rng_word_pos: 0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let meta_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let meta = String::from_utf8(bytes[8..8 + meta_len].to_vec()).unwrap();
        let tampered = meta.replacen("\"version\":1", "\"version\":9", 1);
        let mut out = Vec::new();
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[8 + meta_len..]);
        std::fs::write(&path, out).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
