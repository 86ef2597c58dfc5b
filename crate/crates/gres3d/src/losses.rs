//! Multi-object decoupling losses: query-instance assignment, the seed
//! relevance guidance term, per-query mask supervision (BCE + Dice),
//! target confidence supervision, the query-text contrastive term, and
//! their weighted total.
//!
//! Every loss interprets raw scores as logits and applies the sigmoid (or
//! softmax) internally, so inputs may be unbounded.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::geometry::{self, SceneCloud, SuperpointMask};
use crate::model::{BoundParams, Expression, ForwardGraph, ModelConfig};

const DICE_SMOOTHING: f64 = 1.0;

/// Weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_qgd: f64,
    pub lambda_mask: f64,
    pub lambda_tgt: f64,
    pub lambda_qta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_qgd: 5.0,
            lambda_mask: 1.0,
            lambda_tgt: 0.1,
            lambda_qta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_qgd", self.lambda_qgd),
            ("lambda_mask", self.lambda_mask),
            ("lambda_tgt", self.lambda_tgt),
            ("lambda_qta", self.lambda_qta),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which queries supervise which target instances.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryAssignment {
    /// Positive query set per target instance, in expression target order.
    pub instance_positives: Vec<(usize, Vec<usize>)>,
    /// Indicator per query: 1 when the query is positive for some target.
    pub l_tgt: Vec<f64>,
    /// Supervision pairs (query, instance ground-truth mask) in a fixed
    /// order: instances in target order, queries ascending within each.
    pub pair_masks: Vec<(usize, SuperpointMask)>,
}

/// Assigns queries to target instances by provenance: a query belongs to
/// the plurality instance of its source superpoint; a target instance with
/// no such query receives the query whose source centroid is nearest its
/// center (ties toward the lower query rank).
pub fn assign_queries(
    query_sources: &[usize],
    scene: &SceneCloud,
    expr: &Expression,
) -> Result<QueryAssignment> {
    let majority = geometry::superpoint_majority_instances(scene);
    let centroids = geometry::superpoint_centroids(scene)?;
    let n_sp = scene.n_superpoints();
    if let Some(&bad) = query_sources.iter().find(|&&s| s >= n_sp) {
        return Err(Error::InvalidArgument(format!(
            "query source {bad} out of range for {n_sp} superpoints"
        )));
    }

    let mut l_tgt = vec![0.0; query_sources.len()];
    let mut instance_positives = Vec::new();
    let mut pair_masks = Vec::new();
    for &inst in &expr.target_instance_ids {
        if inst >= scene.n_instances() {
            return Err(Error::InvalidArgument(format!(
                "target instance {inst} not in scene"
            )));
        }
        let mut positives: Vec<usize> = query_sources
            .iter()
            .enumerate()
            .filter(|(_, &src)| majority[src] == inst as i64)
            .map(|(q, _)| q)
            .collect();
        if positives.is_empty() {
            let center = scene.instances[inst].center;
            let nearest = query_sources
                .iter()
                .enumerate()
                .min_by(|(_, &a), (_, &b)| {
                    let da = sq_dist(centroids[a], center);
                    let db = sq_dist(centroids[b], center);
                    da.partial_cmp(&db).expect("finite distances")
                })
                .map(|(q, _)| q)
                .ok_or_else(|| Error::InvalidArgument("no queries to assign".into()))?;
            positives.push(nearest);
        }
        let mask = geometry::instance_superpoint_mask(scene, inst)?;
        for &q in &positives {
            l_tgt[q] = 1.0;
            pair_masks.push((q, mask.clone()));
        }
        instance_positives.push((inst, positives));
    }
    Ok(QueryAssignment {
        instance_positives,
        l_tgt,
        pair_masks,
    })
}

fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Mean binary cross-entropy with logits: `mean(softplus(x) - x*y)`.
fn bce_with_logits_mean(tape: &mut Tape, logits: TensorId, labels: &[f64]) -> Result<TensorId> {
    let n = tape.tensor(logits).len();
    if n != labels.len() {
        return Err(Error::Shape(format!(
            "{n} logits vs {} labels",
            labels.len()
        )));
    }
    if tape.values(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::Computation("non-finite logits in BCE".into()));
    }
    let shape = tape.shape(logits).to_vec();
    let y = tape.constant(&shape, labels.to_vec())?;
    let sp = tape.softplus(logits);
    let xy = tape.mul(logits, y)?;
    let per_elem = tape.sub(sp, xy)?;
    let total = tape.sum_all(per_elem);
    Ok(tape.mul_scalar(total, 1.0 / n as f64))
}

/// Seed relevance guidance: mean BCE between relevance logits and the
/// Gaussian relevance labels.
pub fn loss_qgd(tape: &mut Tape, relevance: TensorId, labels: &[f64]) -> Result<TensorId> {
    if labels.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::InvalidArgument(
            "relevance labels must lie in [0, 1]".into(),
        ));
    }
    bce_with_logits_mean(tape, relevance, labels)
}

/// Per-positive-query mask supervision: BCE over superpoints plus the
/// smoothed Dice loss, averaged over positive queries. Zero-target samples
/// contribute 0.
pub fn loss_mask(
    tape: &mut Tape,
    mask_logits: TensorId,
    assignment: &QueryAssignment,
) -> Result<TensorId> {
    if assignment.pair_masks.is_empty() {
        return Ok(tape.leaf(Tensor::scalar(0.0)));
    }
    let n_s = tape.shape(mask_logits)[1];
    let mut terms = Vec::with_capacity(assignment.pair_masks.len());
    for (query, gt) in &assignment.pair_masks {
        if gt.values.len() != n_s {
            return Err(Error::Shape(format!(
                "ground-truth mask has {} superpoints, logits have {n_s}",
                gt.values.len()
            )));
        }
        let row = tape.gather_rows(mask_logits, &[*query])?;
        let gt_vals = gt.as_f64();
        let bce = bce_with_logits_mean(tape, row, &gt_vals)?;

        let g = tape.constant(&[1, n_s], gt_vals)?;
        let p = tape.sigmoid(row);
        let pg = tape.mul(p, g)?;
        let inter = tape.sum_all(pg);
        let num_scaled = tape.mul_scalar(inter, 2.0);
        let num = tape.add_scalar(num_scaled, DICE_SMOOTHING);
        let p_sum = tape.sum_all(p);
        let g_sum = tape.sum_all(g);
        let sums = tape.add(p_sum, g_sum)?;
        let den = tape.add_scalar(sums, DICE_SMOOTHING);
        let ratio = tape.div(num, den)?;
        let neg = tape.mul_scalar(ratio, -1.0);
        let dice = tape.add_scalar(neg, 1.0);

        terms.push(tape.add(bce, dice)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.mul_scalar(total, 1.0 / terms.len() as f64))
}

/// Target confidence supervision: mean BCE between confidence logits and
/// the positivity indicator.
pub fn loss_tgt(tape: &mut Tape, conf_logits: TensorId, l_tgt: &[f64]) -> Result<TensorId> {
    bce_with_logits_mean(tape, conf_logits, l_tgt)
}

/// Projects queries and words into the shared contrastive space and
/// returns both temperature-scaled similarity matrices
/// (query-to-word N_Q×N_T, word-to-query N_T×N_Q).
pub fn qta_similarity(
    tape: &mut Tape,
    queries: TensorId,
    words: TensorId,
    w_q: TensorId,
    w_w: TensorId,
    tau: f64,
) -> Result<(TensorId, TensorId)> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let q = tape.matmul(queries, w_q)?;
    let t = tape.matmul(words, w_w)?;
    let qw = tape.matmul_nt(q, t)?;
    let wq = tape.matmul_nt(t, q)?;
    Ok((
        tape.mul_scalar(qw, 1.0 / tau),
        tape.mul_scalar(wq, 1.0 / tau),
    ))
}

fn contrastive_direction(
    tape: &mut Tape,
    scaled_logits: TensorId,
    anchor_positives: &[usize],
    other_positives: &[usize],
) -> Result<TensorId> {
    let shape = tape.shape(scaled_logits).to_vec();
    let (rows, cols) = (shape[0], shape[1]);
    let mut weights = vec![0.0; rows * cols];
    if !other_positives.is_empty() {
        let w = -1.0 / other_positives.len() as f64;
        for &i in anchor_positives {
            if i >= rows {
                return Err(Error::InvalidArgument(format!(
                    "positive index {i} out of range for {rows} rows"
                )));
            }
            for &j in other_positives {
                if j >= cols {
                    return Err(Error::InvalidArgument(format!(
                        "positive index {j} out of range for {cols} columns"
                    )));
                }
                weights[i * cols + j] = w;
            }
        }
    }
    let lsm = tape.log_softmax_rows(scaled_logits)?;
    let w = tape.constant(&[rows, cols], weights)?;
    let weighted = tape.mul(lsm, w)?;
    Ok(tape.sum_all(weighted))
}

/// Both directions of the query-text contrastive loss, separately.
pub fn qta_terms(
    tape: &mut Tape,
    queries: TensorId,
    words: TensorId,
    w_q: TensorId,
    w_w: TensorId,
    positive_words: &[usize],
    positive_queries: &[usize],
    tau: f64,
) -> Result<(TensorId, TensorId)> {
    let (qw, wq) = qta_similarity(tape, queries, words, w_q, w_w, tau)?;
    // query anchors average over their positive words, and vice versa;
    // anchors with no positives contribute nothing
    let l_qw = contrastive_direction(tape, qw, positive_queries, positive_words)?;
    let l_wq = contrastive_direction(tape, wq, positive_words, positive_queries)?;
    Ok((l_qw, l_wq))
}

/// Query-text alignment: the sum of the query-to-word and word-to-query
/// contrastive terms.
#[allow(clippy::too_many_arguments)]
pub fn loss_qta(
    tape: &mut Tape,
    queries: TensorId,
    words: TensorId,
    w_q: TensorId,
    w_w: TensorId,
    positive_words: &[usize],
    positive_queries: &[usize],
    tau: f64,
) -> Result<TensorId> {
    let (l_qw, l_wq) = qta_terms(
        tape,
        queries,
        words,
        w_q,
        w_w,
        positive_words,
        positive_queries,
        tau,
    )?;
    tape.add(l_qw, l_wq)
}

/// Weighted sum of the four loss terms.
pub fn total_loss(
    tape: &mut Tape,
    qgd: TensorId,
    mask: TensorId,
    tgt: TensorId,
    qta: TensorId,
    weights: &LossWeights,
) -> Result<TensorId> {
    weights.validate()?;
    let a = tape.mul_scalar(qgd, weights.lambda_qgd);
    let b = tape.mul_scalar(mask, weights.lambda_mask);
    let c = tape.mul_scalar(tgt, weights.lambda_tgt);
    let d = tape.mul_scalar(qta, weights.lambda_qta);
    let ab = tape.add(a, b)?;
    let abc = tape.add(ab, c)?;
    tape.add(abc, d)
}

/// Builds the full training loss for one sample on top of its forward
/// graph.
pub fn sample_loss(
    tape: &mut Tape,
    graph: &ForwardGraph,
    bound: &BoundParams,
    scene: &SceneCloud,
    expr: &Expression,
    cfg: &ModelConfig,
    weights: &LossWeights,
) -> Result<TensorId> {
    let labels = geometry::gaussian_relevance_labels(
        scene,
        &graph.seed_sources,
        &expr.target_instance_ids,
        cfg.alpha,
        cfg.sigma,
    )?;
    let qgd = loss_qgd(tape, graph.relevance, &labels)?;

    let assignment = assign_queries(&graph.query_sources, scene, expr)?;
    let mask = loss_mask(tape, graph.mask_logits, &assignment)?;
    let tgt = loss_tgt(tape, graph.conf_logits, &assignment.l_tgt)?;

    let positive_words = expr.positive_word_positions();
    let positive_queries: Vec<usize> = assignment
        .l_tgt
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(q, _)| q)
        .collect();
    let qta = loss_qta(
        tape,
        graph.queries,
        graph.t,
        bound.w_q,
        bound.w_w,
        &positive_words,
        &positive_queries,
        cfg.tau,
    )?;

    total_loss(tape, qgd, mask, tgt, qta, weights)
}
