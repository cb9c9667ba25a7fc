//! Gradient-based feature separation and the constraints built on it:
//! class-feature selection by gradient importance, KL constraints pulling
//! class features toward per-class prototypes, a connectivity constraint
//! on the surrounding features, epoch-level prototype tracking, and the
//! combined training objective.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Csr, Label};
use crate::tape::{Tape, TapeError, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GdnError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("mask of scored nodes is empty")]
    EmptyMask,
    #[error("k = {k} out of range for {d} feature dims")]
    KOutOfRange { k: usize, d: usize },
    #[error("no train node of class {0}; prototypes need both classes")]
    EmptyClass(Label),
    #[error("no nodes to constrain (anomaly set empty)")]
    EmptyConstraintSet,
    #[error("surrounding constraint needs at least one surround dim (k = d)")]
    SurroundEmpty,
    #[error("temperature must be positive, got {0}")]
    BadTau(f64),
}

/// Split of the feature dims into class dims (top-k by gradient score)
/// and the surrounding complement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub k: usize,
    /// Sorted ascending; the class feature dims C.
    pub class_idx: Vec<usize>,
    /// Sorted ascending; the complement S.
    pub surround_idx: Vec<usize>,
    /// Per-dimension importance scores the selection was based on.
    pub scores: Vec<f64>,
}

impl FeatureMask {
    pub fn dim(&self) -> usize {
        self.class_idx.len() + self.surround_idx.len()
    }
}

/// Per-dimension importance: mean absolute summed gradient of the
/// true-class log-probability with respect to the refined features,
/// restricted to the scored nodes.
pub fn gradient_scores(
    tape: &mut Tape,
    x_refined: TensorId,
    probs: TensorId,
    labels: &[Label],
    mask: &[usize],
) -> Result<Vec<f64>, GdnError> {
    if mask.is_empty() {
        return Err(GdnError::EmptyMask);
    }
    let mut one_hot = Tensor::zeros(mask.len(), 2);
    for (i, &v) in mask.iter().enumerate() {
        debug_assert!(labels[v] == 0 || labels[v] == 1);
        one_hot.set(i, labels[v] as usize, 1.0);
    }
    let target = tape.leaf(one_hot);
    let selected = tape.select_rows(probs, mask)?;
    let clamped = tape.clamp_min(selected, 1e-12)?;
    let logged = tape.log(clamped)?;
    let picked = tape.mul(target, logged)?;
    let objective = tape.sum(picked)?;

    let grads = tape.backward(objective)?;
    let x_shape = tape.value(x_refined).shape();
    let gx = grads.dense(x_refined, x_shape.0, x_shape.1);
    let d = x_shape.1;
    let n = mask.len() as f64;
    let mut scores = vec![0.0; d];
    for &v in mask {
        for (j, &g) in gx.row(v).iter().enumerate() {
            scores[j] += g;
        }
    }
    for s in &mut scores {
        *s = s.abs() / n;
    }
    Ok(scores)
}

/// Indices of the k largest scores; ties break toward the lower index.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<FeatureMask, GdnError> {
    let d = scores.len();
    if k == 0 || k > d {
        return Err(GdnError::KOutOfRange { k, d });
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut class_idx: Vec<usize> = order[..k].to_vec();
    class_idx.sort_unstable();
    let surround_idx: Vec<usize> = (0..d).filter(|j| !class_idx.contains(j)).collect();
    Ok(FeatureMask {
        k,
        class_idx,
        surround_idx,
        scores: scores.to_vec(),
    })
}

/// Row distributions over the class dims and (when the complement is
/// non-empty) the surrounding dims, both differentiable on the tape.
pub fn class_feature_distributions(
    tape: &mut Tape,
    x_refined: TensorId,
    mask: &FeatureMask,
) -> Result<(TensorId, Option<TensorId>), GdnError> {
    let c_cols = tape.select_cols(x_refined, &mask.class_idx)?;
    let c_dist = tape.softmax_rows(c_cols)?;
    let s_dist = if mask.surround_idx.is_empty() {
        None
    } else {
        let s_cols = tape.select_cols(x_refined, &mask.surround_idx)?;
        Some(tape.softmax_rows(s_cols)?)
    };
    Ok((c_dist, s_dist))
}

/// Per-class prototype distributions over the class dims, tracked across
/// epochs outside the tape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prototype {
    pub proto_plus: Vec<f64>,
    pub proto_minus: Vec<f64>,
    pub tau: f64,
    pub epoch: usize,
}

impl Prototype {
    pub fn is_valid(&self) -> bool {
        let ok = |v: &[f64]| {
            v.iter().all(|&x| x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-9
        };
        ok(&self.proto_plus) && ok(&self.proto_minus)
    }
}

fn renormalized(mut v: Vec<f64>) -> Vec<f64> {
    let sum: f64 = v.iter().sum();
    for x in &mut v {
        *x /= sum;
    }
    v
}

/// Smooth any zero entry with 1e-8 and renormalize, keeping KL finite.
fn smoothed_distribution(v: &[f64]) -> Vec<f64> {
    if v.iter().all(|&x| x > 0.0) {
        renormalized(v.to_vec())
    } else {
        renormalized(v.iter().map(|&x| x + 1e-8).collect())
    }
}

fn class_members(labels: &[Label], mask: &[usize], class: Label) -> Vec<usize> {
    mask.iter().copied().filter(|&v| labels[v] == class).collect()
}

/// Average pooling of the class-feature rows per class, renormalized.
pub fn init_prototypes(
    c_values: &Tensor,
    labels: &[Label],
    train_mask: &[usize],
    tau: f64,
) -> Result<Prototype, GdnError> {
    if tau <= 0.0 {
        return Err(GdnError::BadTau(tau));
    }
    let mut protos = Vec::new();
    for class in [1, 0] {
        let members = class_members(labels, train_mask, class);
        if members.is_empty() {
            return Err(GdnError::EmptyClass(class));
        }
        let k = c_values.cols();
        let mut mean = vec![0.0; k];
        for &v in &members {
            for (j, &x) in c_values.row(v).iter().enumerate() {
                mean[j] += x;
            }
        }
        for x in &mut mean {
            *x /= members.len() as f64;
        }
        protos.push(renormalized(mean));
    }
    let proto_minus = protos.pop().expect("two protos");
    let proto_plus = protos.pop().expect("two protos");
    Ok(Prototype {
        proto_plus,
        proto_minus,
        tau,
        epoch: 0,
    })
}

/// Similarity-derived member weights for one class update: softmax over
/// cosine(C_v, proto_prev) / tau.
pub fn prototype_weights(
    c_values: &Tensor,
    members: &[usize],
    proto_prev: &[f64],
    tau: f64,
) -> Vec<f64> {
    let sims: Vec<f64> = members
        .iter()
        .map(|&v| cosine(c_values.row(v), proto_prev) / tau)
        .collect();
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = sims.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// One epoch-level prototype update: per class, members are reweighted by
/// their cosine similarity to the previous prototype and aggregated into
/// the new one. Runs outside the tape; no gradient flows through it.
pub fn prototype_update(
    c_values: &Tensor,
    labels: &[Label],
    train_mask: &[usize],
    prev: &Prototype,
) -> Result<Prototype, GdnError> {
    let mut protos = Vec::new();
    for (class, proto_prev) in [(1, &prev.proto_plus), (0, &prev.proto_minus)] {
        let members = class_members(labels, train_mask, class);
        if members.is_empty() {
            return Err(GdnError::EmptyClass(class));
        }
        let weights = prototype_weights(c_values, &members, proto_prev, prev.tau);
        let k = c_values.cols();
        let mut agg = vec![0.0; k];
        for (&v, &w) in members.iter().zip(&weights) {
            for (j, &x) in c_values.row(v).iter().enumerate() {
                agg[j] += w * x;
            }
        }
        protos.push(renormalized(agg));
    }
    let proto_minus = protos.pop().expect("two protos");
    let proto_plus = protos.pop().expect("two protos");
    Ok(Prototype {
        proto_plus,
        proto_minus,
        tau: prev.tau,
        epoch: prev.epoch + 1,
    })
}

fn tile_rows(tape: &mut Tape, v: &[f64], rows: usize) -> TensorId {
    let mut t = Tensor::zeros(rows, v.len());
    for i in 0..rows {
        t.row_mut(i).copy_from_slice(v);
    }
    tape.leaf(t)
}

/// Sum of per-node KL(C_v || proto_same) - KL(C_v || proto_other) for the
/// given rows, as a 1x1 tensor. Prototypes enter as constants.
fn constraint_sum(
    tape: &mut Tape,
    c_dist: TensorId,
    rows: &[usize],
    proto_same: &[f64],
    proto_other: &[f64],
) -> Result<TensorId, GdnError> {
    let c_rows = tape.select_rows(c_dist, rows)?;
    let same = tile_rows(tape, &smoothed_distribution(proto_same), rows.len());
    let other = tile_rows(tape, &smoothed_distribution(proto_other), rows.len());
    let kl_same = tape.kl_rows(c_rows, same)?;
    let kl_other = tape.kl_rows(c_rows, other)?;
    let diff = tape.sub(kl_same, kl_other)?;
    Ok(tape.sum(diff)?)
}

/// Class constraint total: mean over the constrained node set of
/// KL(C_v || proto_{y_v}) - KL(C_v || proto_{not y_v}).
///
/// By default only train anomalies are constrained;
/// `constrain_both_classes` widens the set to all labeled train nodes
/// (normals against their own prototype pair).
pub fn class_constraint(
    tape: &mut Tape,
    c_dist: TensorId,
    labels: &[Label],
    train_mask: &[usize],
    proto: &Prototype,
    constrain_both_classes: bool,
) -> Result<TensorId, GdnError> {
    let anomalies = class_members(labels, train_mask, 1);
    let mut total: Option<TensorId> = None;
    let mut count = 0usize;
    if !anomalies.is_empty() {
        total = Some(constraint_sum(
            tape,
            c_dist,
            &anomalies,
            &proto.proto_plus,
            &proto.proto_minus,
        )?);
        count += anomalies.len();
    }
    if constrain_both_classes {
        let normals = class_members(labels, train_mask, 0);
        if !normals.is_empty() {
            let sum = constraint_sum(
                tape,
                c_dist,
                &normals,
                &proto.proto_minus,
                &proto.proto_plus,
            )?;
            total = Some(match total {
                None => sum,
                Some(acc) => tape.add(acc, sum)?,
            });
            count += normals.len();
        }
    }
    match total {
        Some(sum) if count > 0 => Ok(tape.scale(sum, 1.0 / count as f64)?),
        _ => Err(GdnError::EmptyConstraintSet),
    }
}

/// The (neighbor, center) and (non-neighbor, center) pairs the
/// surrounding constraint is evaluated on. Sampling is deterministic per
/// seed: train nodes are visited in ascending order, neighbor lists are
/// capped at `m` by uniform subsampling, and `m` non-neighbors are drawn
/// uniformly per node.
#[derive(Debug, Clone)]
pub struct SurroundingPairs {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

pub fn sample_surrounding_pairs(
    adj: &Csr,
    train_mask: &[usize],
    seed: u64,
    neighbor_cap: usize,
    negatives_per_node: usize,
) -> SurroundingPairs {
    let n = adj.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut sorted_mask = train_mask.to_vec();
    sorted_mask.sort_unstable();
    for &v in &sorted_mask {
        let nbrs = adj.neighbors(v);
        if nbrs.len() <= neighbor_cap {
            positives.extend(nbrs.iter().map(|&u| (u, v)));
        } else {
            // partial Fisher-Yates for neighbor_cap distinct neighbors
            let mut pool: Vec<usize> = nbrs.to_vec();
            for i in 0..neighbor_cap {
                let j = rng.gen_range(i..pool.len());
                pool.swap(i, j);
                positives.push((pool[i], v));
            }
        }
        let non_neighbor_count = n - 1 - nbrs.len();
        if non_neighbor_count == 0 {
            continue;
        }
        let wanted = negatives_per_node.min(non_neighbor_count);
        let mut drawn: Vec<usize> = Vec::with_capacity(wanted);
        while drawn.len() < wanted {
            let u = rng.gen_range(0..n);
            if u == v || drawn.contains(&u) || nbrs.binary_search(&u).is_ok() {
                continue;
            }
            drawn.push(u);
        }
        negatives.extend(drawn.into_iter().map(|u| (u, v)));
    }
    SurroundingPairs {
        positives,
        negatives,
    }
}

/// Connectivity constraint total: mean over train nodes of
/// sum_{u in N(v)} KL(S_u || S_v) - sum_{sampled u not in N(v)} KL(S_u || S_v),
/// differentiable with respect to both rows.
pub fn surrounding_constraint(
    tape: &mut Tape,
    s_dist: Option<TensorId>,
    adj: &Arc<Csr>,
    train_mask: &[usize],
    sampler_seed: u64,
    neighbor_cap: usize,
    negatives_per_node: usize,
) -> Result<TensorId, GdnError> {
    let s_dist = s_dist.ok_or(GdnError::SurroundEmpty)?;
    if train_mask.is_empty() {
        return Err(GdnError::EmptyMask);
    }
    let pairs =
        sample_surrounding_pairs(adj, train_mask, sampler_seed, neighbor_cap, negatives_per_node);
    let pair_kl_sum = |tape: &mut Tape, pairs: &[(usize, usize)]| -> Result<Option<TensorId>, GdnError> {
        if pairs.is_empty() {
            return Ok(None);
        }
        let us: Vec<usize> = pairs.iter().map(|&(u, _)| u).collect();
        let vs: Vec<usize> = pairs.iter().map(|&(_, v)| v).collect();
        let su = tape.select_rows(s_dist, &us)?;
        let sv = tape.select_rows(s_dist, &vs)?;
        let kl = tape.kl_rows(su, sv)?;
        Ok(Some(tape.sum(kl)?))
    };
    let pos = pair_kl_sum(tape, &pairs.positives)?;
    let neg = pair_kl_sum(tape, &pairs.negatives)?;
    let total = match (pos, neg) {
        (Some(p), Some(n)) => tape.sub(p, n)?,
        (Some(p), None) => p,
        (None, Some(n)) => tape.scale(n, -1.0)?,
        (None, None) => tape.leaf(Tensor::scalar(0.0)),
    };
    Ok(tape.scale(total, 1.0 / train_mask.len() as f64)?)
}

/// Constraint total clamp applied before the exponential; exp(30) is
/// still comfortably finite.
pub const CONSTRAINT_EXP_CLAMP: f64 = 30.0;

/// Final objective: `ce + lambda * exp(l_cla + l_sur)`. With `lambda == 0`
/// the cross-entropy handle is returned unchanged, so an ablated run
/// records exactly the plain backbone tape. Returns the loss handle and
/// whether the exp-overflow clamp engaged.
pub fn total_loss(
    tape: &mut Tape,
    ce: TensorId,
    l_cla: Option<TensorId>,
    l_sur: Option<TensorId>,
    lambda: f64,
) -> Result<(TensorId, bool), GdnError> {
    if lambda == 0.0 {
        return Ok((ce, false));
    }
    let constraint = match (l_cla, l_sur) {
        (Some(c), Some(s)) => Some(tape.add(c, s)?),
        (Some(c), None) => Some(c),
        (None, Some(s)) => Some(s),
        (None, None) => None,
    };
    let Some(constraint) = constraint else {
        return Ok((ce, false));
    };
    let flagged = tape.value(constraint).item() > CONSTRAINT_EXP_CLAMP;
    let clamped = tape.clamp_max(constraint, CONSTRAINT_EXP_CLAMP)?;
    let exped = tape.exp(clamped)?;
    let scaled = tape.scale(exped, lambda)?;
    Ok((tape.add(ce, scaled)?, flagged))
}

/// What the separation machinery should do at this epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleAction {
    None,
    RecomputeMask,
}

/// No mask before `warmup`; recompute at `warmup` and every
/// `refresh_every` epochs after it.
pub fn separation_schedule(epoch: usize, warmup: usize, refresh_every: usize) -> ScheduleAction {
    if epoch < warmup {
        ScheduleAction::None
    } else if epoch == warmup {
        ScheduleAction::RecomputeMask
    } else if refresh_every > 0 && (epoch - warmup) % refresh_every == 0 {
        ScheduleAction::RecomputeMask
    } else {
        ScheduleAction::None
    }
}
