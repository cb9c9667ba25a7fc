//! Backbone networks: learnable feature refinement, multi-relation
//! graph convolution with per-relation weights, a single-relation
//! fallback, and the 2-logit classifier head.
//!
//! All forward passes run full-batch on a [`Tape`] so the training loss
//! and the feature-separation machinery can differentiate through them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Label, MultiRelationGraph};
use crate::tape::{Tape, TapeError, TensorId};
use crate::tensor::{matmul, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("graph feature dim {got} does not match config input dim {expected}")]
    InputDimMismatch { expected: usize, got: usize },
    #[error("graph has {got} relations but params were built for {expected}")]
    RelationCountMismatch { expected: usize, got: usize },
    #[error("cross entropy mask is empty")]
    EmptyMask,
    #[error("node {node} has label {label}, expected 0 or 1 on the training mask")]
    UnlabeledInMask { node: usize, label: Label },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint manifest error: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Per-relation convolution weights over the multi-relation graph.
    Rgcn,
    /// Single-relation convolution over the merged graph.
    Gcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub input_dim: usize,
    pub n_relations: usize,
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind, input_dim: usize, n_relations: usize) -> Self {
        BackboneConfig {
            kind,
            hidden_dim: 64,
            n_layers: 2,
            input_dim,
            n_relations: match kind {
                BackboneKind::Rgcn => n_relations,
                BackboneKind::Gcn => 1,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub self_w: Tensor,
    pub rel_w: Vec<Tensor>,
}

/// All learnable weights. The refinement layer produces the refined
/// features the separation constraints act on; convolution layers carry
/// one weight matrix per relation plus a self weight.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub refine_w: Tensor,
    pub refine_b: Tensor,
    pub layers: Vec<LayerParams>,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
}

impl ModelParams {
    /// Canonical flat ordering used by the optimizer, checkpoints, and
    /// tape registration.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.refine_w, &self.refine_b];
        for layer in &self.layers {
            out.push(&layer.self_w);
            out.extend(layer.rel_w.iter());
        }
        out.push(&self.cls_w);
        out.push(&self.cls_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.refine_w, &mut self.refine_b];
        for layer in &mut self.layers {
            out.push(&mut layer.self_w);
            out.extend(layer.rel_w.iter_mut());
        }
        out.push(&mut self.cls_w);
        out.push(&mut self.cls_b);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["refine_w".to_string(), "refine_b".to_string()];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(format!("layer{l}.self_w"));
            for r in 0..layer.rel_w.len() {
                out.push(format!("layer{l}.rel_w{r}"));
            }
        }
        out.push("cls_w".to_string());
        out.push("cls_b".to_string());
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Register every tensor as a tape leaf, in canonical order.
    pub fn register(&self, tape: &mut Tape) -> ParamIds {
        ParamIds {
            refine_w: tape.leaf(self.refine_w.clone()),
            refine_b: tape.leaf(self.refine_b.clone()),
            layers: self
                .layers
                .iter()
                .map(|layer| LayerIds {
                    self_w: tape.leaf(layer.self_w.clone()),
                    rel_w: layer.rel_w.iter().map(|w| tape.leaf(w.clone())).collect(),
                })
                .collect(),
            cls_w: tape.leaf(self.cls_w.clone()),
            cls_b: tape.leaf(self.cls_b.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerIds {
    pub self_w: TensorId,
    pub rel_w: Vec<TensorId>,
}

#[derive(Debug, Clone)]
pub struct ParamIds {
    pub refine_w: TensorId,
    pub refine_b: TensorId,
    pub layers: Vec<LayerIds>,
    pub cls_w: TensorId,
    pub cls_b: TensorId,
}

impl ParamIds {
    pub fn all(&self) -> Vec<TensorId> {
        let mut out = vec![self.refine_w, self.refine_b];
        for layer in &self.layers {
            out.push(layer.self_w);
            out.extend(layer.rel_w.iter().copied());
        }
        out.push(self.cls_w);
        out.push(self.cls_b);
        out
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_vec(fan_in, fan_out, data)
}

/// Glorot-uniform weights, zero biases. Deterministic per seed.
pub fn init_params(config: &BackboneConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.input_dim;
    let h = config.hidden_dim;
    let refine_w = xavier(&mut rng, d, d);
    let refine_b = Tensor::zeros(1, d);
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let in_dim = if l == 0 { d } else { h };
        let self_w = xavier(&mut rng, in_dim, h);
        let rel_w = (0..config.n_relations)
            .map(|_| xavier(&mut rng, in_dim, h))
            .collect();
        layers.push(LayerParams { self_w, rel_w });
    }
    let cls_w = xavier(&mut rng, h, 2);
    let cls_b = Tensor::zeros(1, 2);
    ModelParams {
        refine_w,
        refine_b,
        layers,
        cls_w,
        cls_b,
    }
}

/// Handles produced by a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Refined features X' = relu(X W + b); the separation constraints
    /// differentiate against this tensor.
    pub x_refined: TensorId,
    pub hidden: Vec<TensorId>,
    pub logits: TensorId,
    /// Row-softmax class probabilities, column 1 = anomaly.
    pub probs: TensorId,
}

/// Full-batch forward pass over all nodes.
///
/// Layer rule: `H = relu(H_prev W_self + (1/R) sum_r agg_r(H_prev) W_r)`
/// where `agg_r` is the neighbor mean under relation r; empty
/// neighborhoods aggregate to zero.
pub fn forward(
    tape: &mut Tape,
    g: &MultiRelationGraph,
    ids: &ParamIds,
    config: &BackboneConfig,
) -> Result<ForwardPass, ModelError> {
    if g.feature_dim() != config.input_dim {
        return Err(ModelError::InputDimMismatch {
            expected: config.input_dim,
            got: g.feature_dim(),
        });
    }
    if g.n_relations() != config.n_relations
        || ids.layers.iter().any(|l| l.rel_w.len() != g.n_relations())
    {
        return Err(ModelError::RelationCountMismatch {
            expected: config.n_relations,
            got: g.n_relations(),
        });
    }

    let x = tape.leaf(g.features().clone());
    let xw = tape.matmul(x, ids.refine_w)?;
    let xwb = tape.add_row(xw, ids.refine_b)?;
    let x_refined = tape.relu(xwb)?;

    let r = g.n_relations();
    let mut h = x_refined;
    let mut hidden = Vec::with_capacity(ids.layers.len());
    for layer in &ids.layers {
        let self_term = tape.matmul(h, layer.self_w)?;
        let mut rel_sum: Option<TensorId> = None;
        for (rel, w) in layer.rel_w.iter().enumerate() {
            let agg = tape.neighbor_mean_aggregate(&g.relations()[rel], h)?;
            let term = tape.matmul(agg, *w)?;
            rel_sum = Some(match rel_sum {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        let combined = match rel_sum {
            Some(sum) => {
                let scaled = tape.scale(sum, 1.0 / r as f64)?;
                tape.add(self_term, scaled)?
            }
            None => self_term,
        };
        h = tape.relu(combined)?;
        hidden.push(h);
    }

    let zw = tape.matmul(h, ids.cls_w)?;
    let logits = tape.add_row(zw, ids.cls_b)?;
    let probs = tape.softmax_rows(logits)?;
    Ok(ForwardPass {
        x_refined,
        hidden,
        logits,
        probs,
    })
}

/// Mean negative log-likelihood of the true class over the masked nodes;
/// probabilities are clamped at 1e-12 before the log.
pub fn cross_entropy(
    tape: &mut Tape,
    probs: TensorId,
    labels: &[Label],
    mask: &[usize],
) -> Result<TensorId, ModelError> {
    if mask.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    let mut one_hot = Tensor::zeros(mask.len(), 2);
    for (i, &v) in mask.iter().enumerate() {
        let y = labels[v];
        if y != 0 && y != 1 {
            return Err(ModelError::UnlabeledInMask { node: v, label: y });
        }
        one_hot.set(i, y as usize, 1.0);
    }
    let target = tape.leaf(one_hot);
    let selected = tape.select_rows(probs, mask)?;
    let clamped = tape.clamp_min(selected, 1e-12)?;
    let logged = tape.log(clamped)?;
    let picked = tape.mul(target, logged)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / mask.len() as f64)?)
}

/// Refined features without a tape, for analysis on trained checkpoints.
pub fn refined_features(g: &MultiRelationGraph, params: &ModelParams) -> Tensor {
    let mut out = matmul(g.features(), &params.refine_w);
    let bias = params.refine_b.data();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (x, &b) in row.iter_mut().zip(bias) {
            *x += b;
            if *x < 0.0 {
                *x = 0.0;
            }
        }
    }
    out
}

/// Per-run metadata carried alongside checkpoint weights so evaluation
/// can reproduce stored metrics exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub threshold: f64,
    pub split_mode: String,
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    backbone: BackboneConfig,
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

/// Write `<stem>.bin` (flat little-endian f64) plus `<stem>.json` (shape
/// manifest and run metadata).
pub fn save_checkpoint(
    stem: &Path,
    params: &ModelParams,
    config: &BackboneConfig,
    meta: &CheckpointMeta,
) -> Result<(), ModelError> {
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let names = params.tensor_names();
    for (tensor, name) in params.tensors().into_iter().zip(names) {
        entries.push(TensorEntry {
            name,
            rows: tensor.rows(),
            cols: tensor.cols(),
            offset: blob.len() / 8,
        });
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        backbone: *config,
        tensors: entries,
        meta: meta.clone(),
    };
    let bin_path = stem.with_extension("bin");
    fs::write(&bin_path, &blob).map_err(|e| ModelError::Io {
        path: bin_path.clone(),
        source: e,
    })?;
    let json_path = stem.with_extension("json");
    fs::write(
        &json_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| ModelError::Io {
        path: json_path,
        source: e,
    })
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(
    stem: &Path,
) -> Result<(ModelParams, BackboneConfig, CheckpointMeta), ModelError> {
    let json_path = stem.with_extension("json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&json_path).map_err(
        |e| ModelError::Io {
            path: json_path.clone(),
            source: e,
        },
    )?)
    .map_err(|e| ModelError::Manifest(format!("{}: {e}", json_path.display())))?;
    let bin_path = stem.with_extension("bin");
    let blob = fs::read(&bin_path).map_err(|e| ModelError::Io {
        path: bin_path.clone(),
        source: e,
    })?;

    let read_tensor = |entry: &TensorEntry| -> Result<Tensor, ModelError> {
        let start = entry.offset * 8;
        let len = entry.rows * entry.cols * 8;
        let slice = blob.get(start..start + len).ok_or_else(|| {
            ModelError::Manifest(format!("tensor {} overruns weight blob", entry.name))
        })?;
        let data = slice
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        Ok(Tensor::from_vec(entry.rows, entry.cols, data))
    };

    let expect = |pos: usize, name: &str| -> Result<Tensor, ModelError> {
        let entry = manifest
            .tensors
            .get(pos)
            .ok_or_else(|| ModelError::Manifest(format!("missing tensor {name}")))?;
        if entry.name != name {
            return Err(ModelError::Manifest(format!(
                "expected tensor {name} at slot {pos}, found {}",
                entry.name
            )));
        }
        read_tensor(entry)
    };

    let cfg = manifest.backbone;
    let mut pos = 0;
    let refine_w = expect(pos, "refine_w")?;
    pos += 1;
    let refine_b = expect(pos, "refine_b")?;
    pos += 1;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let self_w = expect(pos, &format!("layer{l}.self_w"))?;
        pos += 1;
        let mut rel_w = Vec::with_capacity(cfg.n_relations);
        for r in 0..cfg.n_relations {
            rel_w.push(expect(pos, &format!("layer{l}.rel_w{r}"))?);
            pos += 1;
        }
        layers.push(LayerParams { self_w, rel_w });
    }
    let cls_w = expect(pos, "cls_w")?;
    pos += 1;
    let cls_b = expect(pos, "cls_b")?;
    Ok((
        ModelParams {
            refine_w,
            refine_b,
            layers,
            cls_w,
            cls_b,
        },
        cfg,
        manifest.meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;
    use rand::seq::SliceRandom;

    fn small_config(d: usize, r: usize, hidden: usize) -> BackboneConfig {
        BackboneConfig {
            kind: BackboneKind::Rgcn,
            hidden_dim: hidden,
            n_layers: 2,
            input_dim: d,
            n_relations: r,
        }
    }

    fn random_graph(seed: u64, n: usize, d: usize, relations: usize) -> MultiRelationGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = Tensor::from_vec(
            n,
            d,
            (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let labels: Vec<Label> = (0..n).map(|v| (v % 3 == 0) as Label).collect();
        let mut edge_lists = Vec::new();
        for _ in 0..relations {
            let edges: Vec<(usize, usize)> = (0..2 * n)
                .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
                .filter(|(u, v)| u != v)
                .collect();
            edge_lists.push(edges);
        }
        MultiRelationGraph::from_edge_lists(features, labels, &edge_lists)
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = small_config(5, 2, 8);
        let a = init_params(&cfg, 3);
        let b = init_params(&cfg, 3);
        for (ta, tb) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(ta.data(), tb.data());
        }
        let c = init_params(&cfg, 4);
        assert_ne!(a.refine_w.data(), c.refine_w.data());

        let bound = (6.0_f64 / (5.0 + 8.0)).sqrt();
        assert!(a.layers[0].self_w.data().iter().all(|w| w.abs() <= bound));
        assert!(a.refine_b.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let g = random_graph(0, 6, 4, 2);
        let cfg = small_config(4, 2, 8);
        let mut params = init_params(&cfg, 0);
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let pass = forward(&mut tape, &g, &ids, &cfg).unwrap();
        for i in 0..g.n_nodes() {
            assert_eq!(tape.value(pass.probs).row(i), &[0.5, 0.5]);
        }
    }

    #[test]
    fn edgeless_graph_reduces_to_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 5;
        let d = 3;
        let features = Tensor::from_vec(
            n,
            d,
            (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let labels = vec![0 as Label; n];
        let g = MultiRelationGraph::from_edge_lists(features.clone(), labels, &[vec![]]);
        let cfg = small_config(d, 1, 4);
        let params = init_params(&cfg, 9);

        let mut tape = Tape::new();
        let ids = params.register(&mut tape);
        let pass = forward(&mut tape, &g, &ids, &cfg).unwrap();

        // hand-built MLP path: relu(relu(X' W1) W2) W_cls + b
        let mut mlp = Tape::new();
        let x = mlp.leaf(features);
        let rw = mlp.leaf(params.refine_w.clone());
        let rb = mlp.leaf(params.refine_b.clone());
        let xw = mlp.matmul(x, rw).unwrap();
        let xwb = mlp.add_row(xw, rb).unwrap();
        let mut h = mlp.relu(xwb).unwrap();
        for layer in &params.layers {
            let w = mlp.leaf(layer.self_w.clone());
            let hw = mlp.matmul(h, w).unwrap();
            // aggregation over an empty neighborhood contributes a zero
            // matrix; mirror the add to keep the op sequence identical
            let zero = mlp.leaf(Tensor::zeros(n, layer.self_w.cols()));
            let hw = mlp.add(hw, zero).unwrap();
            h = mlp.relu(hw).unwrap();
        }
        let cw = mlp.leaf(params.cls_w.clone());
        let cb = mlp.leaf(params.cls_b.clone());
        let zw = mlp.matmul(h, cw).unwrap();
        let logits = mlp.add_row(zw, cb).unwrap();
        assert_eq!(tape.value(pass.logits).data(), mlp.value(logits).data());
    }

    #[test]
    fn cross_entropy_examples() {
        // perfectly confident correct predictions -> exactly 0
        let mut tape = Tape::new();
        let probs = tape.leaf(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        let loss = cross_entropy(&mut tape, probs, &[1, 0], &[0, 1]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        // uniform predictions -> ln 2
        let mut tape = Tape::new();
        let probs = tape.leaf(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]));
        let loss = cross_entropy(&mut tape, probs, &[1, 0], &[0, 1]).unwrap();
        assert!((tape.value(loss).item() - 2.0_f64.ln()).abs() < 1e-15);

        // 5-node case against the direct formula
        let p = [
            [0.9, 0.1],
            [0.3, 0.7],
            [0.6, 0.4],
            [0.2, 0.8],
            [0.55, 0.45],
        ];
        let labels: Vec<Label> = vec![0, 1, 0, 1, 1];
        let mut tape = Tape::new();
        let probs = tape.leaf(Tensor::from_rows(
            &p.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
        ));
        let mask = [0, 1, 2, 3, 4];
        let loss = cross_entropy(&mut tape, probs, &labels, &mask).unwrap();
        let expected = -(p[0][0].ln() + p[1][1].ln() + p[2][0].ln() + p[3][1].ln() + p[4][1].ln())
            / 5.0;
        assert!((tape.value(loss).item() - expected).abs() <= 1e-12);

        let mut tape = Tape::new();
        let probs = tape.leaf(Tensor::from_rows(&[vec![0.5, 0.5]]));
        assert!(matches!(
            cross_entropy(&mut tape, probs, &[0], &[]),
            Err(ModelError::EmptyMask)
        ));
    }

    #[test]
    fn twelve_node_ce_gradients_match_finite_differences() {
        let g = random_graph(12, 12, 5, 2);
        let cfg = BackboneConfig {
            kind: BackboneKind::Rgcn,
            hidden_dim: 6,
            n_layers: 2,
            input_dim: 5,
            n_relations: 2,
        };
        let params = init_params(&cfg, 7);
        let mask: Vec<usize> = (0..12).collect();
        let labels = g.labels().to_vec();
        let flat: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
        let n_layers = cfg.n_layers;
        let n_rel = cfg.n_relations;
        let report = grad_check(
            |tape, ids| {
                let mut pos = 0;
                let refine_w = ids[pos];
                pos += 1;
                let refine_b = ids[pos];
                pos += 1;
                let mut layers = Vec::new();
                for _ in 0..n_layers {
                    let self_w = ids[pos];
                    pos += 1;
                    let rel_w = ids[pos..pos + n_rel].to_vec();
                    pos += n_rel;
                    layers.push(LayerIds { self_w, rel_w });
                }
                let pid = ParamIds {
                    refine_w,
                    refine_b,
                    layers,
                    cls_w: ids[pos],
                    cls_b: ids[pos + 1],
                };
                let pass = forward(tape, &g, &pid, &cfg).map_err(|e| match e {
                    ModelError::Tape(t) => t,
                    other => panic!("unexpected error {other}"),
                })?;
                cross_entropy(tape, pass.probs, &labels, &mask).map_err(|e| match e {
                    ModelError::Tape(t) => t,
                    other => panic!("unexpected error {other}"),
                })
            },
            &flat,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_error);
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for trial in 0..3 {
            let g = random_graph(100 + trial, 20, 4, 2);
            let cfg = small_config(4, 2, 8);
            let params = init_params(&cfg, trial);

            let mut perm: Vec<usize> = (0..20).collect();
            perm.shuffle(&mut rng);
            // permuted graph: node v of the original becomes perm[v]
            let mut feat = Tensor::zeros(20, 4);
            let mut labels = vec![0 as Label; 20];
            for v in 0..20 {
                feat.row_mut(perm[v]).copy_from_slice(g.features().row(v));
                labels[perm[v]] = g.labels()[v];
            }
            let edge_lists: Vec<Vec<(usize, usize)>> = g
                .relations()
                .iter()
                .map(|rel| {
                    rel.edge_list()
                        .into_iter()
                        .map(|(u, v)| (perm[u], perm[v]))
                        .collect()
                })
                .collect();
            let gp = MultiRelationGraph::from_edge_lists(feat, labels, &edge_lists);

            let mut tape1 = Tape::new();
            let ids1 = params.register(&mut tape1);
            let out1 = forward(&mut tape1, &g, &ids1, &cfg).unwrap();
            let mut tape2 = Tape::new();
            let ids2 = params.register(&mut tape2);
            let out2 = forward(&mut tape2, &gp, &ids2, &cfg).unwrap();

            let z1 = tape1.value(out1.logits);
            let z2 = tape2.value(out2.logits);
            for v in 0..20 {
                for c in 0..2 {
                    assert!((z1.get(v, c) - z2.get(perm[v], c)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn gcn_kind_equals_rgcn_on_single_relation() {
        let g = random_graph(31, 15, 4, 3).merge_relations();
        let rgcn_cfg = small_config(4, 1, 8);
        let gcn_cfg = BackboneConfig {
            kind: BackboneKind::Gcn,
            ..rgcn_cfg
        };
        let params = init_params(&rgcn_cfg, 5);
        let params_gcn = init_params(&gcn_cfg, 5);
        for (a, b) in params.tensors().iter().zip(params_gcn.tensors()) {
            assert_eq!(a.data(), b.data());
        }

        let mut t1 = Tape::new();
        let ids1 = params.register(&mut t1);
        let o1 = forward(&mut t1, &g, &ids1, &rgcn_cfg).unwrap();
        let mut t2 = Tape::new();
        let ids2 = params_gcn.register(&mut t2);
        let o2 = forward(&mut t2, &g, &ids2, &gcn_cfg).unwrap();
        assert_eq!(t1.value(o1.logits).data(), t2.value(o2.logits).data());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let cfg = small_config(4, 2, 8);
        let params = init_params(&cfg, 77);
        let meta = CheckpointMeta {
            seed: 77,
            threshold: 0.5,
            split_mode: "normal".into(),
            config_hash: "abc123".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        save_checkpoint(&stem, &params, &cfg, &meta).unwrap();
        let (loaded, cfg2, meta2) = load_checkpoint(&stem).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(meta.config_hash, meta2.config_hash);
        for (a, b) in params.tensors().iter().zip(loaded.tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }
}
