//! Feature-quality probes and separation-stability reporting.
//!
//! Two deliberately simple classifiers measure how much signal a feature
//! combination carries: a logistic regression (feature quality in
//! isolation) and label propagation over a similarity-reconstructed kNN
//! graph (how well features encode local structure). The variants probed
//! are the class dims C, the surround complement S, raw vs refined.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gdn::FeatureMask;
use crate::graph::{Csr, Label};
use crate::metrics::{auc, MetricsError};
use crate::models::{cross_entropy, ModelError};
use crate::splits::SplitAssignment;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("train mask needs both classes")]
    SingleClassTrain,
    #[error("empty {0} mask")]
    EmptyMask(&'static str),
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("feature masks disagree: {0}")]
    MaskMismatch(String),
}

/// Train a single linear layer + 2-class softmax by full-batch gradient
/// descent on cross entropy; report AUC of the anomaly probability on the
/// test mask. `epochs == 0` scores the random initialization.
pub fn logistic_regression(
    features: &Tensor,
    labels: &[Label],
    split: &SplitAssignment,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> Result<f64, AnalysisError> {
    let train = split.train();
    let test = split.test();
    if train.is_empty() {
        return Err(AnalysisError::EmptyMask("train"));
    }
    if test.is_empty() {
        return Err(AnalysisError::EmptyMask("test"));
    }
    if !(train.iter().any(|&v| labels[v] == 1) && train.iter().any(|&v| labels[v] == 0)) {
        return Err(AnalysisError::SingleClassTrain);
    }

    let d = features.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (6.0 / (d + 2) as f64).sqrt();
    let mut w = Tensor::from_vec(
        d,
        2,
        (0..d * 2).map(|_| rng.gen_range(-bound..bound)).collect(),
    );
    let mut b = Tensor::zeros(1, 2);

    let train_rows = {
        let mut t = Tensor::zeros(train.len(), d);
        for (i, &v) in train.iter().enumerate() {
            t.row_mut(i).copy_from_slice(features.row(v));
        }
        t
    };
    let train_labels: Vec<Label> = train.iter().map(|&v| labels[v]).collect();
    let local_mask: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..epochs {
        let mut tape = Tape::new();
        let x = tape.leaf(train_rows.clone());
        let wid = tape.leaf(w.clone());
        let bid = tape.leaf(b.clone());
        let loss = (|| {
            let xw = tape.matmul(x, wid)?;
            let logits = tape.add_row(xw, bid)?;
            let probs = tape.softmax_rows(logits)?;
            cross_entropy(&mut tape, probs, &train_labels, &local_mask)
        })()
        .map_err(|_: ModelError| AnalysisError::Diverged { epoch })?;
        if !tape.value(loss).item().is_finite() {
            return Err(AnalysisError::Diverged { epoch });
        }
        let grads = tape
            .backward(loss)
            .map_err(|_| AnalysisError::Diverged { epoch })?;
        let gw = grads.dense(wid, d, 2);
        let gb = grads.dense(bid, 1, 2);
        for (p, g) in w.data_mut().iter_mut().zip(gw.data()) {
            *p -= lr * g;
        }
        for (p, g) in b.data_mut().iter_mut().zip(gb.data()) {
            *p -= lr * g;
        }
    }

    // score all nodes with the trained layer
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let wid = tape.leaf(w);
    let bid = tape.leaf(b);
    let scores = (|| {
        let xw = tape.matmul(x, wid)?;
        let logits = tape.add_row(xw, bid)?;
        tape.softmax_rows(logits)
    })()
    .map_err(|_| AnalysisError::Diverged { epoch: epochs })?;
    let probs = tape.value(scores);
    let anomaly_scores: Vec<f64> = (0..features.rows()).map(|v| probs.get(v, 1)).collect();
    Ok(auc(&anomaly_scores, labels, &test)?)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Symmetric kNN graph by cosine similarity: u-v is an edge when either
/// endpoint ranks the other among its top k. Deterministic tie-breaking
/// toward lower node ids.
pub fn knn_graph(features: &Tensor, k: usize) -> Csr {
    let n = features.rows();
    let mut edges = Vec::with_capacity(n * k);
    for v in 0..n {
        let mut sims: Vec<(f64, usize)> = (0..n)
            .filter(|&u| u != v)
            .map(|u| (cosine(features.row(v), features.row(u)), u))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, u) in sims.iter().take(k) {
            edges.push((v, u));
        }
    }
    Csr::from_edges(n, &edges)
}

fn lp_iterate<F>(
    adj: &Csr,
    y0: &Tensor,
    train_rows: &[bool],
    alpha: f64,
    iters: usize,
    mut observer: F,
) -> Tensor
where
    F: FnMut(&Tensor),
{
    let n = y0.rows();
    let mut f = y0.clone();
    for _ in 0..iters {
        let mut next = Tensor::zeros(n, 2);
        for v in 0..n {
            let nbrs = adj.neighbors(v);
            let mut agg = [0.0, 0.0];
            if !nbrs.is_empty() {
                for &u in nbrs {
                    agg[0] += f.get(u, 0);
                    agg[1] += f.get(u, 1);
                }
                let inv = 1.0 / nbrs.len() as f64;
                agg[0] *= inv;
                agg[1] *= inv;
            }
            for c in 0..2 {
                next.set(v, c, alpha * agg[c] + (1.0 - alpha) * y0.get(v, c));
            }
        }
        for v in 0..n {
            if train_rows[v] {
                next.row_mut(v).copy_from_slice(y0.row(v));
            }
        }
        f = next;
        observer(&f);
    }
    f
}

/// Label propagation over a cosine-kNN graph rebuilt from the given
/// features: iterate `F <- alpha * D^-1 A F + (1 - alpha) * Y0` with train
/// rows clamped, then score test nodes by their normalized class-1 mass
/// (0.5 when no mass arrived). Returns AUC on the test mask.
pub fn label_propagation(
    features: &Tensor,
    labels: &[Label],
    split: &SplitAssignment,
    knn_k: usize,
    iters: usize,
    alpha: f64,
) -> Result<f64, AnalysisError> {
    if knn_k == 0 {
        return Err(AnalysisError::BadParam("knn_k must be >= 1".into()));
    }
    if iters == 0 {
        return Err(AnalysisError::BadParam("iters must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(AnalysisError::BadParam(format!(
            "alpha {alpha} outside [0, 1)"
        )));
    }
    let test = split.test();
    if test.is_empty() {
        return Err(AnalysisError::EmptyMask("test"));
    }
    let n = features.rows();
    let adj = knn_graph(features, knn_k);
    let mut y0 = Tensor::zeros(n, 2);
    let mut train_rows = vec![false; n];
    for v in split.train() {
        train_rows[v] = true;
        y0.set(v, labels[v] as usize, 1.0);
    }
    let f = lp_iterate(&adj, &y0, &train_rows, alpha, iters, |_| {});
    let scores: Vec<f64> = (0..n)
        .map(|v| {
            let total = f.get(v, 0) + f.get(v, 1);
            if total > 0.0 {
                f.get(v, 1) / total
            } else {
                0.5
            }
        })
        .collect();
    Ok(auc(&scores, labels, &test)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantTag {
    /// Raw input restricted to the class dims.
    C,
    /// Refined features restricted to the class dims.
    CPrime,
    /// Raw input, all dims.
    CS,
    /// Refined features, all dims.
    CSPrime,
}

#[derive(Debug, Clone)]
pub struct FeatureVariant {
    pub tag: VariantTag,
    pub matrix: Tensor,
}

fn restrict_columns(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(t.rows(), idx.len());
    for i in 0..t.rows() {
        let src = t.row(i);
        let dst = out.row_mut(i);
        for (k, &j) in idx.iter().enumerate() {
            dst[k] = src[j];
        }
    }
    out
}

/// The four probed combinations: raw/refined x class-dims/all-dims.
pub fn feature_variants(
    raw: &Tensor,
    refined: &Tensor,
    mask: &FeatureMask,
) -> Vec<FeatureVariant> {
    vec![
        FeatureVariant {
            tag: VariantTag::C,
            matrix: restrict_columns(raw, &mask.class_idx),
        },
        FeatureVariant {
            tag: VariantTag::CPrime,
            matrix: restrict_columns(refined, &mask.class_idx),
        },
        FeatureVariant {
            tag: VariantTag::CS,
            matrix: raw.clone(),
        },
        FeatureVariant {
            tag: VariantTag::CSPrime,
            matrix: refined.clone(),
        },
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Pairwise Jaccard overlap of the class-dim sets.
    pub jaccard: Vec<Vec<f64>>,
    /// How many masks selected each dimension.
    pub selection_frequency: Vec<usize>,
    pub mean_pairwise_jaccard: f64,
}

/// Cross-seed stability of the class-dim selection.
pub fn stability_report(masks: &[FeatureMask]) -> Result<StabilityReport, AnalysisError> {
    if masks.len() < 2 {
        return Err(AnalysisError::MaskMismatch(
            "need at least 2 masks".into(),
        ));
    }
    let d = masks[0].dim();
    let k = masks[0].k;
    for (i, m) in masks.iter().enumerate() {
        if m.dim() != d || m.k != k {
            return Err(AnalysisError::MaskMismatch(format!(
                "mask {i} has (d, k) = ({}, {}), expected ({d}, {k})",
                m.dim(),
                m.k
            )));
        }
    }
    let sets: Vec<Vec<bool>> = masks
        .iter()
        .map(|m| {
            let mut set = vec![false; d];
            for &j in &m.class_idx {
                set[j] = true;
            }
            set
        })
        .collect();
    let mut jaccard = vec![vec![0.0; masks.len()]; masks.len()];
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..masks.len() {
        for j in 0..masks.len() {
            let mut inter = 0usize;
            let mut union = 0usize;
            for dim in 0..d {
                if sets[i][dim] && sets[j][dim] {
                    inter += 1;
                }
                if sets[i][dim] || sets[j][dim] {
                    union += 1;
                }
            }
            let value = if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            };
            jaccard[i][j] = value;
            if i < j {
                total += value;
                pairs += 1;
            }
        }
    }
    let mut selection_frequency = vec![0usize; d];
    for set in &sets {
        for (dim, &selected) in set.iter().enumerate() {
            if selected {
                selection_frequency[dim] += 1;
            }
        }
    }
    Ok(StabilityReport {
        jaccard,
        selection_frequency,
        mean_pairwise_jaccard: total / pairs as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splits::stratified_split;
    use crate::synth::{generate, ClassHomophily, SynthSpec};
    use crate::MultiRelationGraph;

    fn blob_features(seed: u64, n_per_class: usize, gap: f64) -> (Tensor, Vec<Label>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in [1, 0] {
            let center = if class == 1 { gap } else { -gap };
            for _ in 0..n_per_class {
                rows.push(vec![
                    center + rng.gen_range(-0.5..0.5),
                    center + rng.gen_range(-0.5..0.5),
                ]);
                labels.push(class as Label);
            }
        }
        (Tensor::from_rows(&rows), labels)
    }

    fn trivial_split(labels: &[Label], seed: u64) -> SplitAssignment {
        let g = MultiRelationGraph::from_edge_lists(
            Tensor::zeros(labels.len(), 1),
            labels.to_vec(),
            &[vec![]],
        );
        stratified_split(&g, (0.4, 0.2, 0.4), seed).unwrap()
    }

    #[test]
    fn lr_separates_blobs() {
        let (features, labels) = blob_features(0, 50, 2.0);
        let split = trivial_split(&labels, 0);
        let auc = logistic_regression(&features, &labels, &split, 0.5, 200, 0).unwrap();
        assert!(auc >= 0.99, "auc {auc}");
    }

    #[test]
    fn lr_on_permuted_labels_is_chance() {
        let (features, labels) = blob_features(1, 50, 2.0);
        let mut sum = 0.0;
        for seed in 0..5 {
            // permute labels so features carry no signal
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let mut permuted = labels.clone();
            use rand::seq::SliceRandom;
            permuted.shuffle(&mut rng);
            let split = trivial_split(&permuted, seed);
            sum += logistic_regression(&features, &permuted, &split, 0.5, 100, seed).unwrap();
        }
        let mean = sum / 5.0;
        assert!((mean - 0.5).abs() <= 0.1, "mean auc {mean}");
    }

    #[test]
    fn lr_zero_epochs_is_deterministic() {
        let (features, labels) = blob_features(2, 30, 2.0);
        let split = trivial_split(&labels, 3);
        let a = logistic_regression(&features, &labels, &split, 0.5, 0, 9).unwrap();
        let b = logistic_regression(&features, &labels, &split, 0.5, 0, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mu_zero_features_carry_no_signal() {
        // generator null check: without planted signal LR sits at chance
        let spec = SynthSpec {
            n_nodes: 600,
            anomaly_ratio: 0.3,
            homophily: vec![ClassHomophily {
                normal: 0.5,
                anomaly: 0.5,
            }],
            mean_degree: 6,
            feature_dim: 8,
            informative_dims: vec![0, 1],
            signal_strength: 0.0,
            noise_std: 1.0,
            seed: 5,
        };
        let mut sum = 0.0;
        for seed in 0..5 {
            let g = generate(&SynthSpec { seed, ..spec.clone() }).unwrap();
            let split = stratified_split(&g, (0.4, 0.2, 0.4), seed).unwrap();
            sum += logistic_regression(g.features(), g.labels(), &split, 0.5, 100, seed).unwrap();
        }
        let mean = sum / 5.0;
        assert!((mean - 0.5).abs() <= 0.1, "mean auc {mean}");
    }

    #[test]
    fn lp_pure_clusters_reach_auc_one() {
        let (features, labels) = blob_features(3, 40, 3.0);
        let split = trivial_split(&labels, 1);
        let auc = label_propagation(&features, &labels, &split, 5, 30, 0.85).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn lp_alpha_zero_gives_chance_with_ties() {
        let (features, labels) = blob_features(4, 25, 3.0);
        let split = trivial_split(&labels, 2);
        let auc = label_propagation(&features, &labels, &split, 5, 10, 0.0).unwrap();
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn lp_matches_dense_iteration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let n = 30;
        let features = Tensor::from_vec(
            n,
            4,
            (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let labels: Vec<Label> = (0..n).map(|v| (v % 4 == 0) as Label).collect();
        let split = trivial_split(&labels, 4);
        let (knn_k, iters, alpha) = (4, 3, 0.85);
        let got = label_propagation(&features, &labels, &split, knn_k, iters, alpha).unwrap();

        // dense-matrix re-implementation
        let adj = knn_graph(&features, knn_k);
        let mut a = vec![vec![0.0; n]; n];
        for v in 0..n {
            let nbrs = adj.neighbors(v);
            for &u in nbrs {
                a[v][u] = 1.0 / nbrs.len() as f64;
            }
        }
        let train = split.train();
        let mut y0 = vec![[0.0; 2]; n];
        for &v in &train {
            y0[v][labels[v] as usize] = 1.0;
        }
        let mut f = y0.clone();
        for _ in 0..iters {
            let mut next = vec![[0.0; 2]; n];
            for v in 0..n {
                for c in 0..2 {
                    let agg: f64 = (0..n).map(|u| a[v][u] * f[u][c]).sum();
                    next[v][c] = alpha * agg + (1.0 - alpha) * y0[v][c];
                }
            }
            for &v in &train {
                next[v] = y0[v];
            }
            f = next;
        }
        let scores: Vec<f64> = (0..n)
            .map(|v| {
                let total = f[v][0] + f[v][1];
                if total > 0.0 {
                    f[v][1] / total
                } else {
                    0.5
                }
            })
            .collect();
        let expected = auc(&scores, &labels, &split.test()).unwrap();
        assert!((got - expected).abs() <= 1e-9);
    }

    #[test]
    fn lp_rows_stay_substochastic() {
        let (features, labels) = blob_features(6, 30, 1.0);
        let split = trivial_split(&labels, 6);
        let n = features.rows();
        let adj = knn_graph(&features, 4);
        let mut y0 = Tensor::zeros(n, 2);
        let mut train_rows = vec![false; n];
        for v in split.train() {
            train_rows[v] = true;
            y0.set(v, labels[v] as usize, 1.0);
        }
        lp_iterate(&adj, &y0, &train_rows, 0.85, 20, |f| {
            for v in 0..n {
                let sum: f64 = f.row(v).iter().sum();
                assert!(sum <= 1.0 + 1e-9, "row sum {sum}");
            }
        });
    }

    fn mask_of(class_idx: Vec<usize>, d: usize) -> FeatureMask {
        let surround_idx = (0..d).filter(|j| !class_idx.contains(j)).collect();
        FeatureMask {
            k: class_idx.len(),
            class_idx,
            surround_idx,
            scores: vec![0.0; d],
        }
    }

    #[test]
    fn stability_identical_and_disjoint() {
        let a = mask_of(vec![0, 1], 6);
        let report = stability_report(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert!(report.jaccard.iter().flatten().all(|&x| x == 1.0));
        assert_eq!(report.selection_frequency, vec![3, 3, 0, 0, 0, 0]);

        let b = mask_of(vec![2, 3], 6);
        let report = stability_report(&[a, b]).unwrap();
        assert_eq!(report.jaccard[0][1], 0.0);
        assert_eq!(report.mean_pairwise_jaccard, 0.0);
    }

    #[test]
    fn stability_matches_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let d = 10;
        let k = 4;
        let masks: Vec<FeatureMask> = (0..4)
            .map(|_| {
                let mut dims: Vec<usize> = (0..d).collect();
                use rand::seq::SliceRandom;
                dims.shuffle(&mut rng);
                let mut class: Vec<usize> = dims[..k].to_vec();
                class.sort_unstable();
                mask_of(class, d)
            })
            .collect();
        let report = stability_report(&masks).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let si: std::collections::HashSet<_> = masks[i].class_idx.iter().collect();
                let sj: std::collections::HashSet<_> = masks[j].class_idx.iter().collect();
                let inter = si.intersection(&sj).count() as f64;
                let union = si.union(&sj).count() as f64;
                assert!((report.jaccard[i][j] - inter / union).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn stability_rejects_mismatched_masks() {
        let a = mask_of(vec![0, 1], 6);
        let b = mask_of(vec![0, 1, 2], 6);
        assert!(matches!(
            stability_report(&[a, b]),
            Err(AnalysisError::MaskMismatch(_))
        ));
    }

    #[test]
    fn variants_have_expected_shapes() {
        let raw = Tensor::zeros(5, 6);
        let refined = Tensor::zeros(5, 6);
        let mask = mask_of(vec![1, 4], 6);
        let variants = feature_variants(&raw, &refined, &mask);
        assert_eq!(variants[0].matrix.shape(), (5, 2));
        assert_eq!(variants[1].matrix.shape(), (5, 2));
        assert_eq!(variants[2].matrix.shape(), (5, 6));
        assert_eq!(variants[3].matrix.shape(), (5, 6));
        assert_eq!(variants[0].tag, VariantTag::C);
    }

    #[test]
    fn lp_rejects_bad_params() {
        let (features, labels) = blob_features(7, 10, 1.0);
        let split = trivial_split(&labels, 7);
        assert!(label_propagation(&features, &labels, &split, 0, 5, 0.5).is_err());
        assert!(label_propagation(&features, &labels, &split, 3, 0, 0.5).is_err());
        assert!(label_propagation(&features, &labels, &split, 3, 5, 1.0).is_err());
    }
}
