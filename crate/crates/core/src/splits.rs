//! Train/valid/test split construction and structural-shift diagnostics.
//!
//! Two split modes exist: a class-stratified random split, and a biased
//! split where a labeled node enters the observed pool (train + valid)
//! with probability proportional to its neighborhood label similarity.
//! The biased mode deliberately skews the observed homophily
//! distribution; `sds_report` quantifies the resulting shift per class.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    homophily_profile, GraphError, Label, MultiRelationGraph, RelationSelector,
};

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("ratios {0:?} must be nonnegative and sum to 1")]
    BadRatios((f64, f64, f64)),
    #[error("class {label} has {size} labeled nodes, too few for the requested buckets")]
    ClassTooSmall { label: Label, size: usize },
    #[error("graph has no labeled nodes of class {0}")]
    MissingClass(Label),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: cannot parse split row: {value}")]
    BadSplitRow {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("split references node {node} but the graph has {n_nodes} nodes")]
    NodeOutOfRange { node: usize, n_nodes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Valid,
    Test,
    /// Unlabeled nodes: never trained on, never scored.
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Normal,
    Biased,
}

/// Per-node role assignment plus the metadata that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub roles: Vec<Role>,
    pub mode: SplitMode,
    pub seed: u64,
    pub ratios: (f64, f64, f64),
    /// Eq-style observation probabilities, biased mode only. Entries for
    /// unlabeled nodes are 0.
    pub observe_prob: Option<Vec<f64>>,
    /// Degenerate-weight diagnostics emitted during biased sampling.
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn nodes_with_role(&self, role: Role) -> Vec<usize> {
        (0..self.roles.len())
            .filter(|&v| self.roles[v] == role)
            .collect()
    }

    pub fn train(&self) -> Vec<usize> {
        self.nodes_with_role(Role::Train)
    }

    pub fn valid(&self) -> Vec<usize> {
        self.nodes_with_role(Role::Valid)
    }

    pub fn test(&self) -> Vec<usize> {
        self.nodes_with_role(Role::Test)
    }

    /// Train and valid nodes together; both count as observed.
    pub fn observed(&self) -> Vec<usize> {
        (0..self.roles.len())
            .filter(|&v| matches!(self.roles[v], Role::Train | Role::Valid))
            .collect()
    }
}

fn check_ratios(ratios: (f64, f64, f64)) -> Result<(), SplitError> {
    let (t, v, s) = ratios;
    if t < 0.0 || v < 0.0 || s < 0.0 || (t + v + s - 1.0).abs() > 1e-9 {
        return Err(SplitError::BadRatios(ratios));
    }
    Ok(())
}

fn class_members(g: &MultiRelationGraph, label: Label) -> Vec<usize> {
    (0..g.n_nodes())
        .filter(|&v| g.labels()[v] == label)
        .collect()
}

fn bucket_counts(
    n: usize,
    ratios: (f64, f64, f64),
    label: Label,
) -> Result<(usize, usize, usize), SplitError> {
    let n_train = (ratios.0 * n as f64).round() as usize;
    let n_valid = (ratios.1 * n as f64).round() as usize;
    let (n_train, n_valid) = if n_train + n_valid > n {
        (n_train.min(n), n.saturating_sub(n_train))
    } else {
        (n_train, n_valid)
    };
    let n_test = n - n_train - n_valid;
    for (count, ratio) in [(n_train, ratios.0), (n_valid, ratios.1), (n_test, ratios.2)] {
        if ratio > 0.0 && count == 0 {
            return Err(SplitError::ClassTooSmall { label, size: n });
        }
    }
    Ok((n_train, n_valid, n_test))
}

/// Class-stratified random split: within each class, nodes are shuffled
/// by a seeded PRNG and partitioned by the ratios. Deterministic per seed.
pub fn stratified_split(
    g: &MultiRelationGraph,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment, SplitError> {
    check_ratios(ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut roles = vec![Role::Excluded; g.n_nodes()];
    for label in [0, 1] {
        let mut members = class_members(g, label);
        if members.is_empty() {
            return Err(SplitError::MissingClass(label));
        }
        let (n_train, n_valid, _) = bucket_counts(members.len(), ratios, label)?;
        members.shuffle(&mut rng);
        for (i, &v) in members.iter().enumerate() {
            roles[v] = if i < n_train {
                Role::Train
            } else if i < n_train + n_valid {
                Role::Valid
            } else {
                Role::Test
            };
        }
    }
    Ok(SplitAssignment {
        roles,
        mode: SplitMode::Normal,
        seed,
        ratios,
        observe_prob: None,
        warnings: Vec::new(),
    })
}

/// Neighborhood label similarity used as the observation probability:
/// the fraction of labeled neighbors sharing the center's label.
/// Isolated nodes (or nodes without labeled neighbors) get the
/// uninformative weight 0.5.
pub fn observation_weights(
    g: &MultiRelationGraph,
    prob_source: RelationSelector,
) -> Result<Vec<f64>, SplitError> {
    let profile = homophily_profile(g, prob_source, g.labels())?;
    let mut weights = vec![0.0; g.n_nodes()];
    for v in 0..g.n_nodes() {
        if g.labels()[v] < 0 {
            continue;
        }
        weights[v] = profile.homo(v).unwrap_or(0.5);
    }
    Ok(weights)
}

/// Biased split: per class, nodes enter the observed pool by weighted
/// sampling without replacement with weight equal to their neighborhood
/// label similarity (exponential-keys scheme, equivalent to sequential
/// draws proportional to the weights); the pool is then split into train
/// and valid uniformly at random. Remaining labeled nodes form the test
/// set.
pub fn biased_split(
    g: &MultiRelationGraph,
    ratios: (f64, f64, f64),
    seed: u64,
    prob_source: RelationSelector,
) -> Result<SplitAssignment, SplitError> {
    check_ratios(ratios)?;
    let weights = observation_weights(g, prob_source)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut roles = vec![Role::Excluded; g.n_nodes()];
    let mut warnings = Vec::new();

    for label in [0, 1] {
        let members = class_members(g, label);
        if members.is_empty() {
            return Err(SplitError::MissingClass(label));
        }
        let (n_train, n_valid, _) = bucket_counts(members.len(), ratios, label)?;
        let n_obs = n_train + n_valid;

        if members.iter().all(|&v| weights[v] == 0.0) {
            warnings.push(format!(
                "class {label}: all observation weights zero, falling back to uniform sampling"
            ));
        }
        // key = -ln(u)/w selects n_obs nodes without replacement with
        // probability proportional to w; zero weights sort last, ordered
        // uniformly among themselves by the tiebreak draw.
        let mut keyed: Vec<(f64, f64, usize)> = members
            .iter()
            .map(|&v| {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let tiebreak: f64 = rng.gen();
                let key = if weights[v] > 0.0 {
                    -u.ln() / weights[v]
                } else {
                    f64::INFINITY
                };
                (key, tiebreak, v)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut observed: Vec<usize> = keyed[..n_obs].iter().map(|&(_, _, v)| v).collect();
        if keyed[..n_obs].iter().any(|&(key, _, _)| key.is_infinite())
            && !keyed.iter().all(|&(key, _, _)| key.is_infinite())
        {
            warnings.push(format!(
                "class {label}: observed pool exhausted positive weights, zero-weight nodes included uniformly"
            ));
        }

        observed.shuffle(&mut rng);
        for (i, &v) in observed.iter().enumerate() {
            roles[v] = if i < n_train { Role::Train } else { Role::Valid };
        }
        for &v in &members {
            if roles[v] == Role::Excluded {
                roles[v] = Role::Test;
            }
        }
    }
    Ok(SplitAssignment {
        roles,
        mode: SplitMode::Biased,
        seed,
        ratios,
        observe_prob: Some(weights),
        warnings,
    })
}

/// Beta(alpha, beta) parameters fitted by the method of moments.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Method-of-moments beta fit on samples clipped to [1e-6, 1 - 1e-6].
/// Returns `None` when the sample variance is degenerate.
pub fn fit_beta_moments(samples: &[f64]) -> Option<BetaParams> {
    if samples.len() < 2 {
        return None;
    }
    let clipped: Vec<f64> = samples
        .iter()
        .map(|&x| x.clamp(1e-6, 1.0 - 1e-6))
        .collect();
    let n = clipped.len() as f64;
    let mean = clipped.iter().sum::<f64>() / n;
    let var = clipped.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var <= 0.0 || var >= mean * (1.0 - mean) {
        return None;
    }
    let scale = mean * (1.0 - mean) / var - 1.0;
    Some(BetaParams {
        alpha: mean * scale,
        beta: (1.0 - mean) * scale,
    })
}

/// Summary of one class in one environment (observed or test).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvStats {
    pub n: usize,
    pub mean_homophily: f64,
    pub mean_heterophily: f64,
    /// Normalized homophily histogram over [0, 1]; sums to 1.
    pub histogram: Vec<f64>,
    pub beta: Option<BetaParams>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSds {
    pub label: Label,
    pub observed: Option<EnvStats>,
    pub test: Option<EnvStats>,
    /// KL(test || observed) over smoothed histograms; `None` when a side
    /// is empty.
    pub kl_extent: Option<f64>,
}

/// Per-class comparison of the homophily distribution between the
/// observed (train + valid) and test environments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdsReport {
    pub bins: usize,
    pub classes: Vec<ClassSds>,
}

pub const SDS_BINS: usize = 20;
const SDS_SMOOTHING: f64 = 1e-6;

fn env_stats(values: &[f64], bins: usize) -> Option<EnvStats> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mut histogram = vec![0.0; bins];
    let mut sum = 0.0;
    for &h in values {
        sum += h;
        let bin = ((h * bins as f64) as usize).min(bins - 1);
        histogram[bin] += 1.0;
    }
    for b in &mut histogram {
        *b /= n as f64;
    }
    let mean = sum / n as f64;
    Some(EnvStats {
        n,
        mean_homophily: mean,
        mean_heterophily: 1.0 - mean,
        histogram,
        beta: fit_beta_moments(values),
    })
}

fn kl_smoothed(test: &[f64], observed: &[f64]) -> f64 {
    let bins = test.len() as f64;
    let norm = 1.0 + bins * SDS_SMOOTHING;
    let mut kl = 0.0;
    for (&t, &o) in test.iter().zip(observed) {
        let t = (t + SDS_SMOOTHING) / norm;
        let o = (o + SDS_SMOOTHING) / norm;
        kl += t * (t / o).ln();
    }
    kl
}

/// Quantify structural shift between the observed and test environments:
/// per class, homophily histograms (merged-relation neighborhoods), their
/// KL extent, and beta fits of the per-node homophily values.
pub fn sds_report(
    g: &MultiRelationGraph,
    split: &SplitAssignment,
) -> Result<SdsReport, SplitError> {
    let profile = homophily_profile(g, RelationSelector::Merged, g.labels())?;
    let mut classes = Vec::new();
    for label in [0, 1] {
        let collect = |role_check: &dyn Fn(Role) -> bool| -> Vec<f64> {
            (0..g.n_nodes())
                .filter(|&v| g.labels()[v] == label && role_check(split.roles[v]))
                .filter_map(|v| profile.homo(v))
                .collect()
        };
        let observed_values = collect(&|r| matches!(r, Role::Train | Role::Valid));
        let test_values = collect(&|r| r == Role::Test);
        let observed = env_stats(&observed_values, SDS_BINS);
        let test = env_stats(&test_values, SDS_BINS);
        let kl_extent = match (&observed, &test) {
            (Some(o), Some(t)) => Some(kl_smoothed(&t.histogram, &o.histogram)),
            _ => None,
        };
        classes.push(ClassSds {
            label,
            observed,
            test,
            kl_extent,
        });
    }
    Ok(SdsReport {
        bins: SDS_BINS,
        classes,
    })
}

/// Write a split as `node_id,role` CSV. Excluded nodes are omitted.
pub fn save_split(split: &SplitAssignment, path: &Path) -> Result<(), SplitError> {
    let mut text = String::from("node_id,role\n");
    for (v, role) in split.roles.iter().enumerate() {
        let name = match role {
            Role::Train => "train",
            Role::Valid => "valid",
            Role::Test => "test",
            Role::Excluded => continue,
        };
        let _ = writeln!(text, "{v},{name}");
    }
    fs::write(path, text).map_err(|e| SplitError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Read a split CSV back; nodes absent from the file are excluded.
pub fn load_split(path: &Path, n_nodes: usize) -> Result<SplitAssignment, SplitError> {
    let text = fs::read_to_string(path).map_err(|e| SplitError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut roles = vec![Role::Excluded; n_nodes];
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("node_id")) {
            continue;
        }
        let bad_row = || SplitError::BadSplitRow {
            path: path.to_path_buf(),
            line: idx + 1,
            value: line.to_string(),
        };
        let (node, role) = line.split_once(',').ok_or_else(bad_row)?;
        let node: usize = node.trim().parse().map_err(|_| bad_row())?;
        if node >= n_nodes {
            return Err(SplitError::NodeOutOfRange { node, n_nodes });
        }
        roles[node] = match role.trim() {
            "train" => Role::Train,
            "valid" => Role::Valid,
            "test" => Role::Test,
            _ => return Err(bad_row()),
        };
    }
    Ok(SplitAssignment {
        roles,
        mode: SplitMode::Normal,
        seed: 0,
        ratios: (0.0, 0.0, 0.0),
        observe_prob: None,
        warnings: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn labeled_graph(labels: Vec<Label>, edges: Vec<(usize, usize)>) -> MultiRelationGraph {
        let n = labels.len();
        MultiRelationGraph::from_edge_lists(Tensor::zeros(n, 2), labels, &[edges])
    }

    fn class_role_count(g: &MultiRelationGraph, s: &SplitAssignment, label: Label, role: Role) -> usize {
        (0..g.n_nodes())
            .filter(|&v| g.labels()[v] == label && s.roles[v] == role)
            .count()
    }

    #[test]
    fn stratified_hits_exact_counts() {
        let mut labels = vec![1 as Label; 10];
        labels.extend(vec![0 as Label; 90]);
        let g = labeled_graph(labels, vec![]);
        let s = stratified_split(&g, (0.4, 0.2, 0.4), 7).unwrap();
        assert_eq!(class_role_count(&g, &s, 1, Role::Train), 4);
        assert_eq!(class_role_count(&g, &s, 1, Role::Valid), 2);
        assert_eq!(class_role_count(&g, &s, 1, Role::Test), 4);
        assert_eq!(class_role_count(&g, &s, 0, Role::Train), 36);
        assert_eq!(class_role_count(&g, &s, 0, Role::Valid), 18);
        assert_eq!(class_role_count(&g, &s, 0, Role::Test), 36);
    }

    #[test]
    fn stratified_is_deterministic_and_seed_sensitive() {
        let mut labels = vec![1 as Label; 10];
        labels.extend(vec![0 as Label; 30]);
        let g = labeled_graph(labels, vec![]);
        let a = stratified_split(&g, (0.4, 0.2, 0.4), 3).unwrap();
        let b = stratified_split(&g, (0.4, 0.2, 0.4), 3).unwrap();
        assert_eq!(a.roles, b.roles);
        let c = stratified_split(&g, (0.4, 0.2, 0.4), 4).unwrap();
        assert_ne!(a.roles, c.roles);
    }

    #[test]
    fn stratified_rejects_tiny_class() {
        let g = labeled_graph(vec![1, 1, 0, 0, 0, 0], vec![]);
        // 2 anomalies cannot fill 3 buckets
        assert!(matches!(
            stratified_split(&g, (0.4, 0.2, 0.4), 1),
            Err(SplitError::ClassTooSmall { label: 1, .. })
        ));
    }

    #[test]
    fn unlabeled_nodes_stay_excluded() {
        let g = labeled_graph(vec![1, 1, 1, 0, 0, 0, -1, -1], vec![]);
        let s = stratified_split(&g, (0.4, 0.2, 0.4), 0).unwrap();
        assert_eq!(s.roles[6], Role::Excluded);
        assert_eq!(s.roles[7], Role::Excluded);
    }

    #[test]
    fn observation_weight_extremes() {
        // node 0: all neighbors share its label -> weight 1.0
        // node 3: no neighbor shares its label -> weight 0.0
        let g = labeled_graph(vec![1, 1, 1, 0], vec![(0, 1), (0, 2), (3, 0)]);
        let w = observation_weights(&g, RelationSelector::Merged).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(w[1], 1.0);
        assert_eq!(w[3], 0.0);
    }

    #[test]
    fn isolated_nodes_get_half_weight() {
        let g = labeled_graph(vec![1, 0, 0], vec![(1, 2)]);
        let w = observation_weights(&g, RelationSelector::Merged).unwrap();
        assert_eq!(w[0], 0.5);
    }

    fn heterophilous_graph(seed: u64) -> MultiRelationGraph {
        // anomalies (class 1) mostly mixed into normals, with a
        // homophilous anomaly core that biased sampling should prefer
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 200;
        let labels: Vec<Label> = (0..n).map(|v| (v < 40) as Label).collect();
        let mut edges = Vec::new();
        for v in 0..40 {
            // half the anomalies sit in a same-class clique-ish core
            if v < 20 {
                edges.push((v, (v + 1) % 20));
                edges.push((v, (v + 2) % 20));
            } else {
                for _ in 0..4 {
                    edges.push((v, rng.gen_range(40..n)));
                }
            }
        }
        for v in 40..n {
            for _ in 0..3 {
                let u = rng.gen_range(40..n);
                if u != v {
                    edges.push((v, u));
                }
            }
        }
        labeled_graph(labels, edges)
    }

    #[test]
    fn biased_split_prefers_homophilous_anomalies() {
        for seed in 0..5 {
            let g = heterophilous_graph(99);
            let s = biased_split(&g, (0.4, 0.2, 0.4), seed, RelationSelector::Merged).unwrap();
            let profile = homophily_profile(&g, RelationSelector::Merged, g.labels()).unwrap();
            let observed: Vec<usize> = s
                .observed()
                .into_iter()
                .filter(|&v| g.labels()[v] == 1)
                .collect();
            let unobserved: Vec<usize> = s
                .test()
                .into_iter()
                .filter(|&v| g.labels()[v] == 1)
                .collect();
            let mean_obs = profile.mean_homophily(&observed).unwrap();
            let mean_unobs = profile.mean_homophily(&unobserved).unwrap();
            assert!(
                mean_obs > mean_unobs,
                "seed {seed}: observed {mean_obs} <= unobserved {mean_unobs}"
            );
        }
    }

    #[test]
    fn biased_pool_counts_and_partition() {
        let g = heterophilous_graph(5);
        let s = biased_split(&g, (0.4, 0.2, 0.4), 11, RelationSelector::Merged).unwrap();
        for label in [0, 1] {
            let members = class_members(&g, label).len();
            let target = (0.6 * members as f64).round() as usize;
            let observed = class_role_count(&g, &s, label, Role::Train)
                + class_role_count(&g, &s, label, Role::Valid);
            assert!(
                (observed as i64 - target as i64).abs() <= 1,
                "class {label}: observed {observed} vs target {target}"
            );
        }
        // roles partition labeled nodes
        for v in 0..g.n_nodes() {
            if g.labels()[v] >= 0 {
                assert_ne!(s.roles[v], Role::Excluded);
            }
        }
    }

    #[test]
    fn all_zero_weights_fall_back_to_uniform() {
        // perfect bipartite mismatch: every node's neighbors are the other class
        let g = labeled_graph(
            vec![1, 1, 1, 1, 0, 0, 0, 0],
            vec![(0, 4), (1, 5), (2, 6), (3, 7), (0, 5), (1, 6), (2, 7), (3, 4)],
        );
        let s = biased_split(&g, (0.4, 0.2, 0.4), 2, RelationSelector::Merged).unwrap();
        assert!(!s.warnings.is_empty());
        // per class of 4: round(0.4*4) + round(0.2*4) = 2 + 1 observed
        assert_eq!(s.observed().len(), 6);
    }

    #[test]
    fn observe_prob_correlates_with_observation() {
        // Spearman correlation between weight and observed-indicator is
        // positive when homophily varies, over 20 seeds.
        let g = heterophilous_graph(77);
        let mut positive = 0;
        for seed in 0..20 {
            let s = biased_split(&g, (0.4, 0.2, 0.4), seed, RelationSelector::Merged).unwrap();
            let w = s.observe_prob.as_ref().unwrap();
            let labeled: Vec<usize> = g.labeled_nodes();
            let xs: Vec<f64> = labeled.iter().map(|&v| w[v]).collect();
            let ys: Vec<f64> = labeled
                .iter()
                .map(|&v| matches!(s.roles[v], Role::Train | Role::Valid) as u8 as f64)
                .collect();
            if spearman(&xs, &ys) > 0.0 {
                positive += 1;
            }
        }
        assert_eq!(positive, 20);
    }

    fn ranks(xs: &[f64]) -> Vec<f64> {
        let n = xs.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let mut out = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i + 1;
            while j < n && xs[order[j]] == xs[order[i]] {
                j += 1;
            }
            let avg = (i + 1 + j) as f64 / 2.0;
            for &k in &order[i..j] {
                out[k] = avg;
            }
            i = j;
        }
        out
    }

    fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
        let (rx, ry) = (ranks(xs), ranks(ys));
        let n = xs.len() as f64;
        let mx = rx.iter().sum::<f64>() / n;
        let my = ry.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for i in 0..xs.len() {
            cov += (rx[i] - mx) * (ry[i] - my);
            vx += (rx[i] - mx).powi(2);
            vy += (ry[i] - my).powi(2);
        }
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn sds_identical_histograms_have_zero_extent() {
        // all nodes fully homophilous: every histogram is a point mass
        let labels = vec![1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        let edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (5, 6), (6, 7), (7, 8), (8, 9)];
        let g = labeled_graph(labels, edges);
        let s = stratified_split(&g, (0.4, 0.2, 0.4), 1).unwrap();
        let report = sds_report(&g, &s).unwrap();
        for class in &report.classes {
            assert!(class.kl_extent.unwrap() <= 1e-9);
        }
    }

    #[test]
    fn sds_opposed_point_masses_have_large_extent() {
        // anomalies: observed ones fully homophilous, test ones fully
        // heterophilous; assert against the closed-form smoothed KL
        let labels = vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let edges = vec![
            (0, 1), // homophilous anomaly pair
            (2, 4),
            (2, 5), // heterophilous anomalies
            (3, 6),
            (3, 7),
            (4, 5),
            (5, 6),
            (6, 7),
            (7, 8),
            (8, 9),
        ];
        let g = labeled_graph(labels, edges);
        let mut roles = vec![Role::Test; 10];
        roles[0] = Role::Train;
        roles[1] = Role::Valid;
        for v in 4..10 {
            roles[v] = if v < 7 { Role::Train } else { Role::Test };
        }
        let split = SplitAssignment {
            roles,
            mode: SplitMode::Biased,
            seed: 0,
            ratios: (0.4, 0.2, 0.4),
            observe_prob: None,
            warnings: Vec::new(),
        };
        let report = sds_report(&g, &split).unwrap();
        let anomaly = &report.classes[1];
        let kl = anomaly.kl_extent.unwrap();

        // closed form: smoothed point masses at opposite bins
        let eps: f64 = 1e-6;
        let norm = 1.0 + 20.0 * eps;
        let hi = (1.0 + eps) / norm;
        let lo = eps / norm;
        let expected = hi * (hi / lo).ln() + lo * (lo / hi).ln();
        assert!((kl - expected).abs() < 1e-9);
        assert!(kl > 1.0);
    }

    #[test]
    fn histograms_sum_to_one() {
        let g = heterophilous_graph(13);
        let s = biased_split(&g, (0.4, 0.2, 0.4), 1, RelationSelector::Merged).unwrap();
        let report = sds_report(&g, &s).unwrap();
        for class in &report.classes {
            for env in [&class.observed, &class.test] {
                let sum: f64 = env.as_ref().unwrap().histogram.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sds_empty_class_side_is_undefined() {
        let g = labeled_graph(vec![1, 1, 1, 0, 0, 0], vec![(0, 1), (1, 2), (3, 4), (4, 5)]);
        let mut roles = vec![Role::Train; 6];
        roles[3] = Role::Test; // anomalies never reach test
        let split = SplitAssignment {
            roles,
            mode: SplitMode::Normal,
            seed: 0,
            ratios: (0.4, 0.2, 0.4),
            observe_prob: None,
            warnings: Vec::new(),
        };
        let report = sds_report(&g, &split).unwrap();
        assert!(report.classes[1].test.is_none());
        assert!(report.classes[1].kl_extent.is_none());
    }

    #[test]
    fn beta_fit_recovers_known_parameters() {
        // Beta(2,5) sampled as the 2nd smallest of 6 uniforms
        let mut rng = ChaCha8Rng::seed_from_u64(2026);
        let samples: Vec<f64> = (0..10_000)
            .map(|_| {
                let mut us: Vec<f64> = (0..6).map(|_| rng.gen::<f64>()).collect();
                us.sort_by(f64::total_cmp);
                us[1]
            })
            .collect();
        let fit = fit_beta_moments(&samples).unwrap();
        assert!((fit.alpha - 2.0).abs() < 0.2, "alpha {}", fit.alpha);
        assert!((fit.beta - 5.0).abs() < 0.2, "beta {}", fit.beta);
    }

    #[test]
    fn split_csv_roundtrip() {
        let g = labeled_graph(vec![1, 1, 1, 0, 0, 0, 0, 0, 0, -1], vec![]);
        let s = stratified_split(&g, (0.4, 0.2, 0.4), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        save_split(&s, &path).unwrap();
        let loaded = load_split(&path, g.n_nodes()).unwrap();
        assert_eq!(s.roles, loaded.roles);
    }
}
