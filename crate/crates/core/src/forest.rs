//! Bagged CART regression forest with case weights and out-of-bag bookkeeping.
//!
//! Trees are grown on bootstrap resamples of the rows (resampling ignores the
//! case weights). Case weights enter the impurity and the leaf means only, so
//! scaling all weights by a constant leaves the forest unchanged. Each tree
//! draws from its own stream derived from `(seed, tree index)`; fits are
//! bit-identical regardless of how many threads grow them.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Covariates;
use crate::error::{Result, SaeError};
use crate::rng::RngHandle;

/// Relative margin by which a split must beat the incumbent.
const SPLIT_TIE_TOL: f64 = 1e-12;

/// Tuning knobs of the forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub num_trees: usize,
    /// Split candidates per node; `None` means `max(1, p / 3)`.
    pub mtry: Option<usize>,
    /// Nodes with fewer bagged cases than this are not split.
    pub min_node_size: usize,
    pub seed: u64,
    /// When false every tree sees each row exactly once.
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            num_trees: 500,
            mtry: None,
            min_node_size: 5,
            seed: 0,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn resolved_mtry(&self, p: usize) -> usize {
        self.mtry.unwrap_or((p / 3).max(1)).clamp(1, p.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
    },
}

/// A single regression tree stored as a flat node array; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    #[inline]
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut k = 0usize;
        loop {
            match self.nodes[k] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    k = if x[feature as usize] <= threshold {
                        left as usize
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    /// The root split as `(feature, threshold)`, if the tree is not a stump leaf.
    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self.nodes.first()? {
            Node::Split {
                feature, threshold, ..
            } => Some((*feature as usize, *threshold)),
            Node::Leaf { .. } => None,
        }
    }
}

/// Trained forest with per-tree bag multiplicities and cached OOB predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    params: ForestParams,
    trees: Vec<Tree>,
    /// `bag_counts[t][i]`: how often training row `i` was drawn for tree `t`.
    bag_counts: Vec<Vec<u16>>,
    importance: Vec<f64>,
    train_x: Covariates,
    oob: Vec<f64>,
    oob_fallbacks: usize,
}

struct Case {
    value: f64,
    target: f64,
    weight: f64,
    row: u32,
}

struct Grower<'a> {
    x: &'a Covariates,
    t: &'a [f64],
    w: &'a [f64],
    mtry: usize,
    min_node_size: usize,
    nodes: Vec<Node>,
    importance: Vec<f64>,
    scratch: Vec<Case>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    decrease: f64,
}

impl Grower<'_> {
    fn leaf_value(&self, rows: &[u32]) -> f64 {
        let first = self.t[rows[0] as usize];
        if rows.iter().all(|&r| self.t[r as usize] == first) {
            return first;
        }
        let (mut sw, mut swt) = (0.0, 0.0);
        for &r in rows {
            let r = r as usize;
            sw += self.w[r];
            swt += self.w[r] * self.t[r];
        }
        if sw > 0.0 {
            swt / sw
        } else {
            rows.iter().map(|&r| self.t[r as usize]).sum::<f64>() / rows.len() as f64
        }
    }

    fn best_split<R: Rng>(&mut self, rows: &[u32], rng: &mut R) -> Option<BestSplit> {
        let p = self.x.ncols();
        let mut features: Vec<usize> = index::sample(rng, p, self.mtry).into_vec();
        features.sort_unstable();
        let mut best: Option<BestSplit> = None;
        for f in features {
            self.scratch.clear();
            self.scratch.extend(rows.iter().map(|&r| Case {
                value: self.x.get(r as usize, f),
                target: self.t[r as usize],
                weight: self.w[r as usize],
                row: r,
            }));
            self.scratch
                .sort_by(|a, b| a.value.total_cmp(&b.value).then(a.row.cmp(&b.row)));
            let total_w: f64 = self.scratch.iter().map(|c| c.weight).sum();
            let total_s: f64 = self.scratch.iter().map(|c| c.weight * c.target).sum();
            let (mut wl, mut sl) = (0.0, 0.0);
            for k in 0..self.scratch.len() - 1 {
                let c = &self.scratch[k];
                wl += c.weight;
                sl += c.weight * c.target;
                let next = self.scratch[k + 1].value;
                if c.value == next {
                    continue;
                }
                let wr = total_w - wl;
                if wl <= 0.0 || wr <= 0.0 {
                    continue;
                }
                let sr = total_s - sl;
                let diff = sl / wl - sr / wr;
                let decrease = wl * wr / total_w * diff * diff;
                // near-ties keep the earlier candidate so rounding cannot flip the choice
                if best
                    .as_ref()
                    .is_none_or(|b| decrease > b.decrease * (1.0 + SPLIT_TIE_TOL))
                {
                    let mut threshold = 0.5 * (c.value + next);
                    if threshold >= next {
                        threshold = c.value;
                    }
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        decrease,
                    });
                }
            }
        }
        best.filter(|b| b.decrease > 0.0)
    }

    fn grow<R: Rng>(&mut self, rows: &mut [u32], rng: &mut R) {
        // (slot in `nodes`, start, end) of nodes still to process
        let mut stack = vec![(0usize, 0usize, rows.len())];
        self.nodes.push(Node::Leaf { value: 0.0 });
        while let Some((slot, start, end)) = stack.pop() {
            let node_rows = &rows[start..end];
            let size = node_rows.len();
            let pure = node_rows
                .iter()
                .all(|&r| self.t[r as usize] == self.t[node_rows[0] as usize]);
            let split = if size >= self.min_node_size.max(2) && !pure {
                self.best_split(node_rows, rng)
            } else {
                None
            };
            let Some(split) = split else {
                self.nodes[slot] = Node::Leaf {
                    value: self.leaf_value(node_rows),
                };
                continue;
            };
            let segment = &mut rows[start..end];
            let mut mid = 0;
            for k in 0..segment.len() {
                if self.x.get(segment[k] as usize, split.feature) <= split.threshold {
                    segment.swap(k, mid);
                    mid += 1;
                }
            }
            self.importance[split.feature] += split.decrease;
            let left = self.nodes.len();
            self.nodes.push(Node::Leaf { value: 0.0 });
            self.nodes.push(Node::Leaf { value: 0.0 });
            self.nodes[slot] = Node::Split {
                feature: split.feature as u32,
                threshold: split.threshold,
                left: left as u32,
                right: left as u32 + 1,
            };
            stack.push((left + 1, start + mid, end));
            stack.push((left, start, start + mid));
        }
    }
}

fn validate(x: &Covariates, t: &[f64], w: &[f64]) -> Result<()> {
    let n = x.nrows();
    if n == 0 {
        return Err(SaeError::Input("cannot fit a forest on zero rows".into()));
    }
    if x.ncols() == 0 {
        return Err(SaeError::Input(
            "forest needs at least one covariate".into(),
        ));
    }
    if t.len() != n {
        return Err(SaeError::Dimension {
            expected: n,
            got: t.len(),
        });
    }
    if w.len() != n {
        return Err(SaeError::Dimension {
            expected: n,
            got: w.len(),
        });
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(SaeError::NonFinite("forest target"));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(SaeError::InvalidParameter(
            "case weights must be finite and nonnegative".into(),
        ));
    }
    if w.iter().all(|&v| v == 0.0) {
        return Err(SaeError::InvalidParameter(
            "case weights are all zero".into(),
        ));
    }
    Ok(())
}

/// Grows `params.num_trees` weighted CART trees on bootstrap resamples.
pub fn fit_forest(x: &Covariates, t: &[f64], w: &[f64], params: &ForestParams) -> Result<Forest> {
    validate(x, t, w)?;
    if params.num_trees == 0 {
        return Err(SaeError::InvalidParameter(
            "num_trees must be positive".into(),
        ));
    }
    let n = x.nrows();
    let p = x.ncols();
    let mtry = params.resolved_mtry(p);
    let root = RngHandle::new(params.seed);

    let grown: Vec<(Tree, Vec<u16>, Vec<f64>)> = (0..params.num_trees)
        .into_par_iter()
        .map(|tree_idx| {
            let mut rng = root.child(tree_idx as u64).rng();
            let mut counts = vec![0u16; n];
            let mut rows: Vec<u32> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n) as u32).collect()
            } else {
                (0..n as u32).collect()
            };
            rows.sort_unstable();
            for &r in &rows {
                counts[r as usize] = counts[r as usize].saturating_add(1);
            }
            let mut grower = Grower {
                x,
                t,
                w,
                mtry,
                min_node_size: params.min_node_size,
                nodes: Vec::new(),
                importance: vec![0.0; p],
                scratch: Vec::with_capacity(n),
            };
            grower.grow(&mut rows, &mut rng);
            (
                Tree {
                    nodes: grower.nodes,
                },
                counts,
                grower.importance,
            )
        })
        .collect();

    let mut trees = Vec::with_capacity(grown.len());
    let mut bag_counts = Vec::with_capacity(grown.len());
    let mut importance = vec![0.0; p];
    for (tree, counts, imp) in grown {
        for (a, b) in importance.iter_mut().zip(&imp) {
            *a += b;
        }
        trees.push(tree);
        bag_counts.push(counts);
    }
    let num_trees = trees.len() as f64;
    importance.iter_mut().for_each(|v| *v /= num_trees);

    let mut forest = Forest {
        params: params.clone(),
        trees,
        bag_counts,
        importance,
        train_x: x.clone(),
        oob: Vec::new(),
        oob_fallbacks: 0,
    };
    forest.compute_oob();
    Ok(forest)
}

impl Forest {
    fn compute_oob(&mut self) {
        let n = self.train_x.nrows();
        let (oob, fallbacks): (Vec<f64>, Vec<bool>) = (0..n)
            .into_par_iter()
            .map(|i| {
                let row = self.train_x.row(i);
                let (mut sum, mut count) = (0.0, 0usize);
                for (tree, counts) in self.trees.iter().zip(&self.bag_counts) {
                    if counts[i] == 0 {
                        sum += tree.predict_row(row);
                        count += 1;
                    }
                }
                if count > 0 {
                    (sum / count as f64, false)
                } else {
                    (self.predict_row(row), true)
                }
            })
            .unzip();
        self.oob_fallbacks = fallbacks.iter().filter(|&&f| f).count();
        if self.oob_fallbacks > 0 && self.params.bootstrap {
            log::warn!(
                "{} training rows are in every bag; using in-bag predictions for them",
                self.oob_fallbacks
            );
        }
        self.oob = oob;
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn num_features(&self) -> usize {
        self.train_x.ncols()
    }

    pub fn training_covariates(&self) -> &Covariates {
        &self.train_x
    }

    /// Bag of tree `t` as a sorted multiset of training row indices.
    pub fn bag(&self, t: usize) -> Vec<usize> {
        self.bag_counts[t]
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| std::iter::repeat_n(i, c as usize))
            .collect()
    }

    /// Number of training rows that no tree left out of its bag.
    pub fn oob_fallbacks(&self) -> usize {
        self.oob_fallbacks
    }

    #[inline]
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict_row(x)).sum();
        sum / self.trees.len() as f64
    }

    /// Mean tree prediction for each row of `x`.
    pub fn predict(&self, x: &Covariates) -> Result<Vec<f64>> {
        if x.ncols() != self.num_features() {
            return Err(SaeError::Dimension {
                expected: self.num_features(),
                got: x.ncols(),
            });
        }
        Ok((0..x.nrows())
            .into_par_iter()
            .map(|i| self.predict_row(x.row(i)))
            .collect())
    }

    /// Out-of-bag prediction for training row `i`.
    pub fn predict_oob(&self, i: usize) -> f64 {
        self.oob[i]
    }

    pub fn oob_predictions(&self) -> &[f64] {
        &self.oob
    }

    /// Mean decrease in weighted squared-error impurity per feature,
    /// summed over each tree's splits and averaged over trees.
    pub fn variable_importance(&self) -> &[f64] {
        &self.importance
    }

    /// Mean prediction over the training rows with feature `j` set to each grid value.
    pub fn partial_dependence(&self, j: usize, grid: &[f64]) -> Result<Vec<f64>> {
        if j >= self.num_features() {
            return Err(SaeError::InvalidParameter(format!(
                "feature index {j} out of range for {} features",
                self.num_features()
            )));
        }
        if grid.iter().any(|g| !g.is_finite()) {
            return Err(SaeError::NonFinite("partial dependence grid"));
        }
        grid.iter()
            .map(|&g| {
                let xg = self.train_x.with_column(j, g);
                let preds = self.predict(&xg)?;
                Ok(preds.iter().sum::<f64>() / preds.len() as f64)
            })
            .collect()
    }
}
