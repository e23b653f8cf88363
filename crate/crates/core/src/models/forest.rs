//! Random-forest regression: bootstrap-resampled CART trees with
//! variance-reduction splits over a random feature subset at each node.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Regressor;
use crate::error::{Error, Result};
use crate::seed::mix;
use crate::set_level::DownstreamValidationSet;

pub const MIN_TRAINING_ROWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub min_leaf: usize,
    /// Candidate features per split; `None` means `max(1, ceil(l / 3))`.
    pub max_features: Option<usize>,
    pub max_depth: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            min_leaf: 5,
            max_features: None,
            max_depth: None,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, y: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if y[feature] <= threshold { left } else { right },
            }
        }
    }
}

struct TreeBuilder<'a> {
    features: &'a [Vec<f64>],
    targets: &'a [f64],
    min_leaf: usize,
    mtry: usize,
    max_depth: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl TreeBuilder<'_> {
    fn build(&mut self, mut rows: Vec<usize>, depth: usize) -> usize {
        let n = rows.len();
        let sum: f64 = rows.iter().map(|&r| self.targets[r]).sum();
        let mean = sum / n as f64;
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf(mean));

        if n < 2 * self.min_leaf || depth >= self.max_depth {
            return id;
        }
        let first = self.targets[rows[0]];
        if rows.iter().all(|&r| self.targets[r] == first) {
            return id;
        }

        let Some(best) = self.best_split(&mut rows, sum) else {
            return id;
        };
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&r| self.features[r][best.feature] <= best.threshold);
        let left = self.build(left_rows, depth + 1);
        let right = self.build(right_rows, depth + 1);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        };
        id
    }

    fn best_split(&mut self, rows: &mut [usize], total: f64) -> Option<BestSplit> {
        let n = rows.len();
        let dim = self.features[rows[0]].len();
        // Maximizing sum_L^2/n_L + sum_R^2/n_R minimizes within-child SSE.
        let parent = total * total / n as f64;
        let mut best: Option<BestSplit> = None;
        for feature in sample(&mut self.rng, dim, self.mtry.min(dim)).into_iter() {
            rows.sort_unstable_by(|&a, &b| {
                self.features[a][feature]
                    .total_cmp(&self.features[b][feature])
                    .then(a.cmp(&b))
            });
            let mut left_sum = 0.0;
            for i in 1..n {
                left_sum += self.targets[rows[i - 1]];
                if i < self.min_leaf || n - i < self.min_leaf {
                    continue;
                }
                let lo = self.features[rows[i - 1]][feature];
                let hi = self.features[rows[i]][feature];
                if lo >= hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let score =
                    left_sum * left_sum / i as f64 + right_sum * right_sum / (n - i) as f64;
                if score > parent + 1e-12 * parent.abs().max(1.0)
                    && best.as_ref().is_none_or(|b| score > b.score)
                {
                    let mut threshold = 0.5 * (lo + hi);
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(BestSplit {
                        feature,
                        threshold,
                        score,
                    });
                }
            }
        }
        best
    }
}

/// Averaged ensemble of regression trees.
#[derive(Debug, Clone)]
pub struct RandomForest {
    trees: Vec<Tree>,
    input_dim: usize,
}

impl RandomForest {
    pub fn fit(train: &DownstreamValidationSet, params: &ForestParams, seed: u64) -> Result<Self> {
        let n = train.len();
        if n < MIN_TRAINING_ROWS {
            return Err(Error::InvalidArgument(format!(
                "random forest needs at least {MIN_TRAINING_ROWS} rows, got {n}"
            )));
        }
        if params.n_trees == 0 || params.min_leaf == 0 {
            return Err(Error::Config(
                "forest needs n_trees >= 1 and min_leaf >= 1".into(),
            ));
        }
        let dim = train.dim();
        let mtry = params
            .max_features
            .unwrap_or_else(|| dim.div_ceil(3))
            .clamp(1, dim);
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, t as u64));
                let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let mut b = TreeBuilder {
                    features: &train.y,
                    targets: &train.z,
                    min_leaf: params.min_leaf,
                    mtry,
                    max_depth: params.max_depth.unwrap_or(usize::MAX),
                    rng,
                    nodes: Vec::new(),
                };
                b.build(rows, 0);
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(RandomForest {
            trees,
            input_dim: dim,
        })
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

impl Regressor for RandomForest {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn predict(&self, y: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(y)).sum::<f64>() / self.trees.len() as f64
    }
}

pub fn fit_regressor(train: &DownstreamValidationSet, seed: u64) -> Result<RandomForest> {
    RandomForest::fit(train, &ForestParams::default(), seed)
}
