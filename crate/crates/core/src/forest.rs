//! Exact inference on forests of retained factors.
//!
//! Each tree is rooted at its smallest variable and stored in BFS order.
//! Node potentials and edge potentials are supplied by the caller in the
//! log domain, so the same forest serves sampling, max-product and
//! sum-product.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{FactorId, Model, State};
use crate::rng::{log_sum_exp, sample_log_weights, Domain, RngStreams};
use crate::union_find::UnionFind;

#[derive(Debug, Clone, Copy)]
struct Link {
    parent: usize,
    factor: FactorId,
    /// Whether the child is the first endpoint of the factor.
    child_is_row: bool,
}

#[derive(Debug, Clone)]
pub struct Forest {
    cards: Vec<usize>,
    links: Vec<Option<Link>>,
    /// BFS order of each tree; the first entry is the root.
    trees: Vec<Vec<usize>>,
    retained: Vec<FactorId>,
}

/// Node marginals and log partition function of a forest distribution.
#[derive(Debug, Clone)]
pub struct ForestMarginals {
    pub marginals: Vec<Vec<f64>>,
    pub log_z: f64,
}

impl Forest {
    /// Forest over all variables of `model` using the `retained` factors
    /// as edges. Fails with [`Error::CyclicPartition`] on the first factor
    /// that closes a cycle.
    pub fn build(model: &Model, retained: impl IntoIterator<Item = FactorId>) -> Result<Self> {
        let n = model.num_variables();
        let mut uf = UnionFind::new(n);
        let mut neighbors: Vec<Vec<(usize, FactorId, bool)>> = vec![Vec::new(); n];
        let mut kept = Vec::new();
        for id in retained {
            let f = model.factor(id).ok_or(Error::UnknownFactor(id))?;
            let (u, v) = f.scope();
            if !uf.union(u, v) {
                return Err(Error::CyclicPartition(id));
            }
            neighbors[u].push((v, id, false));
            neighbors[v].push((u, id, true));
            kept.push(id);
        }
        let mut links = vec![None; n];
        let mut seen = vec![false; n];
        let mut trees = Vec::new();
        let mut queue = VecDeque::new();
        for root in 0..n {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            queue.push_back(root);
            let mut order = Vec::new();
            while let Some(p) = queue.pop_front() {
                order.push(p);
                for &(c, factor, child_is_row) in &neighbors[p] {
                    if !seen[c] {
                        seen[c] = true;
                        links[c] = Some(Link {
                            parent: p,
                            factor,
                            child_is_row,
                        });
                        queue.push_back(c);
                    }
                }
            }
            trees.push(order);
        }
        Ok(Self {
            cards: (0..n).map(|v| model.cardinality(v)).collect(),
            links,
            trees,
            retained: kept,
        })
    }

    pub fn trees(&self) -> &[Vec<usize>] {
        &self.trees
    }

    pub fn retained(&self) -> &[FactorId] {
        &self.retained
    }

    /// Parent of `v` and the connecting factor; `None` for roots.
    pub fn parent(&self, v: usize) -> Option<(usize, FactorId)> {
        self.links[v].map(|l| (l.parent, l.factor))
    }

    #[inline]
    fn edge<F>(&self, link: &Link, s_child: usize, s_parent: usize, edge: &F) -> f64
    where
        F: Fn(FactorId, usize, usize) -> f64,
    {
        if link.child_is_row {
            edge(link.factor, s_child, s_parent)
        } else {
            edge(link.factor, s_parent, s_child)
        }
    }

    /// Upward pass on one tree. `up[v]` becomes the node potential plus all
    /// messages from children; `msg[v]` is the message from `v` to its
    /// parent. `max` selects max-product instead of sum-product.
    fn upward<F>(&self, order: &[usize], node: &[Vec<f64>], edge: &F, max: bool, up: &mut [Vec<f64>], msg: &mut [Vec<f64>])
    where
        F: Fn(FactorId, usize, usize) -> f64,
    {
        for &v in order {
            up[v].clear();
            up[v].extend_from_slice(&node[v]);
        }
        let mut scratch = Vec::new();
        for &v in order.iter().rev() {
            let Some(link) = self.links[v] else { continue };
            let kp = self.cards[link.parent];
            let mut m = std::mem::take(&mut msg[v]);
            m.clear();
            for sp in 0..kp {
                scratch.clear();
                scratch.extend((0..self.cards[v]).map(|sv| up[v][sv] + self.edge(&link, sv, sp, edge)));
                m.push(if max {
                    scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    log_sum_exp(&scratch)
                });
            }
            for (a, b) in up[link.parent].iter_mut().zip(&m) {
                *a += b;
            }
            msg[v] = m;
        }
    }

    fn buffers(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (vec![Vec::new(); self.cards.len()], vec![Vec::new(); self.cards.len()])
    }

    /// Exact sample from `prod node * prod edge`, one stream per tree keyed
    /// by its root and `step`.
    pub fn sample<F>(&self, node: &[Vec<f64>], edge: F, streams: &RngStreams, step: u64) -> State
    where
        F: Fn(FactorId, usize, usize) -> f64,
    {
        let mut x = vec![0; self.cards.len()];
        let (mut up, mut msg) = self.buffers();
        let mut logits = Vec::new();
        for order in &self.trees {
            self.upward(order, node, &edge, false, &mut up, &mut msg);
            let mut rng = streams.stream(Domain::Tree, order[0], step);
            for &v in order {
                logits.clear();
                match self.links[v] {
                    None => logits.extend_from_slice(&up[v]),
                    Some(link) => {
                        let sp = x[link.parent];
                        logits.extend((0..self.cards[v]).map(|sv| up[v][sv] + self.edge(&link, sv, sp, &edge)));
                    }
                }
                x[v] = sample_log_weights(&logits, rng.random::<f64>()).unwrap_or(0);
            }
        }
        x
    }

    /// Jointly most probable state. Ties go to the lower state of each
    /// variable in BFS order.
    pub fn max_product<F>(&self, node: &[Vec<f64>], edge: F) -> State
    where
        F: Fn(FactorId, usize, usize) -> f64,
    {
        let mut x = vec![0; self.cards.len()];
        let (mut up, mut msg) = self.buffers();
        for order in &self.trees {
            self.upward(order, node, &edge, true, &mut up, &mut msg);
            for &v in order {
                let score = |sv: usize| match self.links[v] {
                    None => up[v][sv],
                    Some(link) => up[v][sv] + self.edge(&link, sv, x[link.parent], &edge),
                };
                let mut best = 0;
                let mut best_score = score(0);
                for sv in 1..self.cards[v] {
                    let s = score(sv);
                    if s > best_score {
                        best = sv;
                        best_score = s;
                    }
                }
                x[v] = best;
            }
        }
        x
    }

    /// Node marginals and the log partition function by sum-product.
    pub fn sum_product<F>(&self, node: &[Vec<f64>], edge: F) -> ForestMarginals
    where
        F: Fn(FactorId, usize, usize) -> f64,
    {
        let n = self.cards.len();
        let (mut up, mut msg) = self.buffers();
        let mut down: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut marginals = vec![Vec::new(); n];
        let mut log_z = 0.0;
        let mut scratch = Vec::new();
        for order in &self.trees {
            self.upward(order, node, &edge, false, &mut up, &mut msg);
            let root = order[0];
            log_z += log_sum_exp(&up[root]);
            for &v in order {
                let d = match self.links[v] {
                    None => vec![0.0; self.cards[v]],
                    Some(link) => {
                        let p = link.parent;
                        (0..self.cards[v])
                            .map(|sv| {
                                scratch.clear();
                                scratch.extend((0..self.cards[p]).map(|sp| {
                                    up[p][sp] - msg[v][sp] + down[p][sp] + self.edge(&link, sv, sp, &edge)
                                }));
                                log_sum_exp(&scratch)
                            })
                            .collect()
                    }
                };
                let mut m: Vec<f64> = up[v].iter().zip(&d).map(|(a, b)| a + b).collect();
                crate::rng::softmax_in_place(&mut m);
                marginals[v] = m;
                down[v] = d;
            }
        }
        ForestMarginals { marginals, log_z }
    }
}
