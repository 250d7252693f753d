//! Decoupled top-k routing.
//!
//! One logit projection feeds two score vectors. Experts are *selected* by
//! the top-k of `sigmoid(logits) + bias`; the selected experts are *weighted*
//! by the full softmax over all `n` logits (no renormalization over the k).
//! The bias therefore only ever changes which experts fire.

use std::collections::BTreeMap;

use crate::config::check_lambda;
use crate::error::{GroveError, Result};
use crate::layer::group_of;
use crate::math::{sigmoid, softmax, Matrix, Vector};

/// Logit projection, `n × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    pub weight: Matrix,
}

impl Router {
    pub fn new(weight: Matrix) -> Self {
        Router { weight }
    }

    pub fn n(&self) -> usize {
        self.weight.rows()
    }

    pub fn d(&self) -> usize {
        self.weight.cols()
    }
}

/// Partition of `n` experts into `g` contiguous groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grouping {
    pub n: usize,
    pub g: usize,
}

impl Grouping {
    pub fn new(n: usize, g: usize) -> Result<Self> {
        if g == 0 || !n.is_multiple_of(g) {
            return Err(GroveError::config("g", format!("g={g} must divide n={n}")));
        }
        Ok(Grouping { n, g })
    }

    pub fn group_of(&self, expert: usize) -> usize {
        group_of(expert, self.n, self.g)
    }

    pub fn group_size(&self) -> usize {
        self.n / self.g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    /// Selected experts, ascending.
    pub selected: Vec<usize>,
    /// Softmax weight of each selected expert, positionally aligned.
    pub gate_weights: Vec<f64>,
    pub logits: Vector,
    pub sigmoid_scores: Vector,
    pub softmax_scores: Vector,
    /// Group → `λ · Σ` gate weights of its selected members. Empty for
    /// plain (ungrouped) routing.
    pub group_weights: BTreeMap<usize, f64>,
}

impl RoutingDecision {
    /// Number of adjugates a deduplicated forward evaluates.
    pub fn distinct_groups(&self) -> usize {
        self.group_weights.len()
    }
}

pub fn logits(router: &Router, x: &Vector) -> Result<Vector> {
    router.weight.matvec(x)
}

/// Indices of the `k` largest `scores + bias`, ties to the lowest index,
/// returned in ascending order.
pub fn select_topk(scores: &Vector, bias: &Vector, k: usize) -> Result<Vec<usize>> {
    let n = scores.len();
    if bias.len() != n {
        return Err(GroveError::dim("select_topk", n, bias.len()));
    }
    if k == 0 || k > n {
        return Err(GroveError::TopKOutOfRange { k, n });
    }
    let biased: Vec<f64> = scores.iter().zip(bias.iter()).map(|(s, b)| s + b).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Descending by value, ascending by index on ties.
    let by_rank = |&a: &usize, &b: &usize| biased[b].total_cmp(&biased[a]).then(a.cmp(&b));
    if k < n {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_unstable();
    Ok(order)
}

/// Selection and weighting from precomputed logits, without grouping.
pub fn decide(logits: Vector, bias: &Vector, k: usize) -> Result<RoutingDecision> {
    let sigmoid_scores = sigmoid(&logits);
    let softmax_scores = softmax(&logits)?;
    let selected = select_topk(&sigmoid_scores, bias, k)?;
    let gate_weights = selected.iter().map(|&i| softmax_scores[i]).collect();
    Ok(RoutingDecision {
        selected,
        gate_weights,
        logits,
        sigmoid_scores,
        softmax_scores,
        group_weights: BTreeMap::new(),
    })
}

/// Aggregate `λ · Σ ρ_i` per group over the selected experts.
pub fn aggregate_groups(
    selected: &[usize],
    gate_weights: &[f64],
    grouping: &Grouping,
    lambda: f64,
) -> BTreeMap<usize, f64> {
    let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
    for (&i, &w) in selected.iter().zip(gate_weights) {
        *sums.entry(grouping.group_of(i)).or_insert(0.0) += w;
    }
    for v in sums.values_mut() {
        *v *= lambda;
    }
    sums
}

pub fn route_logits(
    logits: Vector,
    bias: &Vector,
    k: usize,
    lambda: f64,
    grouping: &Grouping,
) -> Result<RoutingDecision> {
    if logits.len() != grouping.n {
        return Err(GroveError::dim("route", grouping.n, logits.len()));
    }
    check_lambda(lambda, grouping.n, grouping.g)?;
    let mut decision = decide(logits, bias, k)?;
    decision.group_weights =
        aggregate_groups(&decision.selected, &decision.gate_weights, grouping, lambda);
    Ok(decision)
}

pub fn route(
    router: &Router,
    bias: &Vector,
    x: &Vector,
    k: usize,
    lambda: f64,
    grouping: &Grouping,
) -> Result<RoutingDecision> {
    route_logits(logits(router, x)?, bias, k, lambda, grouping)
}
