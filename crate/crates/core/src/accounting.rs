//! Activated-parameter and FLOP accounting, and the group-collision oracles.
//!
//! A token touches `k` experts and however many distinct adjugates its
//! selection spans, anywhere from `⌈k/(n/g)⌉` to `min(k, g)`. FLOPs use the
//! convention of 2 operations per multiply-accumulate; activation functions,
//! the softmax and the top-k are not counted.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::config::GroveConfig;
use crate::error::{GroveError, Result};
use crate::layer::GroveLayer;
use crate::math::{Rng, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    /// `3·d·m` (gate, up, down).
    pub per_expert: usize,
    /// `3·d·h`.
    pub per_adjugate: usize,
    /// `n·d`, reported separately from the conditional parameters.
    pub router: usize,
}

pub fn conditional_params(config: &GroveConfig) -> ParamCounts {
    ParamCounts {
        per_expert: 3 * config.d * config.m,
        per_adjugate: 3 * config.d * config.h,
        router: config.n * config.d,
    }
}

/// Expert plus adjugate parameters touched by a token that evaluates
/// `n_adjugate_evals` adjugates. Router parameters are excluded.
pub fn active_params(config: &GroveConfig, n_adjugate_evals: usize) -> Result<usize> {
    let (min, max) = (config.min_adjugate_evals(), config.max_adjugate_evals());
    if !(min..=max).contains(&n_adjugate_evals) {
        return Err(GroveError::AdjugateCountOutOfBound {
            count: n_adjugate_evals,
            min,
            max,
        });
    }
    let p = conditional_params(config);
    Ok(config.k * p.per_expert + n_adjugate_evals * p.per_adjugate)
}

pub fn flops_per_token(config: &GroveConfig, n_adjugate_evals: usize) -> Result<usize> {
    Ok(2 * active_params(config, n_adjugate_evals)?)
}

/// FLOPs when every selected expert evaluates its group's adjugate on its
/// own, i.e. `k` adjugate evaluations regardless of collisions.
pub fn naive_flops_per_token(config: &GroveConfig) -> usize {
    let p = conditional_params(config);
    2 * config.k * (p.per_expert + p.per_adjugate)
}

/// `C(n−s, k) / C(n, k)`: probability a given group of size `s` is missed by
/// `k` uniform draws without replacement.
fn miss_probability(n: usize, s: usize, k: usize) -> f64 {
    if k > n - s {
        return 0.0;
    }
    (0..k)
        .map(|i| (n - s - i) as f64 / (n - i) as f64)
        .product()
}

/// Expected number of distinct groups hit when `k` of `n` experts are drawn
/// uniformly without replacement: `g · (1 − C(n − n/g, k) / C(n, k))`.
pub fn expected_distinct_groups(n: usize, g: usize, k: usize) -> f64 {
    assert!(
        g > 0 && n.is_multiple_of(g) && k <= n,
        "need g | n and k <= n"
    );
    g as f64 * (1.0 - miss_probability(n, n / g, k))
}

/// Exact distribution of the distinct-group count under uniform selection;
/// index `r` holds `P(r groups hit)`.
pub fn distinct_groups_distribution(n: usize, g: usize, k: usize) -> Vec<f64> {
    assert!(
        g > 0 && n.is_multiple_of(g) && k <= n,
        "need g | n and k <= n"
    );
    let s = n / g;
    let binom = |a: usize, b: usize| -> f64 {
        if b > a {
            return 0.0;
        }
        (0..b).map(|i| (a - i) as f64 / (i + 1) as f64).product()
    };
    // ways[c][r]: selections of c experts spanning exactly r groups, built
    // one group at a time.
    let mut ways = vec![vec![0.0f64; g + 1]; k + 1];
    ways[0][0] = 1.0;
    for _ in 0..g {
        let mut next = vec![vec![0.0f64; g + 1]; k + 1];
        for c in 0..=k {
            for r in 0..=g {
                let w = ways[c][r];
                if w == 0.0 {
                    continue;
                }
                next[c][r] += w;
                for a in 1..=s.min(k - c) {
                    next[c + a][r + 1] += w * binom(s, a);
                }
            }
        }
        ways = next;
    }
    let total = binom(n, k);
    let mut dist: Vec<f64> = ways[k].iter().map(|w| w / total).collect();
    dist.truncate(k.min(g) + 1);
    dist
}

/// Monte-Carlo estimate of the mean distinct-group count under uniform
/// selection: `(mean, standard error)`.
pub fn monte_carlo_distinct_groups(
    n: usize,
    g: usize,
    k: usize,
    samples: usize,
    rng: &mut Rng,
) -> (f64, f64) {
    let s = n / g;
    let mut hit = vec![false; g];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        hit.iter_mut().for_each(|h| *h = false);
        let mut count = 0usize;
        for i in rng.sample_distinct(n, k) {
            let j = i / s;
            if !hit[j] {
                hit[j] = true;
                count += 1;
            }
        }
        sum += count as f64;
        sum_sq += (count * count) as f64;
    }
    let m = samples as f64;
    let mean = sum / m;
    let var = (sum_sq / m - mean * mean).max(0.0) * m / (m - 1.0).max(1.0);
    (mean, (var / m).sqrt())
}

/// Mergeable per-token tally of adjugate evaluations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTally {
    pub counts: BTreeMap<usize, u64>,
    pub samples: u64,
}

impl ActivationTally {
    pub fn record(&mut self, n_adjugate_evals: usize) {
        *self.counts.entry(n_adjugate_evals).or_insert(0) += 1;
        self.samples += 1;
    }

    pub fn merge(&mut self, other: &ActivationTally) {
        for (&c, &f) in &other.counts {
            *self.counts.entry(c).or_insert(0) += f;
        }
        self.samples += other.samples;
    }

    pub fn report(&self, config: &GroveConfig) -> Result<ActivationReport> {
        if self.samples == 0 {
            return Err(GroveError::config("samples", "must be at least 1"));
        }
        let p = conditional_params(config);
        let min_active = active_params(config, config.min_adjugate_evals())?;
        let max_active = active_params(config, config.max_adjugate_evals())?;
        let m = self.samples as f64;
        let mut mean_groups = 0.0;
        let mut mean_active = 0.0;
        let mut histogram = BTreeMap::new();
        for (&c, &f) in &self.counts {
            let active = active_params(config, c)?;
            mean_groups += c as f64 * f as f64 / m;
            mean_active += active as f64 * f as f64 / m;
            histogram.insert(c, f as f64 / m);
        }
        Ok(ActivationReport {
            samples: self.samples,
            n: config.n,
            g: config.g,
            k: config.k,
            per_expert_params: p.per_expert,
            per_adjugate_params: p.per_adjugate,
            router_params: p.router,
            min_active_params: min_active,
            max_active_params: max_active,
            mean_active_params: mean_active,
            mean_adjugate_evals: mean_groups,
            expected_adjugate_evals_uniform: expected_distinct_groups(config.n, config.g, config.k),
            adjugate_eval_savings: 1.0 - mean_groups / config.k as f64,
            mean_flops_per_token: 2.0 * mean_active,
            naive_flops_per_token: naive_flops_per_token(config),
            histogram,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationReport {
    pub samples: u64,
    pub n: usize,
    pub g: usize,
    pub k: usize,
    pub per_expert_params: usize,
    pub per_adjugate_params: usize,
    pub router_params: usize,
    pub min_active_params: usize,
    pub max_active_params: usize,
    pub mean_active_params: f64,
    pub mean_adjugate_evals: f64,
    /// Analytic mean under uniform selection, for comparison.
    pub expected_adjugate_evals_uniform: f64,
    /// `1 − mean_adjugate_evals / k`: fraction of naive adjugate work saved.
    pub adjugate_eval_savings: f64,
    pub mean_flops_per_token: f64,
    pub naive_flops_per_token: usize,
    /// Adjugate eval count → frequency.
    pub histogram: BTreeMap<usize, f64>,
}

impl ActivationReport {
    /// CSV with header `n_adjugate_evals,frequency`.
    pub fn write_histogram_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "n_adjugate_evals,frequency")?;
        for (c, f) in &self.histogram {
            writeln!(out, "{c},{f}")?;
        }
        Ok(())
    }
}

/// Standard-normal token vectors from a seeded stream.
pub fn gaussian_tokens(d: usize, seed: u64) -> impl Iterator<Item = Vector> {
    let mut rng = Rng::with_stream(seed, 3);
    std::iter::repeat_with(move || rng.normal_vector(d, 1.0))
}

/// Routes `samples` tokens from `tokens` and tallies adjugate evaluations.
pub fn routing_tally(
    layer: &GroveLayer,
    tokens: impl IntoIterator<Item = Vector>,
    samples: usize,
) -> Result<ActivationTally> {
    let mut tally = ActivationTally::default();
    for x in tokens.into_iter().take(samples) {
        tally.record(layer.route(&x)?.distinct_groups());
    }
    Ok(tally)
}

pub fn routing_histogram(
    layer: &GroveLayer,
    tokens: impl IntoIterator<Item = Vector>,
    samples: usize,
) -> Result<ActivationReport> {
    if samples == 0 {
        return Err(GroveError::config("samples", "must be at least 1"));
    }
    let tally = routing_tally(layer, tokens, samples)?;
    if tally.samples < samples as u64 {
        return Err(GroveError::config("samples", "token stream ended early"));
    }
    tally.report(&layer.config)
}
