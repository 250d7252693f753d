//! Auxiliary-loss-free load balancing.
//!
//! Each token contributes `1/k` to every expert it was routed to. The running
//! load `F` is compared against the uniform target `Q = 1/n` and the routing
//! bias moves against the imbalance:
//!
//! ```text
//! b ← b − α · (F − Q) / rms(F − Q)
//! ```
//!
//! The RMS normalization makes every non-trivial step have RMS exactly `α`
//! regardless of how large the imbalance is.

use std::io::Write;

use serde::Serialize;

use crate::config::GroveConfig;
use crate::error::{GroveError, Result};
use crate::math::{normal_init, rms, sigmoid, Rng, Vector};
use crate::routing::{select_topk, RoutingDecision};

/// `f_i = 1/k` for selected experts, zero elsewhere.
pub fn token_assignment(decision: &RoutingDecision, n: usize, k: usize) -> Vector {
    assignment_from_selected(&decision.selected, n, k)
}

fn assignment_from_selected(selected: &[usize], n: usize, k: usize) -> Vector {
    let mut f = Vector::zeros(n);
    let share = 1.0 / k as f64;
    for &i in selected {
        f[i] = share;
    }
    f
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ImbalanceMetrics {
    /// `max_i |F_i − Q_i|`
    pub max_violation: f64,
    /// `rms(F − Q)`
    pub rms_violation: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadTracker {
    n: usize,
    load: Vector,
    target: Vector,
    pub bias: Vector,
    pub alpha: f64,
    pub ema_decay: f64,
}

impl LoadTracker {
    /// Starts balanced: `F = Q`, `b = 0`.
    pub fn new(n: usize, alpha: f64, ema_decay: f64) -> Self {
        let target = Vector::filled(n, 1.0 / n as f64);
        LoadTracker {
            n,
            load: target.clone(),
            target,
            bias: Vector::zeros(n),
            alpha,
            ema_decay,
        }
    }

    pub fn with_bias(mut self, bias: Vector) -> Result<Self> {
        if bias.len() != self.n {
            return Err(GroveError::dim("LoadTracker::bias", self.n, bias.len()));
        }
        self.bias = bias;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn load(&self) -> &Vector {
        &self.load
    }

    pub fn target(&self) -> &Vector {
        &self.target
    }

    /// Overwrites the running estimate, e.g. to warm-start from a first batch.
    pub fn set_load(&mut self, load: Vector) -> Result<()> {
        if load.len() != self.n {
            return Err(GroveError::dim("LoadTracker::set_load", self.n, load.len()));
        }
        self.load = load;
        Ok(())
    }

    /// `F ← decay·F + (1 − decay)·f̄`
    pub fn update_load(&mut self, batch_mean_f: &Vector) -> Result<()> {
        if batch_mean_f.len() != self.n {
            return Err(GroveError::dim("update_load", self.n, batch_mean_f.len()));
        }
        let keep = self.ema_decay;
        for (f, &new) in self.load.iter_mut().zip(batch_mean_f.iter()) {
            *f = keep * *f + (1.0 - keep) * new;
        }
        Ok(())
    }

    pub fn imbalance(&self) -> Vector {
        self.load
            .sub(&self.target)
            .expect("tracker vectors share length n")
    }

    /// Applies one bias step and returns the vector subtracted from `b`,
    /// or `None` at perfect balance.
    pub fn update_bias(&mut self) -> Option<Vector> {
        let imbalance = self.imbalance();
        let scale = rms(&imbalance);
        if scale == 0.0 {
            return None;
        }
        let step = imbalance.scaled(self.alpha / scale);
        for (b, s) in self.bias.iter_mut().zip(step.iter()) {
            *b -= s;
        }
        Some(step)
    }

    pub fn imbalance_metrics(&self) -> ImbalanceMetrics {
        let imbalance = self.imbalance();
        ImbalanceMetrics {
            max_violation: imbalance.max_abs(),
            rms_violation: rms(&imbalance),
        }
    }
}

/// Produces the per-step batch of selection scores (`sigmoid(logits)`).
pub trait ScoreSource {
    fn n(&self) -> usize;
    fn next_batch(&mut self) -> &[Vector];
}

/// The same token batch every step: a stationary logit distribution, so the
/// load only moves when the bias does.
#[derive(Clone, Debug)]
pub struct StationaryPool {
    scores: Vec<Vector>,
}

impl StationaryPool {
    pub fn from_logits(logits: Vec<Vector>) -> Self {
        StationaryPool {
            scores: logits.iter().map(sigmoid).collect(),
        }
    }
}

impl ScoreSource for StationaryPool {
    fn n(&self) -> usize {
        self.scores.first().map_or(0, Vector::len)
    }

    fn next_batch(&mut self) -> &[Vector] {
        &self.scores
    }
}

/// Standard-normal tokens through a fan-in scaled random router, with
/// `skew` added to the logits of the first `skewed` experts.
pub fn skewed_logits(
    n: usize,
    d: usize,
    tokens: usize,
    skew: f64,
    skewed: usize,
    seed: u64,
) -> Vec<Vector> {
    let mut rng = Rng::with_stream(seed, 7);
    let router = normal_init(&mut rng, n, d, 1.0 / (d as f64).sqrt());
    (0..tokens)
        .map(|_| {
            let x = rng.normal_vector(d, 1.0);
            let mut z = router.matvec(&x).expect("router is n × d");
            for v in z.iter_mut().take(skewed) {
                *v += skew;
            }
            z
        })
        .collect()
}

/// Tokens per step in the standard skewed scenario.
pub const SCENARIO_TOKENS: usize = 256;
/// Logit offset of the favoured experts in the standard skewed scenario.
pub const SCENARIO_SKEW: f64 = 4.0;

/// The fixed skewed-logits scenario: the first `k` experts receive a logit
/// offset of `skew`, so without correction they take nearly every token.
pub fn standard_scenario(config: &GroveConfig, skew: f64) -> StationaryPool {
    StationaryPool::from_logits(skewed_logits(
        config.n,
        config.d,
        SCENARIO_TOKENS,
        skew,
        config.k,
        config.seed,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BalanceStep {
    pub step: usize,
    pub max_violation: f64,
    pub rms_violation: f64,
    /// RMS of the bias update applied after this step (0 for a no-op).
    #[serde(skip)]
    pub update_rms: f64,
}

/// Closed loop: route each batch with the current bias, fold the batch load
/// into `F`, record the imbalance, then update the bias. The first batch
/// initializes `F` directly.
pub fn simulate_balance(
    config: &GroveConfig,
    source: &mut dyn ScoreSource,
    steps: usize,
) -> Result<Vec<BalanceStep>> {
    if steps == 0 {
        return Err(GroveError::config("steps", "must be at least 1"));
    }
    if source.n() != config.n {
        return Err(GroveError::dim("simulate_balance", config.n, source.n()));
    }
    let (n, k) = (config.n, config.k);
    let mut tracker = LoadTracker::new(n, config.alpha, config.ema_decay);
    let mut trajectory = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = source.next_batch();
        let mut mean = Vector::zeros(n);
        for scores in batch {
            for i in select_topk(scores, &tracker.bias, k)? {
                mean[i] += 1.0;
            }
        }
        let mean = mean.scaled(1.0 / (k * batch.len().max(1)) as f64);
        if step == 0 {
            tracker.set_load(mean)?;
        } else {
            tracker.update_load(&mean)?;
        }
        let metrics = tracker.imbalance_metrics();
        let update_rms = tracker.update_bias().map_or(0.0, |u| rms(&u));
        trajectory.push(BalanceStep {
            step,
            max_violation: metrics.max_violation,
            rms_violation: metrics.rms_violation,
            update_rms,
        });
    }
    Ok(trajectory)
}

/// CSV with header `step,max_violation,rms_violation`.
pub fn write_trajectory_csv<W: Write>(
    mut out: W,
    trajectory: &[BalanceStep],
) -> std::io::Result<()> {
    writeln!(out, "step,max_violation,rms_violation")?;
    for s in trajectory {
        writeln!(
            out,
            "{},{:e},{:e}",
            s.step, s.max_violation, s.rms_violation
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;
    use crate::routing::decide;
    use proptest::prelude::*;

    fn v(data: &[f64]) -> Vector {
        data.to_vec().into()
    }

    #[test]
    fn token_assignment_examples() {
        let mut d = decide(v(&[5.0, -1.0, -2.0, 4.0]), &Vector::zeros(4), 2).unwrap();
        assert_eq!(d.selected, vec![0, 3]);
        assert_eq!(token_assignment(&d, 4, 2), v(&[0.5, 0.0, 0.0, 0.5]));
        d = decide(v(&[1.0, 2.0, 3.0, 4.0]), &Vector::zeros(4), 4).unwrap();
        assert_eq!(token_assignment(&d, 4, 4), Vector::filled(4, 0.25));
        assert_eq!(assignment_from_selected(&[1, 4, 6], 7, 3).sum(), 1.0);
    }

    #[test]
    fn update_load_examples() {
        let mut t = LoadTracker::new(3, 0.001, 0.0);
        t.update_load(&v(&[0.5, 0.5, 0.0])).unwrap();
        assert_eq!(t.load(), &v(&[0.5, 0.5, 0.0]));
        assert!(t.update_load(&v(&[1.0])).is_err());

        let mut c = LoadTracker::new(3, 0.001, 0.9);
        let target = v(&[0.2, 0.3, 0.5]);
        for _ in 0..500 {
            c.update_load(&target).unwrap();
        }
        assert!(c.load().sub(&target).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn alternating_stream_converges_to_mean() {
        // With decay 1/2 and inputs a, b, a, b, ... the fixed point after a
        // `b` step is (a + 2b)/3 and after an `a` step (2a + b)/3; their
        // average is (a + b)/2.
        let (a, b) = (v(&[1.0, 0.0]), v(&[0.0, 1.0]));
        let mut t = LoadTracker::new(2, 0.0, 0.5);
        for _ in 0..200 {
            t.update_load(&a).unwrap();
            t.update_load(&b).unwrap();
        }
        let after_b = t.load().clone();
        t.update_load(&a).unwrap();
        let after_a = t.load().clone();
        assert!((after_b[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((after_a[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!(((after_a[0] + after_b[0]) / 2.0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn update_bias_examples() {
        let mut t = LoadTracker::new(4, 0.001, 0.9);
        assert!(t.update_bias().is_none());
        assert_eq!(t.bias, Vector::zeros(4));

        let mut two = LoadTracker::new(2, 0.01, 0.9);
        two.set_load(v(&[0.5 + 0.2, 0.5 - 0.2])).unwrap();
        two.update_bias().unwrap();
        assert!((two.bias[0] + 0.01).abs() < 1e-15 && (two.bias[1] - 0.01).abs() < 1e-15);

        let mut over = LoadTracker::new(4, 0.001, 0.9);
        over.set_load(v(&[0.4, 0.2, 0.2, 0.2])).unwrap();
        over.update_bias();
        assert!(over.bias[0] < 0.0);
    }

    #[test]
    fn imbalance_metric_examples() {
        let t = LoadTracker::new(5, 0.001, 0.9);
        assert_eq!(
            t.imbalance_metrics(),
            ImbalanceMetrics {
                max_violation: 0.0,
                rms_violation: 0.0
            }
        );
        let mut two = LoadTracker::new(2, 0.001, 0.9);
        two.set_load(v(&[1.0, 0.0])).unwrap();
        assert_eq!(two.imbalance_metrics().max_violation, 0.5);

        let mut rng = Rng::seed(4);
        let raw: Vec<f64> = (0..10).map(|_| rng.uniform()).collect();
        let total: f64 = raw.iter().sum();
        let f: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let mut t = LoadTracker::new(10, 0.001, 0.9);
        t.set_load(f.clone().into()).unwrap();
        let m = t.imbalance_metrics();
        let max = f.iter().map(|x| (x - 0.1).abs()).fold(0.0, f64::max);
        let r = (f.iter().map(|x| (x - 0.1).powi(2)).sum::<f64>() / 10.0).sqrt();
        assert!((m.max_violation - max).abs() < 1e-15 && (m.rms_violation - r).abs() < 1e-15);
    }

    #[test]
    fn symmetric_logits_stay_balanced() {
        let config = GroveConfig {
            n: 16,
            k: 2,
            g: 8,
            d: 8,
            lambda: 0.5,
            ..Default::default()
        };
        let mut pool = standard_scenario(&config, 0.0);
        let traj = simulate_balance(&config, &mut pool, 400).unwrap();
        let first = traj[0].max_violation;
        let last = traj.last().unwrap().max_violation;
        assert!(last <= first + 1e-12, "first {first} last {last}");
    }

    #[test]
    fn zero_alpha_keeps_trajectory_constant() {
        let config = GroveConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let mut pool = standard_scenario(&config, SCENARIO_SKEW);
        let traj = simulate_balance(&config, &mut pool, 50).unwrap();
        for s in &traj {
            assert!((s.max_violation - traj[0].max_violation).abs() < 1e-12);
            assert!((s.rms_violation - traj[0].rms_violation).abs() < 1e-12);
            assert_eq!(s.update_rms, 0.0);
        }
        assert!(simulate_balance(&config, &mut pool, 0).is_err());
    }

    #[test]
    fn trajectory_csv_has_documented_header() {
        let config = GroveConfig {
            n: 8,
            k: 2,
            g: 4,
            d: 4,
            lambda: 0.5,
            ..Default::default()
        };
        let mut pool = standard_scenario(&config, 1.0);
        let traj = simulate_balance(&config, &mut pool, 3).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,max_violation,rms_violation"));
        assert_eq!(lines.count(), 3);
    }

    fn load_vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n)
            .prop_filter("nonzero", |v| v.iter().sum::<f64>() > 0.0)
    }

    proptest! {
        #[test]
        fn bias_update_has_rms_alpha_and_conserves_sum(raw in load_vector(12), alpha in 1e-4f64..0.1, c in 0.1f64..10.0) {
            let total: f64 = raw.iter().sum();
            let f: Vector = raw.iter().map(|x| x / total).collect::<Vec<_>>().into();
            let mut t = LoadTracker::new(12, alpha, 0.9);
            t.set_load(f.clone()).unwrap();
            let before: f64 = t.bias.sum();
            match t.update_bias() {
                Some(step) => {
                    prop_assert!((rms(&step) - alpha).abs() < 1e-12);
                    prop_assert!(step.sum().abs() < 1e-9);
                    prop_assert!((t.bias.sum() - before).abs() < 1e-9);
                }
                None => prop_assert!(t.imbalance().max_abs() == 0.0),
            }

            // Scaling the imbalance by c > 0 leaves the step unchanged.
            let q = 1.0 / 12.0;
            let scaled: Vector = f.iter().map(|fi| q + c * (fi - q)).collect::<Vec<_>>().into();
            let mut a = LoadTracker::new(12, alpha, 0.9);
            a.set_load(f).unwrap();
            let mut b = LoadTracker::new(12, alpha, 0.9);
            b.set_load(scaled).unwrap();
            if let (Some(sa), Some(sb)) = (a.update_bias(), b.update_bias()) {
                for (x, y) in sa.iter().zip(sb.iter()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
