//! Experts, grouped adjugate experts, and the Grove forward/backward passes.
//!
//! For a token `x` with selected set `S` and softmax weights `ρ`, the Grove
//! output is
//!
//! ```text
//! y = Σ_{i∈S} ρ_i · (E_i(x) + λ · A_{group(i)}(x))
//! ```
//!
//! Experts that share a group share one adjugate, so the adjugate part can be
//! regrouped as `Σ_j (λ · Σ_{i∈S∩G_j} ρ_i) · A_j(x)`: each activated adjugate
//! is evaluated once. [`grove_forward_naive`] evaluates the first form,
//! [`grove_forward_dedup`] the second.

use std::collections::BTreeMap;

use crate::config::{GroveConfig, MoeConfig};
use crate::error::{GroveError, Result};
use crate::math::{normal_init, silu_grad_scalar, silu_scalar, Matrix, Rng, Vector};
use crate::routing::{self, Grouping, Router, RoutingDecision};

/// 0-based group of expert `i` when `n` experts form `g` contiguous groups.
pub fn group_of(i: usize, n: usize, g: usize) -> usize {
    debug_assert!(i < n && g > 0 && n.is_multiple_of(g));
    i / (n / g)
}

/// Gated feed-forward block: `down · (silu(gate · x) ⊙ (up · x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub gate: Matrix,
    pub up: Matrix,
    pub down: Matrix,
}

/// A routed expert (intermediate width `m`).
pub type Expert = Ffn;
/// A per-group adjugate expert (intermediate width `h`).
pub type AdjugateExpert = Ffn;

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct FfnActivations {
    pub gate_pre: Vector,
    pub up_pre: Vector,
    pub hidden: Vector,
    pub output: Vector,
}

impl Ffn {
    pub fn zeros(d: usize, width: usize) -> Self {
        Ffn {
            gate: Matrix::zeros(width, d),
            up: Matrix::zeros(width, d),
            down: Matrix::zeros(d, width),
        }
    }

    /// Fan-in scaled normal init.
    pub fn random(rng: &mut Rng, d: usize, width: usize) -> Self {
        let in_std = 1.0 / (d as f64).sqrt();
        let out_std = if width == 0 {
            0.0
        } else {
            1.0 / (width as f64).sqrt()
        };
        Ffn {
            gate: normal_init(rng, width, d, in_std),
            up: normal_init(rng, width, d, in_std),
            down: normal_init(rng, d, width, out_std),
        }
    }

    pub fn d(&self) -> usize {
        self.gate.cols()
    }

    pub fn width(&self) -> usize {
        self.gate.rows()
    }

    pub fn param_count(&self) -> usize {
        self.gate.data().len() + self.up.data().len() + self.down.data().len()
    }

    fn check_shapes(&self) -> Result<()> {
        let (w, d) = self.gate.shape();
        if self.up.shape() != (w, d) {
            return Err(GroveError::dim("Ffn::up", w * d, self.up.data().len()));
        }
        if self.down.shape() != (d, w) {
            return Err(GroveError::dim("Ffn::down", d * w, self.down.data().len()));
        }
        Ok(())
    }

    pub fn forward_cached(&self, x: &Vector) -> Result<FfnActivations> {
        let gate_pre = self.gate.matvec(x)?;
        let up_pre = self.up.matvec(x)?;
        let hidden: Vector = gate_pre
            .iter()
            .zip(up_pre.iter())
            .map(|(&a, &b)| silu_scalar(a) * b)
            .collect::<Vec<_>>()
            .into();
        let output = self.down.matvec(&hidden)?;
        Ok(FfnActivations {
            gate_pre,
            up_pre,
            hidden,
            output,
        })
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        Ok(self.forward_cached(x)?.output)
    }

    /// Accumulates `scale`-weighted parameter gradients into `grad` and
    /// returns the gradient with respect to the input.
    fn backward_into(
        &self,
        x: &Vector,
        acts: &FfnActivations,
        out_grad: &Vector,
        scale: f64,
        grad: &mut Ffn,
    ) -> Result<Vector> {
        let g_out = out_grad.scaled(scale);
        grad.down.add_outer(1.0, &g_out, &acts.hidden)?;
        let g_hidden = self.down.matvec_t(&g_out)?;
        let mut g_gate = Vector::zeros(self.width());
        let mut g_up = Vector::zeros(self.width());
        for r in 0..self.width() {
            let (a, b) = (acts.gate_pre[r], acts.up_pre[r]);
            g_gate[r] = g_hidden[r] * b * silu_grad_scalar(a);
            g_up[r] = g_hidden[r] * silu_scalar(a);
        }
        grad.gate.add_outer(1.0, &g_gate, x)?;
        grad.up.add_outer(1.0, &g_up, x)?;
        let mut g_x = self.gate.matvec_t(&g_gate)?;
        g_x.axpy(1.0, &self.up.matvec_t(&g_up)?)?;
        Ok(g_x)
    }
}

pub fn expert_forward(e: &Expert, x: &Vector) -> Result<Vector> {
    e.forward(x)
}

/// Traditional top-k mixture of experts with decoupled routing and balance
/// bias.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    pub config: MoeConfig,
    pub router: Router,
    pub experts: Vec<Expert>,
    pub bias: Vector,
}

impl MoeLayer {
    pub fn new(
        config: MoeConfig,
        router: Router,
        experts: Vec<Expert>,
        bias: Vector,
    ) -> Result<Self> {
        config.validate()?;
        check_router(&router, config.n, config.d)?;
        check_ffns(&experts, config.n, config.d, config.m, "experts")?;
        if bias.len() != config.n {
            return Err(GroveError::dim("MoeLayer::bias", config.n, bias.len()));
        }
        if !bias.is_finite() {
            return Err(GroveError::config("bias", "entries must be finite"));
        }
        Ok(MoeLayer {
            config,
            router,
            experts,
            bias,
        })
    }

    /// Router and experts drawn with fan-in scaled normals, zero bias.
    pub fn random(config: MoeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed(seed);
        let router = Router::new(normal_init(
            &mut rng,
            config.n,
            config.d,
            1.0 / (config.d as f64).sqrt(),
        ));
        let experts = (0..config.n)
            .map(|_| Ffn::random(&mut rng, config.d, config.m))
            .collect();
        MoeLayer::new(config, router, experts, Vector::zeros(config.n))
    }

    pub fn route(&self, x: &Vector) -> Result<RoutingDecision> {
        routing::decide(routing::logits(&self.router, x)?, &self.bias, self.config.k)
    }

    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        let decision = self.route(x)?;
        mixture(&self.experts, &decision, x)
    }
}

fn check_router(router: &Router, n: usize, d: usize) -> Result<()> {
    if router.weight.shape() != (n, d) {
        return Err(GroveError::dim("router", n * d, router.weight.data().len()));
    }
    Ok(())
}

fn check_ffns(
    ffns: &[Ffn],
    count: usize,
    d: usize,
    width: usize,
    what: &'static str,
) -> Result<()> {
    if ffns.len() != count {
        return Err(GroveError::dim(what, count, ffns.len()));
    }
    for f in ffns {
        f.check_shapes()?;
        if f.d() != d || f.width() != width {
            return Err(GroveError::dim(what, d * width, f.d() * f.width()));
        }
    }
    Ok(())
}

/// `Σ_{i∈S} ρ_i E_i(x)`
fn mixture(experts: &[Expert], decision: &RoutingDecision, x: &Vector) -> Result<Vector> {
    let mut y = Vector::zeros(x.len());
    for (&i, &w) in decision.selected.iter().zip(&decision.gate_weights) {
        y.axpy(w, &experts[i].forward(x)?)?;
    }
    Ok(y)
}

/// Per-token record of the deduplicated adjugate work.
#[derive(Clone, Debug, PartialEq)]
pub struct DedupStats {
    pub n_adjugate_evals: usize,
    pub group_weights: BTreeMap<usize, f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Naive,
    Dedup,
}

/// The Grove layer: `n` experts plus `g` adjugates, one per group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroveLayer {
    pub config: GroveConfig,
    pub router: Router,
    pub experts: Vec<Expert>,
    pub adjugates: Vec<AdjugateExpert>,
    pub bias: Vector,
}

impl GroveLayer {
    pub fn new(
        config: GroveConfig,
        router: Router,
        experts: Vec<Expert>,
        adjugates: Vec<AdjugateExpert>,
        bias: Vector,
    ) -> Result<Self> {
        config.validate()?;
        let moe = MoeLayer::new(config.moe(), router, experts, bias)?;
        check_ffns(&adjugates, config.g, config.d, config.h, "adjugates")?;
        Ok(GroveLayer {
            config,
            router: moe.router,
            experts: moe.experts,
            adjugates,
            bias: moe.bias,
        })
    }

    /// Every tensor random, including adjugate down-projections.
    pub fn random(config: GroveConfig) -> Result<Self> {
        config.validate()?;
        let moe = MoeLayer::random(config.moe(), config.seed)?;
        let mut rng = Rng::with_stream(config.seed, 1);
        let adjugates = (0..config.g)
            .map(|_| Ffn::random(&mut rng, config.d, config.h))
            .collect();
        GroveLayer::new(config, moe.router, moe.experts, adjugates, moe.bias)
    }

    pub fn grouping(&self) -> Grouping {
        Grouping {
            n: self.config.n,
            g: self.config.g,
        }
    }

    pub fn route(&self, x: &Vector) -> Result<RoutingDecision> {
        routing::route(
            &self.router,
            &self.bias,
            x,
            self.config.k,
            self.config.lambda,
            &self.grouping(),
        )
    }

    /// The plain part only: `Σ_{i∈S} ρ_i E_i(x)`.
    pub fn moe_part(&self) -> MoeLayer {
        MoeLayer {
            config: self.config.moe(),
            router: self.router.clone(),
            experts: self.experts.clone(),
            bias: self.bias.clone(),
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let config = GroveConfig {
            lambda,
            ..self.config.clone()
        };
        config.validate()?;
        Ok(GroveLayer {
            config,
            ..self.clone()
        })
    }

    pub fn forward(&self, x: &Vector, mode: ForwardMode) -> Result<(Vector, DedupStats)> {
        match mode {
            ForwardMode::Dedup => grove_forward_dedup(self, x),
            ForwardMode::Naive => {
                let decision = self.route(x)?;
                let y = naive_from_decision(self, x, &decision)?;
                Ok((y, stats_of(&decision)))
            }
        }
    }
}

fn stats_of(decision: &RoutingDecision) -> DedupStats {
    DedupStats {
        n_adjugate_evals: decision.group_weights.len(),
        group_weights: decision.group_weights.clone(),
    }
}

/// Traditional MoE output of a Grove layer, adjugates ignored.
pub fn moe_forward(layer: &GroveLayer, x: &Vector) -> Result<Vector> {
    let decision = layer.route(x)?;
    mixture(&layer.experts, &decision, x)
}

fn naive_from_decision(
    layer: &GroveLayer,
    x: &Vector,
    decision: &RoutingDecision,
) -> Result<Vector> {
    let lambda = layer.config.lambda;
    let mut y = Vector::zeros(x.len());
    for (&i, &w) in decision.selected.iter().zip(&decision.gate_weights) {
        let mut term = layer.experts[i].forward(x)?;
        let adj = layer.adjugates[layer.config.group_of(i)].forward(x)?;
        term.axpy(lambda, &adj)?;
        y.axpy(w, &term)?;
    }
    Ok(y)
}

/// Reference semantics: one adjugate evaluation per selected expert.
pub fn grove_forward_naive(layer: &GroveLayer, x: &Vector) -> Result<Vector> {
    let decision = layer.route(x)?;
    naive_from_decision(layer, x, &decision)
}

fn dedup_from_decision(
    layer: &GroveLayer,
    x: &Vector,
    decision: &RoutingDecision,
) -> Result<Vector> {
    let mut y = mixture(&layer.experts, decision, x)?;
    for (&j, &w) in &decision.group_weights {
        y.axpy(w, &layer.adjugates[j].forward(x)?)?;
    }
    Ok(y)
}

/// Each activated adjugate evaluated once with its aggregated group weight.
pub fn grove_forward_dedup(layer: &GroveLayer, x: &Vector) -> Result<(Vector, DedupStats)> {
    let decision = layer.route(x)?;
    let y = dedup_from_decision(layer, x, &decision)?;
    Ok((y, stats_of(&decision)))
}

/// Forward with the selected set pinned; softmax weights are still
/// recomputed from the current router. This is the function whose
/// derivative [`grove_backward`] returns.
pub fn grove_forward_fixed(layer: &GroveLayer, x: &Vector, selected: &[usize]) -> Result<Vector> {
    let logits = routing::logits(&layer.router, x)?;
    let softmax = crate::math::softmax(&logits)?;
    let gate_weights: Vec<f64> = selected.iter().map(|&i| softmax[i]).collect();
    let group_weights = routing::aggregate_groups(
        selected,
        &gate_weights,
        &layer.grouping(),
        layer.config.lambda,
    );
    let decision = RoutingDecision {
        selected: selected.to_vec(),
        gate_weights,
        sigmoid_scores: crate::math::sigmoid(&logits),
        logits,
        softmax_scores: softmax,
        group_weights,
    };
    dedup_from_decision(layer, x, &decision)
}

/// Parameter and input gradients of one Grove layer. Dense: tensors of
/// experts and adjugates that did not fire stay exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub x: Vector,
    pub router: Matrix,
    pub experts: Vec<Ffn>,
    pub adjugates: Vec<Ffn>,
}

impl Gradients {
    pub fn zeros(layer: &GroveLayer) -> Self {
        let c = &layer.config;
        Gradients {
            x: Vector::zeros(c.d),
            router: Matrix::zeros(c.n, c.d),
            experts: (0..c.n).map(|_| Ffn::zeros(c.d, c.m)).collect(),
            adjugates: (0..c.g).map(|_| Ffn::zeros(c.d, c.h)).collect(),
        }
    }
}

/// Backpropagates `upstream = ∂L/∂y` through one token, treating the
/// decision's selected set as constant. Gradient reaches the router only
/// through the softmax weights; the sigmoid scores and the bias get none.
pub fn grove_backward(
    layer: &GroveLayer,
    x: &Vector,
    decision: &RoutingDecision,
    upstream: &Vector,
) -> Result<Gradients> {
    let mut grads = Gradients::zeros(layer);
    grove_backward_into(layer, x, decision, upstream, &mut grads)?;
    Ok(grads)
}

/// Same as [`grove_backward`] but accumulates into `grads`.
pub fn grove_backward_into(
    layer: &GroveLayer,
    x: &Vector,
    decision: &RoutingDecision,
    upstream: &Vector,
    grads: &mut Gradients,
) -> Result<()> {
    let c = &layer.config;
    if x.len() != c.d {
        return Err(GroveError::dim("grove_backward::x", c.d, x.len()));
    }
    if upstream.len() != c.d {
        return Err(GroveError::dim(
            "grove_backward::upstream",
            c.d,
            upstream.len(),
        ));
    }

    // Adjugate activations, once per activated group.
    let mut adj_acts = BTreeMap::new();
    for &j in decision.group_weights.keys() {
        adj_acts.insert(j, layer.adjugates[j].forward_cached(x)?);
    }

    let mut grad_x = Vector::zeros(c.d);
    // ∂L/∂ρ_i for selected experts.
    let mut grad_rho = Vector::zeros(c.n);
    for (&i, &w) in decision.selected.iter().zip(&decision.gate_weights) {
        let acts = layer.experts[i].forward_cached(x)?;
        let j = c.group_of(i);
        grad_rho[i] =
            upstream.dot(&acts.output)? + c.lambda * upstream.dot(&adj_acts[&j].output)?;
        let gx = layer.experts[i].backward_into(x, &acts, upstream, w, &mut grads.experts[i])?;
        grad_x.axpy(1.0, &gx)?;
    }
    for (&j, &w) in &decision.group_weights {
        let gx = layer.adjugates[j].backward_into(
            x,
            &adj_acts[&j],
            upstream,
            w,
            &mut grads.adjugates[j],
        )?;
        grad_x.axpy(1.0, &gx)?;
    }

    // Softmax Jacobian: ∂L/∂z = ρ ⊙ (∂L/∂ρ − ⟨ρ, ∂L/∂ρ⟩).
    let p = &decision.softmax_scores;
    let inner = p.dot(&grad_rho)?;
    let grad_logits: Vector = p
        .iter()
        .zip(grad_rho.iter())
        .map(|(&pi, &gi)| pi * (gi - inner))
        .collect::<Vec<_>>()
        .into();
    grads.router.add_outer(1.0, &grad_logits, x)?;
    grad_x.axpy(1.0, &layer.router.weight.matvec_t(&grad_logits)?)?;
    grads.x.axpy(1.0, &grad_x)?;
    Ok(())
}

pub struct BatchOutput {
    pub outputs: Vec<Vector>,
    pub stats: Vec<DedupStats>,
    pub decisions: Vec<RoutingDecision>,
    /// Batch mean of the per-token assignment vectors (`1/k` on selected).
    pub load: Vector,
}

pub fn batch_forward(layer: &GroveLayer, xs: &[Vector], mode: ForwardMode) -> Result<BatchOutput> {
    let c = &layer.config;
    let mut outputs = Vec::with_capacity(xs.len());
    let mut stats = Vec::with_capacity(xs.len());
    let mut decisions = Vec::with_capacity(xs.len());
    let mut load = Vector::zeros(c.n);
    for x in xs {
        let decision = layer.route(x)?;
        let y = match mode {
            ForwardMode::Naive => naive_from_decision(layer, x, &decision)?,
            ForwardMode::Dedup => dedup_from_decision(layer, x, &decision)?,
        };
        load.axpy(1.0, &crate::balance::token_assignment(&decision, c.n, c.k))?;
        outputs.push(y);
        stats.push(stats_of(&decision));
        decisions.push(decision);
    }
    if !xs.is_empty() {
        load = load.scaled(1.0 / xs.len() as f64);
    }
    Ok(BatchOutput {
        outputs,
        stats,
        decisions,
        load,
    })
}
