//! Central finite-difference check of [`grove_backward`].
//!
//! The scalar probed is `L = ⟨u, y(θ)⟩` for a random upstream vector `u`,
//! with `y` evaluated by [`grove_forward_fixed`] so the selected set stays
//! pinned to the one the analytic pass used. Errors are reported per tensor
//! as `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.

use serde::Serialize;

use crate::error::{GroveError, Result};
use crate::layer::{grove_backward, grove_forward_fixed, Ffn, Gradients, GroveLayer};
use crate::math::{Matrix, Rng, Vector};
use crate::routing::RoutingDecision;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor; `None` checks every coordinate.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            coords_per_tensor: Some(64),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorError {
    pub probe: usize,
    pub name: String,
    pub coords: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub probes: usize,
    pub tensors: Vec<TensorError>,
    pub max_rel_error: f64,
    /// Unselected experts or inactive adjugates with a nonzero gradient.
    pub sparsity_violations: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Signature of a backward pass under test.
pub type BackwardFn<'a> =
    dyn Fn(&GroveLayer, &Vector, &RoutingDecision, &Vector) -> Result<Gradients> + 'a;

pub fn gradcheck(
    layer: &GroveLayer,
    probes: usize,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    gradcheck_with(layer, probes, opts, &grove_backward)
}

#[derive(Clone, Copy)]
enum Slot {
    Input,
    Router,
    Expert(usize, Part),
    Adjugate(usize, Part),
}

#[derive(Clone, Copy)]
enum Part {
    Gate,
    Up,
    Down,
}

impl Part {
    const ALL: [Part; 3] = [Part::Gate, Part::Up, Part::Down];

    fn name(self) -> &'static str {
        match self {
            Part::Gate => "gate",
            Part::Up => "up",
            Part::Down => "down",
        }
    }

    fn of(self, f: &Ffn) -> &Matrix {
        match self {
            Part::Gate => &f.gate,
            Part::Up => &f.up,
            Part::Down => &f.down,
        }
    }

    fn of_mut(self, f: &mut Ffn) -> &mut Matrix {
        match self {
            Part::Gate => &mut f.gate,
            Part::Up => &mut f.up,
            Part::Down => &mut f.down,
        }
    }
}

impl Slot {
    fn name(self) -> String {
        match self {
            Slot::Input => "x".into(),
            Slot::Router => "router".into(),
            Slot::Expert(i, p) => format!("experts.{i}.{}", p.name()),
            Slot::Adjugate(j, p) => format!("adjugates.{j}.{}", p.name()),
        }
    }

    fn analytic(self, g: &Gradients) -> &[f64] {
        match self {
            Slot::Input => &g.x,
            Slot::Router => g.router.data(),
            Slot::Expert(i, p) => p.of(&g.experts[i]).data(),
            Slot::Adjugate(j, p) => p.of(&g.adjugates[j]).data(),
        }
    }

    fn values_mut<'a>(self, layer: &'a mut GroveLayer, x: &'a mut Vector) -> &'a mut [f64] {
        match self {
            Slot::Input => x,
            Slot::Router => layer.router.weight.data_mut(),
            Slot::Expert(i, p) => p.of_mut(&mut layer.experts[i]).data_mut(),
            Slot::Adjugate(j, p) => p.of_mut(&mut layer.adjugates[j]).data_mut(),
        }
    }
}

pub fn gradcheck_with(
    layer: &GroveLayer,
    probes: usize,
    opts: &GradcheckOptions,
    backward: &BackwardFn<'_>,
) -> Result<GradcheckReport> {
    if probes == 0 {
        return Err(GroveError::config("probes", "must be at least 1"));
    }
    let d = layer.config.d;
    let mut rng = Rng::with_stream(opts.seed, 5);
    let mut tensors = Vec::new();
    let mut sparsity_violations = 0;
    let mut work = layer.clone();

    for probe in 0..probes {
        let mut x = rng.normal_vector(d, 1.0);
        let upstream = rng.normal_vector(d, 1.0);
        let decision = layer.route(&x)?;
        let analytic = backward(layer, &x, &decision, &upstream)?;

        let zero_expert = Ffn::zeros(d, layer.config.m);
        let zero_adj = Ffn::zeros(d, layer.config.h);
        for (i, g) in analytic.experts.iter().enumerate() {
            if !decision.selected.contains(&i) && *g != zero_expert {
                sparsity_violations += 1;
            }
        }
        for (j, g) in analytic.adjugates.iter().enumerate() {
            if !decision.group_weights.contains_key(&j) && *g != zero_adj {
                sparsity_violations += 1;
            }
        }

        let mut slots = vec![Slot::Input, Slot::Router];
        for &i in &decision.selected {
            slots.extend(Part::ALL.map(|p| Slot::Expert(i, p)));
        }
        for &j in decision.group_weights.keys() {
            slots.extend(Part::ALL.map(|p| Slot::Adjugate(j, p)));
        }

        let loss = |l: &GroveLayer, x: &Vector| -> Result<f64> {
            grove_forward_fixed(l, x, &decision.selected)?.dot(&upstream)
        };

        for slot in slots {
            let exact = slot.analytic(&analytic);
            let len = exact.len();
            let coords: Vec<usize> = match opts.coords_per_tensor {
                Some(c) if c < len => rng.sample_distinct(len, c),
                _ => (0..len).collect(),
            };
            let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
            for &c in &coords {
                let orig = slot.values_mut(&mut work, &mut x)[c];
                slot.values_mut(&mut work, &mut x)[c] = orig + opts.step;
                let plus = loss(&work, &x)?;
                slot.values_mut(&mut work, &mut x)[c] = orig - opts.step;
                let minus = loss(&work, &x)?;
                slot.values_mut(&mut work, &mut x)[c] = orig;
                let numeric = (plus - minus) / (2.0 * opts.step);
                diff_sq += (exact[c] - numeric).powi(2);
                a_sq += exact[c].powi(2);
                n_sq += numeric.powi(2);
            }
            let scale = a_sq.sqrt().max(n_sq.sqrt());
            let rel_error = if scale == 0.0 {
                0.0
            } else {
                diff_sq.sqrt() / scale
            };
            tensors.push(TensorError {
                probe,
                name: slot.name(),
                coords: coords.len(),
                rel_error,
            });
        }
    }

    let max_rel_error = tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        probes,
        passed: max_rel_error < opts.tolerance && sparsity_violations == 0,
        tensors,
        max_rel_error,
        sparsity_violations,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GroveConfig;

    fn small() -> GroveLayer {
        GroveLayer::random(GroveConfig {
            d: 5,
            n: 8,
            k: 3,
            g: 4,
            h: 3,
            m: 4,
            lambda: 0.4,
            seed: 8,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn exhaustive_check_passes_on_small_layer() {
        let opts = GradcheckOptions {
            coords_per_tensor: None,
            ..Default::default()
        };
        let report = gradcheck(&small(), 5, &opts).unwrap();
        assert!(report.passed, "max rel error {}", report.max_rel_error);
        assert_eq!(report.sparsity_violations, 0);
        assert!(report.tensors.iter().any(|t| t.name == "router"));
    }

    #[test]
    fn corrupted_backward_fails() {
        let broken = |l: &GroveLayer, x: &Vector, d: &RoutingDecision, u: &Vector| {
            let mut g = grove_backward(l, x, d, u)?;
            // drop the softmax path into the router
            g.router = Matrix::zeros(l.config.n, l.config.d);
            Ok(g)
        };
        let report = gradcheck_with(&small(), 2, &GradcheckOptions::default(), &broken).unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 0.5);
    }

    #[test]
    fn zero_probes_rejected() {
        assert!(gradcheck(&small(), 0, &GradcheckOptions::default()).is_err());
    }
}
