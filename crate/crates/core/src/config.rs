//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{GroveError, Result};
use crate::layer::group_of;

fn default_ema_decay() -> f64 {
    0.9
}

/// Hyperparameters of a Grove layer.
///
/// `n` experts of intermediate width `m` are partitioned into `g` groups of
/// `n / g` consecutive experts; each group owns one adjugate expert of width
/// `h` whose output is scaled by `lambda`.
/// Missing keys take their [`Default`] values when deserializing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroveConfig {
    /// Feature dimension.
    pub d: usize,
    /// Expert count.
    pub n: usize,
    /// Experts activated per token.
    pub k: usize,
    /// Group count; must divide `n`.
    pub g: usize,
    /// Adjugate intermediate width.
    pub h: usize,
    /// Expert intermediate width.
    pub m: usize,
    /// Adjugate scaling factor, `0 < lambda <= g / n`.
    pub lambda: f64,
    /// Balance bias update rate.
    pub alpha: f64,
    /// Std of the normal init for adjugate gate/up projections.
    pub init_std: f64,
    pub seed: u64,
    /// Decay of the running load estimate.
    pub ema_decay: f64,
}

impl Default for GroveConfig {
    /// Desk-scale defaults: 128 experts, top-8, 64 groups of two.
    fn default() -> Self {
        GroveConfig {
            d: 32,
            n: 128,
            k: 8,
            g: 64,
            h: 8,
            m: 48,
            lambda: 0.05,
            alpha: 0.001,
            init_std: 0.006,
            seed: 0,
            ema_decay: default_ema_decay(),
        }
    }
}

impl GroveConfig {
    pub fn validate(&self) -> Result<()> {
        self.moe().validate()?;
        if self.g == 0 {
            return Err(GroveError::config("g", "group count must be at least 1"));
        }
        if !self.n.is_multiple_of(self.g) {
            return Err(GroveError::config(
                "g",
                format!("g={} must divide n={} (g divides n)", self.g, self.n),
            ));
        }
        check_lambda(self.lambda, self.n, self.g)?;
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(GroveError::config("alpha", "must be finite and >= 0"));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(GroveError::config("init_std", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(GroveError::config("ema_decay", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n / self.g
    }

    /// Upper bound on λ: `g / n`.
    pub fn lambda_max(&self) -> f64 {
        self.g as f64 / self.n as f64
    }

    /// `⌈k / (n/g)⌉`, the fewest adjugates any token can touch.
    pub fn min_adjugate_evals(&self) -> usize {
        self.k.div_ceil(self.group_size())
    }

    /// `min(k, g)`, the most adjugates any token can touch.
    pub fn max_adjugate_evals(&self) -> usize {
        self.k.min(self.g)
    }

    pub fn group_of(&self, expert: usize) -> usize {
        group_of(expert, self.n, self.g)
    }

    pub fn moe(&self) -> MoeConfig {
        MoeConfig {
            d: self.d,
            n: self.n,
            k: self.k,
            m: self.m,
        }
    }
}

pub(crate) fn check_lambda(lambda: f64, n: usize, g: usize) -> Result<()> {
    let bound = g as f64 / n as f64;
    if !(lambda.is_finite() && lambda > 0.0 && lambda <= bound) {
        return Err(GroveError::config(
            "lambda",
            format!("lambda={lambda} must satisfy 0 < lambda <= g/n = {bound}"),
        ));
    }
    Ok(())
}

/// Shape of a plain (ungrouped) mixture-of-experts layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub m: usize,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(GroveError::config(
                "d",
                "feature dimension must be at least 1",
            ));
        }
        if self.n == 0 {
            return Err(GroveError::config("n", "expert count must be at least 1"));
        }
        if self.m == 0 {
            return Err(GroveError::config("m", "expert width must be at least 1"));
        }
        if self.k == 0 || self.k > self.n {
            return Err(GroveError::config(
                "k",
                format!("k={} must satisfy 1 <= k <= n={}", self.k, self.n),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_matches_desk_scale() {
        let c = GroveConfig::default();
        c.validate().unwrap();
        assert_eq!((c.d, c.n, c.k, c.g, c.h, c.m), (32, 128, 8, 64, 8, 48));
        assert_eq!(c.lambda_max(), 0.5);
        assert_eq!((c.min_adjugate_evals(), c.max_adjugate_evals()), (4, 8));
    }

    #[test]
    fn rejects_non_dividing_groups() {
        let c = GroveConfig {
            g: 48,
            ..Default::default()
        };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("`g`") && err.contains("divide"), "{err}");
    }

    #[test]
    fn rejects_lambda_above_bound() {
        let c = GroveConfig {
            lambda: 0.6,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("`lambda`"));
        let ok = GroveConfig {
            lambda: 0.5,
            ..Default::default()
        };
        ok.validate().unwrap();
        let zero = GroveConfig {
            lambda: 0.0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn rejects_bad_k() {
        assert!(GroveConfig {
            k: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GroveConfig {
            k: 129,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
