//! Grove mixture-of-experts layer.
//!
//! Experts are partitioned into groups that each share a small adjugate
//! expert. When several selected experts fall into one group their adjugate
//! is computed once, so the adjugate work per token varies with how the
//! router's choices cluster. Routing is decoupled (sigmoid scores plus a
//! balance bias select, softmax scores weight) and the bias is steered by an
//! auxiliary-loss-free controller. A Grove layer can be upcycled from a
//! plain MoE layer without changing its function.

pub mod accounting;
pub mod balance;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod math;
pub mod routing;
pub mod train;

pub use checkpoint::{upcycle, upcycle_with, Checkpoint, Dtype, Layer};
pub use config::{GroveConfig, MoeConfig};
pub use error::{GroveError, Result};
pub use layer::{
    batch_forward, expert_forward, grove_backward, grove_forward_dedup, grove_forward_naive,
    moe_forward, AdjugateExpert, DedupStats, Expert, ForwardMode, Gradients, GroveLayer, MoeLayer,
};
pub use math::{Matrix, Rng, Vector};
pub use routing::{Router, RoutingDecision};
