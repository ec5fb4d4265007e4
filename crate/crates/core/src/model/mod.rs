//! The encoder: shared Transformer block, expert-banked MLE block, LID
//! router head, and parameter accounting.

pub mod config;
pub mod encoder;
pub mod params;
pub mod weights;

pub use config::{Frontend, ModelConfig, MoeModule, RouterKind};
pub use encoder::{encoder_forward, EncoderOut, RoutingPlan};
pub use params::{param_breakdown, param_count, CountMode};
pub use weights::EncoderWeights;

use crate::tape::{Tape, Var};
use crate::Tensor;

/// Which parameters receive gradients this step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WatchSet {
    /// Inference / oracle evaluation: everything is constant.
    Frozen,
    /// Full training.
    All,
    /// Router-only fine-tuning; everything else stays frozen.
    RouterOnly,
}

/// Puts parameters on the tape as they are used and remembers the watched
/// ones so the trainer can collect their gradients afterwards. Binding on
/// use means an expert bank that is never routed to never reaches the tape
/// at all — its gradient is structurally zero.
pub struct ParamBinder {
    watch: WatchSet,
    pub bindings: Vec<(String, Var)>,
}

impl ParamBinder {
    pub fn new(watch: WatchSet) -> Self {
        ParamBinder { watch, bindings: Vec::new() }
    }

    pub fn frozen() -> Self {
        Self::new(WatchSet::Frozen)
    }

    pub fn all() -> Self {
        Self::new(WatchSet::All)
    }

    pub fn router_only() -> Self {
        Self::new(WatchSet::RouterOnly)
    }

    fn watched(&self, name: &str) -> bool {
        match self.watch {
            WatchSet::Frozen => false,
            WatchSet::All => true,
            WatchSet::RouterOnly => weights::is_router_param(name),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape<f64>, name: impl Into<String>, t: &Tensor) -> Var {
        let name = name.into();
        if self.watched(&name) {
            let v = tape.leaf(t);
            self.bindings.push((name, v));
            v
        } else {
            tape.constant(t)
        }
    }
}
