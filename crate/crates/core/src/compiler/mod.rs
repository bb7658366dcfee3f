//! The memory compiler: maps (runtime state, candidate pool) to one of four
//! outputs. Three backends share the [`CompilerBackend`] interface.

mod expand;
pub mod learned;
pub mod oracle;
pub mod percept;
pub mod remote;

use std::collections::VecDeque;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::brief::{BriefDelta, BriefState};
use crate::env::GroundTruth;
use crate::linalg::Mat;
use crate::memory::CandidatePool;
use crate::scalar::Scalar;

pub use expand::{descriptor_words, expand, Expansion};
pub use learned::{LearnedCompiler, CompilerParams, Decision};
pub use oracle::OracleCompiler;
pub use remote::{RemoteCompiler, RemoteConfig};

/// Default loop-detection window.
pub const LOOP_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeState {
    pub observation: String,
    pub brief: BriefState,
    pub step: u32,
    pub recent_actions: VecDeque<String>,
    pub window: usize,
}

impl RuntimeState {
    pub fn new(observation: impl Into<String>, brief: BriefState) -> Self {
        Self { observation: observation.into(), brief, step: 0, recent_actions: VecDeque::new(), window: LOOP_WINDOW }
    }

    pub fn push_action(&mut self, action: &str) {
        self.recent_actions.push_back(action.to_string());
        while self.recent_actions.len() > self.window {
            self.recent_actions.pop_front();
        }
    }

    /// The repeated action when the last `LOOP_WINDOW` actions are identical.
    pub fn looping_action(&self) -> Option<&str> {
        if self.recent_actions.len() < LOOP_WINDOW {
            return None;
        }
        let tail: Vec<&String> = self.recent_actions.iter().rev().take(LOOP_WINDOW).collect();
        tail.windows(2).all(|w| w[0] == w[1]).then(|| tail[0].as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    Experience,
    Brief,
    Hybrid,
    #[serde(rename = "NOACTION")]
    NoAction,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Experience => "EXPERIENCE",
            Variant::Brief => "BRIEF",
            Variant::Hybrid => "HYBRID",
            Variant::NoAction => "NOACTION",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompiledOutput {
    pub variant: Variant,
    pub guidance: Option<String>,
    pub reason: Option<String>,
    pub delta: Option<BriefDelta>,
}

impl CompiledOutput {
    pub fn no_action(reason: Option<&str>) -> Self {
        Self { variant: Variant::NoAction, guidance: None, reason: reason.map(str::to_string), delta: None }
    }

    /// Picks the variant from which parts are present.
    pub fn from_parts(guidance: Option<String>, reason: Option<String>, delta: Option<BriefDelta>) -> Self {
        let delta = delta.filter(|d| !d.is_empty());
        let variant = match (&guidance, &delta) {
            (Some(_), Some(_)) => Variant::Hybrid,
            (Some(_), None) => Variant::Experience,
            (None, Some(_)) => Variant::Brief,
            (None, None) => Variant::NoAction,
        };
        let reason = if variant == Variant::NoAction && reason.is_none() { None } else { reason };
        Self { variant, guidance, reason, delta }
    }

    /// Guidance present iff EXPERIENCE/HYBRID; delta present iff BRIEF/HYBRID.
    pub fn is_well_formed(&self) -> bool {
        let g = self.guidance.is_some();
        let d = self.delta.as_ref().is_some_and(|d| !d.is_empty());
        match self.variant {
            Variant::Experience => g && self.delta.is_none(),
            Variant::Brief => !g && d,
            Variant::Hybrid => g && d,
            Variant::NoAction => !g && self.delta.is_none(),
        }
    }
}

/// Backend result. `hidden` is the N x d_MC block feeding the soft channel
/// (learned backend only); `decision` records sampled choices for RL.
#[derive(Debug, Clone)]
pub struct Compiled<T: Scalar> {
    pub output: CompiledOutput,
    pub hidden: Option<Mat<T>>,
    pub decision: Option<Decision>,
    /// Descriptor word per soft position (learned backend only).
    pub descriptors: Vec<String>,
}

impl<T: Scalar> Compiled<T> {
    pub fn plain(output: CompiledOutput) -> Self {
        Self { output, hidden: None, decision: None, descriptors: vec![] }
    }
}

/// A compiler policy. `compile` is total: unusable input yields NOACTION.
pub trait CompilerBackend<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn compile(
        &self,
        state: &RuntimeState,
        pool: &CandidatePool,
        probe: Option<&dyn GroundTruth>,
        rng: &mut ChaCha8Rng,
    ) -> Compiled<T>;
}

/// Loop guard shared by the local backends: names the repeated action.
pub fn loop_directive(action: &str) -> String {
    format!("do not {action} again. navigate to another location.")
}
