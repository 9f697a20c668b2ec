//! External differentiable losses.
//!
//! An oracle returns a scalar loss and its gradient with respect to every
//! pixel; the trainer attaches both to an opaque graph node. Oracles run either
//! in-process ([`mock`]) or as a child process speaking the framed protocol in
//! [`wire`] over its standard streams.
//!
//! A session is: `hello` (carrying the protocol version and prompt pair) →
//! any number of `semantic_eval` / `perceptual_eval` → `shutdown`. Every
//! request gets exactly one `response`. Evaluation payloads are raw `f32` LE
//! pixels in `H, W, C` order; perceptual requests append the reference image.
//! Responses carry the loss in the header and the gradient as payload.

pub mod mock;
mod process;
pub mod wire;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use process::{spawn_oracle, ProcessOracle};
pub use wire::{frame_message, parse_message, ProtocolError, MAX_HEADER_BYTES, PROTOCOL_VERSION};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("failed to start oracle `{command}`: {reason}")]
    Spawn { command: String, reason: String },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("oracle did not answer within {0:?}")]
    Timeout(Duration),
    #[error("oracle speaks protocol version {got:?}, expected {expected:?}")]
    VersionMismatch { expected: String, got: String },
    #[error("oracle reported an error: {0}")]
    Remote(String),
    #[error("malformed oracle response: {0}")]
    BadResponse(String),
    #[error("oracle returned non-finite values: {0}")]
    NonFinite(String),
    #[error("oracle does not provide {0}")]
    Unsupported(&'static str),
    #[error("oracle connection closed")]
    Closed,
}

/// Positive and negative text prompts of the semantic term.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPair {
    pub positive: String,
    pub negative: String,
}

impl Default for PromptPair {
    fn default() -> Self {
        crate::quality::PROMPT_TABLE[crate::quality::DEFAULT_PROMPT_INDEX].into()
    }
}

impl From<(&str, &str)> for PromptPair {
    fn from((positive, negative): (&str, &str)) -> Self {
        Self {
            positive: positive.into(),
            negative: negative.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Capabilities {
    pub semantic: bool,
    pub perceptual: bool,
}

impl Capabilities {
    pub fn all() -> Self {
        Self {
            semantic: true,
            perceptual: true,
        }
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Self {
        Self {
            semantic: names.iter().any(|n| n.as_ref() == "semantic"),
            perceptual: names.iter().any(|n| n.as_ref() == "perceptual"),
        }
    }
}

/// Borrowed `H×W×C` image.
#[derive(Clone, Copy, Debug)]
pub struct ImageView<'a> {
    pub dims: [usize; 3],
    pub data: &'a [f64],
}

impl<'a> ImageView<'a> {
    pub fn new(dims: [usize; 3], data: &'a [f64]) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }
}

/// Loss value and per-pixel gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

pub trait LossOracle: Send {
    fn describe(&self) -> String;
    fn capabilities(&self) -> Capabilities;
    fn semantic(&mut self, image: &ImageView<'_>, prompts: &PromptPair) -> Result<OracleOutput, OracleError>;
    fn perceptual(&mut self, image: &ImageView<'_>, reference: &ImageView<'_>) -> Result<OracleOutput, OracleError>;
}

fn check_output(out: &OracleOutput, n: usize) -> Result<(), OracleError> {
    if out.grad.len() != n {
        return Err(OracleError::BadResponse(format!("gradient has {} values, image has {n}", out.grad.len())));
    }
    if !out.loss.is_finite() {
        return Err(OracleError::NonFinite(format!("loss = {}", out.loss)));
    }
    if let Some(i) = out.grad.iter().position(|g| !g.is_finite()) {
        return Err(OracleError::NonFinite(format!("gradient[{i}] = {}", out.grad[i])));
    }
    Ok(())
}

/// Optional oracle attachment used by the trainer.
///
/// Any failure logs a warning and detaches the oracle for the rest of the run,
/// which is equivalent to zeroing the semantic and perceptual weights.
pub struct OracleSlot {
    oracle: Option<Box<dyn LossOracle>>,
    prompts: PromptPair,
    capabilities: Capabilities,
    disabled: Option<String>,
    calls: usize,
}

impl Default for OracleSlot {
    fn default() -> Self {
        Self::none()
    }
}

impl std::fmt::Debug for OracleSlot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OracleSlot")
            .field("oracle", &self.oracle.as_ref().map(|o| o.describe()))
            .field("prompts", &self.prompts)
            .field("disabled", &self.disabled)
            .field("calls", &self.calls)
            .finish()
    }
}

impl OracleSlot {
    pub fn none() -> Self {
        Self {
            oracle: None,
            prompts: PromptPair::default(),
            capabilities: Capabilities::default(),
            disabled: None,
            calls: 0,
        }
    }

    pub fn new(oracle: Box<dyn LossOracle>, prompts: PromptPair) -> Self {
        Self {
            capabilities: oracle.capabilities(),
            oracle: Some(oracle),
            prompts,
            disabled: None,
            calls: 0,
        }
    }

    /// Attaches the result of a spawn attempt; a failed spawn leaves the slot empty with a warning.
    pub fn from_spawn(result: Result<ProcessOracle, OracleError>, prompts: PromptPair) -> Self {
        match result {
            Ok(p) => Self::new(Box::new(p), prompts),
            Err(e) => {
                log::warn!("oracle disabled: {e}");
                Self {
                    disabled: Some(e.to_string()),
                    prompts,
                    ..Self::none()
                }
            }
        }
    }

    pub fn is_active(&self) -> bool {
        self.oracle.is_some()
    }

    pub fn has_semantic(&self) -> bool {
        self.oracle.is_some() && self.capabilities.semantic
    }

    pub fn has_perceptual(&self) -> bool {
        self.oracle.is_some() && self.capabilities.perceptual
    }

    pub fn prompts(&self) -> &PromptPair {
        &self.prompts
    }

    /// Reason the oracle was detached, if it was.
    pub fn disabled_reason(&self) -> Option<&str> {
        self.disabled.as_deref()
    }

    /// Successful evaluations so far.
    pub fn calls(&self) -> usize {
        self.calls
    }

    fn disable(&mut self, err: OracleError) {
        log::warn!("oracle disabled after {} calls: {err}", self.calls);
        self.oracle = None;
        self.disabled = Some(err.to_string());
    }

    fn finish(&mut self, res: Result<OracleOutput, OracleError>, n: usize) -> Option<OracleOutput> {
        match res.and_then(|o| check_output(&o, n).map(|_| o)) {
            Ok(o) => {
                self.calls += 1;
                Some(o)
            }
            Err(e) => {
                self.disable(e);
                None
            }
        }
    }

    pub fn semantic(&mut self, image: &ImageView<'_>) -> Option<OracleOutput> {
        if !self.has_semantic() {
            return None;
        }
        let res = self.oracle.as_mut().unwrap().semantic(image, &self.prompts);
        self.finish(res, image.data.len())
    }

    pub fn perceptual(&mut self, image: &ImageView<'_>, reference: &ImageView<'_>) -> Option<OracleOutput> {
        if !self.has_perceptual() {
            return None;
        }
        let res = self.oracle.as_mut().unwrap().perceptual(image, reference);
        self.finish(res, image.data.len())
    }
}

#[cfg(test)]
mod tests {
    use super::mock::MeanPixelOracle;
    use super::*;

    struct Flaky {
        left: usize,
        nan: bool,
    }

    impl LossOracle for Flaky {
        fn describe(&self) -> String {
            "flaky".into()
        }
        fn capabilities(&self) -> Capabilities {
            Capabilities {
                semantic: true,
                perceptual: false,
            }
        }
        fn semantic(&mut self, image: &ImageView<'_>, _: &PromptPair) -> Result<OracleOutput, OracleError> {
            if self.left == 0 {
                return Err(OracleError::Closed);
            }
            self.left -= 1;
            let g = if self.nan { f64::NAN } else { 0.0 };
            Ok(OracleOutput {
                loss: 0.0,
                grad: vec![g; image.data.len()],
            })
        }
        fn perceptual(&mut self, _: &ImageView<'_>, _: &ImageView<'_>) -> Result<OracleOutput, OracleError> {
            Err(OracleError::Unsupported("perceptual"))
        }
    }

    #[test]
    fn failure_detaches() {
        let img = [0.5; 4];
        let view = ImageView::new([2, 2, 1], &img);
        let mut slot = OracleSlot::new(Box::new(Flaky { left: 2, nan: false }), PromptPair::default());
        assert!(!slot.has_perceptual());
        assert!(slot.perceptual(&view, &view).is_none());
        assert!(slot.is_active());
        assert!(slot.semantic(&view).is_some());
        assert!(slot.semantic(&view).is_some());
        assert!(slot.semantic(&view).is_none());
        assert!(!slot.is_active());
        assert!(slot.disabled_reason().unwrap().contains("closed"));
        assert_eq!(slot.calls(), 2);
    }

    #[test]
    fn nan_gradient_rejected() {
        let img = [0.5; 4];
        let view = ImageView::new([2, 2, 1], &img);
        let mut slot = OracleSlot::new(Box::new(Flaky { left: 5, nan: true }), PromptPair::default());
        assert!(slot.semantic(&view).is_none());
        assert!(slot.disabled_reason().unwrap().contains("gradient[0]"));
    }

    #[test]
    fn default_prompts_and_mock() {
        let p = PromptPair::default();
        assert_eq!(p.positive, "a clean and sharp natural image");
        assert_eq!(p.negative, "a degraded image with noise and turbulence distortion");
        let mut slot = OracleSlot::new(Box::new(MeanPixelOracle), p);
        let img = [0.25, 0.75];
        assert_eq!(slot.semantic(&ImageView::new([1, 2, 1], &img)).unwrap().loss, 0.5);
    }
}
