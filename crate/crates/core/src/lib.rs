//! Algorithm-based fault tolerance for convolution layers.
//!
//! Checksums over the fmap and kernel blocks predict weighted sums of the
//! output blocks. A cheap full-sum comparison detects soft errors, and a
//! chain of progressively more capable schemes locates and corrects them:
//!
//! - CoC corrects a single corrupted output block from the full-sum checksums.
//! - RC corrects one corrupted row (all blocks of one image).
//! - ClC corrects one corrupted column (all blocks of one kernel).
//! - FC combines row and column checksums and discards corrupted checksums.
//!
//! Anything the chain cannot resolve is recomputed.

pub mod backward;
pub mod cache;
pub mod checksum;
pub mod conv;
pub mod element;
pub mod error;
pub mod fault;
pub mod layer;
pub mod replay;
pub mod scheme;
pub mod tensor;
pub mod workflow;

pub use backward::{protected_backward, BackwardReport, GradientHook, GradientVerdict};
pub use cache::LayerChecksums;
pub use checksum::{ChecksumKind, InputChecksums, OutputChecksums, OutputSummations, Tolerance};
pub use conv::{conv_backward, conv_forward, ConvGeometry, ConvImpl, ConvParams, ShapeLimits};
pub use element::Element;
pub use error::{Error, Result};
pub use fault::{
    campaign, ground_truth, CampaignConfig, ChecksumName, CorpusEntry, ElementSel, FaultInjector, FaultSpec,
    FaultTarget, GroundTruth, Magnitude,
};
pub use layer::ConvLayer;
pub use replay::{classify, replay, ReplayOutcome, Significance};
pub use scheme::{correct, detect, CorrectionOutcome, CorrectionStatus, DetectionResult, Scheme};
pub use tensor::Tensor4;
pub use workflow::{
    profile_layer, run_protected_layer, CostModel, FaultHook, LayerPlan, LayerProfile, LayerReport, NoFault,
    ProtectionPolicy, Resolution, RunOptions,
};
