//! Object key-field localization for visual question answering.
//!
//! An image is segmented and captioned into [`SemanticObject`]s once; each
//! question then goes through a chat round that picks the target object and,
//! when the answer needs a location, a second round over the object's
//! downscaled segment matrix. The selection is mapped back to pixels and
//! rendered as a highlight overlay.

pub mod backends;
pub mod codec;
pub mod geometry;
pub mod mask;
pub mod pipeline;
pub mod prompt;
pub mod render;

pub use backends::{BackendConfig, BackendMode, Backends};
pub use geometry::{Bbox, Grid, LabelMap, Mask};
pub use mask::{RawSegment, SemanticObject, SpatialMatrix, TargetRegion};
pub use pipeline::{HighlightResult, Pipeline, PipelineConfig, PipelineError, QueryRecord, Session};
