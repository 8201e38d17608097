//! Visual-knowledge image variants: multiview composition, detection and
//! mask ingestion, sparse optical flow, and overlay rendering.

mod compose;
mod detect;
mod draw;
mod flow;
mod overlay;
mod raster;

pub use compose::{compose_multiview, CanvasConfig, ComposedImage, MultiviewFrame, PatchPlacement, Variant};
pub use detect::{
    ingest_detections, ingest_masks, iou, BoxPx, Detection, IngestOutcome, IngestionFilter, MaskInstance,
};
pub use draw::class_color;
pub use flow::{average_flow, lucas_kanade_flow, AvgFlow, FlowField, FlowParams, FlowVector};
pub use overlay::{render_bboxes, render_flow_arrows, render_masks, ArrowStyle, MASK_ALPHA};
pub use raster::{RasterImage, Rect, Rgb, Viewpoint};

pub(crate) use raster::hex;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("image must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    BufferSize { expected: usize, actual: usize },
    #[error("image error for {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("unknown viewpoint {0:?}; expected front, left, bottom or right")]
    UnknownViewpoint(String),
    #[error("missing viewpoint: {0}")]
    MissingViewpoint(Viewpoint),
    #[error("invalid canvas: {0}")]
    InvalidCanvas(String),
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("image {width}x{height} is smaller than the {size}x{size} flow window plus gradient border")]
    ImageTooSmall { width: u32, height: u32, size: u32 },
    #[error("overlay requires an image with variant none, got {0}")]
    VariantNotNone(Variant),
    #[error("viewpoint {0} has no placement in the composed image")]
    AbsentViewpoint(Viewpoint),
    #[error("flow arrows are not drawn for the bottom viewpoint")]
    BottomFlow,
    #[error("invalid ingestion filter: {0}")]
    InvalidFilter(String),
}
