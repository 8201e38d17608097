//! Manifest-driven rendering: loads an item's frames and sidecars and
//! produces any image variant. Shared by the evaluator, the CLI and the
//! HTTP service so they all emit the same bytes.

use std::fs;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{parse_json, DatasetError, DatasetManifest, ManifestItem};
use crate::synth::GroundTruth;
use crate::vision::{
    average_flow, compose_multiview, ingest_detections, ingest_masks, lucas_kanade_flow, render_bboxes,
    render_flow_arrows, render_masks, ArrowStyle, AvgFlow, CanvasConfig, ComposedImage, Detection, FlowField,
    FlowParams, IngestionFilter, MaskInstance, MultiviewFrame, RasterImage, Variant, VisionError, Viewpoint,
};

#[derive(Debug, Error)]
pub enum RenderError {
    /// The item lacks an input the variant needs.
    #[error("{item_id}: {reason}")]
    Unavailable { item_id: String, reason: String },
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub canvas: CanvasConfig,
    pub filter: IngestionFilter,
    pub flow: FlowParams,
    pub arrows: ArrowStyle,
    /// Flow vectors shorter than this (pixels/frame) count as background and
    /// are left out of the per-view average.
    pub motion_threshold: f32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            canvas: CanvasConfig::default(),
            filter: IngestionFilter::default(),
            flow: FlowParams::default(),
            arrows: ArrowStyle::default(),
            motion_threshold: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderedVariant {
    pub image: ComposedImage,
    pub warnings: Vec<String>,
}

fn unavailable(item: &ManifestItem, reason: impl Into<String>) -> RenderError {
    RenderError::Unavailable {
        item_id: item.id.clone(),
        reason: reason.into(),
    }
}

pub fn load_frame(manifest: &DatasetManifest, item: &ManifestItem, frame: usize) -> Result<MultiviewFrame, RenderError> {
    let mut images = Vec::new();
    for vp in Viewpoint::ALL {
        let rel = item
            .frame_path(vp, frame)
            .ok_or_else(|| unavailable(item, format!("no frame {frame} for the {vp} view")))?;
        images.push((vp, RasterImage::load_png(&manifest.resolve(rel))?));
    }
    Ok(MultiviewFrame::new(images))
}

fn read_sidecar<T: serde::de::DeserializeOwned>(
    manifest: &DatasetManifest,
    item: &ManifestItem,
    rel: Option<&str>,
    what: &str,
) -> Result<T, RenderError> {
    let rel = rel.ok_or_else(|| unavailable(item, format!("no {what} file")))?;
    let path = manifest.resolve(rel);
    let text = fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
    Ok(parse_json(&text)?)
}

pub fn load_detections(manifest: &DatasetManifest, item: &ManifestItem) -> Result<Vec<Detection>, RenderError> {
    read_sidecar(manifest, item, item.detections.as_deref(), "detections")
}

pub fn load_masks(manifest: &DatasetManifest, item: &ManifestItem) -> Result<Vec<MaskInstance>, RenderError> {
    read_sidecar(manifest, item, item.masks.as_deref(), "masks")
}

pub fn load_ground_truth(manifest: &DatasetManifest, item: &ManifestItem) -> Result<GroundTruth, RenderError> {
    read_sidecar(manifest, item, item.ground_truth.as_deref(), "ground-truth")
}

/// Per-view flow between frames 0 and 1 for every non-bottom view.
pub fn item_flow(
    manifest: &DatasetManifest,
    item: &ManifestItem,
    opts: &RenderOptions,
) -> Result<Vec<(FlowField, AvgFlow)>, RenderError> {
    if !item.has_frame_pairs() {
        return Err(unavailable(item, "flow needs frame pairs for the front, left and right views"));
    }
    let (f0, f1) = (load_frame(manifest, item, 0)?, load_frame(manifest, item, 1)?);
    let mut out = Vec::new();
    for vp in [Viewpoint::Front, Viewpoint::Left, Viewpoint::Right] {
        let field = lucas_kanade_flow(vp, f0.get(vp)?, f1.get(vp)?, &opts.flow)?;
        let moving = FlowField {
            viewpoint: vp,
            vectors: field
                .vectors
                .iter()
                .filter(|v| v.dx.hypot(v.dy) >= opts.motion_threshold)
                .copied()
                .collect(),
        };
        let avg = average_flow(&moving);
        out.push((field, avg));
    }
    Ok(out)
}

/// Renders one variant of an item from frame 0 (plus frame 1 for flow).
pub fn render_item_variant(
    manifest: &DatasetManifest,
    item: &ManifestItem,
    variant: Variant,
    opts: &RenderOptions,
) -> Result<RenderedVariant, RenderError> {
    // check sidecars before the comparatively slow composition
    match variant {
        Variant::Bbox if item.detections.is_none() => return Err(unavailable(item, "no detections file")),
        Variant::Mask if item.masks.is_none() => return Err(unavailable(item, "no masks file")),
        Variant::Flow if !item.has_frame_pairs() => {
            return Err(unavailable(item, "flow needs frame pairs for the front, left and right views"))
        }
        _ => {}
    }
    opts.filter.validate()?;
    let base = compose_multiview(&load_frame(manifest, item, 0)?, &opts.canvas)?;
    Ok(match variant {
        Variant::None => RenderedVariant {
            image: base,
            warnings: Vec::new(),
        },
        Variant::Bbox => {
            let ingested = ingest_detections(&load_detections(manifest, item)?, &opts.filter);
            RenderedVariant {
                image: render_bboxes(&base, &ingested.kept)?,
                warnings: ingested.warnings,
            }
        }
        Variant::Mask => {
            let ingested = ingest_masks(&load_masks(manifest, item)?, &opts.filter);
            let (image, mut warnings) = render_masks(&base, &ingested.kept)?;
            warnings.splice(0..0, ingested.warnings);
            RenderedVariant { image, warnings }
        }
        Variant::Flow => {
            let avgs: Vec<AvgFlow> = item_flow(manifest, item, opts)?.into_iter().map(|(_, a)| a).collect();
            RenderedVariant {
                image: render_flow_arrows(&base, &avgs, &opts.arrows)?,
                warnings: Vec::new(),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    #[test]
    fn every_variant_renders_for_synthetic_items() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(dir.path(), &SynthConfig::new(2, 3)).unwrap();
        let opts = RenderOptions::default();
        for item in &manifest.items {
            let mut hashes = Vec::new();
            for v in Variant::ALL {
                let r = render_item_variant(&manifest, item, v, &opts).unwrap();
                assert_eq!(r.image.variant, v);
                assert_eq!((r.image.raster.width(), r.image.raster.height()), (1200, 975));
                hashes.push(r.image.raster.content_hash());
            }
            // road masks are always present
            assert_ne!(hashes[0], hashes[2]);
        }
    }

    #[test]
    fn missing_inputs_are_reported_as_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = generate_dataset(dir.path(), &SynthConfig::new(1, 3)).unwrap();
        let item = &mut manifest.items[0];
        item.masks = None;
        for frames in item.images.values_mut() {
            frames.truncate(1);
        }
        let item = manifest.items[0].clone();
        let opts = RenderOptions::default();
        for v in [Variant::Mask, Variant::Flow] {
            let err = render_item_variant(&manifest, &item, v, &opts).unwrap_err();
            assert!(matches!(err, RenderError::Unavailable { .. }), "{err}");
        }
        render_item_variant(&manifest, &item, Variant::Bbox, &opts).unwrap();
    }

    #[test]
    fn moving_car_view_gets_its_velocity() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(dir.path(), &SynthConfig::new(12, 5)).unwrap();
        let mut checked = 0;
        for item in &manifest.items {
            let truth = load_ground_truth(&manifest, item).unwrap();
            let flows = item_flow(&manifest, item, &RenderOptions::default()).unwrap();
            if truth.attributes.moving_car == crate::rules::TriState::Yes {
                assert!(flows.iter().any(|(_, a)| a.magnitude() >= 0.5), "{}", item.id);
                checked += 1;
            } else {
                assert!(flows.iter().all(|(_, a)| a.sample_count == 0), "{}", item.id);
            }
        }
        assert!(checked > 0);
    }
}
