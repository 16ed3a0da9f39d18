//! Image preparation and the two visual tools.
//!
//! An [`ImageSet`] holds the indexed input images, downscaled by one shared
//! factor so their served pixel total fits a budget. Over a prepared set the
//! runtime executes two tools: `zoom_in` crops a region for visual
//! confirmation and `lookback_reuse` re-emits a full image for visual
//! reflection. Both are pure functions over immutable data and can be called
//! from any number of concurrent rollouts sharing one set.

use std::path::Path;
use std::sync::Arc;

use image::imageops::FilterType;
use image::RgbImage;
use thiserror::Error;

use crate::message::{ImageSource, Segment};
use crate::protocol::{BBox, ToolCall};

/// Minimum side of a zoom crop, in pixels. Crops smaller than one vision
/// patch carry no usable detail, so narrower requests are widened to this.
pub const MIN_CROP_SIDE: u32 = 28;

/// Largest per-side upscale applied to a zoom crop.
pub const MAX_ZOOM_FACTOR: u32 = 2;

/// Default served-pixel budget for training rollouts.
pub const TRAIN_PIXEL_BUDGET: u64 = 4_000_000;

/// Default served-pixel budget for evaluation (16384 patches of 28x28).
pub const EVAL_PIXEL_BUDGET: u64 = 16384 * 28 * 28;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("image set is empty")]
    EmptyImageSet,
    #[error("image {index} has zero area")]
    ZeroAreaImage { index: usize },
    #[error("pixel budget must be positive")]
    ZeroBudget,
    #[error("budget {budget} cannot fit {count} images at minimum size")]
    BudgetTooSmall { budget: u64, count: usize },
    #[error("failed to read image {path}: {source}")]
    Load {
        path: String,
        source: image::ImageError,
    },
    #[error("failed to encode image: {0}")]
    Encode(image::ImageError),
}

/// One indexed image of the set: the original raster, the budget-downscaled
/// raster actually served to the model, and the shared scale that links them.
#[derive(Debug, Clone)]
pub struct ServedImage {
    pub original: Arc<RgbImage>,
    pub served: Arc<RgbImage>,
    pub scale: f64,
}

impl ServedImage {
    pub fn served_width(&self) -> u32 {
        self.served.width()
    }

    pub fn served_height(&self) -> u32 {
        self.served.height()
    }

    pub fn served_pixels(&self) -> u64 {
        u64::from(self.served.width()) * u64::from(self.served.height())
    }
}

/// The indexed input images with their served resolutions and budget
/// metadata. Immutable after preparation.
#[derive(Debug, Clone)]
pub struct ImageSet {
    images: Vec<ServedImage>,
    total_pixel_budget: u64,
    per_image_max_pixels: u64,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&ServedImage> {
        self.images.get(index)
    }

    pub fn images(&self) -> &[ServedImage] {
        &self.images
    }

    pub fn total_pixel_budget(&self) -> u64 {
        self.total_pixel_budget
    }

    pub fn per_image_max_pixels(&self) -> u64 {
        self.per_image_max_pixels
    }

    pub fn served_pixel_total(&self) -> u64 {
        self.images.iter().map(ServedImage::served_pixels).sum()
    }
}

/// Downscale `images` by a single shared factor (aspect preserved) so the
/// served pixel total fits `total_pixel_budget`. Never upscales. The
/// per-image cap for later zoom upscaling defaults to the total budget.
pub fn prepare_image_set(
    images: Vec<RgbImage>,
    total_pixel_budget: u64,
) -> Result<ImageSet, VisionError> {
    prepare_image_set_with(images, total_pixel_budget, total_pixel_budget)
}

/// [`prepare_image_set`] with an explicit per-image pixel cap.
pub fn prepare_image_set_with(
    images: Vec<RgbImage>,
    total_pixel_budget: u64,
    per_image_max_pixels: u64,
) -> Result<ImageSet, VisionError> {
    if images.is_empty() {
        return Err(VisionError::EmptyImageSet);
    }
    if total_pixel_budget == 0 || per_image_max_pixels == 0 {
        return Err(VisionError::ZeroBudget);
    }
    for (index, img) in images.iter().enumerate() {
        if img.width() == 0 || img.height() == 0 {
            return Err(VisionError::ZeroAreaImage { index });
        }
    }
    if (images.len() as u64) > total_pixel_budget {
        return Err(VisionError::BudgetTooSmall {
            budget: total_pixel_budget,
            count: images.len(),
        });
    }

    let total_original: u64 = images
        .iter()
        .map(|i| u64::from(i.width()) * u64::from(i.height()))
        .sum();
    let mut scale = (total_pixel_budget as f64 / total_original as f64)
        .sqrt()
        .min(1.0);

    // Rounding each dimension independently can land a hair over budget;
    // tighten the shared factor until the rounded dimensions fit.
    let dims_at = |s: f64| -> Vec<(u32, u32)> {
        images
            .iter()
            .map(|i| {
                let w = ((f64::from(i.width()) * s).round() as u32).max(1);
                let h = ((f64::from(i.height()) * s).round() as u32).max(1);
                (w, h)
            })
            .collect()
    };
    let sum_of = |dims: &[(u32, u32)]| -> u64 {
        dims.iter().map(|&(w, h)| u64::from(w) * u64::from(h)).sum()
    };
    let mut dims = dims_at(scale);
    let mut guard = 0;
    while sum_of(&dims) > total_pixel_budget {
        let next = scale * (total_pixel_budget as f64 / sum_of(&dims) as f64).sqrt();
        scale = if next < scale { next } else { scale * 0.9995 };
        dims = dims_at(scale);
        guard += 1;
        if guard > 10_000 {
            return Err(VisionError::BudgetTooSmall {
                budget: total_pixel_budget,
                count: images.len(),
            });
        }
    }

    let served_images = images
        .into_iter()
        .zip(dims)
        .map(|(img, (w, h))| {
            let served = if w == img.width() && h == img.height() {
                img.clone()
            } else {
                image::imageops::resize(&img, w, h, FilterType::CatmullRom)
            };
            ServedImage {
                original: Arc::new(img),
                served: Arc::new(served),
                scale,
            }
        })
        .collect();

    Ok(ImageSet {
        images: served_images,
        total_pixel_budget,
        per_image_max_pixels,
    })
}

/// Load images from disk (PNG and JPEG at minimum) in manifest order.
pub fn load_images<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<RgbImage>, VisionError> {
    paths
        .iter()
        .map(|p| {
            image::open(p.as_ref())
                .map(|i| i.to_rgb8())
                .map_err(|source| VisionError::Load {
                    path: p.as_ref().display().to_string(),
                    source,
                })
        })
        .collect()
}

/// Encode an image as PNG bytes for the inference wire protocol.
pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, VisionError> {
    let mut bytes = Vec::new();
    image
        .write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .map_err(VisionError::Encode)?;
    Ok(bytes)
}

// ---------------------------------------------------------------------------
// Tool execution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToolStatus {
    Ok,
    Error,
}

/// Outcome of executing one tool call.
#[derive(Debug, Clone)]
pub struct ToolResult {
    pub status: ToolStatus,
    /// For `Ok`: the full status line, ending in a colon when an image
    /// follows. For `Error`: the bare diagnostic, no prefix or final period.
    pub message: String,
    pub image: Option<Arc<RgbImage>>,
    pub image_pixels: u64,
    pub source_call: ToolCall,
}

impl ToolResult {
    pub fn is_ok(&self) -> bool {
        self.status == ToolStatus::Ok
    }

    fn ok(message: String, image: Arc<RgbImage>, source_call: ToolCall) -> Self {
        let image_pixels = u64::from(image.width()) * u64::from(image.height());
        ToolResult {
            status: ToolStatus::Ok,
            message,
            image: Some(image),
            image_pixels,
            source_call,
        }
    }

    fn error(message: String, source_call: ToolCall) -> Self {
        ToolResult {
            status: ToolStatus::Error,
            message,
            image: None,
            image_pixels: 0,
            source_call,
        }
    }
}

fn out_of_range_message(index: usize, count: usize) -> String {
    format!("image_index {index} out of range ({count} images provided)")
}

/// Clamp one axis of a bbox to `[0, limit]`, then widen any side narrower
/// than [`MIN_CROP_SIDE`] symmetrically, sliding the window back inside the
/// image when the expansion hits a border. The result side is
/// `min(MIN_CROP_SIDE, limit)` whenever the clamped side was below it.
fn clamp_expand_axis(a1: i64, a2: i64, limit: i64) -> (i64, i64) {
    let mut a1 = a1.clamp(0, limit);
    let mut a2 = a2.clamp(0, limit);
    let target = i64::from(MIN_CROP_SIDE).min(limit);
    if a2 - a1 < target {
        let deficit = target - (a2 - a1);
        a1 -= deficit / 2;
        a2 = a1 + target;
        if a1 < 0 {
            a2 -= a1;
            a1 = 0;
        }
        if a2 > limit {
            a1 -= a2 - limit;
            a2 = limit;
        }
        a1 = a1.max(0);
    }
    (a1, a2)
}

/// The crop window `zoom_in` will take from a `width`x`height` served image:
/// the requested bbox clamped to bounds and widened to the minimum side.
/// Exposed for property tests; `width` and `height` must be ≥ 1.
pub fn zoom_geometry(bbox: BBox, width: u32, height: u32) -> BBox {
    let (x1, x2) = clamp_expand_axis(bbox.x1, bbox.x2, i64::from(width));
    let (y1, y2) = clamp_expand_axis(bbox.y1, bbox.y2, i64::from(height));
    BBox::new(x1, y1, x2, y2)
}

/// Largest integer upscale factor for a `width`x`height` crop: capped at
/// [`MAX_ZOOM_FACTOR`] per side and at `per_image_max_pixels` total.
pub fn zoom_upscale_factor(width: u32, height: u32, per_image_max_pixels: u64) -> u32 {
    let area = u64::from(width) * u64::from(height);
    let mut k = 1;
    for candidate in 2..=MAX_ZOOM_FACTOR {
        let c = u64::from(candidate);
        if c * c * area <= per_image_max_pixels {
            k = candidate;
        }
    }
    k
}

/// Crop a region of a served image for visual confirmation. The requested
/// bbox is clamped and widened per [`zoom_geometry`], then upscaled by
/// [`zoom_upscale_factor`]. Out-of-range indices produce an `Error` result,
/// never a panic.
pub fn execute_zoom_in(set: &ImageSet, call: &ToolCall) -> ToolResult {
    let ToolCall::ZoomIn {
        image_index,
        bbox,
        label,
    } = call
    else {
        return ToolResult::error(
            format!("zoom_in executor received a {} call", call.tool_name()),
            call.clone(),
        );
    };
    let Some(entry) = set.get(*image_index) else {
        return ToolResult::error(out_of_range_message(*image_index, set.len()), call.clone());
    };

    let served = &entry.served;
    let window = zoom_geometry(*bbox, served.width(), served.height());
    let (w, h) = (window.width() as u32, window.height() as u32);
    if w == 0 || h == 0 {
        return ToolResult::error(
            format!("bbox {bbox} degenerate after clamping to {}x{}", served.width(), served.height()),
            call.clone(),
        );
    }

    let crop =
        image::imageops::crop_imm(served.as_ref(), window.x1 as u32, window.y1 as u32, w, h)
            .to_image();
    let k = zoom_upscale_factor(w, h, set.per_image_max_pixels());
    let out = if k > 1 {
        image::imageops::resize(&crop, w * k, h * k, FilterType::CatmullRom)
    } else {
        crop
    };

    let message = format!("Tool zoom_in succeeded on image {image_index}, region {bbox} ({label}):");
    ToolResult::ok(message, Arc::new(out), call.clone())
}

/// Re-emit a full served image for visual reflection. The image is returned
/// unchanged (pixel-equal to the served raster); the reason is echoed.
pub fn execute_lookback(set: &ImageSet, call: &ToolCall) -> ToolResult {
    let ToolCall::LookbackReuse {
        image_index,
        reason,
    } = call
    else {
        return ToolResult::error(
            format!("lookback_reuse executor received a {} call", call.tool_name()),
            call.clone(),
        );
    };
    let Some(entry) = set.get(*image_index) else {
        return ToolResult::error(out_of_range_message(*image_index, set.len()), call.clone());
    };
    let message = format!("Tool lookback_reuse returned image {image_index} (reason: {reason}):");
    ToolResult::ok(message, Arc::clone(&entry.served), call.clone())
}

/// Dispatch a parsed call to its executor.
pub fn execute_tool(set: &ImageSet, call: &ToolCall) -> ToolResult {
    match call {
        ToolCall::ZoomIn { .. } => execute_zoom_in(set, call),
        ToolCall::LookbackReuse { .. } => execute_lookback(set, call),
    }
}

/// Render a tool result as message segments: one status line, then the image
/// when present. Identical inputs yield byte-identical text.
pub fn serialize_tool_result(result: &ToolResult, event_index: usize) -> Vec<Segment> {
    match result.status {
        ToolStatus::Ok => {
            let mut segments = vec![Segment::text(result.message.clone())];
            if let Some(image) = &result.image {
                segments.push(Segment::image(
                    ImageSource::ToolEvent { index: event_index },
                    Arc::clone(image),
                ));
            }
            segments
        }
        ToolStatus::Error => vec![Segment::text(format!(
            "Tool {} failed: {}.",
            result.source_call.tool_name(),
            result.message
        ))],
    }
}
