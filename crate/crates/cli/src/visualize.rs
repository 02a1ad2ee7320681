//! Evidence overlays: matched box in green, expanded region in red.

use serde::Serialize;
use sieve_core::grounding::EvidenceSnapshot;
use sieve_core::metrics::BBox;
use sieve_core::{Error, RgbImage, Scalar};

pub const GREEN: [u8; 3] = [0, 255, 0];
pub const RED: [u8; 3] = [255, 0, 0];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Overlay {
    pub anchor: String,
    pub matched: BBox,
    pub expanded: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OverlaySidecar {
    pub sample_id: String,
    pub boxes: Vec<Overlay>,
}

pub fn overlays<T: Scalar>(snapshots: &[EvidenceSnapshot<T>], grid: (usize, usize), patch_size: usize) -> Vec<Overlay> {
    snapshots
        .iter()
        .map(|s| Overlay {
            anchor: s.anchor_token.clone(),
            matched: s.region.matched_patches(grid).to_pixels(patch_size),
            expanded: s.region.bbox_pixels,
        })
        .collect()
}

fn checked(b: &BBox, image: &RgbImage) -> Result<(usize, usize, usize, usize), Error> {
    b.validate()?;
    let inside = b.x_min >= 0 && b.y_min >= 0 && b.x_max <= image.width() as i64 && b.y_max <= image.height() as i64;
    if !inside {
        return Err(Error::Shape(format!("box {b:?} outside the {}x{} image", image.width(), image.height())));
    }
    Ok((b.x_min as usize, b.y_min as usize, b.x_max as usize, b.y_max as usize))
}

/// Copy of `image` with every overlay drawn as 1-pixel outlines. Red goes
/// down first so a matched box that reaches the region edge stays green.
pub fn annotate(image: &RgbImage, boxes: &[Overlay]) -> Result<RgbImage, Error> {
    let mut out = image.clone();
    let mut rects = Vec::with_capacity(boxes.len());
    for o in boxes {
        rects.push((checked(&o.expanded, image)?, checked(&o.matched, image)?));
    }
    for ((x0, y0, x1, y1), _) in &rects {
        out.stroke_rect(*x0, *y0, *x1, *y1, RED);
    }
    for (_, (x0, y0, x1, y1)) in &rects {
        out.stroke_rect(*x0, *y0, *x1, *y1, GREEN);
    }
    Ok(out)
}
