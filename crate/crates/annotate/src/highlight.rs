//! Red-box highlight images for the captioning stage.

use image::{Rgb, RgbImage};
use thiserror::Error;
use tlv_core::dataset::BoundingBox;

pub const STROKE_WIDTH: u32 = 3;
pub const HIGHLIGHT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HighlightError {
    #[error("bounding box out of bounds: {0}")]
    OutOfBounds(String),
}

/// True when `(x, y)` lies on the outline drawn for `bbox`.
///
/// The stroke sits inside the box; boxes thinner than two strokes are filled.
pub fn on_stroke(bbox: &BoundingBox, x: u32, y: u32) -> bool {
    let inside = x >= bbox.x_min && x < bbox.x_max && y >= bbox.y_min && y < bbox.y_max;
    inside
        && (x < bbox.x_min + STROKE_WIDTH
            || x + STROKE_WIDTH >= bbox.x_max
            || y < bbox.y_min + STROKE_WIDTH
            || y + STROKE_WIDTH >= bbox.y_max)
}

/// Copy of `image` with a 3 px pure-red outline inside `bbox`.
pub fn render_highlight(image: &RgbImage, bbox: &BoundingBox) -> Result<RgbImage, HighlightError> {
    bbox.validate(image.width(), image.height())
        .map_err(HighlightError::OutOfBounds)?;
    let mut out = image.clone();
    for y in bbox.y_min..bbox.y_max {
        for x in bbox.x_min..bbox.x_max {
            if on_stroke(bbox, x, y) {
                out.put_pixel(x, y, HIGHLIGHT_COLOR);
            }
        }
    }
    Ok(out)
}
