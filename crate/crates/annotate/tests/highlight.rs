use image::{Rgb, RgbImage};
use proptest::prelude::*;
use tlv_annotate::{render_highlight, HIGHLIGHT_COLOR, STROKE_WIDTH};
use tlv_core::dataset::BoundingBox;

/// Outline pixel count: box area minus the untouched interior.
fn stroke_count(w: u32, h: u32) -> u32 {
    let inner = |d: u32| d.saturating_sub(2 * STROKE_WIDTH);
    w * h - inner(w) * inner(h)
}

#[test]
fn ten_by_ten_on_black_paints_exactly_the_stroke() {
    let img = RgbImage::new(20, 20);
    let b = BoundingBox::new(5, 5, 15, 15);
    let out = render_highlight(&img, &b).unwrap();
    let red = out.pixels().filter(|p| **p == HIGHLIGHT_COLOR).count() as u32;
    assert_eq!(red, 84);
    assert_eq!(red, stroke_count(10, 10));
    for (x, y, p) in out.enumerate_pixels() {
        let in_box = (5..15).contains(&x) && (5..15).contains(&y);
        let in_hole = (8..12).contains(&x) && (8..12).contains(&y);
        let expect_red = in_box && !in_hole;
        assert_eq!(*p == HIGHLIGHT_COLOR, expect_red, "pixel ({x}, {y})");
    }
}

#[test]
fn full_image_box_frames_the_border() {
    let img = RgbImage::from_pixel(16, 12, Rgb([1, 2, 3]));
    let out = render_highlight(&img, &BoundingBox::new(0, 0, 16, 12)).unwrap();
    let red = out.pixels().filter(|p| **p == HIGHLIGHT_COLOR).count() as u32;
    assert_eq!(red, stroke_count(16, 12));
}

#[test]
fn source_image_is_not_modified() {
    let img = RgbImage::from_pixel(8, 8, Rgb([9, 9, 9]));
    let before = img.clone();
    let _ = render_highlight(&img, &BoundingBox::new(0, 0, 8, 8)).unwrap();
    assert_eq!(img, before);
}

fn scene() -> impl Strategy<Value = (RgbImage, BoundingBox)> {
    (4u32..40, 4u32..40, any::<u64>()).prop_flat_map(|(w, h, seed)| {
        (0..w, 0..h).prop_flat_map(move |(x0, y0)| {
            (x0 + 1..=w, y0 + 1..=h).prop_map(move |(x1, y1)| {
                let img = RgbImage::from_fn(w, h, |x, y| {
                    let v = seed
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add((x * 131 + y * 7919) as u64);
                    Rgb([(v >> 8) as u8, (v >> 16) as u8, (v >> 24) as u8])
                });
                (img, BoundingBox::new(x0, y0, x1, y1))
            })
        })
    })
}

proptest! {
    #[test]
    fn only_stroke_pixels_change((img, b) in scene()) {
        let out = render_highlight(&img, &b).unwrap();
        let mut red = 0;
        for (x, y, p) in out.enumerate_pixels() {
            let dx = (x >= b.x_min && x < b.x_max).then(|| (x - b.x_min).min(b.x_max - 1 - x));
            let dy = (y >= b.y_min && y < b.y_max).then(|| (y - b.y_min).min(b.y_max - 1 - y));
            let stroke = matches!((dx, dy), (Some(a), Some(c)) if a < STROKE_WIDTH || c < STROKE_WIDTH);
            if stroke {
                prop_assert_eq!(*p, HIGHLIGHT_COLOR);
                red += 1;
            } else {
                prop_assert_eq!(p, img.get_pixel(x, y));
            }
        }
        prop_assert_eq!(red, stroke_count(b.width(), b.height()));
    }

    #[test]
    fn rendering_is_idempotent((img, b) in scene()) {
        let once = render_highlight(&img, &b).unwrap();
        let twice = render_highlight(&once, &b).unwrap();
        prop_assert_eq!(once, twice);
    }
}
