//! Switching 3x3 median filter, kept as a sanity baseline for benchmarks.

use crate::image::{reflect_index, GrayImage};
use crate::nlsf::median_in_place;
use crate::noise::NoiseMask;

/// Replaces each flagged pixel by the median of the unflagged pixels in its
/// 3x3 neighborhood, or of the whole neighborhood when all of it is flagged.
/// Unflagged pixels are copied.
pub fn switching_median(img: &GrayImage, mask: &NoiseMask) -> GrayImage {
    assert!(mask.matches(img), "mask size mismatch");
    let (w, h) = (img.width(), img.height());
    let mut out = img.data().to_vec();
    let mut good = Vec::with_capacity(9);
    let mut all = Vec::with_capacity(9);
    for r in 0..h {
        for c in 0..w {
            if !mask.is_flagged(r, c) {
                continue;
            }
            good.clear();
            all.clear();
            for dr in -1..=1isize {
                let rr = reflect_index(r as isize + dr, h);
                for dc in -1..=1isize {
                    let cc = reflect_index(c as isize + dc, w);
                    let v = img.get(rr, cc);
                    all.push(v);
                    if !mask.is_flagged(rr, cc) {
                        good.push(v);
                    }
                }
            }
            let pool = if good.is_empty() { &mut all } else { &mut good };
            out[r * w + c] = median_in_place(pool);
        }
    }
    GrayImage::new(w, h, out).expect("medians of valid intensities")
}
