//! Non-local switching filter.
//!
//! Each flagged pixel is replaced by a similarity-weighted sum of the
//! valid-pixel medians of the `L x L` patches centered in a square search
//! window around it. Similarity compares "switched" patches, where flagged
//! entries are replaced by the mean of the patch's unflagged entries, so
//! impulses do not distort the distance. Unflagged pixels pass through.
//!
//! All reads come from the original image and mask, so the result does not
//! depend on the order in which pixels are processed. Borders are handled
//! by reflecting coordinates about the edge pixels.

use rayon::prelude::*;
use thiserror::Error;

use crate::image::{reflect_index, GrayImage};
use crate::noise::NoiseMask;

#[derive(Debug, Error, PartialEq)]
pub enum NlsfError {
    #[error("invalid filter configuration: {0}")]
    Config(String),
    #[error("mask is {mask_w}x{mask_h} but image is {img_w}x{img_h}")]
    MaskMismatch {
        mask_w: usize,
        mask_h: usize,
        img_w: usize,
        img_h: usize,
    },
    #[error("patch has no valid pixels")]
    NoValidPixels,
    #[error("patch sizes differ ({0} vs {1} values)")]
    SizeMismatch(usize, usize),
    #[error("cannot normalize an empty weight list")]
    EmptyWeights,
    #[error("similarity {0} is not strictly positive")]
    NonPositiveSimilarity(f64),
    #[error("pixel ({0}, {1}) is outside the image")]
    OutOfBounds(usize, usize),
    #[error("pixel ({0}, {1}) is not flagged as noise")]
    NotFlagged(usize, usize),
}

pub type Result<T> = std::result::Result<T, NlsfError>;

/// Patch size 3 below 30% density, otherwise 5.
pub fn auto_patch_size(density_hint: f64) -> usize {
    if density_hint < 0.30 {
        3
    } else {
        5
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlsfConfig {
    /// Side length `L` of the compared patches; odd, at least 3.
    pub patch_size: usize,
    /// Candidate centers lie within `(2r + 1)^2` of the noisy pixel.
    pub search_radius: usize,
    /// Bandwidth of the similarity kernel, in `[0, 1]` intensity units.
    pub sigma: f64,
    /// 8-bit detection threshold used when a mask is derived from an image.
    pub delta: u32,
    /// How many times the search radius may double when a window holds no
    /// patch with a valid pixel.
    pub max_window_growth: u32,
}

impl Default for NlsfConfig {
    fn default() -> Self {
        Self {
            patch_size: 3,
            search_radius: 5,
            sigma: DEFAULT_SIGMA,
            delta: 1,
            max_window_growth: 3,
        }
    }
}

/// Kernel bandwidth tuned once on the 512x512 Lena regression image.
pub const DEFAULT_SIGMA: f64 = 0.04;

impl NlsfConfig {
    /// Defaults with the patch size picked by [`auto_patch_size`].
    pub fn for_density(density_hint: f64) -> Self {
        Self {
            patch_size: auto_patch_size(density_hint),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.patch_size % 2 == 0 {
            return Err(NlsfError::Config(format!(
                "patch size {} must be odd and >= 3",
                self.patch_size
            )));
        }
        if self.search_radius < 1 {
            return Err(NlsfError::Config("search radius must be >= 1".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(NlsfError::Config(format!(
                "bandwidth {} must be positive",
                self.sigma
            )));
        }
        if !(1..=127).contains(&self.delta) {
            return Err(NlsfError::Config(format!(
                "delta {} outside [1, 127]",
                self.delta
            )));
        }
        if self.max_window_growth > 16 {
            return Err(NlsfError::Config(format!(
                "window growth {} exceeds 16 doublings",
                self.max_window_growth
            )));
        }
        Ok(())
    }
}

/// An `L x L` patch with validity flags and its switched template.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePatch {
    pub center: (isize, isize),
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    pub switched_values: Vec<f64>,
}

impl CandidatePatch {
    /// Fails with [`NlsfError::NoValidPixels`] when every entry is flagged.
    pub fn new(center: (isize, isize), values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != valid.len() {
            return Err(NlsfError::SizeMismatch(values.len(), valid.len()));
        }
        let (sum, n) = values
            .iter()
            .zip(&valid)
            .filter(|(_, &ok)| ok)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
        if n == 0 {
            return Err(NlsfError::NoValidPixels);
        }
        let mean = sum / n as f64;
        let switched_values = values
            .iter()
            .zip(&valid)
            .map(|(&v, &ok)| if ok { v } else { mean })
            .collect();
        Ok(Self {
            center,
            values,
            valid,
            switched_values,
        })
    }

    /// Reads the patch centered at `center` (image coordinates, reflected at
    /// the borders).
    pub fn from_image(
        img: &GrayImage,
        mask: &NoiseMask,
        center: (isize, isize),
        patch_size: usize,
    ) -> Result<Self> {
        let half = (patch_size / 2) as isize;
        let mut values = Vec::with_capacity(patch_size * patch_size);
        let mut valid = Vec::with_capacity(patch_size * patch_size);
        for dr in -half..=half {
            let r = reflect_index(center.0 + dr, img.height());
            for dc in -half..=half {
                let c = reflect_index(center.1 + dc, img.width());
                values.push(img.get(r, c));
                valid.push(!mask.is_flagged(r, c));
            }
        }
        Self::new(center, values, valid)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Median of a nonempty slice; even counts average the two middle values.
pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median over the unflagged entries only.
pub fn valid_median(p: &CandidatePatch) -> Result<f64> {
    let mut vals: Vec<f64> = p
        .values
        .iter()
        .zip(&p.valid)
        .filter(|(_, &ok)| ok)
        .map(|(&v, _)| v)
        .collect();
    if vals.is_empty() {
        return Err(NlsfError::NoValidPixels);
    }
    Ok(median_in_place(&mut vals))
}

/// Mean squared difference of the switched templates.
pub fn switched_distance(a: &CandidatePatch, b: &CandidatePatch) -> Result<f64> {
    if a.switched_values.len() != b.switched_values.len() {
        return Err(NlsfError::SizeMismatch(
            a.switched_values.len(),
            b.switched_values.len(),
        ));
    }
    let n = a.switched_values.len() as f64;
    let sum: f64 = a
        .switched_values
        .iter()
        .zip(&b.switched_values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / n)
}

/// Gaussian kernel `exp(-d2 / sigma^2)`.
pub fn similarity(d2: f64, sigma: f64) -> f64 {
    (-d2 / (sigma * sigma)).exp()
}

pub fn normalize_weights(sims: &[f64]) -> Result<Vec<f64>> {
    if sims.is_empty() {
        return Err(NlsfError::EmptyWeights);
    }
    if let Some(&s) = sims.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(NlsfError::NonPositiveSimilarity(s));
    }
    let total: f64 = sims.iter().sum();
    Ok(sims.iter().map(|s| s / total).collect())
}

/// Where a restored value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestoreSource {
    /// Weighted medians from a search window of the given radius.
    Window { radius: usize },
    /// Median of every unflagged pixel in the image.
    GlobalMedian,
    /// No unflagged pixel exists anywhere; mid-gray.
    MidGray,
}

/// Full account of one restored pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Restoration {
    pub value: f64,
    pub source: RestoreSource,
    /// Centers of the admitted candidates, image coordinates.
    pub centers: Vec<(isize, isize)>,
    pub medians: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Reflection-padded copy of the image and mask, plus per-center patch
/// statistics (valid count, valid mean, valid median).
struct SearchField {
    patch: usize,
    half: usize,
    margin: usize,
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
    count: Vec<u32>,
    mean: Vec<f64>,
    median: Vec<f64>,
    radii: Vec<usize>,
    sigma2: f64,
    global: (f64, RestoreSource),
}

impl SearchField {
    fn new(img: &GrayImage, mask: &NoiseMask, cfg: &NlsfConfig) -> Result<Self> {
        cfg.validate()?;
        if !mask.matches(img) {
            return Err(NlsfError::MaskMismatch {
                mask_w: mask.width(),
                mask_h: mask.height(),
                img_w: img.width(),
                img_h: img.height(),
            });
        }
        let extent = img.width().max(img.height());
        let mut radii = Vec::new();
        for g in 0..=cfg.max_window_growth {
            let r = cfg.search_radius << g;
            radii.push(r);
            if r >= extent {
                break;
            }
        }
        let half = cfg.patch_size / 2;
        let margin = half + *radii.last().expect("at least one radius");
        let width = img.width() + 2 * margin;
        let height = img.height() + 2 * margin;
        let mut values = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for r in 0..height {
            let sr = reflect_index(r as isize - margin as isize, img.height());
            for c in 0..width {
                let sc = reflect_index(c as isize - margin as isize, img.width());
                values.push(img.get(sr, sc));
                valid.push(!mask.is_flagged(sr, sc));
            }
        }

        let mut field = Self {
            patch: cfg.patch_size,
            half,
            margin,
            width,
            height,
            values,
            valid,
            count: vec![0; width * height],
            mean: vec![0.0; width * height],
            median: vec![0.0; width * height],
            radii,
            sigma2: cfg.sigma * cfg.sigma,
            global: global_median(img, mask),
        };
        field.compute_stats();
        Ok(field)
    }

    fn compute_stats(&mut self) {
        let (w, h, k, half) = (self.width, self.height, self.patch, self.half);
        let values = &self.values;
        let valid = &self.valid;
        let rows: Vec<(Vec<u32>, Vec<f64>, Vec<f64>)> = (half..h - half)
            .into_par_iter()
            .map(|r| {
                let mut buf = Vec::with_capacity(k * k);
                let mut counts = vec![0; w];
                let mut means = vec![0.0; w];
                let mut medians = vec![0.0; w];
                for c in half..w - half {
                    buf.clear();
                    for pr in r - half..=r + half {
                        let base = pr * w;
                        for pc in c - half..=c + half {
                            if valid[base + pc] {
                                buf.push(values[base + pc]);
                            }
                        }
                    }
                    if buf.is_empty() {
                        continue;
                    }
                    counts[c] = buf.len() as u32;
                    means[c] = buf.iter().sum::<f64>() / buf.len() as f64;
                    medians[c] = median_in_place(&mut buf);
                }
                (counts, means, medians)
            })
            .collect();
        for (i, (counts, means, medians)) in rows.into_iter().enumerate() {
            let base = (i + half) * w;
            self.count[base..base + w].copy_from_slice(&counts);
            self.mean[base..base + w].copy_from_slice(&means);
            self.median[base..base + w].copy_from_slice(&medians);
        }
    }

    /// Switched template of the patch centered at padded index `center`.
    fn template(&self, center: usize, out: &mut Vec<f64>) {
        out.clear();
        let fill = self.mean[center];
        let (r, c) = (center / self.width, center % self.width);
        for pr in r - self.half..=r + self.half {
            let base = pr * self.width;
            for pc in c - self.half..=c + self.half {
                let i = base + pc;
                out.push(if self.valid[i] { self.values[i] } else { fill });
            }
        }
    }

    fn distance(&self, reference: &[f64], center: usize) -> f64 {
        let fill = self.mean[center];
        let (r, c) = (center / self.width, center % self.width);
        let mut sum = 0.0;
        let mut k = 0;
        for pr in r - self.half..=r + self.half {
            let base = pr * self.width;
            for pc in c - self.half..=c + self.half {
                let i = base + pc;
                let v = if self.valid[i] { self.values[i] } else { fill };
                let d = reference[k] - v;
                sum += d * d;
                k += 1;
            }
        }
        sum / (self.patch * self.patch) as f64
    }

    fn restore(&self, row: usize, col: usize, explain: bool) -> Restoration {
        let w = self.width;
        let center = (row + self.margin) * w + (col + self.margin);
        let ref_valid = self.count[center] > 0;
        let mut reference = Vec::with_capacity(self.patch * self.patch);
        if ref_valid {
            self.template(center, &mut reference);
        }

        let mut admitted: Vec<usize> = Vec::new();
        for &radius in &self.radii {
            admitted.clear();
            let r0 = row + self.margin - radius;
            let c0 = col + self.margin - radius;
            for r in r0..=r0 + 2 * radius {
                for c in c0..=c0 + 2 * radius {
                    let i = r * w + c;
                    if self.count[i] > 0 {
                        admitted.push(i);
                    }
                }
            }
            if admitted.is_empty() {
                continue;
            }

            let medians: Vec<f64> = admitted.iter().map(|&i| self.median[i]).collect();
            let weights = if ref_valid {
                let dists: Vec<f64> = admitted
                    .iter()
                    .map(|&i| self.distance(&reference, i))
                    .collect();
                // Shifting by the smallest distance cancels in the
                // normalization and keeps at least one kernel value at 1;
                // the floor stops far candidates underflowing to zero.
                let d_min = dists.iter().copied().fold(f64::INFINITY, f64::min);
                let sims: Vec<f64> = dists
                    .iter()
                    .map(|&d| (-(d - d_min) / self.sigma2).exp().max(f64::MIN_POSITIVE))
                    .collect();
                normalize_weights(&sims).expect("nonempty and positive")
            } else {
                vec![1.0 / admitted.len() as f64; admitted.len()]
            };
            let value = weights.iter().zip(&medians).map(|(w, m)| w * m).sum();
            let centers = if explain {
                admitted
                    .iter()
                    .map(|&i| {
                        (
                            (i / w) as isize - self.margin as isize,
                            (i % w) as isize - self.margin as isize,
                        )
                    })
                    .collect()
            } else {
                Vec::new()
            };
            return Restoration {
                value,
                source: RestoreSource::Window { radius },
                centers,
                medians,
                weights,
            };
        }

        let (value, source) = self.global;
        Restoration {
            value,
            source,
            centers: Vec::new(),
            medians: Vec::new(),
            weights: Vec::new(),
        }
    }
}

fn global_median(img: &GrayImage, mask: &NoiseMask) -> (f64, RestoreSource) {
    let mut vals: Vec<f64> = img
        .data()
        .iter()
        .zip(mask.flags())
        .filter(|(_, &f)| !f)
        .map(|(&v, _)| v)
        .collect();
    if vals.is_empty() {
        (0.5, RestoreSource::MidGray)
    } else {
        (median_in_place(&mut vals), RestoreSource::GlobalMedian)
    }
}

fn check_pixel(img: &GrayImage, mask: &NoiseMask, at: (usize, usize)) -> Result<()> {
    if at.0 >= img.height() || at.1 >= img.width() {
        return Err(NlsfError::OutOfBounds(at.0, at.1));
    }
    if mask.matches(img) && !mask.is_flagged(at.0, at.1) {
        return Err(NlsfError::NotFlagged(at.0, at.1));
    }
    Ok(())
}

/// Restores a single flagged pixel, returning the candidates, medians and
/// weights that produced it.
pub fn explain_pixel(
    img: &GrayImage,
    mask: &NoiseMask,
    at: (usize, usize),
    cfg: &NlsfConfig,
) -> Result<Restoration> {
    check_pixel(img, mask, at)?;
    let field = SearchField::new(img, mask, cfg)?;
    Ok(field.restore(at.0, at.1, true))
}

pub fn restore_pixel(
    img: &GrayImage,
    mask: &NoiseMask,
    at: (usize, usize),
    cfg: &NlsfConfig,
) -> Result<f64> {
    explain_pixel(img, mask, at, cfg).map(|r| r.value)
}

/// Filters every flagged pixel; unflagged pixels are copied bit for bit.
pub fn nlsf(img: &GrayImage, mask: &NoiseMask, cfg: &NlsfConfig) -> Result<GrayImage> {
    let field = SearchField::new(img, mask, cfg)?;
    let w = img.width();
    let data: Vec<f64> = (0..img.height())
        .into_par_iter()
        .flat_map_iter(|r| {
            let field = &field;
            (0..w).map(move |c| {
                if mask.is_flagged(r, c) {
                    field.restore(r, c, false).value.clamp(0.0, 1.0)
                } else {
                    img.get(r, c)
                }
            })
        })
        .collect();
    Ok(GrayImage::new(w, img.height(), data).expect("clamped values"))
}
