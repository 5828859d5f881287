//! Shared fixtures and a full-enumeration filter oracle.
//!
//! The oracle rebuilds every candidate patch from scratch for every pixel,
//! with no precomputed statistics, padded buffers or kernel shifting.

#![allow(dead_code)]

use nlsf_cnn::cnn::{
    backward, conv2d_valid, forward, mse_loss, relu, Architecture, CnnModel, Tensor3,
};
use nlsf_cnn::{GrayImage, NlsfConfig, NoiseMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mirror index without repeating the edge sample, for any offset.
pub fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

struct Patch {
    switched: Vec<f64>,
    median: f64,
}

fn read_patch(img: &GrayImage, mask: &NoiseMask, r: isize, c: isize, l: usize) -> Option<Patch> {
    let h = (l / 2) as isize;
    let mut raw = Vec::new();
    for dr in -h..=h {
        for dc in -h..=h {
            let rr = mirror(r + dr, img.height());
            let cc = mirror(c + dc, img.width());
            raw.push((img.get(rr, cc), !mask.is_flagged(rr, cc)));
        }
    }
    let good: Vec<f64> = raw.iter().filter(|p| p.1).map(|p| p.0).collect();
    if good.is_empty() {
        return None;
    }
    let mean = good.iter().sum::<f64>() / good.len() as f64;
    Some(Patch {
        switched: raw
            .iter()
            .map(|&(v, ok)| if ok { v } else { mean })
            .collect(),
        median: median(good),
    })
}

/// Restored value of one flagged pixel.
pub fn oracle_pixel(
    img: &GrayImage,
    mask: &NoiseMask,
    row: usize,
    col: usize,
    cfg: &NlsfConfig,
) -> f64 {
    let l = cfg.patch_size;
    let reference = read_patch(img, mask, row as isize, col as isize, l);
    let extent = img.width().max(img.height());
    let mut radius = cfg.search_radius;
    for g in 0..=cfg.max_window_growth {
        if g > 0 {
            if radius >= extent {
                break;
            }
            radius *= 2;
        }
        let rad = radius as isize;
        let mut cands = Vec::new();
        for dr in -rad..=rad {
            for dc in -rad..=rad {
                if let Some(p) = read_patch(img, mask, row as isize + dr, col as isize + dc, l) {
                    cands.push(p);
                }
            }
        }
        if cands.is_empty() {
            continue;
        }
        let sims: Vec<f64> = match &reference {
            Some(refp) => cands
                .iter()
                .map(|p| {
                    let d: f64 = p
                        .switched
                        .iter()
                        .zip(&refp.switched)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        / (l * l) as f64;
                    (-d / (cfg.sigma * cfg.sigma)).exp()
                })
                .collect(),
            None => vec![1.0; cands.len()],
        };
        let total: f64 = sims.iter().sum();
        return cands
            .iter()
            .zip(&sims)
            .map(|(p, s)| s / total * p.median)
            .sum();
    }
    let good: Vec<f64> = img
        .data()
        .iter()
        .zip(mask.flags())
        .filter(|(_, &f)| !f)
        .map(|(&v, _)| v)
        .collect();
    if good.is_empty() {
        0.5
    } else {
        median(good)
    }
}

pub fn oracle_nlsf(img: &GrayImage, mask: &NoiseMask, cfg: &NlsfConfig) -> GrayImage {
    GrayImage::from_fn(img.width(), img.height(), |r, c| {
        if mask.is_flagged(r, c) {
            oracle_pixel(img, mask, r, c, cfg).clamp(0.0, 1.0)
        } else {
            img.get(r, c)
        }
    })
    .unwrap()
}

/// Random image on the 8-bit grid with a random mask of the given density.
/// Flagged pixels are set to 0 or 1 so the pair looks like real impulses.
pub fn random_case(w: usize, h: usize, density: f64, seed: u64) -> (GrayImage, NoiseMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(w * h);
    let mut flags = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        let hit = rng.gen::<f64>() < density;
        flags.push(hit);
        data.push(if hit {
            if rng.gen::<bool>() {
                1.0
            } else {
                0.0
            }
        } else {
            f64::from(rng.gen_range(1u8..255)) / 255.0
        });
    }
    (
        GrayImage::new(w, h, data).unwrap(),
        NoiseMask::new(w, h, flags),
    )
}

/// Smooth synthetic scene with texture, values kept away from 0 and 1.
pub fn scene(w: usize, h: usize, phase: f64) -> GrayImage {
    GrayImage::from_fn(w, h, |r, c| {
        let (x, y) = (c as f64, r as f64);
        let v =
            0.5 + 0.25 * (x * 0.11 + phase).sin() * (y * 0.07).cos() + 0.15 * ((x + y) * 0.3).sin();
        v.clamp(0.02, 0.98)
    })
    .unwrap()
}

pub fn fixture_dir(sub: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(sub)
}

pub const TINY: Architecture = Architecture {
    n1: 2,
    n2: 2,
    f1: 3,
    f2: 1,
    f3: 3,
};

fn loss(x: &Tensor3, y: &Tensor3, m: &CnnModel) -> f64 {
    mse_loss(&forward(x, m).unwrap(), y).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor3 {
    Tensor3::new(1, h, w, (0..h * w).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn param_mut(m: &mut CnnModel, layer: usize, k: usize) -> &mut f64 {
    let l = &mut m.layers[layer];
    let n_w = l.weights.len();
    if k < n_w {
        &mut l.weights[k]
    } else {
        &mut l.biases[k - n_w]
    }
}

/// Smallest |pre-activation| over all layers; finite differences are only
/// meaningful when no unit sits within the step of a ReLU kink.
fn kink_margin(x: &Tensor3, m: &CnnModel) -> f64 {
    let mut a = x.clone();
    let mut margin = f64::INFINITY;
    for l in &m.layers {
        let z = conv2d_valid(&a, l).unwrap();
        margin = z.data.iter().fold(margin, |acc, v| acc.min(v.abs()));
        a = relu(&z);
    }
    margin
}

/// Largest relative error between analytic and central-difference
/// gradients, or `None` when the instance lies too close to a kink.
/// Entries whose values are both tiny are compared absolutely.
pub fn gradient_check_error(seed: u64) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CnnModel::init(TINY, seed, 0.5);
    for l in &mut model.layers {
        for b in &mut l.biases {
            *b = rng.gen_range(0.05..0.3);
        }
    }
    let x = random_tensor(&mut rng, 8, 8);
    let y = random_tensor(&mut rng, 4, 4);
    if kink_margin(&x, &model) < 1e-3 {
        return None;
    }
    let (_, grads) = backward(&x, &y, &model).unwrap();
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for li in 0..3 {
        let n_w = model.layers[li].weights.len();
        let n_b = model.layers[li].biases.len();
        for k in 0..n_w + n_b {
            let mut plus = model.clone();
            *param_mut(&mut plus, li, k) += eps;
            let mut minus = model.clone();
            *param_mut(&mut minus, li, k) -= eps;
            let numeric = (loss(&x, &y, &plus) - loss(&x, &y, &minus)) / (2.0 * eps);
            let analytic = if k < n_w {
                grads.layers[li].weights[k]
            } else {
                grads.layers[li].biases[k - n_w]
            };
            let scale = numeric.abs().max(analytic.abs());
            let err = if scale < 1e-7 {
                (numeric - analytic).abs()
            } else {
                (numeric - analytic).abs() / scale
            };
            worst = worst.max(err);
        }
    }
    Some(worst)
}
