//! Whole-image inference: pre-filter, tile into overlapping windows, run
//! the network on each, and average the predicted centers back together.

use rayon::prelude::*;

use super::{forward, CnnError, CnnModel, Result, Tensor3};
use crate::image::{extract_patches, mirror_pad, reconstruct, GrayImage, PatchGrid};
use crate::nlsf::{nlsf, NlsfConfig};
use crate::noise::detect;

/// Side of the inference window; the network sees 64x64 inputs.
pub const INFERENCE_PATCH: usize = 64;

/// Runs the network over an already pre-filtered image. The image is
/// mirror-padded by half the network shrinkage so predictions cover every
/// pixel; windows advance by half the output size.
pub fn refine(filtered: &GrayImage, model: &CnnModel) -> Result<GrayImage> {
    let shrink = model.shrinkage();
    if shrink % 2 != 0 {
        return Err(CnnError::Architecture(format!(
            "odd shrinkage {shrink} cannot be centered"
        )));
    }
    let pad = shrink / 2;
    let (w, h) = (filtered.width(), filtered.height());
    if pad >= w.min(h) || w + shrink < INFERENCE_PATCH || h + shrink < INFERENCE_PATCH {
        return Err(CnnError::ImageTooSmall {
            width: w,
            height: h,
            reason: format!("needs at least {0}x{0} pixels", INFERENCE_PATCH - shrink),
        });
    }
    let padded = mirror_pad(filtered, pad)?;
    let out_size = INFERENCE_PATCH - shrink;
    let inputs = extract_patches(&padded, INFERENCE_PATCH, (out_size / 2).max(1))?;
    let outputs: Vec<Vec<f64>> = inputs
        .patches
        .par_iter()
        .map(|p| {
            let x = Tensor3 {
                channels: 1,
                height: INFERENCE_PATCH,
                width: INFERENCE_PATCH,
                data: p.clone(),
            };
            forward(&x, model).map(|y| y.data)
        })
        .collect::<Result<_>>()?;
    // A window at padded origin (r, c) predicts original pixels starting at
    // (r, c): the pad and the center offset cancel.
    let grid = PatchGrid::new(out_size, inputs.stride, inputs.origins, outputs)?;
    Ok(reconstruct(&grid, w, h)?)
}

/// Detect, pre-filter with NLSF, then refine with the network.
pub fn denoise_image(
    noisy: &GrayImage,
    model: &CnnModel,
    nlsf_cfg: &NlsfConfig,
) -> Result<GrayImage> {
    let mask = detect(noisy, nlsf_cfg.delta)?;
    let filtered = nlsf(noisy, &mask, nlsf_cfg)?;
    refine(&filtered, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{Architecture, ConvLayer, ModelMeta};

    /// Network that copies the input center: one pass-through channel per
    /// layer with a unit center tap.
    pub(crate) fn identity_model() -> CnnModel {
        let arch = Architecture::STANDARD;
        let mut l1 = ConvLayer::zeros(arch.n1, 1, arch.f1);
        l1.weights[(arch.f1 / 2) * arch.f1 + arch.f1 / 2] = 1.0;
        let mut l2 = ConvLayer::zeros(arch.n2, arch.n1, 1);
        l2.weights[0] = 1.0;
        let mut l3 = ConvLayer::zeros(1, arch.n2, arch.f3);
        l3.weights[(arch.f3 / 2) * arch.f3 + arch.f3 / 2] = 1.0;
        CnnModel::from_layers([l1, l2, l3], ModelMeta::default()).unwrap()
    }

    fn scene(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |r, c| {
            (0.5 + 0.35 * ((r as f64 * 0.21).sin() * (c as f64 * 0.13).cos())).clamp(0.02, 0.98)
        })
        .unwrap()
    }

    #[test]
    fn identity_network_reproduces_input() {
        let img = scene(70, 57);
        let out = refine(&img, &identity_model()).unwrap();
        assert_eq!(out.width(), 70);
        assert_eq!(out.height(), 57);
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_matches_input_dimensions() {
        let m = CnnModel::init(Architecture::STANDARD, 3, 0.001);
        for (w, h) in [(52, 52), (53, 90), (128, 61)] {
            let out = denoise_image(&scene(w, h), &m, &NlsfConfig::default()).unwrap();
            assert_eq!((out.width(), out.height()), (w, h));
        }
    }

    #[test]
    fn rejects_small_images() {
        let m = CnnModel::zeros(Architecture::STANDARD);
        assert!(matches!(
            refine(&scene(51, 80), &m),
            Err(CnnError::ImageTooSmall { .. })
        ));
    }
}
