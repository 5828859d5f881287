//! Patch-based training: corrupt, detect, pre-filter, then fit the network
//! to map pre-filtered windows onto the matching clean centers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    backward, forward, mse_loss, Architecture, CnnError, CnnModel, Gradients, Result, Tensor3,
};
use crate::image::{grid_positions, GrayImage};
use crate::nlsf::{nlsf, NlsfConfig};
use crate::noise::{derive_seed, detect, inject, NoiseSpec};

const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0001;
const BATCH_STREAM: u64 = 0x6261_7463_6800_0002;
const INIT_STREAM: u64 = 0x696e_6974_0000_0003;
/// Samples used to measure the loss before and after training.
const EVAL_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// `v = momentum * v + g; p -= lr * v`
    Sgd { momentum: f64 },
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Optimizer {
    pub const SGD_MOMENTUM: Self = Self::Sgd { momentum: 0.9 };
    pub const ADAM: Self = Self::Adam {
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd { .. } => "sgd",
            Self::Adam { .. } => "adam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Side of the square network input window.
    pub input_patch: usize,
    /// Distance between window origins when tiling a training image.
    pub stride: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Noise density injected into the clean training images.
    pub density: f64,
    pub salt_fraction: f64,
    pub optimizer: Optimizer,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            input_patch: 64,
            stride: 32,
            learning_rate: 1e-4,
            steps: 2000,
            batch: 16,
            seed: 0,
            density: 0.5,
            salt_fraction: 0.5,
            optimizer: Optimizer::SGD_MOMENTUM,
            init_std: 0.001,
            architecture: Architecture::STANDARD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let shrink = self.architecture.shrinkage();
        if self.input_patch <= shrink {
            return Err(CnnError::Config(format!(
                "input patch {} must exceed the network shrinkage {shrink}",
                self.input_patch
            )));
        }
        if self.stride == 0 || self.batch == 0 {
            return Err(CnnError::Config("stride and batch must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(CnnError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(CnnError::Config("init std must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.density) || !(0.0..=1.0).contains(&self.salt_fraction) {
            return Err(CnnError::Config(
                "density and salt fraction must lie in [0, 1]".into(),
            ));
        }
        if let Optimizer::Sgd { momentum } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(CnnError::Config(format!(
                    "momentum {momentum} outside [0, 1)"
                )));
            }
        }
        Ok(())
    }

    /// The seeded starting point used by [`train`].
    pub fn initial_model(&self) -> CnnModel {
        let mut model = CnnModel::init(
            self.architecture,
            derive_seed(self.seed, INIT_STREAM),
            self.init_std,
        );
        model.meta.seed = self.seed;
        model.meta.density = self.density as f32;
        model
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CnnModel,
    /// Mean mini-batch loss of every step, measured before its update.
    pub history: Vec<LossRecord>,
    /// Loss over a fixed evaluation subset before the first step.
    pub initial_loss: f64,
    /// Same subset after the last step.
    pub final_loss: f64,
}

impl TrainOutcome {
    /// `step,loss` lines with a header.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for r in &self.history {
            s.push_str(&format!("{},{:e}\n", r.step, r.loss));
        }
        s
    }
}

/// Input/target window pairs cut lazily from (pre-filtered, clean) images.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pairs: Vec<(GrayImage, GrayImage)>,
    windows: Vec<(usize, usize, usize)>,
    patch: usize,
    shrink: usize,
}

impl TrainingSet {
    /// Tiles every pair with `patch x patch` windows at `stride`.
    pub fn from_pairs(
        pairs: Vec<(GrayImage, GrayImage)>,
        patch: usize,
        stride: usize,
        shrink: usize,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(CnnError::EmptyCorpus);
        }
        if patch <= shrink || stride == 0 {
            return Err(CnnError::Config(format!(
                "patch {patch} / stride {stride} invalid for shrinkage {shrink}"
            )));
        }
        let mut windows = Vec::new();
        for (i, (input, clean)) in pairs.iter().enumerate() {
            if input.width() != clean.width() || input.height() != clean.height() {
                return Err(CnnError::Shape(format!("pair {i} has mismatched sizes")));
            }
            if input.width() < patch || input.height() < patch {
                return Err(CnnError::ImageTooSmall {
                    width: input.width(),
                    height: input.height(),
                    reason: format!("training image {i} is smaller than the {patch}x{patch} input"),
                });
            }
            for r in grid_positions(input.height(), patch, stride) {
                for c in grid_positions(input.width(), patch, stride) {
                    windows.push((i, r, c));
                }
            }
        }
        Ok(Self {
            pairs,
            windows,
            patch,
            shrink,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Network input window and the clean center it should reproduce.
    pub fn get(&self, index: usize) -> (Tensor3, Tensor3) {
        let (i, r, c) = self.windows[index];
        let (input, clean) = &self.pairs[i];
        let off = self.shrink / 2;
        let x = Tensor3::from_window(input, r, c, self.patch);
        let out = self.patch - self.shrink;
        let mut y = Vec::with_capacity(out * out);
        for rr in r + off..r + off + out {
            let start = rr * clean.width() + c + off;
            y.extend_from_slice(&clean.data()[start..start + out]);
        }
        (
            x,
            Tensor3 {
                channels: 1,
                height: out,
                width: out,
                data: y,
            },
        )
    }
}

/// Corrupts each clean image at `cfg.density` (seeded per image), detects
/// impulses, pre-filters, and pairs the result with the clean image.
pub fn build_samples(
    images: &[GrayImage],
    cfg: &TrainConfig,
    nlsf_cfg: &NlsfConfig,
) -> Result<TrainingSet> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(CnnError::EmptyCorpus);
    }
    let stream = derive_seed(cfg.seed, NOISE_STREAM);
    let mut pairs = Vec::with_capacity(images.len());
    for (i, clean) in images.iter().enumerate() {
        let spec = NoiseSpec::new(
            cfg.density,
            cfg.salt_fraction,
            derive_seed(stream, i as u64),
        )?;
        let noisy = inject(clean, &spec);
        let mask = detect(&noisy, nlsf_cfg.delta)?;
        let filtered = nlsf(&noisy, &mask, nlsf_cfg)?;
        pairs.push((filtered, clean.clone()));
    }
    TrainingSet::from_pairs(
        pairs,
        cfg.input_patch,
        cfg.stride,
        cfg.architecture.shrinkage(),
    )
}

struct OptimizerState {
    kind: Optimizer,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: i32,
}

impl OptimizerState {
    fn new(kind: Optimizer, model: &mut CnnModel) -> Self {
        let first: Vec<Vec<f64>> = model
            .params_mut()
            .iter()
            .map(|p| vec![0.0; p.len()])
            .collect();
        let second = match kind {
            Optimizer::Adam { .. } => first.clone(),
            Optimizer::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            first,
            second,
            t: 0,
        }
    }

    fn step(&mut self, model: &mut CnnModel, grads: &Gradients, lr: f64) {
        self.t += 1;
        let params = model.params_mut();
        let grads = grads.params();
        match self.kind {
            Optimizer::Sgd { momentum } => {
                for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
                    }
                }
            }
        }
    }
}

/// Mean loss over up to [`EVAL_SAMPLES`] evenly spaced samples.
fn subset_loss(samples: &TrainingSet, model: &CnnModel) -> Result<f64> {
    let n = samples.len();
    let k = n.min(EVAL_SAMPLES);
    let idx: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    let losses: Vec<f64> = idx
        .par_iter()
        .map(|&i| {
            let (x, y) = samples.get(i);
            mse_loss(&forward(&x, model)?, &y)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / k as f64)
}

/// Runs `cfg.steps` mini-batch updates starting from `model`.
///
/// Per-sample gradients may be computed in parallel; they are always summed
/// in batch order, so the result does not depend on the thread count.
pub fn train_on_samples(
    samples: &TrainingSet,
    cfg: &TrainConfig,
    mut model: CnnModel,
    mut observer: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(CnnError::EmptyCorpus);
    }
    if model.shrinkage() != samples.shrink {
        return Err(CnnError::Architecture(format!(
            "model shrinks by {} but samples were cut for {}",
            model.shrinkage(),
            samples.shrink
        )));
    }
    let initial_loss = subset_loss(samples, &model)?;
    let mut opt = OptimizerState::new(cfg.optimizer, &mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, BATCH_STREAM));
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.gen_range(0..samples.len()))
            .collect();
        let results: Vec<(f64, Gradients)> = batch
            .par_iter()
            .map(|&i| {
                let (x, y) = samples.get(i);
                backward(&x, &y, &model)
            })
            .collect::<Result<_>>()?;
        let mut total = Gradients::zeros_like(&model);
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            total.add_assign(g);
        }
        let scale = 1.0 / cfg.batch as f64;
        total.scale(scale);
        let record = LossRecord {
            step,
            loss: loss * scale,
        };
        observer(&record);
        history.push(record);
        opt.step(&mut model, &total, cfg.learning_rate);
    }

    model.meta.steps = model.meta.steps.saturating_add(cfg.steps as u32);
    model.meta.density = cfg.density as f32;
    model.meta.seed = cfg.seed;
    let final_loss = subset_loss(samples, &model)?;
    Ok(TrainOutcome {
        model,
        history,
        initial_loss,
        final_loss,
    })
}

/// Full training pipeline from clean images.
pub fn train(
    images: &[GrayImage],
    cfg: &TrainConfig,
    nlsf_cfg: &NlsfConfig,
    observer: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    let samples = build_samples(images, cfg, nlsf_cfg)?;
    train_on_samples(&samples, cfg, cfg.initial_model(), observer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> Architecture {
        Architecture {
            n1: 4,
            n2: 3,
            f1: 3,
            f2: 1,
            f3: 3,
        }
    }

    fn scene(w: usize, h: usize, phase: f64) -> GrayImage {
        GrayImage::from_fn(w, h, |r, c| {
            (0.5 + 0.3 * ((r as f64 * 0.3 + phase).sin() + (c as f64 * 0.2).cos()) / 2.0)
                .clamp(0.05, 0.95)
        })
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            input_patch: 16,
            stride: 8,
            steps: 5,
            batch: 3,
            seed: 9,
            architecture: tiny_arch(),
            ..Default::default()
        }
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            input_patch: 12,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn empty_corpus_and_small_images_fail() {
        let cfg = small_cfg();
        assert!(matches!(
            build_samples(&[], &cfg, &NlsfConfig::default()),
            Err(CnnError::EmptyCorpus)
        ));
        assert!(matches!(
            build_samples(&[scene(10, 30, 0.0)], &cfg, &NlsfConfig::default()),
            Err(CnnError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn windows_align_targets_with_centers() {
        let clean = scene(24, 20, 0.0);
        let s = TrainingSet::from_pairs(vec![(clean.clone(), clean.clone())], 16, 8, 4).unwrap();
        // rows 0,4 ; cols 0,8
        assert_eq!(s.len(), 4);
        let (x, y) = s.get(3);
        assert_eq!(x.shape(), (1, 16, 16));
        assert_eq!(y.shape(), (1, 12, 12));
        assert_eq!(y, x.crop_center(2).unwrap());
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let cfg = TrainConfig {
            steps: 0,
            ..small_cfg()
        };
        let out = train(&[scene(24, 24, 0.1)], &cfg, &NlsfConfig::default(), |_| {}).unwrap();
        let mut expected = cfg.initial_model();
        expected.meta.steps = 0;
        assert_eq!(out.model, expected);
        assert!(out.history.is_empty());
        assert_eq!(out.initial_loss, out.final_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let imgs = [scene(24, 24, 0.1), scene(20, 28, 1.3)];
        let cfg = small_cfg();
        let a = train(&imgs, &cfg, &NlsfConfig::default(), |_| {}).unwrap();
        let b = train(&imgs, &cfg, &NlsfConfig::default(), |_| {}).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.meta.steps, 5);
        assert!(a.history_csv().starts_with("step,loss\n0,"));
    }
}
