use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::layer::{conv_backward, relu_in_place};
use super::{conv2d_valid, CnnError, ConvLayer, Result, Tensor3};

/// Layer widths and kernel sizes of the three-layer stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub n1: usize,
    pub n2: usize,
    pub f1: usize,
    pub f2: usize,
    pub f3: usize,
}

impl Architecture {
    /// 64 filters of 9x9, 32 of 1x1, one 5x5 output filter.
    pub const STANDARD: Self = Self {
        n1: 64,
        n2: 32,
        f1: 9,
        f2: 1,
        f3: 5,
    };

    /// Pixels lost per axis under valid convolution.
    pub fn shrinkage(&self) -> usize {
        (self.f1 - 1) + (self.f2 - 1) + (self.f3 - 1)
    }

    fn shapes(&self) -> [(usize, usize, usize); 3] {
        [
            (self.n1, 1, self.f1),
            (self.n2, self.n1, self.f2),
            (1, self.n2, self.f3),
        ]
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self::STANDARD
    }
}

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ModelMeta {
    /// Noise density the model was trained for.
    pub density: f32,
    pub seed: u64,
    pub steps: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub layers: [ConvLayer; 3],
    pub meta: ModelMeta,
}

impl CnnModel {
    pub fn zeros(arch: Architecture) -> Self {
        let [a, b, c] = arch.shapes();
        Self {
            layers: [
                ConvLayer::zeros(a.0, a.1, a.2),
                ConvLayer::zeros(b.0, b.1, b.2),
                ConvLayer::zeros(c.0, c.1, c.2),
            ],
            meta: ModelMeta::default(),
        }
    }

    /// Weights drawn from `N(0, std^2)` in layer order, biases zero.
    pub fn init(arch: Architecture, seed: u64, std: f64) -> Self {
        let mut model = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("finite std");
        for layer in &mut model.layers {
            for w in &mut layer.weights {
                *w = dist.sample(&mut rng);
            }
        }
        model.meta.seed = seed;
        model
    }

    /// Assembles a model from layers, checking that they chain.
    pub fn from_layers(layers: [ConvLayer; 3], meta: ModelMeta) -> Result<Self> {
        let model = Self { layers, meta };
        model.architecture()?;
        Ok(model)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let [l1, l2, l3] = &self.layers;
        if l1.in_channels != 1 || l3.out_channels != 1 {
            return Err(CnnError::Architecture(
                "network must map one channel to one channel".into(),
            ));
        }
        if l2.in_channels != l1.out_channels || l3.in_channels != l2.out_channels {
            return Err(CnnError::Architecture(format!(
                "layer channels do not chain: {}->{}, {}->{}, {}->{}",
                l1.in_channels,
                l1.out_channels,
                l2.in_channels,
                l2.out_channels,
                l3.in_channels,
                l3.out_channels
            )));
        }
        Ok(Architecture {
            n1: l1.out_channels,
            n2: l2.out_channels,
            f1: l1.kernel,
            f2: l2.kernel,
            f3: l3.kernel,
        })
    }

    pub fn shrinkage(&self) -> usize {
        self.layers.iter().map(|l| l.kernel - 1).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Vec<f64>; 6] {
        let [a, b, c] = &mut self.layers;
        [
            &mut a.weights,
            &mut a.biases,
            &mut b.weights,
            &mut b.biases,
            &mut c.weights,
            &mut c.biases,
        ]
    }
}

/// Loss gradients, laid out exactly like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: [ConvLayer; 3],
}

impl Gradients {
    pub fn zeros_like(model: &CnnModel) -> Self {
        let z = |l: &ConvLayer| ConvLayer::zeros(l.out_channels, l.in_channels, l.kernel);
        Self {
            layers: [
                z(&model.layers[0]),
                z(&model.layers[1]),
                z(&model.layers[2]),
            ],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights
                .iter_mut()
                .chain(l.biases.iter_mut())
                .for_each(|v| *v *= s);
        }
    }

    pub(crate) fn params(&self) -> [&Vec<f64>; 6] {
        let [a, b, c] = &self.layers;
        [
            &a.weights, &a.biases, &b.weights, &b.biases, &c.weights, &c.biases,
        ]
    }

    pub fn max_abs(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Post-ReLU activations of every layer, input first.
struct Trace {
    input: Tensor3,
    hidden1: Tensor3,
    hidden2: Tensor3,
    output: Tensor3,
}

fn check_patch(patch: &Tensor3, model: &CnnModel) -> Result<()> {
    let need = model.shrinkage() + 1;
    if patch.channels != 1 {
        return Err(CnnError::Shape(format!(
            "network input must have one channel, got {}",
            patch.channels
        )));
    }
    if patch.height < need || patch.width < need {
        return Err(CnnError::Shape(format!(
            "{}x{} input is below the {need}x{need} minimum",
            patch.height, patch.width
        )));
    }
    Ok(())
}

fn trace(patch: &Tensor3, model: &CnnModel) -> Result<Trace> {
    check_patch(patch, model)?;
    let mut hidden1 = conv2d_valid(patch, &model.layers[0])?;
    relu_in_place(&mut hidden1);
    let mut hidden2 = conv2d_valid(&hidden1, &model.layers[1])?;
    relu_in_place(&mut hidden2);
    let mut output = conv2d_valid(&hidden2, &model.layers[2])?;
    relu_in_place(&mut output);
    Ok(Trace {
        input: patch.clone(),
        hidden1,
        hidden2,
        output,
    })
}

/// `relu(conv3(relu(conv2(relu(conv1(patch))))))`.
pub fn forward(patch: &Tensor3, model: &CnnModel) -> Result<Tensor3> {
    Ok(trace(patch, model)?.output)
}

/// Mean of squared differences over all entries.
pub fn mse_loss(pred: &Tensor3, target: &Tensor3) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(CnnError::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let sum: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.data.len() as f64)
}

/// Masks `grad` with the ReLU derivative, taken as 0 at the kink.
fn relu_gate(grad: &mut Tensor3, activation: &Tensor3) {
    for (g, &a) in grad.data.iter_mut().zip(&activation.data) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Loss and exact gradients of `mse_loss(forward(patch), target)` with
/// respect to every weight and bias.
pub fn backward(patch: &Tensor3, target: &Tensor3, model: &CnnModel) -> Result<(f64, Gradients)> {
    let t = trace(patch, model)?;
    let loss = mse_loss(&t.output, target)?;
    let mut grads = Gradients::zeros_like(model);
    let n = t.output.data.len() as f64;

    let mut d3 = Tensor3 {
        data: t
            .output
            .data
            .iter()
            .zip(&target.data)
            .map(|(p, y)| 2.0 * (p - y) / n)
            .collect(),
        ..t.output.clone()
    };
    relu_gate(&mut d3, &t.output);
    let [g1, g2, g3] = &mut grads.layers;
    let mut d2 = conv_backward(&model.layers[2], &t.hidden2, &d3, g3, true).expect("requested");
    relu_gate(&mut d2, &t.hidden2);
    let mut d1 = conv_backward(&model.layers[1], &t.hidden1, &d2, g2, true).expect("requested");
    relu_gate(&mut d1, &t.hidden1);
    conv_backward(&model.layers[0], &t.input, &d1, g1, false);
    Ok((loss, grads))
}
