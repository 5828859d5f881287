use super::{CnnError, Result, Tensor3};

/// Convolution weights `[out][in][k][k]` (out-major) and one bias per
/// output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ConvLayer {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kernel == 0 {
            return Err(CnnError::Shape(format!(
                "degenerate layer {out_channels}x{in_channels}x{kernel}x{kernel}"
            )));
        }
        if weights.len() != out_channels * in_channels * kernel * kernel {
            return Err(CnnError::Shape(format!(
                "{} weights for a {out_channels}x{in_channels}x{kernel}x{kernel} layer",
                weights.len()
            )));
        }
        if biases.len() != out_channels {
            return Err(CnnError::Shape(format!(
                "{} biases for {out_channels} output channels",
                biases.len()
            )));
        }
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(CnnError::Shape("layer holds non-finite parameters".into()));
        }
        Ok(Self {
            out_channels,
            in_channels,
            kernel,
            weights,
            biases,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kernel,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            biases: vec![0.0; out_channels],
        }
    }

    /// Row length of the weight matrix, `in * k * k`.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    #[inline]
    pub fn weight(&self, o: usize, c: usize, u: usize, v: usize) -> f64 {
        let k = self.kernel;
        self.weights[((o * self.in_channels + c) * k + u) * k + v]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n` given by
/// their strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `x` into a `(C * k * k) x (Ho * Wo)` matrix whose column `p`
/// holds the receptive field of output pixel `p`.
fn im2col(x: &Tensor3, k: usize) -> Vec<f64> {
    let (ho, wo) = (x.height - k + 1, x.width - k + 1);
    let p = ho * wo;
    let mut cols = vec![0.0; x.channels * k * k * p];
    let mut row = 0;
    for c in 0..x.channels {
        for u in 0..k {
            for v in 0..k {
                let dst = &mut cols[row * p..(row + 1) * p];
                for i in 0..ho {
                    let src = (c * x.height + i + u) * x.width + v;
                    dst[i * wo..(i + 1) * wo].copy_from_slice(&x.data[src..src + wo]);
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(cols: &[f64], channels: usize, height: usize, width: usize, k: usize) -> Tensor3 {
    let (ho, wo) = (height - k + 1, width - k + 1);
    let p = ho * wo;
    let mut out = Tensor3::zeros(channels, height, width);
    let mut row = 0;
    for c in 0..channels {
        for u in 0..k {
            for v in 0..k {
                let src = &cols[row * p..(row + 1) * p];
                for i in 0..ho {
                    let dst = (c * height + i + u) * width + v;
                    for (o, s) in out.data[dst..dst + wo]
                        .iter_mut()
                        .zip(&src[i * wo..(i + 1) * wo])
                    {
                        *o += s;
                    }
                }
                row += 1;
            }
        }
    }
    out
}

fn check_input(x: &Tensor3, layer: &ConvLayer) -> Result<()> {
    if x.channels != layer.in_channels {
        return Err(CnnError::Shape(format!(
            "input has {} channels, layer expects {}",
            x.channels, layer.in_channels
        )));
    }
    if x.height < layer.kernel || x.width < layer.kernel {
        return Err(CnnError::Shape(format!(
            "{}x{} input smaller than {}x{} kernel",
            x.height, x.width, layer.kernel, layer.kernel
        )));
    }
    Ok(())
}

/// Valid cross-correlation:
/// `out[o][i][j] = b[o] + sum_{c,u,v} w[o][c][u][v] * x[c][i+u][j+v]`.
pub fn conv2d_valid(x: &Tensor3, layer: &ConvLayer) -> Result<Tensor3> {
    check_input(x, layer)?;
    let k = layer.kernel;
    let (ho, wo) = (x.height - k + 1, x.width - k + 1);
    let p = ho * wo;
    let mut out = Tensor3::zeros(layer.out_channels, ho, wo);
    for (o, &b) in layer.biases.iter().enumerate() {
        out.data[o * p..(o + 1) * p].fill(b);
    }
    let q = layer.fan_in();
    if k == 1 {
        gemm(
            layer.out_channels,
            q,
            p,
            &layer.weights,
            (q, 1),
            &x.data,
            (p, 1),
            1.0,
            &mut out.data,
        );
    } else {
        let cols = im2col(x, k);
        gemm(
            layer.out_channels,
            q,
            p,
            &layer.weights,
            (q, 1),
            &cols,
            (p, 1),
            1.0,
            &mut out.data,
        );
    }
    Ok(out)
}

pub fn relu(x: &Tensor3) -> Tensor3 {
    let mut y = x.clone();
    relu_in_place(&mut y);
    y
}

pub(crate) fn relu_in_place(x: &mut Tensor3) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient of a convolution given the upstream gradient `dz` of its
/// output. Accumulates into `grad` and returns the input gradient when
/// asked for it.
pub(crate) fn conv_backward(
    layer: &ConvLayer,
    input: &Tensor3,
    dz: &Tensor3,
    grad: &mut ConvLayer,
    want_input_grad: bool,
) -> Option<Tensor3> {
    let k = layer.kernel;
    let p = dz.plane();
    let q = layer.fan_in();
    let o = layer.out_channels;

    for (g, row) in grad.biases.iter_mut().zip(dz.data.chunks_exact(p)) {
        *g += row.iter().sum::<f64>();
    }

    let owned;
    let cols: &[f64] = if k == 1 {
        &input.data
    } else {
        owned = im2col(input, k);
        &owned
    };
    // dW (o x q) += dz (o x p) * cols^T (p x q)
    gemm(
        o,
        p,
        q,
        &dz.data,
        (p, 1),
        cols,
        (1, p),
        1.0,
        &mut grad.weights,
    );

    if !want_input_grad {
        return None;
    }
    // dcols (q x p) = W^T (q x o) * dz (o x p)
    let mut dcols = vec![0.0; q * p];
    gemm(
        q,
        o,
        p,
        &layer.weights,
        (1, q),
        &dz.data,
        (p, 1),
        0.0,
        &mut dcols,
    );
    if k == 1 {
        Some(Tensor3 {
            channels: input.channels,
            height: input.height,
            width: input.width,
            data: dcols,
        })
    } else {
        Some(col2im(&dcols, input.channels, input.height, input.width, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor3 {
        Tensor3::new(
            c,
            h,
            w,
            (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_layer(rng: &mut ChaCha8Rng, o: usize, i: usize, k: usize) -> ConvLayer {
        ConvLayer::new(
            o,
            i,
            k,
            (0..o * i * k * k)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn loop_conv(x: &Tensor3, l: &ConvLayer) -> Tensor3 {
        let k = l.kernel;
        let (ho, wo) = (x.height - k + 1, x.width - k + 1);
        let mut out = Tensor3::zeros(l.out_channels, ho, wo);
        for o in 0..l.out_channels {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = l.biases[o];
                    for c in 0..l.in_channels {
                        for u in 0..k {
                            for v in 0..k {
                                s += l.weight(o, c, u, v) * x.at(c, i + u, j + v);
                            }
                        }
                    }
                    out.data[(o * ho + i) * wo + j] = s;
                }
            }
        }
        out
    }

    #[test]
    fn unit_1x1_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 3, 5, 4);
        let mut l = ConvLayer::zeros(3, 3, 1);
        for c in 0..3 {
            l.weights[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d_valid(&x, &l).unwrap(), x);
    }

    #[test]
    fn box_kernel_on_constant() {
        let x = Tensor3::new(1, 6, 7, vec![0.3; 42]).unwrap();
        let l = ConvLayer::new(1, 1, 3, vec![1.0; 9], vec![0.0]).unwrap();
        let y = conv2d_valid(&x, &l).unwrap();
        assert_eq!(y.shape(), (1, 4, 5));
        for v in y.data {
            assert!((v - 2.7).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(c, o, k, h, w) in &[
            (1, 4, 3, 7, 9),
            (3, 2, 5, 8, 8),
            (4, 3, 1, 5, 6),
            (2, 2, 9, 12, 10),
        ] {
            let x = random_tensor(&mut rng, c, h, w);
            let l = random_layer(&mut rng, o, c, k);
            let fast = conv2d_valid(&x, &l).unwrap();
            let slow = loop_conv(&x, &l);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor3::zeros(2, 4, 4);
        assert!(conv2d_valid(&x, &ConvLayer::zeros(1, 3, 1)).is_err());
        assert!(conv2d_valid(&x, &ConvLayer::zeros(1, 2, 5)).is_err());
        assert!(ConvLayer::new(1, 1, 3, vec![0.0; 8], vec![0.0]).is_err());
    }

    #[test]
    fn relu_cases() {
        let x = Tensor3::new(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data, vec![0.0, 0.0, 2.0]);
        assert_eq!(relu(&y), y);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <dz, conv(x) - b> == <dW, W> summed over weights, and
        // <dz, W * x> == <dx, x>, both linear identities.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 2, 7, 6);
        let l = random_layer(&mut rng, 3, 2, 3);
        let y = conv2d_valid(&x, &l).unwrap();
        let dz = random_tensor(&mut rng, 3, 5, 4);
        let mut g = ConvLayer::zeros(3, 2, 3);
        let dx = conv_backward(&l, &x, &dz, &mut g, true).unwrap();

        let p = dz.plane();
        let lhs: f64 = (0..3)
            .map(|o| {
                (0..p)
                    .map(|i| dz.data[o * p + i] * (y.data[o * p + i] - l.biases[o]))
                    .sum::<f64>()
            })
            .sum();
        let via_w: f64 = g.weights.iter().zip(&l.weights).map(|(a, b)| a * b).sum();
        let via_x: f64 = dx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - via_w).abs() < 1e-10);
        assert!((lhs - via_x).abs() < 1e-10);
        for o in 0..3 {
            let s: f64 = dz.data[o * p..(o + 1) * p].iter().sum();
            assert!((g.biases[o] - s).abs() < 1e-12);
        }
    }
}
