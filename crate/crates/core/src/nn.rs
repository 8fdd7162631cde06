//! Parameter storage, initializers and the convolution primitive.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A named learnable array with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "param value length does not match shape");
        Param {
            name: name.into(),
            shape,
            grad: vec![T::zero(); n],
            value,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![T::zero(); n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.value.iter().all(|v| v.is_finite())
    }

    /// Replaces the value, checking the shape.
    pub fn assign(&mut self, shape: &[usize], value: Vec<T>) -> Result<()> {
        if shape != self.shape.as_slice() || value.len() != self.value.len() {
            return Err(Error::Schema {
                array: self.name.clone(),
                expected: format!("{:?}", self.shape),
                found: format!("{shape:?}"),
            });
        }
        self.value = value;
        Ok(())
    }
}

/// Anything that owns learnable parameters.
pub trait Parameterized<T: Scalar> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian `f32` bytes of every array.
    fn fingerprint(&self) -> String {
        fingerprint_params(&self.params())
    }
}

pub fn fingerprint_params<T: Scalar>(params: &[&Param<T>]) -> String {
    let mut hasher = Sha256::new();
    for p in params {
        hasher.update((p.name.len() as u32).to_le_bytes());
        hasher.update(p.name.as_bytes());
        hasher.update((p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            hasher.update((d as u64).to_le_bytes());
        }
        for v in &p.value {
            hasher.update(v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    XavierNormal,
    XavierUniform,
    KaimingNormal,
    KaimingUniform,
}

impl InitMethod {
    pub const ALL: [InitMethod; 4] = [
        InitMethod::XavierNormal,
        InitMethod::XavierUniform,
        InitMethod::KaimingNormal,
        InitMethod::KaimingUniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitMethod::XavierNormal => "xavier-normal",
            InitMethod::XavierUniform => "xavier-uniform",
            InitMethod::KaimingNormal => "kaiming-normal",
            InitMethod::KaimingUniform => "kaiming-uniform",
        }
    }

    /// Draws `n` weights for a layer with the given fan-in/fan-out.
    pub fn sample<T: Scalar, R: Rng>(
        self,
        rng: &mut R,
        n: usize,
        fan_in: usize,
        fan_out: usize,
    ) -> Vec<T> {
        let fi = fan_in.max(1) as f64;
        let fo = fan_out.max(1) as f64;
        let draw: Box<dyn FnMut(&mut R) -> f64> = match self {
            InitMethod::XavierNormal => {
                let d = Normal::new(0.0, (2.0 / (fi + fo)).sqrt()).expect("finite std");
                Box::new(move |r| d.sample(r))
            }
            InitMethod::XavierUniform => {
                let b = (6.0 / (fi + fo)).sqrt();
                let d = Uniform::new_inclusive(-b, b);
                Box::new(move |r| d.sample(r))
            }
            InitMethod::KaimingNormal => {
                let d = Normal::new(0.0, (2.0 / fi).sqrt()).expect("finite std");
                Box::new(move |r| d.sample(r))
            }
            InitMethod::KaimingUniform => {
                let b = (6.0 / fi).sqrt();
                let d = Uniform::new_inclusive(-b, b);
                Box::new(move |r| d.sample(r))
            }
        };
        let mut draw = draw;
        (0..n).map(|_| T::lit(draw(rng))).collect()
    }
}

impl fmt::Display for InitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InitMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown init method `{s}`; valid: {}",
                    InitMethod::ALL.map(|m| m.name()).join(", ")
                ))
            })
    }
}

/// 2-D convolution over a single `(C, H, W)` map, lowered to im2col + gemm.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: InitMethod,
        rng: &mut R,
    ) -> Self {
        let kk = kernel * kernel;
        let w = init.sample(
            rng,
            out_channels * in_channels * kk,
            in_channels * kk,
            out_channels * kk,
        );
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                w,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn im2col(&self, x: &Tensor<T>) -> (Vec<T>, usize, usize) {
        let (c, h, w) = x.shape();
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let n = ho * wo;
        let mut cols = vec![T::zero(); c * k * k * n];
        let p = self.padding as isize;
        for ci in 0..c {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, ho, wo)
    }

    fn col2im(&self, cols: &[T], c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Tensor<T> {
        let k = self.kernel;
        let n = ho * wo;
        let p = self.padding as isize;
        let mut dx = Tensor::zeros(c, h, w);
        for ci in 0..c {
            let plane = dx.plane_mut(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..wo {
                            let ix = (ox * self.stride) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                plane[iy * w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.ensure_channels(self.in_channels, &self.weight.name)?;
        if x.height() + 2 * self.padding < self.kernel || x.width() + 2 * self.padding < self.kernel
        {
            return Err(Error::dim(
                &self.weight.name,
                format!("spatial size >= {}", self.kernel),
                format!("{}x{}", x.height(), x.width()),
            ));
        }
        let (cols, ho, wo) = self.im2col(x);
        let n = ho * wo;
        let kdim = self.fan_in();
        let mut out = vec![T::zero(); self.out_channels * n];
        for (o, b) in self.bias.value.iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = *b);
        }
        T::gemm(
            self.out_channels,
            kdim,
            n,
            T::one(),
            &self.weight.value,
            kdim as isize,
            1,
            &cols,
            n as isize,
            1,
            T::one(),
            &mut out,
            n as isize,
            1,
        );
        Tensor::from_vec(self.out_channels, ho, wo, out)
    }

    /// Backpropagates `dy` to the input. Parameter gradients are accumulated
    /// only when `accumulate` is set; the input gradient only when `need_dx`.
    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        accumulate: bool,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        if accumulate {
            self.accumulate_grads(x, dy);
        }
        need_dx.then(|| self.input_grad(x.shape(), dy))
    }

    pub fn accumulate_grads(&mut self, x: &Tensor<T>, dy: &Tensor<T>) {
        let n = dy.plane_len();
        let kdim = self.fan_in();
        let (cols, _, _) = self.im2col(x);
        T::gemm(
            self.out_channels,
            n,
            kdim,
            T::one(),
            dy.data(),
            n as isize,
            1,
            &cols,
            1,
            n as isize,
            T::one(),
            &mut self.weight.grad,
            kdim as isize,
            1,
        );
        for o in 0..self.out_channels {
            let s: T = dy.plane(o).iter().copied().sum();
            self.bias.grad[o] += s;
        }
    }

    /// Gradient with respect to an input of shape `x_shape`.
    pub fn input_grad(&self, x_shape: (usize, usize, usize), dy: &Tensor<T>) -> Tensor<T> {
        let (c, h, w) = x_shape;
        let (ho, wo) = (dy.height(), dy.width());
        let n = ho * wo;
        let kdim = self.fan_in();
        let mut dcols = vec![T::zero(); kdim * n];
        T::gemm(
            kdim,
            self.out_channels,
            n,
            T::one(),
            &self.weight.value,
            1,
            kdim as isize,
            dy.data(),
            n as isize,
            1,
            T::zero(),
            &mut dcols,
            n as isize,
            1,
        );
        self.col2im(&dcols, c, h, w, ho, wo)
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its pre-activation input.
pub fn relu_backward<T: Scalar>(pre: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    pre.zip_map(dy, |p, g| if p > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(v: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * v * (T::one() + (c * (v + a * v * v * v)).tanh())
}

pub fn gelu_grad<T: Scalar>(v: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (v + a * v * v * v);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * v * v);
    half * (T::one() + t) + half * v * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct scalar-loop convolution, independent of im2col/gemm.
    fn conv_oracle(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let (c, h, w) = x.shape();
        let (ho, wo) = conv.output_size(h, w);
        let k = conv.kernel;
        Tensor::from_fn(conv.out_channels, ho, wo, |o, oy, ox| {
            let mut acc = conv.bias.value[o];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight.value[((o * c + ci) * k + ky) * k + kx]
                                * x.at(ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(cin, cout, k, s, p, h, w) in &[
            (3, 4, 3, 1, 1, 5, 6),
            (2, 3, 3, 2, 1, 7, 8),
            (4, 2, 1, 1, 0, 3, 3),
            (1, 1, 3, 1, 1, 1, 1),
        ] {
            let mut conv =
                Conv2d::<f64>::new("c", cin, cout, k, s, p, InitMethod::XavierUniform, &mut rng);
            conv.bias.value = (0..cout).map(|i| i as f64 * 0.1).collect();
            let x = random_tensor(&mut rng, cin, h, w);
            let y = conv.forward(&x).unwrap();
            let o = conv_oracle(&conv, &x);
            assert_eq!(y.shape(), o.shape());
            assert!(y.max_abs_diff(&o) < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, 1, InitMethod::KaimingNormal, &mut rng);
        let x = random_tensor(&mut rng, 2, 5, 5);
        let y = conv.forward(&x).unwrap();
        let dy = random_tensor(&mut rng, 3, y.height(), y.width());
        let loss = |conv: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            conv.forward(x).unwrap().mul(&dy).sum()
        };
        let dx = conv.backward(&x, &dy, true, true).unwrap();
        let h = 1e-6;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-7);
        }
        let grad = conv.weight.grad.clone();
        for i in 0..grad.len() {
            let mut cp = conv.clone();
            cp.weight.value[i] += h;
            let mut cm = conv.clone();
            cm.weight.value[i] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7, "weight {i}");
        }
        let bgrad = conv.bias.grad.clone();
        for (o, g) in bgrad.iter().enumerate() {
            assert!((g - dy.plane(o).iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn init_method_parsing_lists_valid_names() {
        assert_eq!(
            "kaiming-uniform".parse::<InitMethod>().unwrap(),
            InitMethod::KaimingUniform
        );
        let err = "he-normal".parse::<InitMethod>().unwrap_err().to_string();
        for m in InitMethod::ALL {
            assert!(err.contains(m.name()));
        }
    }

    #[test]
    fn kaiming_uniform_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fan_in = 64 * 9;
        let w: Vec<f64> = InitMethod::KaimingUniform.sample(&mut rng, 20_000, fan_in, 32 * 9);
        let bound = (6.0 / fan_in as f64).sqrt();
        assert!(w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn xavier_normal_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (fi, fo) = (16 * 9, 32 * 9);
        let w: Vec<f64> = InitMethod::XavierNormal.sample(&mut rng, 20_000, fi, fo);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = 2.0 / (fi + fo) as f64;
        assert!((var - target).abs() / target < 0.1);
    }

    #[test]
    fn gelu_grad_matches_fd() {
        for &v in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(v + h) - gelu(v - h)) / (2.0 * h);
            assert!((fd - gelu_grad(v)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
