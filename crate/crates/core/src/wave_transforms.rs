//! Input transform: channel-FC amplitude and phase estimation followed by
//! Euler decomposition into real and imaginary maps.
//!
//! The amplitude is signed. A negative amplitude at a pixel is the same wave
//! as its magnitude with the phase shifted by pi, so no absolute value is
//! taken and the phase is never wrapped.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{InitMethod, Param, Parameterized};
use crate::tensor::{Scalar, Tensor};

/// Per-pixel affine map across channels (a 1x1 convolution).
#[derive(Clone, Debug)]
pub struct ChannelFc<T> {
    /// `out_channels x in_channels`, row-major.
    pub matrix: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
}

pub type ChannelFcWeights<T> = ChannelFc<T>;

impl<T: Scalar> ChannelFc<T> {
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        with_bias: bool,
        init: InitMethod,
        rng: &mut R,
    ) -> Self {
        let w = init.sample(rng, in_channels * out_channels, in_channels, out_channels);
        ChannelFc {
            matrix: Param::new(format!("{name}.matrix"), vec![out_channels, in_channels], w),
            bias: with_bias.then(|| Param::zeros(format!("{name}.bias"), vec![out_channels])),
            in_channels,
            out_channels,
        }
    }

    /// Builds from explicit values; `bias` may be omitted.
    pub fn from_values(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        matrix: Vec<T>,
        bias: Option<Vec<T>>,
    ) -> Result<Self> {
        if matrix.len() != in_channels * out_channels {
            return Err(Error::dim(
                format!("{name}.matrix"),
                in_channels * out_channels,
                matrix.len(),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(Error::dim(format!("{name}.bias"), out_channels, b.len()));
            }
        }
        if !matrix
            .iter()
            .chain(bias.iter().flatten())
            .all(|v| v.is_finite())
        {
            return Err(Error::Config(format!("{name}: non-finite weight")));
        }
        Ok(ChannelFc {
            matrix: Param::new(
                format!("{name}.matrix"),
                vec![out_channels, in_channels],
                matrix,
            ),
            bias: bias.map(|b| Param::new(format!("{name}.bias"), vec![out_channels], b)),
            in_channels,
            out_channels,
        })
    }

    pub fn identity(name: &str, channels: usize) -> Self {
        let m = (0..channels * channels)
            .map(|i| {
                if i / channels == i % channels {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        Self::from_values(name, channels, channels, m, Some(vec![T::zero(); channels]))
            .expect("identity is well formed")
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        channel_fc(x, self)
    }

    /// Accumulates parameter gradients (when `accumulate`) and returns the
    /// input gradient (when `need_dx`).
    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        accumulate: bool,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let n = x.plane_len();
        let (ci, co) = (self.in_channels, self.out_channels);
        if accumulate {
            T::gemm(
                co,
                n,
                ci,
                T::one(),
                dy.data(),
                n as isize,
                1,
                x.data(),
                1,
                n as isize,
                T::one(),
                &mut self.matrix.grad,
                ci as isize,
                1,
            );
            if let Some(b) = &mut self.bias {
                for o in 0..co {
                    b.grad[o] += dy.plane(o).iter().copied().sum();
                }
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![T::zero(); ci * n];
        T::gemm(
            ci,
            co,
            n,
            T::one(),
            &self.matrix.value,
            1,
            ci as isize,
            dy.data(),
            n as isize,
            1,
            T::zero(),
            &mut dx,
            n as isize,
            1,
        );
        Some(Tensor::from_vec(ci, x.height(), x.width(), dx).expect("shape by construction"))
    }
}

impl<T: Scalar> Parameterized<T> for ChannelFc<T> {
    fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.matrix)
            .chain(self.bias.as_ref())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.matrix)
            .chain(self.bias.as_mut())
            .collect()
    }
}

/// `out[p] = W * x[p] + b` for every pixel `p`.
pub fn channel_fc<T: Scalar>(x: &Tensor<T>, w: &ChannelFc<T>) -> Result<Tensor<T>> {
    if x.channels() != w.in_channels {
        return Err(Error::dim(
            format!("channel_fc {}", w.matrix.name),
            format!("{} input channels", w.in_channels),
            format!("{} input channels", x.channels()),
        ));
    }
    let n = x.plane_len();
    let co = w.out_channels;
    let mut out = vec![T::zero(); co * n];
    if let Some(b) = &w.bias {
        for o in 0..co {
            out[o * n..(o + 1) * n]
                .iter_mut()
                .for_each(|v| *v = b.value[o]);
        }
    }
    T::gemm(
        co,
        w.in_channels,
        n,
        T::one(),
        &w.matrix.value,
        w.in_channels as isize,
        1,
        x.data(),
        n as isize,
        1,
        T::one(),
        &mut out,
        n as isize,
        1,
    );
    Tensor::from_vec(co, x.height(), x.width(), out)
}

/// Real/imaginary encoding of the wave `amplitude * exp(i * phase)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveRepresentation<T> {
    pub real: Tensor<T>,
    pub imag: Tensor<T>,
    pub amplitude: Tensor<T>,
    pub phase: Tensor<T>,
}

pub fn estimate_amplitude<T: Scalar>(image: &Tensor<T>, w_amp: &ChannelFc<T>) -> Result<Tensor<T>> {
    channel_fc(image, w_amp)
}

pub fn estimate_phase<T: Scalar>(image: &Tensor<T>, w_phase: &ChannelFc<T>) -> Result<Tensor<T>> {
    channel_fc(image, w_phase)
}

pub fn euler_decompose<T: Scalar>(
    amplitude: Tensor<T>,
    phase: Tensor<T>,
) -> Result<WaveRepresentation<T>> {
    amplitude.ensure_shape(&phase, "euler_decompose")?;
    let real = amplitude.zip_map(&phase, |a, t| a * t.cos());
    let imag = amplitude.zip_map(&phase, |a, t| a * t.sin());
    Ok(WaveRepresentation {
        real,
        imag,
        amplitude,
        phase,
    })
}

/// Learnable amplitude and phase estimators (independent weights).
#[derive(Clone, Debug)]
pub struct InputTransform<T> {
    pub amplitude: ChannelFc<T>,
    pub phase: ChannelFc<T>,
}

impl<T: Scalar> InputTransform<T> {
    pub fn new<R: Rng>(with_bias: bool, init: InitMethod, rng: &mut R) -> Self {
        InputTransform {
            amplitude: ChannelFc::new("input.amplitude", 3, 3, with_bias, init, rng),
            phase: ChannelFc::new("input.phase", 3, 3, with_bias, init, rng),
        }
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<WaveRepresentation<T>> {
        input_transform(image, self)
    }

    /// Backpropagates gradients of the real and imaginary maps into both
    /// estimators. The image itself is not differentiated.
    pub fn backward(
        &mut self,
        image: &Tensor<T>,
        wave: &WaveRepresentation<T>,
        d_real: &Tensor<T>,
        d_imag: &Tensor<T>,
    ) {
        let n = wave.amplitude.data().len();
        let mut d_amp = Vec::with_capacity(n);
        let mut d_phase = Vec::with_capacity(n);
        for i in 0..n {
            let a = wave.amplitude.data()[i];
            let (s, c) = wave.phase.data()[i].sin_cos();
            let (gr, gi) = (d_real.data()[i], d_imag.data()[i]);
            d_amp.push(gr * c + gi * s);
            d_phase.push(a * (gi * c - gr * s));
        }
        let (ch, h, w) = wave.amplitude.shape();
        let d_amp = Tensor::from_vec(ch, h, w, d_amp).expect("same shape");
        let d_phase = Tensor::from_vec(ch, h, w, d_phase).expect("same shape");
        self.backward_polar(image, &d_amp, &d_phase);
    }

    /// Backpropagates gradients given directly on the amplitude and phase maps.
    pub fn backward_polar(&mut self, image: &Tensor<T>, d_amp: &Tensor<T>, d_phase: &Tensor<T>) {
        self.amplitude.backward(image, d_amp, true, false);
        self.phase.backward(image, d_phase, true, false);
    }
}

impl<T: Scalar> Parameterized<T> for InputTransform<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.amplitude.params();
        v.extend(self.phase.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.amplitude.params_mut();
        v.extend(self.phase.params_mut());
        v
    }
}

pub fn input_transform<T: Scalar>(
    image: &Tensor<T>,
    params: &InputTransform<T>,
) -> Result<WaveRepresentation<T>> {
    image.ensure_channels(3, "input_transform")?;
    let amplitude = estimate_amplitude(image, &params.amplitude)?;
    let phase = estimate_phase(image, &params.phase)?;
    euler_decompose(amplitude, phase)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(3, h, w, |_, _, _| rng.gen_range(0.0..1.0))
    }

    /// Per-pixel matrix-vector product with explicit loops.
    fn fc_oracle(x: &Tensor<f64>, w: &ChannelFc<f64>) -> Tensor<f64> {
        Tensor::from_fn(w.out_channels, x.height(), x.width(), |o, y, xx| {
            let mut acc = w.bias.as_ref().map_or(0.0, |b| b.value[o]);
            for i in 0..w.in_channels {
                acc += w.matrix.value[o * w.in_channels + i] * x.at(i, y, xx);
            }
            acc
        })
    }

    #[test]
    fn identity_fc_is_identity() {
        let w = ChannelFc::<f64>::identity("id", 3);
        let x = Tensor::from_vec(3, 1, 1, vec![0.2, 0.5, 0.8]).unwrap();
        assert_eq!(channel_fc(&x, &w).unwrap().data(), &[0.2, 0.5, 0.8]);
    }

    #[test]
    fn zero_fc_is_zero() {
        let w = ChannelFc::<f64>::from_values("z", 3, 3, vec![0.0; 9], Some(vec![0.0; 3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = image(&mut rng, 4, 4);
        assert!(channel_fc(&x, &w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_fc_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut w = ChannelFc::<f64>::new("w", 3, 3, true, InitMethod::KaimingUniform, &mut rng);
        w.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3];
        let x = image(&mut rng, 4, 4);
        let out = channel_fc(&x, &w).unwrap();
        assert!(out.max_abs_diff(&fc_oracle(&x, &w)) < 1e-6);

        // Amplitude and phase estimation go through the same operator.
        assert!(
            estimate_amplitude(&x, &w)
                .unwrap()
                .max_abs_diff(&fc_oracle(&x, &w))
                < 1e-6
        );
        assert!(
            estimate_phase(&x, &w)
                .unwrap()
                .max_abs_diff(&fc_oracle(&x, &w))
                < 1e-6
        );
    }

    #[test]
    fn fc_channel_mismatch_names_counts() {
        let w = ChannelFc::<f64>::identity("id", 3);
        let x = Tensor::<f64>::zeros(4, 2, 2);
        let err = channel_fc(&x, &w).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("3 input channels") && msg.contains("4 input channels"),
            "{msg}"
        );
    }

    #[test]
    fn fc_can_change_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = ChannelFc::<f64>::new("w", 9, 3, true, InitMethod::XavierNormal, &mut rng);
        let x = Tensor::<f64>::from_fn(9, 5, 7, |c, y, x| (c + y + x) as f64);
        assert_eq!(channel_fc(&x, &w).unwrap().shape(), (3, 5, 7));
    }

    #[test]
    fn amplitude_of_constant_gray_is_row_sum() {
        let m = vec![0.1, 0.2, 0.3, -1.0, 0.5, 0.25, 2.0, 0.0, 0.0];
        let b = vec![0.05, 0.0, -0.5];
        let w = ChannelFc::<f64>::from_values("a", 3, 3, m.clone(), Some(b.clone())).unwrap();
        let x = Tensor::full(3, 6, 6, 0.5);
        let amp = estimate_amplitude(&x, &w).unwrap();
        for o in 0..3 {
            let s: f64 = m[o * 3..o * 3 + 3].iter().sum();
            for &v in amp.plane(o) {
                assert!((v - (0.5 * s + b[o])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_phase_gives_zero_imag() {
        let w = ChannelFc::<f64>::from_values("p", 3, 3, vec![0.0; 9], Some(vec![0.0; 3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = image(&mut rng, 4, 4);
        let phase = estimate_phase(&x, &w).unwrap();
        assert!(phase.data().iter().all(|&v| v == 0.0));
        let wave = euler_decompose(x.clone(), phase).unwrap();
        assert!(wave.imag.data().iter().all(|&v| v == 0.0));
        assert_eq!(wave.real, x);
    }

    #[test]
    fn quarter_turn_phase_kills_cosine() {
        let w = ChannelFc::<f64>::from_values("p", 3, 3, vec![0.0; 9], Some(vec![PI / 2.0; 3]))
            .unwrap();
        let x = Tensor::full(3, 3, 3, 0.7);
        let phase = estimate_phase(&x, &w).unwrap();
        assert!(phase.data().iter().all(|v| v.cos().abs() < 1e-15));
    }

    #[test]
    fn euler_exact_values() {
        let amp = Tensor::<f64>::full(1, 1, 1, 1.0);
        let ph = Tensor::full(1, 1, 1, PI / 2.0);
        let wave = euler_decompose(amp, ph).unwrap();
        assert!(wave.real.data()[0].abs() < 1e-7);
        assert!((wave.imag.data()[0] - 1.0).abs() < 1e-15);

        let amp = Tensor::<f64>::full(1, 1, 1, 2.0);
        let ph = Tensor::full(1, 1, 1, PI / 3.0);
        let wave = euler_decompose(amp, ph).unwrap();
        assert!((wave.real.data()[0] - 1.0).abs() < 1e-12);
        assert!((wave.imag.data()[0] - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn euler_shape_mismatch() {
        let a = Tensor::<f64>::zeros(3, 2, 2);
        let p = Tensor::<f64>::zeros(3, 2, 3);
        assert!(matches!(
            euler_decompose(a, p),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn identity_amplitude_zero_phase_passes_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = InputTransform {
            amplitude: ChannelFc::<f64>::identity("a", 3),
            phase: ChannelFc::from_values("p", 3, 3, vec![0.0; 9], Some(vec![0.0; 3])).unwrap(),
        };
        let x = image(&mut rng, 5, 5);
        let wave = t.forward(&x).unwrap();
        assert_eq!(wave.real, x);
        assert!(wave.imag.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_sized_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = InputTransform::<f32>::new(true, InitMethod::KaimingUniform, &mut rng);
        let x = Tensor::<f32>::from_fn(3, 120, 120, |c, y, x| ((c + y * x) % 7) as f32 / 7.0);
        let wave = t.forward(&x).unwrap();
        assert_eq!(wave.real.shape(), (3, 120, 120));
        assert_eq!(wave.imag.shape(), (3, 120, 120));
        assert_eq!(wave.amplitude.shape(), (3, 120, 120));
        assert_eq!(wave.phase.shape(), (3, 120, 120));
        // Repeated evaluation is bitwise stable.
        assert_eq!(t.forward(&x).unwrap(), wave);
    }

    #[test]
    fn input_transform_rejects_non_rgb() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = InputTransform::<f64>::new(true, InitMethod::KaimingUniform, &mut rng);
        assert!(t.forward(&Tensor::zeros(1, 4, 4)).is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut t = InputTransform::<f64>::new(true, InitMethod::KaimingUniform, &mut rng);
        for p in t.params_mut() {
            p.value
                .iter_mut()
                .for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
        let x = image(&mut rng, 4, 4);
        let cr = Tensor::from_fn(3, 4, 4, |_, _, _| rng.gen_range(-1.0..1.0));
        let ci = Tensor::from_fn(3, 4, 4, |_, _, _| rng.gen_range(-1.0..1.0));
        let loss = |t: &InputTransform<f64>| {
            let w = t.forward(&x).unwrap();
            w.real.mul(&w.real).mul(&cr).sum() + w.imag.mul(&ci).sum()
        };
        let wave = t.forward(&x).unwrap();
        let d_real = wave.real.mul(&cr).scale(2.0);
        t.backward(&x, &wave, &d_real, &ci);
        let analytic: Vec<Vec<f64>> = t.params().iter().map(|p| p.grad.clone()).collect();
        let h = 1e-4;
        for (pi, grads) in analytic.iter().enumerate() {
            for (i, &g) in grads.iter().enumerate() {
                let mut tp = t.clone();
                tp.params_mut()[pi].value[i] += h;
                let mut tm = t.clone();
                tm.params_mut()[pi].value[i] -= h;
                let fd = (loss(&tp) - loss(&tm)) / (2.0 * h);
                let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
                assert!(rel < 1e-3, "param {pi}[{i}]: analytic {g}, fd {fd}");
            }
        }
    }

    proptest! {
        #[test]
        fn euler_identities(a in -50.0f64..50.0, t in -100.0f64..100.0) {
            let wave = euler_decompose(
                Tensor::full(1, 1, 1, a),
                Tensor::full(1, 1, 1, t),
            ).unwrap();
            let (r, i) = (wave.real.data()[0], wave.imag.data()[0]);
            prop_assert!((r * r + i * i - a * a).abs() < 1e-5);
            prop_assert!((r * t.sin() - i * t.cos()).abs() < 1e-5);
        }

        #[test]
        fn channel_fc_is_linear_without_bias(
            seed in 0u64..1000,
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = ChannelFc::<f64>::new("w", 3, 3, false, InitMethod::KaimingUniform, &mut rng);
            let x = image(&mut rng, 3, 3);
            let y = image(&mut rng, 3, 3);
            let lhs = channel_fc(&x.scale(a).add(&y.scale(b)), &w).unwrap();
            let rhs = channel_fc(&x, &w).unwrap().scale(a)
                .add(&channel_fc(&y, &w).unwrap().scale(b));
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-6);
        }
    }
}
