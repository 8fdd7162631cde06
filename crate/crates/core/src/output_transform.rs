//! Output transform: maps the backbone-restored real/imaginary maps back to
//! image space.
//!
//! Pipeline for restored maps `r`, `i` and degraded input `x`:
//!
//! ```text
//! wave  = r + i
//! fused = FC9->3([r, i, wave])
//! agg   = FC3->3(fused + x)
//! h     = MLP_n(...MLP_1(agg))        MLP(h) = h + tfc2(gelu(tfc1(h)))
//! g     = sigmoid(FC3->3(h))
//! out   = clamp(g * fused + (1 - g) * x, 0, 1)
//! ```
//!
//! With [`GateSource::Aggregated`] the gate mixes `agg` instead of `fused`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu, gelu_grad, sigmoid, InitMethod, Param, Parameterized};
use crate::tensor::{Scalar, Tensor};
use crate::wave_transforms::{channel_fc, ChannelFc};

/// Which map the per-pixel gate blends with the degraded input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateSource {
    #[default]
    Fused,
    Aggregated,
}

/// Elementwise spatial weight, one `H x W` map per channel.
#[derive(Clone, Debug)]
pub struct TokenFc<T> {
    pub weight: Param<T>,
}

pub type TokenFcWeights<T> = TokenFc<T>;

impl<T: Scalar> TokenFc<T> {
    /// All-ones weights (the identity map).
    pub fn ones(name: &str, channels: usize, height: usize, width: usize) -> Self {
        TokenFc {
            weight: Param::new(
                format!("{name}.weight"),
                vec![channels, height, width],
                vec![T::one(); channels * height * width],
            ),
        }
    }

    pub fn from_tensor(name: &str, t: &Tensor<T>) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::Config(format!("{name}: non-finite token weight")));
        }
        let (c, h, w) = t.shape();
        Ok(TokenFc {
            weight: Param::new(format!("{name}.weight"), vec![c, h, w], t.data().to_vec()),
        })
    }

    pub fn spatial_size(&self) -> (usize, usize) {
        (self.weight.shape[1], self.weight.shape[2])
    }

    pub fn as_tensor(&self) -> Tensor<T> {
        let s = &self.weight.shape;
        Tensor::from_vec(s[0], s[1], s[2], self.weight.value.clone()).expect("param shape")
    }

    /// Bilinear resample of the weight map (half-pixel centres).
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let src = self.as_tensor();
        let (c, sh, sw) = src.shape();
        let sample = |n: usize, sn: usize, i: usize| -> (usize, usize, f64) {
            let pos = ((i as f64 + 0.5) * sn as f64 / n as f64 - 0.5).clamp(0.0, (sn - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(sn - 1);
            (lo, hi, pos - lo as f64)
        };
        let t = Tensor::from_fn(c, height, width, |ch, y, x| {
            let (y0, y1, fy) = sample(height, sh, y);
            let (x0, x1, fx) = sample(width, sw, x);
            let v = |yy, xx| src.at(ch, yy, xx).to_f64().unwrap_or(f64::NAN);
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            T::lit(top * (1.0 - fy) + bot * fy)
        });
        TokenFc {
            weight: Param::new(
                self.weight.name.clone(),
                vec![c, height, width],
                t.into_vec(),
            ),
        }
    }
}

/// `out = w ⊙ x`, per channel.
pub fn token_fc<T: Scalar>(x: &Tensor<T>, w: &TokenFc<T>) -> Result<Tensor<T>> {
    let ws = &w.weight.shape;
    if x.shape() != (ws[0], ws[1], ws[2]) {
        return Err(Error::dim(
            format!("token_fc {}", w.weight.name),
            format!("({},{},{})", ws[0], ws[1], ws[2]),
            format!("{:?}", x.shape()),
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(&w.weight.value)
        .map(|(&a, &b)| a * b)
        .collect();
    Tensor::from_vec(x.channels(), x.height(), x.width(), data)
}

/// `wave = real + imag`.
pub fn recombine<T: Scalar>(real_r: &Tensor<T>, imag_r: &Tensor<T>) -> Result<Tensor<T>> {
    real_r.ensure_shape(imag_r, "recombine")?;
    Ok(real_r.add(imag_r))
}

/// Two token-FC operations with a GELU between them, plus a skip.
#[derive(Clone, Debug)]
pub struct MlpModule<T> {
    pub first: TokenFc<T>,
    pub second: TokenFc<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputTransformConfig {
    pub n_mlp: usize,
    pub gate_source: GateSource,
    /// Spatial size of the token-FC weights (the training patch size).
    pub patch: usize,
    pub channel_fc_bias: bool,
}

impl Default for OutputTransformConfig {
    fn default() -> Self {
        OutputTransformConfig {
            n_mlp: 2,
            gate_source: GateSource::Fused,
            patch: 120,
            channel_fc_bias: true,
        }
    }
}

impl OutputTransformConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mlp < 1 {
            return Err(Error::Config("n_mlp must be >= 1".into()));
        }
        if self.patch < 1 {
            return Err(Error::Config("patch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct OutputTransform<T> {
    pub fuse: ChannelFc<T>,
    pub aggregate: ChannelFc<T>,
    pub mlps: Vec<MlpModule<T>>,
    pub gate: ChannelFc<T>,
    pub gate_source: GateSource,
}

pub type OutputTransformParams<T> = OutputTransform<T>;

/// Intermediate maps kept for the backward pass.
#[derive(Clone, Debug)]
pub struct OutputTrace<T> {
    pub concat: Tensor<T>,
    pub fused: Tensor<T>,
    pub resid: Tensor<T>,
    pub agg: Tensor<T>,
    /// Inputs of each MLP module followed by the final map (`n_mlp + 1` entries).
    pub hs: Vec<Tensor<T>>,
    /// Pre-activation of each MLP module.
    pub pre_act: Vec<Tensor<T>>,
    pub gate: Tensor<T>,
    pub pre_clamp: Tensor<T>,
}

impl<T: Scalar> OutputTransform<T> {
    pub fn new<R: Rng>(cfg: &OutputTransformConfig, init: InitMethod, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.channel_fc_bias;
        let p = cfg.patch;
        Ok(OutputTransform {
            fuse: ChannelFc::new("output.fuse", 9, 3, b, init, rng),
            aggregate: ChannelFc::new("output.aggregate", 3, 3, b, init, rng),
            mlps: (0..cfg.n_mlp)
                .map(|i| MlpModule {
                    first: TokenFc::ones(&format!("output.mlp.{i}.token0"), 3, p, p),
                    second: TokenFc::ones(&format!("output.mlp.{i}.token1"), 3, p, p),
                })
                .collect(),
            gate: ChannelFc::new("output.gate", 3, 3, true, init, rng),
            gate_source: cfg.gate_source,
        })
    }

    pub fn n_mlp(&self) -> usize {
        self.mlps.len()
    }

    pub fn spatial_size(&self) -> (usize, usize) {
        self.mlps[0].first.spatial_size()
    }

    /// Copy with every token-FC weight bilinearly resampled to `height x width`.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let mut out = self.clone();
        for m in &mut out.mlps {
            m.first = m.first.resized(height, width);
            m.second = m.second.resized(height, width);
        }
        out
    }

    pub fn forward(
        &self,
        real_r: &Tensor<T>,
        imag_r: &Tensor<T>,
        input: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        Ok(self.forward_traced(real_r, imag_r, input)?.0)
    }

    pub fn forward_traced(
        &self,
        real_r: &Tensor<T>,
        imag_r: &Tensor<T>,
        input: &Tensor<T>,
    ) -> Result<(Tensor<T>, OutputTrace<T>)> {
        input.ensure_channels(3, "output_transform/input")?;
        input.ensure_shape(real_r, "output_transform/real")?;
        let wave = recombine(real_r, imag_r).map_err(|e| e.in_stage("recombine"))?;
        let concat = Tensor::concat_channels(&[real_r, imag_r, &wave])?;
        let fused = channel_fc(&concat, &self.fuse).map_err(|e| e.in_stage("fuse"))?;
        let resid = fused.add(input);
        let agg = channel_fc(&resid, &self.aggregate).map_err(|e| e.in_stage("aggregate"))?;
        let mut hs = vec![agg.clone()];
        let mut pre_act = Vec::with_capacity(self.mlps.len());
        for (k, m) in self.mlps.iter().enumerate() {
            let h = &hs[k];
            let a = token_fc(h, &m.first).map_err(|e| e.in_stage("mlp"))?;
            let v = token_fc(&a.map(gelu), &m.second).map_err(|e| e.in_stage("mlp"))?;
            let next = h.add(&v);
            pre_act.push(a);
            hs.push(next);
        }
        let logits = channel_fc(hs.last().expect("n_mlp >= 1"), &self.gate)
            .map_err(|e| e.in_stage("gate"))?;
        let gate = logits.map(sigmoid);
        let src = match self.gate_source {
            GateSource::Fused => &fused,
            GateSource::Aggregated => &agg,
        };
        let mixed: Vec<T> = gate
            .data()
            .iter()
            .zip(src.data())
            .zip(input.data())
            .map(|((&g, &s), &x)| g * s + (T::one() - g) * x)
            .collect();
        let (c, h, w) = input.shape();
        let pre_clamp = Tensor::from_vec(c, h, w, mixed)?;
        let out = pre_clamp.clamp01();
        Ok((
            out,
            OutputTrace {
                concat,
                fused,
                resid,
                agg,
                hs,
                pre_act,
                gate,
                pre_clamp,
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradients of the
    /// restored real and imaginary maps.
    pub fn backward(
        &mut self,
        trace: &OutputTrace<T>,
        input: &Tensor<T>,
        d_out: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>) {
        let zero = T::zero();
        let one = T::one();
        let d_pre = trace
            .pre_clamp
            .zip_map(d_out, |p, g| if p > zero && p < one { g } else { zero });
        let src = match self.gate_source {
            GateSource::Fused => &trace.fused,
            GateSource::Aggregated => &trace.agg,
        };
        let n = d_pre.data().len();
        let mut d_logits = Vec::with_capacity(n);
        let mut d_src = Vec::with_capacity(n);
        for i in 0..n {
            let g = trace.gate.data()[i];
            let dp = d_pre.data()[i];
            let dg = dp * (src.data()[i] - input.data()[i]);
            d_logits.push(dg * g * (one - g));
            d_src.push(dp * g);
        }
        let (c, h, w) = input.shape();
        let d_logits = Tensor::from_vec(c, h, w, d_logits).expect("shape");
        let d_src = Tensor::from_vec(c, h, w, d_src).expect("shape");

        let last = trace.hs.last().expect("n_mlp >= 1");
        let mut dh = self
            .gate
            .backward(last, &d_logits, true, true)
            .expect("dx requested");
        for k in (0..self.mlps.len()).rev() {
            let m = &mut self.mlps[k];
            let a = &trace.pre_act[k];
            let hk = &trace.hs[k];
            let mut d_prev = dh.clone();
            for i in 0..dh.data().len() {
                let dv = dh.data()[i];
                let av = a.data()[i];
                let u = gelu(av);
                let w2 = m.second.weight.value[i];
                m.second.weight.grad[i] += dv * u;
                let da = dv * w2 * gelu_grad(av);
                m.first.weight.grad[i] += da * hk.data()[i];
                d_prev.data_mut()[i] += da * m.first.weight.value[i];
            }
            dh = d_prev;
        }
        let mut d_agg = dh;
        if self.gate_source == GateSource::Aggregated {
            d_agg.add_assign(&d_src);
        }
        let mut d_fused = self
            .aggregate
            .backward(&trace.resid, &d_agg, true, true)
            .expect("dx requested");
        if self.gate_source == GateSource::Fused {
            d_fused.add_assign(&d_src);
        }
        let d_cat = self
            .fuse
            .backward(&trace.concat, &d_fused, true, true)
            .expect("dx requested");
        let parts = d_cat.split_channels(&[3, 3, 3]);
        let d_real = parts[0].add(&parts[2]);
        let d_imag = parts[1].add(&parts[2]);
        (d_real, d_imag)
    }
}

impl<T: Scalar> Parameterized<T> for OutputTransform<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.fuse.params();
        v.extend(self.aggregate.params());
        for m in &self.mlps {
            v.push(&m.first.weight);
            v.push(&m.second.weight);
        }
        v.extend(self.gate.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.fuse.params_mut();
        v.extend(self.aggregate.params_mut());
        for m in &mut self.mlps {
            v.push(&mut m.first.weight);
            v.push(&mut m.second.weight);
        }
        v.extend(self.gate.params_mut());
        v
    }
}

pub fn output_transform<T: Scalar>(
    real_r: &Tensor<T>,
    imag_r: &Tensor<T>,
    input_image: &Tensor<T>,
    params: &OutputTransform<T>,
) -> Result<Tensor<T>> {
    params.forward(real_r, imag_r, input_image)
}
