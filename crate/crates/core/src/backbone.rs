//! The Res12 restoration network and the handle through which the
//! reprogramming pipeline sees any frozen (or fine-tuned) backbone.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, Conv2d, InitMethod, Param, Parameterized};
use crate::tensor::{Scalar, Tensor};

/// Layer layout of Res12: six plain 3x3 convolutions around a trunk of
/// two-convolution residual blocks.
///
/// `head_tail_widths` lists the output channels of the six plain convs in
/// order; the trunk sits between the third and fourth, so entry 2 must equal
/// `trunk_width`, and the last entry must be 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Res12Config {
    pub trunk_width: usize,
    pub n_blocks: usize,
    pub head_tail_widths: [usize; 6],
    /// Width of the hidden map inside each residual block.
    pub block_inner_width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Multiplier on the residual branch before the skip addition.
    pub residual_scale: f64,
    /// Adds the network input to its output.
    pub global_skip: bool,
}

impl Default for Res12Config {
    fn default() -> Self {
        Res12Config {
            trunk_width: 64,
            n_blocks: 12,
            head_tail_widths: [16, 64, 64, 64, 32, 3],
            block_inner_width: 32,
            kernel: 3,
            stride: 1,
            padding: 1,
            residual_scale: 0.1,
            global_skip: true,
        }
    }
}

impl Res12Config {
    /// A narrow instance with the same topology, for desk-scale runs.
    pub fn tiny() -> Self {
        Res12Config {
            trunk_width: 16,
            head_tail_widths: [8, 16, 16, 16, 8, 3],
            block_inner_width: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_blocks < 1 {
            problems.push("n_blocks must be >= 1".to_string());
        }
        if self.trunk_width < 1 || self.block_inner_width < 1 {
            problems.push("widths must be >= 1".to_string());
        }
        if self.head_tail_widths.iter().any(|&w| w < 1) {
            problems.push("head_tail_widths entries must be >= 1".to_string());
        }
        if self.head_tail_widths[2] != self.trunk_width {
            problems.push(format!(
                "head_tail_widths[2] = {} must equal trunk_width = {}",
                self.head_tail_widths[2], self.trunk_width
            ));
        }
        if self.head_tail_widths[5] != 3 {
            problems.push("last head/tail width must be 3 (RGB output)".to_string());
        }
        if (self.kernel, self.stride, self.padding) != (3, 1, 1) {
            problems.push("kernel/stride/padding are fixed at 3/1/1".to_string());
        }
        if !self.residual_scale.is_finite() {
            problems.push("residual_scale must be finite".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid Res12Config: {}",
                problems.join("; ")
            )))
        }
    }

    /// Number of 3x3 convolutions on the longest input-to-output path.
    pub fn depth(&self) -> usize {
        6 + 2 * self.n_blocks
    }
}

/// Intermediate maps saved by a traced forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace<T> {
    maps: Vec<Tensor<T>>,
}

/// A restoration network usable as a reprogramming backbone.
pub trait RestorationNet<T: Scalar>: Send + Sync + fmt::Debug {
    fn architecture(&self) -> &'static str;

    /// Architecture hyper-parameters, stored in checkpoint metadata.
    fn config_json(&self) -> serde_json::Value;

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    fn forward_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)>;

    /// Returns the input gradient; accumulates parameter gradients when
    /// `param_grads` is set.
    fn backward(&mut self, trace: &Trace<T>, dy: &Tensor<T>, param_grads: bool) -> Tensor<T>;

    fn params(&self) -> Vec<&Param<T>>;

    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn clone_box(&self) -> Box<dyn RestorationNet<T>>;
}

impl<T: Scalar> Clone for Box<dyn RestorationNet<T>> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

#[derive(Clone, Debug)]
struct ResBlock<T> {
    first: Conv2d<T>,
    second: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct Res12<T> {
    cfg: Res12Config,
    head: [Conv2d<T>; 3],
    blocks: Vec<ResBlock<T>>,
    tail: [Conv2d<T>; 3],
}

impl<T: Scalar> Res12<T> {
    pub fn new(cfg: &Res12Config, init: InitMethod, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = cfg.head_tail_widths;
        let mut conv = |name: &str, cin: usize, cout: usize| {
            Conv2d::new(
                name,
                cin,
                cout,
                cfg.kernel,
                cfg.stride,
                cfg.padding,
                init,
                &mut rng,
            )
        };
        let head = [
            conv("head.0", 3, w[0]),
            conv("head.1", w[0], w[1]),
            conv("head.2", w[1], w[2]),
        ];
        let blocks = (0..cfg.n_blocks)
            .map(|i| ResBlock {
                first: conv(
                    &format!("block.{i}.0"),
                    cfg.trunk_width,
                    cfg.block_inner_width,
                ),
                second: conv(
                    &format!("block.{i}.1"),
                    cfg.block_inner_width,
                    cfg.trunk_width,
                ),
            })
            .collect();
        let tail = [
            conv("tail.0", w[2], w[3]),
            conv("tail.1", w[3], w[4]),
            conv("tail.2", w[4], w[5]),
        ];
        Ok(Res12 {
            cfg: cfg.clone(),
            head,
            blocks,
            tail,
        })
    }

    pub fn config(&self) -> &Res12Config {
        &self.cfg
    }

    fn run(&self, x: &Tensor<T>, mut keep: Option<&mut Vec<Tensor<T>>>) -> Result<Tensor<T>> {
        x.ensure_channels(3, "res12 input")?;
        let mut push = |t: &Tensor<T>| {
            if let Some(k) = keep.as_deref_mut() {
                k.push(t.clone());
            }
        };
        let scale = T::lit(self.cfg.residual_scale);
        // Saved order: pre0, pre1, t0, [a_i, t_{i+1}]*, pre3, pre4
        let pre0 = self.head[0].forward(x)?;
        push(&pre0);
        let pre1 = self.head[1].forward(&relu(&pre0))?;
        push(&pre1);
        let mut t = self.head[2].forward(&relu(&pre1))?;
        push(&t);
        for b in &self.blocks {
            let a = b.first.forward(&t)?;
            push(&a);
            let v = b.second.forward(&relu(&a))?;
            t = t.zip_map(&v, |ti, vi| ti + scale * vi);
            push(&t);
        }
        let pre3 = self.tail[0].forward(&t)?;
        push(&pre3);
        let pre4 = self.tail[1].forward(&relu(&pre3))?;
        push(&pre4);
        let mut out = self.tail[2].forward(&relu(&pre4))?;
        if self.cfg.global_skip {
            out.add_assign(x);
        }
        Ok(out)
    }
}

impl<T: Scalar> RestorationNet<T> for Res12<T> {
    fn architecture(&self) -> &'static str {
        "res12"
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serializes")
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(x, None)
    }

    fn forward_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        let mut maps = vec![x.clone()];
        let out = self.run(x, Some(&mut maps))?;
        Ok((out, Trace { maps }))
    }

    fn backward(&mut self, trace: &Trace<T>, dy: &Tensor<T>, param_grads: bool) -> Tensor<T> {
        let m = &trace.maps;
        let nb = self.blocks.len();
        let x = &m[0];
        let (pre0, pre1, t0) = (&m[1], &m[2], &m[3]);
        let t_at = |i: usize| if i == 0 { t0 } else { &m[3 + 2 * i] };
        let a_at = |i: usize| &m[4 + 2 * i];
        let pre3 = &m[4 + 2 * nb];
        let pre4 = &m[5 + 2 * nb];
        let scale = T::lit(self.cfg.residual_scale);

        let g = self.tail[2]
            .backward(&relu(pre4), dy, param_grads, true)
            .expect("dx requested");
        let g = relu_backward(pre4, &g);
        let g = self.tail[1]
            .backward(&relu(pre3), &g, param_grads, true)
            .expect("dx requested");
        let g = relu_backward(pre3, &g);
        let mut gt = self.tail[0]
            .backward(t_at(nb), &g, param_grads, true)
            .expect("dx requested");
        for i in (0..nb).rev() {
            let a = a_at(i);
            let gv = gt.scale(scale);
            let b = &mut self.blocks[i];
            let gr = b
                .second
                .backward(&relu(a), &gv, param_grads, true)
                .expect("dx");
            let ga = relu_backward(a, &gr);
            let gx = b
                .first
                .backward(t_at(i), &ga, param_grads, true)
                .expect("dx");
            gt.add_assign(&gx);
        }
        let g = self.head[2]
            .backward(&relu(pre1), &gt, param_grads, true)
            .expect("dx requested");
        let g = relu_backward(pre1, &g);
        let g = self.head[1]
            .backward(&relu(pre0), &g, param_grads, true)
            .expect("dx requested");
        let g = relu_backward(pre0, &g);
        let mut dx = self.head[0]
            .backward(x, &g, param_grads, true)
            .expect("dx requested");
        if self.cfg.global_skip {
            dx.add_assign(dy);
        }
        dx
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.head.iter().flat_map(|c| c.params()).collect();
        for b in &self.blocks {
            v.extend(b.first.params());
            v.extend(b.second.params());
        }
        v.extend(self.tail.iter().flat_map(|c| c.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.head.iter_mut().flat_map(|c| c.params_mut()).collect();
        for b in &mut self.blocks {
            v.extend(b.first.params_mut());
            v.extend(b.second.params_mut());
        }
        v.extend(self.tail.iter_mut().flat_map(|c| c.params_mut()));
        v
    }

    fn clone_box(&self) -> Box<dyn RestorationNet<T>> {
        Box::new(self.clone())
    }
}

/// How a backbone's parameters came to be.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneOrigin {
    Init(InitMethod),
    Trained,
}

impl fmt::Display for BackboneOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneOrigin::Init(m) => write!(f, "{m}"),
            BackboneOrigin::Trained => f.write_str("trained"),
        }
    }
}

/// A backbone together with its freeze flag and provenance.
#[derive(Clone, Debug)]
pub struct BackboneHandle<T: Scalar = f32> {
    net: Box<dyn RestorationNet<T>>,
    frozen: bool,
    origin: BackboneOrigin,
}

impl<T: Scalar> BackboneHandle<T> {
    pub fn new(net: Box<dyn RestorationNet<T>>, origin: BackboneOrigin) -> Self {
        BackboneHandle {
            net,
            frozen: true,
            origin,
        }
    }

    pub fn net(&self) -> &dyn RestorationNet<T> {
        self.net.as_ref()
    }

    pub fn net_mut(&mut self) -> &mut dyn RestorationNet<T> {
        self.net.as_mut()
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn origin(&self) -> BackboneOrigin {
        self.origin
    }

    pub fn set_origin(&mut self, origin: BackboneOrigin) {
        self.origin = origin;
    }

    pub fn set_frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn freeze(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.forward(x)
    }

    pub fn forward_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        self.net.forward_traced(x)
    }

    /// Input gradient; parameter gradients are accumulated only when unfrozen.
    pub fn backward(&mut self, trace: &Trace<T>, dy: &Tensor<T>) -> Tensor<T> {
        let accumulate = !self.frozen;
        self.net.backward(trace, dy, accumulate)
    }
}

impl<T: Scalar> Parameterized<T> for BackboneHandle<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.net.params_mut()
    }
}

pub fn build_res12<T: Scalar>(
    cfg: &Res12Config,
    init: InitMethod,
    seed: u64,
) -> Result<BackboneHandle<T>> {
    Ok(BackboneHandle::new(
        Box::new(Res12::new(cfg, init, seed)?),
        BackboneOrigin::Init(init),
    ))
}

pub fn forward<T: Scalar>(handle: &BackboneHandle<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    handle.forward(x)
}

pub fn set_frozen<T: Scalar>(handle: BackboneHandle<T>, frozen: bool) -> BackboneHandle<T> {
    handle.set_frozen(frozen)
}

type Builder<T> = Box<
    dyn Fn(&serde_json::Value, InitMethod, u64) -> Result<Box<dyn RestorationNet<T>>> + Send + Sync,
>;

/// Name-to-constructor table for backbones that can be reprogrammed.
pub struct BackboneRegistry<T: Scalar> {
    builders: BTreeMap<String, Builder<T>>,
}

impl<T: Scalar> Default for BackboneRegistry<T> {
    fn default() -> Self {
        let mut r = BackboneRegistry {
            builders: BTreeMap::new(),
        };
        r.register("res12", |cfg, init, seed| {
            let cfg: Res12Config = serde_json::from_value(cfg.clone())
                .map_err(|e| Error::Config(format!("res12 config: {e}")))?;
            Ok(Box::new(Res12::<T>::new(&cfg, init, seed)?) as Box<dyn RestorationNet<T>>)
        });
        r
    }
}

impl<T: Scalar> BackboneRegistry<T> {
    pub fn register<F>(&mut self, name: &str, builder: F)
    where
        F: Fn(&serde_json::Value, InitMethod, u64) -> Result<Box<dyn RestorationNet<T>>>
            + Send
            + Sync
            + 'static,
    {
        self.builders.insert(name.to_string(), Box::new(builder));
    }

    pub fn names(&self) -> Vec<&str> {
        self.builders.keys().map(String::as_str).collect()
    }

    pub fn build(
        &self,
        name: &str,
        cfg: &serde_json::Value,
        init: InitMethod,
        seed: u64,
    ) -> Result<BackboneHandle<T>> {
        let b = self.builders.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown backbone `{name}`; registered: {}",
                self.names().join(", ")
            ))
        })?;
        Ok(BackboneHandle::new(
            b(cfg, init, seed)?,
            BackboneOrigin::Init(init),
        ))
    }
}

/// Prefix under which backbone arrays are stored in checkpoints.
pub const CHECKPOINT_PREFIX: &str = "backbone.";

/// Copies the `backbone.*` arrays of `ckpt` into `handle`, checking names and shapes.
pub fn restore_from_checkpoint(handle: &mut BackboneHandle<f32>, ckpt: &Checkpoint) -> Result<()> {
    for p in handle.params_mut() {
        let key = format!("{CHECKPOINT_PREFIX}{}", p.name);
        let arr = ckpt.array(&key).ok_or_else(|| Error::Schema {
            array: key.clone(),
            expected: format!("{:?}", p.shape),
            found: "missing".into(),
        })?;
        p.assign(&arr.shape, arr.data.clone())
            .map_err(|_| Error::Schema {
                array: key.clone(),
                expected: format!("{:?}", p.shape),
                found: format!("{:?}", arr.shape),
            })?;
    }
    Ok(())
}

/// Loads a trained Res12 with the given layout from a checkpoint file.
pub fn load_pretrained(path: &Path, cfg: &Res12Config) -> Result<BackboneHandle<f32>> {
    let ckpt = checkpoint::load_checkpoint(path)?;
    let mut handle = build_res12::<f32>(cfg, InitMethod::KaimingUniform, 0)?;
    restore_from_checkpoint(&mut handle, &ckpt)?;
    handle.set_origin(BackboneOrigin::Trained);
    Ok(handle)
}

/// Loads a trained backbone using the layout recorded in the checkpoint metadata.
pub fn load_pretrained_auto(path: &Path) -> Result<BackboneHandle<f32>> {
    let ckpt = checkpoint::load_checkpoint(path)?;
    let cfg: Res12Config = serde_json::from_value(ckpt.meta.backbone.config.clone())
        .map_err(|e| Error::Corrupt(format!("backbone config in metadata: {e}")))?;
    let mut handle = build_res12::<f32>(&cfg, InitMethod::KaimingUniform, 0)?;
    restore_from_checkpoint(&mut handle, &ckpt)?;
    handle.set_origin(BackboneOrigin::Trained);
    Ok(handle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg(n_blocks: usize) -> Res12Config {
        Res12Config {
            trunk_width: 4,
            n_blocks,
            head_tail_widths: [3, 4, 4, 4, 3, 3],
            block_inner_width: 2,
            ..Default::default()
        }
    }

    #[test]
    fn default_parameter_count_in_band() {
        let h = build_res12::<f32>(&Res12Config::default(), InitMethod::KaimingUniform, 0).unwrap();
        let n = h.param_count();
        assert_eq!(n, 546_435);
        assert!((500_000..=900_000).contains(&n));
    }

    #[test]
    fn default_forward_preserves_patch_shape() {
        let h = build_res12::<f32>(&Res12Config::default(), InitMethod::KaimingUniform, 1).unwrap();
        let x = Tensor::<f32>::from_fn(3, 120, 120, |c, y, x| {
            ((c * 7 + y + 3 * x) % 11) as f32 / 11.0
        });
        let y = forward(&h, &x).unwrap();
        assert_eq!(y.shape(), (3, 120, 120));
        assert!(y.is_finite());
    }

    #[test]
    fn deterministic_construction() {
        let cfg = Res12Config::tiny();
        let a = build_res12::<f32>(&cfg, InitMethod::XavierNormal, 7).unwrap();
        let b = build_res12::<f32>(&cfg, InitMethod::XavierNormal, 7).unwrap();
        let c = build_res12::<f32>(&cfg, InitMethod::XavierNormal, 8).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = Res12Config::default();
        cfg.n_blocks = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = Res12Config::default();
        cfg.kernel = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = Res12Config::default();
        cfg.head_tail_widths[5] = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let h = build_res12::<f64>(&small_cfg(1), InitMethod::KaimingUniform, 0).unwrap();
        assert!(matches!(
            h.forward(&Tensor::zeros(4, 5, 5)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut cfg = small_cfg(2);
        cfg.global_skip = false;
        let mut h = build_res12::<f64>(&cfg, InitMethod::KaimingUniform, 0).unwrap();
        for p in h.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let y = h.forward(&Tensor::zeros(3, 6, 6)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_does_not_mutate_frozen_handle() {
        let h = build_res12::<f32>(&Res12Config::tiny(), InitMethod::KaimingUniform, 3).unwrap();
        let before = h.fingerprint();
        let _ = h.forward(&Tensor::full(3, 16, 16, 0.5)).unwrap();
        assert!(h.frozen());
        assert_eq!(before, h.fingerprint());
    }

    #[test]
    fn freeze_toggle_round_trips() {
        let h = build_res12::<f32>(&Res12Config::tiny(), InitMethod::KaimingUniform, 3).unwrap();
        let original = h.frozen();
        let h = set_frozen(h, !original);
        assert_eq!(h.frozen(), !original);
        let h = set_frozen(h, original);
        assert_eq!(h.frozen(), original);
    }

    /// Scalar convolution with zero padding, used to unroll a reduced network by hand.
    fn conv3(w: &[f64], b: &[f64], cin: usize, cout: usize, x: &Tensor<f64>) -> Tensor<f64> {
        let (h, wd) = (x.height(), x.width());
        Tensor::from_fn(cout, h, wd, |o, y, xx| {
            let mut acc = b[o];
            for i in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        let ix = xx as isize + kx as isize - 1;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w[((o * cin + i) * 3 + ky) * 3 + kx]
                                * x.at(i, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn reduced_network_matches_unrolled_oracle() {
        let cfg = small_cfg(1);
        let mut h = build_res12::<f64>(&cfg, InitMethod::XavierUniform, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for p in h.params_mut() {
            if p.name.ends_with("bias") {
                p.value
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
        }
        let x = Tensor::<f64>::from_fn(3, 2, 2, |_, _, _| rng.gen_range(0.0..1.0));
        let p: Vec<(Vec<f64>, Vec<usize>)> = h
            .params()
            .iter()
            .map(|p| (p.value.clone(), p.shape.clone()))
            .collect();
        let layer = |i: usize, x: &Tensor<f64>| {
            let (w, shape) = &p[2 * i];
            conv3(w, &p[2 * i + 1].0, shape[1], shape[0], x)
        };
        let r = |t: &Tensor<f64>| t.map(|v| v.max(0.0));
        let h0 = r(&layer(0, &x));
        let h1 = r(&layer(1, &h0));
        let t0 = layer(2, &h1);
        let v = layer(4, &r(&layer(3, &t0)));
        let t1 = t0.add(&v.scale(cfg.residual_scale));
        let h3 = r(&layer(5, &t1));
        let h4 = r(&layer(6, &h3));
        let expect = layer(7, &h4).add(&x);
        let got = h.forward(&x).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-5);
    }

    #[test]
    fn zero_residual_block_is_identity() {
        let cfg = small_cfg(1);
        let mut net = Res12::<f64>::new(&cfg, InitMethod::KaimingNormal, 2).unwrap();
        let b = &mut net.blocks[0];
        for p in b
            .first
            .params_mut()
            .into_iter()
            .chain(b.second.params_mut())
        {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        // With a zero block the trunk output equals its input, so the
        // network equals the same network with the block removed.
        let x = Tensor::<f64>::from_fn(3, 5, 5, |c, y, x| ((c + 2 * y + x) % 5) as f64 / 5.0);
        let (_, trace) = net.forward_traced(&x).unwrap();
        assert_eq!(trace.maps[3], trace.maps[5]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = small_cfg(2);
        let mut h = build_res12::<f64>(&cfg, InitMethod::KaimingUniform, 12).unwrap();
        h = h.set_frozen(false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::from_fn(3, 4, 4, |_, _, _| rng.gen_range(0.0..1.0));
        let c = Tensor::<f64>::from_fn(3, 4, 4, |_, _, _| rng.gen_range(-1.0..1.0));
        let loss = |h: &BackboneHandle<f64>, x: &Tensor<f64>| h.forward(x).unwrap().mul(&c).sum();
        let (_, trace) = h.forward_traced(&x).unwrap();
        let dx = h.backward(&trace, &c);
        let eps = 1e-5;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&h, &xp) - loss(&h, &xm)) / (2.0 * eps);
            assert!(
                (fd - dx.data()[i]).abs() < 1e-6,
                "dx[{i}] {fd} vs {}",
                dx.data()[i]
            );
        }
        let grads: Vec<Vec<f64>> = h.params().iter().map(|p| p.grad.clone()).collect();
        for (pi, g) in grads.iter().enumerate() {
            for (j, &gj) in g.iter().enumerate().step_by(3) {
                let mut hp = h.clone();
                hp.params_mut()[pi].value[j] += eps;
                let mut hm = h.clone();
                hm.params_mut()[pi].value[j] -= eps;
                let fd = (loss(&hp, &x) - loss(&hm, &x)) / (2.0 * eps);
                assert!((fd - gj).abs() < 1e-6, "param {pi}[{j}] {fd} vs {gj}");
            }
        }
    }

    #[test]
    fn frozen_backward_leaves_param_grads_untouched() {
        let mut h = build_res12::<f64>(&small_cfg(1), InitMethod::KaimingUniform, 1).unwrap();
        let x = Tensor::full(3, 4, 4, 0.3);
        let (_, trace) = h.forward_traced(&x).unwrap();
        let _ = h.backward(&trace, &Tensor::full(3, 4, 4, 1.0));
        assert!(h.params().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn receptive_field_is_local() {
        let cfg = small_cfg(1);
        let h = build_res12::<f64>(&cfg, InitMethod::KaimingUniform, 6).unwrap();
        let n = 24;
        let x = Tensor::<f64>::from_fn(3, n, n, |c, y, x| ((c * 5 + y * 3 + x) % 7) as f64 / 7.0);
        let mut x2 = x.clone();
        let (py, px) = (12, 12);
        *x2.at_mut(1, py, px) += 0.5;
        let a = h.forward(&x).unwrap();
        let b = h.forward(&x2).unwrap();
        let radius = cfg.depth();
        for c in 0..3 {
            for y in 0..n {
                for xx in 0..n {
                    let far = y.abs_diff(py) > radius || xx.abs_diff(px) > radius;
                    if far {
                        assert_eq!(a.at(c, y, xx), b.at(c, y, xx));
                    }
                }
            }
        }
        // Same test on a smaller radius: anything further than 8 pixels is untouched.
        assert_eq!(radius, 8);
        assert_ne!(a, b);
    }

    #[test]
    fn registry_builds_res12_and_rejects_unknown() {
        let reg = BackboneRegistry::<f32>::default();
        let cfg = serde_json::to_value(Res12Config::tiny()).unwrap();
        let h = reg
            .build("res12", &cfg, InitMethod::KaimingUniform, 0)
            .unwrap();
        assert_eq!(h.net().architecture(), "res12");
        let err = reg
            .build("swinir", &cfg, InitMethod::KaimingUniform, 0)
            .unwrap_err();
        assert!(err.to_string().contains("res12"));
    }
}
