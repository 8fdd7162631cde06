//! Frozen feature extractors for the perceptual loss.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, Conv2d, InitMethod, Param};
use crate::tensor::{Scalar, Tensor};

/// Environment variable naming the directory that holds extractor weights.
pub const CACHE_ENV: &str = "WAVEREPROG_CACHE";
/// File name of the VGG16 weights inside the cache directory.
pub const VGG16_FILE: &str = "vgg16.wrpg";

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug)]
enum Op<T> {
    Conv(Conv2d<T>),
    Relu,
    MaxPool2,
}

/// A sequential stack of frozen layers with named taps.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    ops: Vec<(String, Op<T>)>,
    normalize: bool,
    taps: Vec<usize>,
}

/// Saved inputs of every executed op.
#[derive(Clone, Debug)]
pub struct ExtractorTrace<T> {
    inputs: Vec<Tensor<T>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Three stride-2 3x3 conv + ReLU stages with seeded Kaiming-normal
    /// weights. Taps: `stage1`, `stage2`, `stage3`.
    pub fn fixed_random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3, 8, 16, 32];
        let mut ops = Vec::new();
        for s in 0..3 {
            let conv = Conv2d::new(
                &format!("stage{}.conv", s + 1),
                widths[s],
                widths[s + 1],
                3,
                2,
                1,
                InitMethod::KaimingNormal,
                &mut rng,
            );
            ops.push((format!("stage{}.conv", s + 1), Op::Conv(conv)));
            ops.push((format!("stage{}", s + 1), Op::Relu));
        }
        FeatureExtractor {
            ops,
            normalize: false,
            taps: Vec::new(),
        }
    }

    /// VGG16 convolutional layers through `relu3_3`. Arrays are named
    /// `conv{b}_{l}.weight` / `.bias`, stored in the checkpoint container.
    pub fn vgg16_from_file(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load_checkpoint(path)?;
        let layout: &[(usize, &[usize])] = &[
            (1, &[3, 64, 64]),
            (2, &[64, 128, 128]),
            (3, &[128, 256, 256, 256]),
        ];
        let mut ops = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(block, chans) in layout {
            if block > 1 {
                ops.push((format!("pool{}", block - 1), Op::MaxPool2));
            }
            for l in 1..chans.len() {
                let name = format!("conv{block}_{l}");
                let mut conv = Conv2d::new(
                    &name,
                    chans[l - 1],
                    chans[l],
                    3,
                    1,
                    1,
                    InitMethod::KaimingUniform,
                    &mut rng,
                );
                for p in conv.params_mut() {
                    let arr = ckpt.array(&p.name).ok_or_else(|| Error::Schema {
                        array: p.name.clone(),
                        expected: format!("{:?}", p.shape),
                        found: "missing".into(),
                    })?;
                    let vals = arr.data.iter().map(|&v| T::lit(v as f64)).collect();
                    p.assign(&arr.shape, vals)?;
                }
                ops.push((name, Op::Conv(conv)));
                ops.push((format!("relu{block}_{l}"), Op::Relu));
            }
        }
        Ok(FeatureExtractor {
            ops,
            normalize: true,
            taps: Vec::new(),
        })
    }

    /// Locates VGG16 weights from an explicit path or the cache directory.
    pub fn vgg16(explicit: Option<&Path>) -> Result<Self> {
        let path: Option<PathBuf> = explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CACHE_ENV).map(|d| PathBuf::from(d).join(VGG16_FILE)));
        match path {
            Some(p) if p.is_file() => Self::vgg16_from_file(&p),
            other => Err(Error::Resource(format!(
                "pretrained VGG16 weights not found ({}); provide `loss.vgg_weights`, set \
                 {CACHE_ENV} to a directory containing {VGG16_FILE}, or set \
                 `loss.extractor_kind = \"fixed-random\"`",
                other.map_or_else(|| format!("{CACHE_ENV} unset"), |p| p.display().to_string())
            ))),
        }
    }

    pub fn tap_names(&self) -> Vec<&str> {
        self.ops
            .iter()
            .filter(|(_, op)| matches!(op, Op::Relu))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Selects which op outputs are returned as features, in the given order.
    pub fn with_taps(mut self, names: &[String]) -> Result<Self> {
        let mut taps = Vec::with_capacity(names.len());
        for n in names {
            let idx = self
                .ops
                .iter()
                .position(|(name, _)| name == n)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown perceptual layer `{n}`; available: {}",
                        self.tap_names().join(", ")
                    ))
                })?;
            taps.push(idx);
        }
        self.taps = taps;
        Ok(self)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.ops
            .iter()
            .filter_map(|(_, op)| match op {
                Op::Conv(c) => Some(c.params()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn prepare(&self, x: &Tensor<T>) -> Tensor<T> {
        if !self.normalize {
            return x.clone();
        }
        Tensor::from_fn(x.channels(), x.height(), x.width(), |c, y, xx| {
            (x.at(c, y, xx) - T::lit(IMAGENET_MEAN[c % 3])) / T::lit(IMAGENET_STD[c % 3])
        })
    }

    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.features_traced(x)?.0)
    }

    pub fn features_traced(&self, x: &Tensor<T>) -> Result<(Vec<Tensor<T>>, ExtractorTrace<T>)> {
        x.ensure_channels(3, "feature extractor")?;
        let last = *self
            .taps
            .iter()
            .max()
            .ok_or_else(|| Error::Config("no perceptual layers selected".into()))?;
        let mut cur = self.prepare(x);
        let mut inputs = Vec::with_capacity(last + 1);
        let mut outs: Vec<Option<Tensor<T>>> = vec![None; last + 1];
        for (i, (_, op)) in self.ops.iter().enumerate().take(last + 1) {
            let next = match op {
                Op::Conv(c) => c.forward(&cur)?,
                Op::Relu => relu(&cur),
                Op::MaxPool2 => max_pool2(&cur),
            };
            inputs.push(cur);
            if self.taps.contains(&i) {
                outs[i] = Some(next.clone());
            }
            cur = next;
        }
        let feats = self
            .taps
            .iter()
            .map(|&i| outs[i].clone().expect("tap recorded"))
            .collect();
        Ok((feats, ExtractorTrace { inputs }))
    }

    /// Input gradient given gradients of each tapped feature.
    pub fn backward(&self, trace: &ExtractorTrace<T>, d_feats: &[Tensor<T>]) -> Tensor<T> {
        let last = trace.inputs.len() - 1;
        let mut grad: Option<Tensor<T>> = None;
        for i in (0..=last).rev() {
            for (k, &t) in self.taps.iter().enumerate() {
                if t == i {
                    match &mut grad {
                        Some(g) => g.add_assign(&d_feats[k]),
                        None => grad = Some(d_feats[k].clone()),
                    }
                }
            }
            let Some(g) = grad.take() else { continue };
            let input = &trace.inputs[i];
            grad = Some(match &self.ops[i].1 {
                Op::Conv(c) => c.input_grad(input.shape(), &g),
                Op::Relu => relu_backward(input, &g),
                Op::MaxPool2 => max_pool2_backward(input, &g),
            });
        }
        let g = grad.expect("at least one tap");
        if self.normalize {
            Tensor::from_fn(g.channels(), g.height(), g.width(), |c, y, x| {
                g.at(c, y, x) / T::lit(IMAGENET_STD[c % 3])
            })
        } else {
            g
        }
    }
}

fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    Tensor::from_fn(c, (h / 2).max(1), (w / 2).max(1), |ch, y, xx| {
        let mut m = T::neg_infinity();
        for dy in 0..2 {
            for dx in 0..2 {
                let (yy, xw) = ((2 * y + dy).min(h - 1), (2 * xx + dx).min(w - 1));
                m = m.max(x.at(ch, yy, xw));
            }
        }
        m
    })
}

fn max_pool2_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.shape();
    let mut dx = Tensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..dy.height() {
            for xx in 0..dy.width() {
                let mut best = (0, 0);
                let mut m = T::neg_infinity();
                for d in 0..2 {
                    for e in 0..2 {
                        let (yy, xw) = ((2 * y + d).min(h - 1), (2 * xx + e).min(w - 1));
                        if x.at(ch, yy, xw) > m {
                            m = x.at(ch, yy, xw);
                            best = (yy, xw);
                        }
                    }
                }
                *dx.at_mut(ch, best.0, best.1) += dy.at(ch, y, xx);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, NamedArray};
    use rand::Rng;

    #[test]
    fn fixed_random_is_deterministic_and_strided() {
        let names: Vec<String> = ["stage1", "stage2", "stage3"].map(String::from).to_vec();
        let a = FeatureExtractor::<f64>::fixed_random(0)
            .with_taps(&names)
            .unwrap();
        let b = FeatureExtractor::<f64>::fixed_random(0)
            .with_taps(&names)
            .unwrap();
        let x = Tensor::from_fn(3, 32, 32, |c, y, x| ((c + y * x) % 5) as f64 / 5.0);
        let fa = a.features(&x).unwrap();
        let fb = b.features(&x).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(fa[0].shape(), (8, 16, 16));
        assert_eq!(fa[1].shape(), (16, 8, 8));
        assert_eq!(fa[2].shape(), (32, 4, 4));
    }

    #[test]
    fn unknown_tap_lists_available() {
        let err = FeatureExtractor::<f64>::fixed_random(0)
            .with_taps(&["relu9_9".to_string()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("stage1") && err.contains("stage3"));
    }

    #[test]
    fn missing_vgg_weights_is_resource_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = FeatureExtractor::<f32>::vgg16(Some(&dir.path().join("nope.wrpg"))).unwrap_err();
        assert!(matches!(err, Error::Resource(_)));
        assert!(err.to_string().contains("fixed-random"));
    }

    #[test]
    fn vgg16_loads_from_container_and_backprops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout: &[(usize, &[usize])] = &[
            (1, &[3, 64, 64]),
            (2, &[64, 128, 128]),
            (3, &[128, 256, 256, 256]),
        ];
        let mut arrays = Vec::new();
        for &(block, chans) in layout {
            for l in 1..chans.len() {
                let (ci, co) = (chans[l - 1], chans[l]);
                let scale = (2.0 / (ci * 9) as f32).sqrt();
                arrays.push(NamedArray {
                    name: format!("conv{block}_{l}.weight"),
                    shape: vec![co, ci, 3, 3],
                    data: (0..co * ci * 9)
                        .map(|_| rng.gen_range(-scale..scale))
                        .collect(),
                });
                arrays.push(NamedArray {
                    name: format!("conv{block}_{l}.bias"),
                    shape: vec![co],
                    data: vec![0.01; co],
                });
            }
        }
        let ckpt = Checkpoint {
            meta: CheckpointMeta::bare(CheckpointKind::Weights),
            arrays,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(VGG16_FILE);
        checkpoint::save_checkpoint(&ckpt, &path).unwrap();
        let names: Vec<String> = ["relu1_2", "relu2_2", "relu3_3"].map(String::from).to_vec();
        let vgg = FeatureExtractor::<f64>::vgg16(Some(&path))
            .unwrap()
            .with_taps(&names)
            .unwrap();
        let x = Tensor::from_fn(3, 8, 8, |_, _, _| rng.gen_range(0.0..1.0));
        let (f, trace) = vgg.features_traced(&x).unwrap();
        assert_eq!(f[0].shape(), (64, 8, 8));
        assert_eq!(f[1].shape(), (128, 4, 4));
        assert_eq!(f[2].shape(), (256, 2, 2));
        let dx = vgg.backward(&trace, &[f[0].clone(), f[1].clone(), f[2].clone()]);
        assert_eq!(dx.shape(), (3, 8, 8));
        assert!(dx.is_finite());
    }

    #[test]
    fn max_pool_backward_routes_to_argmax() {
        let x = Tensor::<f64>::from_vec(1, 2, 2, vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        assert_eq!(max_pool2(&x).data(), &[0.9]);
        let dx = max_pool2_backward(&x, &Tensor::full(1, 1, 1, 2.0));
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
