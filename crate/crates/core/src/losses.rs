//! Training objective: smooth L1 plus a weighted perceptual term.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    PretrainedVgg16,
    #[default]
    FixedRandom,
}

/// Denominator of the smooth L1 mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossNormalization {
    /// Divide by the pixel count; channels are summed.
    #[default]
    Pixels,
    /// Divide by pixels x channels.
    Elements,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_p: f64,
    /// Three tap names; `None` uses the extractor's defaults.
    pub perceptual_layers: Option<Vec<String>>,
    pub extractor_kind: ExtractorKind,
    pub extractor_seed: u64,
    pub vgg_weights: Option<PathBuf>,
    pub loss_normalization: LossNormalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_p: 0.04,
            perceptual_layers: None,
            extractor_kind: ExtractorKind::FixedRandom,
            extractor_seed: 0,
            vgg_weights: None,
            loss_normalization: LossNormalization::Pixels,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_p must be >= 0, got {}",
                self.lambda_p
            )));
        }
        if let Some(l) = &self.perceptual_layers {
            if l.len() != 3 {
                return Err(Error::Config(format!(
                    "exactly three perceptual layers required, got {}",
                    l.len()
                )));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<String> {
        self.perceptual_layers.clone().unwrap_or_else(|| {
            let d: [&str; 3] = match self.extractor_kind {
                ExtractorKind::PretrainedVgg16 => ["relu1_2", "relu2_2", "relu3_3"],
                ExtractorKind::FixedRandom => ["stage1", "stage2", "stage3"],
            };
            d.map(String::from).to_vec()
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_p: f64,
    pub total: f64,
}

fn f<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn smooth_l1_scalar(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_denominator<T: Scalar>(pred: &Tensor<T>, norm: LossNormalization) -> f64 {
    match norm {
        LossNormalization::Pixels => pred.plane_len() as f64,
        LossNormalization::Elements => pred.data().len() as f64,
    }
}

/// Mean over pixels of the channel-summed piecewise smooth L1 of `pred - target`.
pub fn smooth_l1<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    smooth_l1_with(pred, target, LossNormalization::Pixels)
}

pub fn smooth_l1_with<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    norm: LossNormalization,
) -> Result<f64> {
    pred.ensure_shape(target, "smooth_l1")?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| smooth_l1_scalar(f(p) - f(t)))
        .sum();
    Ok(s / smooth_l1_denominator(pred, norm))
}

/// Gradient of [`smooth_l1_with`] with respect to `pred`.
pub fn smooth_l1_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    norm: LossNormalization,
) -> Result<Tensor<T>> {
    pred.ensure_shape(target, "smooth_l1")?;
    let inv = T::lit(1.0 / smooth_l1_denominator(pred, norm));
    Ok(pred.zip_map(target, |p, t| {
        let d = p - t;
        let g = if d.abs() < T::one() { d } else { d.signum() };
        g * inv
    }))
}

/// `sum_j ||a_j - b_j||^2 / (C_j H_j W_j)` over paired feature maps.
pub fn feature_distance<T: Scalar>(a: &[Tensor<T>], b: &[Tensor<T>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(fa, fb)| {
            let sq: f64 = fa
                .data()
                .iter()
                .zip(fb.data())
                .map(|(&x, &y)| (f(x) - f(y)).powi(2))
                .sum();
            sq / fa.data().len() as f64
        })
        .sum()
}

/// The full objective with its frozen feature extractor.
#[derive(Clone, Debug)]
pub struct Objective<T> {
    cfg: LossConfig,
    extractor: FeatureExtractor<T>,
}

impl<T: Scalar> Objective<T> {
    pub fn new(cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        let base = match cfg.extractor_kind {
            ExtractorKind::FixedRandom => FeatureExtractor::fixed_random(cfg.extractor_seed),
            ExtractorKind::PretrainedVgg16 => FeatureExtractor::vgg16(cfg.vgg_weights.as_deref())?,
        };
        Ok(Objective {
            cfg: cfg.clone(),
            extractor: base.with_taps(&cfg.layers())?,
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    pub fn extractor(&self) -> &FeatureExtractor<T> {
        &self.extractor
    }

    pub fn perceptual(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
        pred.ensure_shape(target, "perceptual_loss")?;
        let fp = self.extractor.features(pred)?;
        let ft = self.extractor.features(target)?;
        Ok(feature_distance(&fp, &ft))
    }

    pub fn perceptual_grad(
        &self,
        pred: &Tensor<T>,
        target: &Tensor<T>,
    ) -> Result<(f64, Tensor<T>)> {
        pred.ensure_shape(target, "perceptual_loss")?;
        let (fp, trace) = self.extractor.features_traced(pred)?;
        let ft = self.extractor.features(target)?;
        let value = feature_distance(&fp, &ft);
        let d_feats: Vec<Tensor<T>> = fp
            .iter()
            .zip(&ft)
            .map(|(a, b)| {
                let k = T::lit(2.0 / a.data().len() as f64);
                a.zip_map(b, |x, y| (x - y) * k)
            })
            .collect();
        Ok((value, self.extractor.backward(&trace, &d_feats)))
    }

    pub fn total(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossBreakdown> {
        let l_s = smooth_l1_with(pred, target, self.cfg.loss_normalization)?;
        let l_p = if self.cfg.lambda_p > 0.0 {
            self.perceptual(pred, target)?
        } else {
            0.0
        };
        Ok(combine(l_s, l_p, self.cfg.lambda_p))
    }

    /// Loss breakdown and the gradient of the total with respect to `pred`.
    pub fn total_with_grad(
        &self,
        pred: &Tensor<T>,
        target: &Tensor<T>,
    ) -> Result<(LossBreakdown, Tensor<T>)> {
        let norm = self.cfg.loss_normalization;
        let l_s = smooth_l1_with(pred, target, norm)?;
        let mut grad = smooth_l1_grad(pred, target, norm)?;
        let mut l_p = 0.0;
        if self.cfg.lambda_p > 0.0 {
            let (v, g) = self.perceptual_grad(pred, target)?;
            l_p = v;
            grad.add_assign(&g.scale(T::lit(self.cfg.lambda_p)));
        }
        Ok((combine(l_s, l_p, self.cfg.lambda_p), grad))
    }
}

pub fn combine(l_s: f64, l_p: f64, lambda_p: f64) -> LossBreakdown {
    LossBreakdown {
        l_s,
        l_p,
        total: l_s + lambda_p * l_p,
    }
}

pub fn perceptual_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<f64> {
    Objective::new(cfg)?.perceptual(pred, target)
}

pub fn total_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    Objective::new(cfg)?.total(pred, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, n: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(3, n, n, |_, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn smooth_l1_closed_forms() {
        let t = Tensor::<f64>::full(3, 4, 4, 0.25);
        assert_eq!(smooth_l1(&t, &t).unwrap(), 0.0);
        let p = Tensor::full(3, 4, 4, 0.75);
        assert!((smooth_l1(&p, &t).unwrap() - 0.375).abs() < 1e-12);
        let p = Tensor::full(3, 4, 4, 2.25);
        assert!((smooth_l1(&p, &t).unwrap() - 4.5).abs() < 1e-12);
        let per_element = smooth_l1_with(&p, &t, LossNormalization::Elements).unwrap();
        assert!((per_element - 1.5).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_shape_mismatch() {
        let a = Tensor::<f64>::zeros(3, 4, 4);
        let b = Tensor::<f64>::zeros(3, 4, 5);
        assert!(matches!(smooth_l1(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn branches_meet_at_one() {
        let e = 1e-6;
        assert!((smooth_l1_scalar(1.0 - e) - smooth_l1_scalar(1.0 + e)).abs() < 1e-5);
        assert_eq!(smooth_l1_scalar(1.0), 0.5);
    }

    #[test]
    fn perceptual_zero_for_identical_images() {
        let cfg = LossConfig::default();
        let x = img(1, 32);
        assert_eq!(perceptual_loss(&x, &x, &cfg).unwrap(), 0.0);
        assert_eq!(total_loss(&x, &x, &cfg).unwrap().total, 0.0);
    }

    #[test]
    fn perceptual_matches_loop_oracle() {
        let cfg = LossConfig::default();
        let obj = Objective::<f64>::new(&cfg).unwrap();
        let (a, b) = (img(2, 32), img(3, 32));
        let fa = obj.extractor().features(&a).unwrap();
        let fb = obj.extractor().features(&b).unwrap();
        let mut oracle = 0.0;
        for j in 0..3 {
            let (c, h, w) = fa[j].shape();
            let mut acc = 0.0;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let d = fa[j].at(ch, y, x) - fb[j].at(ch, y, x);
                        acc += d * d;
                    }
                }
            }
            oracle += acc / (c * h * w) as f64;
        }
        let v = obj.perceptual(&a, &b).unwrap();
        assert!((v - oracle).abs() < 1e-5);
        assert!(v > 0.0);
    }

    #[test]
    fn feature_distance_is_quadratic() {
        let a = vec![img(4, 4), img(5, 2)];
        let b = vec![img(6, 4), img(7, 2)];
        let base = feature_distance(&a, &b);
        let doubled: Vec<Tensor<f64>> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| y.add(&x.sub(y).scale(2.0)))
            .collect();
        assert!((feature_distance(&doubled, &b) - 4.0 * base).abs() < 1e-12);
    }

    #[test]
    fn total_combines_with_lambda() {
        let b = combine(1.0, 2.0, 0.04);
        assert!((b.total - 1.08).abs() < 1e-12);
        let mut cfg = LossConfig::default();
        cfg.lambda_p = 0.0;
        let (p, t) = (img(8, 16), img(9, 16));
        let br = total_loss(&p, &t, &cfg).unwrap();
        assert_eq!(br.total, smooth_l1(&p, &t).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::default();
        cfg.lambda_p = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = LossConfig::default();
        cfg.perceptual_layers = Some(vec!["stage1".into()]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pretrained_without_weights_is_resource_error() {
        let cfg = LossConfig {
            extractor_kind: ExtractorKind::PretrainedVgg16,
            vgg_weights: Some(PathBuf::from("/nonexistent/vgg16.wrpg")),
            ..Default::default()
        };
        assert!(matches!(
            Objective::<f32>::new(&cfg),
            Err(Error::Resource(_))
        ));
    }

    fn check_grad(cfg: &LossConfig, seed: u64) {
        let obj = Objective::<f64>::new(cfg).unwrap();
        let p = img(seed, 4);
        let t = img(seed + 1, 4);
        // Push some residuals onto the linear branch.
        let p = p.map(|v| v * 2.5 - 0.5);
        let (_, g) = obj.total_with_grad(&p, &t).unwrap();
        let h = 1e-4;
        for i in 0..p.data().len() {
            let mut pp = p.clone();
            pp.data_mut()[i] += h;
            let mut pm = p.clone();
            pm.data_mut()[i] -= h;
            let fd =
                (obj.total(&pp, &t).unwrap().total - obj.total(&pm, &t).unwrap().total) / (2.0 * h);
            let a = g.data()[i];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(rel < 1e-3, "element {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        check_grad(&LossConfig::default(), 10);
        check_grad(
            &LossConfig {
                lambda_p: 0.0,
                ..Default::default()
            },
            12,
        );
        check_grad(
            &LossConfig {
                lambda_p: 1.0,
                loss_normalization: LossNormalization::Elements,
                ..Default::default()
            },
            14,
        );
    }

    proptest! {
        #[test]
        fn smooth_l1_symmetric_and_nonnegative(seed in 0u64..1000) {
            let (a, b) = (img(seed, 5).scale(3.0), img(seed + 7, 5));
            let ab = smooth_l1(&a, &b).unwrap();
            let ba = smooth_l1(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }
}
