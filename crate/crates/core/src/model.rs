//! The reprogrammed model: input transform, backbone, output transform.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneHandle, Trace, CHECKPOINT_PREFIX};
use crate::checkpoint::{BackboneMeta, Checkpoint, CheckpointMeta, NamedArray};
use crate::error::{Error, Result};
use crate::nn::{InitMethod, Param, Parameterized};
use crate::output_transform::{OutputTrace, OutputTransform, OutputTransformConfig};
use crate::tensor::{Scalar, Tensor};
use crate::wave_transforms::{InputTransform, WaveRepresentation};

/// Which maps of the wave representation go through the backbone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WaveComponents {
    /// Real and imaginary maps, each in its own backbone pass.
    #[default]
    Both,
    Real,
    Imag,
    /// The amplitude map alone, without Euler decomposition.
    Amplitude,
    /// The phase map alone.
    Phase,
}

impl WaveComponents {
    pub const ALL: [WaveComponents; 5] = [
        WaveComponents::Both,
        WaveComponents::Real,
        WaveComponents::Imag,
        WaveComponents::Amplitude,
        WaveComponents::Phase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WaveComponents::Both => "both",
            WaveComponents::Real => "real",
            WaveComponents::Imag => "imag",
            WaveComponents::Amplitude => "amplitude",
            WaveComponents::Phase => "phase",
        }
    }
}

impl fmt::Display for WaveComponents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WaveComponents {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WaveComponents::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown wave component selection `{s}`; valid: {}",
                    WaveComponents::ALL.map(|w| w.name()).join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub output: OutputTransformConfig,
    pub wave_components: WaveComponents,
    /// Bias on the amplitude and phase estimators.
    pub input_bias: bool,
    /// Initializer of the transform channel-FC weights.
    pub transform_init: InitMethod,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            output: OutputTransformConfig::default(),
            wave_components: WaveComponents::Both,
            input_bias: true,
            transform_init: InitMethod::KaimingUniform,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.output.validate()
    }
}

/// Intermediate state of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelTrace<T> {
    pub wave: WaveRepresentation<T>,
    pub real_trace: Option<Trace<T>>,
    pub imag_trace: Option<Trace<T>>,
    pub real_r: Tensor<T>,
    pub imag_r: Tensor<T>,
    pub output: OutputTrace<T>,
}

#[derive(Clone, Debug)]
pub struct ReprogramModel<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub input: InputTransform<T>,
    pub backbone: BackboneHandle<T>,
    pub output: OutputTransform<T>,
}

impl<T: Scalar> ReprogramModel<T> {
    pub fn new(cfg: &ModelConfig, backbone: BackboneHandle<T>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = InputTransform::new(cfg.input_bias, cfg.transform_init, &mut rng);
        let output = OutputTransform::new(&cfg.output, cfg.transform_init, &mut rng)?;
        Ok(ReprogramModel {
            cfg: cfg.clone(),
            input,
            backbone,
            output,
        })
    }

    pub fn patch(&self) -> usize {
        self.cfg.output.patch
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let wave = self.input.forward(image).map_err(|e| e.in_stage("input"))?;
        let (real_in, imag_in) = self.backbone_inputs(&wave);
        let pass = |x: Option<&Tensor<T>>| -> Result<Tensor<T>> {
            match x {
                Some(x) => self.backbone.forward(x).map_err(|e| e.in_stage("backbone")),
                None => Ok(Tensor::zeros(3, image.height(), image.width())),
            }
        };
        let real_r = pass(real_in)?;
        let imag_r = pass(imag_in)?;
        self.output
            .forward(&real_r, &imag_r, image)
            .map_err(|e| e.in_stage("output"))
    }

    pub fn forward_traced(&self, image: &Tensor<T>) -> Result<(Tensor<T>, ModelTrace<T>)> {
        let wave = self.input.forward(image).map_err(|e| e.in_stage("input"))?;
        let (real_in, imag_in) = self.backbone_inputs(&wave);
        let pass = |x: Option<&Tensor<T>>| -> Result<(Tensor<T>, Option<Trace<T>>)> {
            match x {
                Some(x) => {
                    let (y, t) = self
                        .backbone
                        .forward_traced(x)
                        .map_err(|e| e.in_stage("backbone"))?;
                    Ok((y, Some(t)))
                }
                None => Ok((Tensor::zeros(3, image.height(), image.width()), None)),
            }
        };
        let (real_r, real_trace) = pass(real_in)?;
        let (imag_r, imag_trace) = pass(imag_in)?;
        let (out, output) = self
            .output
            .forward_traced(&real_r, &imag_r, image)
            .map_err(|e| e.in_stage("output"))?;
        Ok((
            out,
            ModelTrace {
                wave,
                real_trace,
                imag_trace,
                real_r,
                imag_r,
                output,
            },
        ))
    }

    fn backbone_inputs<'a>(
        &self,
        wave: &'a WaveRepresentation<T>,
    ) -> (Option<&'a Tensor<T>>, Option<&'a Tensor<T>>) {
        match self.cfg.wave_components {
            WaveComponents::Both => (Some(&wave.real), Some(&wave.imag)),
            WaveComponents::Real => (Some(&wave.real), None),
            WaveComponents::Imag => (None, Some(&wave.imag)),
            WaveComponents::Amplitude => (Some(&wave.amplitude), None),
            WaveComponents::Phase => (Some(&wave.phase), None),
        }
    }

    /// Accumulates gradients of every trainable parameter given `d_out`.
    pub fn backward(&mut self, trace: &ModelTrace<T>, image: &Tensor<T>, d_out: &Tensor<T>) {
        let (d_real_r, d_imag_r) = self.output.backward(&trace.output, image, d_out);
        let d_real = trace
            .real_trace
            .as_ref()
            .map(|t| self.backbone.backward(t, &d_real_r));
        let d_imag = trace
            .imag_trace
            .as_ref()
            .map(|t| self.backbone.backward(t, &d_imag_r));
        let zeros = || Tensor::zeros(3, image.height(), image.width());
        match self.cfg.wave_components {
            WaveComponents::Both | WaveComponents::Real | WaveComponents::Imag => {
                let dr = d_real.unwrap_or_else(zeros);
                let di = d_imag.unwrap_or_else(zeros);
                self.input.backward(image, &trace.wave, &dr, &di);
            }
            WaveComponents::Amplitude => {
                let da = d_real.unwrap_or_else(zeros);
                self.input.backward_polar(image, &da, &zeros());
            }
            WaveComponents::Phase => {
                let dp = d_real.unwrap_or_else(zeros);
                self.input.backward_polar(image, &zeros(), &dp);
            }
        }
    }

    pub fn transform_params(&self) -> Vec<&Param<T>> {
        let mut v = self.input.params();
        v.extend(self.output.params());
        v
    }

    pub fn transform_params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.input.params_mut();
        v.extend(self.output.params_mut());
        v
    }

    /// Parameters the optimizer may update: transforms, plus the backbone when unfrozen.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Param<T>> {
        let frozen = self.backbone.frozen();
        let mut v = self.input.params_mut();
        v.extend(self.output.params_mut());
        if !frozen {
            v.extend(self.backbone.params_mut());
        }
        v
    }

    pub fn transform_fingerprint(&self) -> String {
        crate::nn::fingerprint_params(&self.transform_params())
    }

    /// Copy whose token-FC weights are resampled to `height x width`.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let mut m = self.clone();
        m.output = self.output.resized(height, width);
        m
    }
}

impl<T: Scalar> Parameterized<T> for ReprogramModel<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.transform_params();
        v.extend(self.backbone.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.input.params_mut();
        v.extend(self.output.params_mut());
        v.extend(self.backbone.params_mut());
        v
    }
}

pub fn backbone_meta(backbone: &BackboneHandle<f32>) -> BackboneMeta {
    BackboneMeta {
        architecture: backbone.net().architecture().to_string(),
        config: backbone.net().config_json(),
        fingerprint: backbone.fingerprint(),
        origin: Some(backbone.origin()),
        frozen: backbone.frozen(),
    }
}

/// Backbone arrays under their checkpoint names.
pub fn backbone_arrays(backbone: &BackboneHandle<f32>) -> Vec<NamedArray> {
    backbone
        .params()
        .into_iter()
        .map(|p| NamedArray {
            name: format!("{CHECKPOINT_PREFIX}{}", p.name),
            shape: p.shape.clone(),
            data: p.value.clone(),
        })
        .collect()
}

fn assign_from(p: &mut Param<f32>, ckpt: &Checkpoint, key: &str) -> Result<()> {
    let arr = ckpt.array(key).ok_or_else(|| Error::Schema {
        array: key.to_string(),
        expected: format!("{:?}", p.shape),
        found: "missing".into(),
    })?;
    p.assign(&arr.shape, arr.data.clone())
        .map_err(|_| Error::Schema {
            array: key.to_string(),
            expected: format!("{:?}", p.shape),
            found: format!("{:?}", arr.shape),
        })
}

impl ReprogramModel<f32> {
    pub fn to_checkpoint(&self, mut meta: CheckpointMeta) -> Checkpoint {
        meta.backbone = backbone_meta(&self.backbone);
        meta.model = Some(serde_json::to_value(&self.cfg).expect("config serializes"));
        let mut arrays: Vec<NamedArray> = self
            .transform_params()
            .into_iter()
            .map(|p| NamedArray {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.value.clone(),
            })
            .collect();
        arrays.extend(backbone_arrays(&self.backbone));
        Checkpoint { meta, arrays }
    }

    /// Rebuilds a model from a reprogramming checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model_cfg: ModelConfig = match &ckpt.meta.model {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Corrupt(format!("model config in metadata: {e}")))?,
            None => {
                return Err(Error::Config(
                    "checkpoint carries no model configuration".into(),
                ))
            }
        };
        let bm = &ckpt.meta.backbone;
        let registry = crate::backbone::BackboneRegistry::<f32>::default();
        let init = match bm.origin {
            Some(crate::backbone::BackboneOrigin::Init(m)) => m,
            _ => InitMethod::KaimingUniform,
        };
        let mut backbone = registry.build(&bm.architecture, &bm.config, init, 0)?;
        crate::backbone::restore_from_checkpoint(&mut backbone, ckpt)?;
        if let Some(o) = bm.origin {
            backbone.set_origin(o);
        }
        let backbone = backbone.set_frozen(bm.frozen);
        let mut model = ReprogramModel::new(&model_cfg, backbone, 0)?;
        model.load_transforms(ckpt)?;
        Ok(model)
    }

    /// Copies transform arrays from a checkpoint, checking names and shapes.
    pub fn load_transforms(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for p in self.transform_params_mut() {
            let key = p.name.clone();
            assign_from(p, ckpt, &key)?;
        }
        Ok(())
    }
}
