//! The U-Net, its imbalance-weighted loss, SGD training and checkpoints.

mod checkpoint;
mod loss;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{default_a, loss_weight, DEFAULT_LOSS_A};
pub use train::{train, TrainConfig};

use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::raster::{RgbRaster, PATCH_SIZE};
use crate::seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Number of pooling stages on the contractive path.
    pub depth: usize,
    /// Channels at the first stage; doubled at every stage below it.
    pub base_channels: usize,
    pub dropout_p: f64,
    /// Contractive stages followed by dropout. `None` means the two deepest.
    pub dropout_stages: Option<Vec<usize>>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 32,
            dropout_p: 0.5,
            dropout_stages: None,
            in_channels: 3,
            out_channels: 1,
        }
    }
}

impl UNetConfig {
    pub fn small(depth: usize, base_channels: usize) -> Self {
        UNetConfig {
            depth,
            base_channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 6 || !PATCH_SIZE.is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "depth {} does not divide {PATCH_SIZE} into whole pooling stages",
                self.depth
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.in_channels != 3 || self.out_channels != 1 {
            return Err(Error::Config(
                "only 3 input channels and 1 output channel are supported".into(),
            ));
        }
        if let Some(stages) = &self.dropout_stages {
            if let Some(s) = stages.iter().find(|&&s| s >= self.depth) {
                return Err(Error::Config(format!(
                    "dropout stage {s} beyond depth {}",
                    self.depth
                )));
            }
        }
        Ok(())
    }

    pub fn dropout_stages(&self) -> Vec<usize> {
        match &self.dropout_stages {
            Some(s) => s.clone(),
            None => (self.depth.saturating_sub(2)..self.depth).collect(),
        }
    }

    fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// `(name, out, in, kernel)` for every convolution, in forward order.
    fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let mut layers = Vec::new();
        let mut prev = self.in_channels;
        for s in 0..self.depth {
            let ch = self.channels(s);
            layers.push((format!("enc{s}.conv1"), ch, prev, 3));
            layers.push((format!("enc{s}.conv2"), ch, ch, 3));
            prev = ch;
        }
        let bottom = self.channels(self.depth);
        layers.push(("bottleneck.conv1".into(), bottom, prev, 3));
        layers.push(("bottleneck.conv2".into(), bottom, bottom, 3));
        for s in (0..self.depth).rev() {
            let ch = self.channels(s);
            layers.push((format!("dec{s}.up"), ch, self.channels(s + 1), 3));
            layers.push((format!("dec{s}.conv1"), ch, 2 * ch, 3));
            layers.push((format!("dec{s}.conv2"), ch, ch, 3));
        }
        layers.push(("head".into(), self.out_channels, self.channels(0), 1));
        layers
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from `seed`.
    Train { seed: u64 },
    Eval,
}

/// Encoder/decoder segmentation network with skip connections.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T> {
    config: UNetConfig,
    params: Vec<Param<T>>,
}

impl<T: Float> UNet<T> {
    /// He-initialised weights (variance 2/fan_in) and zero biases.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, out, inp, k) in config.layers() {
            let fan_in = inp * k * k;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let weight = Tensor::from_fn(&[out, inp, k, k], |_| T::from_f64(normal.sample(&mut rng)));
            params.push(Param {
                name: format!("{name}.weight"),
                value: weight,
            });
            params.push(Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros(&[out]),
            });
        }
        Ok(UNet { config, params })
    }

    pub(crate) fn from_params(config: UNetConfig, params: Vec<Param<T>>) -> Result<Self> {
        let reference = Self::build(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors for this configuration, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (r, p) in reference.params.iter().zip(&params) {
            if r.name != p.name || r.value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.value.shape(),
                    r.name,
                    r.value.shape()
                )));
            }
        }
        Ok(UNet { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Converts parameters to another precision.
    pub fn cast<U: Float>(&self) -> UNet<U> {
        UNet {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Records every parameter on the tape as a trainable leaf, in order.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    /// Runs the network on an `N×3×H×W` input and returns `N×1×H×W`
    /// probabilities. `params` must come from [`UNet::register`] on the same tape.
    pub fn forward(&self, tape: &mut Tape<T>, params: &[Var], input: Var, mode: Mode) -> Result<Var> {
        let [_, c, h, w] = tape.value(input)?.dims4()?;
        let scale = 1 << self.config.depth;
        if c != self.config.in_channels || h % scale != 0 || w % scale != 0 {
            return Err(Error::Shape(format!(
                "input {c}×{h}×{w} incompatible with depth {} and {} channels",
                self.config.depth, self.config.in_channels
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let dropout_stages = self.config.dropout_stages();
        let mut pv = params.chunks(2);
        let mut conv = |tape: &mut Tape<T>, x: Var, relu: bool| -> Result<Var> {
            let wb = pv.next().expect("layer list and parameters agree");
            let y = tape.conv2d(x, wb[0], wb[1])?;
            if relu {
                tape.relu(y)
            } else {
                Ok(y)
            }
        };

        let mut x = input;
        let mut skips = Vec::with_capacity(self.config.depth);
        for s in 0..self.config.depth {
            x = conv(tape, x, true)?;
            x = conv(tape, x, true)?;
            if let (Mode::Train { seed }, true) = (mode, dropout_stages.contains(&s)) {
                x = tape.dropout(x, self.config.dropout_p, true, seed::derive(seed, &[s as u64]))?;
            }
            skips.push(x);
            x = tape.max_pool2d(x)?;
        }
        x = conv(tape, x, true)?;
        x = conv(tape, x, true)?;
        for s in (0..self.config.depth).rev() {
            x = tape.upsample_nearest2x(x)?;
            x = conv(tape, x, true)?;
            x = tape.concat_channels(skips[s], x)?;
            x = conv(tape, x, true)?;
            x = conv(tape, x, true)?;
        }
        let logits = conv(tape, x, false)?;
        tape.sigmoid(logits)
    }

    /// Probability maps for a batch of patches, dropout disabled.
    pub fn predict_batch(&self, images: &[&RgbRaster]) -> Result<Vec<Vec<f32>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let input = images_to_tensor(images)?;
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let x = tape.constant(input);
        let out = self.forward(&mut tape, &params, x, Mode::Eval)?;
        let plane = PATCH_SIZE * PATCH_SIZE;
        Ok(tape
            .value(out)?
            .data()
            .chunks(plane)
            .map(|c| c.iter().map(|v| v.to_f32().unwrap()).collect())
            .collect())
    }

    /// Probability map for one 64×64 patch.
    pub fn predict(&self, image: &RgbRaster) -> Result<Vec<f32>> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }

    /// Predicts many patches in batches of `batch`.
    pub fn predict_all(&self, images: &[&RgbRaster], batch: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            out.extend(self.predict_batch(chunk)?);
        }
        Ok(out)
    }
}

/// Packs 64×64 RGB patches into an `N×3×64×64` tensor scaled to `[0, 1]`.
pub fn images_to_tensor<T: Float>(images: &[&RgbRaster]) -> Result<Tensor<T>> {
    let plane = PATCH_SIZE * PATCH_SIZE;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        if (img.width, img.height) != (PATCH_SIZE, PATCH_SIZE) {
            return Err(Error::Shape(format!(
                "model input must be {PATCH_SIZE}×{PATCH_SIZE}, got {}×{}",
                img.width, img.height
            )));
        }
        for c in 0..3 {
            data.extend(img.pixels.iter().map(|p| T::from_f64(p[c] as f64 / 255.0)));
        }
    }
    Tensor::new(&[images.len(), 3, PATCH_SIZE, PATCH_SIZE], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u8) -> RgbRaster {
        let px = (0..4096)
            .map(|i| [(i as u8).wrapping_mul(seed), seed, (i / 64) as u8, 255])
            .collect();
        RgbRaster::new(64, 64, px).unwrap()
    }

    #[test]
    fn shape_contract() {
        let m = UNet::<f32>::build(UNetConfig::small(1, 4), 1).unwrap();
        let mut tape = Tape::new();
        let p = m.register(&mut tape);
        let x = tape.constant(images_to_tensor(&[&image(3)]).unwrap());
        let y = m.forward(&mut tape, &p, x, Mode::Eval).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[1, 1, 64, 64]);
        assert!(tape
            .value(y)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn build_is_deterministic() {
        let a = UNet::<f32>::build(UNetConfig::small(2, 4), 9).unwrap();
        let b = UNet::<f32>::build(UNetConfig::small(2, 4), 9).unwrap();
        let c = UNet::<f32>::build(UNetConfig::small(2, 4), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn excessive_depth_rejected() {
        assert!(matches!(
            UNet::<f32>::build(UNetConfig::small(7, 4), 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            UNet::<f32>::build(UNetConfig::small(0, 4), 0),
            Err(Error::Config(_))
        ));
        assert!(UNet::<f32>::build(UNetConfig::small(6, 1), 0).is_ok());
    }

    #[test]
    fn default_dropout_placement() {
        assert_eq!(UNetConfig::default().dropout_stages(), vec![2, 3]);
        assert_eq!(UNetConfig::small(1, 4).dropout_stages(), vec![0]);
    }

    #[test]
    fn param_count_single_conv_layers() {
        // a lone 3×3 1→1 convolution holds 9 weights and 1 bias
        let conv = Param {
            name: "c".into(),
            value: Tensor::<f32>::zeros(&[1, 1, 3, 3]),
        };
        let bias = Param {
            name: "b".into(),
            value: Tensor::<f32>::zeros(&[1]),
        };
        let one = UNet {
            config: UNetConfig::default(),
            params: vec![conv.clone(), bias.clone()],
        };
        assert_eq!(one.param_count(), 10);
        let two = UNet {
            config: UNetConfig::default(),
            params: vec![conv.clone(), bias.clone(), conv, bias],
        };
        assert_eq!(two.param_count(), 20);
    }

    #[test]
    fn default_param_count_is_stable() {
        let m = UNet::<f32>::build(UNetConfig::default(), 0).unwrap();
        assert_eq!(m.param_count(), DEFAULT_PARAM_COUNT);
    }

    /// Regression value for the depth-4, base-32 configuration.
    const DEFAULT_PARAM_COUNT: usize = 8_630_497;

    #[test]
    fn prediction_is_deterministic_and_isolated() {
        let m = UNet::<f32>::build(UNetConfig::small(2, 4), 5).unwrap();
        let img = image(7);
        let first = m.predict(&img).unwrap();
        assert_eq!(first.len(), 4096);
        assert!(first.iter().all(|&v| v > 0.0 && v < 1.0));

        let mut other = UNet::<f32>::build(UNetConfig::small(2, 4), 5).unwrap();
        let sample = crate::dataset::PatchSample::new(
            "x",
            image(9),
            crate::raster::MaskRaster::zeros(64, 64),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        train(&mut other, &[sample], &cfg, &crate::dataset::AugmentConfig::default()).unwrap();
        assert_ne!(other, m);
        assert_eq!(m.predict(&img).unwrap(), first);
    }

    #[test]
    fn predict_rejects_wrong_size() {
        let m = UNet::<f32>::build(UNetConfig::small(1, 2), 5).unwrap();
        let img = RgbRaster::filled(32, 32, [0, 0, 0, 255]);
        assert!(matches!(m.predict(&img), Err(Error::Shape(_))));
    }
}
