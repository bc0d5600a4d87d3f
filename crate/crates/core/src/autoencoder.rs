//! Convolutional autoencoder trained on random scenes. Its first layer's
//! activations are the per-pixel features the symbol extractor works on.
//!
//! Encoder: 5x5 conv (F maps) -> sigmoid -> 2x2 max pool.
//! Decoder: unpool -> 5x5 conv (1 map) -> sigmoid.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{random_scene, render_scene, EnvConfig, Frame};
use crate::error::{Error, Result};
use crate::nn::{
    maxpool2, maxpool2_backward, mse, read_params, sigmoid, sigmoid_backward, sigmoid_inplace, upsample2,
    upsample2_backward, write_params, Conv2d, InputGrad, Tensor,
};
use crate::seed::SeedStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub features: usize,
    pub kernel: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub training_frames: usize,
    /// Trailing fraction of the generated frames kept out of training.
    pub holdout_fraction: f64,
    pub max_objects: usize,
    /// Starting value of every encoder bias. Negative values keep empty
    /// background quiet, which widens the saliency margin.
    pub encoder_bias_init: f64,
    pub max_holdout_mse: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            features: 8,
            kernel: 5,
            learning_rate: 1.0,
            batch_size: 16,
            epochs: 30,
            training_frames: 5000,
            holdout_fraction: 0.1,
            max_objects: 30,
            encoder_bias_init: -3.0,
            max_holdout_mse: 0.01,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features < 3 {
            return Err(Error::Config(format!(
                "autoencoder.features must be at least 3 to separate three glyphs, got {}",
                self.features
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("autoencoder.kernel must be odd".into()));
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("autoencoder batch size and learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("autoencoder.holdout_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Random scenes: object count uniform in `[0, max_objects]`, glyphs
/// uniform over all three kinds, one object per cell.
pub fn generate_training_set(env: &EnvConfig, count: usize, max_objects: usize, seed: u64) -> Vec<Frame> {
    let mut rng = SeedStream::new(seed).rng();
    (0..count)
        .map(|_| {
            let n = rng.gen_range(0..=max_objects);
            render_scene(env, &random_scene(env, n, &mut rng))
        })
        .collect()
}

/// Encoder activations at full frame resolution, pixel-major: the F values
/// of pixel `(x, y)` are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub width: usize,
    pub height: usize,
    pub features: usize,
    pub data: Vec<f32>,
}

impl FeatureStack {
    pub fn spectrum(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.features;
        &self.data[i..i + self.features]
    }

    /// Strongest feature activation at a pixel.
    pub fn saliency(&self, x: usize, y: usize) -> f32 {
        self.spectrum(x, y).iter().copied().fold(f32::MIN, f32::max)
    }

    pub fn saliency_map(&self) -> Vec<f32> {
        self.data
            .chunks_exact(self.features)
            .map(|s| s.iter().copied().fold(f32::MIN, f32::max))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    encoder: Conv2d<f32>,
    decoder: Conv2d<f32>,
    width: usize,
    height: usize,
}

pub(crate) fn frames_to_tensor(frames: &[&Frame]) -> Tensor<f32> {
    let (w, h) = (frames[0].width, frames[0].height);
    let mut data = Vec::with_capacity(frames.len() * w * h);
    for f in frames {
        data.extend_from_slice(&f.pixels);
    }
    Tensor::new(vec![frames.len(), 1, h, w], data).expect("frame sizes checked by caller")
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(cfg: &AutoencoderConfig, width: usize, height: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if width % 2 != 0 || height % 2 != 0 {
            return Err(Error::InvalidArgument(format!("frame {width}x{height} must have even sides")));
        }
        let mut encoder = Conv2d::new(1, cfg.features, cfg.kernel, rng);
        encoder.params.bias.fill(cfg.encoder_bias_init as f32);
        let decoder = Conv2d::new(cfg.features, 1, cfg.kernel, rng);
        Ok(Autoencoder {
            encoder,
            decoder,
            width,
            height,
        })
    }

    pub fn features(&self) -> usize {
        self.encoder.out_channels()
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn encoder(&self) -> &Conv2d<f32> {
        &self.encoder
    }

    fn check_frame(&self, f: &Frame) -> Result<()> {
        if (f.width, f.height) != (self.width, self.height) {
            return Err(Error::ShapeMismatch {
                expected: vec![self.height, self.width],
                actual: vec![f.height, f.width],
            });
        }
        Ok(())
    }

    /// One SGD step on a minibatch; returns the batch's mean pixel MSE.
    pub fn train_batch(&mut self, frames: &[&Frame], lr: f32) -> Result<f64> {
        for f in frames {
            self.check_frame(f)?;
        }
        let x = frames_to_tensor(frames);
        let mut a = self.encoder.forward(&x)?;
        sigmoid_inplace(&mut a);
        let (p, idx) = maxpool2(&a)?;
        let u = upsample2(&p, &idx, a.shape())?;
        let mut y = self.decoder.forward(&u)?;
        sigmoid_inplace(&mut y);
        let (loss, mut g) = mse(&y, &x)?;
        sigmoid_backward(&y, &mut g)?;
        let gu = self.decoder.backward(&g, InputGrad::At(&idx))?.expect("input gradient requested");
        let gp = upsample2_backward(&gu, &idx, p.shape())?;
        let mut ga = maxpool2_backward(&gp, &idx, a.shape())?;
        sigmoid_backward(&a, &mut ga)?;
        self.encoder.backward(&ga, InputGrad::Skip)?;
        self.encoder.params.sgd_step(lr);
        self.decoder.params.sgd_step(lr);
        Ok(loss)
    }

    /// Trains for `cfg.epochs` passes over `frames` in shuffled minibatches
    /// and returns the mean loss of every epoch.
    pub fn train<R: Rng + ?Sized>(&mut self, frames: &[Frame], cfg: &AutoencoderConfig, rng: &mut R) -> Result<Vec<f64>> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("no training frames".into()));
        }
        let mut order: Vec<usize> = (0..frames.len()).collect();
        let mut curve = Vec::with_capacity(cfg.epochs);
        for epoch in 1..=cfg.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Frame> = chunk.iter().map(|&i| &frames[i]).collect();
                let loss = self.train_batch(&batch, cfg.learning_rate as f32)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                total += loss * chunk.len() as f64;
            }
            let mean = total / frames.len() as f64;
            if !mean.is_finite() {
                return Err(Error::Diverged { epoch, loss: mean });
            }
            curve.push(mean);
        }
        Ok(curve)
    }

    pub fn reconstruct(&self, frame: &Frame) -> Result<Frame> {
        self.check_frame(frame)?;
        let x = frames_to_tensor(&[frame]);
        let mut a = self.encoder.infer(&x)?;
        sigmoid_inplace(&mut a);
        let (p, idx) = maxpool2(&a)?;
        let u = upsample2(&p, &idx, a.shape())?;
        let mut y = self.decoder.infer(&u)?;
        sigmoid_inplace(&mut y);
        Ok(Frame {
            width: self.width,
            height: self.height,
            pixels: y.into_data(),
        })
    }

    /// Mean per-pixel squared reconstruction error over `frames`.
    pub fn mean_mse(&self, frames: &[Frame]) -> Result<f64> {
        let mut total = 0.0;
        for f in frames {
            let r = self.reconstruct(f)?;
            let se: f64 = r
                .pixels
                .iter()
                .zip(&f.pixels)
                .map(|(a, b)| f64::from(a - b).powi(2))
                .sum();
            total += se / f.pixels.len() as f64;
        }
        Ok(total / frames.len().max(1) as f64)
    }

    /// Encoder activations (before pooling) at every pixel.
    pub fn encode(&self, frame: &Frame) -> Result<FeatureStack> {
        let positions: Vec<(usize, usize)> = (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .collect();
        let data = self.encode_at(frame, &positions)?;
        Ok(FeatureStack {
            width: self.width,
            height: self.height,
            features: self.features(),
            data,
        })
    }

    /// Encoder activations at selected pixels only, `F` values per pixel.
    /// Bit-identical to the corresponding entries of [`Autoencoder::encode`].
    pub fn encode_at(&self, frame: &Frame, positions: &[(usize, usize)]) -> Result<Vec<f32>> {
        self.check_frame(frame)?;
        let x = Tensor::new(vec![1, 1, self.height, self.width], frame.pixels.clone())?;
        let mut out = self.encoder.forward_at(&x, 0, positions)?;
        out.iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_params(&mut file, &[&self.encoder.params, &self.decoder.params])?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, width: usize, height: usize) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut layers = read_params(&mut file)?;
        if layers.len() != 2 {
            return Err(Error::format("autoencoder file", format!("expected 2 layers, found {}", layers.len())));
        }
        let decoder = Conv2d::from_params(layers.pop().unwrap())?;
        let encoder = Conv2d::from_params(layers.pop().unwrap())?;
        if encoder.in_channels() != 1 || decoder.in_channels() != encoder.out_channels() || decoder.out_channels() != 1 {
            return Err(Error::format("autoencoder file", "layer shapes do not chain"));
        }
        Ok(Autoencoder {
            encoder,
            decoder,
            width,
            height,
        })
    }
}

pub fn write_loss_curve(path: impl AsRef<Path>, curve: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "mean_mse"])?;
    for (i, loss) in curve.iter().enumerate() {
        w.write_record([(i + 1).to_string(), loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
