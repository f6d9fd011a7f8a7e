//! Small encoder-decoder segmentation network.
//!
//! Encoder: three 3x3 conv + relu layers (3 -> 16 stride 2, 16 -> 32 stride 2,
//! 32 -> N stride 1) producing `H/4 x W/4 x N` features. Decoder: a 1x1
//! conv to `C` class scores. Probabilities are the channel softmax of the
//! scores bilinearly upsampled by 4.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::rng::{keyed_rng, stream};
use crate::synthdata::Image;

/// Spatial reduction between images and feature maps.
pub const DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    fn zeros(name: &str, shape: &[usize]) -> Self {
        Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    fn is_bias(&self) -> bool {
        self.shape.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    feature_dim: usize,
    classes: usize,
    params: Vec<Param>,
}

/// Tape handles for the model parameters, in [`SegModel::params`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Intermediate maps of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `B x H' x W' x N` encoder features (unnormalized).
    pub features: Var,
    /// `B x H' x W' x C` decoder scores.
    pub scores: Var,
}

const LAYERS: [(&str, usize, usize); 3] = [("enc1", 2, 16), ("enc2", 2, 32), ("enc3", 1, 0)];

impl SegModel {
    /// Model with freshly initialized parameters.
    pub fn new(feature_dim: usize, classes: usize, seed: u64) -> Self {
        let mut params = Vec::new();
        let mut cin = 3;
        for (name, _, cout) in LAYERS {
            let cout = if cout == 0 { feature_dim } else { cout };
            params.push(Param::zeros(&format!("{name}.weight"), &[3, 3, cin, cout]));
            params.push(Param::zeros(&format!("{name}.bias"), &[cout]));
            cin = cout;
        }
        params.push(Param::zeros("dec.weight", &[1, 1, feature_dim, classes]));
        params.push(Param::zeros("dec.bias", &[classes]));
        let mut model = SegModel {
            feature_dim,
            classes,
            params,
        };
        model.init_params(seed);
        model
    }

    /// Kernels ~ N(0, 2 / fan_in), biases zero; deterministic per seed.
    pub fn init_params(&mut self, seed: u64) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if p.is_bias() {
                p.values.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let fan_in = (p.shape[0] * p.shape[1] * p.shape[2]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            let mut rng = keyed_rng(seed, i as u64, stream::INIT);
            p.values
                .iter_mut()
                .for_each(|v| *v = normal.sample(&mut rng));
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Records all parameters on `tape` as gradient-receiving leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                tape.param(&p.shape, p.values.clone())
                    .expect("param shapes are consistent")
            })
            .collect();
        Bound { vars }
    }

    /// Records a batch of images as a `[B, H, W, 3]` constant.
    pub fn input(&self, tape: &mut Tape, images: &[&Image]) -> Result<Var> {
        let first = images
            .first()
            .ok_or_else(|| invalid("segnet input", "empty batch"))?;
        let (h, w) = (first.height, first.width);
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(invalid(
                "segnet input",
                format!("image extents {h}x{w} must be divisible by {DOWNSAMPLE}"),
            ));
        }
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for img in images {
            if img.height != h || img.width != w {
                return Err(invalid(
                    "segnet input",
                    "images in a batch must share extents",
                ));
            }
            data.extend_from_slice(&img.data);
        }
        tape.constant(&[images.len(), h, w, 3], data)
    }

    /// Encoder features `B x H/4 x W/4 x N`.
    pub fn forward_features(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
        let shape = tape.shape(images);
        let (h, w) = (shape[shape.len() - 3], shape[shape.len() - 2]);
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(invalid(
                "forward_features",
                format!("image extents {h}x{w} must be divisible by {DOWNSAMPLE}"),
            ));
        }
        let mut x = images;
        for (layer, (_, stride, _)) in LAYERS.iter().enumerate() {
            let (k, b) = (bound.vars[2 * layer], bound.vars[2 * layer + 1]);
            x = tape.conv2d(x, k, *stride, 1)?;
            x = tape.add_channel_bias(x, b)?;
            x = tape.relu(x);
        }
        Ok(x)
    }

    /// Decoder scores `B x H' x W' x C` from features.
    pub fn forward_scores(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        let n = bound.vars.len();
        let o = tape.conv2d(features, bound.vars[n - 2], 1, 0)?;
        tape.add_channel_bias(o, bound.vars[n - 1])
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Forward> {
        let features = self.forward_features(tape, bound, images)?;
        let scores = self.forward_scores(tape, bound, features)?;
        Ok(Forward { features, scores })
    }

    /// Full-resolution class probabilities `B x H x W x C`.
    pub fn probs_from_scores(&self, tape: &mut Tape, scores: Var) -> Result<Var> {
        let up = tape.bilinear_upsample(scores, DOWNSAMPLE)?;
        Ok(tape.channel_softmax(up))
    }

    pub fn forward_probs(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
        let f = self.forward(tape, bound, images)?;
        self.probs_from_scores(tape, f.scores)
    }

    /// Inference helper: probabilities, scores and features for one batch.
    pub fn infer(&self, images: &[&Image]) -> Result<Inference> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = self.input(&mut tape, images)?;
        let f = self.forward(&mut tape, &bound, x)?;
        let p = self.probs_from_scores(&mut tape, f.scores)?;
        let score_probs = tape.channel_softmax(f.scores);
        Ok(Inference {
            features: tape.value(f.features).to_vec(),
            feature_shape: tape.shape(f.features).to_vec(),
            score_probs: tape.value(score_probs).to_vec(),
            probs: tape.value(p).to_vec(),
            prob_shape: tape.shape(p).to_vec(),
        })
    }

    /// Parameters as constants (no gradient bookkeeping).
    fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                tape.constant(&p.shape, p.values.clone())
                    .expect("param shapes are consistent")
            })
            .collect();
        Bound { vars }
    }
}

/// Values of a gradient-free forward pass.
#[derive(Debug, Clone)]
pub struct Inference {
    pub features: Vec<f64>,
    /// `[B, H', W', N]`.
    pub feature_shape: Vec<usize>,
    /// Channel softmax of the decoder scores at feature resolution.
    pub score_probs: Vec<f64>,
    pub probs: Vec<f64>,
    /// `[B, H, W, C]`.
    pub prob_shape: Vec<usize>,
}

impl Inference {
    /// Per-pixel argmax of the full-resolution probabilities.
    pub fn predictions(&self) -> Vec<u8> {
        let c = *self.prob_shape.last().unwrap();
        self.probs.chunks(c).map(|row| argmax(row) as u8).collect()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Image {
        Image::new(h, w, (0..h * w * 3).map(f).collect()).unwrap()
    }

    #[test]
    fn feature_and_prob_shapes() {
        let model = SegModel::new(32, 8, 1);
        let img = image(32, 32, |i| (i % 7) as f64 / 7.0);
        let inf = model.infer(&[&img]).unwrap();
        assert_eq!(inf.feature_shape, vec![1, 8, 8, 32]);
        assert_eq!(inf.prob_shape, vec![1, 32, 32, 8]);
        for row in inf.probs.chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let model = SegModel::new(16, 4, 2);
        let img = image(16, 16, |_| 0.0);
        let inf = model.infer(&[&img]).unwrap();
        assert!(inf.features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_decoder_gives_uniform_two_class_probs() {
        let mut model = SegModel::new(8, 2, 3);
        for p in model.params_mut() {
            if p.name.starts_with("dec") {
                p.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let img = image(8, 8, |i| (i as f64 * 0.37).sin().abs());
        let inf = model.infer(&[&img]).unwrap();
        assert!(inf.probs.iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn indivisible_extents_are_rejected() {
        let model = SegModel::new(8, 2, 3);
        let img = image(10, 8, |_| 0.5);
        assert!(model.infer(&[&img]).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = SegModel::new(32, 8, 5);
        let b = SegModel::new(32, 8, 5);
        let c = SegModel::new(32, 8, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a
            .params()
            .iter()
            .filter(|p| p.is_bias())
            .all(|p| p.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn kernel_variance_tracks_fan_in() {
        let model = SegModel::new(32, 8, 9);
        // enc1 kernel: 3x3x3x16; enc2 kernel: 3x3x16x32 has fan-in 144
        let p = model.param("enc2.weight").unwrap();
        let n = p.values.len() as f64;
        let mean = p.values.iter().sum::<f64>() / n;
        let var = p.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expect = 2.0 / 144.0;
        assert!((var - expect).abs() < 0.2 * expect, "{var} vs {expect}");
    }
}
