//! Gait energy images and the GEINet classifier.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::tape::softmax_rows;
use crate::nn::{Adam, Conv2d, Linear, ParamStore, Tape, Tensor, Var};
use crate::silhouette::{save_frame_png, write_text, FrameGeometry, GaitSequence, SilhouetteFrame};

/// Pixelwise mean of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitEnergyImage {
    pub frame: SilhouetteFrame,
    pub subject_label: Option<String>,
    pub source_sequence_id: String,
}

impl GaitEnergyImage {
    pub fn geometry(&self) -> FrameGeometry {
        self.frame.geometry()
    }

    pub fn pixels(&self) -> &[f64] {
        self.frame.pixels()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_frame_png(&self.frame, path)
    }
}

pub fn compute_gei(seq: &GaitSequence) -> Result<GaitEnergyImage> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    let g = seq.geometry();
    let mut acc = vec![0.0; g.pixels()];
    for f in seq.frames() {
        acc.iter_mut().zip(f.pixels()).for_each(|(a, p)| *a += p);
    }
    let n = seq.len() as f64;
    let px = acc.into_iter().map(|v| (v / n).clamp(0.0, 1.0)).collect();
    Ok(GaitEnergyImage {
        frame: SilhouetteFrame::from_pixels(g, px)?,
        subject_label: seq.subject().map(str::to_string),
        source_sequence_id: seq.id().to_string(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeinetConfig {
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for GeinetConfig {
    fn default() -> Self {
        Self {
            conv1_channels: 18,
            conv1_kernel: 7,
            conv2_channels: 45,
            conv2_kernel: 5,
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Net {
    conv1: Conv2d,
    conv2: Conv2d,
    head: Linear,
}

/// Two conv + ReLU + 2×2 max-pool stages and a dense softmax head.
#[derive(Clone, Debug)]
pub struct GeinetModel {
    config: GeinetConfig,
    geometry: FrameGeometry,
    labels: Vec<String>,
    store: ParamStore,
    net: Net,
}

const GEINET_KIND: &str = "geinet";

impl GeinetModel {
    pub fn new(config: GeinetConfig, geometry: FrameGeometry, labels: Vec<String>) -> Result<Self> {
        let stage = |size: usize, k: usize| size.checked_sub(k - 1).map(|s| s / 2).filter(|s| *s > 0);
        let (h2, w2) = match (
            stage(geometry.height, config.conv1_kernel).and_then(|h| stage(h, config.conv2_kernel)),
            stage(geometry.width, config.conv1_kernel).and_then(|w| stage(w, config.conv2_kernel)),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "geometry {geometry} too small for the classifier kernels"
                )))
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c1 = config.conv1_channels;
        let c2 = config.conv2_channels;
        let net = Net {
            conv1: Conv2d::new(&mut store, "conv1", 1, c1, config.conv1_kernel, 1, 0, &mut rng),
            conv2: Conv2d::new(&mut store, "conv2", c1, c2, config.conv2_kernel, 1, 0, &mut rng),
            head: Linear::new(&mut store, "head", c2 * h2 * w2, labels.len(), &mut rng),
        };
        Ok(Self {
            config,
            geometry,
            labels,
            store,
            net,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.geometry
    }

    fn logits(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = self.net.conv1.forward(tape, x);
        h = tape.relu(h);
        h = tape.maxpool2x2(h);
        h = self.net.conv2.forward(tape, h);
        h = tape.relu(h);
        h = tape.maxpool2x2(h);
        let b = tape.shape(h)[0];
        let flat = tape.shape(h)[1..].iter().product();
        h = tape.reshape(h, vec![b, flat]);
        self.net.head.forward(tape, h)
    }

    fn input(&self, geis: &[&GaitEnergyImage]) -> Result<Tensor> {
        let g = self.geometry;
        let mut data = Vec::with_capacity(geis.len() * g.pixels());
        for gei in geis {
            g.check(gei.geometry())?;
            data.extend_from_slice(gei.pixels());
        }
        Ok(Tensor::new(vec![geis.len(), 1, g.height, g.width], data))
    }

    /// Class probabilities in label order, one row per input.
    pub fn probabilities(&self, geis: &[&GaitEnergyImage]) -> Result<Vec<Vec<f64>>> {
        if geis.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.input(geis)?;
        let mut tape = Tape::new(&self.store);
        let xv = tape.input(x);
        let logits = self.logits(&mut tape, xv);
        let c = self.labels.len();
        Ok(softmax_rows(tape.value(logits), c).chunks(c).map(<[f64]>::to_vec).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new(GEINET_KIND);
        w.usize(self.geometry.width);
        w.usize(self.geometry.height);
        w.usize(c.conv1_channels);
        w.usize(c.conv1_kernel);
        w.usize(c.conv2_channels);
        w.usize(c.conv2_kernel);
        w.usize(c.epochs);
        w.f64(c.learning_rate);
        w.usize(c.batch_size);
        w.u64(c.seed);
        w.usize(self.labels.len());
        for l in &self.labels {
            w.str(l);
        }
        w.params(&self.store);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, GEINET_KIND)?;
        let geometry = FrameGeometry::new(r.usize()?, r.usize()?)?;
        let config = GeinetConfig {
            conv1_channels: r.usize()?,
            conv1_kernel: r.usize()?,
            conv2_channels: r.usize()?,
            conv2_kernel: r.usize()?,
            epochs: r.usize()?,
            learning_rate: r.f64()?,
            batch_size: r.usize()?,
            seed: r.u64()?,
        };
        let n = r.usize()?;
        let labels = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let mut model = Self::new(config, geometry, labels)?;
        r.params_into(&mut model.store)?;
        r.finish()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeinetEpoch {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeinetTrainingLog {
    pub epochs: Vec<GeinetEpoch>,
}

impl GeinetTrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,train_accuracy\n");
        for (i, e) in self.epochs.iter().enumerate() {
            writeln!(s, "{},{:.9},{:.6}", i + 1, e.loss, e.accuracy).unwrap();
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())
    }
}

/// Trains on labelled GEIs with softmax cross-entropy and Adam. Class order
/// is the sorted set of labels.
pub fn train_geinet(gallery: &[GaitEnergyImage], config: &GeinetConfig) -> Result<(GeinetModel, GeinetTrainingLog)> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut labels = BTreeSet::new();
    for gei in gallery {
        let l = gei.subject_label.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("gallery GEI {} has no label", gei.source_sequence_id))
        })?;
        labels.insert(l.clone());
    }
    if labels.len() < 2 {
        return Err(Error::SingleClass);
    }
    let labels: Vec<String> = labels.into_iter().collect();
    let targets: Vec<usize> = gallery
        .iter()
        .map(|g| labels.binary_search(g.subject_label.as_ref().unwrap()).unwrap())
        .collect();
    let geometry = gallery[0].geometry();
    let mut model = GeinetModel::new(config.clone(), geometry, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    let mut log = GeinetTrainingLog { epochs: Vec::new() };
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let geis: Vec<&GaitEnergyImage> = chunk.iter().map(|&i| &gallery[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let x = model.input(&geis)?;
            let mut tape = Tape::new(&model.store);
            let xv = tape.input(x);
            let logits = model.logits(&mut tape, xv);
            let c = model.labels.len();
            let probs = softmax_rows(tape.value(logits), c);
            correct += probs
                .chunks(c)
                .zip(&ys)
                .filter(|(p, y)| argmax(p) == **y)
                .count();
            let loss = tape.softmax_cross_entropy(logits, ys);
            loss_sum += tape.scalar(loss) * chunk.len() as f64;
            let grads = tape.backward(loss);
            adam.step(&mut model.store, &grads);
        }
        let n = gallery.len() as f64;
        log.epochs.push(GeinetEpoch {
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        });
    }
    Ok((model, log))
}

fn argmax(p: &[f64]) -> usize {
    let mut b = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[b] {
            b = i;
        }
    }
    b
}

/// All classes ranked by probability (descending; ties keep label order).
pub fn classify(gei: &GaitEnergyImage, model: &GeinetModel) -> Result<Vec<(String, f64)>> {
    Ok(classify_batch(&[gei], model)?.remove(0))
}

pub fn classify_batch(geis: &[&GaitEnergyImage], model: &GeinetModel) -> Result<Vec<Vec<(String, f64)>>> {
    Ok(model
        .probabilities(geis)?
        .into_iter()
        .map(|p| {
            let mut ranked: Vec<(String, f64)> = model.labels.iter().cloned().zip(p).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            ranked
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_walker, SyntheticWalkerParams};

    fn g() -> FrameGeometry {
        FrameGeometry::new(24, 24).unwrap()
    }

    fn constant(v: f64) -> SilhouetteFrame {
        SilhouetteFrame::from_pixels(g(), vec![v; g().pixels()]).unwrap()
    }

    #[test]
    fn gei_is_mean() {
        let f = SilhouetteFrame::from_pixels(g(), (0..576).map(|i| (i % 2) as f64).collect()).unwrap();
        let seq = GaitSequence::new("a", None, vec![f.clone(); 4]).unwrap();
        assert_eq!(compute_gei(&seq).unwrap().frame.pixels(), f.pixels());
        let half = GaitSequence::new("b", None, vec![constant(1.0), constant(0.0), constant(1.0), constant(0.0)]).unwrap();
        assert!(compute_gei(&half).unwrap().pixels().iter().all(|p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn gei_is_length_weighted() {
        let p = SyntheticWalkerParams::default();
        let a = generate_synthetic_walker(&p, 7, 1).unwrap();
        let b = generate_synthetic_walker(&p, 12, 2).unwrap();
        let mut frames = a.frames().to_vec();
        frames.extend_from_slice(b.frames());
        let joined = GaitSequence::new("j", None, frames).unwrap();
        let gj = compute_gei(&joined).unwrap();
        let (ga, gb) = (compute_gei(&a).unwrap(), compute_gei(&b).unwrap());
        for ((j, x), y) in gj.pixels().iter().zip(ga.pixels()).zip(gb.pixels()) {
            assert!((j - (7.0 * x + 12.0 * y) / 19.0).abs() < 1e-9);
        }
    }

    #[test]
    fn whole_periods_give_stable_gei() {
        let p = SyntheticWalkerParams::default();
        let one = compute_gei(&generate_synthetic_walker(&p, 30, 3).unwrap()).unwrap();
        let two = compute_gei(&generate_synthetic_walker(&p, 60, 3).unwrap()).unwrap();
        let mad = one.pixels().iter().zip(two.pixels()).map(|(a, b)| (a - b).abs()).sum::<f64>() / one.pixels().len() as f64;
        assert!(mad < 0.02);
    }

    fn toy_gallery() -> Vec<GaitEnergyImage> {
        // Class "a": bright left half, class "b": bright right half.
        (0..20)
            .map(|i| {
                let left = i % 2 == 0;
                let px = (0..576)
                    .map(|p| {
                        let x = p % 24;
                        let jitter = ((p * 7 + i * 13) % 10) as f64 / 50.0;
                        if (x < 12) == left { 0.8 + jitter } else { jitter }
                    })
                    .collect();
                GaitEnergyImage {
                    frame: SilhouetteFrame::from_pixels(g(), px).unwrap(),
                    subject_label: Some(if left { "a" } else { "b" }.into()),
                    source_sequence_id: format!("g{i}"),
                }
            })
            .collect()
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let gallery = toy_gallery();
        let cfg = GeinetConfig::default();
        let (model, log) = train_geinet(&gallery, &cfg).unwrap();
        assert_eq!(log.epochs.last().unwrap().accuracy, 1.0);
        for gei in &gallery {
            let ranked = classify(gei, &model).unwrap();
            assert_eq!(ranked.len(), 2);
            assert!((ranked.iter().map(|r| r.1).sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(Some(&ranked[0].0), gei.subject_label.as_ref());
            assert_eq!(ranked, classify(gei, &model).unwrap());
        }
        let (_, again) = train_geinet(&gallery, &cfg).unwrap();
        assert_eq!(log, again);
        let back = GeinetModel::from_bytes(&model.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), model.to_bytes());
    }

    #[test]
    fn gallery_errors() {
        assert!(matches!(train_geinet(&[], &GeinetConfig::default()), Err(Error::EmptyGallery)));
        let one: Vec<_> = toy_gallery().into_iter().step_by(2).collect();
        assert!(matches!(train_geinet(&one, &GeinetConfig::default()), Err(Error::SingleClass)));
    }
}
