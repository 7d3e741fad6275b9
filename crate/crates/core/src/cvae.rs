//! Conditional variational autoencoder over silhouettes and key-pose conditions.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::tape::{bce_term, kl_term};
use crate::nn::{Adam, BatchNorm2d, Conv2d, Gradients, KlForm, Linear, ParamStore, Tape, Tensor, Var};
use crate::pose_graph::PoseState;
use crate::silhouette::{write_text, FrameGeometry, SilhouetteFrame};

/// One-hot key pose (first `k` bits) or occlusion flag (last bit).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConditionVector {
    bits: Vec<bool>,
}

impl ConditionVector {
    pub fn from_state(state: PoseState, k: usize) -> Result<Self> {
        let mut bits = vec![false; k + 1];
        match state {
            PoseState::Key(i) if i < k => bits[i] = true,
            PoseState::Key(i) => return Err(Error::InvalidState { index: i + 1, k }),
            PoseState::Occluded => bits[k] = true,
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_occluded(&self) -> bool {
        self.bits.last().copied().unwrap_or(false)
    }

    pub fn state(&self) -> PoseState {
        let k = self.bits.len() - 1;
        match self.bits.iter().position(|b| *b) {
            Some(i) if i < k => PoseState::Key(i),
            _ => PoseState::Occluded,
        }
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.bits.iter().map(|b| f64::from(u8::from(*b)))
    }
}

/// Condition for a 1-based state index (`k + 1` is the occlusion state).
pub fn condition_vector(state_index: usize, k: usize) -> Result<ConditionVector> {
    ConditionVector::from_state(PoseState::from_index1(state_index, k)?, k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector {
    pub z: Vec<f64>,
}

/// Reparameterized draw `z = mu + exp(log_sigma) * eps`.
pub fn sample_latent(dist: &LatentDistribution, seed: u64) -> LatentVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = dist
        .mu
        .iter()
        .zip(&dist.log_sigma)
        .map(|(m, ls)| {
            let e: f64 = rng.sample(StandardNormal);
            m + ls.exp() * e
        })
        .collect();
    LatentVector { z }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvaeLossReport {
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Per-pixel mean cross-entropy plus the KL term of `dist`, weighted.
pub fn cvae_loss(
    f: &SilhouetteFrame,
    f_hat: &SilhouetteFrame,
    dist: &LatentDistribution,
    lambda1: f64,
    lambda2: f64,
    form: KlForm,
) -> Result<CvaeLossReport> {
    f.geometry().check(f_hat.geometry())?;
    let n = f.pixels().len() as f64;
    let l_rec = f.pixels().iter().zip(f_hat.pixels()).map(|(t, p)| bce_term(*p, *t)).sum::<f64>() / n;
    let l_kl = kl_value(dist, form);
    Ok(CvaeLossReport {
        l_rec,
        l_kl,
        l_total: lambda1 * l_rec + lambda2 * l_kl,
        lambda1,
        lambda2,
    })
}

pub fn kl_value(dist: &LatentDistribution, form: KlForm) -> f64 {
    dist.mu.iter().zip(&dist.log_sigma).map(|(m, ls)| kl_term(*m, *ls, form)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeConfig {
    pub geometry: FrameGeometry,
    /// Number of key poses; conditions have `k + 1` bits.
    pub k: usize,
    pub d_z: usize,
    pub channels: [usize; 3],
    pub cond_width: usize,
    pub dense_width: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kl_form: KlForm,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            geometry: FrameGeometry::default(),
            k: 16,
            d_z: 64,
            channels: [32, 64, 128],
            cond_width: 32,
            dense_width: 256,
            lambda1: 1.0,
            lambda2: 0.5,
            kl_form: KlForm::Sigma,
            epochs: 100,
            learning_rate: 0.01,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl CvaeConfig {
    fn validate(&self) -> Result<()> {
        let g = self.geometry;
        if !g.width.is_multiple_of(8) || !g.height.is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!(
                "CVAE geometry {g} must have sides divisible by 8"
            )));
        }
        if self.k < 2 || self.d_z == 0 || self.batch_size == 0 || self.channels.contains(&0) {
            return Err(Error::InvalidArgument("invalid CVAE configuration".into()));
        }
        Ok(())
    }

    fn bottleneck(&self) -> (usize, usize, usize) {
        (self.channels[2], self.geometry.height / 8, self.geometry.width / 8)
    }
}

#[derive(Clone, Debug)]
struct Net {
    cond: [Linear; 3],
    enc_conv: [Conv2d; 3],
    enc_bn: [BatchNorm2d; 3],
    enc_dense: [Linear; 2],
    mu_head: Linear,
    log_sigma_head: Linear,
    dec_dense: [Linear; 2],
    dec_conv: [Conv2d; 3],
}

impl Net {
    fn new(cfg: &CvaeConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let [c1, c2, c3] = cfg.channels;
        let (bc, bh, bw) = cfg.bottleneck();
        let flat = bc * bh * bw;
        let cw = cfg.cond_width;
        let dw = cfg.dense_width;
        Self {
            cond: [
                Linear::new(store, "cond.0", cfg.k + 1, cw, rng),
                Linear::new(store, "cond.1", cw, cw, rng),
                Linear::new(store, "cond.2", cw, cw, rng),
            ],
            enc_conv: [
                Conv2d::new(store, "enc.conv0", 1, c1, 3, 2, 1, rng),
                Conv2d::new(store, "enc.conv1", c1, c2, 3, 2, 1, rng),
                Conv2d::new(store, "enc.conv2", c2, c3, 3, 2, 1, rng),
            ],
            enc_bn: [
                BatchNorm2d::new(store, "enc.bn0", c1),
                BatchNorm2d::new(store, "enc.bn1", c2),
                BatchNorm2d::new(store, "enc.bn2", c3),
            ],
            enc_dense: [
                Linear::new(store, "enc.dense0", flat + cw, dw, rng),
                Linear::new(store, "enc.dense1", dw, dw, rng),
            ],
            mu_head: Linear::new(store, "enc.mu", dw, cfg.d_z, rng),
            log_sigma_head: Linear::new(store, "enc.log_sigma", dw, cfg.d_z, rng),
            dec_dense: [
                Linear::new(store, "dec.dense0", cfg.d_z + cw, dw, rng),
                Linear::new(store, "dec.dense1", dw, flat, rng),
            ],
            dec_conv: [
                Conv2d::new(store, "dec.conv0", c3, c2, 3, 1, 1, rng),
                Conv2d::new(store, "dec.conv1", c2, c1, 3, 1, 1, rng),
                Conv2d::new(store, "dec.conv2", c1, 1, 3, 1, 1, rng),
            ],
        }
    }

    fn embed(&self, tape: &mut Tape, c: Var) -> Var {
        let mut h = c;
        for l in &self.cond {
            h = l.forward(tape, h);
            h = tape.relu(h);
        }
        h
    }

    fn encode(&mut self, tape: &mut Tape, x: Var, emb: Var, train: bool) -> (Var, Var) {
        let mut h = x;
        for (conv, bn) in self.enc_conv.iter().zip(self.enc_bn.iter_mut()) {
            h = conv.forward(tape, h);
            h = if train { bn.forward_train(tape, h) } else { bn.forward_eval(tape, h) };
            h = tape.relu(h);
        }
        let b = tape.shape(h)[0];
        let flat = tape.shape(h)[1..].iter().product();
        h = tape.reshape(h, vec![b, flat]);
        h = tape.concat_cols(&[h, emb]);
        for l in &self.enc_dense {
            h = l.forward(tape, h);
            h = tape.relu(h);
        }
        (self.mu_head.forward(tape, h), self.log_sigma_head.forward(tape, h))
    }

    /// Returns logits `[B, 1, H, W]`.
    fn decode(&self, tape: &mut Tape, z: Var, emb: Var, bottleneck: (usize, usize, usize)) -> Var {
        let b = tape.shape(z)[0];
        let mut h = tape.concat_cols(&[z, emb]);
        for l in &self.dec_dense {
            h = l.forward(tape, h);
            h = tape.relu(h);
        }
        let (bc, bh, bw) = bottleneck;
        h = tape.reshape(h, vec![b, bc, bh, bw]);
        for (i, conv) in self.dec_conv.iter().enumerate() {
            h = tape.upsample2x(h);
            h = conv.forward(tape, h);
            if i + 1 < self.dec_conv.len() {
                h = tape.relu(h);
            }
        }
        h
    }
}

/// Trained encoder/decoder pair.
#[derive(Clone, Debug)]
pub struct CvaeModel {
    config: CvaeConfig,
    store: ParamStore,
    net: Net,
}

const CVAE_KIND: &str = "cvae";

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl CvaeModel {
    /// Freshly initialized model.
    pub fn new(config: CvaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let net = Net::new(&config, &mut store, &mut rng);
        Ok(Self { config, store, net })
    }

    pub fn config(&self) -> &CvaeConfig {
        &self.config
    }

    pub fn d_z(&self) -> usize {
        self.config.d_z
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.config.geometry
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn frames_input(&self, frames: &[&SilhouetteFrame]) -> Result<Tensor> {
        let g = self.config.geometry;
        let mut data = Vec::with_capacity(frames.len() * g.pixels());
        for f in frames {
            g.check(f.geometry())?;
            data.extend_from_slice(f.pixels());
        }
        Ok(Tensor::new(vec![frames.len(), 1, g.height, g.width], data))
    }

    fn cond_input(&self, conds: &[&ConditionVector]) -> Result<Tensor> {
        let w = self.config.k + 1;
        let mut data = Vec::with_capacity(conds.len() * w);
        for c in conds {
            if c.len() != w {
                return Err(Error::DimensionMismatch {
                    expected: w,
                    actual: c.len(),
                });
            }
            data.extend(c.values());
        }
        Ok(Tensor::new(vec![conds.len(), w], data))
    }

    pub fn encode(&self, frame: &SilhouetteFrame, c: &ConditionVector) -> Result<LatentDistribution> {
        Ok(self.encode_batch(&[frame], &[c])?.remove(0))
    }

    /// Inference-mode encoding (batch-norm running statistics).
    pub fn encode_batch(&self, frames: &[&SilhouetteFrame], conds: &[&ConditionVector]) -> Result<Vec<LatentDistribution>> {
        if frames.len() != conds.len() {
            return Err(Error::LengthMismatch {
                expected: frames.len(),
                actual: conds.len(),
            });
        }
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.frames_input(frames)?;
        let c = self.cond_input(conds)?;
        let mut net = self.net.clone();
        let mut tape = Tape::new(&self.store);
        let xv = tape.input(x);
        let cv = tape.input(c);
        let emb = net.embed(&mut tape, cv);
        let (mu, ls) = net.encode(&mut tape, xv, emb, false);
        let d = self.config.d_z;
        Ok(tape
            .value(mu)
            .chunks(d)
            .zip(tape.value(ls).chunks(d))
            .map(|(m, l)| LatentDistribution {
                mu: m.to_vec(),
                log_sigma: l.to_vec(),
            })
            .collect())
    }

    pub fn decode(&self, z: &LatentVector, c: &ConditionVector) -> Result<SilhouetteFrame> {
        Ok(self.decode_batch(&[&z.z], &[c])?.remove(0))
    }

    pub fn decode_batch(&self, zs: &[&[f64]], conds: &[&ConditionVector]) -> Result<Vec<SilhouetteFrame>> {
        if zs.len() != conds.len() {
            return Err(Error::LengthMismatch {
                expected: zs.len(),
                actual: conds.len(),
            });
        }
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.config.d_z;
        let mut zdata = Vec::with_capacity(zs.len() * d);
        for z in zs {
            if z.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: z.len(),
                });
            }
            zdata.extend_from_slice(z);
        }
        let c = self.cond_input(conds)?;
        let mut tape = Tape::new(&self.store);
        let zv = tape.input(Tensor::new(vec![zs.len(), d], zdata));
        let cv = tape.input(c);
        let emb = self.net.embed(&mut tape, cv);
        let logits = self.net.decode(&mut tape, zv, emb, self.config.bottleneck());
        let g = self.config.geometry;
        tape.value(logits)
            .chunks(g.pixels())
            .map(|l| SilhouetteFrame::from_pixels(g, l.iter().map(|v| sigmoid(*v)).collect()))
            .collect()
    }

    /// Training-mode loss of one batch with the given standard-normal noise
    /// (`B × d_z`), plus parameter gradients.
    pub fn batch_loss(
        &mut self,
        frames: &[&SilhouetteFrame],
        conds: &[&ConditionVector],
        noise: &[f64],
    ) -> Result<(CvaeLossReport, Gradients)> {
        let b = frames.len();
        let d = self.config.d_z;
        if noise.len() != b * d {
            return Err(Error::LengthMismatch {
                expected: b * d,
                actual: noise.len(),
            });
        }
        let x = self.frames_input(frames)?;
        let c = self.cond_input(conds)?;
        let target = x.data().to_vec();
        let bottleneck = self.config.bottleneck();
        let (l1, l2, form) = (self.config.lambda1, self.config.lambda2, self.config.kl_form);
        let Self { store, net, .. } = self;
        let mut tape = Tape::new(store);
        let xv = tape.input(x);
        let cv = tape.input(c);
        let emb = net.embed(&mut tape, cv);
        let (mu, ls) = net.encode(&mut tape, xv, emb, true);
        let eps = tape.input(Tensor::new(vec![b, d], noise.to_vec()));
        let sigma = tape.exp(ls);
        let spread = tape.mul(sigma, eps);
        let z = tape.add(mu, spread);
        let logits = net.decode(&mut tape, z, emb, bottleneck);
        let rec = tape.sigmoid_bce(logits, target);
        let kl = tape.kl_div(mu, ls, form);
        let total = tape.weighted_sum(&[(rec, l1), (kl, l2)]);
        let report = CvaeLossReport {
            l_rec: tape.scalar(rec),
            l_kl: tape.scalar(kl),
            l_total: tape.scalar(total),
            lambda1: l1,
            lambda2: l2,
        };
        Ok((report, tape.backward(total)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new(CVAE_KIND);
        w.usize(c.geometry.width);
        w.usize(c.geometry.height);
        w.usize(c.k);
        w.usize(c.d_z);
        w.usizes(&c.channels);
        w.usize(c.cond_width);
        w.usize(c.dense_width);
        w.f64(c.lambda1);
        w.f64(c.lambda2);
        w.u32(match c.kl_form {
            KlForm::Sigma => 0,
            KlForm::Standard => 1,
        });
        w.usize(c.epochs);
        w.f64(c.learning_rate);
        w.usize(c.batch_size);
        w.u64(c.seed);
        w.params(&self.store);
        for bn in &self.net.enc_bn {
            w.f64s(&bn.running_mean);
            w.f64s(&bn.running_var);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, CVAE_KIND)?;
        let geometry = FrameGeometry::new(r.usize()?, r.usize()?)?;
        let k = r.usize()?;
        let d_z = r.usize()?;
        let ch = r.usizes()?;
        let channels: [usize; 3] = ch
            .try_into()
            .map_err(|_| Error::Checkpoint("CVAE channel ladder must have 3 entries".into()))?;
        let config = CvaeConfig {
            geometry,
            k,
            d_z,
            channels,
            cond_width: r.usize()?,
            dense_width: r.usize()?,
            lambda1: r.f64()?,
            lambda2: r.f64()?,
            kl_form: match r.u32()? {
                0 => KlForm::Sigma,
                1 => KlForm::Standard,
                v => return Err(Error::Checkpoint(format!("unknown KL form {v}"))),
            },
            epochs: r.usize()?,
            learning_rate: r.f64()?,
            batch_size: r.usize()?,
            seed: r.u64()?,
        };
        let mut model = Self::new(config)?;
        r.params_into(&mut model.store)?;
        for bn in model.net.enc_bn.iter_mut() {
            let mean = r.f64s()?;
            let var = r.f64s()?;
            if mean.len() != bn.running_mean.len() || var.len() != bn.running_var.len() {
                return Err(Error::Checkpoint("batch-norm statistics size mismatch".into()));
            }
            bn.running_mean = mean;
            bn.running_var = var;
        }
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

/// Per-epoch mean losses.
#[derive(Clone, Debug, PartialEq)]
pub struct CvaeTrainingLog {
    pub epochs: Vec<CvaeLossReport>,
}

impl CvaeTrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,l_rec,l_kl,l_total\n");
        for (i, e) in self.epochs.iter().enumerate() {
            writeln!(s, "{},{:.9},{:.9},{:.9}", i + 1, e.l_rec, e.l_kl, e.l_total).unwrap();
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())
    }
}

/// Trains with Adam on shuffled mini-batches; one reparameterization draw per
/// sample per step.
pub fn train_cvae(corpus: &[(SilhouetteFrame, ConditionVector)], config: &CvaeConfig) -> Result<(CvaeModel, CvaeTrainingLog)> {
    let mut model = CvaeModel::new(config.clone())?;
    let log = continue_training(&mut model, corpus, config.epochs)?;
    Ok((model, log))
}

/// Runs `epochs` further epochs on an existing model (fresh optimizer state).
pub fn continue_training(
    model: &mut CvaeModel,
    corpus: &[(SilhouetteFrame, ConditionVector)],
    epochs: usize,
) -> Result<CvaeTrainingLog> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cfg = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = CvaeTrainingLog { epochs: Vec::new() };
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let (mut rec, mut kl, mut tot) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let frames: Vec<&SilhouetteFrame> = chunk.iter().map(|&i| &corpus[i].0).collect();
            let conds: Vec<&ConditionVector> = chunk.iter().map(|&i| &corpus[i].1).collect();
            let noise: Vec<f64> = (0..chunk.len() * cfg.d_z).map(|_| rng.sample(StandardNormal)).collect();
            let (report, grads) = model.batch_loss(&frames, &conds, &noise)?;
            adam.step(&mut model.store, &grads);
            let w = chunk.len() as f64;
            rec += report.l_rec * w;
            kl += report.l_kl * w;
            tot += report.l_total * w;
        }
        let n = corpus.len() as f64;
        let entry = CvaeLossReport {
            l_rec: rec / n,
            l_kl: kl / n,
            l_total: tot / n,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
        };
        log::debug!("cvae epoch {} l_rec {:.5} l_kl {:.5}", epoch + 1, entry.l_rec, entry.l_kl);
        log.epochs.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_config() -> CvaeConfig {
        CvaeConfig {
            geometry: FrameGeometry::new(8, 8).unwrap(),
            k: 4,
            d_z: 3,
            channels: [2, 2, 2],
            cond_width: 3,
            dense_width: 5,
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 4,
            ..Default::default()
        }
    }

    fn blob(g: FrameGeometry, x0: usize) -> SilhouetteFrame {
        let px = (0..g.pixels())
            .map(|i| {
                let (y, x) = (i / g.width, i % g.width);
                if (x0..x0 + 3).contains(&x) && (1..7).contains(&y) { 1.0 } else { 0.0 }
            })
            .collect();
        SilhouetteFrame::from_pixels(g, px).unwrap()
    }

    #[test]
    fn condition_bits() {
        let c = condition_vector(3, 16).unwrap();
        assert_eq!(c.len(), 17);
        assert!(c.bits()[2] && c.bits().iter().filter(|b| **b).count() == 1);
        let o = condition_vector(17, 16).unwrap();
        assert!(o.is_occluded() && o.bits().iter().filter(|b| **b).count() == 1);
        assert!(matches!(condition_vector(0, 16), Err(Error::InvalidState { .. })));
        assert_eq!(c.state(), PoseState::Key(2));
    }

    #[test]
    fn loss_identities() {
        let g = FrameGeometry::new(4, 4).unwrap();
        let f = SilhouetteFrame::from_pixels(g, (0..16).map(|i| (i % 2) as f64).collect()).unwrap();
        let zero = LatentDistribution {
            mu: vec![0.0; 64],
            log_sigma: vec![0.0; 64],
        };
        let r = cvae_loss(&f, &f, &zero, 1.0, 0.5, KlForm::Sigma).unwrap();
        assert!((r.l_rec - 1e-7).abs() < 1e-9);
        assert_eq!(r.l_kl, 0.0);
        let one = LatentDistribution {
            mu: vec![1.0; 64],
            log_sigma: vec![0.0; 64],
        };
        let r = cvae_loss(&f, &f, &one, 1.0, 0.5, KlForm::Sigma).unwrap();
        assert!((r.l_kl - 64.0).abs() < 1e-12);
        assert!((r.l_total - (r.l_rec + 0.5 * r.l_kl)).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(mu in -5.0f64..5.0, ls in -5.0f64..5.0) {
            for form in [KlForm::Sigma, KlForm::Standard] {
                prop_assert!(kl_term(mu, ls, form) >= 0.0);
            }
        }
    }

    #[test]
    fn sampling_is_reparameterized() {
        let d = LatentDistribution {
            mu: vec![0.3, -1.2],
            log_sigma: vec![-30.0, -30.0],
        };
        let z = sample_latent(&d, 5);
        assert!((z.z[0] - 0.3).abs() < 1e-9 && (z.z[1] + 1.2).abs() < 1e-9);
        assert_eq!(sample_latent(&d, 5), z);
    }

    #[test]
    fn geometry_must_divide_by_eight() {
        let cfg = CvaeConfig {
            geometry: FrameGeometry::new(12, 16).unwrap(),
            ..tiny_config()
        };
        assert!(CvaeModel::new(cfg).is_err());
    }

    #[test]
    fn inference_contracts() {
        let model = CvaeModel::new(tiny_config()).unwrap();
        let g = model.geometry();
        let f = blob(g, 2);
        let c = condition_vector(2, 4).unwrap();
        let a = model.encode(&f, &c).unwrap();
        assert_eq!(a, model.encode(&f, &c).unwrap());
        assert_eq!(a.mu.len(), 3);
        assert!(a.mu.iter().chain(&a.log_sigma).all(|v| v.is_finite()));
        let out = model.decode(&LatentVector { z: vec![4.0, -9.0, 2.0] }, &c).unwrap();
        assert!(out.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(model.decode(&LatentVector { z: vec![0.0; 2] }, &c).is_err());
        let wrong = SilhouetteFrame::placeholder(FrameGeometry::new(16, 8).unwrap());
        assert!(matches!(model.encode(&wrong, &c), Err(Error::GeometryMismatch { .. })));
    }

    #[test]
    fn overfits_one_frame() {
        let cfg = tiny_config();
        let f = blob(cfg.geometry, 3);
        let corpus = vec![(f, condition_vector(1, 4).unwrap())];
        let (_, log) = train_cvae(&corpus, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 50);
        assert!(log.epochs.last().unwrap().l_rec < log.epochs[0].l_rec);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let cfg = CvaeConfig {
            epochs: 3,
            ..tiny_config()
        };
        let corpus: Vec<_> = (0..6)
            .map(|i| (blob(cfg.geometry, i % 5), condition_vector(1 + i % 4, 4).unwrap()))
            .collect();
        let (m1, l1) = train_cvae(&corpus, &cfg).unwrap();
        let (m2, l2) = train_cvae(&corpus, &cfg).unwrap();
        assert_eq!(l1.to_csv(), l2.to_csv());
        assert_eq!(m1.to_bytes(), m2.to_bytes());
        let back = CvaeModel::from_bytes(&m1.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), m1.to_bytes());
        let c = &corpus[0];
        assert_eq!(back.encode(&c.0, &c.1).unwrap(), m1.encode(&c.0, &c.1).unwrap());
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut model = CvaeModel::new(tiny_config()).unwrap();
        let g = model.geometry();
        let frames = [blob(g, 1), blob(g, 4)];
        let conds = [condition_vector(1, 4).unwrap(), condition_vector(5, 4).unwrap()];
        let fr: Vec<_> = frames.iter().collect();
        let cr: Vec<_> = conds.iter().collect();
        let noise = [0.3, -1.1, 0.4, 0.9, 0.0, -0.2];
        let (_, grads) = model.batch_loss(&fr, &cr, &noise).unwrap();
        let ids: Vec<_> = model.params().ids().collect();
        let h = 1e-6;
        for id in ids.into_iter().step_by(3) {
            let a = grads.param(id).map(|g| g[0]).unwrap_or(0.0);
            let orig = model.params().get(id).data()[0];
            model.params_mut().get_mut(id).data_mut()[0] = orig + h;
            let up = model.batch_loss(&fr, &cr, &noise).unwrap().0.l_total;
            model.params_mut().get_mut(id).data_mut()[0] = orig - h;
            let down = model.batch_loss(&fr, &cr, &noise).unwrap().0.l_total;
            model.params_mut().get_mut(id).data_mut()[0] = orig;
            let num = (up - down) / (2.0 * h);
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            assert!(rel < 1e-3 || (a - num).abs() < 1e-8, "{}: {a} vs {num}", model.params().name(id));
        }
    }
}
