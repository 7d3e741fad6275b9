//! Bidirectional recurrent filtering of 6-frame latent windows and
//! reconstruction of occluded frames.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Reader, Writer};
use crate::cvae::{ConditionVector, CvaeModel};
use crate::error::{Error, Result};
use crate::evaluation::dice_score;
use crate::nn::{Adam, Linear, LstmCell, ParamStore, Tape, Tensor, Var};
use crate::occlusion::{sample_mask, sample_mask_with, OcclusionMask};
use crate::pose_graph::{PoseAssignment, PoseState};
use crate::silhouette::{write_text, GaitSequence, SilhouetteFrame};

pub const WINDOW_LEN: usize = 6;

/// Exactly [`WINDOW_LEN`] latent vectors of equal width.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentWindow {
    vectors: Vec<Vec<f64>>,
}

impl LatentWindow {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        if vectors.len() != WINDOW_LEN {
            return Err(Error::LengthMismatch {
                expected: WINDOW_LEN,
                actual: vectors.len(),
            });
        }
        let d = vectors[0].len();
        if let Some(v) = vectors.iter().find(|v| v.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: v.len(),
            });
        }
        Ok(Self { vectors })
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub(crate) fn vectors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn width(&self) -> usize {
        self.vectors[0].len()
    }

    fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.vectors.iter().flatten().copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BilstmConfig {
    pub d_z: usize,
    /// Hidden width per direction.
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Occlusion degrees cycled per batch.
    pub degree_schedule: Vec<f64>,
    /// Reuse one mask per window for every epoch instead of resampling.
    pub freeze_masks: bool,
    pub seed: u64,
}

impl Default for BilstmConfig {
    fn default() -> Self {
        Self {
            d_z: 64,
            hidden: 256,
            epochs: 100,
            learning_rate: 0.01,
            batch_size: 64,
            degree_schedule: vec![0.1, 0.3, 0.5, 0.7],
            freeze_masks: false,
            seed: 0,
        }
    }
}

impl BilstmConfig {
    fn validate(&self) -> Result<()> {
        if self.d_z == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("invalid recurrent filter configuration".into()));
        }
        if self.degree_schedule.is_empty() {
            return Err(Error::InvalidArgument("degree schedule must not be empty".into()));
        }
        if let Some(d) = self.degree_schedule.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(Error::DegreeOutOfRange(*d));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Net {
    bidir: Vec<(LstmCell, LstmCell)>,
    head: LstmCell,
    out: Linear,
}

/// Three bidirectional LSTM stages, one forward LSTM stage and a
/// time-distributed linear read-out back to the latent width.
#[derive(Clone, Debug)]
pub struct BilstmModel {
    config: BilstmConfig,
    store: ParamStore,
    net: Net,
}

const BILSTM_KIND: &str = "bilstm";

impl BilstmModel {
    pub fn new(config: BilstmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let h = config.hidden;
        let bidir = (0..3)
            .map(|l| {
                let input = if l == 0 { config.d_z } else { 2 * h };
                (
                    LstmCell::new(&mut store, &format!("bilstm{l}.fwd"), input, h, &mut rng),
                    LstmCell::new(&mut store, &format!("bilstm{l}.bwd"), input, h, &mut rng),
                )
            })
            .collect();
        let head = LstmCell::new(&mut store, "lstm_out", 2 * h, h, &mut rng);
        let out = Linear::new(&mut store, "project", h, config.d_z, &mut rng);
        Ok(Self {
            config,
            store,
            net: Net { bidir, head, out },
        })
    }

    pub fn config(&self) -> &BilstmConfig {
        &self.config
    }

    pub fn d_z(&self) -> usize {
        self.config.d_z
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn forward(net: &Net, tape: &mut Tape, xs: Vec<Var>) -> Vec<Var> {
        let mut h = xs;
        for (f, b) in &net.bidir {
            let fw = f.run(tape, &h, false);
            let bw = b.run(tape, &h, true);
            h = fw.iter().zip(&bw).map(|(a, c)| tape.concat_cols(&[*a, *c])).collect();
        }
        let h = net.head.run(tape, &h, false);
        h.into_iter().map(|v| net.out.forward(tape, v)).collect()
    }

    fn check_windows(&self, windows: &[&LatentWindow]) -> Result<()> {
        for w in windows {
            if w.width() != self.config.d_z {
                return Err(Error::DimensionMismatch {
                    expected: self.config.d_z,
                    actual: w.width(),
                });
            }
        }
        Ok(())
    }

    /// Position-major inputs: one `[B, d_z]` tensor per window position.
    fn inputs(&self, tape: &mut Tape, windows: &[&LatentWindow]) -> Vec<Var> {
        let d = self.config.d_z;
        (0..WINDOW_LEN)
            .map(|t| {
                let data = windows.iter().flat_map(|w| w.vectors[t].iter().copied()).collect();
                tape.input(Tensor::new(vec![windows.len(), d], data))
            })
            .collect()
    }

    pub fn filter_windows(&self, windows: &[&LatentWindow]) -> Result<Vec<LatentWindow>> {
        self.check_windows(windows)?;
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.config.d_z;
        let mut tape = Tape::new(&self.store);
        let xs = self.inputs(&mut tape, windows);
        let ys = Self::forward(&self.net, &mut tape, xs);
        Ok((0..windows.len())
            .map(|b| LatentWindow {
                vectors: ys.iter().map(|y| tape.value(*y)[b * d..(b + 1) * d].to_vec()).collect(),
            })
            .collect())
    }

    /// Summed squared error over positions and dims, averaged over windows,
    /// between `T(inputs)` and `targets`.
    fn loss_and_grads(&self, inputs: &[&LatentWindow], targets: &[&LatentWindow]) -> (f64, crate::nn::Gradients) {
        let mut tape = Tape::new(&self.store);
        let xs = self.inputs(&mut tape, inputs);
        let ys = Self::forward(&self.net, &mut tape, xs);
        let pred = tape.concat_cols(&ys);
        let target: Vec<f64> = targets.iter().flat_map(|w| w.flat()).collect();
        let loss = tape.squared_error(pred, target, inputs.len() as f64);
        (tape.scalar(loss), tape.backward(loss))
    }

    /// Mean per-window loss without updating the model.
    pub fn evaluate_loss(&self, inputs: &[&LatentWindow], targets: &[&LatentWindow]) -> Result<f64> {
        self.check_windows(inputs)?;
        if inputs.len() != targets.len() {
            return Err(Error::LengthMismatch {
                expected: inputs.len(),
                actual: targets.len(),
            });
        }
        Ok(self.loss_and_grads(inputs, targets).0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = Writer::new(BILSTM_KIND);
        w.usize(c.d_z);
        w.usize(c.hidden);
        w.usize(c.epochs);
        w.f64(c.learning_rate);
        w.usize(c.batch_size);
        w.f64s(&c.degree_schedule);
        w.u32(u32::from(c.freeze_masks));
        w.u64(c.seed);
        w.params(&self.store);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, BILSTM_KIND)?;
        let config = BilstmConfig {
            d_z: r.usize()?,
            hidden: r.usize()?,
            epochs: r.usize()?,
            learning_rate: r.f64()?,
            batch_size: r.usize()?,
            degree_schedule: r.f64s()?,
            freeze_masks: r.u32()? != 0,
            seed: r.u64()?,
        };
        let mut model = Self::new(config)?;
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

pub fn filter_window(w: &LatentWindow, model: &BilstmModel) -> Result<LatentWindow> {
    Ok(model.filter_windows(&[w])?.remove(0))
}

/// Stride-1 windows from each latent sequence. Sequences shorter than the
/// window are skipped and returned as errors alongside the windows.
pub fn make_training_windows(sequences: &[Vec<Vec<f64>>]) -> (Vec<LatentWindow>, Vec<Error>) {
    let mut windows = Vec::new();
    let mut skipped = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        if seq.len() < WINDOW_LEN {
            log::warn!("latent sequence {i} has {} vectors, skipping", seq.len());
            skipped.push(Error::SequenceTooShort {
                id: i.to_string(),
                len: seq.len(),
                min: WINDOW_LEN,
            });
            continue;
        }
        for start in 0..=seq.len() - WINDOW_LEN {
            match LatentWindow::new(seq[start..start + WINDOW_LEN].to_vec()) {
                Ok(w) => windows.push(w),
                Err(e) => {
                    skipped.push(e);
                    break;
                }
            }
        }
    }
    (windows, skipped)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BilstmTrainingLog {
    pub losses: Vec<f64>,
}

impl BilstmTrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,l_mse\n");
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(s, "{},{:.9}", i + 1, l).unwrap();
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())
    }
}

/// Trains the filter to map masked windows back to their clean versions.
pub fn train_bilstm(windows: &[LatentWindow], config: &BilstmConfig) -> Result<(BilstmModel, BilstmTrainingLog)> {
    if windows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = BilstmModel::new(config.clone())?;
    model.check_windows(&windows.iter().collect::<Vec<_>>())?;
    let schedule = &config.degree_schedule;
    let frozen: Option<Vec<OcclusionMask>> = if config.freeze_masks {
        Some(
            (0..windows.len())
                .map(|i| {
                    sample_mask(WINDOW_LEN, schedule[i % schedule.len()], config.seed.wrapping_add(i as u64))
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut log = BilstmTrainingLog { losses: Vec::new() };
    let mut batch_index = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let degree = schedule[batch_index % schedule.len()];
            batch_index += 1;
            let mut masked = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mask = match &frozen {
                    Some(m) => m[i].clone(),
                    None => sample_mask_with(&mut rng, WINDOW_LEN, degree, config.seed)?,
                };
                masked.push(crate::occlusion::apply_mask_latent(&windows[i], &mask)?);
            }
            let inputs: Vec<&LatentWindow> = masked.iter().collect();
            let targets: Vec<&LatentWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let (loss, grads) = model.loss_and_grads(&inputs, &targets);
            adam.step(&mut model.store, &grads);
            total += loss * chunk.len() as f64;
        }
        let mean = total / windows.len() as f64;
        log::debug!("bilstm epoch {} loss {mean:.6}", epoch + 1);
        log.losses.push(mean);
    }
    Ok((model, log))
}

/// Output of [`reconstruct_sequence`].
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub sequence: GaitSequence,
    pub was_occluded: Vec<bool>,
    /// Condition used for each frame: its mapped key pose, or the
    /// interpolated key pose for reconstructed frames.
    pub conditions: Vec<PoseState>,
    k: usize,
}

impl Reconstruction {
    /// CSV `frame,was_occluded,condition_state,dice_vs_groundtruth`; the dice
    /// column is empty without ground truth.
    pub fn report(&self, ground_truth: Option<&GaitSequence>) -> Result<String> {
        let k = self.k;
        let mut s = String::from("frame,was_occluded,condition_state,dice_vs_groundtruth\n");
        for (i, (occ, st)) in self.was_occluded.iter().zip(&self.conditions).enumerate() {
            let dice = match ground_truth {
                Some(gt) => format!("{:.6}", dice_score(&gt.frames()[i], &self.sequence.frames()[i])?),
                None => String::new(),
            };
            writeln!(s, "{i},{},{},{dice}", u8::from(*occ), st.index1(k)).unwrap();
        }
        Ok(s)
    }

    /// Mean dice of the reconstructed frames against ground truth.
    pub fn reconstructed_dice(&self, ground_truth: &GaitSequence) -> Result<Option<f64>> {
        let mut scores = Vec::new();
        for (i, occ) in self.was_occluded.iter().enumerate() {
            if *occ {
                scores.push(dice_score(&ground_truth.frames()[i], &self.sequence.frames()[i])?);
            }
        }
        Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
    }
}

/// Key pose for every frame: mapped states where visible, cyclic linear
/// interpolation between visible neighbours elsewhere, extrapolated at the
/// ends with the mean advance rate of the visible frames.
pub fn interpolate_key_poses(states: &[PoseState], k: usize) -> Result<Vec<usize>> {
    let anchors: Vec<(usize, usize)> = states
        .iter()
        .enumerate()
        .filter_map(|(i, s)| match s {
            PoseState::Key(p) => Some((i, *p)),
            PoseState::Occluded => None,
        })
        .collect();
    let (first, last) = match (anchors.first(), anchors.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::AllFramesOccluded("no visible frame to anchor key poses".into())),
    };
    let advance = |a: usize, b: usize| (b + k - a) % k;
    let rate = if last.0 > first.0 {
        let total: usize = anchors.windows(2).map(|w| advance(w[0].1, w[1].1)).sum();
        total as f64 / (last.0 - first.0) as f64
    } else {
        0.0
    };
    let wrap = |x: f64| (x.round() as i64).rem_euclid(k as i64) as usize;
    let mut out = vec![0usize; states.len()];
    let mut next_anchor = 0;
    for i in 0..states.len() {
        while next_anchor < anchors.len() && anchors[next_anchor].0 < i {
            next_anchor += 1;
        }
        out[i] = if next_anchor < anchors.len() && anchors[next_anchor].0 == i {
            anchors[next_anchor].1
        } else if next_anchor == 0 {
            wrap(first.1 as f64 - rate * (first.0 - i) as f64)
        } else if next_anchor == anchors.len() {
            wrap(last.1 as f64 + rate * (i - last.0) as f64)
        } else {
            let (p, sp) = anchors[next_anchor - 1];
            let (n, sn) = anchors[next_anchor];
            let t = (i - p) as f64 / (n - p) as f64;
            wrap(sp as f64 + t * advance(sp, sn) as f64)
        };
    }
    Ok(out)
}

fn binarize(frame: SilhouetteFrame) -> Result<SilhouetteFrame> {
    let px = frame.pixels().iter().map(|p| if *p >= 0.5 { 1.0 } else { 0.0 }).collect();
    SilhouetteFrame::from_pixels(frame.geometry(), px)
}

/// Rebuilds the frames labelled occluded in `pa`; every other frame is
/// passed through unchanged.
///
/// Visible frames are encoded to their latent mean under their key-pose
/// condition, occluded positions enter as zero vectors, every stride-1
/// window is filtered, and the window outputs covering each occluded frame
/// are averaged before decoding under the interpolated key pose. Decoded
/// frames are binarized at 0.5.
pub fn reconstruct_sequence(
    seq: &GaitSequence,
    pa: &PoseAssignment,
    cvae: &CvaeModel,
    bilstm: &BilstmModel,
) -> Result<Reconstruction> {
    let n = seq.len();
    if pa.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: pa.len(),
        });
    }
    if n < WINDOW_LEN {
        return Err(Error::SequenceTooShort {
            id: seq.id().to_string(),
            len: n,
            min: WINDOW_LEN,
        });
    }
    if cvae.d_z() != bilstm.d_z() {
        return Err(Error::DimensionMismatch {
            expected: cvae.d_z(),
            actual: bilstm.d_z(),
        });
    }
    let k = cvae.k();
    if pa.k() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            actual: pa.k(),
        });
    }
    let occluded: Vec<bool> = pa.states().iter().map(|s| s.is_occluded()).collect();
    if occluded.iter().all(|o| *o) {
        return Err(Error::AllFramesOccluded(seq.id().to_string()));
    }
    let poses = interpolate_key_poses(pa.states(), k)?;
    let conditions: Vec<PoseState> = poses.iter().map(|p| PoseState::Key(*p)).collect();
    if !occluded.iter().any(|o| *o) {
        return Ok(Reconstruction {
            sequence: seq.clone(),
            was_occluded: occluded,
            conditions,
            k,
        });
    }

    let d = cvae.d_z();
    let visible: Vec<usize> = (0..n).filter(|&i| !occluded[i]).collect();
    let conds: Vec<ConditionVector> = visible
        .iter()
        .map(|&i| ConditionVector::from_state(pa.states()[i], k))
        .collect::<Result<_>>()?;
    let dists = cvae.encode_batch(
        &visible.iter().map(|&i| &seq.frames()[i]).collect::<Vec<_>>(),
        &conds.iter().collect::<Vec<_>>(),
    )?;
    let mut latents = vec![vec![0.0; d]; n];
    for (&i, dist) in visible.iter().zip(dists) {
        latents[i] = dist.mu;
    }

    let windows: Vec<LatentWindow> = (0..=n - WINDOW_LEN)
        .map(|s| LatentWindow {
            vectors: latents[s..s + WINDOW_LEN].to_vec(),
        })
        .collect();
    let filtered = bilstm.filter_windows(&windows.iter().collect::<Vec<_>>())?;
    let mut sums = vec![vec![0.0; d]; n];
    let mut counts = vec![0usize; n];
    for (s, w) in filtered.iter().enumerate() {
        for (t, v) in w.vectors().iter().enumerate() {
            let i = s + t;
            if occluded[i] {
                sums[i].iter_mut().zip(v).for_each(|(a, b)| *a += b);
                counts[i] += 1;
            }
        }
    }
    let targets: Vec<usize> = (0..n).filter(|&i| occluded[i]).collect();
    let fused: Vec<Vec<f64>> = targets
        .iter()
        .map(|&i| sums[i].iter().map(|v| v / counts[i] as f64).collect())
        .collect();
    let dec_conds: Vec<ConditionVector> = targets
        .iter()
        .map(|&i| ConditionVector::from_state(conditions[i], k))
        .collect::<Result<_>>()?;
    let decoded = cvae.decode_batch(
        &fused.iter().map(Vec::as_slice).collect::<Vec<_>>(),
        &dec_conds.iter().collect::<Vec<_>>(),
    )?;
    let mut frames = seq.frames().to_vec();
    for (&i, f) in targets.iter().zip(decoded) {
        frames[i] = binarize(f)?;
    }
    Ok(Reconstruction {
        sequence: seq.replace_frames(frames),
        was_occluded: occluded,
        conditions,
        k,
    })
}
