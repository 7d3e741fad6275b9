//! End-to-end training and inference: key poses, pose mapping,
//! reconstruction, GEI and classification.

use std::path::Path;

use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::cvae::{train_cvae, ConditionVector, CvaeModel, CvaeTrainingLog};
use crate::error::{Error, Result};
use crate::evaluation::EvalRecord;
use crate::keypose::{build_keyposes, estimate_phases, fit_pca, KeyPoseSet};
use crate::pose_graph::{distance_matrix, map_frames, PoseAssignment, PoseState, StateTransitionModel};
use crate::recognizer::{classify_batch, compute_gei, train_geinet, GaitEnergyImage, GeinetModel, GeinetTrainingLog};
use crate::silhouette::{GaitSequence, SilhouetteFrame};
use crate::temporal::{
    interpolate_key_poses, make_training_windows, reconstruct_sequence, train_bilstm, BilstmModel,
    BilstmTrainingLog, Reconstruction,
};

const KEYPOSES_FILE: &str = "keyposes.bin";
const CVAE_FILE: &str = "cvae.bin";
const BILSTM_FILE: &str = "bilstm.bin";
const GEINET_FILE: &str = "geinet.bin";

/// Maps `f` over `items` on up to `jobs` threads; output order matches input.
pub fn par_map<T, U, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// Returns the sequence with per-frame phases, estimating them when absent.
pub fn with_phases(seq: &GaitSequence) -> Result<GaitSequence> {
    if seq.phases().is_some() {
        return Ok(seq.clone());
    }
    let phases = estimate_phases(seq).map_err(|e| e.in_sequence(seq.id()))?;
    seq.clone().with_phases(phases)
}

/// Fits the PCA subspace on an even sample of real frames, then clusters
/// key poses.
pub fn fit_keyposes(sequences: &[GaitSequence], cfg: &PipelineConfig) -> Result<KeyPoseSet> {
    let seqs = sequences.iter().map(with_phases).collect::<Result<Vec<_>>>()?;
    let frames: Vec<&SilhouetteFrame> = seqs
        .iter()
        .flat_map(|s| s.frames())
        .filter(|f| !f.is_placeholder())
        .collect();
    if frames.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let take = cfg.pca_max_frames.max(1).min(frames.len());
    let sample: Vec<SilhouetteFrame> = (0..take)
        .map(|i| frames[i * frames.len() / take].clone())
        .collect();
    let subspace = fit_pca(&sample, cfg.pca_dim)?;
    build_keyposes(&seqs, &cfg.keypose, subspace)
}

/// Key-pose state sequence of one sequence.
pub fn assign_poses(seq: &GaitSequence, kp: &KeyPoseSet) -> Result<PoseAssignment> {
    let m = distance_matrix(seq, kp)?;
    map_frames(&m, &StateTransitionModel::new(kp.k())?)
}

/// Training conditions for a clean sequence: mapped key poses, with frames
/// the mapping labelled occluded given their interpolated key pose.
pub fn training_conditions(seq: &GaitSequence, kp: &KeyPoseSet) -> Result<Vec<PoseState>> {
    let pa = assign_poses(seq, kp)?;
    Ok(interpolate_key_poses(pa.states(), kp.k())?
        .into_iter()
        .map(PoseState::Key)
        .collect())
}

/// Frame/condition pairs for CVAE training; placeholder frames are skipped.
pub fn cvae_corpus(sequences: &[GaitSequence], kp: &KeyPoseSet) -> Result<Vec<(SilhouetteFrame, ConditionVector)>> {
    let mut out = Vec::new();
    for seq in sequences {
        let states = training_conditions(seq, kp).map_err(|e| e.in_sequence(seq.id()))?;
        for (f, s) in seq.frames().iter().zip(states) {
            if !f.is_placeholder() {
                out.push((f.clone(), ConditionVector::from_state(s, kp.k())?));
            }
        }
    }
    Ok(out)
}

/// Latent means of every frame under its training condition.
pub fn latent_sequences(sequences: &[GaitSequence], kp: &KeyPoseSet, cvae: &CvaeModel) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let states = training_conditions(seq, kp).map_err(|e| e.in_sequence(seq.id()))?;
        let conds = states
            .iter()
            .map(|s| ConditionVector::from_state(*s, kp.k()))
            .collect::<Result<Vec<_>>>()?;
        let dists = cvae.encode_batch(&seq.frames().iter().collect::<Vec<_>>(), &conds.iter().collect::<Vec<_>>())?;
        out.push(dists.into_iter().map(|d| d.mu).collect());
    }
    Ok(out)
}

/// One GEI per gallery sequence.
pub fn gallery_geis(gallery: &[GaitSequence]) -> Result<Vec<GaitEnergyImage>> {
    gallery
        .iter()
        .map(|s| compute_gei(s).map_err(|e| e.in_sequence(s.id())))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainingLogs {
    pub cvae: CvaeTrainingLog,
    pub bilstm: BilstmTrainingLog,
    pub geinet: GeinetTrainingLog,
}

impl TrainingLogs {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        self.cvae.save(&dir.join("cvae_loss.csv"))?;
        self.bilstm.save(&dir.join("bilstm_loss.csv"))?;
        self.geinet.save(&dir.join("geinet_loss.csv"))
    }
}

/// Result of running one probe through the pipeline.
#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub assignment: PoseAssignment,
    pub reconstruction: Reconstruction,
    pub gei: GaitEnergyImage,
}

#[derive(Clone, Debug)]
pub struct TrainedPipeline {
    pub keyposes: KeyPoseSet,
    pub cvae: CvaeModel,
    pub bilstm: BilstmModel,
    pub geinet: GeinetModel,
}

impl TrainedPipeline {
    /// Trains every component: key poses, CVAE and BiLSTM on `training`,
    /// GEINet on `gallery`.
    pub fn train(
        training: &[GaitSequence],
        gallery: &[GaitSequence],
        cfg: &PipelineConfig,
    ) -> Result<(Self, TrainingLogs)> {
        let cfg = cfg.clone().synced()?;
        let keyposes = fit_keyposes(training, &cfg)?;
        log::info!("key poses: k={} tau={:.4}", keyposes.k(), keyposes.tau());
        let corpus = cvae_corpus(training, &keyposes)?;
        let (cvae, cvae_log) = train_cvae(&corpus, &cfg.cvae)?;
        let latents = latent_sequences(training, &keyposes, &cvae)?;
        let (windows, skipped) = make_training_windows(&latents);
        for e in skipped {
            log::warn!("skipping sequence for temporal training: {e}");
        }
        let (bilstm, bilstm_log) = train_bilstm(&windows, &cfg.bilstm)?;
        let (geinet, geinet_log) = train_geinet(&gallery_geis(gallery)?, &cfg.geinet)?;
        Ok((
            Self {
                keyposes,
                cvae,
                bilstm,
                geinet,
            },
            TrainingLogs {
                cvae: cvae_log,
                bilstm: bilstm_log,
                geinet: geinet_log,
            },
        ))
    }

    /// Pose mapping, reconstruction and GEI for one sequence.
    pub fn process(&self, seq: &GaitSequence) -> Result<ProbeOutcome> {
        let run = || -> Result<ProbeOutcome> {
            let assignment = assign_poses(seq, &self.keyposes)?;
            let reconstruction = reconstruct_sequence(seq, &assignment, &self.cvae, &self.bilstm)?;
            let gei = compute_gei(&reconstruction.sequence)?;
            Ok(ProbeOutcome {
                assignment,
                reconstruction,
                gei,
            })
        };
        run().map_err(|e| e.in_sequence(seq.id()))
    }

    /// Ranked gallery labels for one sequence.
    pub fn identify(&self, seq: &GaitSequence) -> Result<(ProbeOutcome, Vec<(String, f64)>)> {
        let out = self.process(seq)?;
        let ranked = classify_batch(&[&out.gei], &self.geinet)?.remove(0);
        Ok((out, ranked))
    }

    /// Evaluates labelled probes. The realized occlusion degree is the
    /// fraction of placeholder frames; with `ground_truth` (aligned with
    /// `probes`) the mean dice of reconstructed frames is recorded.
    pub fn evaluate(
        &self,
        probes: &[GaitSequence],
        ground_truth: Option<&[GaitSequence]>,
        jobs: usize,
    ) -> Result<Vec<EvalRecord>> {
        if let Some(gt) = ground_truth {
            if gt.len() != probes.len() {
                return Err(Error::LengthMismatch {
                    expected: probes.len(),
                    actual: gt.len(),
                });
            }
        }
        let indices: Vec<usize> = (0..probes.len()).collect();
        par_map(&indices, jobs, |&i| {
            let seq = &probes[i];
            let label = seq
                .subject()
                .ok_or_else(|| Error::InvalidArgument(format!("probe {} has no subject label", seq.id())))?
                .to_string();
            let (out, ranked) = self.identify(seq)?;
            let placeholders = seq.frames().iter().filter(|f| f.is_placeholder()).count();
            let reconstruction_dice = match ground_truth {
                Some(gt) => out
                    .reconstruction
                    .reconstructed_dice(&gt[i])
                    .map_err(|e| e.in_sequence(seq.id()))?,
                None => None,
            };
            Ok(EvalRecord {
                sequence_id: seq.id().to_string(),
                true_label: label,
                ranked,
                occlusion_degree: placeholders as f64 / seq.len() as f64,
                reconstruction_dice,
            })
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        self.keyposes.save(&dir.join(KEYPOSES_FILE))?;
        self.cvae.save(&dir.join(CVAE_FILE))?;
        self.bilstm.save(&dir.join(BILSTM_FILE))?;
        self.geinet.save(&dir.join(GEINET_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = Self {
            keyposes: KeyPoseSet::load(&dir.join(KEYPOSES_FILE))?,
            cvae: CvaeModel::load(&dir.join(CVAE_FILE))?,
            bilstm: BilstmModel::load(&dir.join(BILSTM_FILE))?,
            geinet: GeinetModel::load(&dir.join(GEINET_FILE))?,
        };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        if self.cvae.k() != self.keyposes.k() {
            return Err(Error::DimensionMismatch {
                expected: self.keyposes.k(),
                actual: self.cvae.k(),
            });
        }
        if self.cvae.d_z() != self.bilstm.d_z() {
            return Err(Error::DimensionMismatch {
                expected: self.cvae.d_z(),
                actual: self.bilstm.d_z(),
            });
        }
        self.keyposes.subspace().geometry().check(self.cvae.geometry())?;
        self.cvae.geometry().check(self.geinet.geometry())
    }
}
