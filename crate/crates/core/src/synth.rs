//! Procedural side-view walker used as a ground-truth data source.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::silhouette::{normalize_frame, FrameGeometry, GaitSequence, RawMask, SilhouetteFrame};

const CANVAS_W: usize = 160;
const CANVAS_H: usize = 180;
const GROUND_Y: f64 = 172.0;
const HIP_X: f64 = 80.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWalkerParams {
    /// Frames per gait cycle.
    pub period: usize,
    /// Horizontal foot excursion from the hip at full stride, canvas pixels.
    pub limb_amplitude: f64,
    /// Torso half-width, canvas pixels.
    pub torso_size: f64,
    pub phase_offset: f64,
    /// Fraction of output pixels flipped per frame.
    pub noise_rate: f64,
    pub head_radius: f64,
    pub leg_length: f64,
    /// Peak arm swing in radians.
    pub arm_swing: f64,
    pub geometry: FrameGeometry,
}

impl Default for SyntheticWalkerParams {
    fn default() -> Self {
        Self {
            period: 30,
            limb_amplitude: 24.0,
            torso_size: 9.0,
            phase_offset: 0.0,
            noise_rate: 0.0,
            head_radius: 9.0,
            leg_length: 60.0,
            arm_swing: 0.5,
            geometry: FrameGeometry::default(),
        }
    }
}

impl SyntheticWalkerParams {
    /// Body parameters for a synthetic subject; identical for equal arguments.
    pub fn for_subject(subject: usize, seed: u64, geometry: FrameGeometry) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (subject as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Self {
            period: rng.random_range(26..=34),
            limb_amplitude: rng.random_range(16.0..32.0),
            torso_size: rng.random_range(6.5..12.5),
            phase_offset: 0.0,
            noise_rate: 0.0,
            head_radius: rng.random_range(6.5..11.5),
            leg_length: rng.random_range(50.0..70.0),
            arm_swing: rng.random_range(0.25..0.8),
            geometry,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.period < 4 {
            return Err(Error::InvalidParams(format!("period {} < 4", self.period)));
        }
        if !(0.0..=0.1).contains(&self.noise_rate) {
            return Err(Error::InvalidParams(format!(
                "noise_rate {} outside [0, 0.1]",
                self.noise_rate
            )));
        }
        if !(0.0..1.0).contains(&self.phase_offset) {
            return Err(Error::InvalidParams(format!(
                "phase_offset {} outside [0, 1)",
                self.phase_offset
            )));
        }
        let sizes = [self.limb_amplitude, self.torso_size, self.head_radius, self.leg_length];
        if sizes.iter().any(|v| !v.is_finite() || *v <= 0.0) || self.limb_amplitude >= self.leg_length {
            return Err(Error::InvalidParams("body dimensions must be positive".into()));
        }
        let height = self.leg_length * 1.75 + 2.0 * self.head_radius + 4.0;
        let reach = (self.limb_amplitude + 0.12 * self.leg_length).max(0.7 * self.leg_length) + self.torso_size;
        if height > GROUND_Y - 4.0 || reach > HIP_X - 4.0 {
            return Err(Error::InvalidParams("walker does not fit the render canvas".into()));
        }
        Ok(())
    }

    /// Gait-cycle phase of frame `index`, in `[0, 1)`.
    pub fn phase_of(&self, index: usize) -> f64 {
        let p = (index % self.period) as f64 / self.period as f64 + self.phase_offset;
        if p >= 1.0 {
            p - 1.0
        } else {
            p
        }
    }
}

struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
}

impl Capsule {
    fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        };
        let (cx, cy) = (self.a.0 + t * dx, self.a.1 + t * dy);
        (p.0 - cx).powi(2) + (p.1 - cy).powi(2) <= self.radius * self.radius
    }
}

fn offset(from: (f64, f64), angle: f64, len: f64) -> (f64, f64) {
    // Angle measured from straight down, positive towards the walking direction.
    (from.0 + len * angle.sin(), from.1 + len * angle.cos())
}

fn render_pose(params: &SyntheticWalkerParams, phase: f64) -> RawMask {
    let theta = 2.0 * PI * phase;
    let stride = (params.limb_amplitude / params.leg_length).clamp(-0.95, 0.95).asin();
    let half = params.leg_length / 2.0;

    // (thigh angle, shin angle) per leg; the swinging leg flexes at the knee.
    let leg = |t: f64| {
        let thigh = stride * t.sin();
        let flex = 0.9 * stride * t.cos().max(0.0);
        (thigh, thigh - flex)
    };
    let near = leg(theta);
    let far = leg(theta + PI);
    let drop = |(thigh, shin): (f64, f64)| half * thigh.cos() + half * shin.cos();
    let hip = (HIP_X, GROUND_Y - drop(near).max(drop(far)));

    let torso_len = 0.75 * params.leg_length;
    let shoulder = (hip.0 + 2.0, hip.1 - torso_len);
    let head = (shoulder.0 + 2.0, shoulder.1 - params.head_radius - 2.0);

    let mut parts = Vec::with_capacity(8);
    for ((thigh, shin), scale) in [(far, 0.36), (near, 0.46)] {
        let knee = offset(hip, thigh, half);
        let ankle = offset(knee, shin, half);
        let radius = scale * params.torso_size;
        parts.push(Capsule { a: hip, b: knee, radius });
        parts.push(Capsule { a: knee, b: ankle, radius: radius * 0.85 });
        // Foot points forward.
        parts.push(Capsule {
            a: ankle,
            b: (ankle.0 + 0.12 * params.leg_length, ankle.1),
            radius: radius * 0.6,
        });
    }
    parts.push(Capsule {
        a: hip,
        b: shoulder,
        radius: params.torso_size,
    });
    // Only the near arm is visible; it swings against the near leg and bends
    // forward at the elbow, so opposite half-cycles do not look alike.
    let upper = 0.45 * torso_len;
    let arm_angle = params.arm_swing * (theta + PI).sin() + 0.1;
    let elbow = offset(shoulder, arm_angle, upper);
    let hand = offset(elbow, arm_angle + 0.5 + 0.4 * (theta + PI).sin().max(0.0), upper);
    let arm_r = 0.32 * params.torso_size;
    parts.push(Capsule { a: shoulder, b: elbow, radius: arm_r });
    parts.push(Capsule { a: elbow, b: hand, radius: arm_r * 0.9 });
    parts.push(Capsule {
        a: head,
        b: head,
        radius: params.head_radius,
    });

    let mut mask = RawMask::empty(CANVAS_W, CANVAS_H);
    for y in 0..CANVAS_H {
        for x in 0..CANVAS_W {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            if parts.iter().any(|c| c.contains(p)) {
                mask.set(y, x, true);
            }
        }
    }
    mask
}

/// Renders `n_frames` of a walking silhouette with per-frame phase annotations.
pub fn generate_synthetic_walker(params: &SyntheticWalkerParams, n_frames: usize, seed: u64) -> Result<GaitSequence> {
    params.validate()?;
    if n_frames == 0 {
        return Err(Error::InvalidArgument("n_frames must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // One render per distinct phase; frames repeat with the period.
    let distinct = params.period.min(n_frames);
    let base: Vec<SilhouetteFrame> = (0..distinct)
        .map(|i| normalize_frame(&render_pose(params, params.phase_of(i)), params.geometry))
        .collect::<Result<_>>()?;
    let mut frames = Vec::with_capacity(n_frames);
    let mut phases = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let frame = &base[i % params.period];
        let frame = if params.noise_rate > 0.0 {
            let pixels = frame
                .pixels()
                .iter()
                .map(|v| {
                    if rng.random::<f64>() < params.noise_rate {
                        1.0 - v
                    } else {
                        *v
                    }
                })
                .collect();
            SilhouetteFrame::from_pixels(params.geometry, pixels)?
        } else {
            frame.clone()
        };
        frames.push(frame);
        phases.push(params.phase_of(i));
    }
    GaitSequence::new(format!("walker_{seed}"), None, frames)?.with_phases(phases)
}

/// Specification of a synthetic multi-subject corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub subjects: usize,
    pub sequences_per_subject: usize,
    pub frames: usize,
    pub noise_rate: f64,
    pub geometry: FrameGeometry,
    pub seed: u64,
}

pub fn subject_label(subject: usize) -> String {
    format!("s{subject:03}")
}

pub fn sequence_id(subject: usize, sequence: usize) -> String {
    format!("s{subject:03}_q{sequence:02}")
}

/// Generates `subjects × sequences_per_subject` labelled sequences, subject-major.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<GaitSequence>> {
    let mut out = Vec::with_capacity(spec.subjects * spec.sequences_per_subject);
    for s in 0..spec.subjects {
        let body = SyntheticWalkerParams::for_subject(s, spec.seed, spec.geometry);
        for q in 0..spec.sequences_per_subject {
            let seq_seed = spec
                .seed
                .wrapping_add(1_000_003 * (s as u64 + 1))
                .wrapping_add(7919 * q as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seq_seed);
            let params = SyntheticWalkerParams {
                phase_offset: rng.random_range(0.0..1.0),
                noise_rate: spec.noise_rate,
                ..body.clone()
            };
            let seq = generate_synthetic_walker(&params, spec.frames, seq_seed)?;
            let seq = GaitSequence::new(sequence_id(s, q), Some(subject_label(s)), seq.frames().to_vec())?
                .with_phases(seq.phases().unwrap().to_vec())?;
            out.push(seq);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area_series(seq: &GaitSequence) -> Vec<f64> {
        seq.frames().iter().map(SilhouetteFrame::foreground_area).collect()
    }

    /// Pearson autocorrelation of the overlapping parts of the series.
    fn autocorr(x: &[f64], lag: usize) -> f64 {
        let a = &x[..x.len() - lag];
        let b = &x[lag..];
        let ma = a.iter().sum::<f64>() / a.len() as f64;
        let mb = b.iter().sum::<f64>() / b.len() as f64;
        let cov: f64 = a.iter().zip(b).map(|(p, q)| (p - ma) * (q - mb)).sum();
        let va: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|q| (q - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn walker_is_exactly_periodic_without_noise() {
        let p = SyntheticWalkerParams::default();
        let seq = generate_synthetic_walker(&p, 60, 3).unwrap();
        assert_eq!(seq.frames()[0], seq.frames()[30]);
        for i in 0..30 {
            assert_eq!(seq.frames()[i], seq.frames()[i + 30]);
        }
        assert_ne!(seq.frames()[0], seq.frames()[15]);
    }

    #[test]
    fn walker_is_deterministic() {
        let p = SyntheticWalkerParams {
            noise_rate: 0.02,
            phase_offset: 0.3,
            ..Default::default()
        };
        let a = generate_synthetic_walker(&p, 40, 11).unwrap();
        let b = generate_synthetic_walker(&p, 40, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_walker(&p, 40, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn area_autocorrelation_peaks_at_period() {
        let p = SyntheticWalkerParams::default();
        let seq = generate_synthetic_walker(&p, 150, 5).unwrap();
        let area = area_series(&seq);
        // Oracle: highest local maximum of the autocorrelation beyond lag 2.
        let ac: Vec<f64> = (0..=75).map(|l| if l == 0 { 1.0 } else { autocorr(&area, l) }).collect();
        let best = (3..75)
            .filter(|&l| ac[l] >= ac[l - 1] && ac[l] >= ac[l + 1])
            .max_by(|a, b| ac[*a].partial_cmp(&ac[*b]).unwrap().then(b.cmp(a)))
            .unwrap();
        assert!((29..=31).contains(&best), "peak at lag {best}, ac {:?}", &ac[10..40]);
        assert!(ac[15] < ac[30] - 0.05, "half-cycle too similar: {} vs {}", ac[15], ac[30]);
    }

    #[test]
    fn frames_are_binary() {
        let p = SyntheticWalkerParams {
            noise_rate: 0.05,
            ..Default::default()
        };
        let seq = generate_synthetic_walker(&p, 10, 1).unwrap();
        for f in seq.frames() {
            assert!(f.pixels().iter().all(|v| *v == 0.0 || *v == 1.0));
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let p = SyntheticWalkerParams {
            period: 3,
            ..Default::default()
        };
        assert!(generate_synthetic_walker(&p, 10, 0).is_err());
        let p = SyntheticWalkerParams {
            noise_rate: 0.2,
            ..Default::default()
        };
        assert!(generate_synthetic_walker(&p, 10, 0).is_err());
    }

    #[test]
    fn corpus_labels_and_counts() {
        let spec = CorpusSpec {
            subjects: 3,
            sequences_per_subject: 2,
            frames: 12,
            noise_rate: 0.0,
            geometry: FrameGeometry::new(32, 32).unwrap(),
            seed: 9,
        };
        let corpus = generate_corpus(&spec).unwrap();
        assert_eq!(corpus.len(), 6);
        assert_eq!(corpus[3].id(), "s001_q01");
        assert_eq!(corpus[3].subject(), Some("s001"));
        assert_eq!(corpus[3].len(), 12);
        for s in 0..3 {
            SyntheticWalkerParams::for_subject(s, 9, spec.geometry).validate().unwrap();
        }
    }
}
