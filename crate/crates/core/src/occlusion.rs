//! Bernoulli frame masks for latent windows and full-frame blanking of sequences.

use std::path::Path;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::silhouette::{write_text, GaitSequence, SilhouetteFrame};
use crate::temporal::LatentWindow;

/// Per-position keep flags: `keep[i] = x_i > degree`, `x_i ~ U(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionMask {
    keep: Vec<bool>,
    degree: f64,
    seed: u64,
}

fn check_degree(degree: f64) -> Result<()> {
    if (0.0..=1.0).contains(&degree) {
        Ok(())
    } else {
        Err(Error::DegreeOutOfRange(degree))
    }
}

impl OcclusionMask {
    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn degree(&self) -> f64 {
        self.degree
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn dropped(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn drop_fraction(&self) -> f64 {
        self.dropped() as f64 / self.keep.len().max(1) as f64
    }

    /// Single line of `1` (kept) / `0` (dropped) flags.
    pub fn export(&self) -> String {
        let bits: Vec<&str> = self.keep.iter().map(|k| if *k { "1" } else { "0" }).collect();
        format!("{}\n", bits.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.export())
    }
}

/// Draws a mask from a caller-owned generator.
pub fn sample_mask_with(rng: &mut impl Rng, n: usize, degree: f64, seed: u64) -> Result<OcclusionMask> {
    check_degree(degree)?;
    if n == 0 {
        return Err(Error::InvalidArgument("mask length must be at least 1".into()));
    }
    let keep = (0..n)
        .map(|_| {
            let x: f64 = rng.sample(Open01);
            x > degree
        })
        .collect();
    Ok(OcclusionMask { keep, degree, seed })
}

pub fn sample_mask(n: usize, degree: f64, seed: u64) -> Result<OcclusionMask> {
    sample_mask_with(&mut ChaCha8Rng::seed_from_u64(seed), n, degree, seed)
}

/// Zeros the latent vectors at dropped positions.
pub fn apply_mask_latent(window: &LatentWindow, mask: &OcclusionMask) -> Result<LatentWindow> {
    if mask.len() != window.len() {
        return Err(Error::LengthMismatch {
            expected: window.len(),
            actual: mask.len(),
        });
    }
    let mut out = window.clone();
    for (v, keep) in out.vectors_mut().iter_mut().zip(mask.keep()) {
        if !keep {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok(out)
}

/// Replaces dropped frames with flagged all-zero placeholders.
pub fn occlude_sequence_with_mask(seq: &GaitSequence, mask: &OcclusionMask) -> Result<GaitSequence> {
    if mask.len() != seq.len() {
        return Err(Error::LengthMismatch {
            expected: seq.len(),
            actual: mask.len(),
        });
    }
    let g = seq.geometry();
    let frames = seq
        .frames()
        .iter()
        .zip(mask.keep())
        .map(|(f, keep)| if *keep { f.clone() } else { SilhouetteFrame::placeholder(g) })
        .collect();
    Ok(seq.replace_frames(frames))
}

pub fn occlude_sequence(seq: &GaitSequence, degree: f64, seed: u64) -> Result<GaitSequence> {
    let mask = sample_mask(seq.len(), degree, seed)?;
    occlude_sequence_with_mask(seq, &mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_walker, SyntheticWalkerParams};
    use crate::temporal::WINDOW_LEN;
    use proptest::prelude::*;

    #[test]
    fn extreme_degrees() {
        assert!(sample_mask(50, 0.0, 1).unwrap().keep().iter().all(|k| *k));
        assert!(sample_mask(50, 1.0, 1).unwrap().keep().iter().all(|k| !*k));
        assert!(matches!(sample_mask(5, 1.5, 1), Err(Error::DegreeOutOfRange(_))));
        assert!(matches!(sample_mask(5, -0.1, 1), Err(Error::DegreeOutOfRange(_))));
    }

    #[test]
    fn half_degree_drop_rate() {
        // 99% binomial bound: 2.58 * sqrt(0.25 / 10000) ~ 0.013.
        let m = sample_mask(10_000, 0.5, 7).unwrap();
        assert!((m.drop_fraction() - 0.5).abs() < 0.02);
    }

    #[test]
    fn drop_rate_converges() {
        for d in [0.1, 0.5, 0.9] {
            let m = sample_mask(100_000, d, 11).unwrap();
            assert!((m.drop_fraction() - d).abs() < 0.01, "degree {d}");
        }
    }

    fn window() -> LatentWindow {
        LatentWindow::new((0..WINDOW_LEN).map(|i| vec![i as f64 + 0.5, -1.25, 3.0]).collect()).unwrap()
    }

    #[test]
    fn latent_masking() {
        let w = window();
        let keep_all = sample_mask(WINDOW_LEN, 0.0, 3).unwrap();
        assert_eq!(apply_mask_latent(&w, &keep_all).unwrap(), w);
        let drop_all = sample_mask(WINDOW_LEN, 1.0, 3).unwrap();
        let z = apply_mask_latent(&w, &drop_all).unwrap();
        assert!(z.vectors().iter().all(|v| v.iter().all(|x| *x == 0.0)));
        assert!(apply_mask_latent(&w, &sample_mask(5, 0.5, 1).unwrap()).is_err());
    }

    #[test]
    fn sequence_blanking_matches_mask() {
        let seq = generate_synthetic_walker(&SyntheticWalkerParams::default(), 45, 4).unwrap();
        assert_eq!(occlude_sequence(&seq, 0.0, 9).unwrap(), seq);
        let all = occlude_sequence(&seq, 1.0, 9).unwrap();
        assert!(all.frames().iter().all(SilhouetteFrame::is_placeholder));
        let mask = sample_mask(45, 0.53, 21).unwrap();
        let occ = occlude_sequence(&seq, 0.53, 21).unwrap();
        let flagged = occ.frames().iter().filter(|f| f.is_placeholder()).count();
        assert_eq!(flagged, mask.dropped());
        assert_eq!(occ.subject(), seq.subject());
        assert_eq!(mask.export().split_whitespace().count(), 45);
    }

    proptest! {
        #[test]
        fn masks_are_deterministic_and_preserve_kept(seed in any::<u64>(), degree in 0.0f64..=1.0) {
            let a = sample_mask(WINDOW_LEN, degree, seed).unwrap();
            prop_assert_eq!(&a, &sample_mask(WINDOW_LEN, degree, seed).unwrap());
            let w = window();
            let out = apply_mask_latent(&w, &a).unwrap();
            for ((o, i), k) in out.vectors().iter().zip(w.vectors()).zip(a.keep()) {
                if *k {
                    prop_assert!(o.iter().zip(i).all(|(x, y)| x.to_bits() == y.to_bits()));
                } else {
                    prop_assert!(o.iter().all(|x| *x == 0.0));
                }
            }
        }
    }
}
