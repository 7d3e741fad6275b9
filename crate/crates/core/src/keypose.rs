//! PCA subspace over aligned silhouettes and the temporally ordered key-pose set.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::checkpoint::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::tensor::gemm;
use crate::silhouette::{FrameGeometry, GaitSequence, SilhouetteFrame};

/// Mean frame plus an orthonormal basis of the leading principal components.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaSubspace {
    geometry: FrameGeometry,
    mean: Vec<f64>,
    /// `dim × pixels`, row-major.
    basis: Vec<f64>,
    dim: usize,
    explained_variance: Vec<f64>,
}

impl PcaSubspace {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.geometry
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let d = self.geometry.pixels();
        &self.basis[i * d..(i + 1) * d]
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn project(&self, frame: &SilhouetteFrame) -> Result<Vec<f64>> {
        self.geometry.check(frame.geometry())?;
        Ok(self.project_pixels(frame.pixels()))
    }

    pub fn project_pixels(&self, pixels: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = pixels.iter().zip(&self.mean).map(|(p, m)| p - m).collect();
        let mut out = vec![0.0; self.dim];
        gemm(self.dim, self.geometry.pixels(), 1, &self.basis, false, &centered, false, &mut out, false);
        out
    }

    /// Raw (unclamped) reconstruction of a subspace vector.
    pub fn back_project(&self, coords: &[f64]) -> Result<Vec<f64>> {
        if coords.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: coords.len(),
            });
        }
        let d = self.geometry.pixels();
        let mut out = self.mean.clone();
        gemm(1, self.dim, d, coords, false, &self.basis, false, &mut out, true);
        Ok(out)
    }

    /// Reconstruction clamped into a displayable frame.
    pub fn back_project_frame(&self, coords: &[f64]) -> Result<SilhouetteFrame> {
        let px = self.back_project(coords)?.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        SilhouetteFrame::from_pixels(self.geometry, px)
    }

    fn write(&self, w: &mut Writer) {
        w.usize(self.geometry.width);
        w.usize(self.geometry.height);
        w.usize(self.dim);
        w.f64s(&self.mean);
        w.f64s(&self.basis);
        w.f64s(&self.explained_variance);
    }

    fn read(r: &mut Reader) -> Result<Self> {
        let geometry = FrameGeometry::new(r.usize()?, r.usize()?)?;
        let dim = r.usize()?;
        let mean = r.f64s()?;
        let basis = r.f64s()?;
        let explained_variance = r.f64s()?;
        if mean.len() != geometry.pixels() || basis.len() != dim * geometry.pixels() {
            return Err(Error::Checkpoint("PCA subspace sizes inconsistent".into()));
        }
        Ok(Self {
            geometry,
            mean,
            basis,
            dim,
            explained_variance,
        })
    }
}

/// Fits the top-`dim` principal components of the mean-centered frames.
///
/// Uses the `n × n` Gram matrix when there are fewer samples than pixels and
/// the `pixels × pixels` covariance otherwise.
pub fn fit_pca(frames: &[SilhouetteFrame], dim: usize) -> Result<PcaSubspace> {
    let first = frames.first().ok_or(Error::EmptyCorpus)?;
    if dim == 0 {
        return Err(Error::InvalidArgument("PCA dim must be at least 1".into()));
    }
    let geometry = first.geometry();
    for f in frames {
        geometry.check(f.geometry())?;
    }
    let n = frames.len();
    let d = geometry.pixels();
    let mut mean = vec![0.0; d];
    for f in frames {
        mean.iter_mut().zip(f.pixels()).for_each(|(m, p)| *m += p);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut xc = Vec::with_capacity(n * d);
    for f in frames {
        xc.extend(f.pixels().iter().zip(&mean).map(|(p, m)| p - m));
    }

    let use_gram = n <= d;
    let m = if use_gram { n } else { d };
    let mut cov = vec![0.0; m * m];
    if use_gram {
        gemm(n, d, n, &xc, false, &xc, true, &mut cov, false);
    } else {
        gemm(d, n, d, &xc, true, &xc, false, &mut cov, false);
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(m, m, &cov));
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]).then(a.cmp(b)));

    let lambda_max = eig.eigenvalues[order[0]].max(0.0);
    let tol = lambda_max * (m as f64) * 1e3 * f64::EPSILON;
    let rank = if lambda_max <= 1e-12 {
        0
    } else {
        order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count()
    };
    if dim > rank {
        return Err(Error::DimTooLarge { requested: dim, rank });
    }

    let mut basis = Vec::with_capacity(dim * d);
    let mut explained = Vec::with_capacity(dim);
    for &i in order.iter().take(dim) {
        let lambda = eig.eigenvalues[i];
        let u = eig.eigenvectors.column(i);
        let mut v = if use_gram {
            let mut v = vec![0.0; d];
            for (r, ur) in u.iter().enumerate() {
                let row = &xc[r * d..(r + 1) * d];
                v.iter_mut().zip(row).for_each(|(a, b)| *a += ur * b);
            }
            v
        } else {
            u.iter().copied().collect()
        };
        // Orthogonalize against accepted components, then normalize.
        for c in 0..explained.len() {
            let prev = &basis[c * d..(c + 1) * d];
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        // Deterministic sign: the largest-magnitude entry is positive.
        let pivot = v.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        basis.extend_from_slice(&v);
        explained.push(lambda / (n.max(2) - 1) as f64);
    }
    Ok(PcaSubspace {
        geometry,
        mean,
        basis,
        dim,
        explained_variance: explained,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyPoseConfig {
    pub k: usize,
    /// Percentile of member-to-centroid distances used as the occlusion cost.
    pub tau_percentile: f64,
    pub max_iters: usize,
    /// Constrained assignment: a frame may only join clusters whose initial
    /// phase bin is within this many bins (cyclically) of its own. `None`
    /// runs unconstrained Lloyd iterations.
    pub phase_window: Option<usize>,
}

impl Default for KeyPoseConfig {
    fn default() -> Self {
        Self {
            k: 16,
            tau_percentile: 95.0,
            max_iters: 100,
            phase_window: Some(1),
        }
    }
}

/// Generic key poses in phase order, with the occlusion-state cost.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyPoseSet {
    subspace: PcaSubspace,
    embeddings: Vec<Vec<f64>>,
    occlusion_threshold: f64,
    phase_means: Vec<f64>,
    member_counts: Vec<usize>,
}

const KEYPOSE_KIND: &str = "keyposes";

impl KeyPoseSet {
    /// Assembles a key-pose set from explicit embeddings.
    pub fn from_parts(subspace: PcaSubspace, embeddings: Vec<Vec<f64>>, occlusion_threshold: f64) -> Result<Self> {
        if embeddings.len() < 2 {
            return Err(Error::InsufficientData("at least 2 key poses required".into()));
        }
        if let Some(e) = embeddings.iter().find(|e| e.len() != subspace.dim()) {
            return Err(Error::DimensionMismatch {
                expected: subspace.dim(),
                actual: e.len(),
            });
        }
        if !(occlusion_threshold > 0.0 && occlusion_threshold.is_finite()) {
            return Err(Error::InvalidArgument("occlusion threshold must be positive".into()));
        }
        let k = embeddings.len();
        Ok(Self {
            subspace,
            embeddings,
            occlusion_threshold,
            phase_means: (0..k).map(|i| i as f64 / k as f64).collect(),
            member_counts: vec![0; k],
        })
    }

    pub fn k(&self) -> usize {
        self.embeddings.len()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn embedding(&self, k: usize) -> &[f64] {
        &self.embeddings[k]
    }

    pub fn tau(&self) -> f64 {
        self.occlusion_threshold
    }

    pub fn subspace(&self) -> &PcaSubspace {
        &self.subspace
    }

    pub fn phase_means(&self) -> &[f64] {
        &self.phase_means
    }

    pub fn member_counts(&self) -> &[usize] {
        &self.member_counts
    }

    /// Index of the closest key pose to a subspace vector (ties: lowest index).
    pub fn nearest(&self, coords: &[f64]) -> usize {
        nearest(&self.embeddings, coords).0
    }

    /// Key pose `k` decoded back to image space.
    pub fn decode(&self, k: usize) -> Result<SilhouetteFrame> {
        self.subspace.back_project_frame(&self.embeddings[k])
    }

    pub fn report(&self) -> String {
        let mut s = String::new();
        writeln!(s, "key_poses {}", self.k()).unwrap();
        writeln!(s, "pca_dim {}", self.subspace.dim()).unwrap();
        writeln!(s, "tau {:.6}", self.occlusion_threshold).unwrap();
        writeln!(s, "pose phase_mean members").unwrap();
        for i in 0..self.k() {
            writeln!(s, "{} {:.4} {}", i + 1, self.phase_means[i], self.member_counts[i]).unwrap();
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(KEYPOSE_KIND);
        self.subspace.write(&mut w);
        w.usize(self.k());
        for e in &self.embeddings {
            w.f64s(e);
        }
        w.f64(self.occlusion_threshold);
        w.f64s(&self.phase_means);
        w.usizes(&self.member_counts);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, KEYPOSE_KIND)?;
        let subspace = PcaSubspace::read(&mut r)?;
        let k = r.usize()?;
        let embeddings = (0..k).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?;
        let tau = r.f64()?;
        let phase_means = r.f64s()?;
        let member_counts = r.usizes()?;
        r.finish()?;
        let mut set = Self::from_parts(subspace, embeddings, tau)?;
        if phase_means.len() != k || member_counts.len() != k {
            return Err(Error::Checkpoint("key-pose metadata sizes inconsistent".into()));
        }
        set.phase_means = phase_means;
        set.member_counts = member_counts;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = euclidean(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Linear-interpolated percentile (`p` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn circular_mean(phases: &[f64]) -> Option<f64> {
    if phases.is_empty() {
        return None;
    }
    let (s, c) = phases
        .iter()
        .fold((0.0, 0.0), |(s, c), p| (s + (2.0 * PI * p).sin(), c + (2.0 * PI * p).cos()));
    let m = s.atan2(c) / (2.0 * PI);
    Some(if m < 0.0 { m + 1.0 } else { m })
}

/// Clusters phase-annotated frames into `k` key poses in the PCA subspace.
///
/// Centroids start from `k` equal-width phase bins, run Lloyd iterations
/// (restricted to nearby phase bins when `phase_window` is set) to
/// convergence, and are then re-ordered by the circular mean phase of their
/// members so pose index follows the gait cycle.
pub fn build_keyposes(sequences: &[GaitSequence], config: &KeyPoseConfig, subspace: PcaSubspace) -> Result<KeyPoseSet> {
    let k = config.k;
    if k < 2 {
        return Err(Error::InvalidArgument("k must be at least 2".into()));
    }
    let mut points = Vec::new();
    let mut phases = Vec::new();
    let mut distinct = HashSet::new();
    for seq in sequences {
        let ph = seq.phases().ok_or_else(|| {
            Error::InsufficientData(format!("sequence {} has no phase annotation", seq.id()))
        })?;
        for (f, p) in seq.frames().iter().zip(ph) {
            if f.is_placeholder() {
                continue;
            }
            distinct.insert(f.pixels().iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
            points.push(subspace.project(f)?);
            phases.push(*p);
        }
    }
    if points.len() < k || distinct.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} frames ({} distinct) for {k} key poses",
            points.len(),
            distinct.len()
        )));
    }

    let dim = subspace.dim();
    let bin_of = |p: f64| ((p * k as f64) as usize).min(k - 1);
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (x, p) in points.iter().zip(&phases) {
        let b = bin_of(*p);
        counts[b] += 1;
        centroids[b].iter_mut().zip(x).for_each(|(c, v)| *c += v);
    }
    if let Some(empty) = counts.iter().position(|c| *c == 0) {
        return Err(Error::InsufficientData(format!("phase bin {empty} has no frames")));
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }

    let allowed = |c: usize, p: f64| match config.phase_window {
        None => true,
        Some(w) => {
            let d = c.abs_diff(bin_of(p));
            d.min(k - d) <= w
        }
    };
    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..config.max_iters.max(1) {
        let mut changed = false;
        for ((a, x), p) in assign.iter_mut().zip(&points).zip(&phases) {
            let best = (0..k)
                .filter(|&c| allowed(c, *p))
                .map(|c| (c, euclidean(&centroids[c], x)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map_or(0, |(c, _)| c);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (a, x) in assign.iter().zip(&points) {
            counts[*a] += 1;
            sums[*a].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }

    let mut member_phases = vec![Vec::new(); k];
    let mut distances = Vec::with_capacity(points.len());
    for ((a, x), p) in assign.iter().zip(&points).zip(&phases) {
        member_phases[*a].push(*p);
        distances.push(euclidean(&centroids[*a], x));
    }
    let phase_means: Vec<f64> = member_phases
        .iter()
        .enumerate()
        .map(|(c, ph)| circular_mean(ph).unwrap_or((c as f64 + 0.5) / k as f64))
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|a, b| phase_means[*a].total_cmp(&phase_means[*b]).then(a.cmp(b)));

    let tau = percentile(&distances, config.tau_percentile).max(1e-12);
    let mut set = KeyPoseSet::from_parts(subspace, order.iter().map(|&c| centroids[c].clone()).collect(), tau)?;
    set.phase_means = order.iter().map(|&c| phase_means[c]).collect();
    set.member_counts = order.iter().map(|&c| member_phases[c].len()).collect();
    Ok(set)
}

/// Pearson autocorrelation of the overlapping parts of `x` at `lag`.
fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    let a = &x[..x.len() - lag];
    let b = &x[lag..];
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    let cov: f64 = a.iter().zip(b).map(|(p, q)| (p - ma) * (q - mb)).sum();
    let va: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|q| (q - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Gait period in frames from the foreground-area autocorrelation: the
/// smallest lag whose local maximum is within 0.02 of the best local maximum.
pub fn estimate_period(seq: &GaitSequence) -> Result<usize> {
    let area: Vec<f64> = seq.frames().iter().map(SilhouetteFrame::foreground_area).collect();
    let max_lag = area.len() / 2;
    if max_lag < 5 {
        return Err(Error::InsufficientData(format!(
            "sequence {} too short for period estimation",
            seq.id()
        )));
    }
    let ac: Vec<f64> = (0..=max_lag + 1)
        .map(|l| if l == 0 { 1.0 } else if l < area.len() { autocorrelation(&area, l) } else { 0.0 })
        .collect();
    let peaks: Vec<usize> = (3..=max_lag).filter(|&l| ac[l] >= ac[l - 1] && ac[l] >= ac[l + 1]).collect();
    let best = peaks.iter().map(|&l| ac[l]).fold(f64::NEG_INFINITY, f64::max);
    peaks
        .into_iter()
        .find(|&l| ac[l] >= best - 0.02)
        .ok_or_else(|| Error::InsufficientData(format!("no periodicity found in {}", seq.id())))
}

/// Phase annotation for sequences without ground truth: period from the
/// area autocorrelation, origin at the first-cycle frame of maximum area.
pub fn estimate_phases(seq: &GaitSequence) -> Result<Vec<f64>> {
    let period = estimate_period(seq)?;
    let area: Vec<f64> = seq.frames().iter().map(SilhouetteFrame::foreground_area).collect();
    let origin = (0..period.min(area.len()))
        .max_by(|a, b| area[*a].total_cmp(&area[*b]).then(b.cmp(a)))
        .unwrap_or(0);
    Ok((0..seq.len())
        .map(|i| ((i + period - origin % period) % period) as f64 / period as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_walker, SyntheticWalkerParams};
    use proptest::prelude::*;

    fn frame(g: FrameGeometry, px: Vec<f64>) -> SilhouetteFrame {
        SilhouetteFrame::from_pixels(g, px).unwrap()
    }

    #[test]
    fn identical_frames_have_rank_zero() {
        let g = FrameGeometry::new(4, 4).unwrap();
        let frames = vec![frame(g, (0..16).map(|i| (i % 2) as f64).collect()); 10];
        assert!(matches!(
            fit_pca(&frames, 1),
            Err(Error::DimTooLarge { requested: 1, rank: 0 })
        ));
    }

    #[test]
    fn principal_axis_of_diagonal_points() {
        // Oracle: covariance of {(0,0),(2,2),(4,4)} is 4·[[1,1],[1,1]], whose
        // leading eigenvector is (1,1)/√2.
        let g = FrameGeometry::new(2, 1).unwrap();
        let pts = [(0.0, 0.0), (2.0, 2.0), (4.0, 4.0)];
        // Frames must live in [0,1]; scale by 1/4 (direction unchanged).
        let frames: Vec<_> = pts.iter().map(|(a, b)| frame(g, vec![a / 4.0, b / 4.0])).collect();
        let pca = fit_pca(&frames, 1).unwrap();
        let c = pca.component(0);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c[0].abs() - s).abs() < 1e-12 && (c[1].abs() - s).abs() < 1e-12);
        assert!(c[0] * c[1] > 0.0);
    }

    fn walker_frames(n: usize) -> Vec<SilhouetteFrame> {
        let p = SyntheticWalkerParams {
            geometry: FrameGeometry::new(16, 16).unwrap(),
            ..Default::default()
        };
        generate_synthetic_walker(&p, n, 1).unwrap().frames().to_vec()
    }

    #[test]
    fn full_rank_round_trip_is_exact() {
        let frames = walker_frames(12);
        let rank = (1..=12).rev().find(|&d| fit_pca(&frames, d).is_ok()).unwrap();
        let pca = fit_pca(&frames, rank).unwrap();
        for f in &frames {
            let back = pca.back_project(&pca.project(f).unwrap()).unwrap();
            for (a, b) in back.iter().zip(f.pixels()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn basis_is_orthonormal_and_sorted() {
        let frames = walker_frames(30);
        let pca = fit_pca(&frames, 8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let dot: f64 = pca.component(i).iter().zip(pca.component(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-6);
            }
        }
        let ev = pca.explained_variance();
        assert!(ev.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn covariance_route_matches_gram_route() {
        // 40 frames of 4x4 = 16 pixels takes the covariance path.
        let g = FrameGeometry::new(4, 4).unwrap();
        let frames: Vec<_> = (0..40)
            .map(|i| frame(g, (0..16).map(|j| (((i * 7 + j * 3) % 11) as f64) / 10.0).collect()))
            .collect();
        let cov = fit_pca(&frames, 3).unwrap();
        let gram = fit_pca(&frames[..12], 3).unwrap();
        assert_eq!(cov.dim(), 3);
        assert_eq!(gram.dim(), 3);
        for i in 0..3 {
            let n: f64 = cov.component(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_error_nonincreasing_in_dim(seed in 0u64..1000) {
            let p = SyntheticWalkerParams {
                geometry: FrameGeometry::new(12, 12).unwrap(),
                noise_rate: 0.05,
                ..Default::default()
            };
            let frames = generate_synthetic_walker(&p, 20, seed).unwrap().frames().to_vec();
            let mut last = f64::INFINITY;
            for d in 1..=10 {
                let pca = fit_pca(&frames, d).unwrap();
                let err: f64 = frames.iter().map(|f| {
                    let b = pca.back_project(&pca.project(f).unwrap()).unwrap();
                    b.iter().zip(f.pixels()).map(|(a, c)| (a - c).powi(2)).sum::<f64>()
                }).sum();
                prop_assert!(err <= last + 1e-9);
                last = err;
            }
        }
    }

    fn point_mass_sequences(k: usize) -> (Vec<GaitSequence>, Vec<SilhouetteFrame>) {
        let g = FrameGeometry::new(k, 1).unwrap();
        let poses: Vec<_> = (0..k)
            .map(|i| frame(g, (0..k).map(|j| if j == i { 1.0 } else { 0.0 }).collect()))
            .collect();
        let mut frames = Vec::new();
        let mut phases = Vec::new();
        for rep in 0..3 {
            for (i, p) in poses.iter().enumerate() {
                frames.push(p.clone());
                phases.push((i as f64 + 0.25 + 0.1 * rep as f64) / k as f64);
            }
        }
        let seq = GaitSequence::new("pm", None, frames).unwrap().with_phases(phases).unwrap();
        (vec![seq], poses)
    }

    #[test]
    fn point_masses_become_centroids_in_phase_order() {
        let k = 5;
        let (seqs, poses) = point_mass_sequences(k);
        let all: Vec<_> = seqs[0].frames().to_vec();
        let pca = fit_pca(&all, k - 1).unwrap();
        let set = build_keyposes(&seqs, &KeyPoseConfig { k, ..Default::default() }, pca.clone()).unwrap();
        for (i, p) in poses.iter().enumerate() {
            let want = pca.project(p).unwrap();
            assert!(euclidean(&want, set.embedding(i)) < 1e-9);
        }
        assert!(set.phase_means().windows(2).all(|w| w[0] < w[1]));
        assert!(set.tau() > 0.0);
        assert_eq!(set.member_counts(), &[3; 5]);
    }

    #[test]
    fn too_few_distinct_frames() {
        let (seqs, _) = point_mass_sequences(4);
        let all: Vec<_> = seqs[0].frames().to_vec();
        let pca = fit_pca(&all, 3).unwrap();
        let err = build_keyposes(&seqs, &KeyPoseConfig { k: 5, ..Default::default() }, pca).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn keyposes_round_trip_through_checkpoint() {
        let (seqs, _) = point_mass_sequences(4);
        let pca = fit_pca(seqs[0].frames(), 3).unwrap();
        let set = build_keyposes(&seqs, &KeyPoseConfig { k: 4, ..Default::default() }, pca).unwrap();
        let back = KeyPoseSet::from_bytes(&set.to_bytes()).unwrap();
        assert_eq!(set, back);
        assert!(set.report().contains("tau"));
    }

    #[test]
    fn period_estimate_on_walker() {
        for period in [24, 30, 33] {
            let p = SyntheticWalkerParams {
                period,
                noise_rate: 0.01,
                ..Default::default()
            };
            let seq = generate_synthetic_walker(&p, 120, 2).unwrap();
            let est = estimate_period(&seq).unwrap();
            assert!(est.abs_diff(period) <= 1, "period {period} estimated {est}");
            let ph = estimate_phases(&seq).unwrap();
            assert!(ph.iter().all(|p| (0.0..1.0).contains(p)));
        }
    }

    #[test]
    fn walker_nearest_poses_follow_the_cycle() {
        use crate::pose_graph::{cyclic_order_violations, PoseState};
        let g = FrameGeometry::default();
        let params = |offset: f64| SyntheticWalkerParams {
            period: 30,
            noise_rate: 0.01,
            phase_offset: offset,
            geometry: g,
            ..Default::default()
        };
        let train: Vec<GaitSequence> = (0..20)
            .map(|i| generate_synthetic_walker(&params(i as f64 / 20.0), 60, i).unwrap())
            .collect();
        let frames: Vec<SilhouetteFrame> = train.iter().flat_map(|s| s.frames().iter().cloned()).collect();
        let kp = build_keyposes(&train, &KeyPoseConfig::default(), fit_pca(&frames, 32).unwrap()).unwrap();
        let fresh = generate_synthetic_walker(&params(0.37), 90, 999).unwrap();
        let states: Vec<PoseState> = fresh
            .frames()
            .iter()
            .map(|f| PoseState::Key(kp.nearest(&kp.subspace().project(f).unwrap())))
            .collect();
        let v = cyclic_order_violations(&states, kp.k());
        let s: Vec<String> = states.iter().map(|s| s.to_string()).collect();
        assert!(v <= 0.1, "violation rate {v} {}", s.join(" "));
        assert!(kp.phase_means().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0, 4.0], 50.0), 2.5);
        assert_eq!(percentile(&[5.0], 95.0), 5.0);
        assert_eq!(percentile(&[0.0, 10.0], 95.0), 9.5);
    }
}
