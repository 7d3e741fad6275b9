//! Frame-to-state labeling by shortest path over the cyclic state-transition DAG.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::keypose::{euclidean, KeyPoseSet};
use crate::silhouette::{write_text, GaitSequence};

/// A key-pose state (0-based) or the occlusion state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoseState {
    Key(usize),
    Occluded,
}

impl PoseState {
    /// 1-based index with the occlusion state at `k + 1`.
    pub fn index1(self, k: usize) -> usize {
        match self {
            PoseState::Key(i) => i + 1,
            PoseState::Occluded => k + 1,
        }
    }

    pub fn from_index1(index: usize, k: usize) -> Result<Self> {
        match index {
            i if i >= 1 && i <= k => Ok(PoseState::Key(i - 1)),
            i if i == k + 1 => Ok(PoseState::Occluded),
            _ => Err(Error::InvalidState { index, k }),
        }
    }

    /// Column in the distance matrix.
    #[cfg(test)]
    fn column(self, k: usize) -> usize {
        match self {
            PoseState::Key(i) => i,
            PoseState::Occluded => k,
        }
    }

    fn from_column(c: usize, k: usize) -> Self {
        if c == k {
            PoseState::Occluded
        } else {
            PoseState::Key(c)
        }
    }

    pub fn is_occluded(self) -> bool {
        self == PoseState::Occluded
    }
}

impl fmt::Display for PoseState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoseState::Key(i) => write!(f, "S{}", i + 1),
            PoseState::Occluded => write!(f, "O"),
        }
    }
}

/// Cyclic left-to-right model: stay, advance by one (wrapping), or move
/// to or from the occlusion state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateTransitionModel {
    k: usize,
}

impl StateTransitionModel {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument("transition model needs k >= 2".into()));
        }
        Ok(Self { k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn allowed(&self, from: PoseState, to: PoseState) -> bool {
        match (from, to) {
            (PoseState::Key(i), PoseState::Key(j)) => j == i || j == (i + 1) % self.k,
            _ => true,
        }
    }
}

/// `N × (K+1)` frame-to-state costs; the last column is the occlusion cost τ.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    values: Vec<f64>,
    n_frames: usize,
    n_states: usize,
}

impl DistanceMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.first().map(Vec::len).ok_or(Error::EmptySequence)?;
        if n_states < 3 {
            return Err(Error::InvalidArgument("distance matrix needs at least 3 states".into()));
        }
        let mut values = Vec::with_capacity(rows.len() * n_states);
        for r in &rows {
            if r.len() != n_states {
                return Err(Error::LengthMismatch {
                    expected: n_states,
                    actual: r.len(),
                });
            }
            if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::InvalidArgument("distances must be finite and nonnegative".into()));
            }
            values.extend_from_slice(r);
        }
        Ok(Self {
            values,
            n_frames: rows.len(),
            n_states,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn get(&self, frame: usize, column: usize) -> f64 {
        self.values[frame * self.n_states + column]
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * self.n_states..(frame + 1) * self.n_states]
    }

    /// Copy with the occlusion column set to `tau`.
    pub fn with_tau(&self, tau: f64) -> Self {
        let mut m = self.clone();
        let k = self.n_states - 1;
        for i in 0..self.n_frames {
            m.values[i * self.n_states + k] = tau;
        }
        m
    }
}

/// Per-frame state labels from [`map_frames`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoseAssignment {
    states: Vec<PoseState>,
    k: usize,
    total_cost: f64,
}

impl PoseAssignment {
    pub fn new(states: Vec<PoseState>, k: usize, total_cost: f64) -> Self {
        Self { states, k, total_cost }
    }

    pub fn states(&self) -> &[PoseState] {
        &self.states
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn total_cost(&self) -> f64 {
        self.total_cost
    }

    pub fn occluded_indices(&self) -> Vec<usize> {
        (0..self.states.len()).filter(|&i| self.states[i].is_occluded()).collect()
    }

    /// One line per frame: `<frame_index> <state_index> <is_occluded>`,
    /// with 0-based frames and 1-based states.
    pub fn export(&self) -> String {
        let mut s = String::new();
        for (i, st) in self.states.iter().enumerate() {
            writeln!(s, "{i} {} {}", st.index1(self.k), u8::from(st.is_occluded())).unwrap();
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.export())
    }
}

/// Euclidean distances between each projected frame and each key pose,
/// plus the constant occlusion column.
pub fn distance_matrix(seq: &GaitSequence, kp: &KeyPoseSet) -> Result<DistanceMatrix> {
    let k = kp.k();
    let mut values = Vec::with_capacity(seq.len() * (k + 1));
    for f in seq.frames() {
        let z = kp.subspace().project(f)?;
        values.extend(kp.embeddings().iter().map(|e| euclidean(&z, e)));
        values.push(kp.tau());
    }
    Ok(DistanceMatrix {
        values,
        n_frames: seq.len(),
        n_states: k + 1,
    })
}

/// Minimum-cost state path under the transition model (Viterbi-style DP).
/// Any start state is allowed; ties go to the lowest state index with the
/// occlusion state ordered last.
pub fn map_frames(m: &DistanceMatrix, model: &StateTransitionModel) -> Result<PoseAssignment> {
    let k = model.k();
    if m.n_states() != k + 1 {
        return Err(Error::DimensionMismatch {
            expected: k + 1,
            actual: m.n_states(),
        });
    }
    let n = m.n_frames();
    let s = k + 1;
    if n == 0 {
        return Ok(PoseAssignment::new(Vec::new(), k, 0.0));
    }
    let mut cost = m.row(0).to_vec();
    let mut back = vec![0usize; n * s];
    let mut next = vec![0.0; s];
    for i in 1..n {
        let best_all = argmin(&cost);
        for c in 0..s {
            let pred = if c == k {
                best_all
            } else {
                let prev = (c + k - 1) % k;
                let mut cands = [c, prev, k];
                cands.sort_unstable();
                let mut b = cands[0];
                for &p in &cands[1..] {
                    if cost[p] < cost[b] {
                        b = p;
                    }
                }
                b
            };
            back[i * s + c] = pred;
            next[c] = cost[pred] + m.get(i, c);
        }
        std::mem::swap(&mut cost, &mut next);
    }
    let mut c = argmin(&cost);
    let total_cost = cost[c];
    let mut cols = vec![0usize; n];
    for i in (0..n).rev() {
        cols[i] = c;
        c = back[i * s + c];
    }
    let states = cols.into_iter().map(|c| PoseState::from_column(c, k)).collect();
    Ok(PoseAssignment::new(states, k, total_cost))
}

fn argmin(v: &[f64]) -> usize {
    let mut b = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[b] {
            b = i;
        }
    }
    b
}

/// Maximal runs of occluded frames as `(start, length)`, sorted by start.
pub fn detect_occlusion_runs(pa: &PoseAssignment) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, st) in pa.states().iter().enumerate() {
        match (st.is_occluded(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - s));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, pa.len() - s));
    }
    runs
}

/// Fraction of adjacent key-pose pairs (ignoring occluded frames) that step
/// backwards in the cycle.
pub fn cyclic_order_violations(states: &[PoseState], k: usize) -> f64 {
    let keys: Vec<usize> = states
        .iter()
        .filter_map(|s| match s {
            PoseState::Key(i) => Some(*i),
            PoseState::Occluded => None,
        })
        .collect();
    if keys.len() < 2 {
        return 0.0;
    }
    let bad = keys
        .windows(2)
        .filter(|w| {
            let step = (w[1] + k - w[0]) % k;
            step > k / 2
        })
        .count();
    bad as f64 / (keys.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path_cost(m: &DistanceMatrix, path: &[PoseState], k: usize) -> f64 {
        path.iter().enumerate().fold(0.0, |acc, (i, s)| acc + m.get(i, s.column(k)))
    }

    fn brute_force(m: &DistanceMatrix, model: &StateTransitionModel) -> f64 {
        let k = model.k();
        let s = k + 1;
        let n = m.n_frames();
        let mut best = f64::INFINITY;
        for code in 0..s.pow(n as u32) {
            let mut c = code;
            let path: Vec<PoseState> = (0..n)
                .map(|_| {
                    let st = PoseState::from_column(c % s, k);
                    c /= s;
                    st
                })
                .collect();
            if path.windows(2).all(|w| model.allowed(w[0], w[1])) {
                best = best.min(path_cost(m, &path, k));
            }
        }
        best
    }

    #[test]
    fn transition_predicate() {
        let m = StateTransitionModel::new(4).unwrap();
        use PoseState::*;
        assert!(m.allowed(Key(1), Key(1)));
        assert!(m.allowed(Key(1), Key(2)));
        assert!(m.allowed(Key(3), Key(0)));
        assert!(!m.allowed(Key(1), Key(3)));
        assert!(!m.allowed(Key(2), Key(1)));
        assert!(m.allowed(Key(2), Occluded));
        assert!(m.allowed(Occluded, Key(0)));
        assert!(m.allowed(Occluded, Occluded));
    }

    #[test]
    fn single_frame_picks_minimum() {
        let m = DistanceMatrix::from_rows(vec![vec![0.1, 5.0, 3.0]]).unwrap();
        let pa = map_frames(&m, &StateTransitionModel::new(2).unwrap()).unwrap();
        assert_eq!(pa.states(), &[PoseState::Key(0)]);
        assert_eq!(pa.total_cost(), 0.1);
    }

    #[test]
    fn all_far_frames_go_to_occlusion() {
        let rows = vec![vec![4.0, 5.0, 6.0, 1.0]; 7];
        let pa = map_frames(&DistanceMatrix::from_rows(rows).unwrap(), &StateTransitionModel::new(3).unwrap()).unwrap();
        assert!(pa.states().iter().all(|s| s.is_occluded()));
        assert_eq!(pa.total_cost(), 7.0);
    }

    #[test]
    fn greedy_fails_where_dp_succeeds() {
        // Greedy argmin: S1, S3, S3, S1, which jumps S1 -> S3.
        let rows = vec![
            vec![0.0, 2.0, 2.0, 9.0],
            vec![2.0, 1.5, 1.0, 9.0],
            vec![2.0, 1.2, 1.0, 9.0],
            vec![0.0, 2.0, 2.0, 9.0],
        ];
        let m = DistanceMatrix::from_rows(rows).unwrap();
        let model = StateTransitionModel::new(3).unwrap();
        let pa = map_frames(&m, &model).unwrap();
        assert!(pa.states().windows(2).all(|w| model.allowed(w[0], w[1])));
        assert_eq!(pa.total_cost(), brute_force(&m, &model));
        assert_eq!(pa.states(), &[PoseState::Key(0), PoseState::Key(1), PoseState::Key(2), PoseState::Key(0)]);
    }

    #[test]
    fn ties_prefer_lowest_index() {
        let m = DistanceMatrix::from_rows(vec![vec![1.0, 1.0, 1.0]; 2]).unwrap();
        let pa = map_frames(&m, &StateTransitionModel::new(2).unwrap()).unwrap();
        assert_eq!(pa.states(), &[PoseState::Key(0), PoseState::Key(0)]);
    }

    #[test]
    fn runs_of_occlusion() {
        use PoseState::*;
        let pa = PoseAssignment::new(vec![Key(0), Occluded, Occluded, Key(1), Occluded], 2, 0.0);
        assert_eq!(detect_occlusion_runs(&pa), vec![(1, 2), (4, 1)]);
        let clean = PoseAssignment::new(vec![Key(0), Key(1)], 2, 0.0);
        assert!(detect_occlusion_runs(&clean).is_empty());
        assert_eq!(pa.export().lines().nth(1).unwrap(), "1 3 1");
    }

    #[test]
    fn state_indices_are_one_based() {
        assert_eq!(PoseState::from_index1(3, 16).unwrap(), PoseState::Key(2));
        assert_eq!(PoseState::from_index1(17, 16).unwrap(), PoseState::Occluded);
        assert!(PoseState::from_index1(0, 16).is_err());
        assert!(PoseState::from_index1(18, 16).is_err());
    }

    #[test]
    fn distances_match_hand_computation() {
        use crate::keypose::fit_pca;
        use crate::silhouette::{FrameGeometry, SilhouetteFrame};
        let g = FrameGeometry::new(2, 1).unwrap();
        let a = SilhouetteFrame::from_pixels(g, vec![1.0, 0.0]).unwrap();
        let b = SilhouetteFrame::from_pixels(g, vec![0.0, 1.0]).unwrap();
        let pca = fit_pca(&[a.clone(), b.clone()], 1).unwrap();
        // Mean (0.5, 0.5), axis (1, -1)/sqrt(2): a -> 1/sqrt(2), b -> -1/sqrt(2).
        let kp = KeyPoseSet::from_parts(pca, vec![vec![0.5], vec![-0.3]], 0.25).unwrap();
        let seq = GaitSequence::new("t", None, vec![a, b]).unwrap();
        let m = distance_matrix(&seq, &kp).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let want = [[r - 0.5, r + 0.3, 0.25], [r + 0.5, r - 0.3, 0.25]];
        for (i, row) in want.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((m.get(i, c) - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn wrong_state_count_is_rejected() {
        let m = DistanceMatrix::from_rows(vec![vec![1.0, 1.0, 1.0]]).unwrap();
        assert!(map_frames(&m, &StateTransitionModel::new(3).unwrap()).is_err());
    }

    fn matrix_strategy() -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
        (2usize..=4, 1usize..=6).prop_flat_map(|(k, n)| {
            (Just(k), proptest::collection::vec(proptest::collection::vec(0.0f64..10.0, k + 1), n))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn dp_matches_exhaustive_search((k, rows) in matrix_strategy()) {
            let m = DistanceMatrix::from_rows(rows).unwrap();
            let model = StateTransitionModel::new(k).unwrap();
            let pa = map_frames(&m, &model).unwrap();
            prop_assert!(pa.states().windows(2).all(|w| model.allowed(w[0], w[1])));
            prop_assert_eq!(pa.total_cost(), brute_force(&m, &model));
            prop_assert!((path_cost(&m, pa.states(), k) - pa.total_cost()).abs() < 1e-9);
        }

        #[test]
        fn raising_tau_never_adds_occlusions(
            (k, rows) in matrix_strategy(),
            t1 in 0.0f64..10.0,
            dt in 0.0f64..5.0,
        ) {
            let m = DistanceMatrix::from_rows(rows).unwrap();
            let model = StateTransitionModel::new(k).unwrap();
            let lo = map_frames(&m.with_tau(t1), &model).unwrap();
            let hi = map_frames(&m.with_tau(t1 + dt), &model).unwrap();
            prop_assert!(hi.occluded_indices().len() <= lo.occluded_indices().len());
        }

        #[test]
        fn runs_reproduce_occluded_indices(bits in proptest::collection::vec(any::<bool>(), 0..40)) {
            let states: Vec<_> = bits.iter().map(|b| if *b { PoseState::Occluded } else { PoseState::Key(0) }).collect();
            let pa = PoseAssignment::new(states, 2, 0.0);
            let flat: Vec<usize> = detect_occlusion_runs(&pa).iter().flat_map(|(s, l)| *s..s + l).collect();
            prop_assert_eq!(flat, pa.occluded_indices());
        }
    }
}
