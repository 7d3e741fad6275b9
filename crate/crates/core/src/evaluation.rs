//! Dice overlap, CMC curves, occlusion sweeps and stratified k-fold runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::keypose::percentile;
use crate::occlusion::{occlude_sequence_with_mask, sample_mask};
use crate::pipeline::TrainedPipeline;
use crate::silhouette::{GaitSequence, SilhouetteFrame};

/// `2·Σ(F·F̂) / (ΣF² + ΣF̂²)`, with 1 for two empty frames.
pub fn dice_score(f: &SilhouetteFrame, f_hat: &SilhouetteFrame) -> Result<f64> {
    f.geometry().check(f_hat.geometry())?;
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in f.pixels().iter().zip(f_hat.pixels()) {
        num += a * b;
        den += a * a + b * b;
    }
    Ok(if den == 0.0 { 1.0 } else { 2.0 * num / den })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub sequence_id: String,
    pub true_label: String,
    pub ranked: Vec<(String, f64)>,
    pub occlusion_degree: f64,
    pub reconstruction_dice: Option<f64>,
}

impl EvalRecord {
    /// 1-based rank of the true label, if present.
    pub fn rank_of_truth(&self) -> Option<usize> {
        self.ranked.iter().position(|(l, _)| *l == self.true_label).map(|p| p + 1)
    }

    pub fn correct_at(&self, rank: usize) -> bool {
        self.rank_of_truth().is_some_and(|r| r <= rank)
    }
}

/// Accuracy (%) at ranks `1..=max_rank`.
pub fn cmc_curve(records: &[EvalRecord], max_rank: usize) -> Result<Vec<(usize, f64)>> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if max_rank == 0 {
        return Err(Error::InvalidArgument("max_rank must be at least 1".into()));
    }
    let n = records.len() as f64;
    Ok((1..=max_rank)
        .map(|r| (r, 100.0 * records.iter().filter(|rec| rec.correct_at(r)).count() as f64 / n))
        .collect())
}

pub fn rank1_accuracy(records: &[EvalRecord]) -> Result<f64> {
    Ok(cmc_curve(records, 1)?[0].1)
}

/// CSV `sequence_id,rank,label,probability` over every record.
pub fn predictions_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from("sequence_id,rank,label,probability\n");
    for rec in records {
        for (i, (l, p)) in rec.ranked.iter().enumerate() {
            writeln!(s, "{},{},{},{:.9}", rec.sequence_id, i + 1, l, p).unwrap();
        }
    }
    s
}

pub fn cmc_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("rank,accuracy\n");
    for (r, a) in curve {
        writeln!(s, "{r},{a:.4}").unwrap();
    }
    s
}

/// Occlusion-degree buckets: the first is `[e0, e1]`, later ones `(e_i, e_i+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Buckets {
    edges: Vec<f64>,
}

impl Buckets {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) || edges[0] < 0.0 || edges[edges.len() - 1] > 1.0 {
            return Err(Error::InvalidArgument("bucket edges must be increasing within [0, 1]".into()));
        }
        Ok(Self { edges })
    }

    /// `{0, 10, ..., 90, 100}` percent.
    pub fn tenths() -> Self {
        Self {
            edges: (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self, b: usize) -> (f64, f64) {
        (self.edges[b], self.edges[b + 1])
    }

    pub fn index_of(&self, degree: f64) -> Option<usize> {
        if degree < self.edges[0] {
            return None;
        }
        (0..self.len()).find(|&b| degree <= self.edges[b + 1] + 1e-12)
    }

    pub fn midpoint(&self, b: usize) -> f64 {
        0.5 * (self.edges[b] + self.edges[b + 1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Rank-1 accuracy (%), `None` for an empty bucket.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub buckets: Buckets,
    pub rows: Vec<SweepRow>,
    /// Rank-1 accuracy (%) on the unoccluded probes.
    pub baseline: Option<f64>,
}

impl SweepReport {
    /// Aggregates records into buckets by realized occlusion fraction.
    pub fn from_records(records: &[EvalRecord], buckets: Buckets, baseline: Option<f64>) -> Self {
        let mut hits = vec![(0usize, 0usize); buckets.len()];
        for r in records {
            if let Some(b) = buckets.index_of(r.occlusion_degree) {
                hits[b].0 += 1;
                hits[b].1 += usize::from(r.correct_at(1));
            }
        }
        let rows = hits
            .iter()
            .enumerate()
            .map(|(b, (n, c))| {
                let (lo, hi) = buckets.bounds(b);
                SweepRow {
                    lo,
                    hi,
                    count: *n,
                    accuracy: (*n > 0).then(|| 100.0 * *c as f64 / *n as f64),
                }
            })
            .collect();
        Self { buckets, rows, baseline }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bucket,lo_percent,hi_percent,count,rank1_accuracy\n");
        if let Some(b) = self.baseline {
            writeln!(s, "unoccluded,0,0,,{b:.4}").unwrap();
        }
        for (i, r) in self.rows.iter().enumerate() {
            let acc = r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_default();
            writeln!(s, "{},{:.0},{:.0},{},{acc}", i + 1, r.lo * 100.0, r.hi * 100.0, r.count).unwrap();
        }
        s
    }

    /// Largest increase in accuracy from one non-empty bucket to the next.
    pub fn max_rise(&self) -> f64 {
        let accs: Vec<f64> = self.rows.iter().filter_map(|r| r.accuracy).collect();
        accs.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Occlusion degrees and seeds for each sweep bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPlan {
    pub buckets: Buckets,
    /// Masks drawn per probe and bucket.
    pub draws: usize,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            buckets: Buckets {
                edges: (0..=9).map(|i| i as f64 / 10.0).collect(),
            },
            draws: 1,
            seed: 0,
            jobs: 1,
        }
    }
}

/// Runs every probe unoccluded and under `draws` masks per bucket (requested
/// degree = bucket midpoint) through the pipeline. Records are bucketed by
/// their realized occlusion fraction.
pub fn occlusion_sweep(
    pipeline: &TrainedPipeline,
    probes: &[GaitSequence],
    plan: &SweepPlan,
) -> Result<(SweepReport, Vec<EvalRecord>, Vec<EvalRecord>)> {
    let clean = pipeline.evaluate(probes, None, plan.jobs)?;
    let baseline = rank1_accuracy(&clean).ok();
    let mut occluded = Vec::new();
    for b in 0..plan.buckets.len() {
        let degree = plan.buckets.midpoint(b);
        for draw in 0..plan.draws {
            let mut jobs = Vec::with_capacity(probes.len());
            for (p, seq) in probes.iter().enumerate() {
                let seed = plan
                    .seed
                    .wrapping_add((b as u64) << 32)
                    .wrapping_add((draw as u64) << 16)
                    .wrapping_add(p as u64);
                let mask = sample_mask(seq.len(), degree, seed)?;
                let occ = occlude_sequence_with_mask(seq, &mask)?
                    .with_id(format!("{}@b{}d{}", seq.id(), b + 1, draw));
                jobs.push(occ);
            }
            occluded.extend(pipeline.evaluate(&jobs, Some(probes), plan.jobs)?);
        }
    }
    let report = SweepReport::from_records(&occluded, plan.buckets.clone(), baseline);
    Ok((report, clean, occluded))
}

/// Stratified folds: each class is shuffled and dealt round-robin, with the
/// dealing offset carried across classes so fold sizes stay balanced.
pub fn stratified_folds(labels: &[String], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument("k must be at least 2".into()));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    for (l, members) in &by_class {
        if members.len() < k {
            return Err(Error::InsufficientPerClass {
                label: l.to_string(),
                count: members.len(),
                required: k,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[next % k].push(i);
            next += 1;
        }
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Self {
        Self {
            min: percentile(values, 0.0),
            q1: percentile(values, 25.0),
            median: percentile(values, 50.0),
            q3: percentile(values, 75.0),
            max: percentile(values, 100.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KfoldResult {
    pub k: usize,
    pub train_fraction: f64,
    pub accuracies: Vec<f64>,
    pub quartiles: Quartiles,
}

/// For each `k`, trains on `k - 1` folds and scores the held-out fold with
/// `run(train_indices, test_indices) -> accuracy`.
pub fn kfold_robustness<F>(labels: &[String], k_values: &[usize], seed: u64, mut run: F) -> Result<Vec<KfoldResult>>
where
    F: FnMut(&[usize], &[usize]) -> Result<f64>,
{
    let mut out = Vec::new();
    for &k in k_values {
        let folds = stratified_folds(labels, k, seed)?;
        let mut accs = Vec::with_capacity(k);
        for test in 0..k {
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != test)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            accs.push(run(&train, &folds[test])?);
        }
        out.push(KfoldResult {
            k,
            train_fraction: (k - 1) as f64 / k as f64,
            quartiles: Quartiles::of(&accs),
            accuracies: accs,
        });
    }
    Ok(out)
}

pub fn kfold_csv(results: &[KfoldResult]) -> String {
    let mut s = String::from("k,train_fraction,fold,accuracy\n");
    for r in results {
        for (i, a) in r.accuracies.iter().enumerate() {
            writeln!(s, "{},{:.4},{},{:.4}", r.k, r.train_fraction, i + 1, a).unwrap();
        }
    }
    s.push_str("\nk,min,q1,median,q3,max\n");
    for r in results {
        let q = &r.quartiles;
        writeln!(s, "{},{:.4},{:.4},{:.4},{:.4},{:.4}", r.k, q.min, q.q1, q.median, q.q3, q.max).unwrap();
    }
    s
}
