//! Prediction scoring, a mean-adjacency baseline and evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::braingraph::{Adjacency, BrainGraph, GraphPair, Hemisphere};
use crate::error::{Error, Result};
use crate::sampler::Sampler;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distance {
    pub mse: f64,
    pub frobenius: f64,
}

pub fn graph_distance(a: &Adjacency, b: &Adjacency) -> Result<Distance> {
    if a.size() != b.size() {
        return Err(Error::ShapeMismatch {
            op: "graph_distance",
            lhs: vec![a.size(), a.size()],
            rhs: vec![b.size(), b.size()],
        });
    }
    let sq: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    if !sq.is_finite() {
        return Err(Error::Numeric("non-finite adjacency entry".into()));
    }
    let count = a.as_slice().len().max(1) as f64;
    Ok(Distance {
        mse: sq / count,
        frobenius: sq.sqrt(),
    })
}

/// Element-wise mean of the training target adjacencies.
pub fn baseline_mean_predictor(targets: &[&Adjacency]) -> Result<Adjacency> {
    let first = targets.first().ok_or_else(|| {
        Error::InvalidArgument("baseline needs at least one training graph".into())
    })?;
    let n = first.size();
    let mut acc = vec![0.0; n * n];
    for t in targets {
        if t.size() != n {
            return Err(Error::ShapeMismatch {
                op: "baseline_mean_predictor",
                lhs: vec![n, n],
                rhs: vec![t.size(), t.size()],
            });
        }
        acc.iter_mut().zip(t.as_slice()).for_each(|(a, v)| *a += v);
    }
    let count = targets.len() as f64;
    acc.iter_mut().for_each(|a| *a /= count);
    Adjacency::from_vec(n, acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject_id: String,
    pub hemisphere: Hemisphere,
    pub fold: usize,
    pub mse: f64,
    pub frobenius: f64,
    pub baseline_mse: f64,
    pub baseline_frobenius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

fn summarize(values: impl Iterator<Item = f64>) -> Summary {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    Summary {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub subjects: usize,
    pub mse: Summary,
    pub frobenius: Summary,
    pub baseline_mse: Summary,
    pub baseline_frobenius: Summary,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<SubjectScore>,
    pub cross_cohort: bool,
    /// Free-form `key = value` lines describing the run.
    pub config_echo: String,
}

impl EvalReport {
    pub fn folds(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.rows.iter().map(|r| r.fold).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub fn fold_summary(&self, fold: usize) -> FoldSummary {
        let rows: Vec<&SubjectScore> = self.rows.iter().filter(|r| r.fold == fold).collect();
        FoldSummary {
            fold,
            subjects: rows.len(),
            mse: summarize(rows.iter().map(|r| r.mse)),
            frobenius: summarize(rows.iter().map(|r| r.frobenius)),
            baseline_mse: summarize(rows.iter().map(|r| r.baseline_mse)),
            baseline_frobenius: summarize(rows.iter().map(|r| r.baseline_frobenius)),
        }
    }

    pub fn fold_summaries(&self) -> Vec<FoldSummary> {
        self.folds()
            .into_iter()
            .map(|f| self.fold_summary(f))
            .collect()
    }

    pub fn mean_frobenius(&self) -> f64 {
        summarize(self.rows.iter().map(|r| r.frobenius)).mean
    }

    pub fn mean_mse(&self) -> f64 {
        summarize(self.rows.iter().map(|r| r.mse)).mean
    }

    pub fn mean_baseline_frobenius(&self) -> f64 {
        summarize(self.rows.iter().map(|r| r.baseline_frobenius)).mean
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.cross_cohort |= other.cross_cohort;
        self.rows.extend(other.rows);
    }

    /// `subject_id,hemisphere,mse,frobenius,baseline_mse,baseline_frobenius`
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record([
            "subject_id",
            "hemisphere",
            "mse",
            "frobenius",
            "baseline_mse",
            "baseline_frobenius",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.subject_id.clone(),
                r.hemisphere.to_string(),
                r.mse.to_string(),
                r.frobenius.to_string(),
                r.baseline_mse.to_string(),
                r.baseline_frobenius.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let overall = |f: fn(&SubjectScore) -> f64| summarize(self.rows.iter().map(f));
        let _ = writeln!(s, "subjects = {}", self.rows.len());
        let _ = writeln!(s, "cross_cohort = {}", self.cross_cohort);
        for (name, sm) in [
            ("mse", overall(|r| r.mse)),
            ("frobenius", overall(|r| r.frobenius)),
            ("baseline_mse", overall(|r| r.baseline_mse)),
            ("baseline_frobenius", overall(|r| r.baseline_frobenius)),
        ] {
            let _ = writeln!(s, "{name} = {:.6} ± {:.6}", sm.mean, sm.std);
        }
        for f in self.fold_summaries() {
            let _ = writeln!(
                s,
                "fold {}: n = {}, frobenius = {:.6} ± {:.6}, baseline_frobenius = {:.6} ± {:.6}, mse = {:.3e}, baseline_mse = {:.3e}",
                f.fold,
                f.subjects,
                f.frobenius.mean,
                f.frobenius.std,
                f.baseline_frobenius.mean,
                f.baseline_frobenius.std,
                f.mse.mean,
                f.baseline_mse.mean
            );
        }
        if !self.config_echo.is_empty() {
            s.push_str("\n# config\n");
            s.push_str(&self.config_echo);
        }
        s
    }
}

/// RNG for one subject's reverse chain: the run seed picks the key and the
/// subject's position picks the stream.
pub fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<BrainGraph>,
}

/// Samples one prediction per test subject and scores it and the baseline
/// against the true target adjacency.
pub fn evaluate_model(
    sampler: &Sampler<'_>,
    test_pairs: &[GraphPair],
    baseline: &Adjacency,
    seed: u64,
    fold: usize,
) -> Result<Evaluation> {
    if test_pairs.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let results: Vec<Result<(SubjectScore, BrainGraph)>> = test_pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut rng = subject_rng(seed, i);
            let pred = sampler.sample_target(&pair.source, &mut rng, None)?;
            let d = graph_distance(&pred.adjacency, &pair.target.adjacency)?;
            let b = graph_distance(baseline, &pair.target.adjacency)?;
            Ok((
                SubjectScore {
                    subject_id: pair.subject_id.clone(),
                    hemisphere: pair.hemisphere,
                    fold,
                    mse: d.mse,
                    frobenius: d.frobenius,
                    baseline_mse: b.mse,
                    baseline_frobenius: b.frobenius,
                },
                pred,
            ))
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut predictions = Vec::with_capacity(results.len());
    for r in results {
        let (row, pred) = r?;
        rows.push(row);
        predictions.push(pred);
    }
    Ok(Evaluation {
        report: EvalReport {
            rows,
            cross_cohort: false,
            config_echo: String::new(),
        },
        predictions,
    })
}
