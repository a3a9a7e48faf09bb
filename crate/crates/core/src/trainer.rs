//! Noise-regression training, k-fold splitting and cross-validation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::braingraph::{
    build_dataset, fit_scaler, CorticalTable, FeatureScaler, GraphPair, Hemisphere, MetricPair,
};
use crate::denoiser::{
    accumulate_loss_gradients, init_params, DenoiserInput, ModelConfig, ModelParams,
};
use crate::diff::{AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::evalmetrics::{baseline_mean_predictor, evaluate_model, EvalReport, Evaluation};
use crate::sampler::Sampler;
use crate::schedule::{cosine_schedule, sample_noise, ScheduleConfig};

/// Mean over all elements of `(ε − ε̂)²`.
pub fn mse_loss(eps: &[f64], eps_hat: &[f64]) -> Result<f64> {
    if eps.len() != eps_hat.len() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: vec![eps.len()],
            rhs: vec![eps_hat.len()],
        });
    }
    if eps.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = eps
        .iter()
        .zip(eps_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / eps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle followed by contiguous folds whose sizes differ by at most one.
pub fn kfold_split(subject_ids: &[String], folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "folds must be at least 2, got {folds}"
        )));
    }
    if folds > subject_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "{folds} folds requested for {} subjects",
            subject_ids.len()
        )));
    }
    let mut ids = subject_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n = ids.len();
    let (base, extra) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        let test = ids[start..start + size].to_vec();
        let train = ids[..start]
            .iter()
            .chain(&ids[start + size..])
            .cloned()
            .collect();
        out.push(Fold { train, test });
        start += size;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    /// `None` trains on the whole fold as one batch.
    pub batch_size: Option<usize>,
    pub folds: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    /// Stop after this many epochs without a lower mean training loss.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            optimizer: AdamWConfig::default(),
            batch_size: None,
            folds: 5,
            seed: 0,
            schedule: ScheduleConfig::default(),
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::InvalidArgument(format!(
                "folds must be at least 2, got {}",
                self.folds
            )));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::InvalidArgument("patience must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub seed: u64,
    pub fold: Option<usize>,
    /// Subjects whose nodes passed through a train-mode forward pass.
    pub batch_subjects: BTreeSet<String>,
    /// Subjects used to fit the feature scaler (filled in by the CV driver).
    pub scaler_subjects: BTreeSet<String>,
    pub stopped_early: bool,
    pub config_echo: String,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// `epoch,mean_loss,seconds` preceded by `#` lines describing the run.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = String::new();
        let _ = writeln!(s, "# seed = {}", self.seed);
        if let Some(f) = self.fold {
            let _ = writeln!(s, "# fold = {f}");
        }
        let _ = writeln!(
            s,
            "# t_sampling = one uniform t in [1, T] per subject per epoch"
        );
        let _ = writeln!(s, "# batch = {}", batch_note(&self.config_echo));
        let _ = writeln!(s, "# stopped_early = {}", self.stopped_early);
        for line in self.config_echo.lines() {
            let _ = writeln!(s, "# {line}");
        }
        s.push_str("epoch,mean_loss,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.mean_loss, e.seconds);
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

fn batch_note(echo: &str) -> String {
    echo.lines()
        .find_map(|l| l.strip_prefix("batch_size = "))
        .map(|v| {
            if v == "full" {
                "whole training fold".to_string()
            } else {
                v.to_string()
            }
        })
        .unwrap_or_else(|| "whole training fold".to_string())
}

/// `key = value` lines for a training run.
pub fn config_echo(train: &TrainConfig, model: &ModelConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "epochs = {}", train.epochs);
    let _ = writeln!(s, "lr = {}", train.optimizer.lr);
    let _ = writeln!(s, "weight_decay = {}", train.optimizer.weight_decay);
    let _ = writeln!(
        s,
        "batch_size = {}",
        train
            .batch_size
            .map_or("full".to_string(), |b| b.to_string())
    );
    let _ = writeln!(s, "folds = {}", train.folds);
    let _ = writeln!(s, "seed = {}", train.seed);
    let _ = writeln!(s, "T = {}", train.schedule.steps);
    let _ = writeln!(s, "k = {}", train.schedule.k);
    let _ = writeln!(s, "mode = {}", train.schedule.mode);
    let _ = writeln!(s, "cosine_offset = {}", train.schedule.offset);
    let _ = writeln!(
        s,
        "patience = {}",
        train.patience.map_or("off".to_string(), |p| p.to_string())
    );
    let _ = writeln!(s, "conv_layers = {}", model.conv_layers);
    let _ = writeln!(s, "conv_dim = {}", model.conv_dim);
    let _ = writeln!(s, "fc_layers = {}", model.fc_layers);
    let _ = writeln!(s, "fc_dim = {}", model.fc_dim);
    s
}

/// Trains a fresh model on `pairs`. Target nodes are expected to be scaled
/// with a scaler fitted on these subjects only.
pub fn train_model(
    pairs: &[GraphPair],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(ModelParams, TrainReport)> {
    let params = init_params(model_cfg, cfg.seed)?;
    train_from(params, pairs, cfg, model_cfg)
}

/// Same as [`train_model`] starting from the given parameters.
pub fn train_from(
    mut params: ModelParams,
    pairs: &[GraphPair],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let schedule = cosine_schedule(cfg.schedule)?;
    let steps = schedule.steps();
    // Stream 0 is the run seed; parameter init used its own generator.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(cfg.optimizer);
    let batch = cfg.batch_size.unwrap_or(pairs.len()).min(pairs.len());
    let mut report = TrainReport {
        seed: cfg.seed,
        config_echo: config_echo(cfg, model_cfg),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        if batch < pairs.len() {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let mut noisy = Vec::with_capacity(chunk.len());
            let mut noise = Vec::with_capacity(chunk.len());
            let mut timesteps = Vec::with_capacity(chunk.len());
            let mut sources = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let pair = &pairs[i];
                let t = rng.random_range(1..=steps);
                let eps = sample_noise(&mut rng, pair.target.node_count(), schedule.k());
                let diffused = schedule.forward_diffuse(&pair.target.scaled_nodes, t, &eps)?;
                noisy.push(diffused.values);
                noise.push(eps);
                timesteps.push(t);
                sources.push(&pair.source);
                report.batch_subjects.insert(pair.subject_id.clone());
            }
            let input = DenoiserInput {
                noisy: &noisy,
                timesteps: &timesteps,
                sources: &sources,
            };
            params.zero_grad();
            let loss = accumulate_loss_gradients(&mut params, model_cfg, &input, &noise)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    timesteps,
                });
            }
            opt.step(params.learnable_mut())?;
            loss_sum += loss;
            batches += 1;
        }
        params.zero_grad();
        let mean_loss = loss_sum / batches as f64;
        report.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(patience) = cfg.patience {
            if mean_loss < best {
                best = mean_loss;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok((params, report))
}

/// A trained model together with everything needed to sample from it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: ModelConfig,
    pub params: ModelParams,
    pub schedule: ScheduleConfig,
    pub scaler: FeatureScaler,
    pub metrics: MetricPair,
    pub hemisphere: Hemisphere,
    pub train_subjects: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub model: TrainedModel,
    pub train_report: TrainReport,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<FoldOutcome>,
    pub report: EvalReport,
}

/// Fits the scaler, trains and evaluates one fold.
pub fn run_fold(
    table: &CorticalTable,
    hemisphere: Hemisphere,
    metrics: &MetricPair,
    split: &Fold,
    fold: usize,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<FoldOutcome> {
    let scaler = fit_scaler(
        table,
        hemisphere,
        &split.train,
        &[&metrics.source, &metrics.target],
    )?;
    let train_pairs = build_dataset(table, hemisphere, &split.train, metrics, &scaler)?;
    let test_pairs = build_dataset(table, hemisphere, &split.test, metrics, &scaler)?;
    let (params, mut report) = train_model(&train_pairs, train_cfg, model_cfg)?;
    report.fold = Some(fold);
    report.scaler_subjects = split.train.iter().cloned().collect();

    let model = TrainedModel {
        model: *model_cfg,
        params,
        schedule: train_cfg.schedule,
        scaler,
        metrics: metrics.clone(),
        hemisphere,
        train_subjects: split.train.clone(),
    };
    let evaluation = evaluate_trained(&model, &train_pairs, &test_pairs, train_cfg.seed, fold)?;
    Ok(FoldOutcome {
        fold,
        model,
        train_report: report,
        evaluation,
    })
}

/// Scores `model` on `test_pairs` with the mean of `train_pairs` targets as baseline.
pub fn evaluate_trained(
    model: &TrainedModel,
    train_pairs: &[GraphPair],
    test_pairs: &[GraphPair],
    seed: u64,
    fold: usize,
) -> Result<Evaluation> {
    let schedule = cosine_schedule(model.schedule)?;
    let targets: Vec<_> = train_pairs.iter().map(|p| &p.target.adjacency).collect();
    let baseline = baseline_mean_predictor(&targets)?;
    let sampler = Sampler::new(
        &model.params,
        &model.model,
        &schedule,
        Some(&model.scaler),
        &model.metrics.target,
    );
    evaluate_model(&sampler, test_pairs, &baseline, seed, fold)
}

/// k-fold cross-validation on one hemisphere of `table`.
pub fn cross_validate(
    table: &CorticalTable,
    hemisphere: Hemisphere,
    metrics: &MetricPair,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<CrossValidation> {
    train_cfg.validate()?;
    let subjects = table.subjects(hemisphere);
    let splits = kfold_split(&subjects, train_cfg.folds, train_cfg.seed)?;
    let mut folds = Vec::with_capacity(splits.len());
    let mut report = EvalReport {
        config_echo: config_echo(train_cfg, model_cfg),
        ..Default::default()
    };
    for (i, split) in splits.iter().enumerate() {
        let outcome = run_fold(table, hemisphere, metrics, split, i, train_cfg, model_cfg)?;
        report.extend(outcome.evaluation.report.clone());
        folds.push(outcome);
    }
    Ok(CrossValidation { folds, report })
}
