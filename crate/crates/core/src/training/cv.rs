use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ExperimentConfig, PriorKind, Stage, TrainConfig};
use super::stages::{predict, train_autoencoder, train_segmenter, TrainOutcome};
use crate::architectures::UNet;
use crate::data::{make_folds, sample_seed, ImageSample};
use crate::error::{Error, Result};
use crate::losses::ShapePrior;
use crate::metrics::{evaluate_case, CaseMetrics, MetricsReport};

/// Which cases a model saw during a fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditEntry {
    pub fold: usize,
    pub stage: Stage,
    /// `fit` for optimized-on, `select` for model-selection cases.
    pub role: &'static str,
    pub case_id: String,
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold_index: usize,
    pub val_ids: Vec<String>,
    /// Shape weight kept for this fold (`None` without a prior).
    pub lambda: Option<f64>,
    pub autoencoder: Option<TrainOutcome>,
    pub segmenter: Option<TrainOutcome>,
    pub cases: Vec<CaseMetrics>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    /// Metrics of every validation case of the completed folds.
    pub report: MetricsReport,
    pub folds: Vec<FoldOutcome>,
    pub audit: Vec<AuditEntry>,
}

impl CrossValidation {
    /// `fold,stage,role,case_id` lines.
    pub fn audit_csv(&self) -> String {
        let mut out = String::from("fold,stage,role,case_id\n");
        for a in &self.audit {
            let stage = if a.stage == Stage::Ae { "ae" } else { "seg" };
            let _ = writeln!(out, "{},{stage},{},{}", a.fold, a.role, a.case_id);
        }
        out
    }

    /// True when no fold trained or selected a model on its own validation cases.
    pub fn leakage_free(&self) -> bool {
        self.folds.iter().all(|f| {
            let val: BTreeSet<&str> = f.val_ids.iter().map(String::as_str).collect();
            self.audit
                .iter()
                .filter(|a| a.fold == f.fold_index)
                .all(|a| !val.contains(a.case_id.as_str()))
        })
    }
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    sample_seed(seed, 1000 + fold)
}

/// Splits cases into (fit, holdout) by group. Holds out about `fraction`
/// of the groups, at least one and never all of them; none when `fraction`
/// is 0 or there is a single group.
pub fn holdout_split(samples: Vec<ImageSample>, fraction: f64, seed: u64) -> (Vec<ImageSample>, Vec<ImageSample>) {
    let groups: BTreeSet<String> = samples.iter().map(|s| s.group.clone()).collect();
    let mut groups: Vec<String> = groups.into_iter().collect();
    let n_hold = if fraction > 0.0 && groups.len() >= 2 {
        ((groups.len() as f64 * fraction).round() as usize).clamp(1, groups.len() - 1)
    } else {
        0
    };
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let hold: BTreeSet<String> = groups.into_iter().take(n_hold).collect();
    samples.into_iter().partition(|s| !hold.contains(&s.group))
}

fn mean_hd(cases: &[CaseMetrics]) -> f64 {
    let hd: Vec<f64> = cases.iter().filter_map(|c| c.hd).collect();
    if hd.len() < cases.len() || hd.is_empty() {
        // A case without a surface is worse than any finite distance.
        return f64::INFINITY;
    }
    hd.iter().sum::<f64>() / hd.len() as f64
}

fn evaluate(unet: &UNet, out: &TrainOutcome, samples: &[ImageSample], threshold: f64) -> Result<Vec<CaseMetrics>> {
    let refs: Vec<&ImageSample> = samples.iter().collect();
    let probs = predict(unet, &out.checkpoint.params, &refs)?;
    samples
        .iter()
        .zip(&probs)
        .map(|(s, p)| evaluate_case(&s.case_id, &s.mask, p, threshold))
        .collect()
}

fn run_fold(
    by_id: &BTreeMap<&str, &ImageSample>,
    cfg: &ExperimentConfig,
    fold_index: usize,
    train_ids: &[String],
    val_ids: &[String],
    audit: &mut Vec<AuditEntry>,
) -> Result<FoldOutcome> {
    let seed = fold_seed(cfg.segmenter.seed, fold_index);
    let pick = |ids: &[String]| -> Vec<ImageSample> { ids.iter().map(|id| by_id[id.as_str()].clone()).collect() };
    let (fit, hold) = holdout_split(pick(train_ids), cfg.holdout_fraction, seed);
    let val = pick(val_ids);
    let hash = cfg.hash();
    let mut record = |stage: Stage, fit: &[ImageSample], hold: &[ImageSample]| {
        for (role, set) in [("fit", fit), ("select", hold)] {
            audit.extend(set.iter().map(|s| AuditEntry {
                fold: fold_index,
                stage,
                role,
                case_id: s.case_id.clone(),
            }));
        }
    };

    let autoencoder = match cfg.segmenter.prior.network() {
        Some(kind) => {
            let ae_cfg = TrainConfig {
                seed,
                ..cfg.autoencoder.clone()
            };
            record(Stage::Ae, &fit, &hold);
            Some(train_autoencoder(kind, &cfg.model, &fit, &hold, &ae_cfg, &hash)?)
        }
        None => None,
    };
    let encoder = autoencoder.as_ref().map(|o| o.checkpoint.autoencoder()).transpose()?;
    let prior = match (&encoder, &autoencoder) {
        (Some(e), Some(o)) => Some(ShapePrior {
            encoder: e,
            params: &o.checkpoint.params,
        }),
        _ => None,
    };

    let lambdas = match (cfg.segmenter.prior, cfg.lambda_grid.is_empty()) {
        (PriorKind::None, _) | (_, true) => vec![cfg.segmenter.lambda],
        _ => cfg.lambda_grid.clone(),
    };
    record(Stage::Seg, &fit, &hold);
    let unet = UNet::new(cfg.model.clone())?;
    let mut best: Option<(f64, f64, TrainOutcome)> = None;
    for &lambda in &lambdas {
        let seg_cfg = TrainConfig {
            seed,
            lambda,
            ..cfg.segmenter.clone()
        };
        let out = train_segmenter(&cfg.model, &fit, &hold, &seg_cfg, prior, cfg.threshold, &hash)?;
        let score = if lambdas.len() > 1 {
            mean_hd(&evaluate(&unet, &out, &hold, cfg.threshold)?)
        } else {
            0.0
        };
        log::info!("fold {fold_index}: lambda {lambda} holdout HD {score}");
        if best.as_ref().map_or(true, |(s, _, _)| score < *s) {
            best = Some((score, lambda, out));
        }
    }
    let (_, lambda, segmenter) = best.expect("at least one lambda");
    let cases = evaluate(&unet, &segmenter, &val, cfg.threshold)?;
    Ok(FoldOutcome {
        fold_index,
        val_ids: val_ids.to_vec(),
        lambda: prior.map(|_| lambda),
        autoencoder,
        segmenter: Some(segmenter),
        cases,
        error: None,
    })
}

/// Runs auto-encoder pretraining and segmenter training on every fold and
/// scores each validation case. Each fold's auto-encoder sees only that
/// fold's training cases. A failing fold is recorded and the report is
/// marked incomplete.
pub fn cross_validate(dataset: &[ImageSample], cfg: &ExperimentConfig, k: usize) -> Result<CrossValidation> {
    cfg.validate()?;
    let folds = make_folds(dataset, k, cfg.segmenter.seed)?;
    let mut by_id = BTreeMap::new();
    for s in dataset {
        if by_id.insert(s.case_id.as_str(), s).is_some() {
            return Err(Error::Validation(format!("duplicate case id `{}`", s.case_id)));
        }
    }
    let mut audit = Vec::new();
    let mut outcomes = Vec::with_capacity(folds.len());
    for f in &folds {
        match run_fold(&by_id, cfg, f.fold_index, &f.train_ids, &f.val_ids, &mut audit) {
            Ok(o) => outcomes.push(o),
            Err(e) if e.is_validation() => return Err(e),
            Err(e) => {
                log::error!("fold {} failed: {e}", f.fold_index);
                outcomes.push(FoldOutcome {
                    fold_index: f.fold_index,
                    val_ids: f.val_ids.clone(),
                    lambda: None,
                    autoencoder: None,
                    segmenter: None,
                    cases: Vec::new(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let complete = outcomes.iter().all(|o| o.error.is_none());
    let cases = outcomes.iter().flat_map(|o| o.cases.iter().cloned()).collect();
    let cv = CrossValidation {
        report: MetricsReport::new(cases, complete),
        folds: outcomes,
        audit,
    };
    if !cv.leakage_free() {
        return Err(Error::Validation("a fold trained on its own validation cases".into()));
    }
    Ok(cv)
}
