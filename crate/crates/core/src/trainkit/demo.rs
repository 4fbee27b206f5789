//! Cross-validated micro-model training on synthetic cases, evaluated
//! through the full inference, postprocessing and metrics path.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{combined_loss, LossConfig, LossTerms};
use super::micro::{MicroConfig, MicroPredictor};
use super::optim::{Grads, SfAdamW, SfAdamWConfig};
use super::plan::{kfold_split, FoldSplit};
use crate::checkpoint::{save_checkpoint, ModelSpec};
use crate::error::{Error, Result};
use crate::inference::{plan_windows, sliding_window_predict, Blend};
use crate::metrics::{aggregate, evaluate_case, AggregateReport, CaseMetrics, EvalOptions};
use crate::params::ParamTree;
use crate::postprocess::{postprocess, PostprocessConfig};
use crate::preprocess::{augment, preprocess_case, restore_probs, AugmentSpec, PatchSpec, Preprocessed};
use crate::volcore::{ChannelStack, RegionMasks};
use crate::volio::CaseBundle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub folds: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: SfAdamWConfig,
    pub model: MicroConfig,
    pub loss: LossConfig,
    pub augment: AugmentSpec,
    pub window: [usize; 3],
    pub overlap: f64,
    pub blend: Blend,
    pub postprocess: PostprocessConfig,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            folds: 4,
            steps: 200,
            batch_size: 2,
            optimizer: SfAdamWConfig {
                lr: 0.02,
                ..Default::default()
            },
            model: MicroConfig::default(),
            loss: LossConfig::single_level(),
            augment: AugmentSpec {
                patch: PatchSpec { shape: [24, 24, 24] },
                ..Default::default()
            },
            window: [16, 16, 16],
            overlap: 0.5,
            blend: Blend::default(),
            postprocess: PostprocessConfig {
                thresholds: [0.5; 3],
                min_sizes: [0; 3],
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub dice: f64,
    pub focal: f64,
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub split: FoldSplit,
    /// Averaged iterate after the last step.
    pub params: ParamTree,
    pub history: Vec<LogRow>,
    /// Loss of the un-augmented training cases before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub cases: Vec<CaseMetrics>,
    pub aggregate: AggregateReport,
}

#[derive(Clone, Debug)]
pub struct DemoReport {
    pub config: DemoConfig,
    pub folds: Vec<FoldResult>,
}

#[derive(Serialize)]
struct FoldSummary<'a> {
    fold: usize,
    train: &'a [String],
    val: &'a [String],
    initial_loss: f64,
    final_loss: f64,
    cases: &'a [CaseMetrics],
    aggregate: &'a AggregateReport,
}

impl DemoReport {
    /// `fold{k}/checkpoint/`, `fold{k}/train_log.csv` and a top-level `fold_metrics.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let spec = ModelSpec::Micro(self.config.model.clone());
        for f in &self.folds {
            let fd = dir.join(format!("fold{}", f.split.fold));
            save_checkpoint(fd.join("checkpoint"), &f.params, &spec, self.config.seed)?;
            let mut csv = String::from("step,loss,dice,focal\n");
            for r in &f.history {
                writeln!(csv, "{},{},{},{}", r.step, r.loss, r.dice, r.focal).expect("string write");
            }
            let p = fd.join("train_log.csv");
            std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        }
        let summary: Vec<FoldSummary> = self
            .folds
            .iter()
            .map(|f| FoldSummary {
                fold: f.split.fold,
                train: &f.split.train,
                val: &f.split.val,
                initial_loss: f.initial_loss,
                final_loss: f.final_loss,
                cases: &f.cases,
                aggregate: &f.aggregate,
            })
            .collect();
        let p = dir.join("fold_metrics.json");
        std::fs::write(&p, serde_json::to_string_pretty(&summary).expect("metrics serialize")).map_err(|e| Error::io(&p, e))
    }

    pub fn mean_wt_dice(&self) -> f64 {
        let v: Vec<f64> = self
            .folds
            .iter()
            .flat_map(|f| f.aggregate.regions.iter().filter(|r| r.region == "WT").map(|r| r.mean_dice))
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

/// Loss and parameter gradients for a batch; samples run in parallel and are
/// summed in batch order.
fn batch_grads(model: &MicroConfig, loss: &LossConfig, p: &ParamTree, x: &[ChannelStack], t: &[RegionMasks]) -> Result<(LossTerms, Grads)> {
    let logits: Vec<Vec<f64>> = x.par_iter().map(|s| model.logits(p, s)).collect::<Result<_>>()?;
    let (terms, dl) = combined_loss(&logits, t, loss)?;
    let per: Vec<Grads> = x.par_iter().zip(&dl).map(|(s, d)| model.backward(p, s, d)).collect::<Result<_>>()?;
    let mut total = Grads::new();
    for g in per {
        for (name, v) in g {
            match total.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
                None => {
                    total.insert(name, v);
                }
            }
        }
    }
    Ok((terms, total))
}

fn full_loss(cfg: &DemoConfig, p: &ParamTree, train: &[Preprocessed]) -> Result<f64> {
    let x: Vec<ChannelStack> = train.iter().map(|c| c.image.clone()).collect();
    let t: Vec<RegionMasks> = train.iter().map(|c| c.regions.clone().expect("labelled")).collect();
    let logits: Vec<Vec<f64>> = x.par_iter().map(|s| cfg.model.logits(p, s)).collect::<Result<_>>()?;
    Ok(combined_loss(&logits, &t, &cfg.loss)?.0.total)
}

/// Trains one fold on `train` and evaluates the averaged iterate on `val`.
fn run_fold(cfg: &DemoConfig, split: FoldSplit, bundles: &[&CaseBundle]) -> Result<FoldResult> {
    let by_id = |id: &String| *bundles.iter().find(|b| &b.case_id == id).expect("split ids come from bundles");
    let train: Vec<Preprocessed> = split.train.iter().map(|id| preprocess_case(by_id(id), None)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9 + split.fold as u64));
    let mut params = cfg.model.build(cfg.seed)?;
    let initial_loss = full_loss(cfg, &params, &train)?;
    let mut opt = SfAdamW::new(cfg.optimizer, &params);
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut xs = Vec::with_capacity(cfg.batch_size);
        let mut ts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            let c = &train[order.pop().expect("refilled")];
            let (x, t) = augment(&c.image, c.regions.as_ref().expect("labelled"), &mut rng, &cfg.augment)?;
            xs.push(x);
            ts.push(t);
        }
        let mut terms = None;
        opt.step(&mut params, |y| {
            let (lt, g) = batch_grads(&cfg.model, &cfg.loss, y, &xs, &ts)?;
            terms = Some(lt);
            Ok((lt.total, g))
        })?;
        let lt = terms.expect("gradient evaluated");
        history.push(LogRow {
            step,
            loss: lt.total,
            dice: lt.dice,
            focal: lt.focal,
        });
    }
    let final_loss = full_loss(cfg, &params, &train)?;
    log::info!("fold {}: loss {initial_loss:.4} -> {final_loss:.4}", split.fold);

    let predictor = MicroPredictor {
        params: params.clone(),
        config: cfg.model.clone(),
        window: cfg.window,
    };
    let mut cases = Vec::with_capacity(split.val.len());
    for id in &split.val {
        let b = by_id(id);
        let gt = b.seg.as_ref().ok_or_else(|| Error::EmptyInput(format!("case {id} has no segmentation")))?;
        let pre = preprocess_case(b, None)?;
        let plan = plan_windows(pre.image.shape, cfg.window, cfg.overlap, cfg.blend)?;
        let probs = sliding_window_predict(&pre.image, &predictor, &plan, &pre.geometry)?;
        let probs = restore_probs(&probs, &pre.meta, b.image.geometry())?;
        let pred = postprocess(&probs, &cfg.postprocess)?;
        cases.push(evaluate_case(id, &pred, gt, &EvalOptions::default())?);
    }
    let aggregate = aggregate(&cases)?;
    Ok(FoldResult {
        split,
        params,
        history,
        initial_loss,
        final_loss,
        cases,
        aggregate,
    })
}

/// k-fold training of the micro model; folds run one after another.
pub fn train_demo(cases: &[CaseBundle], cfg: &DemoConfig) -> Result<DemoReport> {
    cfg.loss.validate()?;
    cfg.model.validate()?;
    cfg.postprocess.validate()?;
    if cfg.loss.ds_weights.len() != 1 {
        return Err(Error::Config("the micro model has a single output level".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if cases.len() < 2 * cfg.folds {
        return Err(Error::Config(format!(
            "{} cases cannot give {} folds of at least 2 cases",
            cases.len(),
            cfg.folds
        )));
    }
    if let Some(c) = cases.iter().find(|c| c.seg.is_none()) {
        return Err(Error::EmptyInput(format!("case {} has no segmentation", c.case_id)));
    }
    let ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();
    let bundles: Vec<&CaseBundle> = cases.iter().collect();
    let folds = kfold_split(&ids, cfg.folds, cfg.seed)?
        .into_iter()
        .map(|split| run_fold(cfg, split, &bundles))
        .collect::<Result<_>>()?;
    Ok(DemoReport {
        config: cfg.clone(),
        folds,
    })
}
