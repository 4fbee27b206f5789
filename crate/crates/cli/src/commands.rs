//! Subcommand implementations. Each one writes `run.json` into its output directory.

use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;
use tumorseg::checkpoint::load_predictor;
use tumorseg::inference::{ensemble_mean, load_probs, plan_windows, save_probs, sliding_window_predict, Blend, Predictor, ProbsMeta};
use tumorseg::metrics::{evaluate_case, CaseMetrics, Report};
use tumorseg::postprocess::{postprocess as run_postprocess, size_grid, sweep_table, sweep_thresholds, write_sweep_csv, PostprocessConfig, SweepCase};
use tumorseg::preprocess::{preprocess_case, restore_probs, PatchSpec, Preprocessed};
use tumorseg::trainkit::{synth_dataset, train_demo as run_demo, DemoConfig, SfAdamWConfig, TumorSpec};
use tumorseg::volio::{discover_cases, load_case, read_labels, write_case, write_labels, CaseSuffixes};
use tumorseg::volcore::LabelMap;

use crate::config::PipelineConfig;
use crate::provenance::RunRecord;
use crate::UsageError;

fn record(command: &str, cfg: &impl serde::Serialize, seeds: serde_json::Value, inputs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    RunRecord::new(command, cfg, seeds, inputs)?.write(out)
}

fn patch_spec(cfg: &PipelineConfig) -> anyhow::Result<Option<PatchSpec>> {
    Ok(cfg.patch.map(PatchSpec::new).transpose()?)
}

/// Case ids under the dataset root, restricted to `only` when non-empty.
fn select_cases(root: &Path, suffixes: &CaseSuffixes, only: &[String]) -> anyhow::Result<Vec<String>> {
    let all = discover_cases(root, suffixes)?;
    let ids: Vec<String> = if only.is_empty() {
        all
    } else {
        for id in only {
            if !all.contains(id) {
                anyhow::bail!(tumorseg::Error::EmptyInput(format!("case {id} not found under {}", root.display())));
            }
        }
        let mut v = only.to_vec();
        v.sort();
        v.dedup();
        v
    };
    if ids.is_empty() {
        anyhow::bail!(tumorseg::Error::EmptyInput(format!("no cases found under {}", root.display())));
    }
    Ok(ids)
}

/// Files in `dir` ending in `ext`, keyed by the name without it, sorted.
fn files_with_ext(dir: &Path, ext: &str) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let p = e?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if p.is_file() {
            if let Some(stem) = name.strip_suffix(ext) {
                out.push((stem.to_string(), p));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn strip_nifti(name: &str) -> Option<&str> {
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"))
}

/// `(case_id, path)` for one label file or every NIfTI in a directory.
fn label_files(path: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    if path.is_file() {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let id = strip_nifti(name).unwrap_or(name).to_string();
        return Ok(vec![(id, path.to_path_buf())]);
    }
    let mut v: Vec<(String, PathBuf)> = files_with_ext(path, ".nii.gz")?;
    v.extend(files_with_ext(path, ".nii")?);
    v.sort();
    if v.is_empty() {
        anyhow::bail!(tumorseg::Error::EmptyInput(format!("no label maps in {}", path.display())));
    }
    Ok(v)
}

/// Ground truth for `id`: `gt` itself when it is a file, else `{gt}/{id}.nii[.gz]`
/// or `{gt}/{id}/{id}-{seg}.nii[.gz]`.
fn resolve_gt(gt: &Path, id: &str, suffixes: &CaseSuffixes) -> anyhow::Result<PathBuf> {
    if gt.is_file() {
        return Ok(gt.to_path_buf());
    }
    let candidates = [
        gt.join(format!("{id}.nii.gz")),
        gt.join(format!("{id}.nii")),
        gt.join(id).join(format!("{id}-{}.nii.gz", suffixes.seg)),
        gt.join(id).join(format!("{id}-{}.nii", suffixes.seg)),
    ];
    candidates
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| tumorseg::Error::EmptyInput(format!("no ground truth for case {id} under {}", gt.display())).into())
}

pub fn synth(cfg: &PipelineConfig, count: usize, shape: [usize; 3], prefix: &str) -> anyhow::Result<()> {
    let out = cfg.require_out()?;
    let suffixes = cfg.case_suffixes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cases = synth_dataset(&mut rng, prefix, count, shape, &TumorSpec::default())?;
    for c in &cases {
        write_case(c, out, &suffixes)?;
    }
    log::info!("wrote {} cases to {}", cases.len(), out.display());
    let args = json!({ "count": count, "shape": shape, "prefix": prefix, "config": cfg });
    record("synth", &args, json!({ "seed": cfg.seed }), &[], out)
}

fn preprocess_cases(cfg: &PipelineConfig, ids: &[String], out: &Path) -> anyhow::Result<()> {
    let root = cfg.require_data()?;
    let suffixes = cfg.case_suffixes()?;
    let patch = patch_spec(cfg)?;
    ids.par_iter().try_for_each(|id| -> anyhow::Result<()> {
        let b = load_case(root.join(id), &suffixes)?;
        let p = preprocess_case(&b, patch.as_ref())?;
        if p.meta.any_degenerate() {
            log::warn!("case {id}: a channel has zero foreground variance");
        }
        p.write(out)?;
        log::debug!("preprocessed {id}");
        Ok(())
    })
}

pub fn preprocess(cfg: &PipelineConfig, only: &[String]) -> anyhow::Result<()> {
    let out = cfg.require_out()?;
    let root = cfg.require_data()?;
    let ids = select_cases(root, &cfg.case_suffixes()?, only)?;
    preprocess_cases(cfg, &ids, out)?;
    log::info!("preprocessed {} cases into {}", ids.len(), out.display());
    let inputs: Vec<PathBuf> = ids.iter().map(|id| root.join(id)).collect();
    record("preprocess", cfg, json!({ "seed": cfg.seed }), &inputs, out)
}

/// Restored, ensembled probabilities for every case, written as `{out}/{id}.npy`.
fn infer_cases(cfg: &PipelineConfig, ids: &[String], cache: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    cfg.check_overlap()?;
    cfg.check_checkpoints()?;
    let root = cfg.require_data()?;
    let suffixes = cfg.case_suffixes()?;
    let patch = patch_spec(cfg)?;
    let predictors: Vec<Box<dyn Predictor>> = cfg
        .checkpoints
        .iter()
        .map(|c| load_predictor(c, cfg.window).with_context(|| format!("loading checkpoint {}", c.display())))
        .collect::<anyhow::Result<_>>()?;
    let blend = Blend::new(cfg.blend);
    let model_ids: Vec<String> = cfg.checkpoints.iter().map(|c| c.display().to_string()).collect();
    ids.par_iter().try_for_each(|id| -> anyhow::Result<()> {
        let bundle = load_case(root.join(id), &suffixes)?;
        let pre = match cache {
            Some(dir) => Preprocessed::read(dir, id)?,
            None => preprocess_case(&bundle, patch.as_ref())?,
        };
        let plan = plan_windows(pre.image.shape, cfg.window, cfg.overlap, blend)?;
        let maps = predictors
            .iter()
            .map(|p| {
                let probs = sliding_window_predict(&pre.image, p.as_ref(), &plan, &pre.geometry)?;
                restore_probs(&probs, &pre.meta, bundle.image.geometry())
            })
            .collect::<tumorseg::Result<Vec<_>>>()?;
        let probs = ensemble_mean(&maps)?;
        let meta = ProbsMeta {
            case_id: Some(id.clone()),
            window: Some(cfg.window),
            overlap: Some(cfg.overlap),
            blend: Some(blend),
            model_ids: model_ids.clone(),
            ..Default::default()
        };
        save_probs(&probs, out.join(format!("{id}.npy")), &meta)?;
        log::debug!("inferred {id}");
        Ok(())
    })
}

pub fn infer(cfg: &PipelineConfig, only: &[String], cache: Option<&Path>) -> anyhow::Result<()> {
    let out = cfg.require_out()?;
    let root = cfg.require_data()?;
    let ids = select_cases(root, &cfg.case_suffixes()?, only)?;
    infer_cases(cfg, &ids, cache, out)?;
    log::info!("wrote probabilities for {} cases to {}", ids.len(), out.display());
    let mut inputs: Vec<PathBuf> = ids.iter().map(|id| root.join(id)).collect();
    inputs.extend(cfg.checkpoints.iter().cloned());
    inputs.extend(cache.map(Path::to_path_buf));
    let args = json!({ "config": cfg, "cache": cache });
    record("infer", &args, json!({ "seed": cfg.seed }), &inputs, out)
}

fn ensemble_dirs(inputs: &[PathBuf], out: &Path) -> anyhow::Result<usize> {
    let first = inputs
        .first()
        .ok_or_else(|| UsageError("ensemble needs at least one --input".into()))?;
    let ids: Vec<String> = files_with_ext(first, ".npy")?.into_iter().map(|(id, _)| id).collect();
    if ids.is_empty() {
        anyhow::bail!(tumorseg::Error::EmptyInput(format!("no probability maps in {}", first.display())));
    }
    for d in &inputs[1..] {
        let other: Vec<String> = files_with_ext(d, ".npy")?.into_iter().map(|(id, _)| id).collect();
        if other != ids {
            anyhow::bail!(tumorseg::Error::EmptyInput(format!(
                "{} and {} hold different cases",
                first.display(),
                d.display()
            )));
        }
    }
    ids.par_iter().try_for_each(|id| -> anyhow::Result<()> {
        let loaded = inputs
            .iter()
            .map(|d| load_probs(d.join(format!("{id}.npy"))))
            .collect::<tumorseg::Result<Vec<_>>>()?;
        let maps: Vec<_> = loaded.iter().map(|(p, _)| p.clone()).collect();
        let probs = ensemble_mean(&maps)?;
        let m0 = &loaded[0].1;
        let same = |f: &dyn Fn(&ProbsMeta) -> String| loaded.iter().all(|(_, m)| f(m) == f(m0));
        let meta = ProbsMeta {
            case_id: Some(id.clone()),
            window: m0.window.filter(|_| same(&|m| format!("{:?}", m.window))),
            overlap: m0.overlap.filter(|_| same(&|m| format!("{:?}", m.overlap))),
            blend: m0.blend.filter(|_| same(&|m| format!("{:?}", m.blend))),
            model_ids: loaded.iter().flat_map(|(_, m)| m.model_ids.iter().cloned()).collect(),
            ..Default::default()
        };
        save_probs(&probs, out.join(format!("{id}.npy")), &meta)?;
        Ok(())
    })?;
    Ok(ids.len())
}

pub fn ensemble(cfg: &PipelineConfig, inputs: &[PathBuf]) -> anyhow::Result<()> {
    let out = cfg.require_out()?;
    let n = ensemble_dirs(inputs, out)?;
    log::info!("averaged {} inputs over {n} cases into {}", inputs.len(), out.display());
    record("ensemble", &json!({ "inputs": inputs, "out": out }), json!({}), inputs, out)
}

fn postprocess_probs(pp: &PostprocessConfig, probs: &Path, out: &Path) -> anyhow::Result<usize> {
    pp.validate()?;
    let files: Vec<(String, PathBuf)> = if probs.is_file() {
        let stem = probs.file_stem().and_then(|s| s.to_str()).unwrap_or("case").to_string();
        vec![(stem, probs.to_path_buf())]
    } else {
        files_with_ext(probs, ".npy")?
    };
    if files.is_empty() {
        anyhow::bail!(tumorseg::Error::EmptyInput(format!("no probability maps in {}", probs.display())));
    }
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    files.par_iter().try_for_each(|(stem, path)| -> anyhow::Result<()> {
        let (p, meta) = load_probs(path)?;
        let id = meta.case_id.unwrap_or_else(|| stem.clone());
        let labels = run_postprocess(&p, pp)?;
        write_labels(&labels, out.join(format!("{id}.nii.gz")), true)?;
        Ok(())
    })?;
    Ok(files.len())
}

pub fn postprocess(cfg: &PipelineConfig, probs: &Path) -> anyhow::Result<()> {
    let out = cfg.require_out()?;
    let pp = cfg.postprocess();
    let n = postprocess_probs(&pp, probs, out)?;
    log::info!("wrote {n} label maps to {}", out.display());
    let args = json!({ "profile": cfg.profile, "postprocess": pp, "probs": probs });
    record("postprocess", &args, json!({}), &[probs.to_path_buf()], out)
}

fn evaluate_labels(cfg: &PipelineConfig, pred: &Path, gt: &Path) -> anyhow::Result<Report> {
    let suffixes = cfg.case_suffixes()?;
    let preds = label_files(pred)?;
    if gt.is_file() && preds.len() != 1 {
        return Err(UsageError("a single --gt file needs a single --pred file".into()).into());
    }
    let cases: Vec<CaseMetrics> = preds
        .par_iter()
        .map(|(id, p)| -> anyhow::Result<CaseMetrics> {
            let pl = read_labels(p)?;
            let gl = read_labels(resolve_gt(gt, id, &suffixes)?)?;
            Ok(evaluate_case(id, &pl, &gl, &cfg.metrics)?)
        })
        .collect::<anyhow::Result<_>>()?;
    Ok(Report::new(cases, cfg.metrics)?)
}

fn print_report(r: &Report) {
    for reg in &r.aggregate.regions {
        let lw = match (reg.mean_lw_dice, reg.mean_lw_hd95) {
            (Some(d), Some(h)) => format!("  lesion-wise dice {d:.4} hd95 {h:.2}"),
            _ => String::new(),
        };
        println!("{:<3} dice {:.4} hd95 {:.2}{lw}", reg.region, reg.mean_dice, reg.mean_hd95);
    }
    println!("avg dice {:.4} hd95 {:.2} over {} cases", r.aggregate.mean_dice, r.aggregate.mean_hd95, r.cases.len());
}

pub fn evaluate(cfg: &PipelineConfig, pred: &Path, gt: &Path, quiet: bool) -> anyhow::Result<()> {
    let out = cfg.require_out()?;
    let report = evaluate_labels(cfg, pred, gt)?;
    report.write(out)?;
    if !quiet {
        print_report(&report);
    }
    let args = json!({ "metrics": cfg.metrics, "pred": pred, "gt": gt });
    record("evaluate", &args, json!({}), &[pred.to_path_buf(), gt.to_path_buf()], out)
}

pub fn sweep(cfg: &PipelineConfig, probs: &Path, gt: &Path, thresholds: &[[f32; 3]], quiet: bool) -> anyhow::Result<()> {
    let out = cfg.require_out()?;
    let suffixes = cfg.case_suffixes()?;
    let conn = cfg.postprocess().connectivity;
    let thresholds: Vec<[f32; 3]> = if thresholds.is_empty() { vec![cfg.postprocess().thresholds] } else { thresholds.to_vec() };
    let mut grid = Vec::new();
    for &t in &thresholds {
        grid.push(PostprocessConfig { thresholds: t, min_sizes: [0; 3], connectivity: conn });
        grid.extend(size_grid(t, conn));
    }
    let files = files_with_ext(probs, ".npy")?;
    if files.is_empty() {
        anyhow::bail!(tumorseg::Error::EmptyInput(format!("no probability maps in {}", probs.display())));
    }
    let cases: Vec<SweepCase> = files
        .par_iter()
        .map(|(stem, path)| -> anyhow::Result<SweepCase> {
            let (p, meta) = load_probs(path)?;
            let case_id = meta.case_id.unwrap_or_else(|| stem.clone());
            let gt: LabelMap = read_labels(resolve_gt(gt, &case_id, &suffixes)?)?;
            Ok(SweepCase { case_id, probs: p, gt })
        })
        .collect::<anyhow::Result<_>>()?;
    let rows = sweep_thresholds(&cases, &grid, &cfg.metrics)?;
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    write_sweep_csv(&rows, out.join("sweep.csv"))?;
    std::fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
    if !quiet {
        let groups: Vec<(String, Vec<_>)> = thresholds
            .iter()
            .map(|t| {
                let label = format!("{}/{}/{}", t[0], t[1], t[2]);
                (label, rows.iter().filter(|r| r.config.thresholds == *t).cloned().collect())
            })
            .collect();
        print!("{}", sweep_table(&groups));
    }
    let args = json!({ "grid": grid, "metrics": cfg.metrics, "probs": probs, "gt": gt });
    record("sweep", &args, json!({}), &[probs.to_path_buf(), gt.to_path_buf()], out)
}

#[allow(clippy::too_many_arguments)]
pub fn train_demo(
    cfg: &PipelineConfig,
    cases: usize,
    shape: [usize; 3],
    folds: Option<usize>,
    steps: Option<usize>,
    lr: Option<f64>,
    batch: Option<usize>,
    quiet: bool,
) -> anyhow::Result<()> {
    let out = cfg.require_out()?;
    let d = DemoConfig::default();
    let demo = DemoConfig {
        folds: folds.unwrap_or(d.folds),
        steps: steps.unwrap_or(d.steps),
        batch_size: batch.unwrap_or(d.batch_size),
        optimizer: SfAdamWConfig { lr: lr.unwrap_or(d.optimizer.lr), ..d.optimizer },
        seed: cfg.seed,
        ..d
    };
    if demo.folds < 2 {
        return Err(UsageError("--folds must be at least 2".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data = synth_dataset(&mut rng, "SYN", cases, shape, &TumorSpec::default())?;
    let report = run_demo(&data, &demo)?;
    report.write(out)?;
    if !quiet {
        for f in &report.folds {
            println!(
                "fold {}: loss {:.4} -> {:.4}, val dice {:.4}",
                f.split.fold, f.initial_loss, f.final_loss, f.aggregate.mean_dice
            );
        }
        println!("mean WT dice {:.4}", report.mean_wt_dice());
    }
    let args = json!({ "cases": cases, "shape": shape, "demo": demo });
    record("train-demo", &args, json!({ "seed": cfg.seed, "data": cfg.seed, "init": cfg.seed }), &[], out)
}

/// Every stage's output lands in its own subdirectory of `out`.
pub fn pipeline(cfg: &PipelineConfig, only: &[String], quiet: bool) -> anyhow::Result<()> {
    let out = cfg.require_out()?;
    let root = cfg.require_data()?;
    cfg.check_overlap()?;
    cfg.check_checkpoints()?;
    cfg.postprocess().validate()?;
    let suffixes = cfg.case_suffixes()?;
    let ids = select_cases(root, &suffixes, only)?;

    let cache = out.join("preprocessed");
    preprocess_cases(cfg, &ids, &cache)?;
    log::info!("preprocessed {} cases", ids.len());

    let mut member_dirs = Vec::new();
    for (i, ck) in cfg.checkpoints.iter().enumerate() {
        let dir = out.join("probs").join(format!("m{i}"));
        let single = PipelineConfig { checkpoints: vec![ck.clone()], ..cfg.clone() };
        infer_cases(&single, &ids, Some(&cache), &dir)?;
        log::info!("inferred with {}", ck.display());
        member_dirs.push(dir);
    }
    let ens = out.join("probs").join("ensemble");
    ensemble_dirs(&member_dirs, &ens)?;

    let labels = out.join("labels");
    postprocess_probs(&cfg.postprocess(), &ens, &labels)?;
    log::info!("wrote label maps to {}", labels.display());

    let has_gt = ids.iter().all(|id| resolve_gt(root, id, &suffixes).is_ok());
    if has_gt {
        let report = evaluate_labels(cfg, &labels, root)?;
        report.write(out.join("metrics"))?;
        if !quiet {
            print_report(&report);
        }
    } else {
        log::info!("no ground truth for every case; skipping evaluation");
    }
    let mut inputs: Vec<PathBuf> = ids.iter().map(|id| root.join(id)).collect();
    inputs.extend(cfg.checkpoints.iter().cloned());
    let args = json!({ "config": cfg, "postprocess": cfg.postprocess(), "cases": ids, "evaluated": has_gt });
    record("pipeline", &args, json!({ "seed": cfg.seed }), &inputs, out)
}
