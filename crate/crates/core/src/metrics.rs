//! Dice, HD95 and lesion-wise scores, per case and aggregated.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{label_components, Connectivity};
use crate::volcore::{labels_to_regions, voxel_count, Geometry, LabelMap, Mask, Region};

/// HD95 assigned when exactly one mask is empty, and to missed or spurious lesions.
pub const HD95_PENALTY: f64 = 374.0;

fn check_grid(a: &Geometry, b: &Geometry) -> Result<()> {
    a.check_same(b, "prediction vs ground truth")
}

pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_grid(pred.geometry(), gt.geometry())?;
    Ok(dice_flat(pred.data(), gt.data()))
}

fn dice_flat(p: &[bool], g: &[bool]) -> f64 {
    let (mut np, mut ng, mut inter) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.iter().zip(g) {
        np += a as usize;
        ng += b as usize;
        inter += (a && b) as usize;
    }
    if np + ng == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + ng) as f64
    }
}

/// Flat indices of mask voxels with at least one 6-neighbour outside the
/// mask (the grid border counts as outside), in scan order.
pub fn surface_voxels(mask: &Mask) -> Vec<usize> {
    surface_flat(mask.data(), mask.shape())
}

fn surface_flat(m: &[bool], shape: [usize; 3]) -> Vec<usize> {
    let [nx, ny, nz] = shape;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                if !m[i] {
                    continue;
                }
                let interior = x > 0
                    && x + 1 < nx
                    && y > 0
                    && y + 1 < ny
                    && z > 0
                    && z + 1 < nz
                    && m[i - 1]
                    && m[i + 1]
                    && m[i - nx]
                    && m[i + nx]
                    && m[i - nx * ny]
                    && m[i + nx * ny];
                if !interior {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// One pass of the Felzenszwalb–Huttenlocher lower envelope along a line:
/// `d[i] = min_j f[j] + (s·(i − j))²`. Infinite entries are not sites.
fn edt_1d(f: &mut [f64], s: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, buf: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let pq = s * q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let pp = s * p as f64;
                    let x = ((f[q] + pq * pq) - (f[p] + pp * pp)) / (2.0 * (pq - pp));
                    if x <= *z.last().expect("boundary") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    buf.clear();
    buf.extend_from_slice(f);
    let mut k = 0;
    for (i, out) in f.iter_mut().enumerate() {
        let xi = s * i as f64;
        while k + 1 < v.len() && z[k + 1] < xi {
            k += 1;
        }
        let d = s * (i as f64 - v[k] as f64);
        *out = buf[v[k]] + d * d;
    }
}

/// Squared Euclidean distance (mm²) from every voxel of a `shape` grid to the
/// nearest site, with per-axis spacing. Grid without sites stays infinite.
pub fn squared_edt(sites: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = shape;
    let mut d: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut zb, mut buf) = (Vec::new(), Vec::new(), Vec::new());
    // x rows are contiguous
    d.par_chunks_mut(nx).for_each_init(
        || (Vec::new(), Vec::new(), Vec::new()),
        |(v, z, b), row| edt_1d(row, spacing[0], v, z, b),
    );
    let mut line = Vec::new();
    for z in 0..nz {
        for x in 0..nx {
            line.clear();
            line.extend((0..ny).map(|y| d[x + nx * (y + ny * z)]));
            edt_1d(&mut line, spacing[1], &mut v, &mut zb, &mut buf);
            for (y, &val) in line.iter().enumerate() {
                d[x + nx * (y + ny * z)] = val;
            }
        }
    }
    let plane = nx * ny;
    for i in 0..plane {
        line.clear();
        line.extend((0..nz).map(|z| d[i + plane * z]));
        edt_1d(&mut line, spacing[2], &mut v, &mut zb, &mut buf);
        for (z, &val) in line.iter().enumerate() {
            d[i + plane * z] = val;
        }
    }
    d
}

/// Linear-interpolation percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty set");
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Directed surface distances in mm from surface `from` to surface `to`,
/// both given as flat indices of a `shape` grid.
fn directed(from: &[usize], to: &[usize], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    // crop to the bounding box of both surfaces; the nearest site always lies inside it
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &i in from.iter().chain(to) {
        let p = crate::volcore::unflatten(shape, i);
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a] + 1);
        }
    }
    let cs: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a]);
    let local = |i: usize| {
        let p = crate::volcore::unflatten(shape, i);
        (p[0] - lo[0]) + cs[0] * ((p[1] - lo[1]) + cs[1] * (p[2] - lo[2]))
    };
    let mut sites = vec![false; voxel_count(cs)];
    for &i in to {
        sites[local(i)] = true;
    }
    let d2 = squared_edt(&sites, cs, spacing);
    from.iter().map(|&i| d2[local(i)].sqrt()).collect()
}

fn hd95_flat(p: &[bool], g: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> f64 {
    let sp = surface_flat(p, shape);
    let sg = surface_flat(g, shape);
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => HD95_PENALTY,
        (false, false) => {
            let mut all = directed(&sp, &sg, shape, spacing);
            all.extend(directed(&sg, &sp, shape, spacing));
            percentile(&mut all, 95.0)
        }
    }
}

/// 95th percentile of the pooled surface distances in both directions, in mm.
pub fn hd95(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_grid(pred.geometry(), gt.geometry())?;
    let spacing = pred.spacing().map(|s| s as f64);
    Ok(hd95_flat(pred.data(), gt.data(), pred.shape(), spacing))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LesionOptions {
    pub connectivity: Connectivity,
    /// Iterations of 3×3×3 cube dilation applied to ground-truth lesions for matching.
    pub dilation_iters: usize,
    /// Components with at most this many voxels are ignored.
    pub min_lesion_volume: usize,
}

impl Default for LesionOptions {
    fn default() -> Self {
        Self {
            connectivity: Connectivity::TwentySix,
            dilation_iters: 3,
            min_lesion_volume: 0,
        }
    }
}

/// Per-component voxel lists, dropping components `<= min_volume`.
fn lesions(m: &[bool], shape: [usize; 3], opts: &LesionOptions) -> Vec<Vec<usize>> {
    let cc = label_components(m, shape, opts.connectivity);
    let mut out: Vec<Vec<usize>> = cc.sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    for (i, &l) in cc.labels.iter().enumerate() {
        if l != 0 {
            out[l as usize - 1].push(i);
        }
    }
    out.retain(|v| v.len() > opts.min_lesion_volume);
    out
}

/// Voxels reached from `seed` by `iters` steps of 26-neighbour (cube) dilation.
fn dilate(seed: &[usize], shape: [usize; 3], iters: usize) -> Vec<usize> {
    let [nx, ny, nz] = shape;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for &i in seed {
        let p = crate::volcore::unflatten(shape, i);
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let lo = lo.map(|v| v.saturating_sub(iters));
    let hi = [(hi[0] + iters).min(nx - 1), (hi[1] + iters).min(ny - 1), (hi[2] + iters).min(nz - 1)];
    let mut inside = vec![false; voxel_count(shape)];
    for &i in seed {
        inside[i] = true;
    }
    let mut cur = seed.to_vec();
    for _ in 0..iters {
        let mut next = Vec::new();
        for &i in &cur {
            let p = crate::volcore::unflatten(shape, i);
            for dz in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let q = [p[0] as isize + dx, p[1] as isize + dy, p[2] as isize + dz];
                        if (0..3).any(|a| q[a] < lo[a] as isize || q[a] > hi[a] as isize) {
                            continue;
                        }
                        let j = q[0] as usize + nx * (q[1] as usize + ny * q[2] as usize);
                        if !inside[j] {
                            inside[j] = true;
                            next.push(j);
                        }
                    }
                }
            }
        }
        cur = next;
    }
    let mut out: Vec<usize> = Vec::new();
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                let i = x + nx * (y + ny * z);
                if inside[i] {
                    out.push(i);
                }
            }
        }
    }
    out
}

/// Lesion-wise (dice, hd95): every ground-truth lesion scored against the
/// union of prediction components touching its dilation, every unmatched
/// prediction component scored as a false positive, then averaged.
pub fn lesionwise(pred: &Mask, gt: &Mask, opts: &LesionOptions) -> Result<(f64, f64)> {
    check_grid(pred.geometry(), gt.geometry())?;
    let shape = pred.shape();
    let spacing = pred.spacing().map(|s| s as f64);
    let gl = lesions(gt.data(), shape, opts);
    let pl = lesions(pred.data(), shape, opts);
    if gl.is_empty() && pl.is_empty() {
        return Ok((1.0, 0.0));
    }
    let n = voxel_count(shape);
    let mut pred_label = vec![u32::MAX; n];
    for (k, comp) in pl.iter().enumerate() {
        for &i in comp {
            pred_label[i] = k as u32;
        }
    }
    let mut matched_any = vec![false; pl.len()];
    let entries: Vec<(Vec<usize>, Vec<u32>)> = gl
        .iter()
        .map(|lesion| {
            let mut hits: Vec<u32> = dilate(lesion, shape, opts.dilation_iters)
                .into_iter()
                .map(|i| pred_label[i])
                .filter(|&l| l != u32::MAX)
                .collect();
            hits.sort_unstable();
            hits.dedup();
            (lesion.clone(), hits)
        })
        .collect();
    for (_, hits) in &entries {
        for &h in hits {
            matched_any[h as usize] = true;
        }
    }
    let scores: Vec<(f64, f64)> = entries
        .par_iter()
        .map(|(lesion, hits)| {
            if hits.is_empty() {
                return (0.0, HD95_PENALTY);
            }
            let mut g = vec![false; n];
            for &i in lesion {
                g[i] = true;
            }
            let mut p = vec![false; n];
            for &h in hits {
                for &i in &pl[h as usize] {
                    p[i] = true;
                }
            }
            (dice_flat(&p, &g), hd95_flat(&p, &g, shape, spacing))
        })
        .collect();
    let fp = matched_any.iter().filter(|&&m| !m).count();
    let count = (scores.len() + fp) as f64;
    let dsum: f64 = scores.iter().map(|s| s.0).sum();
    let hsum: f64 = scores.iter().map(|s| s.1).sum::<f64>() + fp as f64 * HD95_PENALTY;
    Ok((dsum / count, hsum / count))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub lesionwise: bool,
    pub lesion: LesionOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub region: String,
    pub dice: f64,
    pub hd95: f64,
    pub pred_empty: bool,
    pub gt_empty: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lw_dice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lw_hd95: Option<f64>,
}

impl RegionMetrics {
    /// Entry from already-computed scores.
    pub fn from_scores(region: impl Into<String>, dice: f64, hd95: f64) -> Self {
        Self {
            region: region.into(),
            dice,
            hd95,
            pred_empty: false,
            gt_empty: false,
            lw_dice: None,
            lw_hd95: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    /// Usually ET, TC, WT; any fixed region list is accepted by [`aggregate`].
    pub regions: Vec<RegionMetrics>,
}

pub fn evaluate_masks(pred: &Mask, gt: &Mask, region: &str, opts: &EvalOptions) -> Result<RegionMetrics> {
    let mut m = RegionMetrics::from_scores(region, dice(pred, gt)?, hd95(pred, gt)?);
    m.pred_empty = !pred.any();
    m.gt_empty = !gt.any();
    if opts.lesionwise {
        let (d, h) = lesionwise(pred, gt, &opts.lesion)?;
        m.lw_dice = Some(d);
        m.lw_hd95 = Some(h);
    }
    Ok(m)
}

pub fn evaluate_case(case_id: &str, pred: &LabelMap, gt: &LabelMap, opts: &EvalOptions) -> Result<CaseMetrics> {
    check_grid(pred.geometry(), gt.geometry())?;
    let p = labels_to_regions(pred)?;
    let g = labels_to_regions(gt)?;
    let regions = Region::ALL
        .par_iter()
        .map(|&r| evaluate_masks(p.get(r), g.get(r), r.name(), opts))
        .collect::<Result<_>>()?;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        regions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: String,
    pub mean_dice: f64,
    pub mean_hd95: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_lw_dice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_lw_hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub regions: Vec<RegionSummary>,
    /// Mean of the per-region mean Dice values.
    pub mean_dice: f64,
    pub mean_hd95: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_lw_dice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_lw_hd95: Option<f64>,
    pub n_cases: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Per-region means over cases; overall means are the means of those.
pub fn aggregate(cases: &[CaseMetrics]) -> Result<AggregateReport> {
    let first = cases
        .first()
        .ok_or_else(|| Error::EmptyInput("aggregate needs at least one case".into()))?;
    let names: Vec<&str> = first.regions.iter().map(|r| r.region.as_str()).collect();
    for c in cases {
        if c.regions.iter().map(|r| r.region.as_str()).ne(names.iter().copied()) {
            return Err(Error::Shape(format!("case {} has a different region list", c.case_id)));
        }
    }
    let regions: Vec<RegionSummary> = (0..names.len())
        .map(|k| {
            let lw = cases.iter().all(|c| c.regions[k].lw_dice.is_some());
            RegionSummary {
                region: names[k].to_string(),
                mean_dice: mean(cases.iter().map(|c| c.regions[k].dice)),
                mean_hd95: mean(cases.iter().map(|c| c.regions[k].hd95)),
                mean_lw_dice: lw.then(|| mean(cases.iter().map(|c| c.regions[k].lw_dice.unwrap_or(0.0)))),
                mean_lw_hd95: lw.then(|| mean(cases.iter().map(|c| c.regions[k].lw_hd95.unwrap_or(0.0)))),
            }
        })
        .collect();
    let lw = regions.iter().all(|r| r.mean_lw_dice.is_some());
    Ok(AggregateReport {
        mean_dice: mean(regions.iter().map(|r| r.mean_dice)),
        mean_hd95: mean(regions.iter().map(|r| r.mean_hd95)),
        mean_lw_dice: lw.then(|| mean(regions.iter().flat_map(|r| r.mean_lw_dice))),
        mean_lw_hd95: lw.then(|| mean(regions.iter().flat_map(|r| r.mean_lw_hd95))),
        n_cases: cases.len(),
        regions,
    })
}

/// Mean over cases of each case's region-averaged Dice and HD95. Equals the
/// aggregate overall means whenever every case reports every region.
pub fn case_first_means(cases: &[CaseMetrics]) -> Result<(f64, f64)> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("no cases".into()));
    }
    Ok((
        mean(cases.iter().map(|c| mean(c.regions.iter().map(|r| r.dice)))),
        mean(cases.iter().map(|c| mean(c.regions.iter().map(|r| r.hd95)))),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub options: EvalOptions,
    /// Sorted by case id.
    pub cases: Vec<CaseMetrics>,
    pub aggregate: AggregateReport,
}

impl Report {
    pub fn new(mut cases: Vec<CaseMetrics>, options: EvalOptions) -> Result<Self> {
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let aggregate = aggregate(&cases)?;
        Ok(Self {
            options,
            cases,
            aggregate,
        })
    }

    /// One row per case and region, then aggregate rows per region and overall.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("case_id,region,dice,hd95,lw_dice,lw_hd95\n");
        for c in &self.cases {
            for r in &c.regions {
                let _ = writeln!(
                    s,
                    "{},{},{:.6},{:.6},{},{}",
                    c.case_id,
                    r.region,
                    r.dice,
                    r.hd95,
                    opt(r.lw_dice),
                    opt(r.lw_hd95)
                );
            }
        }
        let a = &self.aggregate;
        for r in &a.regions {
            let _ = writeln!(
                s,
                "mean,{},{:.6},{:.6},{},{}",
                r.region,
                r.mean_dice,
                r.mean_hd95,
                opt(r.mean_lw_dice),
                opt(r.mean_lw_hd95)
            );
        }
        let _ = writeln!(
            s,
            "mean,avg,{:.6},{:.6},{},{}",
            a.mean_dice,
            a.mean_hd95,
            opt(a.mean_lw_dice),
            opt(a.mean_lw_hd95)
        );
        s
    }

    /// Single-row table: Dice per region, Avg, HD95 per region, Avg.
    pub fn summary_csv(&self) -> String {
        let a = &self.aggregate;
        let mut head: Vec<String> = a.regions.iter().map(|r| format!("dice_{}", r.region.to_lowercase())).collect();
        head.push("dice_avg".into());
        head.extend(a.regions.iter().map(|r| format!("hd95_{}", r.region.to_lowercase())));
        head.push("hd95_avg".into());
        let mut row: Vec<String> = a.regions.iter().map(|r| format!("{:.4}", r.mean_dice)).collect();
        row.push(format!("{:.4}", a.mean_dice));
        row.extend(a.regions.iter().map(|r| format!("{:.3}", r.mean_hd95)));
        row.push(format!("{:.3}", a.mean_hd95));
        format!("{}\n{}\n", head.join(","), row.join(","))
    }

    /// Writes `metrics.json`, `metrics.csv` and `summary.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        for (name, body) in [("metrics.json", json), ("metrics.csv", self.to_csv()), ("summary.csv", self.summary_csv())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
