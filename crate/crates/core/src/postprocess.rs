//! Probability maps to label maps: thresholds, component-size filtering,
//! hierarchy enforcement, and a local threshold/size grid search.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, AggregateReport, CaseMetrics, EvalOptions};
use crate::volcore::{
    enforce_hierarchy, regions_to_labels, voxel_count, LabelMap, Mask, ProbKind, Region, RegionMasks,
    RegionProbs,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Default for Connectivity {
    fn default() -> Self {
        Connectivity::TwentySix
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(Error::Config(format!("connectivity must be 6, 18 or 26, got {v}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbour offsets, excluding the origin.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let nz = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    if nz > 0 && nz <= max_nonzero {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    /// (ET, TC, WT), each in (0, 1).
    pub thresholds: [f32; 3],
    /// (ET, TC, WT) minimum component sizes in voxels.
    pub min_sizes: [usize; 3],
    #[serde(default)]
    pub connectivity: Connectivity,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Profile::Ssa.config()
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        check_thresholds(&self.thresholds)
    }
}

fn check_thresholds(t: &[f32; 3]) -> Result<()> {
    match t.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        Some(v) => Err(Error::Config(format!("threshold {v} must lie strictly between 0 and 1"))),
        None => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Thresholds (0.7, 0.7, 0.5), no size filtering.
    Ssa,
    /// Thresholds 0.5 everywhere, min sizes (50, 75, 250).
    Ped,
}

impl Profile {
    pub fn config(self) -> PostprocessConfig {
        match self {
            Profile::Ssa => PostprocessConfig {
                thresholds: [0.7, 0.7, 0.5],
                min_sizes: [0; 3],
                connectivity: Connectivity::TwentySix,
            },
            Profile::Ped => PostprocessConfig {
                thresholds: [0.5; 3],
                min_sizes: [50, 75, 250],
                connectivity: Connectivity::TwentySix,
            },
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssa" => Ok(Profile::Ssa),
            "ped" => Ok(Profile::Ped),
            _ => Err(Error::Config(format!("unknown profile {s:?} (ssa|ped)"))),
        }
    }
}

/// `mask_r = probs_r >= thresholds_r`.
pub fn binarize(probs: &RegionProbs, thresholds: [f32; 3]) -> Result<RegionMasks> {
    check_thresholds(&thresholds)?;
    if probs.kind() != ProbKind::Probabilities {
        return Err(Error::Config("binarize expects probabilities, not logits".into()));
    }
    let [et, tc, wt] = std::array::from_fn(|r| probs.channels()[r].map(|&p| p >= thresholds[r]));
    RegionMasks::new(et, tc, wt)
}

/// Component labels (0 = background, 1..=n in first-voxel scan order) and sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub labels: Vec<u32>,
    /// `sizes[i]` is the voxel count of label `i + 1`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[i as usize];
        parent[i as usize] = parent[p as usize];
        i = p;
    }
    i
}

/// Union-find labelling over a flat x-fastest boolean grid.
pub fn label_components(mask: &[bool], shape: [usize; 3], conn: Connectivity) -> Components {
    let n = voxel_count(shape);
    assert_eq!(mask.len(), n, "mask length");
    // offsets that precede the current voxel in scan order
    let back: Vec<[isize; 3]> = conn
        .offsets()
        .into_iter()
        .filter(|d| (d[2], d[1], d[0]) < (0, 0, 0))
        .collect();
    let mut parent: Vec<u32> = (0..n as u32).collect();
    let [nx, ny, nz] = shape.map(|v| v as isize);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = (x + nx * (y + ny * z)) as usize;
                if !mask[i] {
                    continue;
                }
                for d in &back {
                    let (qx, qy, qz) = (x + d[0], y + d[1], z + d[2]);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx || qy >= ny {
                        continue;
                    }
                    let j = (qx + nx * (qy + ny * qz)) as usize;
                    if mask[j] {
                        let (a, b) = (find(&mut parent, i as u32), find(&mut parent, j as u32));
                        if a != b {
                            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                            parent[hi as usize] = lo;
                        }
                    }
                }
            }
        }
    }
    let mut labels = vec![0u32; n];
    let mut root_label = vec![0u32; n];
    let mut sizes = Vec::new();
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let r = find(&mut parent, i as u32) as usize;
        if root_label[r] == 0 {
            sizes.push(0);
            root_label[r] = sizes.len() as u32;
        }
        labels[i] = root_label[r];
        sizes[root_label[r] as usize - 1] += 1;
    }
    Components { labels, sizes }
}

pub fn connected_components(mask: &Mask, conn: Connectivity) -> Components {
    label_components(mask.data(), mask.shape(), conn)
}

/// Removes every component with fewer than `min_size` voxels.
pub fn filter_min_size(mask: &Mask, min_size: usize, conn: Connectivity) -> Mask {
    if min_size == 0 {
        return mask.clone();
    }
    let cc = connected_components(mask, conn);
    let keep: Vec<bool> = cc.sizes.iter().map(|&s| s >= min_size).collect();
    let data = cc.labels.iter().map(|&l| l != 0 && keep[l as usize - 1]).collect();
    Mask::from_vec(mask.geometry().clone(), data).expect("same geometry")
}

/// Binarize, size-filter each region, enforce ET ⊆ TC ⊆ WT, and decode labels.
pub fn postprocess(probs: &RegionProbs, cfg: &PostprocessConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let masks = binarize(probs, cfg.thresholds)?;
    let filtered: Vec<Mask> = masks
        .masks()
        .par_iter()
        .zip(cfg.min_sizes.par_iter())
        .map(|(m, &s)| filter_min_size(m, s, cfg.connectivity))
        .collect();
    let [et, tc, wt]: [Mask; 3] = filtered.try_into().expect("three regions");
    regions_to_labels(&enforce_hierarchy(&RegionMasks::new(et, tc, wt)?))
}

/// Ground truth and probabilities for one sweep case.
#[derive(Clone, Debug)]
pub struct SweepCase {
    pub case_id: String,
    pub probs: RegionProbs,
    pub gt: LabelMap,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub config: PostprocessConfig,
    pub report: AggregateReport,
}

/// Evaluates every config on every case and ranks by mean Dice (descending),
/// breaking ties by mean HD95 (ascending), then by grid order.
pub fn sweep_thresholds(cases: &[SweepCase], grid: &[PostprocessConfig], opts: &EvalOptions) -> Result<Vec<SweepRow>> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("sweep needs at least one case".into()));
    }
    if grid.is_empty() {
        return Err(Error::EmptyInput("sweep needs at least one config".into()));
    }
    let mut rows = grid
        .iter()
        .map(|cfg| {
            let per_case: Vec<CaseMetrics> = cases
                .par_iter()
                .map(|c| {
                    let pred = postprocess(&c.probs, cfg)?;
                    metrics::evaluate_case(&c.case_id, &pred, &c.gt, opts)
                })
                .collect::<Result<_>>()?;
            Ok(SweepRow {
                config: cfg.clone(),
                report: metrics::aggregate(&per_case)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| {
        b.report
            .mean_dice
            .total_cmp(&a.report.mean_dice)
            .then(a.report.mean_hd95.total_cmp(&b.report.mean_hd95))
    });
    Ok(rows)
}

/// The three (ET, TC, WT) size triples searched for the pediatric data.
pub const SIZE_GRID: [[usize; 3]; 3] = [[100, 150, 500], [50, 75, 250], [25, 37, 125]];

pub fn size_grid(thresholds: [f32; 3], conn: Connectivity) -> Vec<PostprocessConfig> {
    SIZE_GRID
        .iter()
        .map(|&min_sizes| PostprocessConfig {
            thresholds,
            min_sizes,
            connectivity: conn,
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "rank,thr_et,thr_tc,thr_wt,min_et,min_tc,min_wt,connectivity,dice_et,dice_tc,dice_wt,hd95_et,hd95_tc,hd95_wt,mean_dice,mean_hd95\n",
    );
    for (i, r) in rows.iter().enumerate() {
        let c = &r.config;
        let d: Vec<String> = r.report.regions.iter().map(|x| format!("{:.6}", x.mean_dice)).collect();
        let h: Vec<String> = r.report.regions.iter().map(|x| format!("{:.6}", x.mean_hd95)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{:.6},{:.6}",
            i + 1,
            c.thresholds[0],
            c.thresholds[1],
            c.thresholds[2],
            c.min_sizes[0],
            c.min_sizes[1],
            c.min_sizes[2],
            u8::from(c.connectivity),
            d.join(","),
            h.join(","),
            r.report.mean_dice,
            r.report.mean_hd95
        );
    }
    s
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, sweep_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Fixed-width table with one block of rows per labelled group (for example,
/// one learning rate), columns: group, min sizes, Dice per region and
/// average, HD95 per region and average.
pub fn sweep_table(groups: &[(String, Vec<SweepRow>)]) -> String {
    let mut s = String::new();
    let mut header = format!("{:<10} {:<14}", "Group", "Min Size Th.");
    if let Some(r) = groups.iter().flat_map(|g| g.1.first()).next() {
        for x in &r.report.regions {
            let _ = write!(header, " {:>9}", format!("Dice {}", x.region));
        }
        header.push_str(&format!(" {:>9}", "Avg"));
        for x in &r.report.regions {
            let _ = write!(header, " {:>9}", format!("HD {}", x.region));
        }
        header.push_str(&format!(" {:>9}", "Avg"));
    }
    s.push_str(header.trim_end());
    s.push('\n');
    for (label, rows) in groups {
        for r in rows {
            let m = r.config.min_sizes;
            let _ = write!(s, "{:<10} {:<14}", label, format!("{}/{}/{}", m[0], m[1], m[2]));
            for x in &r.report.regions {
                let _ = write!(s, " {:>9.3}", x.mean_dice);
            }
            let _ = write!(s, " {:>9.3}", r.report.mean_dice);
            for x in &r.report.regions {
                let _ = write!(s, " {:>9.3}", x.mean_hd95);
            }
            let _ = writeln!(s, " {:>9.3}", r.report.mean_hd95);
        }
    }
    s
}

/// Region masks of `labels` restricted to `r`.
pub fn region_mask(labels: &LabelMap, r: Region) -> Mask {
    labels.grid().map(|&l| r.contains_label(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volcore::{Geometry, Volume3};
    use crate::volcore::unflatten;
    use std::collections::VecDeque;

    fn mask(shape: [usize; 3], on: &[[usize; 3]]) -> Mask {
        let g = Geometry::isotropic(shape).unwrap();
        let mut d = vec![false; g.len()];
        for p in on {
            d[p[0] + shape[0] * (p[1] + shape[1] * p[2])] = true;
        }
        Mask::from_vec(g, d).unwrap()
    }

    fn bfs_sizes(m: &Mask, conn: Connectivity) -> Vec<usize> {
        let s = m.shape();
        let mut seen = vec![false; m.len()];
        let mut sizes = Vec::new();
        for start in 0..m.len() {
            if !m.data()[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            let mut q = VecDeque::from([start]);
            let mut n = 0;
            while let Some(i) = q.pop_front() {
                n += 1;
                let p = unflatten(s, i);
                for d in conn.offsets() {
                    let qp: Vec<isize> = (0..3).map(|a| p[a] as isize + d[a]).collect();
                    if (0..3).any(|a| qp[a] < 0 || qp[a] >= s[a] as isize) {
                        continue;
                    }
                    let j = qp[0] as usize + s[0] * (qp[1] as usize + s[1] * qp[2] as usize);
                    if m.data()[j] && !seen[j] {
                        seen[j] = true;
                        q.push_back(j);
                    }
                }
            }
            sizes.push(n);
        }
        sizes
    }

    #[test]
    fn offsets_counts() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
    }

    #[test]
    fn corner_touching_voxels() {
        let m = mask([3, 3, 3], &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&m, Connectivity::TwentySix).count(), 1);
        assert_eq!(connected_components(&m, Connectivity::Eighteen).count(), 2);
        assert_eq!(connected_components(&m, Connectivity::Six).count(), 2);
        let empty = mask([3, 3, 3], &[]);
        assert_eq!(connected_components(&empty, Connectivity::Six).count(), 0);
        let full = Mask::filled(Geometry::isotropic([4, 4, 4]).unwrap(), true);
        assert_eq!(connected_components(&full, Connectivity::Six).sizes, vec![64]);
    }

    #[test]
    fn labels_follow_scan_order() {
        let m = mask([5, 1, 1], &[[1, 0, 0], [3, 0, 0], [4, 0, 0]]);
        let cc = connected_components(&m, Connectivity::Six);
        assert_eq!(cc.labels, vec![0, 1, 0, 2, 2]);
        assert_eq!(cc.sizes, vec![1, 2]);
        // U shape whose arms merge late keeps the first-seen label
        let m = mask([3, 2, 1], &[[0, 0, 0], [2, 0, 0], [0, 1, 0], [1, 1, 0], [2, 1, 0]]);
        let cc = connected_components(&m, Connectivity::Six);
        assert_eq!(cc.sizes, vec![5]);
        assert!(cc.labels.iter().all(|&l| l <= 1));
    }

    #[test]
    fn strict_size_rule() {
        let line = |n: usize| -> Vec<[usize; 3]> { (0..n).map(|i| [i % 10, i / 10, 0]).collect() };
        let m99 = mask([10, 10, 1], &line(99));
        assert_eq!(filter_min_size(&m99, 100, Connectivity::TwentySix).count(), 0);
        let m100 = mask([10, 10, 1], &line(100));
        assert_eq!(filter_min_size(&m100, 100, Connectivity::TwentySix).count(), 100);
        assert_eq!(filter_min_size(&m99, 0, Connectivity::Six), m99);
    }

    #[test]
    fn binarize_examples() {
        let g = Geometry::isotropic([2, 2, 2]).unwrap();
        let probs = |v: f32| {
            RegionProbs::new(ProbKind::Probabilities, std::array::from_fn(|_| Volume3::filled(g.clone(), v))).unwrap()
        };
        let m = binarize(&probs(0.69), [0.7, 0.7, 0.5]).unwrap();
        assert_eq!([m.masks()[0].count(), m.masks()[1].count(), m.masks()[2].count()], [0, 0, 8]);
        let m = binarize(&probs(1.0), [0.3, 0.9, 0.99]).unwrap();
        assert!(m.masks().iter().all(|x| x.count() == 8));
        let m = binarize(&probs(0.7), [0.7, 0.7, 0.7]).unwrap();
        assert!(m.masks().iter().all(|x| x.count() == 8));
        assert!(binarize(&probs(0.5), [0.0, 0.5, 0.5]).is_err());
        assert!(binarize(&probs(0.5), [0.5, 1.0, 0.5]).is_err());
        let lab = postprocess(&probs(0.0), &PostprocessConfig::default()).unwrap();
        assert!(lab.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn profiles() {
        assert_eq!(Profile::Ssa.config().thresholds, [0.7, 0.7, 0.5]);
        assert_eq!(Profile::Ped.config().min_sizes, [50, 75, 250]);
        let json = serde_json::to_string(&Profile::Ped.config()).unwrap();
        assert!(json.contains("\"connectivity\":26"));
        let back: PostprocessConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, Profile::Ped.config());
        assert!(serde_json::from_str::<PostprocessConfig>(&json.replace("26", "7")).is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(64))]
        #[test]
        fn union_find_matches_bfs(
            nx in 1usize..9, ny in 1usize..9, nz in 1usize..9,
            bits in proptest::collection::vec(proptest::bool::weighted(0.4), 512),
            c in 0usize..3,
        ) {
            let conn = [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix][c];
            let g = Geometry::isotropic([nx, ny, nz]).unwrap();
            let m = Mask::from_vec(g.clone(), bits[..g.len()].to_vec()).unwrap();
            let cc = connected_components(&m, conn);
            proptest::prop_assert_eq!(&cc.sizes, &bfs_sizes(&m, conn));
            let f = filter_min_size(&m, 3, conn);
            proptest::prop_assert_eq!(filter_min_size(&f, 3, conn), f.clone());
        }
    }
}
