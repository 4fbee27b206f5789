//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tumorseg::inference::{
    ensemble_mean, plan_windows, sliding_window_predict, Blend, BlendMode, ConstantPredictor, Predictor,
};
use tumorseg::mednext::{self, build_model, mednext_block_forward, MedNextConfig};
use tumorseg::metrics::{aggregate, hd95, CaseMetrics, EvalOptions, RegionMetrics};
use tumorseg::params::ParamTree;
use tumorseg::postprocess::{filter_min_size, postprocess, sweep_thresholds, Connectivity, PostprocessConfig, SweepCase};
use tumorseg::trainkit::{
    batch_dice_loss, ds_combined_loss, ds_weights, focal_loss, synth_dataset, train_demo, DemoConfig, Grads, LossConfig,
    MicroConfig, MicroPredictor, SfAdamW, SfAdamWConfig, TumorSpec,
};
use tumorseg::volcore::{
    labels_to_regions, regions_to_labels, ChannelStack, Geometry, LabelMap, Mask, ProbKind, RegionMasks, RegionProbs,
    Volume3,
};
use tumorseg::volio::{self, NpyArray, NpyData};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_shape(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> [usize; 3] {
    std::array::from_fn(|_| r.gen_range(lo..=hi))
}

fn random_mask(r: &mut ChaCha8Rng, g: &Geometry, p: f64) -> Mask {
    Mask::from_vec(g.clone(), (0..g.len()).map(|_| r.gen_bool(p)).collect()).unwrap()
}

/// Random blobs: a few boxes plus sparse noise, so surfaces are non-trivial.
fn blobby_mask(r: &mut ChaCha8Rng, g: &Geometry) -> Mask {
    let s = g.shape;
    let mut d = vec![false; g.len()];
    for _ in 0..r.gen_range(0..4) {
        let lo: [usize; 3] = std::array::from_fn(|a| r.gen_range(0..s[a]));
        let hi: [usize; 3] = std::array::from_fn(|a| (lo[a] + r.gen_range(1..=s[a].max(2) / 2)).min(s[a]));
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    d[x + s[0] * (y + s[1] * z)] = true;
                }
            }
        }
    }
    for v in d.iter_mut() {
        if r.gen_bool(0.01) {
            *v = !*v;
        }
    }
    Mask::from_vec(g.clone(), d).unwrap()
}

fn case_metrics(id: &str, rows: &[(&str, f64, f64)]) -> CaseMetrics {
    CaseMetrics {
        case_id: id.into(),
        regions: rows.iter().map(|&(n, d, h)| RegionMetrics::from_scores(n, d, h)).collect(),
    }
}

// 1 ------------------------------------------------------------------------

fn c1_table_arithmetic() -> Check {
    let ssa = case_metrics("row6", &[("ET", 0.883, 14.248), ("TC", 0.873, 21.028), ("WT", 0.933, 8.770)]);
    let a = aggregate(&[ssa]).map_err(|e| e.to_string())?;
    ensure!((a.mean_dice - 0.8963).abs() <= 5e-4, "SSA avg dice {}", a.mean_dice);
    ensure!((a.mean_hd95 - 14.682).abs() <= 5e-4, "SSA avg hd95 {}", a.mean_hd95);
    let ped = case_metrics(
        "best",
        &[
            ("ET", 0.657, 76.553),
            ("NETC", 0.89, 17.269),
            ("CC", 0.89, 17.269),
            ("ED", 0.853, 18.391),
            ("TC", 0.723, 83.234),
            ("WT", 0.967, 12.33),
        ],
    );
    let b = aggregate(&[ped]).map_err(|e| e.to_string())?;
    ensure!((b.mean_dice - 0.830).abs() <= 5e-4, "PED avg dice {}", b.mean_dice);
    ensure!((b.mean_hd95 - 37.508).abs() <= 5e-4, "PED avg hd95 {}", b.mean_hd95);
    Ok(format!(
        "SSA {:.4}/{:.3}, PED {:.3}/{:.3}",
        a.mean_dice, a.mean_hd95, b.mean_dice, b.mean_hd95
    ))
}

// 2 ------------------------------------------------------------------------

fn surface(m: &Mask) -> Vec<[usize; 3]> {
    let s = m.shape();
    let at = |x: isize, y: isize, z: isize| {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < s[0]
            && (y as usize) < s[1]
            && (z as usize) < s[2]
            && *m.get(x as usize, y as usize, z as usize)
    };
    let mut out = Vec::new();
    for z in 0..s[2] {
        for y in 0..s[1] {
            for x in 0..s[0] {
                let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                if at(xi, yi, zi)
                    && [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                        .iter()
                        .any(|&(dx, dy, dz)| !at(xi + dx, yi + dy, zi + dz))
                {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn brute_hd95(a: &Mask, b: &Mask) -> f64 {
    let sp = a.spacing().map(|v| v as f64);
    let (sa, sb) = (surface(a), surface(b));
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return 374.0,
        _ => {}
    }
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * sp[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut all: Vec<f64> = sa
        .iter()
        .map(|p| sb.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .chain(sb.iter().map(|q| sa.iter().map(|p| dist(p, q)).fold(f64::INFINITY, f64::min)))
        .collect();
    all.sort_by(f64::total_cmp);
    let pos = 0.95 * (all.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    all[lo] + (all[hi] - all[lo]) * (pos - lo as f64)
}

fn c2_hd95_oracle() -> Check {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let shape = random_shape(&mut r, 2, 20);
        let spacing: [f32; 3] = std::array::from_fn(|_| r.gen_range(0.5f32..3.0));
        let g = Geometry::new(shape, spacing).unwrap();
        let a = blobby_mask(&mut r, &g);
        let b = blobby_mask(&mut r, &g);
        let fast = hd95(&a, &b).map_err(|e| e.to_string())?;
        let slow = brute_hd95(&a, &b);
        worst = worst.max((fast - slow).abs());
    }
    ensure!(worst <= 1e-6, "max |fast - brute| = {worst:e} mm");
    Ok(format!("200 pairs, max diff {worst:.1e} mm"))
}

// 3 ------------------------------------------------------------------------

fn offsets(conn: Connectivity) -> Vec<[isize; 3]> {
    let mut v = Vec::new();
    for dz in -1isize..=1 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let n = dx.abs() + dy.abs() + dz.abs();
                let keep = match conn {
                    Connectivity::Six => n == 1,
                    Connectivity::Eighteen => n == 1 || n == 2,
                    Connectivity::TwentySix => n >= 1,
                };
                if keep {
                    v.push([dx, dy, dz]);
                }
            }
        }
    }
    v
}

fn bfs_filter(m: &Mask, min_size: usize, conn: Connectivity) -> Vec<bool> {
    let s = m.shape();
    let d = m.data();
    let offs = offsets(conn);
    let mut seen = vec![false; d.len()];
    let mut out = vec![false; d.len()];
    for start in 0..d.len() {
        if !d[start] || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = q.pop_front() {
            let p = [i % s[0], (i / s[0]) % s[1], i / (s[0] * s[1])];
            for o in &offs {
                let n: [isize; 3] = std::array::from_fn(|a| p[a] as isize + o[a]);
                if (0..3).any(|a| n[a] < 0 || n[a] >= s[a] as isize) {
                    continue;
                }
                let j = n[0] as usize + s[0] * (n[1] as usize + s[1] * n[2] as usize);
                if d[j] && !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                    q.push_back(j);
                }
            }
        }
        if comp.len() >= min_size {
            comp.into_iter().for_each(|i| out[i] = true);
        }
    }
    out
}

fn c3_components_oracle() -> Check {
    let mut r = rng(3);
    let mut n = 0;
    for trial in 0..240 {
        let g = Geometry::isotropic(random_shape(&mut r, 1, 16)).unwrap();
        let p = r.gen_range(0.05..0.6);
        let m = random_mask(&mut r, &g, p);
        let conn = [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix][trial % 3];
        let min_size = r.gen_range(0..40);
        let fast = filter_min_size(&m, min_size, conn);
        ensure!(
            fast.data() == &bfs_filter(&m, min_size, conn)[..],
            "mismatch on trial {trial} ({conn:?}, min {min_size})"
        );
        n += 1;
    }
    Ok(format!("{n} masks exact across 6/18/26"))
}

// 4 ------------------------------------------------------------------------

fn random_stack(r: &mut ChaCha8Rng, shape: [usize; 3]) -> ChannelStack {
    let n = 4 * shape.iter().product::<usize>();
    ChannelStack::from_vec(4, shape, (0..n).map(|_| r.gen_range(-2.0f32..2.0)).collect()).unwrap()
}

fn c4_sliding_window() -> Check {
    let mut r = rng(4);
    let mut worst_const = 0.0f64;
    for &overlap in &[0.5, 0.7] {
        for mode in [BlendMode::Uniform, BlendMode::Gaussian] {
            for _ in 0..4 {
                let shape = random_shape(&mut r, 5, 30);
                let window = [12, 10, 8];
                let values = [0.2f32, 0.55, 0.9];
                let pred = ConstantPredictor { values, window };
                let plan = plan_windows(shape, window, overlap, Blend::new(mode)).map_err(|e| e.to_string())?;
                let g = Geometry::isotropic(shape).unwrap();
                let out = sliding_window_predict(&random_stack(&mut r, shape), &pred, &plan, &g).map_err(|e| e.to_string())?;
                for (ch, v) in out.channels().iter().zip(values) {
                    for &x in ch.data() {
                        worst_const = worst_const.max((x as f64 - v as f64).abs());
                    }
                }
            }
        }
    }
    ensure!(worst_const <= 1e-6, "constant predictor deviates by {worst_const:e}");

    let cfg = MicroConfig::default();
    let params = cfg.build(11).unwrap();
    let mut worst_voxel = 0.0f64;
    for &overlap in &[0.5, 0.7] {
        for mode in [BlendMode::Uniform, BlendMode::Gaussian] {
            let shape = random_shape(&mut r, 4, 28);
            let window = [16, 16, 16];
            let x = random_stack(&mut r, shape);
            let pred = MicroPredictor { params: params.clone(), config: cfg.clone(), window };
            let plan = plan_windows(shape, window, overlap, Blend::new(mode)).map_err(|e| e.to_string())?;
            let g = Geometry::isotropic(shape).unwrap();
            let sw = sliding_window_predict(&x, &pred, &plan, &g).map_err(|e| e.to_string())?;
            let whole = MicroPredictor { params: params.clone(), config: cfg.clone(), window: shape }
                .predict(&x)
                .map_err(|e| e.to_string())?;
            for (c, v) in sw.channels().iter().enumerate() {
                for (a, b) in v.data().iter().zip(whole.channel(c)) {
                    worst_voxel = worst_voxel.max((a - b).abs() as f64);
                }
            }
        }
    }
    ensure!(worst_voxel <= 1e-5, "per-voxel predictor deviates by {worst_voxel:e}");

    for i in 0..50 {
        let shape = random_shape(&mut r, 1, 60);
        let window = random_shape(&mut r, 1, 24);
        let overlap = if i % 2 == 0 { 0.5 } else { 0.7 };
        let plan = plan_windows(shape, window, overlap, Blend::default()).map_err(|e| e.to_string())?;
        let ps = plan.padded_shape;
        let mut covered = vec![false; ps.iter().product()];
        for o in &plan.origins {
            for z in o[2]..o[2] + window[2] {
                for y in o[1]..o[1] + window[1] {
                    for x in o[0]..o[0] + window[0] {
                        covered[x + ps[0] * (y + ps[1] * z)] = true;
                    }
                }
            }
        }
        ensure!(covered.iter().all(|&c| c), "voxels uncovered for {shape:?} window {window:?}");
    }
    Ok(format!("const {worst_const:.1e}, per-voxel {worst_voxel:.1e}, 50 shapes covered"))
}

// 5 ------------------------------------------------------------------------

fn random_probs(r: &mut ChaCha8Rng, g: &Geometry) -> RegionProbs {
    let ch = std::array::from_fn(|_| Volume3::from_vec(g.clone(), (0..g.len()).map(|_| r.gen_range(0.0f32..=1.0)).collect()).unwrap());
    RegionProbs::new(ProbKind::Probabilities, ch).unwrap()
}

fn max_abs(a: &RegionProbs, b: &RegionProbs) -> f64 {
    a.channels()
        .iter()
        .zip(b.channels())
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs() as f64))
        .fold(0.0, f64::max)
}

fn c5_ensemble() -> Check {
    let mut r = rng(5);
    let g = Geometry::isotropic([9, 7, 5]).unwrap();
    let m = random_probs(&mut r, &g);
    let same = ensemble_mean(&vec![m.clone(); 5]).map_err(|e| e.to_string())?;
    let d_same = max_abs(&same, &m);
    ensure!(d_same <= 1e-7, "mean of identical maps off by {d_same:e}");
    let members: Vec<RegionProbs> = (0..5).map(|_| random_probs(&mut r, &g)).collect();
    let e = ensemble_mean(&members).map_err(|e| e.to_string())?;
    let mut perm = members.clone();
    perm.reverse();
    perm.swap(0, 2);
    let d_perm = max_abs(&e, &ensemble_mean(&perm).map_err(|e| e.to_string())?);
    ensure!(d_perm <= 1e-7, "permutation changes result by {d_perm:e}");
    for c in 0..3 {
        for i in 0..g.len() {
            let vals: Vec<f32> = members.iter().map(|m| m.channels()[c].data()[i]).collect();
            let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let v = e.channels()[c].data()[i];
            ensure!(v >= lo && v <= hi, "voxel {i} channel {c}: {v} outside [{lo}, {hi}]");
        }
    }
    Ok(format!("identical {d_same:.1e}, permutation {d_perm:.1e}, bounded"))
}

// 6 ------------------------------------------------------------------------

fn random_regions(r: &mut ChaCha8Rng, shape: [usize; 3]) -> RegionMasks {
    let g = Geometry::isotropic(shape).unwrap();
    let [a, b, c] = std::array::from_fn(|_| random_mask(r, &g, 0.35));
    RegionMasks::new(a, b, c).unwrap()
}

fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8)
}

/// Central differences at a few random coordinates of a nested logit array.
fn fd_worst(
    f: &dyn Fn(&[Vec<Vec<f64>>]) -> f64,
    x: &[Vec<Vec<f64>>],
    g: &[Vec<Vec<f64>>],
    picks: usize,
    r: &mut ChaCha8Rng,
) -> f64 {
    let h = 1e-3;
    let mut worst = 0.0f64;
    for _ in 0..picks {
        let l = r.gen_range(0..x.len());
        let b = r.gen_range(0..x[l].len());
        let i = r.gen_range(0..x[l][b].len());
        let mut up = x.to_vec();
        up[l][b][i] += h;
        let mut dn = x.to_vec();
        dn[l][b][i] -= h;
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        worst = worst.max(rel_err(g[l][b][i], fd));
    }
    worst
}

fn c6_gradients() -> Check {
    let mut r = rng(6);
    let shape = [8, 8, 8];
    let n = 512;
    let trials = 50;
    let (mut w_dice, mut w_focal2, mut w_focal0, mut w_ds, mut w_bce) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..trials {
        let batch = 2;
        let t: Vec<RegionMasks> = (0..batch).map(|_| random_regions(&mut r, shape)).collect();
        let z: Vec<Vec<f64>> = (0..batch).map(|_| (0..3 * n).map(|_| r.gen_range(-3.0..3.0)).collect()).collect();

        let (_, g) = batch_dice_loss(&z, &t, 1e-5).map_err(|e| e.to_string())?;
        let f = |x: &[Vec<Vec<f64>>]| batch_dice_loss(&x[0], &t, 1e-5).unwrap().0;
        w_dice = w_dice.max(fd_worst(&f, &[z.clone()], &[g], 20, &mut r));

        let (_, g) = focal_loss(&z, &t, 2.0).map_err(|e| e.to_string())?;
        let f = |x: &[Vec<Vec<f64>>]| focal_loss(&x[0], &t, 2.0).unwrap().0;
        w_focal2 = w_focal2.max(fd_worst(&f, &[z.clone()], &[g], 20, &mut r));

        let (l0, g) = focal_loss(&z, &t, 0.0).map_err(|e| e.to_string())?;
        let f = |x: &[Vec<Vec<f64>>]| focal_loss(&x[0], &t, 0.0).unwrap().0;
        w_focal0 = w_focal0.max(fd_worst(&f, &[z.clone()], &[g], 20, &mut r));
        // γ = 0 is plain binary cross-entropy
        let mut bce = 0.0;
        for (zs, ts) in z.iter().zip(&t) {
            for c in 0..3 {
                for i in 0..n {
                    let p = 1.0 / (1.0 + (-zs[c * n + i]).exp());
                    bce -= if ts.masks()[c].data()[i] { p.ln() } else { (1.0 - p).ln() };
                }
            }
        }
        w_bce = w_bce.max((bce / (batch * 3 * n) as f64 - l0).abs());

        let cfg = LossConfig::default();
        let levels: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|l| {
                let m = (8usize >> l).pow(3);
                (0..batch).map(|_| (0..3 * m).map(|_| r.gen_range(-3.0..3.0)).collect()).collect()
            })
            .collect();
        let (_, g) = ds_combined_loss(&levels, &t, &cfg).map_err(|e| e.to_string())?;
        let f = |x: &[Vec<Vec<f64>>]| ds_combined_loss(x, &t, &cfg).unwrap().0.total;
        w_ds = w_ds.max(fd_worst(&f, &levels, &g, 20, &mut r));
    }
    ensure!(w_dice < 1e-4, "batch dice rel err {w_dice:e}");
    ensure!(w_focal2 < 1e-4, "focal γ=2 rel err {w_focal2:e}");
    ensure!(w_focal0 < 1e-4, "focal γ=0 rel err {w_focal0:e}");
    ensure!(w_bce < 1e-10, "focal γ=0 differs from BCE by {w_bce:e}");
    ensure!(w_ds < 1e-4, "deep-supervision rel err {w_ds:e}");
    ensure!((ds_weights(4).iter().sum::<f64>() - 1.0).abs() < 1e-12, "ds weights do not sum to 1");
    Ok(format!(
        "{trials} trials: dice {w_dice:.1e}, focal2 {w_focal2:.1e}, focal0 {w_focal0:.1e}, ds {w_ds:.1e}"
    ))
}

// 7 ------------------------------------------------------------------------

fn scalar_tree(v: f32) -> ParamTree {
    let mut p = ParamTree::new();
    p.insert("w", vec![1], vec![v], tumorseg::params::Init::Zeros).unwrap();
    p
}

fn quad(p: &ParamTree) -> tumorseg::Result<(f64, Grads)> {
    let w = p.values("w")?[0] as f64;
    Ok((0.5 * (w - 3.0).powi(2), Grads::from([("w".to_string(), vec![w - 3.0])])))
}

fn c7_optimizer() -> Check {
    let mut problems = Vec::new();

    let mut p = scalar_tree(0.0);
    let mut opt = SfAdamW::new(SfAdamWConfig { lr: 0.1, ..Default::default() }, &p);
    for _ in 0..500 {
        opt.step(&mut p, quad).map_err(|e| e.to_string())?;
    }
    let gap = (opt.slot("w").unwrap().x[0] - 3.0).abs();
    if gap >= 1e-3 {
        problems.push(format!("quadratic |x-3| = {gap:.2e} after 500 steps at lr 0.1"));
    }

    let mut p = scalar_tree(1.0);
    let mut opt = SfAdamW::new(SfAdamWConfig { lr: 0.05, ..Default::default() }, &p);
    let mut zs = Vec::new();
    let mut worst_id = 0.0f64;
    for _ in 0..200 {
        opt.step(&mut p, quad).map_err(|e| e.to_string())?;
        let s = opt.slot("w").unwrap();
        zs.push(s.z[0]);
        worst_id = worst_id.max((s.x[0] - zs.iter().sum::<f64>() / zs.len() as f64).abs());
    }
    if worst_id > 1e-10 {
        problems.push(format!("averaging identity off by {worst_id:e}"));
    }

    let mut p = MicroConfig::default().build(3).unwrap();
    for name in ["layer0.weight", "layer1.bias"] {
        p.get_mut(name).unwrap().frozen = true;
    }
    let before: Vec<Vec<u8>> = ["layer0.weight", "layer1.bias"]
        .iter()
        .map(|n| p.get(n).unwrap().values().iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    let mut opt = SfAdamW::new(SfAdamWConfig { lr: 0.05, ..Default::default() }, &p);
    for _ in 0..25 {
        opt.step(&mut p, |y| {
            let g: Grads = y.iter().map(|(n, e)| (n.to_string(), vec![1.0; e.len()])).collect();
            Ok((0.0, g))
        })
        .map_err(|e| e.to_string())?;
    }
    let after: Vec<Vec<u8>> = ["layer0.weight", "layer1.bias"]
        .iter()
        .map(|n| p.get(n).unwrap().values().iter().flat_map(|v| v.to_le_bytes()).collect())
        .collect();
    if before != after {
        problems.push("frozen parameters changed".into());
    }
    if problems.is_empty() {
        Ok(format!("|x-3| {gap:.1e}, identity {worst_id:.1e}, frozen bitwise"))
    } else {
        Err(problems.join("; "))
    }
}

// 8 ------------------------------------------------------------------------

fn c8_training_demo() -> Check {
    let cases = synth_dataset(&mut rng(8), "syn", 8, [32, 32, 32], &TumorSpec::default()).map_err(|e| e.to_string())?;
    let cfg = DemoConfig { seed: 8, ..Default::default() };
    ensure!(cfg.model.depth == 2 && cfg.steps == 200 && cfg.batch_size == 2, "demo config drifted");
    let a = train_demo(&cases, &cfg).map_err(|e| e.to_string())?;
    let b = train_demo(&cases, &cfg).map_err(|e| e.to_string())?;
    for (fa, fb) in a.folds.iter().zip(&b.folds) {
        ensure!(fa.params.to_bytes() == fb.params.to_bytes(), "fold {} not deterministic", fa.split.fold);
        ensure!(fa.history == fb.history, "fold {} history differs between runs", fa.split.fold);
    }
    let mut ratios = Vec::new();
    for f in &a.folds {
        let ratio = f.final_loss / f.initial_loss;
        ratios.push(format!("{ratio:.2}"));
        ensure!(
            f.final_loss <= 0.5 * f.initial_loss,
            "fold {}: final loss {:.4} > 0.5 x initial {:.4}",
            f.split.fold,
            f.final_loss,
            f.initial_loss
        );
    }
    let wt = a.mean_wt_dice();
    ensure!(wt >= 0.5, "held-out WT dice {wt:.3} < 0.5");
    Ok(format!("{} folds, loss ratios [{}], WT dice {wt:.3}", a.folds.len(), ratios.join(", ")))
}

// 9 ------------------------------------------------------------------------

/// Scalar count written out from the architecture description.
fn closed_form_count(c: &MedNextConfig) -> usize {
    let k3 = c.kernel_size.pow(3);
    // depthwise (w + b), norm (γ, β), expand (w + b), compress (w + b)
    let blk = |ci: usize, co: usize, r: usize| ci * (k3 + 1) + 2 * ci + (ci * r * ci + ci * r) + (co * ci * r + co);
    let resid = |ci: usize, co: usize| co * ci + co;
    let w = |s: usize| c.base_channels * 2usize.pow(s as u32);
    let r = c.expansion_ratios;
    let nb = c.blocks_per_stage;
    let mut total = c.base_channels * c.in_channels + c.base_channels;
    for s in 0..4 {
        total += nb[s] * blk(w(s), w(s), r[s]);
        total += blk(w(s), w(s + 1), r[s + 1]) + resid(w(s), w(s + 1));
    }
    total += nb[4] * blk(w(4), w(4), r[4]);
    for s in (0..4).rev() {
        total += blk(w(s + 1), w(s), r[8 - s]) + resid(w(s + 1), w(s));
        total += nb[8 - s] * blk(w(s), w(s), r[8 - s]);
    }
    total + (0..c.deep_supervision_levels).map(|s| c.out_channels * w(s) + c.out_channels).sum::<usize>()
}

fn c9_mednext() -> Check {
    let cfg = MedNextConfig::tiny(4);
    let p = build_model(&cfg, 21).map_err(|e| e.to_string())?;
    ensure!(p.num_scalars() == closed_form_count(&cfg), "tiny count {} vs {}", p.num_scalars(), closed_form_count(&cfg));
    for preset in [MedNextConfig::preset_b(), MedNextConfig::preset_m()] {
        ensure!(preset.param_count() == closed_form_count(&preset), "preset count mismatch");
    }
    ensure!(
        MedNextConfig::preset_m().param_count() > MedNextConfig::preset_b().param_count(),
        "M must be larger than B"
    );
    ensure!(
        build_model(&cfg, 21).unwrap().to_bytes() == p.to_bytes(),
        "build not deterministic"
    );
    let x = random_stack(&mut rng(9), [32, 32, 32]);
    let out = mednext::forward(&p, &cfg, &x).map_err(|e| e.to_string())?;
    ensure!(out.len() == 4, "{} deep-supervision outputs", out.len());
    for (l, o) in out.iter().enumerate() {
        let e = 32 >> l;
        ensure!(o.channels == 3 && o.shape == [e, e, e], "level {l}: {}x{:?}", o.channels, o.shape);
    }
    let again = mednext::forward(&p, &cfg, &x).map_err(|e| e.to_string())?;
    ensure!(again.iter().zip(&out).all(|(a, b)| a.data == b.data), "forward not bitwise deterministic");

    let mut zero = p.clone();
    for (_, e) in zero.iter_mut() {
        e.values_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let h = random_stack(&mut rng(10), [8, 8, 8]);
    let h4 = ChannelStack::from_vec(4, h.shape, h.data.clone()).unwrap();
    let y = mednext_block_forward(&h4, &zero, "enc0.0", cfg.kernel_size, cfg.expansion_ratios[0]).map_err(|e| e.to_string())?;
    ensure!(y.data == h4.data, "zero-weight block is not the identity");
    Ok(format!("{} params, 4 levels at /1../8, deterministic, residual identity", p.num_scalars()))
}

// 10 -----------------------------------------------------------------------

fn c10_round_trips() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(10);
    let shape = [7, 5, 3];
    let g = Geometry::new(shape, [1.0, 1.5, 2.25]).unwrap();

    let f = NpyArray::new(vec![2, 7, 5, 3], NpyData::F32((0..210).map(|_| r.gen_range(-1e3f32..1e3)).collect())).unwrap();
    let u = NpyArray::new(vec![4, 9], NpyData::U8((0..36).map(|_| r.gen()).collect())).unwrap();
    for (i, a) in [f, u].into_iter().enumerate() {
        let path = dir.path().join(format!("a{i}.npy"));
        volio::write_npy(&a, &path).map_err(|e| e.to_string())?;
        ensure!(volio::read_npy(&path).map_err(|e| e.to_string())? == a, "NPY round trip {i}");
    }

    let vol = Volume3::from_vec(g.clone(), (0..g.len()).map(|_| r.gen_range(-5.0f32..5.0)).collect()).unwrap();
    let labels = LabelMap::from_vec(g.clone(), (0..g.len()).map(|_| [0u8, 1, 2, 3][r.gen_range(0..4)]).collect()).unwrap();
    for gz in [false, true] {
        let ext = if gz { "nii.gz" } else { "nii" };
        let vp = dir.path().join(format!("v.{ext}"));
        volio::write_volume(&vol, &vp, gz).map_err(|e| e.to_string())?;
        let back = volio::read_volume(&vp).map_err(|e| e.to_string())?;
        ensure!(
            back.data().iter().map(|v| v.to_bits()).eq(vol.data().iter().map(|v| v.to_bits())),
            "float32 NIfTI ({ext}) not bit-exact"
        );
        ensure!(back.spacing() == vol.spacing(), "spacing lost ({ext})");
        let lp = dir.path().join(format!("l.{ext}"));
        volio::write_labels(&labels, &lp, gz).map_err(|e| e.to_string())?;
        ensure!(volio::read_labels(&lp).map_err(|e| e.to_string())?.data() == labels.data(), "uint8 NIfTI ({ext})");
    }

    for _ in 0..50 {
        let g = Geometry::isotropic(random_shape(&mut r, 1, 12)).unwrap();
        let l = LabelMap::from_vec(g.clone(), (0..g.len()).map(|_| [0u8, 1, 2, 3][r.gen_range(0..4)]).collect()).unwrap();
        let back = regions_to_labels(&labels_to_regions(&l).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure!(back.data() == l.data(), "label -> regions -> label not identity");
    }
    Ok("NPY f32/u8, NIfTI nii/nii.gz f32/u8 bit-exact, 50 label maps".into())
}

// 11 -----------------------------------------------------------------------

fn probs_from(g: &Geometry, f: impl Fn(usize, [usize; 3]) -> f32) -> RegionProbs {
    let s = g.shape;
    let ch = std::array::from_fn(|c| {
        Volume3::from_vec(
            g.clone(),
            (0..g.len()).map(|i| f(c, [i % s[0], (i / s[0]) % s[1], i / (s[0] * s[1])])).collect(),
        )
        .unwrap()
    });
    RegionProbs::new(ProbKind::Probabilities, ch).unwrap()
}

fn in_box(p: [usize; 3], lo: [usize; 3], ext: [usize; 3]) -> bool {
    (0..3).all(|a| p[a] >= lo[a] && p[a] < lo[a] + ext[a])
}

fn c11_postprocess() -> Check {
    let g = Geometry::isotropic([30, 30, 30]).unwrap();
    // two isolated blobs of 99 and 100 voxels
    let mut d = vec![false; g.len()];
    let put = |d: &mut Vec<bool>, lo: [usize; 3], ext: [usize; 3], n: usize| {
        let mut k = 0;
        for z in lo[2]..lo[2] + ext[2] {
            for y in lo[1]..lo[1] + ext[1] {
                for x in lo[0]..lo[0] + ext[0] {
                    if k < n {
                        d[x + 30 * (y + 30 * z)] = true;
                        k += 1;
                    }
                }
            }
        }
    };
    put(&mut d, [1, 1, 1], [5, 5, 4], 99);
    put(&mut d, [15, 15, 15], [5, 5, 4], 100);
    let m = Mask::from_vec(g.clone(), d).unwrap();
    for conn in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
        let f = filter_min_size(&m, 100, conn);
        ensure!(f.count() == 100, "{conn:?}: expected only the 100-voxel blob, kept {}", f.count());
        ensure!(!*f.get(1, 1, 1) && *f.get(15, 15, 15), "{conn:?}: wrong blob kept");
    }

    let mut r = rng(11);
    let probs = random_probs(&mut r, &g);
    let count = |cfg: &PostprocessConfig| -> Result<[usize; 3], String> {
        let l = postprocess(&probs, cfg).map_err(|e| e.to_string())?;
        let reg = labels_to_regions(&l).map_err(|e| e.to_string())?;
        Ok(std::array::from_fn(|i| reg.masks()[i].count()))
    };
    let mut prev: Option<[usize; 3]> = None;
    for t in [0.2f32, 0.35, 0.5, 0.65, 0.8] {
        let c = count(&PostprocessConfig { thresholds: [t; 3], min_sizes: [0; 3], ..Default::default() })?;
        if let Some(p) = prev {
            ensure!((0..3).all(|i| c[i] <= p[i]), "counts grew with threshold {t}: {p:?} -> {c:?}");
        }
        prev = Some(c);
    }
    let mut prev: Option<[usize; 3]> = None;
    for s in [0usize, 2, 5, 20, 100] {
        let c = count(&PostprocessConfig { thresholds: [0.6, 0.6, 0.4], min_sizes: [s; 3], ..Default::default() })?;
        if let Some(p) = prev {
            ensure!((0..3).all(|i| c[i] <= p[i]), "counts grew with min size {s}: {p:?} -> {c:?}");
        }
        prev = Some(c);
    }

    // true tumor blob plus a small isolated false positive
    let tumor = ([8, 8, 8], [10, 10, 10]);
    let fp = ([24, 24, 24], [3, 3, 3]);
    let gt_labels: Vec<u8> = (0..g.len())
        .map(|i| {
            let p = [i % 30, (i / 30) % 30, i / 900];
            if in_box(p, [11, 11, 11], [4, 4, 4]) {
                3
            } else if in_box(p, [10, 10, 10], [6, 6, 6]) {
                1
            } else if in_box(p, tumor.0, tumor.1) {
                2
            } else {
                0
            }
        })
        .collect();
    let gt = LabelMap::from_vec(g.clone(), gt_labels.clone()).unwrap();
    let gt_regions = labels_to_regions(&gt).unwrap();
    let fixture = probs_from(&g, |c, p| {
        let inside = gt_regions.masks()[c].get(p[0], p[1], p[2]);
        if *inside || in_box(p, fp.0, fp.1) {
            0.9
        } else {
            0.1
        }
    });
    let keep_all = PostprocessConfig { thresholds: [0.5; 3], min_sizes: [0; 3], ..Default::default() };
    let drop_fp = PostprocessConfig { thresholds: [0.5; 3], min_sizes: [30, 30, 30], ..Default::default() };
    let rows = sweep_thresholds(
        &[SweepCase { case_id: "fx".into(), probs: fixture, gt }],
        &[keep_all, drop_fp.clone()],
        &EvalOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    ensure!(rows[0].config == drop_fp, "sweep ranked {:?} first", rows[0].config.min_sizes);
    ensure!(
        rows[0].report.mean_dice > rows[1].report.mean_dice,
        "FP removal did not improve dice"
    );
    Ok(format!(
        "99 removed / 100 kept, monotone, sweep best dice {:.3} vs {:.3}",
        rows[0].report.mean_dice, rows[1].report.mean_dice
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check, Option<Duration>); 11] = [
        ("1 table arithmetic", c1_table_arithmetic, Some(Duration::from_secs(1))),
        ("2 hd95 oracle", c2_hd95_oracle, Some(Duration::from_secs(30))),
        ("3 component oracle", c3_components_oracle, Some(Duration::from_secs(10))),
        ("4 sliding window", c4_sliding_window, Some(Duration::from_secs(30))),
        ("5 ensemble", c5_ensemble, None),
        ("6 gradient checks", c6_gradients, Some(Duration::from_secs(60))),
        ("7 schedule-free adamw", c7_optimizer, None),
        ("8 training demo", c8_training_demo, Some(Duration::from_secs(300))),
        ("9 mednext forward", c9_mednext, Some(Duration::from_secs(60))),
        ("10 format round trips", c10_round_trips, None),
        ("11 postprocess semantics", c11_postprocess, None),
    ];
    let mut failed = Vec::new();
    for (name, f, limit) in criteria {
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let dt = t0.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if dt > l => Err(format!("took {dt:.2?}, limit {l:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(msg) => println!("PASS criterion {name}: {msg} ({dt:.2?})"),
            Err(msg) => {
                println!("FAIL criterion {name}: {msg} ({dt:.2?})");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
