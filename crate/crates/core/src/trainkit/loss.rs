//! Region losses with analytic gradients, computed in f64.
//!
//! Logits for one sample are a channel-major `3 × voxels` vector in the
//! x-fastest voxel order of the matching [`RegionMasks`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volcore::{voxel_count, Geometry, Mask, RegionMasks};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub dice_smooth: f64,
    pub dice_weight: f64,
    pub focal_weight: f64,
    /// Weight per deep-supervision level, finest first; sums to 1.
    pub ds_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            dice_smooth: 1e-5,
            dice_weight: 1.0,
            focal_weight: 1.0,
            ds_weights: ds_weights(4),
        }
    }
}

impl LossConfig {
    pub fn single_level() -> Self {
        Self {
            ds_weights: vec![1.0],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) || !(self.dice_smooth > 0.0) {
            return Err(Error::Config("focal gamma must be >= 0 and dice smooth > 0".into()));
        }
        let s: f64 = self.ds_weights.iter().sum();
        if self.ds_weights.is_empty() || (s - 1.0).abs() > 1e-9 || self.ds_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config(format!(
                "deep-supervision weights {:?} must be non-negative and sum to 1",
                self.ds_weights
            )));
        }
        Ok(())
    }
}

/// `2^-l` for `l` in `0..levels`, normalized to sum 1.
pub fn ds_weights(levels: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..levels).map(|l| 0.5f64.powi(l as i32)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / s).collect()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check(logits: &[Vec<f64>], targets: &[RegionMasks]) -> Result<usize> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit samples vs {} target samples",
            logits.len(),
            targets.len()
        )));
    }
    let n = targets[0].geometry().len();
    for (l, t) in logits.iter().zip(targets) {
        if t.geometry().len() != n || l.len() != 3 * n {
            return Err(Error::Shape(format!(
                "logits of length {} for targets of {} voxels",
                l.len(),
                t.geometry().len()
            )));
        }
    }
    Ok(n)
}

/// Batch Dice: for each channel, intersection and sums are pooled over the
/// whole batch, `L_c = 1 − (2I + s)/(P + G + s)`, averaged over channels.
pub fn batch_dice_loss(logits: &[Vec<f64>], targets: &[RegionMasks], smooth: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = check(logits, targets)?;
    let probs: Vec<Vec<f64>> = logits.iter().map(|l| l.iter().map(|&z| sigmoid(z)).collect()).collect();
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = logits.iter().map(|l| vec![0.0; l.len()]).collect();
    for c in 0..3 {
        let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
        for (p, t) in probs.iter().zip(targets) {
            let g = t.masks()[c].data();
            for (i, &pi) in p[c * n..(c + 1) * n].iter().enumerate() {
                let gi = g[i] as u8 as f64;
                inter += pi * gi;
                ps += pi;
                gs += gi;
            }
        }
        let num = 2.0 * inter + smooth;
        let den = ps + gs + smooth;
        loss += 1.0 - num / den;
        for ((p, t), gr) in probs.iter().zip(targets).zip(grads.iter_mut()) {
            let g = t.masks()[c].data();
            for i in 0..n {
                let pi = p[c * n + i];
                let gi = g[i] as u8 as f64;
                let dl_dp = -(2.0 * gi * den - num) / (den * den) / 3.0;
                gr[c * n + i] = dl_dp * pi * (1.0 - pi);
            }
        }
    }
    Ok((loss / 3.0, grads))
}

const PT_MIN: f64 = 1e-7;
const PT_MAX: f64 = 1.0 - 1e-7;

/// Mean over all elements of `−(1 − p_t)^γ ln p_t`.
pub fn focal_loss(logits: &[Vec<f64>], targets: &[RegionMasks], gamma: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if gamma < 0.0 {
        return Err(Error::Config(format!("focal gamma {gamma} must be >= 0")));
    }
    let n = check(logits, targets)?;
    let count = (logits.len() * 3 * n) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, t) in logits.iter().zip(targets) {
        let mut gr = vec![0.0; l.len()];
        for c in 0..3 {
            let g = t.masks()[c].data();
            for i in 0..n {
                let z = l[c * n + i];
                let p = sigmoid(z);
                let (raw, sign) = if g[i] { (p, 1.0) } else { (1.0 - p, -1.0) };
                let pt = raw.clamp(PT_MIN, PT_MAX);
                let q = 1.0 - pt;
                loss -= q.powf(gamma) * pt.ln();
                if raw > PT_MIN && raw < PT_MAX {
                    let mut dfl_dpt = -q.powf(gamma) / pt;
                    if gamma > 0.0 {
                        dfl_dpt += gamma * q.powf(gamma - 1.0) * pt.ln();
                    }
                    gr[c * n + i] = dfl_dpt * sign * p * (1.0 - p) / count;
                }
            }
        }
        grads.push(gr);
    }
    Ok((loss / count, grads))
}

/// Keeps every `factor`-th voxel along each axis, starting at the origin.
pub fn downsample_mask(m: &Mask, factor: usize) -> Mask {
    if factor == 1 {
        return m.clone();
    }
    let [nx, ny, nz] = m.shape();
    let shape = m.shape().map(|n| n.div_ceil(factor));
    let spacing = m.spacing().map(|s| s * factor as f32);
    let mut data = Vec::with_capacity(voxel_count(shape));
    for z in (0..nz).step_by(factor) {
        for y in (0..ny).step_by(factor) {
            data.extend(m.data()[nx * (y + ny * z)..][..nx].iter().step_by(factor));
        }
    }
    let g = Geometry::new(shape, spacing).expect("valid geometry");
    Mask::from_vec(g, data).expect("downsampled size")
}

pub fn downsample_regions(t: &RegionMasks, factor: usize) -> RegionMasks {
    let [a, b, c] = t.masks().clone().map(|m| downsample_mask(&m, factor));
    RegionMasks::new(a, b, c).expect("same geometry")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub dice: f64,
    pub focal: f64,
}

/// `dice_weight · dice + focal_weight · focal` on one level.
pub fn combined_loss(logits: &[Vec<f64>], targets: &[RegionMasks], cfg: &LossConfig) -> Result<(LossTerms, Vec<Vec<f64>>)> {
    let (d, mut gd) = batch_dice_loss(logits, targets, cfg.dice_smooth)?;
    let (f, gf) = focal_loss(logits, targets, cfg.focal_gamma)?;
    for (a, b) in gd.iter_mut().zip(&gf) {
        for (x, y) in a.iter_mut().zip(b) {
            *x = cfg.dice_weight * *x + cfg.focal_weight * y;
        }
    }
    let terms = LossTerms {
        total: cfg.dice_weight * d + cfg.focal_weight * f,
        dice: d,
        focal: f,
    };
    Ok((terms, gd))
}

/// Weighted sum over levels of [`combined_loss`] with targets strided by
/// `2^level`. `levels[l][b]` holds level `l` logits of sample `b`.
pub fn ds_combined_loss(
    levels: &[Vec<Vec<f64>>],
    targets: &[RegionMasks],
    cfg: &LossConfig,
) -> Result<(LossTerms, Vec<Vec<Vec<f64>>>)> {
    cfg.validate()?;
    if levels.len() != cfg.ds_weights.len() {
        return Err(Error::Shape(format!(
            "{} logit levels for {} deep-supervision weights",
            levels.len(),
            cfg.ds_weights.len()
        )));
    }
    let mut terms = LossTerms::default();
    let mut grads = Vec::with_capacity(levels.len());
    for (l, (logits, &w)) in levels.iter().zip(&cfg.ds_weights).enumerate() {
        let t: Vec<RegionMasks> = targets.iter().map(|t| downsample_regions(t, 1 << l)).collect();
        let (lt, mut g) = combined_loss(logits, &t, cfg)?;
        terms.total += w * lt.total;
        terms.dice += w * lt.dice;
        terms.focal += w * lt.focal;
        g.iter_mut().flatten().for_each(|v| *v *= w);
        grads.push(g);
    }
    Ok((terms, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_targets(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> RegionMasks {
        let g = Geometry::isotropic(shape).unwrap();
        let [a, b, c] = std::array::from_fn(|_| Mask::from_vec(g.clone(), (0..g.len()).map(|_| rng.gen_bool(0.3)).collect()).unwrap());
        RegionMasks::new(a, b, c).unwrap()
    }

    fn fd_check(f: impl Fn(&[Vec<f64>]) -> f64, logits: &[Vec<f64>], grads: &[Vec<f64>], picks: usize, rng: &mut ChaCha8Rng) {
        let h = 1e-3;
        for _ in 0..picks {
            let b = rng.gen_range(0..logits.len());
            let i = rng.gen_range(0..logits[b].len());
            let mut lp = logits.to_vec();
            lp[b][i] += h;
            let mut lm = logits.to_vec();
            lm[b][i] -= h;
            let fd = (f(&lp) - f(&lm)) / (2.0 * h);
            let a = grads[b][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "grad {a} vs fd {fd}");
        }
    }

    #[test]
    fn focal_reference_value() {
        let g = Geometry::isotropic([1, 1, 1]).unwrap();
        let on = Mask::filled(g, true);
        let t = RegionMasks::new(on.clone(), on.clone(), on).unwrap();
        let (l, _) = focal_loss(&[vec![0.0; 3]], &[t], 2.0).unwrap();
        assert!((l - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.17329).abs() < 1e-5);
    }

    #[test]
    fn dice_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = random_targets(&mut rng, [4, 4, 4]);
        let perfect: Vec<f64> = (0..3).flat_map(|c| t.masks()[c].data().iter().map(|&b| if b { 30.0 } else { -30.0 })).collect();
        assert!(batch_dice_loss(&[perfect], &[t.clone()], 1e-5).unwrap().0 < 1e-3);
        let empty = RegionMasks::empty(t.geometry().clone());
        assert!(batch_dice_loss(&[vec![-30.0; 192]], &[empty], 1e-5).unwrap().0 < 1e-3);
        assert!(batch_dice_loss(&[vec![0.0; 10]], &[t], 1e-5).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let t: Vec<RegionMasks> = (0..2).map(|_| random_targets(&mut rng, [4, 3, 5])).collect();
            let l: Vec<Vec<f64>> = (0..2).map(|_| (0..180).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
            let (_, g) = batch_dice_loss(&l, &t, 1e-5).unwrap();
            fd_check(|x| batch_dice_loss(x, &t, 1e-5).unwrap().0, &l, &g, 20, &mut rng);
            for gamma in [0.0, 2.0, 0.5] {
                let (_, g) = focal_loss(&l, &t, gamma).unwrap();
                fd_check(|x| focal_loss(x, &t, gamma).unwrap().0, &l, &g, 20, &mut rng);
            }
        }
    }

    #[test]
    fn ds_weights_and_downsampling() {
        let w = ds_weights(4);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] - 8.0 / 15.0).abs() < 1e-15);
        let g = Geometry::isotropic([5, 4, 2]).unwrap();
        let m = Mask::from_vec(g.clone(), (0..g.len()).map(|i| i % 3 == 0).collect()).unwrap();
        let d = downsample_mask(&m, 2);
        assert_eq!(d.shape(), [3, 2, 1]);
        assert_eq!(*d.get(1, 1, 0), *m.get(2, 2, 0));
        assert_eq!(d.spacing(), [2.0; 3]);
    }

    #[test]
    fn single_level_equals_combined() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = vec![random_targets(&mut rng, [4, 4, 4])];
        let l = vec![(0..192).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>()];
        let cfg = LossConfig::single_level();
        let (a, ga) = ds_combined_loss(&[l.clone()], &t, &cfg).unwrap();
        let (b, gb) = combined_loss(&l, &t, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga[0], gb);
        let (d, _) = batch_dice_loss(&l, &t, 1e-5).unwrap();
        let (f, _) = focal_loss(&l, &t, 2.0).unwrap();
        assert!((a.total - (d + f)).abs() < 1e-15);
        assert!(ds_combined_loss(&[l.clone(), l], &t, &cfg).is_err());
    }
}
