//! Synthetic four-modality cases with nested spherical tumors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volcore::{Geometry, LabelMap, MultiModalImage, Volume3, LABEL_SNFH, LABEL_ET, LABEL_NETC};
use crate::volio::CaseBundle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TumorSpec {
    /// Whole-tumor radius as a fraction of the smallest extent.
    pub wt_radius: f64,
    /// Tumor-core radius as a fraction of the whole-tumor radius.
    pub tc_ratio: f64,
    /// Enhancing-tumor radius as a fraction of the tumor-core radius.
    pub et_ratio: f64,
    /// Half-width of the uniform intensity noise.
    pub noise: f64,
}

impl Default for TumorSpec {
    fn default() -> Self {
        Self {
            wt_radius: 0.2,
            tc_ratio: 0.6,
            et_ratio: 0.5,
            noise: 0.03,
        }
    }
}

/// Brain semi-axes as a fraction of each extent.
const BRAIN_FRACTION: f64 = 0.42;
const BRAIN_BASE: [f64; 4] = [0.8, 0.7, 0.6, 0.5];
/// Additive offsets per modality (T1, T1Gd, T2W, FLAIR) for NETC, ED, ET.
const OFFSETS: [[f64; 4]; 3] = [[-0.4, -0.2, 0.9, 0.3], [-0.1, 0.0, 0.5, 0.8], [-0.2, 1.0, 0.4, 0.4]];

fn random_offset<R: Rng>(rng: &mut R, max_len: f64) -> [f64; 3] {
    if max_len <= 0.0 {
        return [0.0; 3];
    }
    let per_axis = max_len / 3f64.sqrt();
    std::array::from_fn(|_| rng.gen_range(-per_axis..=per_axis))
}

fn in_sphere(p: [f64; 3], c: [f64; 3], r: f64) -> bool {
    (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r
}

/// Background-zero ellipsoidal brain with a tumor whose edema ⊃ core ⊃
/// enhancing spheres carry modality-specific intensity offsets.
pub fn synth_case<R: Rng>(rng: &mut R, case_id: &str, shape: [usize; 3], spec: &TumorSpec) -> Result<CaseBundle> {
    if shape.iter().any(|&n| n < 16) {
        return Err(Error::Config(format!("synthetic cases need every extent >= 16, got {shape:?}")));
    }
    if !(spec.tc_ratio > 0.0 && spec.tc_ratio <= 1.0 && spec.et_ratio > 0.0 && spec.et_ratio <= 1.0 && spec.wt_radius > 0.0) {
        return Err(Error::Config("tumor radii must be positive fractions".into()));
    }
    let min_extent = *shape.iter().min().expect("3 axes") as f64;
    let semi = shape.map(|n| BRAIN_FRACTION * n as f64);
    let min_semi = semi.iter().cloned().fold(f64::INFINITY, f64::min);
    let r_wt = spec.wt_radius * min_extent;
    if r_wt >= min_semi {
        return Err(Error::Config(format!(
            "whole-tumor radius {r_wt:.1} does not fit in a brain of semi-axis {min_semi:.1}"
        )));
    }
    let r_tc = r_wt * spec.tc_ratio;
    let r_et = r_tc * spec.et_ratio;
    let centre = shape.map(|n| (n as f64 - 1.0) / 2.0);
    let shift = random_offset(rng, 0.5 * (min_semi - r_wt));
    let c_wt: [f64; 3] = std::array::from_fn(|a| centre[a] + shift[a]);
    let o = random_offset(rng, 0.5 * (r_wt - r_tc));
    let c_tc: [f64; 3] = std::array::from_fn(|a| c_wt[a] + o[a]);
    let o = random_offset(rng, 0.5 * (r_tc - r_et));
    let c_et: [f64; 3] = std::array::from_fn(|a| c_tc[a] + o[a]);
    let gain: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.9..1.1));
    let phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));

    let geometry = Geometry::isotropic(shape)?;
    let n = geometry.len();
    let mut chans = vec![vec![0.0f32; n]; 4];
    let mut labels = vec![0u8; n];
    let [nx, ny, nz] = shape;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let r2: f64 = (0..3).map(|a| ((p[a] - centre[a]) / semi[a]).powi(2)).sum();
                if r2 > 1.0 {
                    continue;
                }
                let i = x + nx * (y + ny * z);
                let label = if in_sphere(p, c_et, r_et) {
                    LABEL_ET
                } else if in_sphere(p, c_tc, r_tc) {
                    LABEL_NETC
                } else if in_sphere(p, c_wt, r_wt) {
                    LABEL_SNFH
                } else {
                    0
                };
                labels[i] = label;
                let smooth = 0.05
                    * ((std::f64::consts::TAU * p[0] / nx as f64 + phase[0]).sin()
                        + (std::f64::consts::TAU * p[1] / ny as f64 + phase[1]).cos()
                        + (std::f64::consts::TAU * p[2] / nz as f64 + phase[2]).sin());
                for m in 0..4 {
                    let mut v = BRAIN_BASE[m] * gain[m] * (1.0 + smooth);
                    if label != 0 {
                        let row = match label {
                            LABEL_NETC => 0,
                            LABEL_SNFH => 1,
                            _ => 2,
                        };
                        v += OFFSETS[row][m];
                    }
                    v += rng.gen_range(-spec.noise..=spec.noise);
                    chans[m][i] = v.max(0.05) as f32;
                }
            }
        }
    }
    let vols: Vec<Volume3> = chans
        .into_iter()
        .map(|d| Volume3::from_vec(geometry.clone(), d))
        .collect::<Result<_>>()?;
    let image = MultiModalImage::new(vols.try_into().expect("four modalities"))?;
    let seg = LabelMap::from_vec(geometry, labels)?;
    CaseBundle::new(case_id, image, Some(seg))
}

/// `count` cases named `{prefix}-{i:05}` drawn from one stream.
pub fn synth_dataset<R: Rng>(rng: &mut R, prefix: &str, count: usize, shape: [usize; 3], spec: &TumorSpec) -> Result<Vec<CaseBundle>> {
    (0..count)
        .map(|i| synth_case(rng, &format!("{prefix}-{i:05}"), shape, spec))
        .collect()
}
