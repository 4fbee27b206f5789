//! Sliding-window inference, blending, and equal-weight probability ensembling.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mednext::{self, MedNextConfig};
use crate::params::ParamTree;
use crate::volcore::{voxel_count, ChannelStack, Geometry, Orientation, ProbKind, RegionProbs};
use crate::volio::{self, NpyArray};

/// Maps a 4-channel patch to 3 region probabilities of the same spatial shape.
pub trait Predictor: Sync {
    fn window_shape(&self) -> [usize; 3];
    fn predict(&self, patch: &ChannelStack) -> Result<ChannelStack>;
}

/// Sigmoid of the finest MedNeXt head.
pub struct MedNextPredictor {
    pub params: ParamTree,
    pub config: MedNextConfig,
    pub window: [usize; 3],
}

impl MedNextPredictor {
    pub fn new(params: ParamTree, config: MedNextConfig, window: [usize; 3]) -> Result<Self> {
        config.validate()?;
        let d = config.divisor();
        if window.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(Error::Config(format!(
                "window {window:?} must be a positive multiple of {d} on every axis"
            )));
        }
        Ok(Self { params, config, window })
    }
}

impl Predictor for MedNextPredictor {
    fn window_shape(&self) -> [usize; 3] {
        self.window
    }

    fn predict(&self, patch: &ChannelStack) -> Result<ChannelStack> {
        let mut out = mednext::forward(&self.params, &self.config, patch)?.swap_remove(0);
        out.data.par_iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(out)
    }
}

/// Predicts fixed per-region values everywhere.
pub struct ConstantPredictor {
    pub values: [f32; 3],
    pub window: [usize; 3],
}

impl Predictor for ConstantPredictor {
    fn window_shape(&self) -> [usize; 3] {
        self.window
    }

    fn predict(&self, patch: &ChannelStack) -> Result<ChannelStack> {
        let n = patch.voxels();
        let data = self.values.iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
        ChannelStack::from_vec(3, patch.shape, data)
    }
}

pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-(x as f64)).exp())) as f32
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    Uniform,
    #[default]
    Gaussian,
}

impl std::str::FromStr for BlendMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(BlendMode::Uniform),
            "gaussian" => Ok(BlendMode::Gaussian),
            _ => Err(Error::Config(format!("unknown blend mode {s:?} (uniform|gaussian)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blend {
    pub mode: BlendMode,
    /// Gaussian σ as a fraction of the window extent.
    pub sigma_fraction: f64,
    pub floor: f64,
}

impl Default for Blend {
    fn default() -> Self {
        Self::new(BlendMode::Gaussian)
    }
}

impl Blend {
    pub fn new(mode: BlendMode) -> Self {
        Self {
            mode,
            sigma_fraction: 0.125,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window: [usize; 3],
    pub overlap: f64,
    pub blend: Blend,
    pub volume_shape: [usize; 3],
    /// Zero padding `(lo, hi)` per axis applied when the volume is smaller than the window.
    pub pad: [(usize, usize); 3],
    pub padded_shape: [usize; 3],
    /// Lexicographically sorted window origins in the padded frame.
    pub origins: Vec<[usize; 3]>,
}

/// Origins along one axis of extent `n >= w`.
pub fn axis_origins(n: usize, w: usize, overlap: f64) -> Vec<usize> {
    let step = ((w as f64 * (1.0 - overlap) + 1e-9).floor() as usize).max(1);
    let mut out: Vec<usize> = (0..).map(|k| k * step).take_while(|&o| o + w <= n).collect();
    if out.last() != Some(&(n - w)) {
        out.push(n - w);
    }
    out
}

pub fn plan_windows(volume_shape: [usize; 3], window: [usize; 3], overlap: f64, blend: Blend) -> Result<WindowPlan> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} must be in [0, 1)")));
    }
    if window.contains(&0) || volume_shape.contains(&0) {
        return Err(Error::Config(format!(
            "window {window:?} and volume {volume_shape:?} must be positive"
        )));
    }
    let padded_shape: [usize; 3] = std::array::from_fn(|a| volume_shape[a].max(window[a]));
    let pad = std::array::from_fn(|a| {
        let total = padded_shape[a] - volume_shape[a];
        (total / 2, total - total / 2)
    });
    let axes: [Vec<usize>; 3] = std::array::from_fn(|a| axis_origins(padded_shape[a], window[a], overlap));
    let mut origins = Vec::with_capacity(axes.iter().map(Vec::len).product());
    for &x in &axes[0] {
        for &y in &axes[1] {
            for &z in &axes[2] {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(WindowPlan {
        window,
        overlap,
        blend,
        volume_shape,
        pad,
        padded_shape,
        origins,
    })
}

/// Per-voxel blend weights over one window, x fastest.
pub fn blend_kernel(window: [usize; 3], blend: &Blend) -> Vec<f64> {
    match blend.mode {
        BlendMode::Uniform => vec![1.0; voxel_count(window)],
        BlendMode::Gaussian => {
            let axis = |a: usize| -> Vec<f64> {
                let w = window[a];
                let sigma = w as f64 * blend.sigma_fraction;
                let c = (w as f64 - 1.0) / 2.0;
                (0..w).map(|i| -((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).collect()
            };
            let (ex, ey, ez) = (axis(0), axis(1), axis(2));
            let mut k = Vec::with_capacity(voxel_count(window));
            for z in &ez {
                for y in &ey {
                    for x in &ex {
                        k.push(x + y + z);
                    }
                }
            }
            let max = k.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            k.iter_mut().for_each(|v| *v = (*v - max).exp().max(blend.floor));
            k
        }
    }
}

fn pad_volume(volume: &ChannelStack, plan: &WindowPlan) -> ChannelStack {
    if plan.padded_shape == volume.shape {
        return volume.clone();
    }
    let [px, py, _] = plan.padded_shape;
    let [nx, ny, nz] = volume.shape;
    let mut out = ChannelStack::zeros(volume.channels, plan.padded_shape);
    for c in 0..volume.channels {
        let src = volume.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..nz {
            for y in 0..ny {
                let d = plan.pad[0].0 + px * (y + plan.pad[1].0 + py * (z + plan.pad[2].0));
                dst[d..d + nx].copy_from_slice(&src[nx * (y + ny * z)..][..nx]);
            }
        }
    }
    out
}

fn extract(src: &ChannelStack, origin: [usize; 3], window: [usize; 3]) -> ChannelStack {
    let [sx, sy, _] = src.shape;
    let [wx, wy, wz] = window;
    let mut data = Vec::with_capacity(src.channels * voxel_count(window));
    for c in 0..src.channels {
        let ch = src.channel(c);
        for z in 0..wz {
            for y in 0..wy {
                let s = origin[0] + sx * (origin[1] + y + sy * (origin[2] + z));
                data.extend_from_slice(&ch[s..s + wx]);
            }
        }
    }
    ChannelStack::from_vec(src.channels, window, data).expect("window shape")
}

fn check_patch(out: &ChannelStack, window: [usize; 3]) -> Result<()> {
    if out.channels != 3 || out.shape != window {
        return Err(Error::Shape(format!(
            "predictor returned {}x{:?}, expected 3x{window:?}",
            out.channels, out.shape
        )));
    }
    if let Some(v) = out.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Internal(format!("predictor returned {v} outside [0, 1]")));
    }
    Ok(())
}

/// Blended probabilities over `volume` (4 channels, shape `plan.volume_shape`).
///
/// Windows are predicted in parallel batches but accumulated one by one in
/// plan order, so the result does not depend on the thread count.
pub fn sliding_window_predict(
    volume: &ChannelStack,
    predictor: &dyn Predictor,
    plan: &WindowPlan,
    geometry: &Geometry,
) -> Result<RegionProbs> {
    if predictor.window_shape() != plan.window {
        return Err(Error::Config(format!(
            "predictor window {:?} differs from plan window {:?}",
            predictor.window_shape(),
            plan.window
        )));
    }
    if volume.shape != plan.volume_shape || geometry.shape != volume.shape {
        return Err(Error::Shape(format!(
            "volume {:?}, plan {:?} and geometry {:?} disagree",
            volume.shape, plan.volume_shape, geometry.shape
        )));
    }
    let padded = pad_volume(volume, plan);
    let kernel = blend_kernel(plan.window, &plan.blend);
    let [px, py, _] = plan.padded_shape;
    let pn = voxel_count(plan.padded_shape);
    let [wx, wy, wz] = plan.window;
    let mut acc = vec![0.0f64; 3 * pn];
    let mut wsum = vec![0.0f64; pn];
    let batch = rayon::current_num_threads().max(1);
    for chunk in plan.origins.chunks(batch) {
        let preds: Vec<ChannelStack> = chunk
            .par_iter()
            .map(|&o| {
                let out = predictor.predict(&extract(&padded, o, plan.window))?;
                check_patch(&out, plan.window)?;
                Ok(out)
            })
            .collect::<Result<_>>()?;
        for (o, pred) in chunk.iter().zip(&preds) {
            for z in 0..wz {
                for y in 0..wy {
                    let row = o[0] + px * (o[1] + y + py * (o[2] + z));
                    let krow = wx * (y + wy * z);
                    for x in 0..wx {
                        wsum[row + x] += kernel[krow + x];
                    }
                    for c in 0..3 {
                        let p = &pred.channel(c)[krow..krow + wx];
                        let a = &mut acc[c * pn + row..c * pn + row + wx];
                        for x in 0..wx {
                            a[x] += kernel[krow + x] * p[x] as f64;
                        }
                    }
                }
            }
        }
    }
    let [nx, ny, nz] = volume.shape;
    let mut out = ChannelStack::zeros(3, volume.shape);
    for c in 0..3 {
        let dst = out.channel_mut(c);
        for z in 0..nz {
            for y in 0..ny {
                let s = plan.pad[0].0 + px * (y + plan.pad[1].0 + py * (z + plan.pad[2].0));
                for x in 0..nx {
                    let w = wsum[s + x];
                    if w <= 0.0 {
                        return Err(Error::Internal(format!("voxel ({x},{y},{z}) not covered by any window")));
                    }
                    dst[x + nx * (y + ny * z)] = (acc[c * pn + s + x] / w).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    RegionProbs::from_stack(ProbKind::Probabilities, &out, geometry)
}

/// Voxelwise mean of probability maps, summed in list order and clamped to [0, 1].
pub fn ensemble_mean(maps: &[RegionProbs]) -> Result<RegionProbs> {
    let first = maps
        .first()
        .ok_or_else(|| Error::EmptyInput("ensemble needs at least one probability map".into()))?;
    for m in maps {
        first.geometry().check_same(m.geometry(), "ensemble member")?;
        if m.kind() != ProbKind::Probabilities {
            return Err(Error::Config("ensemble members must hold probabilities, not logits".into()));
        }
    }
    let stacks: Vec<ChannelStack> = maps.iter().map(RegionProbs::to_stack).collect();
    let n = maps.len() as f64;
    let mut out = stacks[0].clone();
    out.data.par_iter_mut().enumerate().for_each(|(i, v)| {
        let s: f64 = stacks.iter().map(|st| st.data[i] as f64).sum();
        *v = (s / n).clamp(0.0, 1.0) as f32;
    });
    RegionProbs::from_stack(ProbKind::Probabilities, &out, first.geometry())
}

/// Sidecar metadata stored next to a probability NPY.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbsMeta {
    pub case_id: Option<String>,
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    pub orientation: Option<Orientation>,
    pub kind: Option<ProbKind>,
    pub window: Option<[usize; 3]>,
    pub overlap: Option<f64>,
    pub blend: Option<Blend>,
    #[serde(default)]
    pub model_ids: Vec<String>,
}

pub fn sidecar_path(npy: &Path) -> PathBuf {
    npy.with_extension("json")
}

/// Writes `probs` as a float32 `3×X×Y×Z` NPY plus a JSON sidecar with the
/// same stem. Geometry fields of `meta` are filled from `probs`.
pub fn save_probs(probs: &RegionProbs, path: impl AsRef<Path>, meta: &ProbsMeta) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    volio::write_npy(&NpyArray::from_stack(&probs.to_stack()), path)?;
    let g = probs.geometry();
    let meta = ProbsMeta {
        shape: g.shape,
        spacing: g.spacing,
        orientation: g.orientation.clone(),
        kind: Some(probs.kind()),
        ..meta.clone()
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn load_probs(path: impl AsRef<Path>) -> Result<(RegionProbs, ProbsMeta)> {
    let path = path.as_ref();
    let stack = volio::read_npy(path)?.to_stack()?;
    if stack.channels != 3 {
        return Err(Error::Shape(format!("{}: expected 3 channels, got {}", path.display(), stack.channels)));
    }
    let side = sidecar_path(path);
    let meta: ProbsMeta = if side.is_file() {
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&side, e))?
    } else {
        ProbsMeta {
            shape: stack.shape,
            spacing: [1.0; 3],
            ..Default::default()
        }
    };
    if meta.shape != stack.shape {
        return Err(Error::Shape(format!(
            "{}: sidecar shape {:?} vs array {:?}",
            path.display(),
            meta.shape,
            stack.shape
        )));
    }
    let geometry = Geometry::new(stack.shape, meta.spacing)?.with_orientation(meta.orientation.clone());
    let probs = RegionProbs::from_stack(meta.kind.unwrap_or(ProbKind::Probabilities), &stack, &geometry)?;
    Ok((probs, meta))
}
