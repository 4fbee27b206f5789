//! Case preprocessing: foreground crop, nonzero z-score normalization,
//! modality stacking and patch fitting, plus training-time augmentation.
//!
//! Every geometric step is recorded in [`PreprocMeta`] so predictions made in
//! the patch frame can be mapped back onto the original voxel grid with
//! [`restore_grid`].

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volcore::{
    flat_index, labels_to_regions, voxel_count, ChannelStack, Geometry, Grid, LabelMap, Mask,
    MultiModalImage, ProbKind, Region, RegionMasks, RegionProbs, Volume3,
};
use crate::volio::{self, CaseBundle, NpyArray};

/// Half-open per-axis bounds `[lo, hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BBox {
    pub fn full(shape: [usize; 3]) -> Self {
        Self {
            lo: [0; 3],
            hi: shape,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.hi[a] - self.lo[a])
    }
}

/// How one axis was brought to the patch extent: zero padding when the
/// input was smaller, a centred crop when it was larger.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisFit {
    pub pad_lo: usize,
    pub pad_hi: usize,
    pub crop_lo: usize,
    pub crop_hi: usize,
}

impl AxisFit {
    pub fn for_extent(n: usize, target: usize) -> Self {
        if n <= target {
            let pad = target - n;
            Self {
                pad_lo: pad / 2,
                pad_hi: pad - pad / 2,
                ..Self::default()
            }
        } else {
            let cut = n - target;
            Self {
                crop_lo: cut / 2,
                crop_hi: cut - cut / 2,
                ..Self::default()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
    /// Fewer than two nonzero voxels or zero variance; `std` was forced to 1.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocMeta {
    pub original_shape: [usize; 3],
    pub crop_bbox: BBox,
    pub fit: [AxisFit; 3],
    /// Shape after fitting; equals the crop shape when no patch fitting was applied.
    pub output_shape: [usize; 3],
    pub channel_stats: Vec<ChannelStats>,
}

impl PreprocMeta {
    pub fn any_degenerate(&self) -> bool {
        self.channel_stats.iter().any(|s| s.degenerate)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub shape: [usize; 3],
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            shape: [128, 160, 112],
        }
    }
}

impl PatchSpec {
    pub fn new(shape: [usize; 3]) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::Config(format!("patch shape {shape:?} must be positive")));
        }
        Ok(Self { shape })
    }
}

fn crop_data<T: Copy>(src: &[T], shape: [usize; 3], b: &BBox) -> Vec<T> {
    let out_shape = b.shape();
    let mut out = Vec::with_capacity(voxel_count(out_shape));
    for z in b.lo[2]..b.hi[2] {
        for y in b.lo[1]..b.hi[1] {
            let row = flat_index(shape, 0, y, z);
            out.extend_from_slice(&src[row + b.lo[0]..row + b.hi[0]]);
        }
    }
    out
}

/// Copies `src` (shape `src_shape`) into a `dst_shape` grid filled with `fill`,
/// placing source voxel `s` at `s + offset`; voxels landing outside are dropped.
fn place<T: Copy>(src: &[T], src_shape: [usize; 3], dst_shape: [usize; 3], offset: [isize; 3], fill: T) -> Vec<T> {
    let mut out = vec![fill; voxel_count(dst_shape)];
    let range = |a: usize| {
        let lo = (-offset[a]).max(0) as usize;
        let hi = ((dst_shape[a] as isize - offset[a]).min(src_shape[a] as isize)).max(lo as isize) as usize;
        lo..hi
    };
    let (rx, ry, rz) = (range(0), range(1), range(2));
    if rx.is_empty() {
        return out;
    }
    for z in rz {
        let dz = (z as isize + offset[2]) as usize;
        for y in ry.clone() {
            let dy = (y as isize + offset[1]) as usize;
            let s = flat_index(src_shape, rx.start, y, z);
            let d = flat_index(dst_shape, (rx.start as isize + offset[0]) as usize, dy, dz);
            out[d..d + rx.len()].copy_from_slice(&src[s..s + rx.len()]);
        }
    }
    out
}

fn fit_offset(fit: &[AxisFit; 3]) -> [isize; 3] {
    std::array::from_fn(|a| fit[a].pad_lo as isize - fit[a].crop_lo as isize)
}

/// Tightest box around voxels that are nonzero in any channel.
pub fn foreground_bbox(image: &MultiModalImage) -> Option<BBox> {
    let shape = image.shape();
    let mut lo = shape;
    let mut hi = [0usize; 3];
    let mut found = false;
    for i in 0..voxel_count(shape) {
        if image.channels().iter().any(|c| c.data()[i] != 0.0) {
            let p = crate::volcore::unflatten(shape, i);
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a] + 1);
            }
            found = true;
        }
    }
    found.then_some(BBox { lo, hi })
}

pub fn crop_foreground(image: &MultiModalImage) -> Result<(MultiModalImage, PreprocMeta)> {
    let bbox = foreground_bbox(image).ok_or(Error::EmptyForeground)?;
    let g = image.geometry().with_shape(bbox.shape());
    let channels = image
        .channels()
        .clone()
        .map(|c| Volume3::from_vec(g.clone(), crop_data(c.data(), c.shape(), &bbox)).expect("crop shape"));
    let meta = PreprocMeta {
        original_shape: image.shape(),
        crop_bbox: bbox,
        fit: [AxisFit::default(); 3],
        output_shape: bbox.shape(),
        channel_stats: Vec::new(),
    };
    Ok((MultiModalImage::new(channels)?, meta))
}

/// Z-scores the nonzero voxels with their own mean and population std; zeros stay zero.
pub fn znormalize_nonzero(vol: &Volume3) -> (Volume3, ChannelStats) {
    let (mut n, mut sum) = (0usize, 0.0f64);
    for &v in vol.data() {
        if v != 0.0 {
            n += 1;
            sum += v as f64;
        }
    }
    if n == 0 {
        let stats = ChannelStats {
            mean: 0.0,
            std: 1.0,
            degenerate: true,
        };
        return (vol.clone(), stats);
    }
    let mean = sum / n as f64;
    let var = vol
        .data()
        .iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    let degenerate = n <= 1 || !(std > 0.0) || !std.is_finite();
    let std = if degenerate { 1.0 } else { std };
    let out = vol.map(|&v| if v == 0.0 { 0.0 } else { ((v as f64 - mean) / std) as f32 });
    (out, ChannelStats { mean, std, degenerate })
}

/// Pads (centred, zeros) or centre-crops every axis of `stack` to `spec.shape`.
pub fn fit_to_patch(stack: &ChannelStack, spec: &PatchSpec) -> (ChannelStack, [AxisFit; 3]) {
    let fit: [AxisFit; 3] = std::array::from_fn(|a| AxisFit::for_extent(stack.shape[a], spec.shape[a]));
    let offset = fit_offset(&fit);
    let mut out = Vec::with_capacity(stack.channels * voxel_count(spec.shape));
    for c in 0..stack.channels {
        out.extend(place(stack.channel(c), stack.shape, spec.shape, offset, 0.0));
    }
    (
        ChannelStack::from_vec(stack.channels, spec.shape, out).expect("fit shape"),
        fit,
    )
}

/// Maps grid data in the preprocessed frame back to the original frame,
/// filling everything outside the foreground box with `fill`.
pub fn restore_grid<T: Copy>(data: &[T], shape: [usize; 3], meta: &PreprocMeta, target: &Geometry, fill: T) -> Result<Vec<T>> {
    if meta.original_shape != target.shape {
        return Err(Error::GeometryMismatch(format!(
            "meta original shape {:?} vs target {:?}",
            meta.original_shape, target.shape
        )));
    }
    if shape != meta.output_shape || data.len() != voxel_count(shape) {
        return Err(Error::Shape(format!(
            "restore input shape {shape:?} does not match preprocessed shape {:?}",
            meta.output_shape
        )));
    }
    let cropped_shape = meta.crop_bbox.shape();
    let back = fit_offset(&meta.fit).map(|o| -o);
    let cropped = place(data, shape, cropped_shape, back, fill);
    let lo = meta.crop_bbox.lo.map(|v| v as isize);
    Ok(place(&cropped, cropped_shape, target.shape, lo, fill))
}

pub fn restore_labels(labels: &Grid<u8>, meta: &PreprocMeta, target: &Geometry) -> Result<LabelMap> {
    let data = restore_grid(labels.data(), labels.shape(), meta, target, 0)?;
    LabelMap::from_vec(target.clone(), data)
}

pub fn restore_probs(probs: &RegionProbs, meta: &PreprocMeta, target: &Geometry) -> Result<RegionProbs> {
    let channels = probs.channels().clone().map(|c| restore_grid(c.data(), c.shape(), meta, target, 0.0));
    let [a, b, c] = channels;
    let mk = |d: Vec<f32>| Volume3::from_vec(target.clone(), d);
    RegionProbs::new(probs.kind(), [mk(a?)?, mk(b?)?, mk(c?)?])
}

/// Output of [`preprocess_case`].
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub case_id: String,
    pub image: ChannelStack,
    pub regions: Option<RegionMasks>,
    pub meta: PreprocMeta,
    /// Geometry of the preprocessed frame (spacing and orientation of the source).
    pub geometry: Geometry,
}

/// crop → normalize → stack → fit. With `patch = None` the cropped frame is kept as is.
pub fn preprocess_case(bundle: &CaseBundle, patch: Option<&PatchSpec>) -> Result<Preprocessed> {
    let (cropped, mut meta) = crop_foreground(&bundle.image)?;
    let mut normed = Vec::with_capacity(4);
    for c in cropped.channels() {
        let (v, s) = znormalize_nonzero(c);
        normed.push(v);
        meta.channel_stats.push(s);
    }
    let mut stack = ChannelStack::from_volumes(&normed)?;
    let mut regions = bundle
        .seg
        .as_ref()
        .map(|seg| -> Result<ChannelStack> {
            let masks = labels_to_regions(seg)?;
            let vols: Vec<Volume3> = masks
                .masks()
                .iter()
                .map(|m| Volume3::from_vec(cropped.geometry().clone(), crop_data(&m.map(|&b| b as u8 as f32).into_data(), m.shape(), &meta.crop_bbox)))
                .collect::<Result<_>>()?;
            ChannelStack::from_volumes(&vols)
        })
        .transpose()?;
    if let Some(spec) = patch {
        let (fitted, fit) = fit_to_patch(&stack, spec);
        stack = fitted;
        meta.fit = fit;
        meta.output_shape = spec.shape;
        regions = regions.map(|r| fit_to_patch(&r, spec).0);
    }
    let geometry = bundle.image.geometry().with_shape(stack.shape);
    let regions = regions
        .map(|r| {
            let mk = |c: usize| Mask::from_vec(geometry.clone(), r.channel(c).iter().map(|&v| v != 0.0).collect());
            RegionMasks::new(mk(0)?, mk(1)?, mk(2)?)
        })
        .transpose()?;
    Ok(Preprocessed {
        case_id: bundle.case_id.clone(),
        image: stack,
        regions,
        meta,
        geometry,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MetaFile {
    case_id: String,
    spacing: [f32; 3],
    degenerate: bool,
    #[serde(flatten)]
    meta: PreprocMeta,
}

pub fn cache_paths(dir: &Path, case_id: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{case_id}_img.npy")),
        dir.join(format!("{case_id}_reg.npy")),
        dir.join(format!("{case_id}_meta.json")),
    )
}

impl Preprocessed {
    /// Writes `{id}_img.npy`, `{id}_reg.npy` (when regions exist) and `{id}_meta.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (img, reg, meta) = cache_paths(dir, &self.case_id);
        volio::write_npy(&NpyArray::from_stack(&self.image), img)?;
        if let Some(r) = &self.regions {
            volio::write_npy(&NpyArray::from_channel_bytes(3, self.image.shape, &r.to_bytes()), reg)?;
        }
        let file = MetaFile {
            case_id: self.case_id.clone(),
            spacing: self.geometry.spacing,
            degenerate: self.meta.any_degenerate(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_string_pretty(&file).expect("meta serializes");
        std::fs::write(&meta, json).map_err(|e| Error::io(&meta, e))
    }

    pub fn read(dir: impl AsRef<Path>, case_id: &str) -> Result<Self> {
        let (img, reg, meta_path) = cache_paths(dir.as_ref(), case_id);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let file: MetaFile = serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
        let image = volio::read_npy(&img)?.to_stack()?;
        let geometry = Geometry::new(image.shape, file.spacing)?;
        let regions = if reg.is_file() {
            let (c, shape, bytes) = volio::read_npy(&reg)?.to_channel_bytes()?;
            if c != 3 || shape != image.shape {
                return Err(Error::Shape(format!("region cache {c}x{shape:?} does not match image")));
            }
            Some(RegionMasks::from_bytes(&geometry, &bytes)?)
        } else {
            None
        };
        Ok(Self {
            case_id: file.case_id,
            image,
            regions,
            meta: file.meta,
            geometry,
        })
    }
}

/// Training-time augmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub patch: PatchSpec,
    pub flip_prob: f64,
    pub scale_prob: f64,
    pub scale_range: (f32, f32),
    pub shift_prob: f64,
    pub shift_range: (f32, f32),
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            patch: PatchSpec::default(),
            flip_prob: 0.5,
            scale_prob: 1.0,
            scale_range: (0.9, 1.1),
            shift_prob: 1.0,
            shift_range: (-0.1, 0.1),
        }
    }
}

impl AugmentSpec {
    /// Random crop only; flips and intensity changes disabled.
    pub fn crop_only(patch: PatchSpec) -> Self {
        Self {
            patch,
            flip_prob: 0.0,
            scale_prob: 0.0,
            shift_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Reverses `data` along `axis` for every channel.
pub fn flip_axis<T: Copy>(data: &mut [T], channels: usize, shape: [usize; 3], axis: usize) {
    let n = voxel_count(shape);
    for c in 0..channels {
        let ch = &mut data[c * n..(c + 1) * n];
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    let p = [x, y, z];
                    let mut q = p;
                    q[axis] = shape[axis] - 1 - p[axis];
                    let (i, j) = (flat_index(shape, p[0], p[1], p[2]), flat_index(shape, q[0], q[1], q[2]));
                    if i < j {
                        ch.swap(i, j);
                    }
                }
            }
        }
    }
}

fn crop_channels<T: Copy>(data: &[T], channels: usize, shape: [usize; 3], b: &BBox) -> Vec<T> {
    let n = voxel_count(shape);
    (0..channels)
        .flat_map(|c| crop_data(&data[c * n..(c + 1) * n], shape, b))
        .collect()
}

/// Random crop to the patch (padding first where the sample is smaller),
/// per-axis flips, then per-channel intensity scale and shift.
pub fn augment<R: Rng>(image: &ChannelStack, regions: &RegionMasks, rng: &mut R, spec: &AugmentSpec) -> Result<(ChannelStack, RegionMasks)> {
    if regions.geometry().shape != image.shape {
        return Err(Error::Shape(format!(
            "regions {:?} vs image {:?}",
            regions.geometry().shape,
            image.shape
        )));
    }
    let padded_shape: [usize; 3] = std::array::from_fn(|a| image.shape[a].max(spec.patch.shape[a]));
    let (mut img, mut reg) = if padded_shape != image.shape {
        let pad = PatchSpec { shape: padded_shape };
        let (img, _) = fit_to_patch(image, &pad);
        let reg_stack = ChannelStack::from_vec(3, image.shape, regions.to_bytes().iter().map(|&b| b as f32).collect())?;
        let (r, _) = fit_to_patch(&reg_stack, &pad);
        (img.data, r.data.iter().map(|&v| v != 0.0).collect::<Vec<bool>>())
    } else {
        (image.data.clone(), regions.to_bytes().iter().map(|&b| b != 0).collect())
    };

    let lo: [usize; 3] = std::array::from_fn(|a| rng.gen_range(0..=padded_shape[a] - spec.patch.shape[a]));
    let b = BBox {
        lo,
        hi: std::array::from_fn(|a| lo[a] + spec.patch.shape[a]),
    };
    if padded_shape != spec.patch.shape {
        img = crop_channels(&img, image.channels, padded_shape, &b);
        reg = crop_channels(&reg, 3, padded_shape, &b);
    }
    let shape = spec.patch.shape;
    for axis in 0..3 {
        if rng.gen_bool(spec.flip_prob) {
            flip_axis(&mut img, image.channels, shape, axis);
            flip_axis(&mut reg, 3, shape, axis);
        }
    }
    let n = voxel_count(shape);
    for c in 0..image.channels {
        let scale = if rng.gen_bool(spec.scale_prob) {
            rng.gen_range(spec.scale_range.0..=spec.scale_range.1)
        } else {
            1.0
        };
        let shift = if rng.gen_bool(spec.shift_prob) {
            rng.gen_range(spec.shift_range.0..=spec.shift_range.1)
        } else {
            0.0
        };
        if scale != 1.0 || shift != 0.0 {
            img[c * n..(c + 1) * n].iter_mut().for_each(|v| *v = *v * scale + shift);
        }
    }
    let g = regions.geometry().with_shape(shape);
    let masks = RegionMasks::from_bytes(&g, &reg.iter().map(|&b| b as u8).collect::<Vec<_>>())?;
    Ok((ChannelStack::from_vec(image.channels, shape, img)?, masks))
}

/// Region probabilities that are 1 inside each mask and 0 elsewhere.
pub fn masks_as_probs(masks: &RegionMasks) -> RegionProbs {
    let ch = Region::ALL.map(|r| masks.get(r).map(|&b| if b { 1.0 } else { 0.0 }));
    RegionProbs::new(ProbKind::Probabilities, ch).expect("0/1 probabilities")
}
