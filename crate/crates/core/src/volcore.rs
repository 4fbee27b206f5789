//! Voxel grids, label maps and the ET/TC/WT region algebra.
//!
//! All grids store voxels x-fastest: the flat index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Multi-channel data stores whole channels one
//! after another, each in that same order.
//!
//! Labels follow the BraTS encoding `0` background, `1` NETC, `2` SNFH/ED,
//! `3` ET. Region channels are always ordered `(ET, TC, WT)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NETC: u8 = 1;
pub const LABEL_SNFH: u8 = 2;
pub const LABEL_ET: u8 = 3;

/// Scanner-space orientation carried through from NIfTI headers untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    /// pixdim[0], the qfac sign.
    pub qfac: f32,
    /// quatern_b, quatern_c, quatern_d, qoffset_x, qoffset_y, qoffset_z.
    pub quatern: [f32; 6],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub xyzt_units: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub shape: [usize; 3],
    /// Millimetres per voxel along x, y, z.
    pub spacing: [f32; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<Orientation>,
}

impl Geometry {
    pub fn new(shape: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::Shape(format!("shape {shape:?} has a zero extent")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Shape(format!("spacing {spacing:?} must be positive")));
        }
        Ok(Self {
            shape,
            spacing,
            orientation: None,
        })
    }

    /// 1 mm isotropic geometry.
    pub fn isotropic(shape: [usize; 3]) -> Result<Self> {
        Self::new(shape, [1.0; 3])
    }

    pub fn with_orientation(mut self, orientation: Option<Orientation>) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn len(&self) -> usize {
        voxel_count(self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape and spacing agree; orientation is metadata and not compared.
    pub fn same_grid(&self, other: &Geometry) -> bool {
        self.shape == other.shape && self.spacing == other.spacing
    }

    pub fn check_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: {:?}@{:?} vs {:?}@{:?}",
                self.shape, self.spacing, other.shape, other.spacing
            )))
        }
    }

    pub fn with_shape(&self, shape: [usize; 3]) -> Geometry {
        Geometry {
            shape,
            spacing: self.spacing,
            orientation: self.orientation.clone(),
        }
    }
}

#[inline]
pub fn voxel_count(shape: [usize; 3]) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub fn flat_index(shape: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + shape[0] * (y + shape[1] * z)
}

#[inline]
pub fn unflatten(shape: [usize; 3], i: usize) -> [usize; 3] {
    let x = i % shape[0];
    let yz = i / shape[0];
    [x, yz % shape[1], yz / shape[1]]
}

/// A single-channel 3D grid with its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    geometry: Geometry,
    data: Vec<T>,
}

pub type Volume3 = Grid<f32>;
pub type Mask = Grid<bool>;

impl<T> Grid<T> {
    pub fn from_vec(geometry: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                geometry.shape
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn shape(&self) -> [usize; 3] {
        self.geometry.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.geometry.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn set_orientation(&mut self, orientation: Option<Orientation>) {
        self.geometry.orientation = orientation;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(f).collect(),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> &T {
        &self.data[flat_index(self.geometry.shape, x, y, z)]
    }
}

impl<T: Clone> Grid<T> {
    pub fn filled(geometry: Geometry, value: T) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            data: vec![value; n],
        }
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    /// Element-wise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// Integer segmentation over {0,1,2,3}.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap(Grid<u8>);

impl LabelMap {
    pub fn new(grid: Grid<u8>) -> Result<Self> {
        if let Some((index, &value)) = grid.data.iter().enumerate().find(|(_, &v)| v > LABEL_ET) {
            return Err(Error::InvalidLabel { value, index });
        }
        Ok(Self(grid))
    }

    pub fn from_vec(geometry: Geometry, data: Vec<u8>) -> Result<Self> {
        Self::new(Grid::from_vec(geometry, data)?)
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self(Grid::filled(geometry, 0))
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<u8> {
        self.0
    }

    pub fn geometry(&self) -> &Geometry {
        self.0.geometry()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.0.shape()
    }

    pub fn data(&self) -> &[u8] {
        self.0.data()
    }

    pub fn set_orientation(&mut self, orientation: Option<Orientation>) {
        self.0.set_orientation(orientation);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T1Gd,
    T2W,
    T2Flair,
}

impl Modality {
    /// Stacking order of the four input channels.
    pub const ALL: [Modality; 4] = [
        Modality::T1,
        Modality::T1Gd,
        Modality::T2W,
        Modality::T2Flair,
    ];

    /// BraTS 2023/2024 file suffix.
    pub fn default_suffix(self) -> &'static str {
        match self {
            Modality::T1 => "t1n",
            Modality::T1Gd => "t1c",
            Modality::T2W => "t2w",
            Modality::T2Flair => "t2f",
        }
    }
}

/// Four co-registered MRI channels in [`Modality::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalImage {
    channels: [Volume3; 4],
}

impl MultiModalImage {
    pub fn new(channels: [Volume3; 4]) -> Result<Self> {
        for (i, c) in channels.iter().enumerate().skip(1) {
            channels[0]
                .geometry()
                .check_same(c.geometry(), &format!("modality {:?}", Modality::ALL[i]))?;
        }
        Ok(Self { channels })
    }

    pub fn channels(&self) -> &[Volume3; 4] {
        &self.channels
    }

    pub fn channel(&self, m: Modality) -> &Volume3 {
        &self.channels[m as usize]
    }

    pub fn geometry(&self) -> &Geometry {
        self.channels[0].geometry()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.channels[0].shape()
    }

    pub fn into_channels(self) -> [Volume3; 4] {
        self.channels
    }
}

/// Dense multi-channel array: `channels` consecutive x-fastest grids.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStack {
    pub channels: usize,
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl ChannelStack {
    pub fn zeros(channels: usize, shape: [usize; 3]) -> Self {
        Self {
            channels,
            shape,
            data: vec![0.0; channels * voxel_count(shape)],
        }
    }

    pub fn from_vec(channels: usize, shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * voxel_count(shape) {
            return Err(Error::Shape(format!(
                "stack data length {} does not match {channels}x{shape:?}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            shape,
            data,
        })
    }

    pub fn from_volumes(vols: &[Volume3]) -> Result<Self> {
        let first = vols
            .first()
            .ok_or_else(|| Error::EmptyInput("no channels to stack".into()))?;
        let mut data = Vec::with_capacity(vols.len() * first.len());
        for v in vols {
            if v.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    v.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(v.data());
        }
        Ok(Self {
            channels: vols.len(),
            shape: first.shape(),
            data,
        })
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.shape)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn to_volumes(&self, geometry: &Geometry) -> Result<Vec<Volume3>> {
        let g = geometry.with_shape(self.shape);
        (0..self.channels)
            .map(|c| Volume3::from_vec(g.clone(), self.channel(c).to_vec()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Et,
    Tc,
    Wt,
}

impl Region {
    /// Canonical channel order.
    pub const ALL: [Region; 3] = [Region::Et, Region::Tc, Region::Wt];

    pub fn name(self) -> &'static str {
        match self {
            Region::Et => "ET",
            Region::Tc => "TC",
            Region::Wt => "WT",
        }
    }

    /// Whether a voxel with this label belongs to the region.
    pub fn contains_label(self, label: u8) -> bool {
        match self {
            Region::Et => label == LABEL_ET,
            Region::Tc => label == LABEL_ET || label == LABEL_NETC,
            Region::Wt => label != LABEL_BACKGROUND,
        }
    }
}

/// Binary ET, TC, WT masks over one geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    masks: [Mask; 3],
}

impl RegionMasks {
    pub fn new(et: Mask, tc: Mask, wt: Mask) -> Result<Self> {
        et.geometry().check_same(tc.geometry(), "TC mask")?;
        et.geometry().check_same(wt.geometry(), "WT mask")?;
        Ok(Self {
            masks: [et, tc, wt],
        })
    }

    pub fn empty(geometry: Geometry) -> Self {
        let m = Mask::filled(geometry, false);
        Self {
            masks: [m.clone(), m.clone(), m],
        }
    }

    pub fn get(&self, r: Region) -> &Mask {
        &self.masks[r as usize]
    }

    pub fn get_mut(&mut self, r: Region) -> &mut Mask {
        &mut self.masks[r as usize]
    }

    pub fn masks(&self) -> &[Mask; 3] {
        &self.masks
    }

    pub fn into_masks(self) -> [Mask; 3] {
        self.masks
    }

    pub fn geometry(&self) -> &Geometry {
        self.masks[0].geometry()
    }

    pub fn is_nested(&self) -> bool {
        self.get(Region::Et).is_subset_of(self.get(Region::Tc))
            && self.get(Region::Tc).is_subset_of(self.get(Region::Wt))
    }

    /// Masks as a 3-channel 0/1 byte array in region order.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.masks
            .iter()
            .flat_map(|m| m.data().iter().map(|&b| b as u8))
            .collect()
    }

    pub fn from_bytes(geometry: &Geometry, bytes: &[u8]) -> Result<Self> {
        let n = geometry.len();
        if bytes.len() != 3 * n {
            return Err(Error::Shape(format!(
                "region bytes length {} != 3x{n}",
                bytes.len()
            )));
        }
        let mask = |c: usize| {
            Mask::from_vec(
                geometry.clone(),
                bytes[c * n..(c + 1) * n].iter().map(|&b| b != 0).collect(),
            )
        };
        Self::new(mask(0)?, mask(1)?, mask(2)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbKind {
    Logits,
    Probabilities,
}

/// Three region channels (ET, TC, WT) over one geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionProbs {
    kind: ProbKind,
    channels: [Volume3; 3],
}

impl RegionProbs {
    pub fn new(kind: ProbKind, channels: [Volume3; 3]) -> Result<Self> {
        channels[0].geometry().check_same(channels[1].geometry(), "TC channel")?;
        channels[0].geometry().check_same(channels[2].geometry(), "WT channel")?;
        if kind == ProbKind::Probabilities {
            for (c, ch) in channels.iter().enumerate() {
                if let Some(i) = ch.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Shape(format!(
                        "probability {} outside [0,1] in {} channel at voxel {i}",
                        ch.data()[i],
                        Region::ALL[c].name()
                    )));
                }
            }
        }
        Ok(Self { kind, channels })
    }

    pub fn from_stack(kind: ProbKind, stack: &ChannelStack, geometry: &Geometry) -> Result<Self> {
        if stack.channels != 3 {
            return Err(Error::Shape(format!(
                "expected 3 region channels, got {}",
                stack.channels
            )));
        }
        let v = stack.to_volumes(geometry)?;
        let [et, tc, wt]: [Volume3; 3] = v.try_into().expect("three channels");
        Self::new(kind, [et, tc, wt])
    }

    pub fn kind(&self) -> ProbKind {
        self.kind
    }

    pub fn channels(&self) -> &[Volume3; 3] {
        &self.channels
    }

    pub fn get(&self, r: Region) -> &Volume3 {
        &self.channels[r as usize]
    }

    pub fn geometry(&self) -> &Geometry {
        self.channels[0].geometry()
    }

    pub fn to_stack(&self) -> ChannelStack {
        ChannelStack::from_volumes(&self.channels).expect("channels share shape")
    }

    pub fn into_channels(self) -> [Volume3; 3] {
        self.channels
    }
}

/// Expands a label map into nested ET ⊆ TC ⊆ WT masks.
pub fn labels_to_regions(labels: &LabelMap) -> Result<RegionMasks> {
    let g = labels.geometry();
    let mut out = RegionMasks::empty(g.clone());
    for (i, &l) in labels.data().iter().enumerate() {
        if l > LABEL_ET {
            return Err(Error::InvalidLabel { value: l, index: i });
        }
        for r in Region::ALL {
            out.masks[r as usize].data_mut()[i] = r.contains_label(l);
        }
    }
    Ok(out)
}

/// Unions ET into TC and TC into WT so that ET ⊆ TC ⊆ WT.
pub fn enforce_hierarchy(masks: &RegionMasks) -> RegionMasks {
    let mut out = masks.clone();
    let [et, tc, wt] = &mut out.masks;
    for ((e, t), w) in et
        .data_mut()
        .iter()
        .zip(tc.data_mut().iter_mut())
        .zip(wt.data_mut().iter_mut())
    {
        *t |= *e;
        *w |= *t;
    }
    out
}

/// Paints nested region masks back into labels: ET → 3, TC only → 1, WT only → 2.
pub fn regions_to_labels(masks: &RegionMasks) -> Result<LabelMap> {
    let nested = enforce_hierarchy(masks);
    let [et, tc, wt] = nested.masks();
    let data = et
        .data()
        .iter()
        .zip(tc.data())
        .zip(wt.data())
        .map(|((&e, &t), &w)| {
            if e {
                LABEL_ET
            } else if t {
                LABEL_NETC
            } else if w {
                LABEL_SNFH
            } else {
                LABEL_BACKGROUND
            }
        })
        .collect();
    LabelMap::from_vec(et.geometry().clone(), data)
}
