//! MedNeXt forward pass: a ConvNeXt-style 3D U-Net with four encoder stages,
//! a bottleneck, four decoder stages and one deep-supervision head per
//! decoder resolution.
//!
//! Parameter layout (`s` is the stage, `b` the block index):
//!
//! ```text
//! stem.{weight,bias}                       1×1×1 conv, in → C
//! enc{s}.{b}.{dw,norm,expand,compress}.*   blocks at C·2^s
//! down{s}.*, down{s}.res.*                 stride-2 block C·2^s → C·2^(s+1)
//! bottleneck.{b}.*                         blocks at 16C
//! up{s}.*, up{s}.res.*                     transposed block C·2^(s+1) → C·2^s
//! dec{s}.{b}.*                             blocks at C·2^s
//! head{s}.{weight,bias}                    1×1×1 conv, C·2^s → out
//! ```
//!
//! Stage-indexed arrays (`blocks_per_stage`, `expansion_ratios`) run
//! enc0..enc3, bottleneck, dec3..dec0. A down block into stage `s + 1` uses
//! that stage's ratio, and an up block into decoder stage `s` uses the
//! decoder's.

pub mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamTree};
use crate::volcore::ChannelStack;

pub const STAGES: usize = 4;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizePreset {
    B,
    M,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedNextConfig {
    pub kernel_size: usize,
    pub base_channels: usize,
    pub blocks_per_stage: [usize; 9],
    pub expansion_ratios: [usize; 9],
    pub deep_supervision_levels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub preset: SizePreset,
}

impl Default for MedNextConfig {
    fn default() -> Self {
        Self::preset_b()
    }
}

impl MedNextConfig {
    pub fn preset_b() -> Self {
        Self {
            kernel_size: 3,
            base_channels: 32,
            blocks_per_stage: [2; 9],
            expansion_ratios: [2, 3, 4, 4, 4, 4, 4, 3, 2],
            deep_supervision_levels: STAGES,
            in_channels: 4,
            out_channels: 3,
            preset: SizePreset::B,
        }
    }

    pub fn preset_m() -> Self {
        Self {
            blocks_per_stage: [3, 4, 4, 4, 4, 4, 4, 4, 3],
            preset: SizePreset::M,
            ..Self::preset_b()
        }
    }

    pub fn preset(p: SizePreset) -> Self {
        match p {
            SizePreset::M => Self::preset_m(),
            _ => Self::preset_b(),
        }
    }

    /// Small custom config: one block per stage, expansion 1.
    pub fn tiny(base_channels: usize) -> Self {
        Self {
            base_channels,
            blocks_per_stage: [1; 9],
            expansion_ratios: [1; 9],
            preset: SizePreset::Custom,
            ..Self::preset_b()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.blocks_per_stage.contains(&0) {
            return bad("every stage needs at least one block".into());
        }
        if self.expansion_ratios.contains(&0) {
            return bad("expansion ratios must be >= 1".into());
        }
        if !(1..=STAGES).contains(&self.deep_supervision_levels) {
            return bad(format!(
                "deep supervision levels must be in 1..={STAGES}, got {}",
                self.deep_supervision_levels
            ));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    /// Channel width of stage `s` (4 is the bottleneck).
    pub fn width(&self, s: usize) -> usize {
        self.base_channels << s
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << STAGES
    }

    /// Parameter count from layer shapes alone, without building the model.
    pub fn param_count(&self) -> usize {
        let k3 = self.kernel_size.pow(3);
        let block = |cin: usize, cout: usize, r: usize| {
            cin * k3 + cin + 2 * cin + r * cin * cin + r * cin + cout * r * cin + cout
        };
        let mut n = self.in_channels * self.base_channels + self.base_channels;
        for s in 0..STAGES {
            let c = self.width(s);
            n += self.blocks_per_stage[s] * block(c, c, self.expansion_ratios[s]);
            n += self.blocks_per_stage[8 - s] * block(c, c, self.expansion_ratios[8 - s]);
            n += block(c, 2 * c, self.expansion_ratios[s + 1]) + c * 2 * c + 2 * c;
            n += block(2 * c, c, self.expansion_ratios[8 - s]) + 2 * c * c + c;
        }
        let cb = self.width(STAGES);
        n += self.blocks_per_stage[STAGES] * block(cb, cb, self.expansion_ratios[STAGES]);
        for s in 0..self.deep_supervision_levels {
            n += self.width(s) * self.out_channels + self.out_channels;
        }
        n
    }
}

fn add_block(
    p: &mut ParamTree,
    prefix: &str,
    cin: usize,
    cout: usize,
    r: usize,
    k: usize,
    residual: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let hidden = r * cin;
    p.init(format!("{prefix}.dw.weight"), vec![cin, 1, k, k, k], Init::HeUniform { fan_in: k * k * k }, rng)?;
    p.init(format!("{prefix}.dw.bias"), vec![cin], Init::Zeros, rng)?;
    p.init(format!("{prefix}.norm.weight"), vec![cin], Init::Ones, rng)?;
    p.init(format!("{prefix}.norm.bias"), vec![cin], Init::Zeros, rng)?;
    p.init(format!("{prefix}.expand.weight"), vec![hidden, cin], Init::HeUniform { fan_in: cin }, rng)?;
    p.init(format!("{prefix}.expand.bias"), vec![hidden], Init::Zeros, rng)?;
    p.init(format!("{prefix}.compress.weight"), vec![cout, hidden], Init::HeUniform { fan_in: hidden }, rng)?;
    p.init(format!("{prefix}.compress.bias"), vec![cout], Init::Zeros, rng)?;
    if residual {
        p.init(format!("{prefix}.res.weight"), vec![cout, cin], Init::HeUniform { fan_in: cin }, rng)?;
        p.init(format!("{prefix}.res.bias"), vec![cout], Init::Zeros, rng)?;
    }
    Ok(())
}

/// Deterministic parameters for `config` drawn from a ChaCha8 stream seeded
/// with `seed`, in the layout documented at module level.
pub fn build_model(config: &MedNextConfig, seed: u64) -> Result<ParamTree> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamTree::new();
    let (k, c0, cin) = (config.kernel_size, config.base_channels, config.in_channels);
    p.init("stem.weight", vec![c0, cin], Init::HeUniform { fan_in: cin }, &mut rng)?;
    p.init("stem.bias", vec![c0], Init::Zeros, &mut rng)?;
    let r = &config.expansion_ratios;
    for s in 0..STAGES {
        let c = config.width(s);
        for b in 0..config.blocks_per_stage[s] {
            add_block(&mut p, &format!("enc{s}.{b}"), c, c, r[s], k, false, &mut rng)?;
        }
        add_block(&mut p, &format!("down{s}"), c, 2 * c, r[s + 1], k, true, &mut rng)?;
    }
    let cb = config.width(STAGES);
    for b in 0..config.blocks_per_stage[STAGES] {
        add_block(&mut p, &format!("bottleneck.{b}"), cb, cb, r[STAGES], k, false, &mut rng)?;
    }
    for s in (0..STAGES).rev() {
        let c = config.width(s);
        add_block(&mut p, &format!("up{s}"), 2 * c, c, r[8 - s], k, true, &mut rng)?;
        for b in 0..config.blocks_per_stage[8 - s] {
            add_block(&mut p, &format!("dec{s}.{b}"), c, c, r[8 - s], k, false, &mut rng)?;
        }
    }
    for s in 0..config.deep_supervision_levels {
        let c = config.width(s);
        p.init(format!("head{s}.weight"), vec![config.out_channels, c], Init::HeUniform { fan_in: c }, &mut rng)?;
        p.init(format!("head{s}.bias"), vec![config.out_channels], Init::Zeros, &mut rng)?;
    }
    Ok(p)
}

fn tensor<'a>(p: &'a ParamTree, name: &str, shape: &[usize]) -> Result<&'a [f32]> {
    let e = p
        .get(name)
        .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
    if e.shape() != shape {
        return Err(Error::Shape(format!(
            "parameter {name} has shape {:?}, expected {shape:?}",
            e.shape()
        )));
    }
    Ok(e.values())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Resample {
    Same,
    Down,
    Up,
}

fn block(
    x: &ChannelStack,
    p: &ParamTree,
    prefix: &str,
    k: usize,
    ratio: usize,
    cout: usize,
    mode: Resample,
) -> Result<ChannelStack> {
    let cin = x.channels;
    let hidden = ratio * cin;
    let dw_w = tensor(p, &format!("{prefix}.dw.weight"), &[cin, 1, k, k, k])?;
    let dw_b = tensor(p, &format!("{prefix}.dw.bias"), &[cin])?;
    let gamma = tensor(p, &format!("{prefix}.norm.weight"), &[cin])?;
    let beta = tensor(p, &format!("{prefix}.norm.bias"), &[cin])?;
    let ex_w = tensor(p, &format!("{prefix}.expand.weight"), &[hidden, cin])?;
    let ex_b = tensor(p, &format!("{prefix}.expand.bias"), &[hidden])?;
    let co_w = tensor(p, &format!("{prefix}.compress.weight"), &[cout, hidden])?;
    let co_b = tensor(p, &format!("{prefix}.compress.bias"), &[cout])?;

    let mut h = match mode {
        Resample::Same => ops::depthwise_conv(x, dw_w, dw_b, k, 1),
        Resample::Down => ops::depthwise_conv(x, dw_w, dw_b, k, 2),
        Resample::Up => ops::depthwise_conv_transpose(x, dw_w, dw_b, k),
    };
    ops::channel_norm(&mut h, gamma, beta, NORM_EPS);
    let mut h = ops::pointwise_conv(&h, ex_w, ex_b, hidden);
    ops::gelu_inplace(&mut h);
    let mut y = ops::pointwise_conv(&h, co_w, co_b, cout);
    drop(h);

    match mode {
        Resample::Same => ops::add_inplace(&mut y, x),
        Resample::Down | Resample::Up => {
            let rw = tensor(p, &format!("{prefix}.res.weight"), &[cout, cin])?;
            let rb = tensor(p, &format!("{prefix}.res.bias"), &[cout])?;
            let res = if mode == Resample::Down {
                ops::pointwise_conv(&ops::subsample2(x), rw, rb, cout)
            } else {
                ops::pointwise_conv_transpose(x, rw, rb, cout)
            };
            ops::add_inplace(&mut y, &res);
        }
    }
    Ok(y)
}

/// One MedNeXt block, `x + compress(GELU(expand(norm(dwconv(x)))))`, with
/// parameters under `prefix`. Spatial size is preserved.
pub fn mednext_block_forward(
    x: &ChannelStack,
    params: &ParamTree,
    prefix: &str,
    k: usize,
    ratio: usize,
) -> Result<ChannelStack> {
    block(x, params, prefix, k, ratio, x.channels, Resample::Same)
}

/// Logits at /1, /2, /4, /8 (finest first), truncated to the configured
/// number of deep-supervision levels.
pub fn forward(params: &ParamTree, config: &MedNextConfig, x: &ChannelStack) -> Result<Vec<ChannelStack>> {
    config.validate()?;
    if x.channels != config.in_channels {
        return Err(Error::Shape(format!(
            "model expects {} input channels, got {}",
            config.in_channels, x.channels
        )));
    }
    let d = config.divisor();
    if x.shape.iter().any(|&n| n == 0 || n % d != 0) {
        return Err(Error::Shape(format!(
            "input extents {:?} must be positive multiples of {d}",
            x.shape
        )));
    }
    let k = config.kernel_size;
    let r = &config.expansion_ratios;
    let c0 = config.base_channels;

    let stem_w = tensor(params, "stem.weight", &[c0, config.in_channels])?;
    let stem_b = tensor(params, "stem.bias", &[c0])?;
    let mut h = ops::pointwise_conv(x, stem_w, stem_b, c0);

    let mut skips = Vec::with_capacity(STAGES);
    for s in 0..STAGES {
        for b in 0..config.blocks_per_stage[s] {
            h = mednext_block_forward(&h, params, &format!("enc{s}.{b}"), k, r[s])?;
        }
        let down = block(&h, params, &format!("down{s}"), k, r[s + 1], 2 * h.channels, Resample::Down)?;
        skips.push(std::mem::replace(&mut h, down));
    }
    for b in 0..config.blocks_per_stage[STAGES] {
        h = mednext_block_forward(&h, params, &format!("bottleneck.{b}"), k, r[STAGES])?;
    }

    let mut outputs = vec![None; config.deep_supervision_levels];
    for s in (0..STAGES).rev() {
        let skip = skips.pop().expect("one skip per stage");
        h = block(&h, params, &format!("up{s}"), k, r[8 - s], skip.channels, Resample::Up)?;
        ops::add_inplace(&mut h, &skip);
        drop(skip);
        for b in 0..config.blocks_per_stage[8 - s] {
            h = mednext_block_forward(&h, params, &format!("dec{s}.{b}"), k, r[8 - s])?;
        }
        if s < config.deep_supervision_levels {
            let c = h.channels;
            let hw = tensor(params, &format!("head{s}.weight"), &[config.out_channels, c])?;
            let hb = tensor(params, &format!("head{s}.bias"), &[config.out_channels])?;
            outputs[s] = Some(ops::pointwise_conv(&h, hw, hb, config.out_channels));
        }
    }
    Ok(outputs.into_iter().map(|o| o.expect("head output")).collect())
}
