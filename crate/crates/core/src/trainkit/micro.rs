//! Per-voxel MLP used to exercise training end to end.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::Grads;
use crate::error::{Error, Result};
use crate::inference::{sigmoid, Predictor};
use crate::mednext::ops::{gelu, gelu_grad};
use crate::params::{Init, ParamTree};
use crate::volcore::ChannelStack;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroConfig {
    /// Number of affine layers.
    pub depth: usize,
    pub hidden: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for MicroConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            hidden: 16,
            in_channels: 4,
            out_channels: 3,
        }
    }
}

/// Voxels per gradient partial sum; fixed so reductions do not depend on thread count.
const CHUNK: usize = 4096;

#[derive(Clone, Debug)]
struct Layer {
    w: Vec<f64>,
    b: Vec<f64>,
    cin: usize,
    cout: usize,
}

impl MicroConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("micro model sizes must be positive".into()));
        }
        Ok(())
    }

    fn dims(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let cin = if l == 0 { self.in_channels } else { self.hidden };
                let cout = if l + 1 == self.depth { self.out_channels } else { self.hidden };
                (cin, cout)
            })
            .collect()
    }

    /// He-uniform weights and zero biases, `layer{l}.{weight,bias}`.
    pub fn build(&self, seed: u64) -> Result<ParamTree> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamTree::new();
        for (l, (cin, cout)) in self.dims().into_iter().enumerate() {
            p.init(format!("layer{l}.weight"), vec![cout, cin], Init::HeUniform { fan_in: cin }, &mut rng)?;
            p.init(format!("layer{l}.bias"), vec![cout], Init::Zeros, &mut rng)?;
        }
        Ok(p)
    }

    fn layers(&self, p: &ParamTree) -> Result<Vec<Layer>> {
        self.dims()
            .into_iter()
            .enumerate()
            .map(|(l, (cin, cout))| {
                let w = p.values(&format!("layer{l}.weight"))?;
                let b = p.values(&format!("layer{l}.bias"))?;
                if w.len() != cin * cout || b.len() != cout {
                    return Err(Error::Shape(format!("layer{l} does not match {cin}->{cout}")));
                }
                Ok(Layer {
                    w: w.iter().map(|&v| v as f64).collect(),
                    b: b.iter().map(|&v| v as f64).collect(),
                    cin,
                    cout,
                })
            })
            .collect()
    }

    fn check_input(&self, x: &ChannelStack) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "micro model expects {} channels, got {}",
                self.in_channels, x.channels
            )));
        }
        Ok(())
    }

    /// Channel-major logits, `out_channels × voxels`.
    pub fn logits(&self, p: &ParamTree, x: &ChannelStack) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let layers = self.layers(p)?;
        let n = x.voxels();
        let parts: Vec<Vec<f64>> = (0..n)
            .step_by(CHUNK)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&s| {
                let m = CHUNK.min(n - s);
                forward_chunk(&layers, &gather(x, s, m), m).pop().expect("output layer").0
            })
            .collect();
        let mut out = vec![0.0; self.out_channels * n];
        for (k, part) in parts.iter().enumerate() {
            let s = k * CHUNK;
            let m = CHUNK.min(n - s);
            for c in 0..self.out_channels {
                out[c * n + s..c * n + s + m].copy_from_slice(&part[c * m..(c + 1) * m]);
            }
        }
        Ok(out)
    }

    /// Parameter gradients given `d loss / d logits` (same layout as [`Self::logits`]).
    pub fn backward(&self, p: &ParamTree, x: &ChannelStack, dlogits: &[f64]) -> Result<Grads> {
        self.check_input(x)?;
        let layers = self.layers(p)?;
        let n = x.voxels();
        if dlogits.len() != self.out_channels * n {
            return Err(Error::Shape("logit gradient length".into()));
        }
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        let partials: Vec<Vec<(Vec<f64>, Vec<f64>)>> = starts
            .par_iter()
            .map(|&s| {
                let m = CHUNK.min(n - s);
                let input = gather(x, s, m);
                let acts = forward_chunk(&layers, &input, m);
                let mut delta: Vec<f64> = (0..self.out_channels)
                    .flat_map(|c| dlogits[c * n + s..c * n + s + m].iter().copied())
                    .collect();
                let mut acc: Vec<(Vec<f64>, Vec<f64>)> = layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect();
                for l in (0..layers.len()).rev() {
                    let layer = &layers[l];
                    let a_in: &[f64] = if l == 0 { &input } else { &acts[l - 1].0 };
                    let (gw, gb) = &mut acc[l];
                    for o in 0..layer.cout {
                        let d = &delta[o * m..(o + 1) * m];
                        gb[o] = d.iter().sum();
                        for k in 0..layer.cin {
                            gw[o * layer.cin + k] = d.iter().zip(&a_in[k * m..(k + 1) * m]).map(|(a, b)| a * b).sum();
                        }
                    }
                    if l > 0 {
                        let pre = &acts[l - 1].1;
                        let mut next = vec![0.0; layer.cin * m];
                        for k in 0..layer.cin {
                            let row = &mut next[k * m..(k + 1) * m];
                            for o in 0..layer.cout {
                                let w = layer.w[o * layer.cin + k];
                                row.iter_mut().zip(&delta[o * m..(o + 1) * m]).for_each(|(r, d)| *r += w * d);
                            }
                            row.iter_mut().zip(&pre[k * m..(k + 1) * m]).for_each(|(r, z)| *r *= gelu_grad(*z));
                        }
                        delta = next;
                    }
                }
                acc
            })
            .collect();
        let mut total: Vec<(Vec<f64>, Vec<f64>)> = layers.iter().map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()])).collect();
        for part in &partials {
            for (t, pt) in total.iter_mut().zip(part) {
                t.0.iter_mut().zip(&pt.0).for_each(|(a, b)| *a += b);
                t.1.iter_mut().zip(&pt.1).for_each(|(a, b)| *a += b);
            }
        }
        let mut g = Grads::new();
        for (l, (gw, gb)) in total.into_iter().enumerate() {
            g.insert(format!("layer{l}.weight"), gw);
            g.insert(format!("layer{l}.bias"), gb);
        }
        Ok(g)
    }
}

/// Voxels `s..s + m` of every channel as f64, channel-major.
fn gather(x: &ChannelStack, s: usize, m: usize) -> Vec<f64> {
    let n = x.voxels();
    (0..x.channels)
        .flat_map(|c| x.data[c * n + s..c * n + s + m].iter().map(|&v| v as f64))
        .collect()
}

/// `(activation, pre-activation)` per layer for a chunk of `m` voxels, each
/// channel-major; the last entry's activation is the logits.
fn forward_chunk(layers: &[Layer], input: &[f64], m: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let a_in: &[f64] = if l == 0 { input } else { &out[l - 1].0 };
        let mut z = vec![0.0; layer.cout * m];
        for o in 0..layer.cout {
            let row = &mut z[o * m..(o + 1) * m];
            row.fill(layer.b[o]);
            for k in 0..layer.cin {
                let w = layer.w[o * layer.cin + k];
                row.iter_mut().zip(&a_in[k * m..(k + 1) * m]).for_each(|(r, a)| *r += w * a);
            }
        }
        let a = if l + 1 == layers.len() { z.clone() } else { z.iter().map(|&v| gelu(v)).collect() };
        out.push((a, z));
    }
    out
}

/// Sigmoid of the micro model's logits over any window.
pub struct MicroPredictor {
    pub params: ParamTree,
    pub config: MicroConfig,
    pub window: [usize; 3],
}

impl Predictor for MicroPredictor {
    fn window_shape(&self) -> [usize; 3] {
        self.window
    }

    fn predict(&self, patch: &ChannelStack) -> Result<ChannelStack> {
        let z = self.config.logits(&self.params, patch)?;
        ChannelStack::from_vec(self.config.out_channels, patch.shape, z.iter().map(|&v| sigmoid(v as f32)).collect())
    }
}
