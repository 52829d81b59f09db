//! Desk-scale 3D encoder-decoder segmentation backbone.
//!
//! Feature maps are lists of single-channel volume nodes, so "concatenation"
//! is list append and multi-channel convolution is one tape node per output
//! channel. Activation is leaky ReLU with fixed slope 0.01 (a learned
//! per-channel slope would drag per-channel broadcasting into the tape for
//! no benefit at this scale). Instance normalization is non-affine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::volume::Volume;

pub const LEAKY_SLOPE: f64 = 0.01;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ToyUNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    /// Crop shape used for training; inputs must be divisible by 2^levels.
    pub crop: (usize, usize, usize),
    pub instance_norm: bool,
    pub seed: u64,
}

impl Default for ToyUNetConfig {
    fn default() -> Self {
        ToyUNetConfig {
            levels: 2,
            base_channels: 8,
            crop: (32, 32, 32),
            instance_norm: true,
            seed: 0,
        }
    }
}

impl ToyUNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::InvalidParam("levels must be >= 1".into()));
        }
        if self.base_channels < 1 {
            return Err(Error::InvalidParam("base_channels must be >= 1".into()));
        }
        let div = 1usize << self.levels;
        for d in [self.crop.0, self.crop.1, self.crop.2] {
            if d % div != 0 || d == 0 {
                return Err(Error::InvalidParam(format!(
                    "crop dims {:?} must be divisible by 2^levels = {div}",
                    self.crop
                )));
            }
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Named parameter volume. Kernels are (k,k,k) volumes, biases scalars.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Volume,
}

pub struct ToyUNet {
    pub cfg: ToyUNetConfig,
    pub params: Vec<Parameter>,
}

/// Handles produced by one forward pass.
pub struct Forward {
    /// Two-channel logits (background, foreground).
    pub logits: (NodeId, NodeId),
    /// Leaf ids aligned with `ToyUNet::params`.
    pub param_ids: Vec<NodeId>,
}

struct Cursor(usize);

impl Cursor {
    fn take<'a>(&mut self, ids: &'a [NodeId], n: usize) -> &'a [NodeId] {
        let s = &ids[self.0..self.0 + n];
        self.0 += n;
        s
    }
}

impl ToyUNet {
    pub fn new(cfg: ToyUNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::new();

        let push_conv =
            |params: &mut Vec<Parameter>, rng: &mut ChaCha8Rng, prefix: &str, in_ch: usize, out_ch: usize, k: usize| {
                let fan_in = (k * k * k * in_ch) as f64;
                let bound = (6.0 / fan_in).sqrt();
                for oc in 0..out_ch {
                    for ic in 0..in_ch {
                        let data: Vec<f64> = (0..k * k * k)
                            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
                            .collect();
                        params.push(Parameter {
                            name: format!("{prefix}.w{oc}.{ic}"),
                            value: Volume::new((k, k, k), data).expect("kernel dims"),
                        });
                    }
                    params.push(Parameter {
                        name: format!("{prefix}.b{oc}"),
                        value: Volume::scalar(0.0),
                    });
                }
            };

        for l in 0..cfg.levels {
            let in_ch = if l == 0 { 1 } else { cfg.channels(l - 1) };
            let out_ch = cfg.channels(l);
            push_conv(&mut params, &mut rng, &format!("enc{l}.conv1"), in_ch, out_ch, 3);
            push_conv(&mut params, &mut rng, &format!("enc{l}.conv2"), out_ch, out_ch, 3);
        }
        let btl_in = cfg.channels(cfg.levels - 1);
        let btl_out = cfg.channels(cfg.levels);
        push_conv(&mut params, &mut rng, "btl.conv1", btl_in, btl_out, 3);
        push_conv(&mut params, &mut rng, "btl.conv2", btl_out, btl_out, 3);
        for l in (0..cfg.levels).rev() {
            let in_ch = cfg.channels(l + 1) + cfg.channels(l);
            let out_ch = cfg.channels(l);
            push_conv(&mut params, &mut rng, &format!("dec{l}.conv1"), in_ch, out_ch, 3);
            push_conv(&mut params, &mut rng, &format!("dec{l}.conv2"), out_ch, out_ch, 3);
        }
        push_conv(&mut params, &mut rng, "head", cfg.channels(0), 2, 1);

        Ok(ToyUNet { cfg, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Builds the forward graph. With `trainable`, parameter leaves require
    /// gradients; prediction passes set it false.
    pub fn forward(&self, tape: &mut Tape, input: &Volume, trainable: bool) -> Result<Forward> {
        let div = 1usize << self.cfg.levels;
        let (nx, ny, nz) = input.dims();
        if nx % div != 0 || ny % div != 0 || nz % div != 0 {
            return Err(Error::InvalidVolume(format!(
                "input dims {:?} not divisible by 2^levels = {div}",
                input.dims()
            )));
        }
        let param_ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        let mut cur = Cursor(0);

        let x = tape.leaf(input.clone(), false);
        let mut feat = vec![x];
        let mut skips: Vec<Vec<NodeId>> = Vec::with_capacity(self.cfg.levels);
        for l in 0..self.cfg.levels {
            feat = self.block(tape, &param_ids, &mut cur, &feat, self.cfg.channels(l))?;
            skips.push(feat.clone());
            feat = feat
                .iter()
                .map(|&c| tape.downsample_avg2(c))
                .collect::<Result<_>>()?;
        }
        feat = self.block(
            tape,
            &param_ids,
            &mut cur,
            &feat,
            self.cfg.channels(self.cfg.levels),
        )?;
        for l in (0..self.cfg.levels).rev() {
            let mut up: Vec<NodeId> = feat
                .iter()
                .map(|&c| tape.upsample_nearest2(c))
                .collect::<Result<_>>()?;
            up.extend_from_slice(&skips[l]);
            feat = self.block(tape, &param_ids, &mut cur, &up, self.cfg.channels(l))?;
        }
        let logits = conv_layer(tape, &param_ids, &mut cur, &feat, 2)?;
        debug_assert_eq!(cur.0, param_ids.len());
        Ok(Forward {
            logits: (logits[0], logits[1]),
            param_ids,
        })
    }

    fn block(
        &self,
        tape: &mut Tape,
        ids: &[NodeId],
        cur: &mut Cursor,
        inputs: &[NodeId],
        out_ch: usize,
    ) -> Result<Vec<NodeId>> {
        let mut x = conv_layer(tape, ids, cur, inputs, out_ch)?;
        x = self.norm_act(tape, x)?;
        let mut y = conv_layer(tape, ids, cur, &x, out_ch)?;
        y = self.norm_act(tape, y)?;
        Ok(y)
    }

    fn norm_act(&self, tape: &mut Tape, channels: Vec<NodeId>) -> Result<Vec<NodeId>> {
        channels
            .into_iter()
            .map(|c| {
                let c = if self.cfg.instance_norm {
                    tape.instance_norm(c, NORM_EPS)?
                } else {
                    c
                };
                tape.leaky_relu(c, LEAKY_SLOPE)
            })
            .collect()
    }
}

fn conv_layer(
    tape: &mut Tape,
    ids: &[NodeId],
    cur: &mut Cursor,
    inputs: &[NodeId],
    out_ch: usize,
) -> Result<Vec<NodeId>> {
    let in_ch = inputs.len();
    let mut outs = Vec::with_capacity(out_ch);
    for _ in 0..out_ch {
        let kernels = cur.take(ids, in_ch).to_vec();
        let bias = cur.take(ids, 1)[0];
        outs.push(tape.conv3d_mc(inputs, &kernels, Some(bias))?);
    }
    Ok(outs)
}
