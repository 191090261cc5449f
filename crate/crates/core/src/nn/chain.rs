//! Sequential block lists evaluated against a [`ParamStore`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::conv::{
    conv2d_backward, conv2d_forward, tconv2d_backward, tconv2d_forward, ConvGeom,
};
use crate::nn::ops::{channel_affine, channel_affine_backward, rectify, rectify_backward};
use crate::nn::params::{Param, ParamStore};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Conv { name: String, geom: ConvGeom, bias: bool },
    TConv { name: String, geom: ConvGeom, bias: bool },
    /// Learnable per-channel scale and shift.
    Affine { name: String, channels: usize },
    Rectify,
}

impl Block {
    fn weight_key(name: &str) -> String {
        format!("{name}.weight")
    }
    fn bias_key(name: &str) -> String {
        format!("{name}.bias")
    }
    fn scale_key(name: &str) -> String {
        format!("{name}.scale")
    }
    fn shift_key(name: &str) -> String {
        format!("{name}.shift")
    }
}

/// Activations recorded during a forward pass; entry `k` is the input of block `k`.
#[derive(Debug, Clone)]
pub struct ChainTrace {
    inputs: Vec<FeatureMap>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Chain {
    pub blocks: Vec<Block>,
}

impl Chain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn conv(mut self, name: impl Into<String>, geom: ConvGeom, bias: bool) -> Self {
        self.blocks.push(Block::Conv {
            name: name.into(),
            geom,
            bias,
        });
        self
    }

    pub fn tconv(mut self, name: impl Into<String>, geom: ConvGeom, bias: bool) -> Self {
        self.blocks.push(Block::TConv {
            name: name.into(),
            geom,
            bias,
        });
        self
    }

    pub fn affine(mut self, name: impl Into<String>, channels: usize) -> Self {
        self.blocks.push(Block::Affine {
            name: name.into(),
            channels,
        });
        self
    }

    pub fn rectify(mut self) -> Self {
        self.blocks.push(Block::Rectify);
        self
    }

    /// Conv (no bias) -> affine -> rectify.
    pub fn conv_bn_relu(self, name: &str, geom: ConvGeom) -> Self {
        let ch = geom.out_ch;
        self.conv(format!("{name}.conv"), geom, false)
            .affine(format!("{name}.bn"), ch)
            .rectify()
    }

    /// Registers this chain's parameters with Kaiming-uniform fan-in kernels,
    /// zero biases and shifts, and unit scales.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for block in &self.blocks {
            match block {
                Block::Conv { name, geom, bias } | Block::TConv { name, geom, bias } => {
                    let mut fan_in = geom.in_ch * geom.kh * geom.kw;
                    if matches!(block, Block::TConv { .. }) {
                        fan_in = (fan_in / (geom.stride * geom.stride)).max(1);
                    }
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let data = (0..geom.weight_len())
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    store.insert(
                        Block::weight_key(name),
                        Param {
                            shape: vec![geom.out_ch, geom.in_ch, geom.kh, geom.kw],
                            data,
                        },
                    );
                    if *bias {
                        store.insert(Block::bias_key(name), Param::zeros(vec![geom.out_ch]));
                    }
                }
                Block::Affine { name, channels } => {
                    store.insert(
                        Block::scale_key(name),
                        Param {
                            shape: vec![*channels],
                            data: vec![1.0; *channels],
                        },
                    );
                    store.insert(Block::shift_key(name), Param::zeros(vec![*channels]));
                }
                Block::Rectify => {}
            }
        }
    }

    pub fn forward(&self, params: &ParamStore, x: &FeatureMap) -> Result<(FeatureMap, ChainTrace)> {
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for block in &self.blocks {
            let next = apply(block, params, &cur)?;
            inputs.push(cur);
            cur = next;
        }
        Ok((cur, ChainTrace { inputs }))
    }

    pub fn infer(&self, params: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
        let mut cur = x.clone();
        for block in &self.blocks {
            cur = apply(block, params, &cur)?;
        }
        Ok(cur)
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(
        &self,
        params: &ParamStore,
        trace: &ChainTrace,
        upstream: &FeatureMap,
        grads: &mut ParamStore,
    ) -> Result<FeatureMap> {
        if trace.inputs.len() != self.blocks.len() {
            return Err(Error::ShapeMismatch("trace does not belong to this chain".into()));
        }
        let mut g = upstream.clone();
        for (block, x) in self.blocks.iter().zip(&trace.inputs).rev() {
            g = match block {
                Block::Conv { name, geom, bias } => {
                    let w = params.data(&Block::weight_key(name))?;
                    let cg = conv2d_backward(x, w, geom, &g)?;
                    grads.accumulate(&Block::weight_key(name), &cg.weight)?;
                    if *bias {
                        grads.accumulate(&Block::bias_key(name), &cg.bias)?;
                    }
                    cg.input
                }
                Block::TConv { name, geom, bias } => {
                    let w = params.data(&Block::weight_key(name))?;
                    let cg = tconv2d_backward(x, w, geom, &g)?;
                    grads.accumulate(&Block::weight_key(name), &cg.weight)?;
                    if *bias {
                        grads.accumulate(&Block::bias_key(name), &cg.bias)?;
                    }
                    cg.input
                }
                Block::Affine { name, .. } => {
                    let scale = params.data(&Block::scale_key(name))?;
                    let (gx, gs, gt) = channel_affine_backward(x, scale, &g)?;
                    grads.accumulate(&Block::scale_key(name), &gs)?;
                    grads.accumulate(&Block::shift_key(name), &gt)?;
                    gx
                }
                Block::Rectify => rectify_backward(x, &g)?,
            };
        }
        Ok(g)
    }
}

fn apply(block: &Block, params: &ParamStore, x: &FeatureMap) -> Result<FeatureMap> {
    match block {
        Block::Conv { name, geom, bias } => {
            let w = params.data(&Block::weight_key(name))?;
            let b = if *bias {
                Some(params.data(&Block::bias_key(name))?)
            } else {
                None
            };
            conv2d_forward(x, w, b, geom)
        }
        Block::TConv { name, geom, bias } => {
            let w = params.data(&Block::weight_key(name))?;
            let b = if *bias {
                Some(params.data(&Block::bias_key(name))?)
            } else {
                None
            };
            tconv2d_forward(x, w, b, geom)
        }
        Block::Affine { name, .. } => channel_affine(
            x,
            params.data(&Block::scale_key(name))?,
            params.data(&Block::shift_key(name))?,
        ),
        Block::Rectify => Ok(rectify(x)),
    }
}
