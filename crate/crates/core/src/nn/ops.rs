//! Pointwise and structural ops with their vector-Jacobian products.

use crate::error::{Error, Result};
use crate::nn::conv::{conv2d_backward, conv2d_forward, ConvParams};
use crate::tensor::FeatureMap;

pub fn rectify(x: &FeatureMap) -> FeatureMap {
    let mut out = x.clone();
    out.values_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Passes `upstream` where the input was strictly positive; the kink gets slope 0.
pub fn rectify_backward(x: &FeatureMap, upstream: &FeatureMap) -> Result<FeatureMap> {
    x.ensure_same_shape(upstream, "rectify backward")?;
    let values = x
        .values()
        .iter()
        .zip(upstream.values())
        .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
        .collect();
    upstream.with_values(values)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_map(x: &FeatureMap) -> FeatureMap {
    let mut out = x.clone();
    out.values_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
    out
}

/// Stacks `a` on top of `b` along channels. Geometry follows `a`.
pub fn concat(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::ShapeMismatch(format!(
            "concat spatial dims {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut values = Vec::with_capacity(a.len() + b.len());
    values.extend_from_slice(a.values());
    values.extend_from_slice(b.values());
    let out = FeatureMap::from_vec(a.channels() + b.channels(), a.height(), a.width(), values)?;
    out.with_geometry(a.stride(), a.meters_per_cell())
}

/// Splits a concatenated gradient back into the `a` and `b` parts.
pub fn concat_backward(
    upstream: &FeatureMap,
    a_channels: usize,
) -> Result<(FeatureMap, FeatureMap)> {
    if a_channels == 0 || a_channels >= upstream.channels() {
        return Err(Error::ShapeMismatch(format!(
            "cannot split {} channels at {a_channels}",
            upstream.channels()
        )));
    }
    let n = a_channels * upstream.cells();
    let (h, w) = (upstream.height(), upstream.width());
    let ga = FeatureMap::from_vec(a_channels, h, w, upstream.values()[..n].to_vec())?
        .with_geometry(upstream.stride(), upstream.meters_per_cell())?;
    let gb = FeatureMap::from_vec(
        upstream.channels() - a_channels,
        h,
        w,
        upstream.values()[n..].to_vec(),
    )?
    .with_geometry(upstream.stride(), upstream.meters_per_cell())?;
    Ok((ga, gb))
}

/// `1x1` convolution over `concat(a, b)`.
pub fn aggregate(params: &ConvParams, a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    if params.geom.kh != 1 || params.geom.kw != 1 {
        return Err(Error::InvalidShape("aggregation uses a 1x1 kernel".into()));
    }
    conv2d_forward(&concat(a, b)?, &params.kernel, Some(&params.bias), &params.geom)
}

pub struct AggregateGrads {
    pub a: FeatureMap,
    pub b: FeatureMap,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn aggregate_backward(
    params: &ConvParams,
    a: &FeatureMap,
    b: &FeatureMap,
    upstream: &FeatureMap,
) -> Result<AggregateGrads> {
    let g = conv2d_backward(&concat(a, b)?, &params.kernel, &params.geom, upstream)?;
    let (ga, gb) = concat_backward(&g.input, a.channels())?;
    Ok(AggregateGrads {
        a: ga,
        b: gb,
        weight: g.weight,
        bias: g.bias,
    })
}

/// Per-channel `scale * x + shift`, standing in for batch normalization at batch size one.
pub fn channel_affine(x: &FeatureMap, scale: &[f64], shift: &[f64]) -> Result<FeatureMap> {
    if scale.len() != x.channels() || shift.len() != x.channels() {
        return Err(Error::ShapeMismatch(format!(
            "affine parameters of length {}/{} for {} channels",
            scale.len(),
            shift.len(),
            x.channels()
        )));
    }
    let mut out = x.clone();
    for c in 0..x.channels() {
        let (s, t) = (scale[c], shift[c]);
        out.channel_mut(c).iter_mut().for_each(|v| *v = s * *v + t);
    }
    Ok(out)
}

/// Returns `(input grad, scale grad, shift grad)`.
pub fn channel_affine_backward(
    x: &FeatureMap,
    scale: &[f64],
    upstream: &FeatureMap,
) -> Result<(FeatureMap, Vec<f64>, Vec<f64>)> {
    x.ensure_same_shape(upstream, "affine backward")?;
    let mut gx = upstream.clone();
    let mut gs = vec![0.0; x.channels()];
    let mut gt = vec![0.0; x.channels()];
    for c in 0..x.channels() {
        let xc = x.channel(c);
        let gc = upstream.channel(c);
        gs[c] = xc.iter().zip(gc).map(|(a, b)| a * b).sum();
        gt[c] = gc.iter().sum();
        gx.channel_mut(c).iter_mut().for_each(|v| *v *= scale[c]);
    }
    Ok((gx, gs, gt))
}
