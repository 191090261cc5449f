//! Direct 2D cross-correlation and transposed convolution with zero padding.
//!
//! Kernels are laid out `(out_ch, in_ch, kh, kw)` for both directions.

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kh: k,
            kw: k,
            stride,
            padding,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kh * self.kw
    }

    fn check(&self, x: &FeatureMap, weight: &[f64], bias: Option<&[f64]>) -> Result<()> {
        if self.stride == 0 || self.kh == 0 || self.kw == 0 {
            return Err(Error::InvalidShape(format!("degenerate conv geometry {self:?}")));
        }
        if x.channels() != self.in_ch {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_ch,
                x.channels()
            )));
        }
        if weight.len() != self.weight_len() {
            return Err(Error::ShapeMismatch(format!(
                "kernel has {} values, geometry needs {}",
                weight.len(),
                self.weight_len()
            )));
        }
        if let Some(b) = bias {
            if b.len() != self.out_ch {
                return Err(Error::ShapeMismatch(format!(
                    "bias has {} values for {} output channels",
                    b.len(),
                    self.out_ch
                )));
            }
        }
        Ok(())
    }

    pub fn conv_out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kh || pw < self.kw {
            return Err(Error::ShapeMismatch(format!(
                "{h}x{w} input too small for {}x{} kernel with padding {}",
                self.kh, self.kw, self.padding
            )));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }

    pub fn tconv_out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = (h - 1) * self.stride + self.kh;
        let ow = (w - 1) * self.stride + self.kw;
        if oh <= 2 * self.padding || ow <= 2 * self.padding {
            return Err(Error::ShapeMismatch("transposed conv output is empty".into()));
        }
        Ok((oh - 2 * self.padding, ow - 2 * self.padding))
    }
}

/// Output indices `o in [lo, hi)` such that `o * stride + k - pad` lands in `[0, n)`.
fn valid_range(out_len: usize, n: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // largest o with o*stride + k - pad <= n - 1
    let hi = if n + pad > k {
        ((n + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Patch matrix with one row of `in_ch * kh * kw` taps per output pixel; padding reads as zero.
fn im2col(x: &FeatureMap, g: &ConvGeom, oh: usize, ow: usize) -> Vec<f64> {
    let (h, w) = (x.height(), x.width());
    let k = g.in_ch * g.kh * g.kw;
    let (s, p) = (g.stride, g.padding);
    let mut col = vec![0.0; oh * ow * k];
    for ic in 0..g.in_ch {
        let xin = x.channel(ic);
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(oh, h, ky, s, p);
            for kx in 0..g.kw {
                let tap = (ic * g.kh + ky) * g.kw + kx;
                let (ox_lo, ox_hi) = valid_range(ow, w, kx, s, p);
                for oy in oy_lo..oy_hi {
                    let row = (oy * s + ky - p) * w;
                    for ox in ox_lo..ox_hi {
                        col[(oy * ow + ox) * k + tap] = xin[row + ox * s + kx - p];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto the input grid.
fn col2im(col: &[f64], gx: &mut FeatureMap, g: &ConvGeom, oh: usize, ow: usize) {
    let (h, w) = (gx.height(), gx.width());
    let k = g.in_ch * g.kh * g.kw;
    let (s, p) = (g.stride, g.padding);
    for ic in 0..g.in_ch {
        let gin = gx.channel_mut(ic);
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(oh, h, ky, s, p);
            for kx in 0..g.kw {
                let tap = (ic * g.kh + ky) * g.kw + kx;
                let (ox_lo, ox_hi) = valid_range(ow, w, kx, s, p);
                for oy in oy_lo..oy_hi {
                    let row = (oy * s + ky - p) * w;
                    for ox in ox_lo..ox_hi {
                        gin[row + ox * s + kx - p] += col[(oy * ow + ox) * k + tap];
                    }
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn conv2d_forward(
    x: &FeatureMap,
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Result<FeatureMap> {
    g.check(x, weight, bias)?;
    let (oh, ow) = g.conv_out_dims(x.height(), x.width())?;
    let mut out = FeatureMap::zeros(g.out_ch, oh, ow)?;
    out.set_geometry_unchecked(x.stride() * g.stride, x.meters_per_cell() * g.stride as f64);
    let k = g.in_ch * g.kh * g.kw;
    let col = im2col(x, g, oh, ow);
    for oc in 0..g.out_ch {
        let wrow = &weight[oc * k..(oc + 1) * k];
        let b = bias.map_or(0.0, |b| b[oc]);
        let plane = out.channel_mut(oc);
        for (px, o) in plane.iter_mut().enumerate() {
            *o = b + dot(wrow, &col[px * k..(px + 1) * k]);
        }
    }
    Ok(out)
}

/// Gradients of a convolution: `(input, kernel, bias)`.
pub struct ConvGrads {
    pub input: FeatureMap,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    x: &FeatureMap,
    weight: &[f64],
    g: &ConvGeom,
    upstream: &FeatureMap,
) -> Result<ConvGrads> {
    g.check(x, weight, None)?;
    let (oh, ow) = g.conv_out_dims(x.height(), x.width())?;
    if upstream.shape() != (g.out_ch, oh, ow) {
        return Err(Error::ShapeMismatch(format!(
            "conv upstream {:?}, expected {:?}",
            upstream.shape(),
            (g.out_ch, oh, ow)
        )));
    }
    let k = g.in_ch * g.kh * g.kw;
    let col = im2col(x, g, oh, ow);
    let mut gcol = vec![0.0; col.len()];
    let mut gw = vec![0.0; g.weight_len()];
    let gb: Vec<f64> = (0..g.out_ch).map(|oc| upstream.channel(oc).iter().sum()).collect();
    for oc in 0..g.out_ch {
        let gout = upstream.channel(oc);
        let wrow = &weight[oc * k..(oc + 1) * k];
        let gwrow = &mut gw[oc * k..(oc + 1) * k];
        for (px, &go) in gout.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            axpy(gwrow, go, &col[px * k..(px + 1) * k]);
            axpy(&mut gcol[px * k..(px + 1) * k], go, wrow);
        }
    }
    let mut gx = x.zeros_like();
    col2im(&gcol, &mut gx, g, oh, ow);
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

pub fn tconv2d_forward(
    x: &FeatureMap,
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Result<FeatureMap> {
    g.check(x, weight, bias)?;
    let (h, w) = (x.height(), x.width());
    let (oh, ow) = g.tconv_out_dims(h, w)?;
    let mut out = FeatureMap::zeros(g.out_ch, oh, ow)?;
    let stride = if x.stride().is_multiple_of(g.stride) {
        x.stride() / g.stride
    } else {
        1
    };
    out.set_geometry_unchecked(stride, x.meters_per_cell() / g.stride as f64);
    let (s, p) = (g.stride, g.padding);
    for oc in 0..g.out_ch {
        let plane = out.channel_mut(oc);
        if let Some(b) = bias {
            plane.fill(b[oc]);
        }
        for ic in 0..g.in_ch {
            let xin = x.channel(ic);
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = weight[((oc * g.in_ch + ic) * g.kh + ky) * g.kw + kx];
                    for iy in 0..h {
                        let oy = iy * s + ky;
                        if oy < p || oy - p >= oh {
                            continue;
                        }
                        let oy = oy - p;
                        for ix in 0..w {
                            let ox = ix * s + kx;
                            if ox < p || ox - p >= ow {
                                continue;
                            }
                            plane[oy * ow + ox - p] += wv * xin[iy * w + ix];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn tconv2d_backward(
    x: &FeatureMap,
    weight: &[f64],
    g: &ConvGeom,
    upstream: &FeatureMap,
) -> Result<ConvGrads> {
    g.check(x, weight, None)?;
    let (h, w) = (x.height(), x.width());
    let (oh, ow) = g.tconv_out_dims(h, w)?;
    if upstream.shape() != (g.out_ch, oh, ow) {
        return Err(Error::ShapeMismatch(format!(
            "tconv upstream {:?}, expected {:?}",
            upstream.shape(),
            (g.out_ch, oh, ow)
        )));
    }
    let (s, p) = (g.stride, g.padding);
    let mut gx = x.zeros_like();
    let mut gw = vec![0.0; g.weight_len()];
    let gb: Vec<f64> = (0..g.out_ch).map(|oc| upstream.channel(oc).iter().sum()).collect();
    for oc in 0..g.out_ch {
        let gout = upstream.channel(oc);
        for ic in 0..g.in_ch {
            let xin = x.channel(ic);
            let gin = gx.channel_mut(ic);
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let widx = ((oc * g.in_ch + ic) * g.kh + ky) * g.kw + kx;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for iy in 0..h {
                        let oy = iy * s + ky;
                        if oy < p || oy - p >= oh {
                            continue;
                        }
                        let oy = oy - p;
                        for ix in 0..w {
                            let ox = ix * s + kx;
                            if ox < p || ox - p >= ow {
                                continue;
                            }
                            let go = gout[oy * ow + ox - p];
                            acc += go * xin[iy * w + ix];
                            gin[iy * w + ix] += wv * go;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// An owned convolution layer: kernel, bias and geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub geom: ConvGeom,
}

impl ConvParams {
    pub fn new(geom: ConvGeom, kernel: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if kernel.len() != geom.weight_len() || bias.len() != geom.out_ch {
            return Err(Error::ShapeMismatch(format!(
                "kernel/bias sizes {}/{} do not match {geom:?}",
                kernel.len(),
                bias.len()
            )));
        }
        if kernel.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Domain("conv parameters must be finite".into()));
        }
        Ok(Self { kernel, bias, geom })
    }

    /// `1x1` identity over `channels`.
    pub fn identity(channels: usize) -> Self {
        let geom = ConvGeom::new(channels, channels, 1, 1, 0);
        let mut kernel = vec![0.0; geom.weight_len()];
        for c in 0..channels {
            kernel[c * channels + c] = 1.0;
        }
        Self {
            kernel,
            bias: vec![0.0; channels],
            geom,
        }
    }
}

pub fn conv2d(params: &ConvParams, x: &FeatureMap) -> Result<FeatureMap> {
    conv2d_forward(x, &params.kernel, Some(&params.bias), &params.geom)
}

pub fn tconv2d(params: &ConvParams, x: &FeatureMap) -> Result<FeatureMap> {
    tconv2d_forward(x, &params.kernel, Some(&params.bias), &params.geom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop reference, independent of the range bookkeeping above.
    fn conv_oracle(x: &FeatureMap, p: &ConvParams) -> Vec<f64> {
        let g = p.geom;
        let (h, w) = (x.height() as isize, x.width() as isize);
        let (oh, ow) = g.conv_out_dims(x.height(), x.width()).unwrap();
        let mut out = vec![0.0; g.out_ch * oh * ow];
        for oc in 0..g.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = p.bias[oc];
                    for ic in 0..g.in_ch {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                    continue;
                                }
                                acc += p.kernel[((oc * g.in_ch + ic) * g.kh + ky) * g.kw + kx]
                                    * x.get(ic, iy as usize, ix as usize).unwrap();
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn random_params(geom: ConvGeom, rng: &mut ChaCha8Rng) -> ConvParams {
        use rand::Rng;
        let kernel = (0..geom.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = (0..geom.out_ch).map(|_| rng.random_range(-1.0..1.0)).collect();
        ConvParams::new(geom, kernel, bias).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = FeatureMap::random_uniform(3, 4, 5, -1.0, 1.0, &mut rng).unwrap();
        let y = conv2d(&ConvParams::identity(3), &x).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn scaling_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = FeatureMap::random_uniform(1, 3, 3, -1.0, 1.0, &mut rng).unwrap();
        let p = ConvParams::new(ConvGeom::new(1, 1, 1, 1, 0), vec![2.0], vec![0.0]).unwrap();
        let y = conv2d(&p, &x).unwrap();
        assert_eq!(y.values(), x.scaled(2.0).values());
    }

    #[test]
    fn random_3x3_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, padding) in [(1, 1), (2, 1), (1, 0), (2, 0), (3, 2)] {
            let x = FeatureMap::random_uniform(2, 5, 5, -1.0, 1.0, &mut rng).unwrap();
            let p = random_params(ConvGeom::new(2, 3, 3, stride, padding), &mut rng);
            let y = conv2d(&p, &x).unwrap();
            let want = conv_oracle(&x, &p);
            for (a, b) in y.values().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12, "stride {stride} pad {padding}");
            }
        }
    }

    #[test]
    fn stride_metadata() {
        let x = FeatureMap::zeros(1, 16, 16)
            .unwrap()
            .with_geometry(2, 0.9)
            .unwrap();
        let p = ConvParams::new(ConvGeom::new(1, 1, 3, 2, 1), vec![0.0; 9], vec![0.0]).unwrap();
        let y = conv2d(&p, &x).unwrap();
        assert_eq!((y.height(), y.width(), y.stride()), (8, 8, 4));
        assert!((y.meters_per_cell() - 1.8).abs() < 1e-12);
        let t = ConvParams::new(ConvGeom::new(1, 1, 2, 2, 0), vec![0.0; 4], vec![0.0]).unwrap();
        let z = tconv2d(&t, &y).unwrap();
        assert_eq!((z.height(), z.width(), z.stride()), (16, 16, 2));
    }

    #[test]
    fn channel_mismatch() {
        let x = FeatureMap::zeros(2, 4, 4).unwrap();
        assert!(matches!(
            conv2d(&ConvParams::identity(3), &x),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn tconv_single_pixel_stamp() {
        let x = FeatureMap::new(1, 1, 1, 1.0).unwrap();
        let k = vec![1.0, 2.0, 3.0, 4.0];
        let p = ConvParams::new(ConvGeom::new(1, 1, 2, 2, 0), k.clone(), vec![0.0]).unwrap();
        let y = tconv2d(&p, &x).unwrap();
        assert_eq!(y.shape(), (1, 2, 2));
        assert_eq!(y.values(), &k[..]);

        // a one-hot at (1, 0) of a 2x2 input lands at rows 2..4, cols 0..2
        let mut x = FeatureMap::zeros(1, 2, 2).unwrap();
        x.set(0, 1, 0, 1.0).unwrap();
        let y = tconv2d(&p, &x).unwrap();
        assert_eq!(y.get(0, 2, 0).unwrap(), 1.0);
        assert_eq!(y.get(0, 3, 1).unwrap(), 4.0);
        assert_eq!(y.values().iter().filter(|v| **v != 0.0).count(), 4);
    }

    #[test]
    fn tconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, tconv(y)> for matching geometry and zero bias
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let geom = ConvGeom::new(2, 3, 2, 2, 0);
        let p = random_params(geom, &mut rng);
        let x = FeatureMap::random_uniform(2, 6, 6, -1.0, 1.0, &mut rng).unwrap();
        let y = FeatureMap::random_uniform(3, 3, 3, -1.0, 1.0, &mut rng).unwrap();
        let cx = conv2d_forward(&x, &p.kernel, None, &geom).unwrap();
        // transpose the kernel layout for the adjoint direction
        let mut kt = vec![0.0; geom.weight_len()];
        for oc in 0..3 {
            for ic in 0..2 {
                for k in 0..4 {
                    kt[(ic * 3 + oc) * 4 + k] = p.kernel[(oc * 2 + ic) * 4 + k];
                }
            }
        }
        let tgeom = ConvGeom::new(3, 2, 2, 2, 0);
        let ty = tconv2d_forward(&y, &kt, None, &tgeom).unwrap();
        let lhs = cx.dot(&y).unwrap();
        let rhs = x.dot(&ty).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
