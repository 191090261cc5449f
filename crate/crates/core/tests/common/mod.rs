//! Random instance generators and naive loop oracles shared by the integration tests.
#![allow(dead_code)]

use bevkd::afd::AfdWeights;
use bevkd::heatmap::{FeatureGeometry, GaussianRule, Heatmap};
use bevkd::pfd::ProposalWeights;
use bevkd::pillar::GridGeometry;
use bevkd::scene::{GtBox, Modality, Point, PointCloud};
use bevkd::FeatureMap;
pub use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn uniform_map(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> FeatureMap {
    let v = (0..c * h * w).map(|_| r.random_range(lo..hi)).collect();
    FeatureMap::from_vec(c, h, w, v).unwrap()
}

/// Nonnegative map where each cell is all-zero with probability `p_empty`.
pub fn sparse_map(r: &mut ChaCha8Rng, c: usize, h: usize, w: usize, p_empty: f64) -> FeatureMap {
    let n = h * w;
    let empty: Vec<bool> = (0..n).map(|_| r.random_bool(p_empty)).collect();
    let mut v = vec![0.0; c * n];
    for ch in 0..c {
        for k in 0..n {
            if !empty[k] {
                // occasional exact zeros inside active cells
                v[ch * n + k] = if r.random_bool(0.2) { 0.0 } else { r.random_range(0.0..2.0) };
            }
        }
    }
    FeatureMap::from_vec(c, h, w, v).unwrap()
}

pub fn random_mask(r: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| r.random_bool(p)).collect()
}

/// Heatmap values in `[0, 1]` with some cells pinned exactly at `sigma`, 0 or 1.
pub fn random_heatmap(r: &mut ChaCha8Rng, k: usize, h: usize, w: usize, sigma: f64) -> Heatmap {
    let v = (0..k * h * w)
        .map(|_| match r.random_range(0..10) {
            0 => sigma,
            1 => 0.0,
            2 => 1.0,
            3..=5 => r.random_range(0.0..2.0 * sigma),
            _ => r.random::<f64>(),
        })
        .collect();
    Heatmap::new(FeatureMap::from_vec(k, h, w, v).unwrap()).unwrap()
}

// ---- distillation oracles ----

pub fn oracle_active(f: &FeatureMap) -> Vec<bool> {
    let (c, h, w) = f.shape();
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                if f.get(ch, i, j).unwrap() != 0.0 {
                    out[i * w + j] = true;
                }
            }
        }
    }
    out
}

/// Per-cell AFD weight grid built straight from the region truth table.
pub fn oracle_afd_grid(radar: &[bool], lidar: &[bool], alpha: f64, beta: f64) -> Vec<f64> {
    let n_ar = radar.iter().zip(lidar).filter(|(r, l)| **r && **l).count();
    let n_ir = radar.iter().zip(lidar).filter(|(r, l)| **r && !**l).count();
    let rho = if n_ir == 0 { 0.0 } else { n_ar as f64 / n_ir as f64 };
    radar
        .iter()
        .zip(lidar)
        .map(|(&r, &l)| match (r, l) {
            (true, true) => alpha,
            (true, false) => rho * beta,
            _ => 0.0,
        })
        .collect()
}

pub fn oracle_afd_loss(lidar: &FeatureMap, radar: &FeatureMap, grid: &[f64]) -> (f64, Vec<f64>) {
    let (c, h, w) = radar.shape();
    let mut loss = 0.0;
    let mut grad = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let wt = grid[i * w + j];
                let d = lidar.get(ch, i, j).unwrap() - radar.get(ch, i, j).unwrap();
                loss += wt * d * d;
                grad[(ch * h + i) * w + j] = -2.0 * wt * d;
            }
        }
    }
    (loss, grad)
}

pub fn afd_weights_from_grid(grid: Vec<f64>, h: usize, w: usize, alpha: f64, beta: f64) -> AfdWeights {
    AfdWeights {
        alpha,
        beta,
        height: h,
        width: w,
        grid,
    }
}

/// `(tp, fp, fn)` per cell, union over classes, with precedence TP over FN over FP.
pub fn oracle_regions(gt: &Heatmap, pred: &Heatmap, sigma: f64) -> (Vec<bool>, Vec<bool>, Vec<bool>) {
    let (k, h, w) = (gt.classes(), gt.height(), gt.width());
    let n = h * w;
    let (mut tp, mut fp, mut fneg) = (vec![false; n], vec![false; n], vec![false; n]);
    for c in 0..k {
        for i in 0..h {
            for j in 0..w {
                let g = gt.get(c, i, j).unwrap();
                let p = pred.get(c, i, j).unwrap();
                let idx = i * w + j;
                if g > sigma && p > sigma {
                    tp[idx] = true;
                }
                if g < sigma && p > sigma {
                    fp[idx] = true;
                }
                if g > sigma && p < sigma {
                    fneg[idx] = true;
                }
            }
        }
    }
    for idx in 0..n {
        if tp[idx] {
            fneg[idx] = false;
            fp[idx] = false;
        } else if fneg[idx] {
            fp[idx] = false;
        }
    }
    (tp, fp, fneg)
}

pub fn oracle_proposal_grid(tp: &[bool], fp: &[bool], fneg: &[bool], l1: f64, l2: f64) -> Vec<f64> {
    let n_pos = tp.iter().zip(fneg).filter(|(a, b)| **a || **b).count();
    let n_fp = fp.iter().filter(|v| **v).count();
    (0..tp.len())
        .map(|k| {
            if tp[k] || fneg[k] {
                l1 / n_pos as f64
            } else if fp[k] {
                l2 / n_fp as f64
            } else {
                0.0
            }
        })
        .collect()
}

pub fn proposal_weights_from_grid(grid: Vec<f64>, h: usize, w: usize, l1: f64, l2: f64) -> ProposalWeights {
    ProposalWeights {
        lambda1: l1,
        lambda2: l2,
        height: h,
        width: w,
        grid,
    }
}

pub fn oracle_softmax(f: &FeatureMap) -> Vec<f64> {
    let (c, h, w) = f.shape();
    let mut s = vec![0.0; c * h * w];
    for i in 0..h {
        for j in 0..w {
            let m = (0..c).map(|ch| f.get(ch, i, j).unwrap()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (f.get(ch, i, j).unwrap() - m).exp()).sum();
            for ch in 0..c {
                s[(ch * h + i) * w + j] = (f.get(ch, i, j).unwrap() - m).exp() / z;
            }
        }
    }
    s
}

/// Softmax-L1 loss and its gradient through the full per-cell softmax Jacobian.
pub fn oracle_pfd_loss(lidar: &FeatureMap, radar: &FeatureMap, grid: &[f64]) -> (f64, Vec<f64>) {
    let (c, h, w) = radar.shape();
    let (sl, sr) = (oracle_softmax(lidar), oracle_softmax(radar));
    let at = |ch: usize, i: usize, j: usize| (ch * h + i) * w + j;
    let mut loss = 0.0;
    let mut grad = vec![0.0; c * h * w];
    for i in 0..h {
        for j in 0..w {
            let wt = grid[i * w + j];
            let mut up = vec![0.0; c];
            for ch in 0..c {
                let d = sl[at(ch, i, j)] - sr[at(ch, i, j)];
                loss += wt * d.abs();
                up[ch] = if wt == 0.0 || d == 0.0 { 0.0 } else { -wt * d.signum() };
            }
            for kk in 0..c {
                let mut g = 0.0;
                for ch in 0..c {
                    let delta = if ch == kk { 1.0 } else { 0.0 };
                    g += up[ch] * sr[at(ch, i, j)] * (delta - sr[at(kk, i, j)]);
                }
                grad[at(kk, i, j)] = g;
            }
        }
    }
    (loss, grad)
}

// ---- detection oracle ----

/// Focal loss value and its derivative w.r.t. logits, via `dL/dp * p(1-p)`.
pub fn oracle_det_loss(pred: &[f64], gt: &[f64]) -> (f64, Vec<f64>) {
    let centers = gt.iter().filter(|g| **g == 1.0).count().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.iter().zip(gt) {
        let (l, dldp) = if g == 1.0 {
            (
                -(1.0 - p).powf(2.0) * p.ln(),
                2.0 * (1.0 - p) * p.ln() - (1.0 - p).powf(2.0) / p,
            )
        } else {
            let wn = (1.0 - g).powf(4.0);
            (
                -wn * p.powf(2.0) * (1.0 - p).ln(),
                -wn * (2.0 * p * (1.0 - p).ln() - p.powf(2.0) / (1.0 - p)),
            )
        };
        loss += l;
        grad.push(dldp * p * (1.0 - p) / centers);
    }
    (loss / centers, grad)
}

// ---- network and encoding oracles ----

/// Direct cross-correlation: kernel layout `[out][in][kh][kw]`, zero padding.
pub fn oracle_conv2d(
    x: &FeatureMap,
    kernel: &[f64],
    bias: &[f64],
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize, Vec<f64>) {
    let (in_ch, h, w) = x.shape();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; out_ch * oh * ow];
    for oc in 0..out_ch {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..in_ch {
                    for di in 0..k {
                        for dj in 0..k {
                            let ii = (oi * stride + di) as isize - pad as isize;
                            let jj = (oj * stride + dj) as isize - pad as isize;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            let wv = kernel[((oc * in_ch + ic) * k + di) * k + dj];
                            acc += wv * x.get(ic, ii as usize, jj as usize).unwrap();
                        }
                    }
                }
                out[(oc * oh + oi) * ow + oj] = acc;
            }
        }
    }
    (oh, ow, out)
}

pub fn random_cloud(r: &mut ChaCha8Rng, geom: &GridGeometry, n: usize, modality: Modality) -> PointCloud {
    let mut cloud = PointCloud::new(modality);
    for _ in 0..n {
        let moving = modality == Modality::Radar;
        cloud.points.push(Point {
            // overshoot the range a little so some points are dropped
            x: r.random_range(geom.range_x.0 - 0.5..geom.range_x.1 + 0.5),
            y: r.random_range(geom.range_y.0 - 0.5..geom.range_y.1 + 0.5),
            z: r.random_range(-1.0..3.0),
            intensity: r.random_range(0.0..5.0),
            vx: if moving { r.random_range(-5.0..5.0) } else { 0.0 },
            vy: if moving { r.random_range(-5.0..5.0) } else { 0.0 },
        });
    }
    cloud
}

/// Pillar statistics computed by scanning the whole cloud once per cell.
pub fn oracle_encode(cloud: &PointCloud, geom: &GridGeometry, channels: usize) -> Vec<f64> {
    let (h, w) = (geom.height(), geom.width());
    let mut out = vec![0.0; channels * h * w];
    for i in 0..h {
        for j in 0..w {
            let mut n = 0usize;
            let (mut si, mut sz, mut sv, mut zmax) = (0.0, 0.0, 0.0, f64::NEG_INFINITY);
            for p in &cloud.points {
                if !(p.x >= geom.range_x.0 && p.x < geom.range_x.1) {
                    continue;
                }
                if !(p.y >= geom.range_y.0 && p.y < geom.range_y.1) {
                    continue;
                }
                let pi = ((p.x - geom.range_x.0) / geom.meters_per_cell).floor() as usize;
                let pj = ((p.y - geom.range_y.0) / geom.meters_per_cell).floor() as usize;
                if (pi.min(h - 1), pj.min(w - 1)) != (i, j) {
                    continue;
                }
                n += 1;
                si += p.intensity;
                sz += p.z;
                sv += (p.vx * p.vx + p.vy * p.vy).sqrt();
                if p.z > zmax {
                    zmax = p.z;
                }
            }
            if n == 0 {
                continue;
            }
            let nf = n as f64;
            let stats = [(1.0 + nf).ln(), si / nf, sz / nf, zmax, sv / nf, 1.0];
            for (c, s) in stats.iter().enumerate() {
                out[(c * h + i) * w + j] = *s;
            }
        }
    }
    out
}

pub fn random_boxes(r: &mut ChaCha8Rng, geom: &GridGeometry, n: usize, classes: u32) -> Vec<GtBox> {
    (0..n)
        .map(|_| GtBox {
            cx: r.random_range(geom.range_x.0 - 1.0..geom.range_x.1 + 1.0),
            cy: r.random_range(geom.range_y.0 - 1.0..geom.range_y.1 + 1.0),
            length: r.random_range(0.5..6.0),
            width: r.random_range(0.5..3.0),
            yaw: r.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            class_id: r.random_range(0..classes),
        })
        .collect()
}

/// Per-cell maximum over every box's truncated Gaussian on its class channel.
pub fn oracle_heatmap(boxes: &[GtBox], geom: &FeatureGeometry, classes: usize, rule: &GaussianRule) -> Vec<f64> {
    let cell = geom.grid.meters_per_cell * geom.stride as f64;
    let (h, w) = (geom.grid.height() / geom.stride, geom.grid.width() / geom.stride);
    let mut out = vec![0.0; classes * h * w];
    for c in 0..classes {
        for i in 0..h {
            for j in 0..w {
                let mut best: f64 = 0.0;
                for b in boxes.iter().filter(|b| b.class_id as usize == c) {
                    let fi = (b.cx - geom.grid.range_x.0) / cell;
                    let fj = (b.cy - geom.grid.range_y.0) / cell;
                    if fi < 0.0 || fj < 0.0 || fi.floor() as usize >= h || fj.floor() as usize >= w {
                        continue;
                    }
                    let (ci, cj) = (fi.floor(), fj.floor());
                    let sigma = (b.length.max(b.width) / (rule.divisor * cell)).max(rule.min_sigma);
                    let r = (rule.window_sigmas * sigma).ceil();
                    let (di, dj) = (i as f64 - ci, j as f64 - cj);
                    if di.abs() > r || dj.abs() > r {
                        continue;
                    }
                    best = best.max((-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp());
                }
                out[(c * h + i) * w + j] = best;
            }
        }
    }
    out
}

/// Small grid whose heatmap is at most 8x8 at stride 8.
pub fn small_grid(r: &mut ChaCha8Rng) -> GridGeometry {
    let cells = (8 * r.random_range(2..=8usize)) as f64;
    let m = 0.45;
    let x0 = r.random_range(-30.0..0.0);
    let y0 = r.random_range(-30.0..0.0);
    GridGeometry {
        range_x: (x0, x0 + cells * m),
        range_y: (y0, y0 + cells * m),
        meters_per_cell: m,
    }
}

/// Each function runs `n` random instances against its loop oracle and returns
/// the largest absolute disagreement (infinite on any structural mismatch).
pub mod checks {
    use super::*;
    use bevkd::afd::{active_mask, afd_loss, afd_weights, partition_low};
    use bevkd::heatmap::render_gt_heatmap;
    use bevkd::loss::{det_loss, det_loss_logits};
    use bevkd::nn::conv::{conv2d, ConvGeom, ConvParams};
    use bevkd::pfd::{partition_high, pfd_loss, proposal_weights};
    use bevkd::pillar::{encode_pillars, pillarize};

    fn dims(r: &mut ChaCha8Rng) -> (usize, usize, usize) {
        (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8))
    }

    pub fn afd(n: usize, seed: u64) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..n as u64 {
            let mut r = rng(seed + s);
            let (c, h, w) = dims(&mut r);
            let lidar = sparse_map(&mut r, c, h, w, 0.4);
            let radar = sparse_map(&mut r, c, h, w, 0.5);
            let (alpha, beta) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
            let (ml, mr) = (active_mask(&lidar).unwrap(), active_mask(&radar).unwrap());
            if ml.bits != oracle_active(&lidar) || mr.bits != oracle_active(&radar) {
                return f64::INFINITY;
            }
            let wts = afd_weights(&partition_low(&mr, &ml).unwrap(), alpha, beta).unwrap();
            let grid = oracle_afd_grid(&mr.bits, &ml.bits, alpha, beta);
            let got = afd_loss(&lidar, &radar, &wts).unwrap();
            let (loss, grad) = oracle_afd_loss(&lidar, &radar, &grid);
            worst = worst
                .max(max_abs_diff(&wts.grid, &grid))
                .max((got.value - loss).abs())
                .max(max_abs_diff(got.grad.values(), &grad));
        }
        worst
    }

    pub fn pfd(n: usize, seed: u64) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..n as u64 {
            let mut r = rng(seed + s);
            let (c, h, w) = dims(&mut r);
            let k = r.random_range(1..=3);
            let sigma = 0.1;
            let gt = random_heatmap(&mut r, k, h, w, sigma);
            let pred = random_heatmap(&mut r, k, h, w, sigma);
            let lidar = uniform_map(&mut r, c, h, w, -3.0, 3.0);
            let radar = uniform_map(&mut r, c, h, w, -3.0, 3.0);
            let (l1, l2) = (r.random_range(0.0..10.0), r.random_range(0.0..10.0));
            let p = partition_high(&gt, &pred, sigma).unwrap();
            let (tp, fp, fneg) = oracle_regions(&gt, &pred, sigma);
            if p.tp != tp || p.fp != fp || p.fn_ != fneg {
                return f64::INFINITY;
            }
            let wts = proposal_weights(&p, l1, l2).unwrap();
            let grid = oracle_proposal_grid(&tp, &fp, &fneg, l1, l2);
            let got = pfd_loss(&lidar, &radar, &wts).unwrap();
            let (loss, grad) = oracle_pfd_loss(&lidar, &radar, &grid);
            worst = worst
                .max(max_abs_diff(&wts.grid, &grid))
                .max((got.value - loss).abs())
                .max(max_abs_diff(got.grad.values(), &grad));
        }
        worst
    }

    pub fn det(n: usize, seed: u64) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..n as u64 {
            let mut r = rng(seed + s);
            let (k, h, w) = dims(&mut r);
            let gt = random_heatmap(&mut r, k, h, w, 0.1);
            let pred: Vec<f64> = (0..k * h * w).map(|_| r.random_range(0.01..0.99)).collect();
            let pm = Heatmap::new(FeatureMap::from_vec(k, h, w, pred.clone()).unwrap()).unwrap();
            let got = det_loss(&pm, &gt).unwrap();
            let (loss, grad) = oracle_det_loss(&pred, gt.values());
            worst = worst
                .max((got.value - loss).abs())
                .max(max_abs_diff(got.grad.values(), &grad));

            let logits = uniform_map(&mut r, k, h, w, -4.0, 4.0);
            let probs: Vec<f64> = logits.values().iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
            let got = det_loss_logits(&logits, &gt).unwrap();
            let (loss, grad) = oracle_det_loss(&probs, gt.values());
            worst = worst
                .max((got.value - loss).abs())
                .max(max_abs_diff(got.grad.values(), &grad));
        }
        worst
    }

    pub fn encode(n: usize, seed: u64) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..n as u64 {
            let mut r = rng(seed + s);
            let m = r.random_range(0.2..1.0);
            let (hc, wc) = (r.random_range(1..=8) as f64, r.random_range(1..=8) as f64);
            let x0 = r.random_range(-10.0..10.0);
            let y0 = r.random_range(-10.0..10.0);
            let geom = GridGeometry {
                range_x: (x0, x0 + hc * m),
                range_y: (y0, y0 + wc * m),
                meters_per_cell: m,
            };
            let modality = if r.random_bool(0.5) { Modality::Lidar } else { Modality::Radar };
            let n_pts = r.random_range(0..60);
            let cloud = random_cloud(&mut r, &geom, n_pts, modality);
            let channels = r.random_range(6..=8);
            let got = encode_pillars(&pillarize(&cloud, &geom).unwrap(), channels).unwrap();
            let want = oracle_encode(&cloud, &geom, channels);
            if got.len() != want.len() {
                return f64::INFINITY;
            }
            worst = worst.max(max_abs_diff(got.values(), &want));
        }
        worst
    }

    pub fn conv(n: usize, seed: u64) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..n as u64 {
            let mut r = rng(seed + s);
            let k = [1, 3, 5][r.random_range(0..3)];
            let (in_ch, out_ch) = (r.random_range(1..=8), r.random_range(1..=8));
            let (h, w) = (r.random_range(k..=8), r.random_range(k..=8));
            let stride = r.random_range(1..=2);
            let pad = r.random_range(0..=k / 2);
            let x = uniform_map(&mut r, in_ch, h, w, -1.0, 1.0);
            let geom = ConvGeom::new(in_ch, out_ch, k, stride, pad);
            let kernel: Vec<f64> = (0..geom.weight_len()).map(|_| r.random_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..out_ch).map(|_| r.random_range(-1.0..1.0)).collect();
            let params = ConvParams::new(geom, kernel.clone(), bias.clone()).unwrap();
            let got = conv2d(&params, &x).unwrap();
            let (oh, ow, want) = oracle_conv2d(&x, &kernel, &bias, out_ch, k, stride, pad);
            if got.shape() != (out_ch, oh, ow) {
                return f64::INFINITY;
            }
            worst = worst.max(max_abs_diff(got.values(), &want));
        }
        worst
    }

    pub fn heatmap(n: usize, seed: u64) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..n as u64 {
            let mut r = rng(seed + s);
            let geom = FeatureGeometry {
                grid: small_grid(&mut r),
                stride: 8,
            };
            let classes = r.random_range(1..=3);
            let rule = GaussianRule {
                divisor: r.random_range(1.0..8.0),
                ..GaussianRule::default()
            };
            let n_boxes = r.random_range(0..6);
            let boxes = random_boxes(&mut r, &geom.grid, n_boxes, classes as u32);
            let got = render_gt_heatmap(&boxes, &geom, classes, &rule).unwrap();
            let want = oracle_heatmap(&boxes, &geom, classes, &rule);
            if got.heatmap.values().len() != want.len() {
                return f64::INFINITY;
            }
            worst = worst.max(max_abs_diff(got.heatmap.values(), &want));
        }
        worst
    }
}
