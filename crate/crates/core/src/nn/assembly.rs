//! The four network assemblies and the two detector branches built from them.
//!
//! * [`SparseEnc`]: three stride-2 conv-rectify stages, stride 1 to stride 8.
//! * [`Cma`]: two down blocks, two up blocks and aggregation side paths,
//!   producing two densified stride-8 maps.
//! * [`DenseEnc`]: conv-bn-relu down, a block of six conv-bn-relu layers, a
//!   transposed-conv up, then a second six-layer block over the skip concat.
//! * [`CenterHead`]: classification logits per class.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::chain::{Chain, ChainTrace};
use crate::nn::conv::ConvGeom;
use crate::nn::ops::{concat, concat_backward, sigmoid};
use crate::nn::params::ParamStore;
use crate::tensor::FeatureMap;

/// Heatmap probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub pillar_channels: usize,
    /// Widths of the first two sparse-encoder stages; the third emits `channels`.
    pub sparse_widths: [usize; 2],
    pub channels: usize,
    /// Trunk widths of the two CMA down blocks.
    pub cma_widths: [usize; 2],
    pub dense_width: usize,
    pub convblock_depth: usize,
    pub classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::with_channels(8, 16, 2)
    }
}

impl NetConfig {
    /// Widths derived from `channels`: CMA trunk (2C, 4C), dense trunk 2C.
    pub fn with_channels(pillar_channels: usize, channels: usize, classes: usize) -> Self {
        Self {
            pillar_channels,
            sparse_widths: [channels, channels],
            channels,
            cma_widths: [2 * channels, 4 * channels],
            dense_width: 2 * channels,
            convblock_depth: 6,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.pillar_channels,
            self.sparse_widths[0],
            self.sparse_widths[1],
            self.channels,
            self.cma_widths[0],
            self.cma_widths[1],
            self.dense_width,
            self.convblock_depth,
            self.classes,
        ];
        if widths.contains(&0) {
            return Err(Error::Config(format!("network widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

fn conv3(i: usize, o: usize, stride: usize) -> ConvGeom {
    ConvGeom::new(i, o, 3, stride, 1)
}

fn conv1(i: usize, o: usize) -> ConvGeom {
    ConvGeom::new(i, o, 1, 1, 0)
}

fn up2(i: usize, o: usize) -> ConvGeom {
    ConvGeom::new(i, o, 2, 2, 0)
}

fn zeros_for(m: &FeatureMap) -> FeatureMap {
    m.zeros_like()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseEnc {
    chain: Chain,
}

impl SparseEnc {
    pub fn new(cfg: &NetConfig, prefix: &str) -> Self {
        let [w1, w2] = cfg.sparse_widths;
        let chain = Chain::new()
            .conv(format!("{prefix}.stage1"), conv3(cfg.pillar_channels, w1, 2), false)
            .rectify()
            .conv(format!("{prefix}.stage2"), conv3(w1, w2, 2), false)
            .rectify()
            .conv(format!("{prefix}.stage3"), conv3(w2, cfg.channels, 2), false)
            .rectify();
        Self { chain }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.chain.init(store, rng);
    }

    fn check_input(f2d: &FeatureMap) -> Result<()> {
        if f2d.stride() != 1 {
            return Err(Error::Precondition(format!(
                "sparse encoder expects a stride-1 pillar map, got stride {}",
                f2d.stride()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, p: &ParamStore, f2d: &FeatureMap) -> Result<(FeatureMap, ChainTrace)> {
        Self::check_input(f2d)?;
        self.chain.forward(p, f2d)
    }

    pub fn infer(&self, p: &ParamStore, f2d: &FeatureMap) -> Result<FeatureMap> {
        Self::check_input(f2d)?;
        self.chain.infer(p, f2d)
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        trace: &ChainTrace,
        g_out: &FeatureMap,
        grads: &mut ParamStore,
    ) -> Result<FeatureMap> {
        self.chain.backward(p, trace, g_out, grads)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cma {
    side1: Chain,
    down1: Chain,
    down2: Chain,
    up2: Chain,
    agg2: Chain,
    up1: Chain,
    agg1: Chain,
    side2: Chain,
    agg_out: Chain,
    c: usize,
    w1: usize,
}

pub struct CmaTrace {
    side1: ChainTrace,
    down1: ChainTrace,
    down2: ChainTrace,
    up2: ChainTrace,
    agg2: ChainTrace,
    up1: ChainTrace,
    agg1: ChainTrace,
    side2: ChainTrace,
    agg_out: ChainTrace,
}

impl Cma {
    pub fn new(cfg: &NetConfig, prefix: &str) -> Self {
        let c = cfg.channels;
        let [w1, w2] = cfg.cma_widths;
        let down = |name: &str, i: usize, o: usize| {
            Chain::new()
                .conv(format!("{prefix}.{name}.down"), conv3(i, o, 2), true)
                .rectify()
                .conv(format!("{prefix}.{name}.block1"), conv3(o, o, 1), true)
                .rectify()
                .conv(format!("{prefix}.{name}.block2"), conv3(o, o, 1), true)
                .rectify()
        };
        let single = |name: &str, geom: ConvGeom, transposed: bool| {
            let chain = Chain::new();
            let chain = if transposed {
                chain.tconv(format!("{prefix}.{name}"), geom, true)
            } else {
                chain.conv(format!("{prefix}.{name}"), geom, true)
            };
            chain.rectify()
        };
        Self {
            side1: single("side1", conv3(c, c, 1), false),
            down1: down("down1", c, w1),
            down2: down("down2", w1, w2),
            up2: single("up2", up2(w2, w1), true),
            agg2: single("agg2", conv1(2 * w1, w1), false),
            up1: single("up1", up2(w1, c), true),
            agg1: single("agg1", conv1(2 * c, c), false),
            side2: single("side2", conv3(c, c, 1), false),
            agg_out: single("agg_out", conv1(2 * c, c), false),
            c,
            w1,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for chain in [
            &self.side1,
            &self.down1,
            &self.down2,
            &self.up2,
            &self.agg2,
            &self.up1,
            &self.agg1,
            &self.side2,
            &self.agg_out,
        ] {
            chain.init(store, rng);
        }
    }

    fn check_input(f: &FeatureMap) -> Result<()> {
        if !f.height().is_multiple_of(4) || !f.width().is_multiple_of(4) {
            return Err(Error::ShapeMismatch(format!(
                "CMA needs spatial dims divisible by 4, got {}x{}",
                f.height(),
                f.width()
            )));
        }
        Ok(())
    }

    /// Returns `(F_l1, F_l2)`.
    pub fn forward(
        &self,
        p: &ParamStore,
        f_l: &FeatureMap,
    ) -> Result<((FeatureMap, FeatureMap), CmaTrace)> {
        Self::check_input(f_l)?;
        let (s1, side1) = self.side1.forward(p, f_l)?;
        let (d1, down1) = self.down1.forward(p, f_l)?;
        let (d2, down2) = self.down2.forward(p, &d1)?;
        let (u2, up2) = self.up2.forward(p, &d2)?;
        let (a2, agg2) = self.agg2.forward(p, &concat(&d1, &u2)?)?;
        let (u1, up1) = self.up1.forward(p, &a2)?;
        let (mut l1, agg1) = self.agg1.forward(p, &concat(&s1, &u1)?)?;
        let (s2, side2) = self.side2.forward(p, f_l)?;
        let (mut l2, agg_out) = self.agg_out.forward(p, &concat(&l1, &s2)?)?;
        l1.set_geometry_unchecked(f_l.stride(), f_l.meters_per_cell());
        l2.set_geometry_unchecked(f_l.stride(), f_l.meters_per_cell());
        Ok((
            (l1, l2),
            CmaTrace {
                side1,
                down1,
                down2,
                up2,
                agg2,
                up1,
                agg1,
                side2,
                agg_out,
            },
        ))
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        t: &CmaTrace,
        g_l1: Option<&FeatureMap>,
        g_l2: &FeatureMap,
        grads: &mut ParamStore,
    ) -> Result<FeatureMap> {
        let g_cat = self.agg_out.backward(p, &t.agg_out, g_l2, grads)?;
        let (mut g_l1_total, g_s2) = concat_backward(&g_cat, self.c)?;
        if let Some(g) = g_l1 {
            g_l1_total.add_scaled(g, 1.0)?;
        }
        let mut g_f = self.side2.backward(p, &t.side2, &g_s2, grads)?;

        let g_cat = self.agg1.backward(p, &t.agg1, &g_l1_total, grads)?;
        let (g_s1, g_u1) = concat_backward(&g_cat, self.c)?;
        g_f.add_scaled(&self.side1.backward(p, &t.side1, &g_s1, grads)?, 1.0)?;

        let g_a2 = self.up1.backward(p, &t.up1, &g_u1, grads)?;
        let g_cat = self.agg2.backward(p, &t.agg2, &g_a2, grads)?;
        let (mut g_d1, g_u2) = concat_backward(&g_cat, self.w1)?;
        let g_d2 = self.up2.backward(p, &t.up2, &g_u2, grads)?;
        g_d1.add_scaled(&self.down2.backward(p, &t.down2, &g_d2, grads)?, 1.0)?;
        g_f.add_scaled(&self.down1.backward(p, &t.down1, &g_d1, grads)?, 1.0)?;
        Ok(g_f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseEnc {
    first: Chain,
    second: Chain,
    c: usize,
}

pub struct DenseEncTrace {
    first: ChainTrace,
    second: ChainTrace,
}

impl DenseEnc {
    pub fn new(cfg: &NetConfig, prefix: &str) -> Self {
        let (c, w) = (cfg.channels, cfg.dense_width);
        let mut first = Chain::new().conv_bn_relu(&format!("{prefix}.pre"), conv3(c, w, 2));
        for k in 0..cfg.convblock_depth {
            first = first.conv_bn_relu(&format!("{prefix}.block1.{k}"), conv3(w, w, 1));
        }
        let first = first
            .tconv(format!("{prefix}.up.conv"), up2(w, c), false)
            .affine(format!("{prefix}.up.bn"), c)
            .rectify();
        let mut second = Chain::new();
        for k in 0..cfg.convblock_depth {
            let i = if k == 0 { 2 * c } else { c };
            second = second.conv_bn_relu(&format!("{prefix}.block2.{k}"), conv3(i, c, 1));
        }
        Self { first, second, c }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.first.init(store, rng);
        self.second.init(store, rng);
    }

    /// Returns `(F_h1, F_h2)`.
    pub fn forward(
        &self,
        p: &ParamStore,
        f_in: &FeatureMap,
    ) -> Result<((FeatureMap, FeatureMap), DenseEncTrace)> {
        if !f_in.height().is_multiple_of(2) || !f_in.width().is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!(
                "dense encoder needs even spatial dims, got {}x{}",
                f_in.height(),
                f_in.width()
            )));
        }
        let (mut h1, first) = self.first.forward(p, f_in)?;
        h1.set_geometry_unchecked(f_in.stride(), f_in.meters_per_cell());
        let (mut h2, second) = self.second.forward(p, &concat(&h1, f_in)?)?;
        h2.set_geometry_unchecked(f_in.stride(), f_in.meters_per_cell());
        Ok(((h1, h2), DenseEncTrace { first, second }))
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        t: &DenseEncTrace,
        g_h1: Option<&FeatureMap>,
        g_h2: &FeatureMap,
        grads: &mut ParamStore,
    ) -> Result<FeatureMap> {
        let g_cat = self.second.backward(p, &t.second, g_h2, grads)?;
        let (mut g_h1_total, mut g_in) = concat_backward(&g_cat, self.c)?;
        if let Some(g) = g_h1 {
            g_h1_total.add_scaled(g, 1.0)?;
        }
        g_in.add_scaled(&self.first.backward(p, &t.first, &g_h1_total, grads)?, 1.0)?;
        Ok(g_in)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterHead {
    chain: Chain,
}

impl CenterHead {
    pub fn new(cfg: &NetConfig, prefix: &str) -> Self {
        let c = cfg.channels;
        let chain = Chain::new()
            .conv(format!("{prefix}.shared"), conv3(c, c, 1), true)
            .rectify()
            .conv(format!("{prefix}.cls"), conv1(c, cfg.classes), true);
        Self { chain }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.chain.init(store, rng);
    }

    /// Returns classification logits; see [`logistic`] for probabilities.
    pub fn forward(&self, p: &ParamStore, f_h2: &FeatureMap) -> Result<(FeatureMap, ChainTrace)> {
        let (mut logits, trace) = self.chain.forward(p, f_h2)?;
        logits.set_geometry_unchecked(f_h2.stride(), f_h2.meters_per_cell());
        Ok((logits, trace))
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        t: &ChainTrace,
        g_logits: &FeatureMap,
        grads: &mut ParamStore,
    ) -> Result<FeatureMap> {
        self.chain.backward(p, t, g_logits, grads)
    }
}

/// Elementwise logistic, clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn logistic(logits: &FeatureMap) -> FeatureMap {
    let mut out = logits.clone();
    out.values_mut()
        .iter_mut()
        .for_each(|v| *v = sigmoid(*v).clamp(PROB_EPS, 1.0 - PROB_EPS));
    out
}

/// VJP of [`logistic`] given its output; clamped entries pass nothing.
pub fn logistic_backward(probs: &FeatureMap, upstream: &FeatureMap) -> Result<FeatureMap> {
    probs.ensure_same_shape(upstream, "logistic backward")?;
    let values = probs
        .values()
        .iter()
        .zip(upstream.values())
        .map(|(&s, &g)| {
            if s <= PROB_EPS || s >= 1.0 - PROB_EPS {
                0.0
            } else {
                g * s * (1.0 - s)
            }
        })
        .collect();
    upstream.with_values(values)
}

/// Which modality a branch consumes. The radar branch carries the CMA densifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchKind {
    Teacher,
    Student,
}

/// One full detector: SparseEnc, optional CMA, DenseEnc and CenterHead.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub kind: BranchKind,
    pub sparse_enc: SparseEnc,
    pub cma: Option<Cma>,
    pub dense_enc: DenseEnc,
    pub head: CenterHead,
}

#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub f_l: FeatureMap,
    pub l1: Option<FeatureMap>,
    pub l2: Option<FeatureMap>,
    pub h1: FeatureMap,
    pub h2: FeatureMap,
    pub logits: FeatureMap,
    pub heatmap: FeatureMap,
}

impl BranchOutputs {
    /// The low-level map fed to the dense encoder.
    pub fn dense_input(&self) -> &FeatureMap {
        self.l2.as_ref().unwrap_or(&self.f_l)
    }
}

pub struct BranchTrace {
    sparse: ChainTrace,
    cma: Option<CmaTrace>,
    dense: DenseEncTrace,
    head: ChainTrace,
}

/// Upstream gradients into a branch's outputs; `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct BranchGrads {
    pub l1: Option<FeatureMap>,
    pub l2: Option<FeatureMap>,
    pub h1: Option<FeatureMap>,
    pub h2: Option<FeatureMap>,
    pub logits: Option<FeatureMap>,
}

impl Branch {
    pub fn new(cfg: &NetConfig, kind: BranchKind) -> Self {
        Self {
            kind,
            sparse_enc: SparseEnc::new(cfg, "sparse_enc"),
            cma: match kind {
                BranchKind::Teacher => None,
                BranchKind::Student => Some(Cma::new(cfg, "cma")),
            },
            dense_enc: DenseEnc::new(cfg, "dense_enc"),
            head: CenterHead::new(cfg, "head"),
        }
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.sparse_enc.init(&mut store, &mut rng);
        if let Some(cma) = &self.cma {
            cma.init(&mut store, &mut rng);
        }
        self.dense_enc.init(&mut store, &mut rng);
        self.head.init(&mut store, &mut rng);
        store
    }

    pub fn forward(&self, p: &ParamStore, f2d: &FeatureMap) -> Result<(BranchOutputs, BranchTrace)> {
        // rectify maps NaN to zero, so a bad input would otherwise vanish silently
        if !f2d.all_finite() {
            return Err(Error::NumericInstability("non-finite branch input".into()));
        }
        let (f_l, sparse) = self.sparse_enc.forward(p, f2d)?;
        let (l1, l2, cma) = match &self.cma {
            Some(cma) => {
                let ((l1, l2), t) = cma.forward(p, &f_l)?;
                (Some(l1), Some(l2), Some(t))
            }
            None => (None, None, None),
        };
        let dense_in = l2.as_ref().unwrap_or(&f_l);
        let ((h1, h2), dense) = self.dense_enc.forward(p, dense_in)?;
        let (logits, head) = self.head.forward(p, &h2)?;
        let heatmap = logistic(&logits);
        Ok((
            BranchOutputs {
                f_l,
                l1,
                l2,
                h1,
                h2,
                logits,
                heatmap,
            },
            BranchTrace {
                sparse,
                cma,
                dense,
                head,
            },
        ))
    }

    /// Parameter gradients for the given upstream gradients.
    pub fn backward(
        &self,
        p: &ParamStore,
        t: &BranchTrace,
        out: &BranchOutputs,
        up: &BranchGrads,
    ) -> Result<ParamStore> {
        let mut grads = p.zeros_like();
        let mut g_h2 = match &up.logits {
            Some(g) => self.head.backward(p, &t.head, g, &mut grads)?,
            None => zeros_for(&out.h2),
        };
        if let Some(g) = &up.h2 {
            g_h2.add_scaled(g, 1.0)?;
        }
        let mut g_low = self
            .dense_enc
            .backward(p, &t.dense, up.h1.as_ref(), &g_h2, &mut grads)?;
        let g_f_l = match (&self.cma, &t.cma) {
            (Some(cma), Some(ct)) => {
                if let Some(g) = &up.l2 {
                    g_low.add_scaled(g, 1.0)?;
                }
                cma.backward(p, ct, up.l1.as_ref(), &g_low, &mut grads)?
            }
            _ => g_low,
        };
        self.sparse_enc.backward(p, &t.sparse, &g_f_l, &mut grads)?;
        Ok(grads)
    }
}
