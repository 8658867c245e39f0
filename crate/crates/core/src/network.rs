//! Detector assembly: stem, RFA stage, four LAE + MatchNeck backbone stages,
//! a four-level PA-FPN neck and decoupled distribution heads.

use std::collections::BTreeMap;
use std::path::Path as FsPath;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{LevelOutput, RawHeadOutput};
use crate::lae::{Lae, LaeConfig};
use crate::msfm::{MatchNeck, MsfmConfig};
use crate::nn::{Conv2d, ConvBnAct, ConvSpec, Ctx, ParamStore, Path, Profiler};
use crate::rfa::{RfaBlock, RfaConfig};

/// Block-level switches; every combination builds a valid model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSwitches {
    pub use_rfablock: bool,
    pub use_lae: bool,
    pub use_msfm: bool,
    pub lae_enable_le: bool,
    pub lae_enable_ae: bool,
    pub lae_enable_dm: bool,
    pub msfm_enable_spatial: bool,
    pub msfm_enable_channel: bool,
}

impl Default for BlockSwitches {
    fn default() -> Self {
        Self {
            use_rfablock: true,
            use_lae: true,
            use_msfm: true,
            lae_enable_le: true,
            lae_enable_ae: true,
            lae_enable_dm: true,
            msfm_enable_spatial: true,
            msfm_enable_channel: true,
        }
    }
}

impl BlockSwitches {
    pub fn all_off() -> Self {
        Self {
            use_rfablock: false,
            use_lae: false,
            use_msfm: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub input_size: usize,
    pub reg_max: usize,
    pub head_strides: [usize; 4],
    pub stem_width: usize,
    /// Backbone output widths at strides 4, 8, 16, 32.
    pub stage_widths: [usize; 4],
    /// MSFM units per backbone MatchNeck.
    pub stage_depths: [usize; 4],
    /// Neck output widths at strides 4, 8, 16, 32.
    pub neck_widths: [usize; 4],
    /// MSFM units per neck MatchNeck.
    pub neck_depth: usize,
    pub head_box_width: usize,
    pub head_cls_width: usize,
    pub rfa_kernel: usize,
    pub lae_groups: usize,
    pub lae_kernel: usize,
    pub msfm_reduction: usize,
    pub blocks: BlockSwitches,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            input_size: 640,
            reg_max: 16,
            head_strides: [4, 8, 16, 32],
            stem_width: 16,
            stage_widths: [48, 96, 208, 416],
            stage_depths: [1, 2, 2, 2],
            neck_widths: [48, 96, 176, 352],
            neck_depth: 1,
            head_box_width: 48,
            head_cls_width: 48,
            rfa_kernel: 3,
            lae_groups: 4,
            lae_kernel: 1,
            msfm_reduction: 2,
            blocks: BlockSwitches::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return bad(format!("input_size {} must be a positive multiple of 32", self.input_size));
        }
        if self.head_strides != [4, 8, 16, 32] {
            return bad(format!("head_strides must be [4, 8, 16, 32], got {:?}", self.head_strides));
        }
        if self.reg_max < 2 {
            return bad("reg_max must be >= 2".into());
        }
        let widths = self
            .stage_widths
            .iter()
            .chain(&self.neck_widths)
            .chain([&self.stem_width]);
        for &w in widths {
            if w == 0 || w % 2 != 0 {
                return bad(format!("width {w} must be even and positive"));
            }
        }
        if self.head_box_width == 0 || self.head_cls_width == 0 {
            return bad("head widths must be positive".into());
        }
        Ok(())
    }

    /// Same topology with every width scaled by `factor` (rounded to a
    /// multiple of `2·lae_groups`).
    pub fn scaled_widths(&self, factor: f64) -> Self {
        let q = 2 * self.lae_groups.max(1);
        let s = |w: usize| (((w as f64 * factor) / q as f64).round() as usize).max(1) * q;
        let mut c = self.clone();
        c.stem_width = s(self.stem_width);
        c.stage_widths = self.stage_widths.map(s);
        c.neck_widths = self.neck_widths.map(s);
        c.head_box_width = s(self.head_box_width);
        c.head_cls_width = s(self.head_cls_width);
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    fn msfm_unit(&self, residual: bool) -> MsfmConfig {
        MsfmConfig {
            channels: 0,
            with_residual: residual,
            reduction: self.msfm_reduction,
            enable_spatial: self.blocks.msfm_enable_spatial,
            enable_channel: self.blocks.msfm_enable_channel,
        }
    }
}

/// Standard residual bottleneck with two 3×3 convolutions.
#[derive(Debug, Clone)]
struct Bottleneck {
    cv1: ConvBnAct,
    cv2: ConvBnAct,
    shortcut: bool,
}

impl Bottleneck {
    fn new(p: &Path, c: usize, shortcut: bool) -> Result<Self> {
        Ok(Self {
            cv1: ConvBnAct::new(&p.pp("cv1"), ConvSpec::new(c, c, 3))?,
            cv2: ConvBnAct::new(&p.pp("cv2"), ConvSpec::new(c, c, 3))?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.cv2.forward(&self.cv1.forward(x, ctx)?, ctx)?;
        if self.shortcut {
            Ok((y + x)?)
        } else {
            Ok(y)
        }
    }
}

/// Cross-stage-partial fusion block used when MSFM is switched off.
#[derive(Debug, Clone)]
struct Csp {
    cv1: ConvBnAct,
    units: Vec<Bottleneck>,
    cv2: ConvBnAct,
    hidden: usize,
}

impl Csp {
    fn new(p: &Path, cin: usize, cout: usize, depth: usize, shortcut: bool) -> Result<Self> {
        let hidden = cout / 2;
        let units = (0..depth)
            .map(|i| Bottleneck::new(&p.pp(format!("m{i}")), hidden, shortcut))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cv1: ConvBnAct::new(&p.pp("cv1"), ConvSpec::new(cin, 2 * hidden, 1))?,
            cv2: ConvBnAct::new(&p.pp("cv2"), ConvSpec::new((2 + depth) * hidden, cout, 1))?,
            units,
            hidden,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.cv1.forward(x, ctx)?;
        let mut parts = vec![y.narrow(1, 0, self.hidden)?, y.narrow(1, self.hidden, self.hidden)?];
        for u in &self.units {
            let next = u.forward(parts.last().expect("non-empty"), ctx)?;
            parts.push(next);
        }
        self.cv2.forward(&Tensor::cat(&parts, 1)?, ctx)
    }
}

#[derive(Debug, Clone)]
enum Fuse {
    Match(MatchNeck),
    Csp(Csp),
}

impl Fuse {
    fn new(
        p: &Path,
        cfg: &ModelConfig,
        cin: usize,
        cout: usize,
        depth: usize,
        residual: bool,
    ) -> Result<Self> {
        if cfg.blocks.use_msfm {
            Ok(Fuse::Match(MatchNeck::new(p, cin, cout, depth, cfg.msfm_unit(residual))?))
        } else {
            Ok(Fuse::Csp(Csp::new(p, cin, cout, depth, residual)?))
        }
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        match self {
            Fuse::Match(m) => m.forward(x, ctx),
            Fuse::Csp(c) => c.forward(x, ctx),
        }
    }
}

#[derive(Debug, Clone)]
enum Down {
    Lae(Lae),
    Conv(ConvBnAct),
}

impl Down {
    fn new(p: &Path, cfg: &ModelConfig, cin: usize, cout: usize) -> Result<Self> {
        if cfg.blocks.use_lae {
            let lae = LaeConfig {
                in_channels: cin,
                out_channels: cout,
                groups: cfg.lae_groups,
                kernel_size: cfg.lae_kernel,
                enable_le: cfg.blocks.lae_enable_le,
                enable_ae: cfg.blocks.lae_enable_ae,
                enable_dm: cfg.blocks.lae_enable_dm,
            };
            Ok(Down::Lae(Lae::new(p, lae)?))
        } else {
            Ok(Down::Conv(ConvBnAct::new(p, ConvSpec::new(cin, cout, 3).stride(2))?))
        }
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        match self {
            Down::Lae(l) => l.forward(x, ctx),
            Down::Conv(c) => c.forward(x, ctx),
        }
    }
}

#[derive(Debug, Clone)]
enum Early {
    Rfa(RfaBlock),
    Conv(ConvBnAct),
}

#[derive(Debug, Clone)]
struct Stage {
    down: Down,
    fuse: Fuse,
}

#[derive(Debug, Clone)]
struct DetectHead {
    box_branch: [ConvBnAct; 2],
    box_out: Conv2d,
    cls_branch: [ConvBnAct; 2],
    cls_out: Conv2d,
}

impl DetectHead {
    fn new(p: &Path, cfg: &ModelConfig, cin: usize) -> Result<Self> {
        let (cb, cc) = (cfg.head_box_width, cfg.head_cls_width);
        let box_out = Conv2d::new(
            &p.pp("box_out"),
            ConvSpec::new(cb, 4 * cfg.reg_max, 1).bias(true),
        )?;
        let cls_out = Conv2d::new(
            &p.pp("cls_out"),
            ConvSpec::new(cc, cfg.num_classes, 1).bias(true),
        )?;
        let store = p.store();
        let prior = (0.01f64 / 0.99).ln();
        store.set(
            &format!("{}.cls_out.bias", p.name()),
            &Tensor::full(prior, cfg.num_classes, store.device())?,
        )?;
        store.set(
            &format!("{}.box_out.bias", p.name()),
            &Tensor::full(1.0f64, 4 * cfg.reg_max, store.device())?,
        )?;
        Ok(Self {
            box_branch: [
                ConvBnAct::new(&p.pp("box0"), ConvSpec::new(cin, cb, 3))?,
                ConvBnAct::new(&p.pp("box1"), ConvSpec::new(cb, cb, 3))?,
            ],
            box_out,
            cls_branch: [
                ConvBnAct::new(&p.pp("cls0"), ConvSpec::new(cin, cc, 3))?,
                ConvBnAct::new(&p.pp("cls1"), ConvSpec::new(cc, cc, 3))?,
            ],
            cls_out,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let b = self.box_branch[1].forward(&self.box_branch[0].forward(x, ctx)?, ctx)?;
        let c = self.cls_branch[1].forward(&self.cls_branch[0].forward(x, ctx)?, ctx)?;
        Ok((self.cls_out.forward(&c, ctx)?, self.box_out.forward(&b, ctx)?))
    }
}

/// Layers whose activations can be tapped (e.g. for activation maps).
pub const TAP_LAYERS: [&str; 10] = [
    "backbone.s0",
    "backbone.s1",
    "backbone.s2",
    "backbone.s3",
    "neck.td0",
    "neck.td1",
    "neck.td2",
    "neck.bu0",
    "neck.bu1",
    "neck.bu2",
];

pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    stem: ConvBnAct,
    early: Early,
    stages: Vec<Stage>,
    top_down: Vec<Fuse>,
    bottom_up: Vec<(ConvBnAct, Fuse)>,
    heads: Vec<DetectHead>,
}

impl Model {
    /// Builds a freshly initialised model; identical seeds give identical bits.
    pub fn build(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let sw = cfg.stem_width;
        let stem = ConvBnAct::new(&root.pp("stem"), ConvSpec::new(3, sw, 3).stride(2))?;
        let early = if cfg.blocks.use_rfablock {
            Early::Rfa(RfaBlock::new(
                &root.pp("rfa"),
                RfaConfig {
                    in_channels: sw,
                    out_channels: sw,
                    kernel_size: cfg.rfa_kernel,
                    stride: 1,
                },
            )?)
        } else {
            Early::Conv(ConvBnAct::new(&root.pp("rfa"), ConvSpec::new(sw, sw, 3))?)
        };
        let bb = root.pp("backbone");
        let mut stages = Vec::with_capacity(4);
        let mut cin = sw;
        for (i, (&w, &d)) in cfg.stage_widths.iter().zip(&cfg.stage_depths).enumerate() {
            let p = bb.pp(format!("s{i}"));
            // Without dimension mapping the LAE keeps its input width and the
            // fusion block that follows takes over the channel change.
            let down_out = if cfg.blocks.use_lae && !cfg.blocks.lae_enable_dm { cin } else { w };
            stages.push(Stage {
                down: Down::new(&p.pp("down"), cfg, cin, down_out)?,
                fuse: Fuse::new(&p.pp("fuse"), cfg, down_out, w, d, true)?,
            });
            cin = w;
        }
        let neck = root.pp("neck");
        let [b0, b1, b2, b3] = cfg.stage_widths;
        let [n2, n3, n4, n5] = cfg.neck_widths;
        let nd = cfg.neck_depth;
        let top_down = vec![
            Fuse::new(&neck.pp("td0"), cfg, b3 + b2, n4, nd, false)?,
            Fuse::new(&neck.pp("td1"), cfg, n4 + b1, n3, nd, false)?,
            Fuse::new(&neck.pp("td2"), cfg, n3 + b0, n2, nd, false)?,
        ];
        let mut bottom_up = Vec::with_capacity(3);
        for (i, (cdown, clat, cout)) in [(n2, n3, n3), (n3, n4, n4), (n4, b3, n5)].into_iter().enumerate() {
            let p = neck.pp(format!("bu{i}"));
            bottom_up.push((
                ConvBnAct::new(&p.pp("down"), ConvSpec::new(cdown, cdown, 3).stride(2))?,
                Fuse::new(&p.pp("fuse"), cfg, cdown + clat, cout, nd, false)?,
            ));
        }
        let heads = cfg
            .neck_widths
            .iter()
            .zip(["p2", "p3", "p4", "p5"])
            .map(|(&c, name)| DetectHead::new(&root.pp("head").pp(name), cfg, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            stem,
            early,
            stages,
            top_down,
            bottom_up,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Sum of element counts over every learnable array.
    pub fn count_params(&self) -> usize {
        self.store.count_learnable()
    }

    /// Forward pass; images must be (b, 3, input_size, input_size).
    pub fn forward(&self, images: &Tensor, ctx: &Ctx) -> Result<RawHeadOutput> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.cfg.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::InputSize {
                expected: s,
                height: h,
                width: w,
            });
        }
        self.forward_any(images, ctx)
    }

    /// Forward pass at any spatial size divisible by 32.
    pub fn forward_any(&self, images: &Tensor, ctx: &Ctx) -> Result<RawHeadOutput> {
        let (_, _, h, w) = images.dims4()?;
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::InputSize {
                expected: self.cfg.input_size,
                height: h,
                width: w,
            });
        }
        let images = images.to_dtype(self.dtype())?;
        let mut x = self.stem.forward(&images, ctx)?;
        x = match &self.early {
            Early::Rfa(r) => r.forward(&x, ctx)?,
            Early::Conv(c) => c.forward(&x, ctx)?,
        };
        let mut feats = Vec::with_capacity(4);
        for (i, st) in self.stages.iter().enumerate() {
            x = st.fuse.forward(&st.down.forward(&x, ctx)?, ctx)?;
            x = ctx.tap(TAP_LAYERS[i], x)?;
            feats.push(x.clone());
        }
        let up = |t: &Tensor| -> Result<Tensor> {
            let (_, _, h, w) = t.dims4()?;
            Ok(t.upsample_nearest2d(h * 2, w * 2)?)
        };
        let mut td = feats[3].clone();
        let mut td_outs = Vec::with_capacity(3);
        for (i, fuse) in self.top_down.iter().enumerate() {
            let lateral = &feats[2 - i];
            td = fuse.forward(&Tensor::cat(&[&up(&td)?, lateral], 1)?, ctx)?;
            td = ctx.tap(TAP_LAYERS[4 + i], td)?;
            td_outs.push(td.clone());
        }
        // td_outs: strides 16, 8, 4
        let mut outs = vec![td.clone()];
        let laterals = [&td_outs[1], &td_outs[0], &feats[3]];
        let mut cur = td;
        for (i, ((down, fuse), lateral)) in self.bottom_up.iter().zip(laterals).enumerate() {
            let d = down.forward(&cur, ctx)?;
            cur = fuse.forward(&Tensor::cat(&[&d, lateral], 1)?, ctx)?;
            cur = ctx.tap(TAP_LAYERS[7 + i], cur)?;
            outs.push(cur.clone());
        }
        let levels = outs
            .iter()
            .zip(&self.heads)
            .zip(self.cfg.head_strides)
            .map(|((f, head), stride)| {
                let (cls, dist) = head.forward(f, ctx)?;
                Ok(LevelOutput { stride, cls, dist })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RawHeadOutput {
            levels,
            num_classes: self.cfg.num_classes,
            reg_max: self.cfg.reg_max,
        })
    }

    /// Multiply-accumulate count ×2 for one image at `input_size`.
    pub fn estimate_flops(&self, input_size: usize) -> Result<u64> {
        Ok(2 * self.profile_macs(input_size)?.values().sum::<u64>())
    }

    /// Per-module multiply-accumulates for one image.
    pub fn profile_macs(&self, input_size: usize) -> Result<BTreeMap<String, u64>> {
        let profiler = Profiler::new();
        let x = Tensor::zeros((1, 3, input_size, input_size), self.dtype(), self.store.device())?;
        self.forward_any(&x, &Ctx::eval().with_profiler(&profiler))?;
        let mut rows = BTreeMap::new();
        for (name, macs) in profiler.rows() {
            *rows.entry(module_key(&name)).or_insert(0) += macs;
        }
        Ok(rows)
    }

    /// Learnable parameter count per module.
    pub fn profile_params(&self) -> BTreeMap<String, usize> {
        let mut rows = BTreeMap::new();
        for e in self.store.learnable() {
            *rows.entry(module_key(&e.name)).or_insert(0) += e.var.elem_count();
        }
        rows
    }
}

/// Module key for profiling breakdowns: the first two name components for
/// grouped sections, the first otherwise.
pub fn module_key(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.first() {
        Some(&"backbone") | Some(&"neck") | Some(&"head") if parts.len() > 1 => {
            format!("{}.{}", parts[0], parts[1])
        }
        Some(p) => p.to_string(),
        None => String::new(),
    }
}
