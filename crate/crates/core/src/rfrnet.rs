//! The full registration network: convolutional patch embedding, a Swin
//! encoder with patch merging, a recovery branch of patch expansions, and a
//! convolutional decoder that predicts the displacement field.

use morphwin_tensor::{ParamStore, ParamVars, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::init::rng;
use crate::layers::{Conv, Init, Linear};
use crate::spatial::Border;
use crate::swin::{swin_block_pair_masked, BlockParams, BlockShape};
use crate::windowing::{shifted_window_mask, WindowSpec};
use crate::wwa::WwaOptions;

const INIT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub input_dims: [usize; 3],
    /// Base channel count C after patch embedding.
    pub embed_dim: usize,
    pub window: [usize; 3],
    pub heads: Vec<usize>,
    /// Blocks per encoder stage; each must be even (regular/shifted pairs).
    pub depths: Vec<usize>,
    /// Output width of each decoder stage, deepest first (one per encoder
    /// stage plus one). `None` derives them from `embed_dim`.
    pub decoder_widths: Option<Vec<usize>>,
    pub recovery_branch: bool,
    pub wwa: bool,
    pub wwa_options: WwaOptions,
    /// Negative slope of the leaky-relu after every convolution.
    pub conv_slope: f64,
    pub border: Border,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_dims: [192, 128, 64],
            embed_dim: 96,
            window: [6, 4, 2],
            heads: vec![4, 4, 8, 8],
            depths: vec![2, 2, 2, 2],
            decoder_widths: None,
            recovery_branch: true,
            wwa: true,
            wwa_options: WwaOptions::default(),
            conv_slope: 0.2,
            border: Border::Clamp,
        }
    }
}

/// Geometry of one encoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub dims: [usize; 3],
    pub channels: usize,
    pub heads: usize,
    pub depth: usize,
    pub spec: WindowSpec,
}

impl StagePlan {
    pub fn block_shape(&self, wwa: bool) -> BlockShape {
        BlockShape {
            channels: self.channels,
            heads: self.heads,
            window: self.spec.window,
            wwa_windows: wwa.then(|| self.spec.count()),
        }
    }
}

/// Returns `cfg` with the recovery branch and/or the window weighting removed.
pub fn ablation_config(base: &ArchConfig, drop_rb: bool, drop_wwa: bool) -> ArchConfig {
    let mut cfg = base.clone();
    if drop_rb {
        cfg.recovery_branch = false;
    }
    if drop_wwa {
        cfg.wwa = false;
    }
    cfg
}

fn stage_dims(input: [usize; 3], stages: usize) -> Vec<[usize; 3]> {
    let mut dims = vec![input.map(|d| d / 4)];
    for _ in 1..stages {
        let prev = *dims.last().unwrap();
        dims.push(prev.map(|d| d.div_ceil(2)));
    }
    dims
}

fn axis_fits(dim: usize, window: usize, stages: usize) -> bool {
    if dim == 0 || dim % 4 != 0 {
        return false;
    }
    let mut d = dim / 4;
    for _ in 0..stages {
        if d >= window && d % window != 0 {
            return false;
        }
        d = d.div_ceil(2);
    }
    true
}

impl ArchConfig {
    /// Desk-scale configuration for the given input and width.
    pub fn toy(input_dims: [usize; 3], embed_dim: usize, heads: Vec<usize>, window: [usize; 3]) -> Self {
        let stages = heads.len();
        ArchConfig {
            input_dims,
            embed_dim,
            window,
            heads,
            depths: vec![2; stages],
            ..ArchConfig::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.heads.len()
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        if let Some(w) = &self.decoder_widths {
            return w.clone();
        }
        let c = self.embed_dim;
        let mut widths: Vec<usize> = (1..self.stages()).rev().map(|s| (c << (s - 1)) / 2).collect();
        widths.push(c / 4);
        widths.push(((16 * c) as f64 / 96.0).round().max(3.0) as usize);
        widths
    }

    /// Smallest input dims not below the configured ones that the network
    /// accepts.
    pub fn suggested_dims(&self) -> [usize; 3] {
        let stages = self.stages();
        [0, 1, 2].map(|a| {
            let mut d = self.input_dims[a].max(4);
            while !axis_fits(d, self.window[a], stages) {
                d += 1;
            }
            d
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.embed_dim;
        let stages = self.stages();
        let fail = |m: String| Err(Error::Config(m));
        if stages == 0 {
            return fail("at least one encoder stage is required".into());
        }
        if self.depths.len() != stages {
            return fail(format!("{} depths for {stages} stages", self.depths.len()));
        }
        if let Some(d) = self.depths.iter().find(|&&d| d == 0 || d % 2 != 0) {
            return fail(format!("stage depth {d} is not a positive even number"));
        }
        if c == 0 || c % 8 != 0 {
            return fail(format!("embed_dim {c} must be a positive multiple of 8"));
        }
        for (s, &h) in self.heads.iter().enumerate() {
            let ch = c << s;
            if h == 0 || ch % h != 0 {
                return fail(format!("stage {} has {ch} channels, not divisible by {h} heads", s + 1));
            }
        }
        if self.window.contains(&0) {
            return fail(format!("window {:?} has a zero extent", self.window));
        }
        let widths = self.decoder_widths();
        if widths.len() != stages + 1 {
            return fail(format!("{} decoder widths for {stages} stages (need {})", widths.len(), stages + 1));
        }
        if let Some(w) = widths[..stages].iter().find(|&&w| w == 0 || w % 2 != 0) {
            return fail(format!("decoder width {w} feeds an upsampling step and must be even and positive"));
        }
        if widths[stages] == 0 {
            return fail("final decoder width must be positive".into());
        }
        if !(self.conv_slope >= 0.0) {
            return fail(format!("conv_slope {} must be >= 0", self.conv_slope));
        }
        let ok = (0..3).all(|a| axis_fits(self.input_dims[a], self.window[a], stages));
        if !ok {
            let s = self.suggested_dims();
            return fail(format!(
                "input dims {}x{}x{} are incompatible with window {:?} over {stages} stages; \
                 each axis must be a multiple of 4 whose stage sizes are window multiples or smaller than the window. \
                 Pad to {}x{}x{}",
                self.input_dims[0], self.input_dims[1], self.input_dims[2], self.window, s[0], s[1], s[2]
            ));
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<Vec<StagePlan>> {
        self.validate()?;
        stage_dims(self.input_dims, self.stages())
            .into_iter()
            .enumerate()
            .map(|(s, dims)| {
                Ok(StagePlan {
                    dims,
                    channels: self.embed_dim << s,
                    heads: self.heads[s],
                    depth: self.depths[s],
                    spec: WindowSpec::fit(dims, self.window)?,
                })
            })
            .collect()
    }
}

/// Fresh parameters for `cfg`, deterministic in `seed`. The displacement
/// head starts at zero.
pub fn init_params<T: Real>(cfg: &ArchConfig, seed: u64) -> Result<ParamStore<T>> {
    let plan = cfg.plan()?;
    let c = cfg.embed_dim;
    let slope = cfg.conv_slope;
    let mut store = ParamStore::new();
    let mut r = rng(seed, INIT_STREAM);
    let mut init = Init { store: &mut store, rng: &mut r };

    init.conv("scpe.conv1", 3, 2, c / 2, slope)?;
    init.conv("scpe.conv2", 3, c / 2, c, slope)?;
    init.conv("scpe.conv3", 3, c, c, slope)?;

    for (s, st) in plan.iter().enumerate() {
        let name = format!("encoder.stage{}", s + 1);
        if s > 0 {
            init.linear_fan_in(&format!("{name}.merge"), 8 * plan[s - 1].channels, st.channels)?;
        }
        for b in 0..st.depth {
            BlockParams::<T>::init(&mut init, &format!("{name}.block{b}"), &st.block_shape(cfg.wwa))?;
        }
    }

    if cfg.recovery_branch {
        init.linear_fan_in("recovery.expand1", c, 4 * c)?;
        init.linear_fan_in("recovery.expand2", c / 2, 2 * c)?;
    } else {
        init.conv("recovery.compress1", 1, c / 2, c / 2, slope)?;
        init.conv("recovery.compress2", 1, 2, c / 4, slope)?;
    }

    let mut prev = plan.last().expect("validated").channels;
    for (i, (&width, skip)) in cfg.decoder_widths().iter().zip(skip_channels(cfg)).enumerate() {
        let name = format!("decoder.stage{}", i + 1);
        init.linear_fan_in(&format!("{name}.expand"), prev, 4 * prev)?;
        init.conv(&format!("{name}.conv1"), 3, prev / 2 + skip, width, slope)?;
        init.conv(&format!("{name}.conv2"), 3, width, width, slope)?;
        prev = width;
    }
    init.zero_conv("head", 3, prev, 3)?;
    Ok(store)
}

/// Channels of the skip feature entering each decoder stage, deepest first.
fn skip_channels(cfg: &ArchConfig) -> Vec<usize> {
    let c = cfg.embed_dim;
    let mut v: Vec<usize> = (0..cfg.stages() - 1).rev().map(|s| c << s).collect();
    v.push(c / 2);
    v.push(c / 4);
    v
}

/// `[D, H, W, C] -> [D/2, H/2, W/2, 8C] -> linear`. Neighbour `(dz, dy, dx)`
/// occupies channel block `4 dz + 2 dy + dx`.
pub fn patch_merging<'t, T: Real>(x: Var<'t, T>, linear: &Linear<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 || s[..3].iter().any(|d| d % 2 != 0) {
        return Err(Error::Config(format!("patch merging needs even spatial dims, got {s:?}")));
    }
    let (d, h, w, c) = (s[0] / 2, s[1] / 2, s[2] / 2, s[3]);
    let grouped = x
        .reshape(&[d, 2, h, 2, w, 2, c])?
        .permute(&[0, 2, 4, 1, 3, 5, 6])?
        .reshape(&[d, h, w, 8 * c])?;
    linear.forward(grouped)
}

/// `linear` to 4C, then channel block `4 dz + 2 dy + dx` of width C/2 moves
/// to sub-voxel `(dz, dy, dx)`.
pub fn patch_expanding<'t, T: Real>(x: Var<'t, T>, linear: &Linear<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 4 || s[3] % 2 != 0 {
        return Err(Error::Config(format!("patch expanding needs an even channel count, got {s:?}")));
    }
    let (d, h, w, c) = (s[0], s[1], s[2], s[3]);
    let y = linear.forward(x)?;
    if y.shape()[3] != 4 * c {
        return Err(Error::Config(format!("expansion linear maps {c} to {}, expected {}", y.shape()[3], 4 * c)));
    }
    Ok(y.reshape(&[d, h, w, 2, 2, 2, c / 2])?
        .permute(&[0, 3, 1, 4, 2, 5, 6])?
        .reshape(&[2 * d, 2 * h, 2 * w, c / 2])?)
}

fn crop_to<'t, T: Real>(x: Var<'t, T>, dims: [usize; 3]) -> Result<Var<'t, T>> {
    let mut x = x;
    for (a, &d) in dims.iter().enumerate() {
        let cur = x.shape()[a];
        if cur < d {
            return Err(Error::Config(format!("cannot crop axis {a} of size {cur} to {d}")));
        }
        if cur > d {
            x = x.slice(a, 0, d)?;
        }
    }
    Ok(x)
}

fn pad_even<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let pad = [s[0] % 2, s[1] % 2, s[2] % 2, 0];
    if pad == [0; 4] {
        Ok(x)
    } else {
        Ok(x.pad_end(&pad)?)
    }
}

struct Stage<'t, T: Real> {
    plan: StagePlan,
    merge: Option<Linear<'t, T>>,
    pairs: Vec<[BlockParams<'t, T>; 2]>,
    mask: Option<Tensor<T>>,
}

struct DecoderStage<'t, T: Real> {
    expand: Linear<'t, T>,
    conv1: Conv<'t, T>,
    conv2: Conv<'t, T>,
}

enum Recovery<'t, T: Real> {
    Expand(Linear<'t, T>, Linear<'t, T>),
    Compress(Conv<'t, T>, Conv<'t, T>),
}

/// Parameters bound to a tape, ready for forward passes.
pub struct Network<'t, T: Real> {
    cfg: ArchConfig,
    scpe: [Conv<'t, T>; 3],
    stages: Vec<Stage<'t, T>>,
    recovery: Recovery<'t, T>,
    decoder: Vec<DecoderStage<'t, T>>,
    head: Conv<'t, T>,
}

impl<'t, T: Real> Network<'t, T> {
    pub fn bind(p: &ParamVars<'t, T>, cfg: &ArchConfig) -> Result<Self> {
        let plan = cfg.plan()?;
        let scpe = [
            Conv::bind(p, "scpe.conv1", 2)?,
            Conv::bind(p, "scpe.conv2", 2)?,
            Conv::bind(p, "scpe.conv3", 1)?,
        ];
        let mut stages = Vec::new();
        for (s, st) in plan.into_iter().enumerate() {
            let name = format!("encoder.stage{}", s + 1);
            let merge = if s > 0 { Some(Linear::bind(p, &format!("{name}.merge"))?) } else { None };
            let shape = st.block_shape(cfg.wwa);
            let mut pairs = Vec::new();
            for b in (0..st.depth).step_by(2) {
                pairs.push([
                    BlockParams::bind(p, &format!("{name}.block{b}"), &shape)?,
                    BlockParams::bind(p, &format!("{name}.block{}", b + 1), &shape)?,
                ]);
            }
            let mask = st.spec.is_shifted().then(|| shifted_window_mask(&st.spec));
            stages.push(Stage { plan: st, merge, pairs, mask });
        }
        let recovery = if cfg.recovery_branch {
            Recovery::Expand(Linear::bind(p, "recovery.expand1")?, Linear::bind(p, "recovery.expand2")?)
        } else {
            Recovery::Compress(Conv::bind(p, "recovery.compress1", 1)?, Conv::bind(p, "recovery.compress2", 1)?)
        };
        let decoder = (1..=cfg.stages() + 1)
            .map(|i| {
                let name = format!("decoder.stage{i}");
                Ok(DecoderStage {
                    expand: Linear::bind(p, &format!("{name}.expand"))?,
                    conv1: Conv::bind(p, &format!("{name}.conv1"), 1)?,
                    conv2: Conv::bind(p, &format!("{name}.conv2"), 1)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Network {
            cfg: cfg.clone(),
            scpe,
            stages,
            recovery,
            decoder,
            head: Conv::bind(p, "head", 1)?,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    fn act(&self, x: Var<'t, T>) -> Var<'t, T> {
        x.leaky_relu(self.cfg.conv_slope)
    }

    /// Patch embedding; returns the half-resolution and quarter-resolution
    /// features.
    pub fn scpe(&self, pair: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let half = self.act(self.scpe[0].forward(pair)?);
        let q = self.act(self.scpe[1].forward(half)?);
        let q = self.act(self.scpe[2].forward(q)?);
        Ok((half, q))
    }

    fn encode_stage(&self, s: usize, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let st = &self.stages[s];
        let mut x = match &st.merge {
            Some(m) => patch_merging(pad_even(x)?, m)?,
            None => x,
        };
        for pair in &st.pairs {
            x = swin_block_pair_masked(x, pair, &st.plan.spec, st.mask.as_ref(), &self.cfg.wwa_options)?;
        }
        Ok(x)
    }

    /// Displacement field `[D, H, W, 3]` registering `moving` onto `fixed`.
    pub fn forward(&self, moving: Var<'t, T>, fixed: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = self.cfg.input_dims;
        let want = [d[0], d[1], d[2], 1];
        for (name, v) in [("moving", moving), ("fixed", fixed)] {
            if v.shape() != want {
                return Err(Error::Config(format!("{name} image is {:?}, network expects {want:?}", v.shape())));
            }
        }
        let pair = Var::concat(&[moving, fixed], -1)?;
        let (half, quarter) = self.scpe(pair)?;

        let mut skips = Vec::with_capacity(self.stages.len() + 1);
        let mut x = self.encode_stage(0, quarter)?;
        let first = x;
        for s in 1..self.stages.len() {
            skips.push(x);
            x = self.encode_stage(s, x)?;
        }
        skips.reverse();
        match &self.recovery {
            Recovery::Expand(e1, e2) => {
                let r2 = patch_expanding(first, e1)?;
                let r1 = patch_expanding(r2, e2)?;
                skips.push(r2);
                skips.push(r1);
            }
            Recovery::Compress(c1, c2) => {
                skips.push(self.act(c1.forward(half)?));
                skips.push(self.act(c2.forward(pair)?));
            }
        }

        for (stage, skip) in self.decoder.iter().zip(skips) {
            let s = skip.shape();
            let up = crop_to(patch_expanding(x, &stage.expand)?, [s[0], s[1], s[2]])?;
            let h = Var::concat(&[up, skip], -1)?;
            let h = self.act(stage.conv1.forward(h)?);
            x = self.act(stage.conv2.forward(h)?);
        }
        self.head.forward(x)
    }
}

/// Forward pass with parameters held constant (no gradients retained).
pub fn predict_field<T: Real>(
    params: &ParamStore<T>,
    cfg: &ArchConfig,
    moving: &Tensor<T>,
    fixed: &Tensor<T>,
) -> Result<Tensor<T>> {
    let tape = morphwin_tensor::Tape::new();
    let vars = params.bind_constant(&tape);
    let net = Network::bind(&vars, cfg)?;
    let phi = net.forward(tape.constant(moving.clone()), tape.constant(fixed.clone()))?;
    Ok((*phi.value()).clone())
}
