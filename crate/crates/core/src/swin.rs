//! Windowed multi-head self-attention with 3D relative position bias, and
//! the regular/shifted block pair built on it.

use std::rc::Rc;

use morphwin_tensor::{ParamVars, Real, Tensor, Var};

use crate::error::{Error, Result};
use crate::init::trunc_normal;
use crate::layers::{gelu, Init, Linear, Norm, LINEAR_STD};
use crate::windowing::{
    cyclic_shift, shifted_window_mask, window_partition, window_reverse, ShiftDirection, WindowSequence, WindowSpec,
};
use crate::wwa::{wwa, WwaOptions, WwaParams};

pub const MLP_RATIO: usize = 4;

pub fn bias_table_rows(window: [usize; 3]) -> usize {
    window.iter().map(|&w| 2 * w - 1).product()
}

/// Row of the bias table used by each (query, key) pair, row-major `[K, K]`.
pub fn relative_position_index(window: [usize; 3]) -> Vec<usize> {
    let [d, h, w] = window;
    let k = d * h * w;
    let coord = |e: usize| [e / (h * w), (e / w) % h, e % w];
    let mut index = Vec::with_capacity(k * k);
    for i in 0..k {
        let a = coord(i);
        for j in 0..k {
            let b = coord(j);
            let rz = a[0] + d - 1 - b[0];
            let ry = a[1] + h - 1 - b[1];
            let rx = a[2] + w - 1 - b[2];
            index.push((rz * (2 * h - 1) + ry) * (2 * w - 1) + rx);
        }
    }
    index
}

#[derive(Clone)]
pub struct AttentionParams<'t, T: Real> {
    pub qkv: Linear<'t, T>,
    pub proj: Linear<'t, T>,
    /// `[(2d-1)(2h-1)(2w-1), heads]`.
    pub table: Var<'t, T>,
    pub index: Rc<Vec<usize>>,
    pub heads: usize,
}

impl<'t, T: Real> AttentionParams<'t, T> {
    pub fn init(init: &mut Init<'_, T>, name: &str, channels: usize, heads: usize, window: [usize; 3]) -> Result<()> {
        init.linear(&format!("{name}.qkv"), channels, 3 * channels)?;
        init.linear(&format!("{name}.proj"), channels, channels)?;
        let table = trunc_normal(&[bias_table_rows(window), heads], LINEAR_STD, init.rng);
        init.tensor(&format!("{name}.relative_position_bias"), table)
    }

    pub fn bind(p: &ParamVars<'t, T>, name: &str, heads: usize, window: [usize; 3]) -> Result<Self> {
        let table = p.get(&format!("{name}.relative_position_bias"))?;
        if table.shape() != [bias_table_rows(window), heads] {
            return Err(Error::Config(format!(
                "bias table {name} has shape {:?}, window {window:?} with {heads} heads needs [{}, {heads}]",
                table.shape(),
                bias_table_rows(window)
            )));
        }
        Ok(AttentionParams {
            qkv: Linear::bind(p, &format!("{name}.qkv"))?,
            proj: Linear::bind(p, &format!("{name}.proj"))?,
            table,
            index: Rc::new(relative_position_index(window)),
            heads,
        })
    }
}

/// `B[h, i, j] = table[index(i, j), h]`.
pub fn relative_position_bias<'t, T: Real>(p: &AttentionParams<'t, T>) -> Result<Var<'t, T>> {
    let k = (p.index.len() as f64).sqrt().round() as usize;
    Ok(p.table
        .index_select(&p.index)?
        .permute(&[1, 0])?
        .reshape(&[p.heads, k, k])?)
}

/// Multi-head attention inside each window. `mask` is `[N, K, K]` and is
/// added to the logits of every head.
pub fn window_msa<'t, T: Real>(
    w: &WindowSequence<'t, T>,
    p: &AttentionParams<'t, T>,
    mask: Option<&Tensor<T>>,
) -> Result<WindowSequence<'t, T>> {
    let shape = w.data.shape();
    let (n, k, c) = (shape[0], shape[1], shape[2]);
    let heads = p.heads;
    if heads == 0 || c % heads != 0 || p.qkv.weight.shape() != [c, 3 * c] {
        return Err(Error::Config(format!(
            "attention over {c} channels with {heads} heads and qkv {:?}",
            p.qkv.weight.shape()
        )));
    }
    if p.index.len() != k * k {
        return Err(Error::Config(format!("bias index built for {} pairs, windows have {k} elements", p.index.len())));
    }
    let hd = c / heads;
    let qkv = p
        .qkv
        .forward(w.data)?
        .reshape(&[n, k, 3, heads, hd])?
        .permute(&[2, 0, 3, 1, 4])?;
    let part = |i: usize| -> Result<Var<'t, T>> { Ok(qkv.slice(0, i, 1)?.reshape(&[n, heads, k, hd])?) };
    let q = part(0)?.mul_scalar(1.0 / (hd as f64).sqrt());
    let key = part(1)?;
    let v = part(2)?;
    let mut logits = q.matmul(key.permute(&[0, 1, 3, 2])?)?.add(relative_position_bias(p)?)?;
    if let Some(m) = mask {
        if m.shape() != [n, k, k] {
            return Err(Error::Config(format!("mask {:?} for {n} windows of {k} elements", m.shape())));
        }
        let m = w.data.tape().constant(m.reshape(&[n, 1, k, k])?);
        logits = logits.add(m)?;
    }
    let attn = logits.softmax(-1)?;
    let out = attn.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[n, k, c])?;
    Ok(w.map(p.proj.forward(out)?))
}

#[derive(Clone)]
pub struct BlockParams<'t, T: Real> {
    pub norm1: Norm<'t, T>,
    pub attn: AttentionParams<'t, T>,
    pub norm2: Norm<'t, T>,
    pub fc1: Linear<'t, T>,
    pub fc2: Linear<'t, T>,
    pub wwa: Option<WwaParams<'t, T>>,
}

/// Static description of one block's parameter layout.
#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub channels: usize,
    pub heads: usize,
    pub window: [usize; 3],
    /// Window count N for the gate MLP, or `None` without weighting.
    pub wwa_windows: Option<usize>,
}

impl<'t, T: Real> BlockParams<'t, T> {
    pub fn init(init: &mut Init<'_, T>, name: &str, s: &BlockShape) -> Result<()> {
        let c = s.channels;
        init.norm(&format!("{name}.norm1"), c)?;
        AttentionParams::init(init, &format!("{name}.attn"), c, s.heads, s.window)?;
        init.norm(&format!("{name}.norm2"), c)?;
        init.linear(&format!("{name}.mlp.fc1"), c, MLP_RATIO * c)?;
        init.linear(&format!("{name}.mlp.fc2"), MLP_RATIO * c, c)?;
        if let Some(n) = s.wwa_windows {
            WwaParams::init(init, &format!("{name}.wwa"), c, n)?;
        }
        Ok(())
    }

    pub fn bind(p: &ParamVars<'t, T>, name: &str, s: &BlockShape) -> Result<Self> {
        Ok(BlockParams {
            norm1: Norm::bind(p, &format!("{name}.norm1"))?,
            attn: AttentionParams::bind(p, &format!("{name}.attn"), s.heads, s.window)?,
            norm2: Norm::bind(p, &format!("{name}.norm2"))?,
            fc1: Linear::bind(p, &format!("{name}.mlp.fc1"))?,
            fc2: Linear::bind(p, &format!("{name}.mlp.fc2"))?,
            wwa: match s.wwa_windows {
                Some(_) => Some(WwaParams::bind(p, &format!("{name}.wwa"))?),
                None => None,
            },
        })
    }
}

/// One pre-norm block on `[D, H, W, C]`. A spec with a nonzero shift runs the
/// shifted-window variant and needs the matching mask.
pub fn swin_block<'t, T: Real>(
    x: Var<'t, T>,
    p: &BlockParams<'t, T>,
    spec: &WindowSpec,
    mask: Option<&Tensor<T>>,
    opts: &WwaOptions,
) -> Result<Var<'t, T>> {
    let mut h = p.norm1.forward(x)?;
    if spec.is_shifted() {
        h = cyclic_shift(h, spec.shift, ShiftDirection::Backward)?;
    }
    let mut seq = window_partition(h, spec)?;
    if let Some(wp) = &p.wwa {
        seq = wwa(&seq, wp, opts)?;
    }
    let attended = window_msa(&seq, &p.attn, mask)?;
    let mut h = window_reverse(&attended)?;
    if spec.is_shifted() {
        h = cyclic_shift(h, spec.shift, ShiftDirection::Forward)?;
    }
    let x = x.add(h)?;
    let m = p.fc2.forward(gelu(p.fc1.forward(p.norm2.forward(x)?)?)?)?;
    Ok(x.add(m)?)
}

/// Regular block then shifted block, both at the geometry of `spec`.
pub fn swin_block_pair<'t, T: Real>(
    x: Var<'t, T>,
    blocks: &[BlockParams<'t, T>; 2],
    spec: &WindowSpec,
    opts: &WwaOptions,
) -> Result<Var<'t, T>> {
    let mask = spec.is_shifted().then(|| shifted_window_mask::<T>(spec));
    swin_block_pair_masked(x, blocks, spec, mask.as_ref(), opts)
}

/// `swin_block_pair` with a precomputed mask for the shifted block.
pub fn swin_block_pair_masked<'t, T: Real>(
    x: Var<'t, T>,
    blocks: &[BlockParams<'t, T>; 2],
    spec: &WindowSpec,
    mask: Option<&Tensor<T>>,
    opts: &WwaOptions,
) -> Result<Var<'t, T>> {
    let x = swin_block(x, &blocks[0], &spec.unshifted(), None, opts)?;
    swin_block(x, &blocks[1], spec, mask, opts)
}
