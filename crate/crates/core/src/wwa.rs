//! Weighted window attention: a per-(window, channel) gate followed by a
//! per-(window, element) gate, both computed from window means.

use morphwin_tensor::{ParamVars, Real, Var};

use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::windowing::WindowSequence;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WwaOptions {
    /// Negative slope of the hidden activation in both gate MLPs.
    pub hidden_slope: f64,
    /// Apply the window gate to the phase input's source sequence (the
    /// sequence before channel gating) instead of the channel-gated one.
    pub eq7_multiplies_original: bool,
}

impl Default for WwaOptions {
    fn default() -> Self {
        WwaOptions {
            hidden_slope: 0.2,
            eq7_multiplies_original: false,
        }
    }
}

pub fn hidden_size(n: usize) -> usize {
    (n / 4).max(1)
}

/// Two-layer gate MLP, `n -> n/4 -> n`.
#[derive(Clone, Copy)]
pub struct GateMlp<'t, T: Real> {
    pub fc1: Linear<'t, T>,
    pub fc2: Linear<'t, T>,
}

impl<'t, T: Real> GateMlp<'t, T> {
    pub fn init(init: &mut Init<'_, T>, name: &str, n: usize) -> Result<()> {
        init.linear(&format!("{name}.fc1"), n, hidden_size(n))?;
        init.linear(&format!("{name}.fc2"), hidden_size(n), n)
    }

    pub fn bind(p: &ParamVars<'t, T>, name: &str) -> Result<Self> {
        Ok(GateMlp {
            fc1: Linear::bind(p, &format!("{name}.fc1"))?,
            fc2: Linear::bind(p, &format!("{name}.fc2"))?,
        })
    }

    pub fn width(&self) -> usize {
        self.fc1.weight.shape()[0]
    }

    /// `sigmoid(fc2(leaky(fc1(x))))`.
    pub fn gate(&self, x: Var<'t, T>, slope: f64) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(x)?.leaky_relu(slope);
        Ok(self.fc2.forward(h)?.sigmoid())
    }
}

#[derive(Clone, Copy)]
pub struct WwaParams<'t, T: Real> {
    pub channel: GateMlp<'t, T>,
    pub window: GateMlp<'t, T>,
}

impl<'t, T: Real> WwaParams<'t, T> {
    pub fn init(init: &mut Init<'_, T>, name: &str, channels: usize, windows: usize) -> Result<()> {
        GateMlp::init(init, &format!("{name}.channel"), channels)?;
        GateMlp::init(init, &format!("{name}.window"), windows)
    }

    pub fn bind(p: &ParamVars<'t, T>, name: &str) -> Result<Self> {
        Ok(WwaParams {
            channel: GateMlp::bind(p, &format!("{name}.channel"))?,
            window: GateMlp::bind(p, &format!("{name}.window"))?,
        })
    }
}

/// Channel gate `alpha[N, C]` from the mean over each window's elements.
pub fn channel_weights<'t, T: Real>(w: &WindowSequence<'t, T>, mlp: &GateMlp<'t, T>, slope: f64) -> Result<Var<'t, T>> {
    let c = w.channels();
    if mlp.width() != c {
        return Err(Error::Config(format!(
            "channel gate expects {} channels, sequence has {c}",
            mlp.width()
        )));
    }
    mlp.gate(w.data.mean_axes(&[1])?, slope)
}

/// Window gate `beta[K, N]` from the channel mean of every element.
pub fn window_weights<'t, T: Real>(w: &WindowSequence<'t, T>, mlp: &GateMlp<'t, T>, slope: f64) -> Result<Var<'t, T>> {
    let n = w.data.shape()[0];
    if mlp.width() != n {
        return Err(Error::Config(format!(
            "window gate expects {} windows, sequence has {n}",
            mlp.width()
        )));
    }
    let means = w.data.mean_axes(&[2])?.permute(&[1, 0])?;
    mlp.gate(means, slope)
}

pub fn cross_channel_attention<'t, T: Real>(
    w: &WindowSequence<'t, T>,
    p: &WwaParams<'t, T>,
    opts: &WwaOptions,
) -> Result<WindowSequence<'t, T>> {
    let alpha = channel_weights(w, &p.channel, opts.hidden_slope)?;
    let [n, _, c] = shape3(w);
    Ok(w.map(w.data.mul(alpha.reshape(&[n, 1, c])?)?))
}

/// Gates `target` by the window weights computed from `source`.
fn apply_window_gate<'t, T: Real>(
    source: &WindowSequence<'t, T>,
    target: &WindowSequence<'t, T>,
    p: &WwaParams<'t, T>,
    opts: &WwaOptions,
) -> Result<WindowSequence<'t, T>> {
    let beta = window_weights(source, &p.window, opts.hidden_slope)?;
    let [n, k, _] = shape3(source);
    let beta = beta.permute(&[1, 0])?.reshape(&[n, k, 1])?;
    Ok(target.map(target.data.mul(beta)?))
}

pub fn cross_window_attention<'t, T: Real>(
    w: &WindowSequence<'t, T>,
    p: &WwaParams<'t, T>,
    opts: &WwaOptions,
) -> Result<WindowSequence<'t, T>> {
    apply_window_gate(w, w, p, opts)
}

pub fn wwa<'t, T: Real>(w: &WindowSequence<'t, T>, p: &WwaParams<'t, T>, opts: &WwaOptions) -> Result<WindowSequence<'t, T>> {
    let gated = cross_channel_attention(w, p, opts)?;
    let target = if opts.eq7_multiplies_original { w } else { &gated };
    apply_window_gate(&gated, target, p, opts)
}

fn shape3<T: Real>(w: &WindowSequence<'_, T>) -> [usize; 3] {
    let s = w.data.shape();
    [s[0], s[1], s[2]]
}
