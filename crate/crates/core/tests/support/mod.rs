//! Plain-loop reference implementations shared by the integration tests.
//! Nothing here goes through the tensor engine.
#![allow(dead_code)]

pub mod oracle {
    /// Row-major `[d, h, w, c]` volume.
    #[derive(Clone, Debug)]
    pub struct Vol {
        pub dims: [usize; 3],
        pub c: usize,
        pub data: Vec<f64>,
    }

    impl Vol {
        pub fn at(&self, z: usize, y: usize, x: usize, ch: usize) -> f64 {
            self.data[((z * self.dims[1] + y) * self.dims[2] + x) * self.c + ch]
        }
    }

    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// `y = x W + b` with `W` row-major `[n_in, n_out]`.
    pub fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let n_out = b.len();
        (0..n_out)
            .map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i * n_out + o]).sum::<f64>())
            .collect()
    }

    /// Which of the three slices a rolled coordinate falls in.
    fn region(i: usize, n: usize, window: usize, shift: usize) -> usize {
        if shift == 0 || i < n - window {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    }

    pub struct Attention<'a> {
        pub qkv_w: &'a [f64],
        pub qkv_b: &'a [f64],
        pub proj_w: &'a [f64],
        pub proj_b: &'a [f64],
        /// `[(2wd-1)(2wh-1)(2ww-1), heads]`.
        pub table: &'a [f64],
        pub heads: usize,
    }

    /// Shifted-window self-attention on a whole volume: roll by `-shift`,
    /// attend inside each window between elements of the same region, roll
    /// back.
    pub fn shifted_window_attention(x: &Vol, window: [usize; 3], shift: [usize; 3], p: &Attention) -> Vol {
        let [d, h, w] = x.dims;
        let c = x.c;
        let hd = c / p.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let rolled = |i: [usize; 3]| -> [usize; 3] { [(i[0] + shift[0]) % d, (i[1] + shift[1]) % h, (i[2] + shift[2]) % w] };
        let mut out = vec![0.0; x.data.len()];
        let mut proj_in = vec![vec![0.0; c]; d * h * w];

        let tokens: Vec<Vec<f64>> = (0..d * h * w)
            .map(|r| {
                let ri = [r / (h * w), (r / w) % h, r % w];
                let src = rolled(ri);
                let v: Vec<f64> = (0..c).map(|ch| x.at(src[0], src[1], src[2], ch)).collect();
                affine(&v, p.qkv_w, p.qkv_b)
            })
            .collect();

        for r in 0..d * h * w {
            let a = [r / (h * w), (r / w) % h, r % w];
            let base = [a[0] / window[0] * window[0], a[1] / window[1] * window[1], a[2] / window[2] * window[2]];
            let mut members = Vec::new();
            for dz in 0..window[0] {
                for dy in 0..window[1] {
                    for dx in 0..window[2] {
                        members.push([base[0] + dz, base[1] + dy, base[2] + dx]);
                    }
                }
            }
            for head in 0..p.heads {
                let q: Vec<f64> = (0..hd).map(|e| tokens[r][head * hd + e] * scale).collect();
                let mut logits = Vec::with_capacity(members.len());
                for b in &members {
                    let bi = (b[0] * h + b[1]) * w + b[2];
                    let kdot: f64 = (0..hd).map(|e| q[e] * tokens[bi][c + head * hd + e]).sum();
                    let rz = a[0] - base[0] + window[0] - 1 - (b[0] - base[0]);
                    let ry = a[1] - base[1] + window[1] - 1 - (b[1] - base[1]);
                    let rx = a[2] - base[2] + window[2] - 1 - (b[2] - base[2]);
                    let row = (rz * (2 * window[1] - 1) + ry) * (2 * window[2] - 1) + rx;
                    let same = (0..3).all(|ax| {
                        let n = x.dims[ax];
                        region(a[ax], n, window[ax], shift[ax]) == region(b[ax], n, window[ax], shift[ax])
                    });
                    let mask = if same { 0.0 } else { -1e9 };
                    logits.push(kdot + p.table[row * p.heads + head] + mask);
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (m, b) in members.iter().enumerate() {
                    let bi = (b[0] * h + b[1]) * w + b[2];
                    for e in 0..hd {
                        proj_in[r][head * hd + e] += exps[m] / total * tokens[bi][2 * c + head * hd + e];
                    }
                }
            }
        }
        for r in 0..d * h * w {
            let ri = [r / (h * w), (r / w) % h, r % w];
            let dst = rolled(ri);
            let y = affine(&proj_in[r], p.proj_w, p.proj_b);
            let o = ((dst[0] * h + dst[1]) * w + dst[2]) * c;
            out[o..o + c].copy_from_slice(&y);
        }
        Vol { dims: x.dims, c, data: out }
    }

    pub struct Mlp<'a> {
        pub w1: &'a [f64],
        pub b1: &'a [f64],
        pub w2: &'a [f64],
        pub b2: &'a [f64],
    }

    pub fn gate(x: &[f64], m: &Mlp, slope: f64) -> Vec<f64> {
        let hidden: Vec<f64> = affine(x, m.w1, m.b1).into_iter().map(|v| if v > 0.0 { v } else { slope * v }).collect();
        affine(&hidden, m.w2, m.b2).into_iter().map(sigmoid).collect()
    }

    /// Sequence `[n, k, c]` flattened.
    #[derive(Clone, Debug)]
    pub struct Seq {
        pub n: usize,
        pub k: usize,
        pub c: usize,
        pub data: Vec<f64>,
    }

    impl Seq {
        pub fn at(&self, n: usize, k: usize, c: usize) -> f64 {
            self.data[(n * self.k + k) * self.c + c]
        }
    }

    /// Per-window channel gate from the element mean of each window.
    pub fn channel_phase(x: &Seq, m: &Mlp, slope: f64) -> Seq {
        let mut out = x.clone();
        for n in 0..x.n {
            let mean: Vec<f64> = (0..x.c).map(|c| (0..x.k).map(|k| x.at(n, k, c)).sum::<f64>() / x.k as f64).collect();
            let alpha = gate(&mean, m, slope);
            for k in 0..x.k {
                for c in 0..x.c {
                    out.data[(n * x.k + k) * x.c + c] = x.at(n, k, c) * alpha[c];
                }
            }
        }
        out
    }

    /// Per-element window gate computed from `source`, applied to `target`.
    pub fn window_phase(source: &Seq, target: &Seq, m: &Mlp, slope: f64) -> Seq {
        let mut out = target.clone();
        for k in 0..source.k {
            let across: Vec<f64> = (0..source.n)
                .map(|n| (0..source.c).map(|c| source.at(n, k, c)).sum::<f64>() / source.c as f64)
                .collect();
            let beta = gate(&across, m, slope);
            for n in 0..source.n {
                for c in 0..source.c {
                    out.data[(n * source.k + k) * source.c + c] = target.at(n, k, c) * beta[n];
                }
            }
        }
        out
    }

    /// `[2D, 2H, 2W, C] -> [D, H, W, 8C]` with neighbour `(dz, dy, dx)` in
    /// block `4dz + 2dy + dx`, then affine.
    pub fn patch_merge(x: &Vol, w: &[f64], b: &[f64]) -> Vol {
        let [d, h, wd] = x.dims.map(|v| v / 2);
        let mut data = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for xx in 0..wd {
                    let mut cat = vec![0.0; 8 * x.c];
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                for ch in 0..x.c {
                                    cat[(4 * dz + 2 * dy + dx) * x.c + ch] = x.at(2 * z + dz, 2 * y + dy, 2 * xx + dx, ch);
                                }
                            }
                        }
                    }
                    data.extend(affine(&cat, w, b));
                }
            }
        }
        Vol { dims: [d, h, wd], c: b.len(), data }
    }

    /// Affine to 4C, then block `4dz + 2dy + dx` of width C/2 goes to sub-voxel
    /// `(dz, dy, dx)`.
    pub fn patch_expand(x: &Vol, w: &[f64], b: &[f64]) -> Vol {
        let [d, h, wd] = x.dims;
        let half = x.c / 2;
        let dims = [2 * d, 2 * h, 2 * wd];
        let mut data = vec![0.0; dims.iter().product::<usize>() * half];
        for z in 0..d {
            for y in 0..h {
                for xx in 0..wd {
                    let v: Vec<f64> = (0..x.c).map(|ch| x.at(z, y, xx, ch)).collect();
                    let e = affine(&v, w, b);
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let o = (((2 * z + dz) * dims[1] + 2 * y + dy) * dims[2] + 2 * xx + dx) * half;
                                let s = (4 * dz + 2 * dy + dx) * half;
                                data[o..o + half].copy_from_slice(&e[s..s + half]);
                            }
                        }
                    }
                }
            }
        }
        Vol { dims, c: half, data }
    }

    /// Trilinear sampling at `v + phi(v)`. `clamp` replicates the edge;
    /// otherwise corners outside the volume read zero.
    pub fn warp(img: &Vol, phi: &Vol, clamp: bool) -> Vol {
        let [d, h, w] = img.dims;
        let mut data = Vec::with_capacity(img.data.len());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut pos = [z as f64 + phi.at(z, y, x, 0), y as f64 + phi.at(z, y, x, 1), x as f64 + phi.at(z, y, x, 2)];
                    if clamp {
                        for a in 0..3 {
                            pos[a] = pos[a].max(0.0).min((img.dims[a] - 1) as f64);
                        }
                    }
                    let lo = pos.map(|p| p.floor());
                    for ch in 0..img.c {
                        let mut acc = 0.0;
                        for corner in 0..8 {
                            let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
                            let mut weight = 1.0;
                            let mut idx = [0i64; 3];
                            for a in 0..3 {
                                let f = pos[a] - lo[a];
                                weight *= if off[a] == 1 { f } else { 1.0 - f };
                                idx[a] = lo[a] as i64 + off[a] as i64;
                            }
                            if weight == 0.0 {
                                continue;
                            }
                            let inside = (0..3).all(|a| idx[a] >= 0 && idx[a] < img.dims[a] as i64);
                            if inside {
                                acc += weight * img.at(idx[0] as usize, idx[1] as usize, idx[2] as usize, ch);
                            }
                        }
                        data.push(acc);
                    }
                }
            }
        }
        Vol { dims: img.dims, c: img.c, data }
    }

    /// Nearest source voxel of `v + phi(v)` after clamping, ties away from zero.
    pub fn warp_nearest(labels: &[u16], dims: [usize; 3], phi: &Vol) -> Vec<u16> {
        let [d, h, w] = dims;
        let mut out = Vec::with_capacity(labels.len());
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let src: Vec<usize> = [z, y, x]
                        .iter()
                        .enumerate()
                        .map(|(a, &p)| (p as f64 + phi.at(z, y, x, a)).max(0.0).min((dims[a] - 1) as f64).round() as usize)
                        .collect();
                    out.push(labels[(src[0] * h + src[1]) * w + src[2]]);
                }
            }
        }
        out
    }

    pub fn dice(a: &[u16], b: &[u16], label: u16) -> f64 {
        use std::collections::BTreeSet;
        let sa: BTreeSet<usize> = a.iter().enumerate().filter(|(_, &v)| v == label).map(|(i, _)| i).collect();
        let sb: BTreeSet<usize> = b.iter().enumerate().filter(|(_, &v)| v == label).map(|(i, _)| i).collect();
        if sa.is_empty() && sb.is_empty() {
            return 1.0;
        }
        2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
    }

    fn surface(map: &[u16], dims: [usize; 3], label: u16) -> Vec<[usize; 3]> {
        let [d, h, w] = dims;
        let get = |z: i64, y: i64, x: i64| -> bool {
            if z < 0 || y < 0 || x < 0 || z >= d as i64 || y >= h as i64 || x >= w as i64 {
                return false;
            }
            map[((z as usize) * h + y as usize) * w + x as usize] == label
        };
        let mut out = Vec::new();
        for z in 0..d as i64 {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    if !get(z, y, x) {
                        continue;
                    }
                    let nbrs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                    if nbrs.iter().any(|&(a, b, c)| !get(z + a, y + b, x + c)) {
                        out.push([z as usize, y as usize, x as usize]);
                    }
                }
            }
        }
        out
    }

    /// All-pairs surface distances in both directions, pooled, 95th
    /// percentile with linear interpolation. `None` if a surface is empty.
    pub fn hd95(a: &[u16], b: &[u16], dims: [usize; 3], label: u16, spacing: [f64; 3]) -> Option<f64> {
        let sa = surface(a, dims, label);
        let sb = surface(b, dims, label);
        if sa.is_empty() || sb.is_empty() {
            return None;
        }
        let dist = |p: &[usize; 3], q: &[usize; 3]| -> f64 {
            (0..3).map(|i| ((p[i] as f64 - q[i] as f64) * spacing[i]).powi(2)).sum::<f64>().sqrt()
        };
        let mut all = Vec::new();
        for p in &sa {
            all.push(sb.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min));
        }
        for q in &sb {
            all.push(sa.iter().map(|p| dist(p, q)).fold(f64::INFINITY, f64::min));
        }
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let pos = 0.95 * (all.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(all.len() - 1);
        Some(all[lo] + (all[hi] - all[lo]) * (pos - lo as f64))
    }
}

pub mod cases {
    use morphwin_core::init::{rng, SeededRng};
    use morphwin_tensor::Tensor;
    use rand::Rng;

    use super::oracle::Vol;

    pub fn stream(tag: u64) -> SeededRng {
        rng(0x5eed, tag)
    }

    pub fn uniform(r: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| r.random_range(lo..hi)).collect()
    }

    pub fn tensor(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    pub fn vol_of(t: &Tensor<f64>) -> Vol {
        let s = t.shape();
        Vol { dims: [s[0], s[1], s[2]], c: s[3], data: t.data().to_vec() }
    }

    pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        assert_eq!(a.len(), b.len());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

pub mod runs {
    use morphwin_core::layers::Linear;
    use morphwin_core::rfrnet::{patch_expanding, patch_merging};
    use morphwin_core::spatial::{warp_image, warp_nearest, Border};
    use morphwin_core::swin::{bias_table_rows, window_msa, AttentionParams};
    use morphwin_core::volume::LabelMap;
    use morphwin_core::windowing::{
        cyclic_shift, shifted_window_mask, window_partition, window_reverse, ShiftDirection, WindowSequence, WindowSpec,
    };
    use morphwin_core::wwa::{cross_channel_attention, cross_window_attention, wwa, GateMlp, WwaOptions, WwaParams};
    use morphwin_tensor::Tape;
    use rand::Rng;
    use std::rc::Rc;

    use super::cases::{max_abs_diff, stream, tensor, uniform, vol_of};
    use super::oracle::{self, Attention, Mlp, Seq, Vol};

    /// Worst deviation over `n` random shifted-window attention instances.
    pub fn window_msa_cases(n: usize) -> f64 {
        let mut r = stream(1);
        let mut worst: f64 = 0.0;
        for _ in 0..n {
            let window = [0; 3].map(|_| r.random_range(1..=3usize));
            let grid = [0; 3].map(|_| r.random_range(1..=3usize));
            let dims = [0, 1, 2].map(|a| window[a] * grid[a]);
            let shift = [0, 1, 2].map(|a| if grid[a] > 1 { r.random_range(0..window[a]) } else { 0 });
            let heads = r.random_range(1..=2usize);
            let c = heads * r.random_range(1..=3usize);
            let x = uniform(&mut r, dims.iter().product::<usize>() * c, -1.0, 1.0);
            let qkv_w = uniform(&mut r, c * 3 * c, -0.8, 0.8);
            let qkv_b = uniform(&mut r, 3 * c, -0.5, 0.5);
            let proj_w = uniform(&mut r, c * c, -0.8, 0.8);
            let proj_b = uniform(&mut r, c, -0.5, 0.5);
            let table = uniform(&mut r, bias_table_rows(window) * heads, -1.0, 1.0);

            let want = oracle::shifted_window_attention(
                &Vol { dims, c, data: x.clone() },
                window,
                shift,
                &Attention { qkv_w: &qkv_w, qkv_b: &qkv_b, proj_w: &proj_w, proj_b: &proj_b, table: &table, heads },
            );

            let tape = Tape::<f64>::new();
            let spec = WindowSpec::new(dims, window).unwrap().with_shift(shift);
            let p = AttentionParams {
                qkv: Linear { weight: tape.constant(tensor(&[c, 3 * c], &qkv_w)), bias: tape.constant(tensor(&[3 * c], &qkv_b)) },
                proj: Linear { weight: tape.constant(tensor(&[c, c], &proj_w)), bias: tape.constant(tensor(&[c], &proj_b)) },
                table: tape.constant(tensor(&[bias_table_rows(window), heads], &table)),
                index: Rc::new(morphwin_core::swin::relative_position_index(window)),
                heads,
            };
            let xv = tape.constant(tensor(&[dims[0], dims[1], dims[2], c], &x));
            let rolled = cyclic_shift(xv, shift, ShiftDirection::Backward).unwrap();
            let seq = window_partition(rolled, &spec).unwrap();
            let mask = shifted_window_mask::<f64>(&spec);
            let att = window_msa(&seq, &p, spec.is_shifted().then_some(&mask)).unwrap();
            let back = cyclic_shift(window_reverse(&att).unwrap(), shift, ShiftDirection::Forward).unwrap();
            worst = worst.max(max_abs_diff(back.value().data(), &want.data));
        }
        worst
    }

    fn mlp_params(r: &mut morphwin_core::init::SeededRng, width: usize) -> [Vec<f64>; 4] {
        let hidden = morphwin_core::wwa::hidden_size(width);
        [
            uniform(r, width * hidden, -1.0, 1.0),
            uniform(r, hidden, -0.5, 0.5),
            uniform(r, hidden * width, -1.0, 1.0),
            uniform(r, width, -0.5, 0.5),
        ]
    }

    fn gate_mlp<'t>(tape: &'t Tape<f64>, p: &[Vec<f64>; 4], width: usize) -> GateMlp<'t, f64> {
        let hidden = morphwin_core::wwa::hidden_size(width);
        GateMlp {
            fc1: Linear { weight: tape.constant(tensor(&[width, hidden], &p[0])), bias: tape.constant(tensor(&[hidden], &p[1])) },
            fc2: Linear { weight: tape.constant(tensor(&[hidden, width], &p[2])), bias: tape.constant(tensor(&[width], &p[3])) },
        }
    }

    fn oracle_mlp(p: &[Vec<f64>; 4]) -> Mlp<'_> {
        Mlp { w1: &p[0], b1: &p[1], w2: &p[2], b2: &p[3] }
    }

    /// Worst deviation of each weighting phase (channel, window, composed,
    /// composed on the original input) over `n` random sequences.
    pub fn wwa_cases(n: usize) -> [f64; 4] {
        let mut r = stream(2);
        let mut worst = [0.0f64; 4];
        let slope = WwaOptions::default().hidden_slope;
        for _ in 0..n {
            let (wn, k, c) = (r.random_range(1..=6usize), r.random_range(1..=8usize), r.random_range(1..=6usize));
            // A sequence partitioned from a volume: windows along z only.
            let spec = WindowSpec::new([wn, k, 1], [1, k, 1]).unwrap();
            let x = uniform(&mut r, wn * k * c, -1.0, 1.0);
            let cp = mlp_params(&mut r, c);
            let wp = mlp_params(&mut r, wn);

            let seq = Seq { n: wn, k, c, data: x.clone() };
            let alpha = oracle::channel_phase(&seq, &oracle_mlp(&cp), slope);
            let beta_only = oracle::window_phase(&seq, &seq, &oracle_mlp(&wp), slope);
            let both = oracle::window_phase(&alpha, &alpha, &oracle_mlp(&wp), slope);
            let original = oracle::window_phase(&alpha, &seq, &oracle_mlp(&wp), slope);

            let tape = Tape::<f64>::new();
            let params = WwaParams { channel: gate_mlp(&tape, &cp, c), window: gate_mlp(&tape, &wp, wn) };
            let s = WindowSequence { data: tape.constant(tensor(&[wn, k, c], &x)), spec };
            let opts = WwaOptions::default();
            let got = [
                cross_channel_attention(&s, &params, &opts).unwrap(),
                cross_window_attention(&s, &params, &opts).unwrap(),
                wwa(&s, &params, &opts).unwrap(),
                wwa(&s, &params, &WwaOptions { eq7_multiplies_original: true, ..opts }).unwrap(),
            ];
            for (i, want) in [alpha, beta_only, both, original].iter().enumerate() {
                worst[i] = worst[i].max(max_abs_diff(got[i].data.value().data(), &want.data));
            }
        }
        worst
    }

    /// Worst deviation of patch merging and patch expanding.
    pub fn patch_cases(n: usize) -> [f64; 2] {
        let mut r = stream(3);
        let mut worst = [0.0f64; 2];
        for _ in 0..n {
            let dims = [0; 3].map(|_| r.random_range(1..=3usize));
            let c = r.random_range(1..=4usize);
            let out = r.random_range(1..=5usize);
            let fine = dims.map(|d| 2 * d);
            let x = uniform(&mut r, fine.iter().product::<usize>() * c, -1.0, 1.0);
            let w = uniform(&mut r, 8 * c * out, -1.0, 1.0);
            let b = uniform(&mut r, out, -1.0, 1.0);
            let want = oracle::patch_merge(&Vol { dims: fine, c, data: x.clone() }, &w, &b);
            let tape = Tape::<f64>::new();
            let lin = Linear { weight: tape.constant(tensor(&[8 * c, out], &w)), bias: tape.constant(tensor(&[out], &b)) };
            let got = patch_merging(tape.constant(tensor(&[fine[0], fine[1], fine[2], c], &x)), &lin).unwrap();
            worst[0] = worst[0].max(max_abs_diff(got.value().data(), &want.data));

            let c2 = 2 * r.random_range(1..=3usize);
            let x = uniform(&mut r, dims.iter().product::<usize>() * c2, -1.0, 1.0);
            let w = uniform(&mut r, c2 * 4 * c2, -1.0, 1.0);
            let b = uniform(&mut r, 4 * c2, -1.0, 1.0);
            let want = oracle::patch_expand(&Vol { dims, c: c2, data: x.clone() }, &w, &b);
            let lin = Linear { weight: tape.constant(tensor(&[c2, 4 * c2], &w)), bias: tape.constant(tensor(&[4 * c2], &b)) };
            let got = patch_expanding(tape.constant(tensor(&[dims[0], dims[1], dims[2], c2], &x)), &lin).unwrap();
            worst[1] = worst[1].max(max_abs_diff(got.value().data(), &want.data));
        }
        worst
    }

    /// Worst deviation of the clamped and zero-border trilinear warps, and
    /// the number of nearest-neighbour label mismatches.
    pub fn warp_cases(n: usize) -> ([f64; 2], usize) {
        let mut r = stream(4);
        let mut worst = [0.0f64; 2];
        let mut label_mismatch = 0;
        for _ in 0..n {
            let dims = [0; 3].map(|_| r.random_range(1..=5usize));
            let c = r.random_range(1..=2usize);
            let nvox: usize = dims.iter().product();
            let img = tensor(&[dims[0], dims[1], dims[2], c], &uniform(&mut r, nvox * c, -1.0, 1.0));
            let phi = tensor(&[dims[0], dims[1], dims[2], 3], &uniform(&mut r, nvox * 3, -3.0, 3.0));
            for (i, (border, clamp)) in [(Border::Clamp, true), (Border::Zeros, false)].into_iter().enumerate() {
                let want = oracle::warp(&vol_of(&img), &vol_of(&phi), clamp);
                let got = warp_image(&img, &phi, border).unwrap();
                worst[i] = worst[i].max(max_abs_diff(got.data(), &want.data));
            }
            let labels: Vec<u16> = (0..nvox).map(|_| r.random_range(0..4u16)).collect();
            let want = oracle::warp_nearest(&labels, dims, &vol_of(&phi));
            let got = warp_nearest(&LabelMap::new(dims, labels).unwrap(), &phi).unwrap();
            label_mismatch += got.data.iter().zip(&want).filter(|(a, b)| a != b).count();
        }
        (worst, label_mismatch)
    }

    /// Dice mismatches (exact comparison) and worst HD95 deviation over
    /// random masks of at most 8^3, plus cases where definedness disagreed.
    pub fn metric_cases(n: usize) -> (usize, f64, usize) {
        let mut r = stream(5);
        let (mut dice_bad, mut hd_worst, mut undefined_bad) = (0, 0.0f64, 0);
        for _ in 0..n {
            let dims = [0; 3].map(|_| r.random_range(1..=8usize));
            let nvox: usize = dims.iter().product();
            let density = r.random_range(0.05..0.7);
            let labels = r.random_range(1..=3u16);
            let draw = |r: &mut morphwin_core::init::SeededRng| -> Vec<u16> {
                (0..nvox).map(|_| if r.random_bool(density) { r.random_range(1..=labels) } else { 0 }).collect()
            };
            let (a, b) = (draw(&mut r), draw(&mut r));
            let spacing = [0; 3].map(|_| r.random_range(0.5..2.5));
            let ma = LabelMap::new(dims, a.clone()).unwrap();
            let mb = LabelMap::new(dims, b.clone()).unwrap();
            for l in 1..=labels {
                if morphwin_core::metrics::dice(&ma, &mb, l) != oracle::dice(&a, &b, l) {
                    dice_bad += 1;
                }
                match (morphwin_core::metrics::hd95(&ma, &mb, l, spacing), oracle::hd95(&a, &b, dims, l, spacing)) {
                    (Ok(got), Some(want)) => hd_worst = hd_worst.max((got - want).abs()),
                    (Err(_), None) => {}
                    _ => undefined_bad += 1,
                }
            }
        }
        (dice_bad, hd_worst, undefined_bad)
    }

    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    /// Round-trips a trained-size checkpoint, an image volume and a field
    /// through files in `dir`, then corrupts each format in every way the
    /// readers guard against. Returns one message per failed check.
    pub fn io_checks(dir: &std::path::Path) -> Vec<String> {
        use morphwin_core::phantom::{make_pair, PhantomSpec};
        use morphwin_core::rfrnet::{init_params, ArchConfig};
        use morphwin_core::volume::{load_field, load_volume, save_field, save_volume, VolumeError, VolumeFile};
        use morphwin_tensor::{CheckpointError, ParamStore};

        let mut fails = Vec::new();
        let mut check = |ok: bool, what: &str| {
            if !ok {
                fails.push(what.to_string());
            }
        };

        let arch = ArchConfig::toy([48, 32, 16], 32, vec![2, 2, 4, 4], [6, 4, 2]);
        let params: ParamStore<f32> = init_params(&arch, 3).unwrap();
        let ckpt = dir.join("model.ckpt");
        params.save(&ckpt).unwrap();
        let back = ParamStore::<f32>::load(&ckpt).unwrap();
        check(back.names().eq(params.names()), "checkpoint names or order changed");
        check(
            params.iter().zip(back.iter()).all(|((_, a), (_, b))| a.shape() == b.shape() && bits(a.data()) == bits(b.data())),
            "checkpoint values not bit-exact",
        );

        let bytes = std::fs::read(&ckpt).unwrap();
        let cuts = [0, 3, 8, 15, 20, 40, bytes.len() / 2, bytes.len() - 1];
        check(
            cuts.iter().all(|&c| matches!(ParamStore::<f32>::read_from(&mut &bytes[..c]), Err(CheckpointError::Truncated(_)))),
            "truncated checkpoint not reported as truncated",
        );
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        check(matches!(ParamStore::<f32>::read_from(&mut bad.as_slice()), Err(CheckpointError::BadMagic)), "checkpoint magic");
        let mut bad = bytes.clone();
        bad.push(0);
        check(matches!(ParamStore::<f32>::read_from(&mut bad.as_slice()), Err(CheckpointError::TrailingData)), "checkpoint trailing");

        let pair = make_pair(&PhantomSpec { seed: 4, ..PhantomSpec::default() }).unwrap();
        let vol = dir.join("moving.mwvol");
        save_volume(&vol, &pair.moving).unwrap();
        let v = load_volume(&vol).unwrap();
        check(
            v.labels == pair.moving.labels
                && v.spacing.map(f64::to_bits) == pair.moving.spacing.map(f64::to_bits)
                && bits(v.intensity.data()) == bits(pair.moving.intensity.data()),
            "volume not bit-exact",
        );
        let fld = dir.join("field.mwvol");
        save_field(&fld, &pair.field, pair.moving.spacing).unwrap();
        let f = load_field(&fld).unwrap();
        check(f.shape() == pair.field.shape() && bits(f.data()) == bits(pair.field.data()), "field not bit-exact");

        let bytes = std::fs::read(&vol).unwrap();
        let read = |b: &[u8]| VolumeFile::read_from(&mut &b[..]);
        check(
            (0..bytes.len()).step_by(997).chain([bytes.len() - 1]).all(|c| matches!(read(&bytes[..c]), Err(VolumeError::Truncated(_)))),
            "truncated volume not reported as truncated",
        );
        let mut bad = bytes.clone();
        bad[2] = b'?';
        check(matches!(read(&bad), Err(VolumeError::BadMagic)), "volume magic");
        let mut bad = bytes.clone();
        bad[6..10].copy_from_slice(&9u32.to_le_bytes());
        check(matches!(read(&bad), Err(VolumeError::Version(9))), "volume version");
        let mut bad = bytes.clone();
        bad[58..62].copy_from_slice(&0x10u32.to_le_bytes());
        check(matches!(read(&bad), Err(VolumeError::Flags(_))), "volume flags");
        let mut bad = bytes.clone();
        bad.extend_from_slice(&[1, 2]);
        check(matches!(read(&bad), Err(VolumeError::TrailingData)), "volume trailing");
        check(load_volume(&fld).is_err(), "field loaded as an image volume");
        check(load_field(&vol).is_err(), "image volume loaded as a field");
        check(load_volume(dir.join("missing.mwvol")).is_err(), "missing file");
        fails
    }
}

pub mod metric_refs {
    use morphwin_core::metrics::{folding_ratio, jacobian_determinants, paired_t_test};
    use morphwin_tensor::Tensor;
    use rand::Rng;

    use super::cases::stream;

    /// `phi(p) = A p` for voxel coordinates `p = (z, y, x)`.
    pub fn linear_field(dims: [usize; 3], a: [[f64; 3]; 3]) -> Tensor<f64> {
        let mut data = Vec::with_capacity(dims.iter().product::<usize>() * 3);
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let p = [z as f64, y as f64, x as f64];
                    for row in &a {
                        data.push(row[0] * p[0] + row[1] * p[1] + row[2] * p[2]);
                    }
                }
            }
        }
        Tensor::new(&[dims[0], dims[1], dims[2], 3], data).unwrap()
    }

    pub fn det3(m: [[f64; 3]; 3]) -> f64 {
        m[0][0] * m[1][1] * m[2][2] + m[0][1] * m[1][2] * m[2][0] + m[0][2] * m[1][0] * m[2][1]
            - m[0][2] * m[1][1] * m[2][0]
            - m[0][1] * m[1][0] * m[2][2]
            - m[0][0] * m[1][2] * m[2][1]
    }

    /// Random linear fields: every interior determinant equals `det(I + A)`
    /// and the folding ratio is 100% or 0% by its sign. Returns the number
    /// of folded and unfolded fields seen.
    pub fn linear_folding_cases(n: usize) -> Result<(usize, usize), String> {
        let mut r = stream(40);
        let (mut folded, mut unfolded) = (0, 0);
        for _ in 0..n {
            let a = [[0.0; 3]; 3].map(|row: [f64; 3]| row.map(|_| r.random_range(-1.6..1.6)));
            let mut jac = a;
            for (i, row) in jac.iter_mut().enumerate() {
                row[i] += 1.0;
            }
            let det = det3(jac);
            if det.abs() < 1e-3 {
                continue;
            }
            let dims = [0; 3].map(|_| r.random_range(3..=6usize));
            let phi = linear_field(dims, a);
            if let Some(d) = jacobian_determinants(&phi).into_iter().find(|d| (d - det).abs() >= 1e-9) {
                return Err(format!("determinant {d} vs analytic {det}"));
            }
            let want = if det <= 0.0 { 100.0 } else { 0.0 };
            let got = folding_ratio(&phi);
            if got != want {
                return Err(format!("folding {got}% for determinant {det}"));
            }
            if det <= 0.0 {
                folded += 1;
            } else {
                unfolded += 1;
            }
        }
        Ok((folded, unfolded))
    }

    /// Paired samples with two-sided t statistics and p-values from an
    /// external statistics package.
    pub const T_TEST_ROWS: [(&[f64], &[f64], f64, f64); 4] = [
        (&[0.71, 0.64, 0.80, 0.59, 0.77, 0.69], &[0.66, 0.61, 0.74, 0.60, 0.70, 0.65], 3.464101615137752, 0.017962884609943983),
        (&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.5, 1.9, 3.6, 4.4, 5.2], -2.5786334848812174, 0.06141597352517044),
        (
            &[0.612, 0.598, 0.634, 0.571, 0.655, 0.620, 0.603, 0.589],
            &[0.580, 0.561, 0.622, 0.570, 0.611, 0.598, 0.575, 0.590],
            3.740863491824978,
            0.007254540827007234,
        ),
        (&[3.1, 2.9], &[1.0, 2.5], 1.4705882352941175, 0.3801744681381932),
    ];

    pub fn t_test_matches_reference() -> Result<(), String> {
        for (a, b, t, p) in T_TEST_ROWS {
            let got = paired_t_test(a, b).map_err(|e| e.0)?;
            if (got.t - t).abs() >= 1e-9 || (got.p - p).abs() >= 1e-9 || got.df != (a.len() - 1) as f64 {
                return Err(format!("t {} p {} vs t {t} p {p}", got.t, got.p));
            }
        }
        Ok(())
    }
}

pub mod invariants {
    use morphwin_core::layers::Linear;
    use morphwin_core::phantom::{make_pair, PhantomSpec};
    use morphwin_core::rfrnet::{init_params, predict_field, ArchConfig};
    use morphwin_core::spatial::{warp_image, warp_nearest, Border};
    use morphwin_core::windowing::{cyclic_shift, window_partition, window_reverse, ShiftDirection, WindowSequence, WindowSpec};
    use morphwin_core::wwa::{hidden_size, wwa, GateMlp, WwaOptions, WwaParams};
    use morphwin_tensor::{Tape, Tensor};
    use rand::Rng;

    use super::cases::{stream, tensor, uniform};

    type Check = Result<(), String>;

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    pub fn partition_roundtrip(seed: u64, window: [usize; 3], grid: [usize; 3], c: usize) -> Check {
        let dims = [0, 1, 2].map(|a| window[a] * grid[a]);
        let x = uniform(&mut stream(seed), dims.iter().product::<usize>() * c, -1e3, 1e3);
        let tape = Tape::<f64>::new();
        let spec = WindowSpec::new(dims, window).map_err(|e| e.to_string())?;
        let seq = window_partition(tape.constant(tensor(&[dims[0], dims[1], dims[2], c], &x)), &spec).map_err(|e| e.to_string())?;
        if seq.data.shape() != [spec.count(), spec.elements(), c] {
            return Err(format!("sequence shape {:?}", seq.data.shape()));
        }
        let back = window_reverse(&seq).map_err(|e| e.to_string())?;
        if bits(back.value().data()) != bits(&x) {
            return Err(format!("partition roundtrip changed values for {dims:?} / {window:?}"));
        }
        Ok(())
    }

    pub fn shift_roundtrip(seed: u64, dims: [usize; 3], shift: [usize; 3], c: usize) -> Check {
        let x = uniform(&mut stream(seed), dims.iter().product::<usize>() * c, -1e3, 1e3);
        let tape = Tape::<f64>::new();
        let v = tape.constant(tensor(&[dims[0], dims[1], dims[2], c], &x));
        for first in [ShiftDirection::Backward, ShiftDirection::Forward] {
            let second = match first {
                ShiftDirection::Backward => ShiftDirection::Forward,
                ShiftDirection::Forward => ShiftDirection::Backward,
            };
            let there = cyclic_shift(v, shift, first).map_err(|e| e.to_string())?;
            let back = cyclic_shift(there, shift, second).map_err(|e| e.to_string())?;
            if bits(back.value().data()) != bits(&x) {
                return Err(format!("shift roundtrip changed values for {dims:?} / {shift:?}"));
            }
        }
        Ok(())
    }

    /// Rows of large, partly masked logits.
    pub fn softmax_rows(seed: u64, rows: usize, cols: usize, scale: f64) -> Check {
        let mut r = stream(seed);
        let mut logits = uniform(&mut r, rows * cols, -scale, scale);
        for row in 0..rows {
            for col in 1..cols {
                if r.random_bool(0.3) {
                    logits[row * cols + col] -= 1e9;
                }
            }
        }
        let tape = Tape::<f64>::new();
        let p = tape.constant(tensor(&[rows, cols], &logits)).softmax(-1).map_err(|e| e.to_string())?;
        let p = p.value();
        for row in p.data().chunks(cols) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("row sums to {s}"));
            }
        }
        Ok(())
    }

    fn zero_mlp(tape: &Tape<f64>, width: usize) -> GateMlp<'_, f64> {
        let h = hidden_size(width);
        GateMlp {
            fc1: Linear { weight: tape.constant(Tensor::zeros(&[width, h])), bias: tape.constant(Tensor::zeros(&[h])) },
            fc2: Linear { weight: tape.constant(Tensor::zeros(&[h, width])), bias: tape.constant(Tensor::zeros(&[width])) },
        }
    }

    pub fn zero_parameter_wwa(seed: u64, n: usize, k: usize, c: usize) -> Check {
        let x = uniform(&mut stream(seed), n * k * c, -1e3, 1e3);
        let tape = Tape::<f64>::new();
        let seq = WindowSequence {
            data: tape.constant(tensor(&[n, k, c], &x)),
            spec: WindowSpec::new([n, k, 1], [1, k, 1]).map_err(|e| e.to_string())?,
        };
        let p = WwaParams { channel: zero_mlp(&tape, c), window: zero_mlp(&tape, n) };
        // Both gates sit at sigmoid(0) = 0.5; the variant that re-weights the
        // original input sees only the window gate.
        for (eq7_multiplies_original, factor) in [(false, 0.25), (true, 0.5)] {
            let out = wwa(&seq, &p, &WwaOptions { eq7_multiplies_original, ..WwaOptions::default() }).map_err(|e| e.to_string())?;
            let want: Vec<f64> = x.iter().map(|v| v * factor).collect();
            if bits(out.data.value().data()) != bits(&want) {
                return Err(format!("zero-parameter weighting is not exactly {factor} for [{n}, {k}, {c}]"));
            }
        }
        Ok(())
    }

    /// A freshly initialised network predicts a zero field and the warp it
    /// implies leaves images and labels untouched.
    pub fn zero_head_identity(arch: &ArchConfig, seed: u64) -> Check {
        let params = init_params::<f64>(arch, seed).map_err(|e| e.to_string())?;
        let spec = PhantomSpec { seed, dims: arch.input_dims, control_spacing: 8, ..PhantomSpec::default() };
        let pair = make_pair(&spec).map_err(|e| e.to_string())?;
        let moving: Tensor<f64> = pair.moving.intensity.cast();
        let fixed: Tensor<f64> = pair.fixed.intensity.cast();
        let phi = predict_field(&params, arch, &moving, &fixed).map_err(|e| e.to_string())?;
        if phi.data().iter().any(|&v| v != 0.0) {
            return Err("fresh network predicts a nonzero field".into());
        }
        for border in [Border::Clamp, Border::Zeros] {
            let warped = warp_image(&moving, &phi, border).map_err(|e| e.to_string())?;
            if bits(warped.data()) != bits(moving.data()) {
                return Err(format!("zero field changes the image ({border:?})"));
            }
        }
        if warp_nearest(&pair.moving.labels, &phi).map_err(|e| e.to_string())? != pair.moving.labels {
            return Err("zero field changes the labels".into());
        }
        Ok(())
    }

    pub fn window_count() -> Check {
        let spec = WindowSpec::new([48, 32, 16], [6, 4, 2]).map_err(|e| e.to_string())?;
        match (spec.count(), spec.elements()) {
            (512, 48) => Ok(()),
            (n, k) => Err(format!("{n} windows of {k} elements")),
        }
    }
}
