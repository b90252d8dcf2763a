//! Synthetic labeled volumes and smooth ground-truth deformations.
//!
//! Randomness comes from [`crate::init::rng`] with a fixed stream per
//! purpose, so every output is a pure function of the spec.

use morphwin_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::init::{rng, SeededRng};
use crate::metrics::folding_ratio;
use crate::spatial::{warp_image, warp_nearest, Border};
use crate::volume::{LabelMap, LabeledVolume};

const ORGAN_STREAM: u64 = 11;
const TEXTURE_STREAM: u64 = 12;
const FIELD_STREAM: u64 = 13;
const PAIR_STREAM: u64 = 14;
const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub organs: usize,
    /// Ellipsoid semi-axes as fractions of the volume extent per axis.
    pub radius: (f64, f64),
    /// Width of the intensity transition at organ boundaries (voxels).
    pub edge_softness: f64,
    /// Range of organ intensities.
    pub intensity: (f64, f64),
    pub background: f64,
    /// Peak deviation of the smooth background texture.
    pub texture: f64,
    /// Largest displacement magnitude of the ground-truth field (voxels).
    pub amplitude: f64,
    /// Control-point spacing of both the texture and the field (voxels).
    pub control_spacing: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 0,
            dims: [48, 32, 16],
            spacing: [1.0; 3],
            organs: 4,
            radius: (0.14, 0.24),
            edge_softness: 0.75,
            intensity: (0.45, 0.95),
            background: 0.15,
            texture: 0.06,
            amplitude: 4.0,
            control_spacing: 16,
        }
    }
}

impl PhantomSpec {
    fn check(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Data(format!("phantom dims {:?} contain a zero", self.dims)));
        }
        if !(self.amplitude >= 0.0) || self.control_spacing == 0 {
            return Err(Error::Data("amplitude must be >= 0 and control spacing >= 1".into()));
        }
        if !(0.0 < self.radius.0 && self.radius.0 <= self.radius.1 && self.radius.1 < 0.5) {
            return Err(Error::Data(format!("radius range {:?} must satisfy 0 < lo <= hi < 0.5", self.radius)));
        }
        if self.organs > u16::MAX as usize {
            return Err(Error::Data(format!("{} organs exceed the label range", self.organs)));
        }
        Ok(())
    }
}

/// Random control grid with `channels` values per node, trilinearly
/// upsampled to `dims`; values before upsampling are uniform in [-1, 1].
fn smooth_noise(dims: [usize; 3], spacing: usize, channels: usize, r: &mut SeededRng) -> Vec<f64> {
    let grid = dims.map(|d| d.div_ceil(spacing) + 1);
    let control: Vec<f64> = (0..grid.iter().product::<usize>() * channels)
        .map(|_| r.random_range(-1.0..=1.0))
        .collect();
    let [d, h, w] = dims;
    let mut out = vec![0.0; d * h * w * channels];
    let coord = |p: usize, a: usize| -> (usize, usize, f64) {
        let u = if dims[a] > 1 {
            p as f64 * (grid[a] - 1) as f64 / (dims[a] - 1) as f64
        } else {
            0.0
        };
        let i0 = (u.floor() as usize).min(grid[a] - 1);
        let i1 = (i0 + 1).min(grid[a] - 1);
        (i0, i1, u - i0 as f64)
    };
    for z in 0..d {
        let (z0, z1, fz) = coord(z, 0);
        for y in 0..h {
            let (y0, y1, fy) = coord(y, 1);
            for x in 0..w {
                let (x0, x1, fx) = coord(x, 2);
                let v = (z * h + y) * w + x;
                for c in 0..channels {
                    let at = |a: usize, b: usize, e: usize| control[((a * grid[1] + b) * grid[2] + e) * channels + c];
                    let lerp = |u: f64, a: f64, b: f64| a + (b - a) * u;
                    let c00 = lerp(fx, at(z0, y0, x0), at(z0, y0, x1));
                    let c01 = lerp(fx, at(z0, y1, x0), at(z0, y1, x1));
                    let c10 = lerp(fx, at(z1, y0, x0), at(z1, y0, x1));
                    let c11 = lerp(fx, at(z1, y1, x0), at(z1, y1, x1));
                    out[v * channels + c] = lerp(fz, lerp(fy, c00, c01), lerp(fy, c10, c11));
                }
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Ellipsoidal organs with soft edges on a textured background. Organs are
/// placed in label order; later ones never claim voxels already labeled.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<LabeledVolume> {
    spec.check()?;
    let [d, h, w] = spec.dims;
    let n = d * h * w;
    let mut tex_rng = rng(spec.seed, TEXTURE_STREAM);
    let texture = smooth_noise(spec.dims, spec.control_spacing, 1, &mut tex_rng);
    let mut intensity: Vec<f64> = texture.iter().map(|t| spec.background + spec.texture * t).collect();
    let mut labels = vec![0u16; n];

    let mut r = rng(spec.seed, ORGAN_STREAM);
    let mut values: Vec<f64> = (0..spec.organs)
        .map(|i| {
            let t = if spec.organs > 1 { i as f64 / (spec.organs - 1) as f64 } else { 0.5 };
            spec.intensity.0 + t * (spec.intensity.1 - spec.intensity.0)
        })
        .collect();
    values.shuffle(&mut r);

    for (o, &value) in values.iter().enumerate() {
        let label = (o + 1) as u16;
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let radii = spec.dims.map(|dim| (r.random_range(spec.radius.0..=spec.radius.1) * dim as f64).max(1.0));
            let centre: [f64; 3] = [0, 1, 2].map(|a| {
                let lo = radii[a].min((spec.dims[a] - 1) as f64 / 2.0);
                let hi = (spec.dims[a] - 1) as f64 - lo;
                r.random_range(lo..=hi)
            });
            let inside = |z: usize, y: usize, x: usize| -> f64 {
                let p = [z as f64, y as f64, x as f64];
                (0..3).map(|a| ((p[a] - centre[a]) / radii[a]).powi(2)).sum::<f64>().sqrt()
            };
            let claimable = (0..n).any(|v| labels[v] == 0 && inside(v / (h * w), (v / w) % h, v % w) <= 1.0);
            if !claimable {
                continue;
            }
            let mean_radius = radii.iter().sum::<f64>() / 3.0;
            for v in 0..n {
                if labels[v] != 0 {
                    continue;
                }
                let rho = inside(v / (h * w), (v / w) % h, v % w);
                let weight = sigmoid((1.0 - rho) * mean_radius / spec.edge_softness);
                intensity[v] = intensity[v] * (1.0 - weight) + value * weight;
                if rho <= 1.0 {
                    labels[v] = label;
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Data(format!(
                "could not place organ {label} in a {d}x{h}x{w} volume; use larger dims or fewer organs"
            )));
        }
    }

    let data = intensity.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(LabeledVolume {
        intensity: Tensor::new(&[d, h, w, 1], data)?,
        labels: LabelMap::new(spec.dims, labels)?,
        spacing: spec.spacing,
    })
}

/// Smooth displacement field whose largest vector has length `amplitude`.
pub fn random_smooth_field(spec: &PhantomSpec) -> Result<Tensor<f32>> {
    spec.check()?;
    let [d, h, w] = spec.dims;
    let mut r = rng(spec.seed, FIELD_STREAM);
    let raw = smooth_noise(spec.dims, spec.control_spacing, 3, &mut r);
    let max_norm = raw
        .chunks_exact(3)
        .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
        .fold(0.0, f64::max);
    let scale = if max_norm > 0.0 { spec.amplitude / max_norm } else { 0.0 };
    let data = raw.iter().map(|v| (v * scale) as f32).collect();
    Ok(Tensor::new(&[d, h, w, 3], data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub moving: LabeledVolume,
    pub fixed: LabeledVolume,
    /// Field that produced `moving` from `fixed`; diagnostics only.
    pub field: Tensor<f32>,
}

/// `fixed` is a phantom; `moving` is it warped by a random smooth field.
pub fn make_pair(spec: &PhantomSpec) -> Result<Pair> {
    let fixed = generate_phantom(spec)?;
    let field = random_smooth_field(spec)?;
    let moving = LabeledVolume {
        intensity: warp_image(&fixed.intensity, &field, Border::Clamp)?,
        labels: warp_nearest(&fixed.labels, &field)?,
        spacing: fixed.spacing,
    };
    for label in fixed.labels.labels() {
        let before = fixed.labels.count(label);
        let after = moving.labels.count(label);
        if 2 * after < before {
            log::warn!("label {label} kept {after} of {before} voxels after deformation (seed {})", spec.seed);
        }
    }
    if folding_ratio(&field) > 0.0 {
        log::warn!("ground-truth field for seed {} folds", spec.seed);
    }
    Ok(Pair { moving, fixed, field })
}

/// Seed of the `index`-th pair in a dataset generated from `seed`.
pub fn pair_seed(seed: u64, index: usize) -> u64 {
    rng(seed, PAIR_STREAM ^ ((index as u64) << 8)).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;

    #[test]
    fn same_seed_same_volume() {
        let spec = PhantomSpec { seed: 9, ..PhantomSpec::default() };
        assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
        let other = PhantomSpec { seed: 10, ..PhantomSpec::default() };
        assert_ne!(generate_phantom(&spec).unwrap(), generate_phantom(&other).unwrap());
    }

    #[test]
    fn no_organs_means_background_only() {
        let v = generate_phantom(&PhantomSpec { organs: 0, ..PhantomSpec::default() }).unwrap();
        assert!(v.labels.data.iter().all(|&l| l == 0));
        v.validate().unwrap();
    }

    #[test]
    fn every_label_is_present() {
        for seed in 0..5 {
            let v = generate_phantom(&PhantomSpec { seed, ..PhantomSpec::default() }).unwrap();
            assert_eq!(v.labels.labels(), vec![1, 2, 3, 4]);
            v.validate().unwrap();
        }
    }

    #[test]
    fn tiny_volume_is_rejected() {
        let spec = PhantomSpec { dims: [2, 2, 2], organs: 20, ..PhantomSpec::default() };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn field_amplitude_contract() {
        let zero = random_smooth_field(&PhantomSpec { amplitude: 0.0, ..PhantomSpec::default() }).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let spec = PhantomSpec { seed: 3, amplitude: 1.5, ..PhantomSpec::default() };
        let f = random_smooth_field(&spec).unwrap();
        let max = f
            .data()
            .chunks_exact(3)
            .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
            .fold(0.0f32, f32::max);
        assert!(max <= 1.5 + 1e-5 && max > 1.4);
    }

    #[test]
    fn default_fields_do_not_fold() {
        for seed in 0..10 {
            let f = random_smooth_field(&PhantomSpec { seed, ..PhantomSpec::default() }).unwrap();
            assert_eq!(folding_ratio(&f), 0.0);
        }
    }

    #[test]
    fn zero_amplitude_pair_is_identical() {
        let p = make_pair(&PhantomSpec { amplitude: 0.0, ..PhantomSpec::default() }).unwrap();
        assert_eq!(p.moving, p.fixed);
        for l in p.fixed.labels.labels() {
            assert_eq!(dice(&p.moving.labels, &p.fixed.labels, l), 1.0);
        }
    }

    #[test]
    fn default_pair_is_misaligned() {
        let p = make_pair(&PhantomSpec::default()).unwrap();
        let labels = p.fixed.labels.labels();
        let mean = labels.iter().map(|&l| dice(&p.moving.labels, &p.fixed.labels, l)).sum::<f64>() / labels.len() as f64;
        assert!(mean < 1.0);
    }

    #[test]
    fn misalignment_grows_with_amplitude() {
        let mean_dice = |amplitude: f64| {
            let mut total = 0.0;
            for seed in 0..5 {
                let p = make_pair(&PhantomSpec { seed, amplitude, ..PhantomSpec::default() }).unwrap();
                let labels = p.fixed.labels.labels();
                total += labels.iter().map(|&l| dice(&p.moving.labels, &p.fixed.labels, l)).sum::<f64>() / labels.len() as f64;
            }
            total / 5.0
        };
        let (a, b, c) = (mean_dice(1.0), mean_dice(2.0), mean_dice(4.0));
        assert!(a > b && b > c, "{a} {b} {c}");
    }

    #[test]
    fn pair_seeds_differ() {
        assert_ne!(pair_seed(7, 0), pair_seed(7, 1));
        assert_ne!(pair_seed(7, 0), pair_seed(8, 0));
        assert_eq!(pair_seed(7, 3), pair_seed(7, 3));
    }
}
