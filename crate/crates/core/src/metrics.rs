//! Evaluation metrics: Dice, HD95, Jacobian folding and the paired t-test.

use std::fmt::Write as _;

use morphwin_tensor::{Real, Tensor};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::volume::LabelMap;

/// A metric that has no value for the given inputs.
#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("undefined metric: {0}")]
pub struct Undefined(pub String);

fn same_grid(a: &LabelMap, b: &LabelMap) {
    assert_eq!(a.dims, b.dims, "label maps on different grids");
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both sets are empty.
///
/// # Panics
/// If the maps have different dims.
pub fn dice(a: &LabelMap, b: &LabelMap, label: u16) -> f64 {
    same_grid(a, b);
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

/// Foreground voxels of `label` with at least one background face
/// neighbour; the outside of the volume counts as background.
pub fn surface(map: &LabelMap, label: u16) -> Vec<[usize; 3]> {
    let [d, h, w] = map.dims;
    let mut out = Vec::new();
    let fg = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && map.at(z as usize, y as usize, x as usize) == label
    };
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if map.at(z, y, x) != label {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let exposed = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
                    .iter()
                    .any(|&(dz, dy, dx)| !fg(zi + dz, yi + dy, xi + dx));
                if exposed {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// One pass of the 1D squared distance transform over samples at
/// positions `i * step`, in place. Infinite entries are empty.
fn edt_line(f: &mut [f64], step: f64, pos: &mut Vec<f64>, val: &mut Vec<f64>, bounds: &mut Vec<f64>) {
    pos.clear();
    val.clear();
    bounds.clear();
    for (i, &v) in f.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let q = i as f64 * step;
        // drop parabolas hidden by the new one
        while let Some(&p) = pos.last() {
            let pv = *val.last().unwrap();
            let s = ((v + q * q) - (pv + p * p)) / (2.0 * (q - p));
            if s <= *bounds.last().unwrap() {
                pos.pop();
                val.pop();
                bounds.pop();
            } else {
                bounds.push(s);
                break;
            }
        }
        if pos.is_empty() {
            bounds.push(f64::NEG_INFINITY);
        }
        pos.push(q);
        val.push(v);
    }
    if pos.is_empty() {
        return;
    }
    let mut k = 0;
    for (i, out) in f.iter_mut().enumerate() {
        let x = i as f64 * step;
        while k + 1 < pos.len() && bounds[k + 1] < x {
            k += 1;
        }
        *out = (x - pos[k]).powi(2) + val[k];
    }
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest seed.
pub fn squared_distance_map(dims: [usize; 3], seeds: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut f = vec![f64::INFINITY; d * h * w];
    for s in seeds {
        f[(s[0] * h + s[1]) * w + s[2]] = 0.0;
    }
    let (mut pos, mut val, mut bounds) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    let lens = [d, h, w];
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let n = lens[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..d * h * w).filter(|&i| (i / stride) % n == 0).collect();
        for start in others {
            line.clear();
            line.extend((0..n).map(|i| f[start + i * stride]));
            edt_line(&mut line, spacing[axis], &mut pos, &mut val, &mut bounds);
            for (i, &v) in line.iter().enumerate() {
                f[start + i * stride] = v;
            }
        }
    }
    f
}

/// Linear interpolation between order statistics at `q * (n - 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// 95th percentile of the pooled directed surface distances (mm).
///
/// # Panics
/// If the maps have different dims.
pub fn hd95(a: &LabelMap, b: &LabelMap, label: u16, spacing: [f64; 3]) -> Result<f64, Undefined> {
    same_grid(a, b);
    let sa = surface(a, label);
    let sb = surface(b, label);
    if sa.is_empty() || sb.is_empty() {
        return Err(Undefined(format!("label {label} is empty in at least one map")));
    }
    let [_, h, w] = a.dims;
    let da = squared_distance_map(a.dims, &sa, spacing);
    let db = squared_distance_map(b.dims, &sb, spacing);
    let mut dist: Vec<f64> = sa
        .iter()
        .map(|v| db[(v[0] * h + v[1]) * w + v[2]].sqrt())
        .chain(sb.iter().map(|v| da[(v[0] * h + v[1]) * w + v[2]].sqrt()))
        .collect();
    dist.sort_by(f64::total_cmp);
    Ok(percentile(&dist, 0.95))
}

/// Jacobian determinants of `x -> x + phi(x)` at interior voxels, by central
/// differences, in z-y-x order over `[1, n-1)` on each axis.
pub fn jacobian_determinants<T: Real>(phi: &Tensor<T>) -> Vec<f64> {
    let s = phi.shape();
    assert!(s.len() == 4 && s[3] == 3, "field shape {s:?} is not [D, H, W, 3]");
    let (d, h, w) = (s[0], s[1], s[2]);
    if d < 3 || h < 3 || w < 3 {
        return Vec::new();
    }
    let p = phi.data();
    let at = |z: usize, y: usize, x: usize, c: usize| p[((z * h + y) * w + x) * 3 + c].as_f64();
    (1..d - 1)
        .into_par_iter()
        .flat_map_iter(|z| {
            (1..h - 1).flat_map(move |y| {
                (1..w - 1).map(move |x| {
                    let mut j = [[0.0; 3]; 3];
                    for c in 0..3 {
                        j[c][0] = (at(z + 1, y, x, c) - at(z - 1, y, x, c)) / 2.0;
                        j[c][1] = (at(z, y + 1, x, c) - at(z, y - 1, x, c)) / 2.0;
                        j[c][2] = (at(z, y, x + 1, c) - at(z, y, x - 1, c)) / 2.0;
                        j[c][c] += 1.0;
                    }
                    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
                })
            })
        })
        .collect()
}

/// Percentage of interior voxels with a non-positive Jacobian determinant.
/// Fields without interior voxels report 0.
pub fn folding_ratio<T: Real>(phi: &Tensor<T>) -> f64 {
    let dets = jacobian_determinants(phi);
    if dets.is_empty() {
        return 0.0;
    }
    100.0 * dets.iter().filter(|&&v| v <= 0.0).count() as f64 / dets.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, Undefined> {
    if a.len() != b.len() {
        return Err(Undefined(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Undefined("paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(Undefined("differences have zero variance".into()));
    }
    let t = mean / (var / n as f64).sqrt();
    let df = (n - 1) as f64;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Undefined(e.to_string()))?;
    Ok(TTest { t, df, p: (2.0 * dist.sf(t.abs())).min(1.0) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelScore {
    pub label: u16,
    pub dice: f64,
    /// `None` when undefined (label missing from one map).
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scores: Vec<LabelScore>,
    pub folding_percent: Option<f64>,
    pub warnings: Vec<String>,
}

fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    Some((m, var.sqrt()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"))
}

impl EvalReport {
    /// Scores `warped` against `fixed` for `labels` (default: every nonzero
    /// label of either map).
    pub fn compute<T: Real>(
        warped: &LabelMap,
        fixed: &LabelMap,
        spacing: [f64; 3],
        field: Option<&Tensor<T>>,
        labels: Option<&[u16]>,
    ) -> Self {
        let labels: Vec<u16> = match labels {
            Some(l) => l.to_vec(),
            None => {
                let mut l = fixed.labels();
                l.extend(warped.labels());
                l.sort_unstable();
                l.dedup();
                l
            }
        };
        let scores: Vec<LabelScore> = labels
            .par_iter()
            .map(|&label| LabelScore {
                label,
                dice: dice(warped, fixed, label),
                hd95: hd95(warped, fixed, label, spacing).ok(),
            })
            .collect();
        let warnings = scores
            .iter()
            .filter(|s| s.hd95.is_none())
            .map(|s| format!("label {} is absent from one of the maps", s.label))
            .collect();
        EvalReport {
            scores,
            folding_percent: field.map(folding_ratio),
            warnings,
        }
    }

    pub fn dice_values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.dice).collect()
    }

    pub fn dice_summary(&self) -> Option<(f64, f64)> {
        mean_std(&self.dice_values())
    }

    /// Mean and standard deviation over labels where HD95 is defined.
    pub fn hd95_summary(&self) -> Option<(f64, f64)> {
        mean_std(&self.scores.iter().filter_map(|s| s.hd95).collect::<Vec<_>>())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sc in &self.scores {
            let _ = writeln!(s, "label {:>3}  dice {:.4}  hd95 {}", sc.label, sc.dice, match sc.hd95 {
                Some(v) => format!("{v:.3} mm"),
                None => "undefined".into(),
            });
        }
        if let Some((m, sd)) = self.dice_summary() {
            let _ = writeln!(s, "mean dice {m:.4} ± {sd:.4}");
        }
        if let Some((m, sd)) = self.hd95_summary() {
            let _ = writeln!(s, "mean hd95 {m:.3} ± {sd:.3} mm");
        }
        if let Some(f) = self.folding_percent {
            let _ = writeln!(s, "folding {f:.4} % of interior voxels");
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,dice,hd95_mm\n");
        for sc in &self.scores {
            let _ = writeln!(s, "{},{},{}", sc.label, sc.dice, fmt_opt(sc.hd95));
        }
        let d = self.dice_summary();
        let h = self.hd95_summary();
        let _ = writeln!(s, "mean,{},{}", fmt_opt(d.map(|v| v.0)), fmt_opt(h.map(|v| v.0)));
        let _ = writeln!(s, "std,{},{}", fmt_opt(d.map(|v| v.1)), fmt_opt(h.map(|v| v.1)));
        let _ = writeln!(s, "folding_percent,{}", fmt_opt(self.folding_percent));
        for w in &self.warnings {
            let _ = writeln!(s, "# warning: {w}");
        }
        s
    }

    /// Parses `to_csv` output; `#` lines are ignored.
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some("label,dice,hd95_mm") => {}
            other => return Err(format!("expected header label,dice,hd95_mm, found {other:?}")),
        }
        let parse_opt = |v: &str| -> Result<Option<f64>, String> {
            if v == "undefined" {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|e| format!("bad number {v:?}: {e}"))
            }
        };
        let mut report = EvalReport { scores: Vec::new(), folding_percent: None, warnings: Vec::new() };
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            match cols.as_slice() {
                ["mean" | "std", ..] => {}
                ["folding_percent", v] => report.folding_percent = parse_opt(v)?,
                [label, dice, hd] => report.scores.push(LabelScore {
                    label: label.parse().map_err(|e| format!("bad label {label:?}: {e}"))?,
                    dice: dice.parse().map_err(|e| format!("bad dice {dice:?}: {e}"))?,
                    hd95: parse_opt(hd)?,
                }),
                _ => return Err(format!("malformed row {line:?}")),
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(dims: [usize; 3], at: [usize; 3]) -> LabelMap {
        let mut m = LabelMap::zeros(dims);
        let i = m.index(at[0], at[1], at[2]);
        m.data[i] = 1;
        m
    }

    #[test]
    fn dice_cases() {
        let a = single([4, 4, 4], [1, 1, 1]);
        let b = single([4, 4, 4], [2, 2, 2]);
        assert_eq!(dice(&a, &a, 1), 1.0);
        assert_eq!(dice(&a, &b, 1), 0.0);
        assert_eq!(dice(&a, &b, 7), 1.0);
        assert_eq!(dice(&a, &LabelMap::zeros([4, 4, 4]), 1), 0.0);
    }

    #[test]
    fn hd95_single_voxels() {
        let a = single([8, 4, 4], [1, 1, 1]);
        let b = single([8, 4, 4], [4, 1, 1]);
        assert_eq!(hd95(&a, &b, 1, [1.0; 3]).unwrap(), 3.0);
        assert_eq!(hd95(&a, &b, 1, [2.0, 1.0, 1.0]).unwrap(), 6.0);
        assert_eq!(hd95(&a, &a, 1, [1.0; 3]).unwrap(), 0.0);
        assert!(hd95(&a, &LabelMap::zeros([8, 4, 4]), 1, [1.0; 3]).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0], 0.95), 9.5);
        assert_eq!(percentile(&[4.0], 0.95), 4.0);
    }

    #[test]
    fn distance_map_matches_brute_force() {
        let dims = [5, 6, 7];
        let seeds = [[0, 0, 0], [4, 5, 6], [2, 3, 1]];
        let sp = [1.5, 0.7, 2.0];
        let f = squared_distance_map(dims, &seeds, sp);
        for z in 0..5 {
            for y in 0..6 {
                for x in 0..7 {
                    let want = seeds
                        .iter()
                        .map(|s| {
                            let dz = (z as f64 - s[0] as f64) * sp[0];
                            let dy = (y as f64 - s[1] as f64) * sp[1];
                            let dx = (x as f64 - s[2] as f64) * sp[2];
                            dz * dz + dy * dy + dx * dx
                        })
                        .fold(f64::INFINITY, f64::min);
                    assert!((f[(z * 6 + y) * 7 + x] - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn folding_of_linear_fields() {
        let zero = Tensor::<f64>::zeros(&[5, 5, 5, 3]);
        assert_eq!(folding_ratio(&zero), 0.0);
        let scale = Tensor::<f64>::from_fn(&[5, 5, 5, 3], |i| {
            let v = i / 3;
            let c = [v / 25, (v / 5) % 5, v % 5][i % 3];
            0.1 * (c as f64 - 2.0)
        });
        let dets = jacobian_determinants(&scale);
        assert!(dets.iter().all(|d| (d - 1.1f64.powi(3)).abs() < 1e-12));
        let flip = Tensor::<f64>::from_fn(&[5, 5, 5, 3], |i| if i % 3 == 2 { -2.0 * ((i / 3) % 5) as f64 + 3.0 } else { 0.0 });
        assert_eq!(folding_ratio(&flip), 100.0);
    }

    #[test]
    fn t_test_degenerate_inputs() {
        assert!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(paired_t_test(&[2.0; 4], &[1.0; 4]).is_err());
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn report_csv_roundtrip() {
        let a = single([6, 6, 6], [1, 1, 1]);
        let mut b = a.clone();
        let i = b.index(3, 1, 1);
        b.data[i] = 1;
        let r = EvalReport::compute::<f64>(&a, &b, [1.0; 3], Some(&Tensor::zeros(&[6, 6, 6, 3])), None);
        let csv = r.to_csv();
        assert!(csv.starts_with("label,dice,hd95_mm\n"));
        assert!(csv.contains("\nmean,") && csv.contains("\nstd,") && csv.contains("\nfolding_percent,0\n"));
        assert_eq!(EvalReport::from_csv(&csv).unwrap(), EvalReport { warnings: vec![], ..r.clone() });
        assert!(r.to_text().contains("folding"));
    }
}
