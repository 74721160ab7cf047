//! Evaluation metrics on binary 3D masks: Dice and the 95th-percentile
//! Hausdorff distance, plus the tab-separated per-case report.

use std::fmt::Write as _;

use crate::error::{usage, Result};

/// Binary volume in `(H, W, D)` row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(usage(format!("mask has {} voxels, dims {dims:?} imply {}", data.len(), dims.iter().product::<usize>())));
        }
        Ok(Self { dims, data })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self { dims, data: vec![false; dims.iter().product()] }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    /// Voxels whose label equals `class`.
    pub fn from_labels(labels: &[u8], dims: [usize; 3], class: u8) -> Result<Self> {
        Self::new(dims, labels.iter().map(|&l| l == class).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [_, w, d] = self.dims;
        [idx / (w * d), (idx / d) % w, idx % d]
    }

    /// Foreground voxels with at least one background 6-neighbour; the
    /// outside of the volume counts as background.
    pub fn surface(&self) -> Mask {
        let [h, w, d] = self.dims;
        Mask::from_fn(self.dims, |i, j, k| {
            if !self.data[self.index(i, j, k)] {
                return false;
            }
            if i == 0 || j == 0 || k == 0 || i + 1 == h || j + 1 == w || k + 1 == d {
                return true;
            }
            let nb = [
                self.index(i - 1, j, k),
                self.index(i + 1, j, k),
                self.index(i, j - 1, k),
                self.index(i, j + 1, k),
                self.index(i, j, k - 1),
                self.index(i, j, k + 1),
            ];
            nb.iter().any(|&n| !self.data[n])
        })
    }
}

/// `2|g∩y| / (|g| + |y|)`, with two empty masks scoring 1.
pub fn dice_score(g: &Mask, y: &Mask) -> Result<f64> {
    if g.dims != y.dims {
        return Err(usage(format!("dice: mask dims {:?} and {:?} differ", g.dims, y.dims)));
    }
    let (mut inter, mut sg, mut sy) = (0usize, 0usize, 0usize);
    for (&a, &b) in g.data.iter().zip(&y.data) {
        inter += (a && b) as usize;
        sg += a as usize;
        sy += b as usize;
    }
    if sg + sy == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sg + sy) as f64)
}

/// Squared distance to the nearest `true` voxel for every voxel, with
/// anisotropic spacing. Separable lower-envelope transform applied along
/// `H`, then `W`, then `D`; `None` where the mask is empty.
pub fn squared_distance_transform(mask: &Mask, spacing: [f64; 3]) -> Option<Vec<f64>> {
    if mask.is_empty() {
        return None;
    }
    let dims = mask.dims;
    let mut f: Vec<f64> = mask.data.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..dims[others[0]] {
            for b in 0..dims[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|q| f[base + q * strides[axis]]));
                lower_envelope(&line, spacing[axis], &mut out);
                for (q, v) in out.iter().enumerate() {
                    f[base + q * strides[axis]] = *v;
                }
            }
        }
    }
    Some(f)
}

/// One-dimensional squared-distance transform of sampled function `f` with
/// sample spacing `s`: `out[q] = min_p f[p] + (s·(q − p))²`.
fn lower_envelope(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    let finite: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if finite.is_empty() {
        out.resize(n, f64::INFINITY);
        return;
    }
    let s2 = s * s;
    let key = |p: usize| f[p] + s2 * (p * p) as f64;
    let meet = |p: usize, q: usize| (key(q) - key(p)) / (2.0 * s2 * (q as f64 - p as f64));
    let mut hull = vec![finite[0]];
    let mut bounds = vec![f64::NEG_INFINITY];
    for &q in &finite[1..] {
        let mut z = meet(hull[hull.len() - 1], q);
        while hull.len() > 1 && z <= bounds[bounds.len() - 1] {
            hull.pop();
            bounds.pop();
            z = meet(hull[hull.len() - 1], q);
        }
        hull.push(q);
        bounds.push(z);
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < hull.len() && bounds[k + 1] < q as f64 {
            k += 1;
        }
        // Neighbouring parabolas can tie near a boundary; take the exact minimum.
        let mut best = f64::INFINITY;
        for &p in &hull[k.saturating_sub(1)..(k + 2).min(hull.len())] {
            let dq = s * (q as f64 - p as f64);
            best = best.min(f[p] + dq * dq);
        }
        out.push(best);
    }
}

/// Linear interpolation between order statistics at rank `q·(n − 1)`.
pub fn quantile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= values.len() || frac == 0.0 {
        return Some(values[lo]);
    }
    Some(values[lo] + frac * (values[lo + 1] - values[lo]))
}

/// Surface-to-surface distances from every surface voxel of `from` to the
/// nearest surface voxel of `to`.
pub fn directed_surface_distances(from: &Mask, to: &Mask, spacing: [f64; 3]) -> Option<Vec<f64>> {
    let target = to.surface();
    let dt = squared_distance_transform(&target, spacing)?;
    let source = from.surface();
    let d = source.data.iter().zip(&dt).filter(|(&s, _)| s).map(|(_, &v)| v.sqrt()).collect::<Vec<_>>();
    if d.is_empty() {
        None
    } else {
        Some(d)
    }
}

/// Outcome of a surface-distance metric. `Undefined` when exactly one mask is
/// empty; such cases are reported but left out of averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distance {
    Value(f64),
    Undefined,
}

impl Distance {
    pub fn value(self) -> Option<f64> {
        match self {
            Distance::Value(v) => Some(v),
            Distance::Undefined => None,
        }
    }
}

impl std::fmt::Display for Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Distance::Value(v) => write!(f, "{v:.4}"),
            Distance::Undefined => f.write_str("undefined"),
        }
    }
}

fn symmetric(g: &Mask, y: &Mask, spacing: [f64; 3], reduce: impl Fn(&mut [f64]) -> f64) -> Result<Distance> {
    if g.dims != y.dims {
        return Err(usage(format!("hausdorff: mask dims {:?} and {:?} differ", g.dims, y.dims)));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(usage(format!("voxel spacing must be positive, got {spacing:?}")));
    }
    match (g.is_empty(), y.is_empty()) {
        (true, true) => return Ok(Distance::Value(0.0)),
        (true, false) | (false, true) => return Ok(Distance::Undefined),
        _ => {}
    }
    let mut gy = directed_surface_distances(g, y, spacing).expect("nonempty masks have surfaces");
    let mut yg = directed_surface_distances(y, g, spacing).expect("nonempty masks have surfaces");
    Ok(Distance::Value(reduce(&mut gy).max(reduce(&mut yg))))
}

/// Larger of the two directed 95th-percentile surface distances, in the
/// units of `spacing`.
pub fn hd95(g: &Mask, y: &Mask, spacing: [f64; 3]) -> Result<Distance> {
    symmetric(g, y, spacing, |d| quantile(d, 0.95).expect("nonempty"))
}

/// Classic Hausdorff distance between the surfaces.
pub fn hausdorff(g: &Mask, y: &Mask, spacing: [f64; 3]) -> Result<Distance> {
    symmetric(g, y, spacing, |d| d.iter().copied().fold(0.0, f64::max))
}

/// Region masks `[ET, TC, WT]` from labels `1` (necrotic core), `2` (edema)
/// and `4` (enhancing tumor).
pub fn brats_regions(labels: &[u8], dims: [usize; 3]) -> Result<[Mask; 3]> {
    let region = |keep: &[u8]| Mask::new(dims, labels.iter().map(|l| keep.contains(l)).collect());
    Ok([region(&[4])?, region(&[1, 4])?, region(&[1, 2, 4])?])
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetric {
    pub case: String,
    pub class: usize,
    pub dice: f64,
    pub hd95: Distance,
}

/// Per-case, per-class scores with a summary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<CaseMetric>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSummary {
    pub class: usize,
    pub mean_dice: f64,
    pub mean_hd95: Option<f64>,
    pub cases: usize,
    pub undefined_hd95: usize,
}

impl MetricsReport {
    /// Scores one case; `classes` lists `(class id, ground truth, prediction)`.
    pub fn add_case(&mut self, case: &str, classes: &[(usize, Mask, Mask)], spacing: [f64; 3]) -> Result<()> {
        for (class, g, y) in classes {
            self.rows.push(CaseMetric {
                case: case.to_string(),
                class: *class,
                dice: dice_score(g, y)?,
                hd95: hd95(g, y, spacing)?,
            });
        }
        Ok(())
    }

    pub fn classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.rows.iter().map(|r| r.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    pub fn summary(&self) -> Vec<ClassSummary> {
        self.classes()
            .into_iter()
            .map(|class| {
                let rows: Vec<&CaseMetric> = self.rows.iter().filter(|r| r.class == class).collect();
                let hd: Vec<f64> = rows.iter().filter_map(|r| r.hd95.value()).collect();
                ClassSummary {
                    class,
                    mean_dice: rows.iter().map(|r| r.dice).sum::<f64>() / rows.len() as f64,
                    mean_hd95: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
                    cases: rows.len(),
                    undefined_hd95: rows.len() - hd.len(),
                }
            })
            .collect()
    }

    /// Mean Dice over every case and class.
    pub fn mean_dice(&self) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(|r| r.dice).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_tsv(&self) -> String {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.case.cmp(&b.case).then(a.class.cmp(&b.class)));
        let mut out = String::from("case\tclass\tdice\thd95\n");
        for r in &rows {
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{}", r.case, r.class, r.dice, r.hd95);
        }
        out.push_str("\nclass\tmean_dice\tmean_hd95\tcases\tundefined_hd95\n");
        for s in self.summary() {
            let hd = s.mean_hd95.map_or("undefined".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(out, "{}\t{:.6}\t{}\t{}\t{}", s.class, s.mean_dice, hd, s.cases, s.undefined_hd95);
        }
        let _ = writeln!(out, "all\t{:.6}\t\t{}\t", self.mean_dice(), self.rows.len());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(bits: &[u8]) -> Mask {
        Mask::new([1, 1, bits.len()], bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice_score(&line(&[1, 1, 0, 0]), &line(&[1, 0, 1, 0])).unwrap(), 0.5);
        assert_eq!(dice_score(&line(&[0, 0]), &line(&[0, 0])).unwrap(), 1.0);
        assert_eq!(dice_score(&line(&[1, 0]), &line(&[1, 0])).unwrap(), 1.0);
        assert!(dice_score(&line(&[1]), &line(&[1, 0])).is_err());
    }

    #[test]
    fn singleton_distance() {
        let g = line(&[1, 0, 0, 0, 0]);
        let y = line(&[0, 0, 0, 1, 0]);
        assert_eq!(hd95(&g, &y, [1.0; 3]).unwrap(), Distance::Value(3.0));
        assert_eq!(hd95(&g, &y, [1.0, 1.0, 0.5]).unwrap(), Distance::Value(1.5));
        assert_eq!(hd95(&g, &g, [1.0; 3]).unwrap(), Distance::Value(0.0));
        assert_eq!(hd95(&g, &line(&[0; 5]), [1.0; 3]).unwrap(), Distance::Undefined);
    }

    #[test]
    fn surface_of_solid_cube() {
        let m = Mask::from_fn([5, 5, 5], |i, j, k| (1..4).contains(&i) && (1..4).contains(&j) && (1..4).contains(&k));
        let s = m.surface();
        assert_eq!(s.count(), 26);
        assert!(!s.data[s.index(2, 2, 2)]);
        assert_eq!(Mask::from_fn([2, 2, 2], |_, _, _| true).surface().count(), 8);
    }

    #[test]
    fn quantile_interpolates() {
        let mut v: Vec<f64> = (0..21).map(f64::from).rev().collect();
        assert_eq!(quantile(&mut v, 0.95), Some(19.0));
        let mut v = vec![0.0, 10.0];
        assert_eq!(quantile(&mut v, 0.95), Some(9.5));
        assert_eq!(quantile(&mut [], 0.5), None);
    }

    #[test]
    fn report_layout() {
        let mut r = MetricsReport::default();
        let a = line(&[1, 1, 0, 0]);
        let b = line(&[1, 0, 1, 0]);
        r.add_case("b", &[(1, a.clone(), b.clone())], [1.0; 3]).unwrap();
        r.add_case("a", &[(1, a.clone(), line(&[0; 4]))], [1.0; 3]).unwrap();
        let tsv = r.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "case\tclass\tdice\thd95");
        assert_eq!(lines[1], "a\t1\t0.000000\tundefined");
        assert!(lines[2].starts_with("b\t1\t0.500000\t"));
        let s = r.summary();
        assert_eq!(s[0].undefined_hd95, 1);
        assert_eq!(s[0].mean_dice, 0.25);
    }
}
