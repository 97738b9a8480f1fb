//! Overlap and surface-distance metrics on 2-D binary masks.
//!
//! Surfaces are the foreground pixels having at least one background
//! 4-neighbour, with the image border counting as background. Distances are
//! exact pairwise minima in physical units given by the mask spacing.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default binarization threshold for probability maps.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    rows: usize,
    cols: usize,
    values: Vec<bool>,
    spacing: (f64, f64),
}

impl BinaryMask {
    pub fn new(rows: usize, cols: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape("binary mask", rows * cols, values.len()));
        }
        Ok(Self {
            rows,
            cols,
            values,
            spacing: (1.0, 1.0),
        })
    }

    /// From real values that must all be exactly 0 or 1.
    pub fn from_values(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!("mask value {v} is not binary")));
        }
        Self::new(rows, cols, values.iter().map(|&v| v == 1.0).collect())
    }

    /// From a single-plane tensor (`(h, w)`, `(1, h, w)` or `(1, 1, h, w)`)
    /// holding exact 0/1 values.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = plane_dims(t)?;
        Self::from_values(h, w, t.data())
    }

    /// Thresholds a probability plane: `p >= threshold` is foreground.
    pub fn threshold(t: &Tensor, threshold: f64) -> Result<Self> {
        let (h, w) = plane_dims(t)?;
        Self::new(h, w, t.data().iter().map(|&p| p >= threshold).collect())
    }

    pub fn with_spacing(mut self, row_mm: f64, col_mm: f64) -> Result<Self> {
        if !(row_mm > 0.0 && col_mm > 0.0 && row_mm.is_finite() && col_mm.is_finite()) {
            return Err(Error::Validation(format!(
                "spacing must be positive, got ({row_mm}, {col_mm})"
            )));
        }
        self.spacing = (row_mm, col_mm);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn spacing(&self) -> (f64, f64) {
        self.spacing
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.values[r * self.cols + c]
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.values.iter().map(|&v| v as u8 as f64).collect();
        Tensor::new(&[1, 1, self.rows, self.cols], data).expect("dims match")
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape(
                "mask comparison",
                (self.rows, self.cols),
                (other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::shape("single-plane mask", "(h, w)", t.shape())),
    }
}

/// Boundary points in physical coordinates `(row_mm, col_mm)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfacePointSet {
    pub points: Vec<(f64, f64)>,
}

impl SurfacePointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn extract_surface(m: &BinaryMask) -> SurfacePointSet {
    let (rows, cols) = (m.rows, m.cols);
    let mut points = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if !m.get(r, c) {
                continue;
            }
            let boundary = r == 0
                || c == 0
                || r + 1 == rows
                || c + 1 == cols
                || !m.get(r - 1, c)
                || !m.get(r + 1, c)
                || !m.get(r, c - 1)
                || !m.get(r, c + 1);
            if boundary {
                points.push((r as f64 * m.spacing.0, c as f64 * m.spacing.1));
            }
        }
    }
    SurfacePointSet { points }
}

/// `2|GT ∩ P| / (|GT| + |P|)`; 1.0 when both masks are empty.
pub fn dice(gt: &BinaryMask, p: &BinaryMask) -> Result<f64> {
    gt.check_same(p)?;
    let inter = gt.values.iter().zip(&p.values).filter(|(a, b)| **a && **b).count();
    let denom = gt.count() + p.count();
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / denom as f64)
}

/// `||GT| - |P|| / |GT|`. Not symmetric.
pub fn avd(gt: &BinaryMask, p: &BinaryMask) -> Result<f64> {
    gt.check_same(p)?;
    let g = gt.count();
    if g == 0 {
        return Err(Error::UndefinedMetric("absolute volume difference with empty ground truth".into()));
    }
    Ok((g as f64 - p.count() as f64).abs() / g as f64)
}

/// Distance from each point of `from` to its nearest point of `to`.
fn nearest_distances<'a>(from: &'a [(f64, f64)], to: &'a [(f64, f64)]) -> impl Iterator<Item = f64> + 'a {
    from.iter().map(move |&(r, c)| {
        to.iter()
            .map(|&(tr, tc)| (r - tr) * (r - tr) + (c - tc) * (c - tc))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    })
}

fn surfaces(gt: &BinaryMask, p: &BinaryMask, metric: &str) -> Result<(SurfacePointSet, SurfacePointSet)> {
    gt.check_same(p)?;
    if gt.spacing != p.spacing {
        return Err(Error::Validation(format!(
            "spacing differs between masks: {:?} vs {:?}",
            gt.spacing, p.spacing
        )));
    }
    let (sg, sp) = (extract_surface(gt), extract_surface(p));
    if sg.is_empty() || sp.is_empty() {
        return Err(Error::UndefinedMetric(format!("{metric} with an empty surface")));
    }
    Ok((sg, sp))
}

/// Average symmetric surface distance.
pub fn assd(gt: &BinaryMask, p: &BinaryMask) -> Result<f64> {
    let (sg, sp) = surfaces(gt, p, "ASSD")?;
    let a: f64 = nearest_distances(&sg.points, &sp.points).sum();
    let b: f64 = nearest_distances(&sp.points, &sg.points).sum();
    Ok((a + b) / (sg.len() + sp.len()) as f64)
}

/// Symmetric Hausdorff distance between the two surfaces.
pub fn hausdorff(gt: &BinaryMask, p: &BinaryMask) -> Result<f64> {
    let (sg, sp) = surfaces(gt, p, "Hausdorff distance")?;
    Ok(directed_hausdorff(&sg, &sp).max(directed_hausdorff(&sp, &sg)))
}

/// `max_{a in A} min_{b in B} |a - b|`.
pub fn directed_hausdorff(a: &SurfacePointSet, b: &SurfacePointSet) -> f64 {
    nearest_distances(&a.points, &b.points).fold(0.0, f64::max)
}

/// All four metrics for one case; undefined metrics are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dsc: Option<f64>,
    pub avd: Option<f64>,
    pub assd: Option<f64>,
    pub hd: Option<f64>,
}

fn defined(r: Result<f64>, case_id: &str, name: &str) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(why)) => {
            log::debug!("{case_id}: {name} missing ({why})");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Binarizes `p_prob` at `threshold` and scores it against `gt`.
pub fn evaluate_case(case_id: &str, gt: &BinaryMask, p_prob: &Tensor, threshold: f64) -> Result<CaseMetrics> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Validation(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let (sr, sc) = gt.spacing;
    let p = BinaryMask::threshold(p_prob, threshold)?.with_spacing(sr, sc)?;
    gt.check_same(&p)?;
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        dsc: defined(dice(gt, &p), case_id, "DSC")?,
        avd: defined(avd(gt, &p), case_id, "AVD")?,
        assd: defined(assd(gt, &p), case_id, "ASSD")?,
        hd: defined(hausdorff(gt, &p), case_id, "HD")?,
    })
}

/// Mean and sample standard deviation over the cases where a metric is defined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.6}±{:.6}", self.mean, self.std)
    }
}

/// Per-case metrics plus mean ± std aggregates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    /// False when some cases (or folds) failed and are absent.
    pub complete: bool,
}

impl MetricsReport {
    /// Builds a report with cases ordered by id.
    pub fn new(mut cases: Vec<CaseMetrics>, complete: bool) -> Self {
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        Self { cases, complete }
    }

    fn column(&self, f: impl Fn(&CaseMetrics) -> Option<f64>) -> Vec<f64> {
        self.cases.iter().filter_map(f).collect()
    }

    pub fn dsc(&self) -> Option<Summary> {
        Summary::of(&self.column(|c| c.dsc))
    }

    pub fn avd(&self) -> Option<Summary> {
        Summary::of(&self.column(|c| c.avd))
    }

    pub fn assd(&self) -> Option<Summary> {
        Summary::of(&self.column(|c| c.assd))
    }

    pub fn hd(&self) -> Option<Summary> {
        Summary::of(&self.column(|c| c.hd))
    }

    /// `case_id,dsc,avd,assd,hd` rows, missing values left empty, followed by
    /// a `summary` row of `mean±std` cells.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let agg = |s: Option<Summary>| s.map(|s| s.to_string()).unwrap_or_default();
        let mut out = String::from("case_id,dsc,avd,assd,hd\n");
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                c.case_id,
                cell(c.dsc),
                cell(c.avd),
                cell(c.assd),
                cell(c.hd)
            );
        }
        let _ = writeln!(
            out,
            "summary,{},{},{},{}",
            agg(self.dsc()),
            agg(self.avd()),
            agg(self.assd()),
            agg(self.hd())
        );
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Human-readable summary block.
    pub fn to_text(&self) -> String {
        let line = |name: &str, s: Option<Summary>| match s {
            Some(s) => format!("{name:<5} {s}  (n={})\n", s.count),
            None => format!("{name:<5} missing\n"),
        };
        let mut out = format!("cases {}{}\n", self.cases.len(), if self.complete { "" } else { " (incomplete)" });
        out += &line("DSC", self.dsc());
        out += &line("AVD", self.avd());
        out += &line("ASSD", self.assd());
        out += &line("HD", self.hd());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: usize, cols: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut v = vec![false; rows * cols];
        for &(r, c) in on {
            v[r * cols + c] = true;
        }
        BinaryMask::new(rows, cols, v).unwrap()
    }

    #[test]
    fn dice_anchors() {
        let a = mask(3, 3, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask(3, 3, &[(0, 0), (0, 1)]);
        assert!((dice(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let c = mask(3, 3, &[(2, 2)]);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        let e = mask(3, 3, &[]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert!(dice(&a, &mask(2, 3, &[])).is_err());
    }

    #[test]
    fn avd_anchors() {
        let on: Vec<(usize, usize)> = (0..10).map(|i| (0, i)).collect();
        let gt = mask(1, 10, &on);
        let p = mask(1, 10, &on[..5]);
        assert_eq!(avd(&gt, &gt).unwrap(), 0.0);
        assert_eq!(avd(&gt, &p).unwrap(), 0.5);
        assert!(matches!(avd(&mask(1, 10, &[]), &p), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn surface_anchors() {
        assert_eq!(extract_surface(&mask(3, 3, &[(1, 1)])).len(), 1);
        let all: Vec<_> = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
        let mut five = vec![false; 25];
        for &(r, c) in &all {
            five[(r + 1) * 5 + c + 1] = true;
        }
        let m = BinaryMask::new(5, 5, five).unwrap();
        let s = extract_surface(&m);
        assert_eq!(s.len(), 8);
        assert!(!s.points.contains(&(2.0, 2.0)));
        assert!(extract_surface(&mask(4, 4, &[])).is_empty());
    }

    #[test]
    fn distance_anchors() {
        let a = mask(1, 4, &[(0, 0)]);
        let b = mask(1, 4, &[(0, 3)]);
        assert_eq!(assd(&a, &b).unwrap(), 3.0);
        assert_eq!(assd(&a, &a).unwrap(), 0.0);
        let a2 = a.clone().with_spacing(1.0, 0.5).unwrap();
        let b2 = b.clone().with_spacing(1.0, 0.5).unwrap();
        assert_eq!(assd(&a2, &b2).unwrap(), 1.5);

        let p = mask(5, 5, &[(0, 0)]);
        let q = mask(5, 5, &[(3, 4)]);
        assert_eq!(hausdorff(&p, &q).unwrap(), 5.0);
        let two = mask(1, 11, &[(0, 0), (0, 10)]);
        let one = mask(1, 11, &[(0, 0)]);
        assert_eq!(hausdorff(&two, &one).unwrap(), 10.0);
        assert!(matches!(hausdorff(&two, &mask(1, 11, &[])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn evaluate_case_behaviour() {
        let gt = mask(4, 4, &[(1, 1), (1, 2), (2, 1)]);
        let probs = Tensor::new(
            &[1, 1, 4, 4],
            gt.values().iter().map(|&v| if v { 0.99 } else { 0.01 }).collect(),
        )
        .unwrap();
        let m = evaluate_case("a", &gt, &probs, DEFAULT_THRESHOLD).unwrap();
        assert_eq!((m.dsc, m.hd), (Some(1.0), Some(0.0)));

        let empty = Tensor::zeros(&[1, 1, 4, 4]);
        let m = evaluate_case("b", &gt, &empty, 0.5).unwrap();
        assert_eq!((m.dsc, m.avd, m.assd, m.hd), (Some(0.0), Some(1.0), None, None));
        assert!(matches!(evaluate_case("c", &gt, &probs, 0.0), Err(Error::Validation(_))));
    }

    #[test]
    fn report_csv_has_summary() {
        let cases = vec![
            CaseMetrics { case_id: "b".into(), dsc: Some(0.5), avd: Some(0.1), assd: None, hd: None },
            CaseMetrics { case_id: "a".into(), dsc: Some(0.7), avd: Some(0.3), assd: Some(1.0), hd: Some(2.0) },
        ];
        let r = MetricsReport::new(cases, true);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "case_id,dsc,avd,assd,hd");
        assert!(lines[1].starts_with("a,"));
        assert_eq!(lines[2], "b,0.500000,0.100000,,");
        assert!(lines[3].starts_with("summary,0.600000±0.141421"));
        assert_eq!(r.hd().unwrap().count, 1);
    }
}
