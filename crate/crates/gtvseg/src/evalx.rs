//! Segmentation accuracy metrics (DSC, HD95, ASD), the unacceptable-case
//! rule, the five-category revision-degree proxy, and volume coefficient of
//! variation.
//!
//! Surface distances are measured between boundary-voxel world centers in
//! mm; there is no sub-voxel surface model. HD95 and ASD use the pooled
//! symmetric definition by default: both directed point-to-set distance
//! multisets are pooled before taking the percentile / mean, which makes
//! both metrics symmetric in their arguments by construction.

use crate::error::{Error, Result};
use crate::stats::{mean_ci, CIResult};
use crate::volcore::Mask;

/// Which HD95 variant to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Hd95Mode {
    /// 95th percentile of the pooled (a->b and b->a) distance multiset.
    #[default]
    Pooled,
    /// max(p95(a->b), p95(b->a)) — the common alternative definition.
    MaxDirected,
}

/// Revision-degree categories, an automated proxy for the expert slice-wise
/// assessment: the fraction of relevant z-slices whose 2D slice DSC falls
/// below a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RevisionCategory {
    NoRevision,
    Lt10,
    Ge10Lt30,
    Ge30Lt60,
    Unacceptable,
}

impl RevisionCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            RevisionCategory::NoRevision => "no_revision",
            RevisionCategory::Lt10 => "lt10",
            RevisionCategory::Ge10Lt30 => "ge10lt30",
            RevisionCategory::Ge30Lt60 => "ge30lt60",
            RevisionCategory::Unacceptable => "unacceptable",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "no_revision" => RevisionCategory::NoRevision,
            "lt10" => RevisionCategory::Lt10,
            "ge10lt30" => RevisionCategory::Ge10Lt30,
            "ge30lt60" => RevisionCategory::Ge30Lt60,
            "unacceptable" => RevisionCategory::Unacceptable,
            _ => return None,
        })
    }

    pub const ALL: [RevisionCategory; 5] = [
        RevisionCategory::NoRevision,
        RevisionCategory::Lt10,
        RevisionCategory::Ge10Lt30,
        RevisionCategory::Ge30Lt60,
        RevisionCategory::Unacceptable,
    ];
}

/// Default slice-DSC threshold for the revision proxy.
pub const DEFAULT_SLICE_DSC_TAU: f64 = 0.7;

/// Per-case metric bundle. `hd95`/`asd` are `None` when either surface is
/// empty (e.g. an empty prediction).
#[derive(Debug, Clone)]
pub struct SegScores {
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub revised_fraction: f64,
    pub category: RevisionCategory,
    pub unacceptable: bool,
}

/// Header of the per-case scores CSV.
pub const SCORES_CSV_HEADER: &str =
    "case_id,variant,dsc,hd95_mm,asd_mm,revised_fraction,category,unacceptable";

/// One RFC-4180 CSV row for a scored case. Absent distances are empty fields.
pub fn scores_csv_row(case_id: &str, variant: &str, s: &SegScores) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{}",
        case_id,
        variant,
        s.dsc,
        opt(s.hd95),
        opt(s.asd),
        s.revised_fraction,
        s.category.as_str(),
        s.unacceptable
    )
}

/// Dice similarity coefficient 2|A∩B| / (|A|+|B|); 1 when both masks are
/// empty.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    if a.geometry != b.geometry {
        return Err(Error::GeometryMismatch);
    }
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += x as usize;
        nb += y as usize;
        inter += (x & y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Boundary voxels: set voxels with at least one of their 6 face-neighbors
/// unset or outside the grid. Returned as world centers in mm.
pub fn surface(m: &Mask) -> Vec<[f64; 3]> {
    let g = &m.geometry;
    let [nx, ny, nz] = g.dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.get(x, y, z) {
                    continue;
                }
                let boundary = x == 0
                    || !m.get(x - 1, y, z)
                    || x + 1 == nx
                    || !m.get(x + 1, y, z)
                    || y == 0
                    || !m.get(x, y - 1, z)
                    || y + 1 == ny
                    || !m.get(x, y + 1, z)
                    || z == 0
                    || !m.get(x, y, z - 1)
                    || z + 1 == nz
                    || !m.get(x, y, z + 1);
                if boundary {
                    out.push(g.voxel_center(x, y, z));
                }
            }
        }
    }
    out
}

/// Uniform-grid accelerated nearest-neighbor queries on a fixed point set.
struct PointGrid {
    cell: f64,
    min: [f64; 3],
    dims: [i64; 3],
    buckets: Vec<Vec<u32>>,
    points: Vec<[f64; 3]>,
}

impl PointGrid {
    fn build(points: Vec<[f64; 3]>, cell: f64) -> Self {
        debug_assert!(!points.is_empty());
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in &points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let dims = [
            (((max[0] - min[0]) / cell).floor() as i64 + 1).max(1),
            (((max[1] - min[1]) / cell).floor() as i64 + 1).max(1),
            (((max[2] - min[2]) / cell).floor() as i64 + 1).max(1),
        ];
        let mut buckets = vec![Vec::new(); (dims[0] * dims[1] * dims[2]) as usize];
        for (i, p) in points.iter().enumerate() {
            let mut c = [0i64; 3];
            for a in 0..3 {
                c[a] = (((p[a] - min[a]) / cell).floor() as i64).clamp(0, dims[a] - 1);
            }
            buckets[Self::bucket_index(&c, &dims)].push(i as u32);
        }
        PointGrid { cell, min, dims, buckets, points }
    }

    fn bucket_index(c: &[i64; 3], dims: &[i64; 3]) -> usize {
        (c[0] + dims[0] * (c[1] + dims[1] * c[2])) as usize
    }

    /// Distance from `q` to the nearest stored point, by expanding Chebyshev
    /// shells of cells. Every point in a cell at shell distance >= r+1 is
    /// farther than r*cell from q, which gives the stopping rule.
    fn nearest_dist(&self, q: [f64; 3]) -> f64 {
        let mut c = [0i64; 3];
        for a in 0..3 {
            c[a] = ((q[a] - self.min[a]) / self.cell).floor() as i64;
        }
        let max_r = (0..3)
            .map(|a| c[a].abs().max((c[a] - (self.dims[a] - 1)).abs()))
            .max()
            .unwrap()
            + self.dims.iter().max().copied().unwrap()
            + 1;
        let mut best = f64::INFINITY;
        for r in 0..=max_r {
            if r > 0 && best <= (r - 1) as f64 * self.cell {
                break;
            }
            for cz in (c[2] - r).max(0)..=(c[2] + r).min(self.dims[2] - 1) {
                for cy in (c[1] - r).max(0)..=(c[1] + r).min(self.dims[1] - 1) {
                    for cx in (c[0] - r).max(0)..=(c[0] + r).min(self.dims[0] - 1) {
                        let on_shell = (cx - c[0]).abs() == r
                            || (cy - c[1]).abs() == r
                            || (cz - c[2]).abs() == r;
                        if !on_shell {
                            continue;
                        }
                        for &i in &self.buckets[Self::bucket_index(&[cx, cy, cz], &self.dims)] {
                            let p = self.points[i as usize];
                            let d2 = (p[0] - q[0]).powi(2)
                                + (p[1] - q[1]).powi(2)
                                + (p[2] - q[2]).powi(2);
                            if d2 < best * best {
                                best = d2.sqrt();
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

/// Directed distances from every point of `from` to the set `to`.
fn directed_distances(from: &[[f64; 3]], to: &[[f64; 3]], cell: f64) -> Vec<f64> {
    let grid = PointGrid::build(to.to_vec(), cell);
    from.iter().map(|&q| grid.nearest_dist(q)).collect()
}

/// Linear-interpolation percentile on a sorted slice: rank = frac*(n-1).
pub fn percentile_sorted(sorted: &[f64], frac: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = frac * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let f = rank - lo as f64;
        sorted[lo] * (1.0 - f) + sorted[hi] * f
    }
}

fn surfaces_checked(a: &Mask, b: &Mask) -> Result<(Vec<[f64; 3]>, Vec<[f64; 3]>, f64)> {
    if a.geometry != b.geometry {
        return Err(Error::GeometryMismatch);
    }
    let sa = surface(a);
    let sb = surface(b);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::UndefinedStatistic(
            "surface distance undefined: empty surface".into(),
        ));
    }
    let cell = a.geometry.spacing.iter().cloned().fold(f64::MIN, f64::max).max(1e-6);
    Ok((sa, sb, cell))
}

/// 95% Hausdorff distance in mm (pooled symmetric definition).
pub fn hd95(a: &Mask, b: &Mask) -> Result<f64> {
    hd95_with_mode(a, b, Hd95Mode::Pooled)
}

pub fn hd95_with_mode(a: &Mask, b: &Mask, mode: Hd95Mode) -> Result<f64> {
    let (sa, sb, cell) = surfaces_checked(a, b)?;
    let mut ab = directed_distances(&sa, &sb, cell);
    let mut ba = directed_distances(&sb, &sa, cell);
    match mode {
        Hd95Mode::Pooled => {
            ab.append(&mut ba);
            ab.sort_by(|x, y| x.partial_cmp(y).unwrap());
            Ok(percentile_sorted(&ab, 0.95))
        }
        Hd95Mode::MaxDirected => {
            ab.sort_by(|x, y| x.partial_cmp(y).unwrap());
            ba.sort_by(|x, y| x.partial_cmp(y).unwrap());
            Ok(percentile_sorted(&ab, 0.95).max(percentile_sorted(&ba, 0.95)))
        }
    }
}

/// Average surface distance in mm: mean of the pooled directed-distance
/// multiset (symmetric, weighted by surface sizes).
pub fn asd(a: &Mask, b: &Mask) -> Result<f64> {
    let (sa, sb, cell) = surfaces_checked(a, b)?;
    let ab = directed_distances(&sa, &sb, cell);
    let ba = directed_distances(&sb, &sa, cell);
    let n = ab.len() + ba.len();
    Ok((ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / n as f64)
}

fn slice_counts(m: &Mask, z: usize) -> (usize, &[u8]) {
    let g = &m.geometry;
    let n = g.dims[0] * g.dims[1];
    let start = g.index(0, 0, z);
    let slice = &m.data[start..start + n];
    (slice.iter().map(|&b| b as usize).sum(), slice)
}

/// Revised fraction: share of relevant z-slices (gt or pred nonempty) whose
/// 2D slice DSC is below `tau`. Also reports whether the prediction misses
/// the ground truth entirely.
fn revised_fraction(pred: &Mask, gt: &Mask, tau: f64) -> Result<(f64, bool)> {
    if pred.geometry != gt.geometry {
        return Err(Error::GeometryMismatch);
    }
    if gt.count() == 0 {
        return Err(Error::EmptyMask);
    }
    let nz = gt.geometry.dims[2];
    let mut relevant = 0usize;
    let mut failing = 0usize;
    let mut inter_total = 0usize;
    for z in 0..nz {
        let (np, ps) = slice_counts(pred, z);
        let (ng, gs) = slice_counts(gt, z);
        if np == 0 && ng == 0 {
            continue;
        }
        relevant += 1;
        let inter: usize = ps.iter().zip(gs).map(|(&a, &b)| (a & b) as usize).sum();
        inter_total += inter;
        let slice_dsc = 2.0 * inter as f64 / (np + ng) as f64;
        if slice_dsc < tau {
            failing += 1;
        }
    }
    Ok((failing as f64 / relevant as f64, inter_total == 0))
}

/// Unacceptable if the prediction completely misses the tumor or more than
/// 60% of relevant slices need revision.
pub fn is_unacceptable(pred: &Mask, gt: &Mask) -> Result<bool> {
    let (fraction, missed) = revised_fraction(pred, gt, DEFAULT_SLICE_DSC_TAU)?;
    Ok(missed || fraction > 0.60)
}

/// Bin the revised fraction into the five revision categories; a completely
/// missed tumor or fraction > 0.60 is Unacceptable.
pub fn revision_degree(pred: &Mask, gt: &Mask, tau: f64) -> Result<(RevisionCategory, f64)> {
    let (f, missed) = revised_fraction(pred, gt, tau)?;
    let cat = if missed || f > 0.60 {
        RevisionCategory::Unacceptable
    } else if f == 0.0 {
        RevisionCategory::NoRevision
    } else if f < 0.10 {
        RevisionCategory::Lt10
    } else if f < 0.30 {
        RevisionCategory::Ge10Lt30
    } else {
        RevisionCategory::Ge30Lt60
    };
    Ok((cat, f))
}

/// Score one prediction against ground truth.
pub fn score_case(pred: &Mask, gt: &Mask, tau: f64, mode: Hd95Mode) -> Result<SegScores> {
    let d = dsc(pred, gt)?;
    let (category, fraction) = revision_degree(pred, gt, tau)?;
    let unacceptable = category == RevisionCategory::Unacceptable;
    let (h, a) = if pred.count() > 0 && gt.count() > 0 {
        (Some(hd95_with_mode(pred, gt, mode)?), Some(asd(pred, gt)?))
    } else {
        (None, None)
    };
    debug_assert!((0.0..=1.0).contains(&d));
    debug_assert!(h.map(|v| v >= 0.0).unwrap_or(true) && a.map(|v| v >= 0.0).unwrap_or(true));
    Ok(SegScores {
        dsc: d,
        hd95: h,
        asd: a,
        revised_fraction: fraction,
        category,
        unacceptable,
    })
}

/// Coefficient of variation: sample standard deviation (n-1) over the mean.
pub fn volume_cov(volumes: &[f64]) -> Result<f64> {
    if volumes.len() < 2 {
        return Err(Error::InvalidParameter("volume_cov needs n >= 2".into()));
    }
    let n = volumes.len() as f64;
    let mean = volumes.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(Error::UndefinedStatistic("volume_cov: non-positive mean".into()));
    }
    let ss: f64 = volumes.iter().map(|&v| (v - mean) * (v - mean)).sum();
    Ok((ss / (n - 1.0)).sqrt() / mean)
}

/// Mean + CI for one metric over a subset of cases. `None` when no case in
/// the subset defines the metric; a single case yields a degenerate interval.
#[derive(Debug, Clone, Copy)]
pub struct MetricCI(pub Option<CIResult>);

fn summarize(values: &[f64]) -> MetricCI {
    match values.len() {
        0 => MetricCI(None),
        1 => MetricCI(Some(CIResult {
            mean: values[0],
            lo: values[0],
            hi: values[0],
            level: 0.95,
        })),
        _ => MetricCI(Some(mean_ci(values, 0.95).expect("n >= 2"))),
    }
}

/// One row of the per-category breakdown (all cases).
#[derive(Debug, Clone)]
pub struct CategoryRow {
    pub category: RevisionCategory,
    pub count: usize,
    pub percent: f64,
    pub dsc: MetricCI,
    pub hd95: MetricCI,
    pub asd: MetricCI,
}

/// Cohort-level summary: the unacceptable tally, metric means over
/// non-unacceptable cases, and the per-category breakdown over all cases.
#[derive(Debug, Clone)]
pub struct CohortSummary {
    pub n: usize,
    pub unacceptable_count: usize,
    pub unacceptable_percent: f64,
    /// Means over non-unacceptable cases only.
    pub dsc_acceptable: MetricCI,
    pub hd95_acceptable: MetricCI,
    pub asd_acceptable: MetricCI,
    /// Breakdown over all cases, including unacceptable ones.
    pub categories: Vec<CategoryRow>,
}

pub fn cohort_summary(scores: &[SegScores]) -> Result<CohortSummary> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("cohort_summary needs at least one case".into()));
    }
    let n = scores.len();
    let unacceptable_count = scores.iter().filter(|s| s.unacceptable).count();
    let acc: Vec<&SegScores> = scores.iter().filter(|s| !s.unacceptable).collect();
    let defined = |vals: Vec<Option<f64>>| -> Vec<f64> { vals.into_iter().flatten().collect() };
    let dsc_a = summarize(&acc.iter().map(|s| s.dsc).collect::<Vec<_>>());
    let hd_a = summarize(&defined(acc.iter().map(|s| s.hd95).collect()));
    let as_a = summarize(&defined(acc.iter().map(|s| s.asd).collect()));
    let mut categories = Vec::new();
    for cat in RevisionCategory::ALL {
        let rows: Vec<&SegScores> = scores.iter().filter(|s| s.category == cat).collect();
        categories.push(CategoryRow {
            category: cat,
            count: rows.len(),
            percent: 100.0 * rows.len() as f64 / n as f64,
            dsc: summarize(&rows.iter().map(|s| s.dsc).collect::<Vec<_>>()),
            hd95: summarize(&defined(rows.iter().map(|s| s.hd95).collect())),
            asd: summarize(&defined(rows.iter().map(|s| s.asd).collect())),
        });
    }
    Ok(CohortSummary {
        n,
        unacceptable_count,
        unacceptable_percent: 100.0 * unacceptable_count as f64 / n as f64,
        dsc_acceptable: dsc_a,
        hd95_acceptable: hd_a,
        asd_acceptable: as_a,
        categories,
    })
}
