//! Segmentation overlap and surface-distance measures, and the Wilcoxon
//! signed-rank test.

use std::fmt;

use thiserror::Error;

use crate::volume::{Geometry, LabelMap3, OrganLabel};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("mask geometries differ")]
    GeometryMismatch,
    #[error("dice is undefined for two empty masks")]
    BothEmpty,
    #[error("surface of an empty mask is undefined")]
    EmptyMask,
    #[error("mask has {found} voxels, geometry needs {expected}")]
    MaskLength { expected: usize, found: usize },
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no samples")]
    NoSamples,
    #[error("all paired differences are zero")]
    AllZeroDifferences,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// One organ's voxels on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask3 {
    geometry: Geometry,
    mask: Vec<bool>,
}

impl BinaryMask3 {
    pub fn new(geometry: Geometry, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != geometry.len() {
            return Err(MetricsError::MaskLength {
                expected: geometry.len(),
                found: mask.len(),
            });
        }
        Ok(Self { geometry, mask })
    }

    pub fn from_labels(labels: &LabelMap3, organ: OrganLabel) -> Self {
        Self {
            geometry: *labels.geometry(),
            mask: labels.labels().iter().map(|&l| l == organ.code()).collect(),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    /// Same mask with spacing multiplied by `factor`.
    pub fn rescaled(&self, factor: f64) -> Result<Self> {
        let g = &self.geometry;
        let geometry = Geometry::new(g.dims, g.spacing.map(|s| s * factor), g.origin)
            .map_err(|_| MetricsError::GeometryMismatch)?;
        Ok(Self {
            geometry,
            mask: self.mask.clone(),
        })
    }
}

fn same_grid(a: &BinaryMask3, b: &BinaryMask3) -> Result<()> {
    if a.geometry != b.geometry {
        return Err(MetricsError::GeometryMismatch);
    }
    Ok(())
}

/// `2 |A n B| / (|A| + |B|)`.
pub fn dsc(a: &BinaryMask3, b: &BinaryMask3) -> Result<f64> {
    same_grid(a, b)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.mask.iter().zip(&b.mask) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Err(MetricsError::BothEmpty);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Boundary voxel centres in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePointSet {
    pub points: Vec<[f64; 3]>,
}

impl SurfacePointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Mask voxels with at least one 6-neighbour outside the mask; neighbours
/// beyond the grid count as outside.
pub fn extract_surface(m: &BinaryMask3) -> Result<SurfacePointSet> {
    let g = &m.geometry;
    let [nx, ny, nz] = g.dims;
    let inside = |x: usize, y: usize, z: usize| m.mask[g.index(x, y, z)];
    let mut points = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !inside(x, y, z) {
                    continue;
                }
                let boundary = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == nx
                    || y + 1 == ny
                    || z + 1 == nz
                    || !inside(x - 1, y, z)
                    || !inside(x + 1, y, z)
                    || !inside(x, y - 1, z)
                    || !inside(x, y + 1, z)
                    || !inside(x, y, z - 1)
                    || !inside(x, y, z + 1);
                if boundary {
                    points.push(g.position([x, y, z]));
                }
            }
        }
    }
    if points.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    Ok(SurfacePointSet { points })
}

/// Static 3-d tree for exact nearest-point queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    /// Split axis of the node stored at each index of `points`.
    axes: Vec<u8>,
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

impl KdTree {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            axes: vec![0; points.len()],
        };
        let n = tree.points.len();
        tree.build(0, n);
        tree
    }

    // each node is the median of its range along the axis of widest spread
    fn build(&mut self, lo: usize, hi: usize) {
        if hi <= lo {
            return;
        }
        let slice = &mut self.points[lo..hi];
        let mut axis = 0;
        let mut widest = f64::NEG_INFINITY;
        for a in 0..3 {
            let (min, max) = slice
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), p| (mn.min(p[a]), mx.max(p[a])));
            if max - min > widest {
                widest = max - min;
                axis = a;
            }
        }
        let mid = (hi - lo) / 2;
        slice.select_nth_unstable_by(mid, |p, q| p[axis].total_cmp(&q[axis]));
        self.axes[lo + mid] = axis as u8;
        self.build(lo, lo + mid);
        self.build(lo + mid + 1, hi);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance from `q` to its nearest tree point.
    pub fn nearest_sq(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        self.search(q, 0, self.points.len(), &mut best);
        best
    }

    fn search(&self, q: &[f64; 3], lo: usize, hi: usize, best: &mut f64) {
        if hi <= lo {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = &self.points[mid];
        *best = best.min(sq_dist(q, p));
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if diff * diff <= *best {
            self.search(q, far.0, far.1, best);
        }
    }
}

/// Distance from every point of `from` to the nearest point of `to`.
pub fn directed_distances(from: &SurfacePointSet, to: &SurfacePointSet) -> Vec<f64> {
    let tree = KdTree::new(&to.points);
    from.points.iter().map(|p| tree.nearest_sq(p).sqrt()).collect()
}

fn surfaces(a: &BinaryMask3, b: &BinaryMask3) -> Result<(SurfacePointSet, SurfacePointSet)> {
    same_grid(a, b)?;
    Ok((extract_surface(a)?, extract_surface(b)?))
}

/// Mean surface distance pooled over both surfaces.
pub fn msd(a: &BinaryMask3, b: &BinaryMask3) -> Result<f64> {
    let (sa, sb) = surfaces(a, b)?;
    let ab: f64 = directed_distances(&sa, &sb).iter().sum();
    let ba: f64 = directed_distances(&sb, &sa).iter().sum();
    Ok((ab + ba) / (sa.len() + sb.len()) as f64)
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(q n / 100)` of the
/// sorted sample. `q` is an integer percentage in `1..=100`.
pub fn nearest_rank(values: &mut [f64], q: usize) -> f64 {
    assert!(!values.is_empty() && (1..=100).contains(&q));
    values.sort_by(f64::total_cmp);
    let rank = (q * values.len()).div_ceil(100);
    values[rank.max(1) - 1]
}

fn directed_percentile(a: &BinaryMask3, b: &BinaryMask3, q: usize) -> Result<f64> {
    let (sa, sb) = surfaces(a, b)?;
    let p_ab = nearest_rank(&mut directed_distances(&sa, &sb), q);
    let p_ba = nearest_rank(&mut directed_distances(&sb, &sa), q);
    Ok(p_ab.max(p_ba))
}

/// 95th-percentile Hausdorff distance: the larger of the two directed
/// nearest-rank 95th percentiles.
pub fn hd95(a: &BinaryMask3, b: &BinaryMask3) -> Result<f64> {
    directed_percentile(a, b, 95)
}

/// Classical (100th percentile) Hausdorff distance.
pub fn hausdorff(a: &BinaryMask3, b: &BinaryMask3) -> Result<f64> {
    directed_percentile(a, b, 100)
}

/// Why an organ's surface metrics are missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricFlag {
    /// Organ in the truth but not in the prediction.
    MissingInPrediction,
    /// Organ predicted but absent from the truth.
    MissingInTruth,
}

impl MetricFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricFlag::MissingInPrediction => "missing_in_prediction",
            MetricFlag::MissingInTruth => "missing_in_truth",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "missing_in_prediction" => Some(MetricFlag::MissingInPrediction),
            "missing_in_truth" => Some(MetricFlag::MissingInTruth),
            _ => None,
        }
    }
}

impl fmt::Display for MetricFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-organ scores. Flagged records carry `dsc = 0` and NaN surface metrics,
/// which summaries must skip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrganMetrics {
    pub organ: OrganLabel,
    pub dsc: f64,
    pub msd: f64,
    pub hd95: f64,
    pub flag: Option<MetricFlag>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairEvaluation {
    /// One record per organ present in at least one map, in label order.
    pub records: Vec<OrganMetrics>,
    /// Organs empty in both maps.
    pub absent: Vec<OrganLabel>,
}

pub fn evaluate_pair(pred: &LabelMap3, truth: &LabelMap3) -> Result<PairEvaluation> {
    if pred.geometry() != truth.geometry() {
        return Err(MetricsError::GeometryMismatch);
    }
    let mut out = PairEvaluation {
        records: Vec::new(),
        absent: Vec::new(),
    };
    for organ in OrganLabel::ORGANS {
        let p = BinaryMask3::from_labels(pred, organ);
        let t = BinaryMask3::from_labels(truth, organ);
        let flag = match (p.is_empty(), t.is_empty()) {
            (true, true) => {
                out.absent.push(organ);
                continue;
            }
            (true, false) => Some(MetricFlag::MissingInPrediction),
            (false, true) => Some(MetricFlag::MissingInTruth),
            (false, false) => None,
        };
        let record = match flag {
            Some(_) => OrganMetrics {
                organ,
                dsc: 0.0,
                msd: f64::NAN,
                hd95: f64::NAN,
                flag,
            },
            None => {
                let (sp, st) = (extract_surface(&p)?, extract_surface(&t)?);
                let mut pt = directed_distances(&sp, &st);
                let mut tp = directed_distances(&st, &sp);
                let msd = (pt.iter().sum::<f64>() + tp.iter().sum::<f64>()) / (pt.len() + tp.len()) as f64;
                let hd95 = nearest_rank(&mut pt, 95).max(nearest_rank(&mut tp, 95));
                OrganMetrics {
                    organ,
                    dsc: dsc(&p, &t)?,
                    msd,
                    hd95,
                    flag: None,
                }
            }
        };
        out.records.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    Exact,
    NormalApproximation,
}

impl WilcoxonMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            WilcoxonMethod::Exact => "exact",
            WilcoxonMethod::NormalApproximation => "normal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// Pairs with a non-zero difference.
    pub n: usize,
    /// `min(W+, W-)`.
    pub statistic: f64,
    /// Rank sum of positive differences `x - y`.
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

impl WilcoxonResult {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Largest sample size for which the null distribution is enumerated.
pub const EXACT_LIMIT: usize = 12;

/// Average ranks of `|d|` (1-based), ties sharing the mean rank.
pub fn signed_ranks(d: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided signed-rank test of `x - y`. Zero differences are dropped.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(MetricsError::NoSamples);
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|&v| v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Err(MetricsError::AllZeroDifferences);
    }
    let ranks = signed_ranks(&d);
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);
    let (p, method) = if n <= EXACT_LIMIT {
        (exact_p(&ranks, statistic), WilcoxonMethod::Exact)
    } else {
        (normal_p(&ranks, w_plus), WilcoxonMethod::NormalApproximation)
    };
    Ok(WilcoxonResult {
        n,
        statistic,
        w_plus,
        w_minus,
        p_value: p,
        method,
    })
}

/// `min(1, 2 P(W+ <= w))` over all `2^n` equally likely sign assignments.
/// Ranks are halves of integers, so sums are compared on doubled ranks.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
    let limit = (2.0 * w).round() as u64;
    let n = ranks.len();
    let mut hits: u64 = 0;
    for signs in 0u64..(1 << n) {
        let s: u64 = (0..n).filter(|&i| signs >> i & 1 == 1).map(|i| doubled[i]).sum();
        hits += (s <= limit) as u64;
    }
    (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
}

/// Normal approximation with tie and continuity corrections.
fn normal_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}
