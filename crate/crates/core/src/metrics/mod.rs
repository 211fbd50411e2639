//! Overlap and surface-distance metrics on binary 3-D masks.

mod distance;
mod report;

pub use distance::{edt_squared, surface};
pub use report::{CaseMetrics, MetricReport, ReportRow};

/// Probability threshold used to binarize predictions.
pub const THRESHOLD: f32 = 0.5;

pub fn binarize(probs: &[f32]) -> Vec<bool> {
    probs.iter().map(|&p| p >= THRESHOLD).collect()
}

/// Dice similarity in percent. Two empty masks score 100.
pub fn dice(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "dice: masks differ in size");
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    if total == 0 {
        return 100.0;
    }
    100.0 * 2.0 * inter as f64 / total as f64
}

/// Value at quantile `q` of sorted data, interpolating linearly between
/// neighbouring order statistics.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Surface-to-surface distances from each surface voxel of `from` to the
/// nearest surface voxel of `to`, in millimetres.
fn directed(from: &[bool], to: &[bool], extents: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let target = edt_squared(&surface(to, extents), extents, spacing);
    surface(from, extents)
        .iter()
        .zip(&target)
        .filter(|(&s, _)| s)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// 95th percentile of the symmetric surface distances, or `None` when either
/// mask is empty.
pub fn hd95(pred: &[bool], gt: &[bool], extents: [usize; 3], spacing: [f64; 3]) -> Option<f64> {
    hausdorff_quantile(pred, gt, extents, spacing, 0.95)
}

/// Exact (maximum) symmetric surface Hausdorff distance.
pub fn hausdorff(pred: &[bool], gt: &[bool], extents: [usize; 3], spacing: [f64; 3]) -> Option<f64> {
    hausdorff_quantile(pred, gt, extents, spacing, 1.0)
}

fn hausdorff_quantile(pred: &[bool], gt: &[bool], extents: [usize; 3], spacing: [f64; 3], q: f64) -> Option<f64> {
    let n: usize = extents.iter().product();
    assert!(pred.len() == n && gt.len() == n, "hd95: mask size does not match extents");
    if !pred.iter().any(|&v| v) || !gt.iter().any(|&v| v) {
        return None;
    }
    let mut d = directed(pred, gt, extents, spacing);
    d.extend(directed(gt, pred, extents, spacing));
    d.sort_by(f64::total_cmp);
    Some(percentile(&d, q))
}
