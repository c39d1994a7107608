//! Paired accuracy-gap statistics of a PTQ and an aligned search.

use super::log::{median, GenerationLog, LogRow};
use super::{Branch, SearchError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchGap {
    /// Rows contributing (trained, non-diverged, non-elite candidates).
    pub count: usize,
    pub mean_gap: f64,
    pub median_gap: f64,
    pub mean_gpu_miou: f64,
    pub mean_device_miou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub ptq: BranchGap,
    pub aligned: BranchGap,
    /// `1 - gap_aligned / gap_ptq`; `None` when the PTQ gap is zero.
    pub recovered_fraction: Option<f64>,
}

/// `1 - aligned / ptq`, undefined for a zero PTQ gap.
pub fn recovered_fraction(gap_ptq: f64, gap_aligned: f64) -> Option<f64> {
    (gap_ptq != 0.0).then(|| 1.0 - gap_aligned / gap_ptq)
}

fn contributing(history: &[GenerationLog]) -> Vec<&LogRow> {
    history
        .iter()
        .flat_map(|g| &g.rows)
        .filter(|r| r.operator != "elite" && r.gpu_miou.is_some() && r.device_miou.is_some())
        .collect()
}

fn branch_gap(rows: &[&LogRow]) -> BranchGap {
    let gaps: Vec<f64> = rows
        .iter()
        .map(|r| r.gpu_miou.unwrap_or(0.0) - r.device_miou.unwrap_or(0.0))
        .collect();
    let n = rows.len().max(1) as f64;
    BranchGap {
        count: rows.len(),
        mean_gap: gaps.iter().sum::<f64>() / n,
        median_gap: median(&gaps),
        mean_gpu_miou: rows.iter().filter_map(|r| r.gpu_miou).sum::<f64>() / n,
        mean_device_miou: rows.iter().filter_map(|r| r.device_miou).sum::<f64>() / n,
    }
}

/// Compares two histories run with the same data and seeds. The first
/// generation's per-slot seeds and genotypes must agree.
pub fn paired_gap_report(ptq: &[GenerationLog], aligned: &[GenerationLog]) -> Result<GapReport, SearchError> {
    let first = |h: &[GenerationLog]| -> Vec<(u64, String)> {
        h.first()
            .map(|g| g.rows.iter().map(|r| (r.seed, r.genotype.clone())).collect())
            .unwrap_or_default()
    };
    if ptq.is_empty() || aligned.is_empty() {
        return Err(SearchError::Mismatch("empty history".into()));
    }
    if first(ptq) != first(aligned) {
        return Err(SearchError::Mismatch(
            "first generations differ in seeds or genotypes".into(),
        ));
    }
    for (h, want) in [(ptq, Branch::Ptq), (aligned, Branch::Aligned)] {
        if let Some(r) = h.iter().flat_map(|g| &g.rows).find(|r| r.branch != want) {
            return Err(SearchError::Mismatch(format!(
                "row gen {} slot {} is {} in the {} history",
                r.gen,
                r.slot,
                r.branch.as_str(),
                want.as_str()
            )));
        }
    }
    let p = branch_gap(&contributing(ptq));
    let a = branch_gap(&contributing(aligned));
    Ok(GapReport {
        ptq: p,
        aligned: a,
        recovered_fraction: recovered_fraction(p.mean_gap, a.mean_gap),
    })
}
