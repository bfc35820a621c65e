//! Reconstruction metrics: pelvis-aligned joint/vertex errors, their
//! Procrustes-aligned variants, rank/linear correlation, and min-of-M
//! aggregation.

mod correlation;
mod procrustes;

pub use correlation::{plcc, srcc};
pub use procrustes::{umeyama, SimilarityTransform};

use crate::skeleton::{densify_vertices, SkeletonTopology, Vec3, POINTS_PER_BONE};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("point set size mismatch: {lhs} vs {rhs}")]
    SizeMismatch { lhs: usize, rhs: usize },
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("degenerate point configuration (covariance rank < 2)")]
    Degenerate,
    #[error("correlation is undefined for constant input")]
    ConstantInput,
    #[error("min-of-m needs a non-empty report list")]
    EmptyReportList,
}

/// The four reconstruction errors for one prediction, in millimeters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub pve_mm: f64,
    pub mpjpe_mm: f64,
    pub pa_pve_mm: f64,
    pub pa_mpjpe_mm: f64,
}

impl MetricReport {
    /// All four metrics from joint sets; vertices are densified from the
    /// joints and the joint-fit Procrustes transform is reused for PA-PVE.
    pub fn compute(
        pred_joints: &[Vec3],
        gt_joints: &[Vec3],
        topology: &SkeletonTopology,
    ) -> Result<MetricReport, MetricsError> {
        let pred_vertices = densify_vertices(pred_joints, topology, POINTS_PER_BONE);
        let gt_vertices = densify_vertices(gt_joints, topology, POINTS_PER_BONE);
        Ok(MetricReport {
            pve_mm: pve(&pred_vertices, &gt_vertices, pred_joints[0], gt_joints[0])?,
            mpjpe_mm: mpjpe(pred_joints, gt_joints)?,
            pa_pve_mm: pa_pve(pred_joints, gt_joints, &pred_vertices, &gt_vertices)?,
            pa_mpjpe_mm: pa_mpjpe(pred_joints, gt_joints)?,
        })
    }

    pub fn values(&self) -> [f64; 4] {
        [self.pve_mm, self.mpjpe_mm, self.pa_pve_mm, self.pa_mpjpe_mm]
    }

    pub const NAMES: [&'static str; 4] = ["pve", "mpjpe", "pa-pve", "pa-mpjpe"];
}

fn pelvis_aligned_mean_error(
    pred: &[Vec3],
    gt: &[Vec3],
    pred_anchor: Vec3,
    gt_anchor: Vec3,
) -> f64 {
    let n = pred.len() as f64;
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            let dx = (p[0] - pred_anchor[0]) - (g[0] - gt_anchor[0]);
            let dy = (p[1] - pred_anchor[1]) - (g[1] - gt_anchor[1]);
            let dz = (p[2] - pred_anchor[2]) - (g[2] - gt_anchor[2]);
            (dx * dx + dy * dy + dz * dz).sqrt()
        })
        .sum::<f64>()
        / n
}

/// Mean per-joint position error with the pelvis (joint 0) as the reference
/// point, in the units of the inputs (mm here).
pub fn mpjpe(pred_joints: &[Vec3], gt_joints: &[Vec3]) -> Result<f64, MetricsError> {
    if pred_joints.len() != gt_joints.len() {
        return Err(MetricsError::SizeMismatch {
            lhs: pred_joints.len(),
            rhs: gt_joints.len(),
        });
    }
    if pred_joints.len() < 2 {
        return Err(MetricsError::TooFewPoints {
            need: 2,
            got: pred_joints.len(),
        });
    }
    Ok(pelvis_aligned_mean_error(
        pred_joints,
        gt_joints,
        pred_joints[0],
        gt_joints[0],
    ))
}

/// Mean per-vertex position error, pelvis-aligned using joint 0 of the
/// associated skeletons.
pub fn pve(
    pred_vertices: &[Vec3],
    gt_vertices: &[Vec3],
    pred_pelvis: Vec3,
    gt_pelvis: Vec3,
) -> Result<f64, MetricsError> {
    if pred_vertices.len() != gt_vertices.len() {
        return Err(MetricsError::SizeMismatch {
            lhs: pred_vertices.len(),
            rhs: gt_vertices.len(),
        });
    }
    if pred_vertices.is_empty() {
        return Err(MetricsError::TooFewPoints { need: 1, got: 0 });
    }
    Ok(pelvis_aligned_mean_error(
        pred_vertices,
        gt_vertices,
        pred_pelvis,
        gt_pelvis,
    ))
}

/// MPJPE after the optimal similarity alignment of the predicted joints.
pub fn pa_mpjpe(pred_joints: &[Vec3], gt_joints: &[Vec3]) -> Result<f64, MetricsError> {
    let transform = umeyama(pred_joints, gt_joints)?;
    let aligned: Vec<Vec3> = pred_joints.iter().map(|&p| transform.apply(p)).collect();
    mpjpe(&aligned, gt_joints)
}

/// PVE after the joint-fit similarity alignment (the same transform the
/// joints produced is applied to the vertices).
pub fn pa_pve(
    pred_joints: &[Vec3],
    gt_joints: &[Vec3],
    pred_vertices: &[Vec3],
    gt_vertices: &[Vec3],
) -> Result<f64, MetricsError> {
    let transform = umeyama(pred_joints, gt_joints)?;
    let aligned: Vec<Vec3> = pred_vertices.iter().map(|&v| transform.apply(v)).collect();
    let aligned_pelvis = transform.apply(pred_joints[0]);
    pve(&aligned, gt_vertices, aligned_pelvis, gt_joints[0])
}

/// Per-metric independent minimum over a set of reports.
pub fn min_of_m(reports: &[MetricReport]) -> Result<MetricReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyReportList);
    }
    Ok(MetricReport {
        pve_mm: reports.iter().map(|r| r.pve_mm).fold(f64::INFINITY, f64::min),
        mpjpe_mm: reports.iter().map(|r| r.mpjpe_mm).fold(f64::INFINITY, f64::min),
        pa_pve_mm: reports.iter().map(|r| r.pa_pve_mm).fold(f64::INFINITY, f64::min),
        pa_mpjpe_mm: reports
            .iter()
            .map(|r| r.pa_mpjpe_mm)
            .fold(f64::INFINITY, f64::min),
    })
}
