//! Geometric initialization: 2D masks are projected into the cloud to form an initial
//! 3D mask, which is then grown into a fixed-budget nearest-neighbor crop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::PixelMask2D;
use crate::scene::{CameraFrame, Mask3D, PointCloud};
use crate::spatial::SpatialIndex;

pub const DEFAULT_DEPTH_TOL: f64 = 0.02;
pub const DEFAULT_N_CROP: usize = 8192;

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("frame {frame}: mask is {found_w}x{found_h}, frame is {width}x{height}")]
    MaskDimensionMismatch { frame: String, width: u32, height: u32, found_w: u32, found_h: u32 },
    #[error("initial mask flags no points")]
    EmptyInitialMask,
    #[error("initial mask has {found} entries for a cloud of {expected} points")]
    MaskLengthMismatch { expected: usize, found: usize },
    #[error("crop budget must be at least 1")]
    InvalidBudget,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// Continuous pixel coordinates and camera-frame depth.
    Visible {
        u: f64,
        v: f64,
        z: f64,
    },
    Behind,
}

impl Projection {
    /// Integer pixel under half-open bounds `[0, W) x [0, H)`.
    pub fn pixel(&self, frame: &CameraFrame) -> Option<(u32, u32)> {
        match *self {
            Projection::Visible { u, v, .. } => {
                (u >= 0.0 && v >= 0.0 && u < frame.width as f64 && v < frame.height as f64)
                    .then(|| (u.floor() as u32, v.floor() as u32))
            }
            Projection::Behind => None,
        }
    }
}

/// Pinhole projection with world-to-camera extrinsics.
pub fn project_point(p: &[f64; 3], frame: &CameraFrame) -> Projection {
    let r = &frame.rotation;
    let t = &frame.translation;
    let mut cam = [0.0; 3];
    for (i, c) in cam.iter_mut().enumerate() {
        *c = r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i];
    }
    if cam[2] <= 0.0 {
        return Projection::Behind;
    }
    let k = &frame.intrinsics;
    let x = k[0][0] * cam[0] + k[0][1] * cam[1] + k[0][2] * cam[2];
    let y = k[1][1] * cam[1] + k[1][2] * cam[2];
    Projection::Visible { u: x / cam[2], v: y / cam[2], z: cam[2] }
}

/// Indices (ascending) of cloud points that land on a set pixel and pass the visibility
/// test: against the depth map when the frame has one, otherwise against a z-buffer of
/// the nearest projecting point per pixel.
pub fn lift_mask(
    mask: &PixelMask2D,
    frame: &CameraFrame,
    cloud: &PointCloud,
    depth_tol: f64,
) -> Result<Vec<usize>, LiftError> {
    if mask.width != frame.width || mask.height != frame.height {
        return Err(LiftError::MaskDimensionMismatch {
            frame: frame.id.clone(),
            width: frame.width,
            height: frame.height,
            found_w: mask.width,
            found_h: mask.height,
        });
    }
    let projected: Vec<Option<(u32, u32, f64)>> = (0..cloud.len())
        .map(|i| {
            let proj = project_point(&cloud.point(i), frame);
            match (proj.pixel(frame), proj) {
                (Some((c, r)), Projection::Visible { z, .. }) => Some((c, r, z)),
                _ => None,
            }
        })
        .collect();

    let width = frame.width as usize;
    let zbuffer = if frame.depth.is_none() {
        let mut zb = vec![f64::INFINITY; width * frame.height as usize];
        for &(c, r, z) in projected.iter().flatten() {
            let slot = &mut zb[r as usize * width + c as usize];
            *slot = slot.min(z);
        }
        Some(zb)
    } else {
        None
    };

    let mut out = Vec::new();
    for (i, proj) in projected.iter().enumerate() {
        let Some((c, r, z)) = *proj else { continue };
        if !mask.get(c, r) {
            continue;
        }
        let visible = match (&frame.depth, &zbuffer) {
            (Some(depth), _) => depth.at(c, r).is_some_and(|d| (z - d).abs() <= depth_tol),
            (None, Some(zb)) => z - zb[r as usize * width + c as usize] <= depth_tol,
            (None, None) => unreachable!(),
        };
        if visible {
            out.push(i);
        }
    }
    Ok(out)
}

/// Flags every point appearing in at least `min_votes` of the per-frame sets.
pub fn merge_initial_masks(per_frame: &[Vec<usize>], len: usize, min_votes: usize) -> Mask3D {
    let mut votes = vec![0usize; len];
    for set in per_frame {
        let mut seen = set.clone();
        seen.sort_unstable();
        seen.dedup();
        for i in seen {
            votes[i] += 1;
        }
    }
    let threshold = min_votes.max(1);
    Mask3D::new(votes.into_iter().map(|v| v >= threshold).collect(), None).expect("flag-only mask is valid")
}

/// The refinement network's input region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRegion {
    /// Cloud indices, unique and ascending.
    pub indices: Vec<usize>,
    /// Parallel to `indices`: whether the point was in the initial mask.
    pub init_flags: Vec<bool>,
    pub centroid: [f64; 3],
}

impl CropRegion {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn positions(&self, cloud: &PointCloud) -> Vec<[f64; 3]> {
        self.indices.iter().map(|&i| cloud.point(i)).collect()
    }

    pub fn from_indices(mut indices: Vec<usize>, cloud: &PointCloud, m_init: &Mask3D) -> Self {
        indices.sort_unstable();
        indices.dedup();
        let init_flags = indices.iter().map(|&i| m_init.flags()[i]).collect();
        let mut centroid = [0.0; 3];
        for &i in &indices {
            let p = cloud.point(i);
            for a in 0..3 {
                centroid[a] += p[a];
            }
        }
        let n = indices.len().max(1) as f64;
        for c in centroid.iter_mut() {
            *c /= n;
        }
        Self { indices, init_flags, centroid }
    }
}

struct SeedCursor {
    seed: usize,
    fetched: Vec<usize>,
    k: usize,
    pos: usize,
}

/// Grows the initial mask into `min(n_crop, M)` points: every seed first contributes
/// itself, then seeds take turns (ascending index) adding their nearest not-yet-collected
/// neighbor until the budget is met.
pub fn crop_neighbors(
    cloud: &PointCloud,
    m_init: &Mask3D,
    index: &SpatialIndex,
    n_crop: usize,
) -> Result<CropRegion, LiftError> {
    if m_init.len() != cloud.len() {
        return Err(LiftError::MaskLengthMismatch { expected: cloud.len(), found: m_init.len() });
    }
    if n_crop == 0 {
        return Err(LiftError::InvalidBudget);
    }
    let seeds = m_init.indices();
    if seeds.is_empty() {
        return Err(LiftError::EmptyInitialMask);
    }
    let total = cloud.len();
    let budget = n_crop.min(total);
    let mut collected = vec![false; total];
    let mut picked = Vec::with_capacity(budget);

    for &s in &seeds {
        if picked.len() == budget {
            break;
        }
        collected[s] = true;
        picked.push(s);
    }

    let mut cursors: Vec<SeedCursor> =
        seeds.iter().map(|&seed| SeedCursor { seed, fetched: Vec::new(), k: 0, pos: 0 }).collect();
    while picked.len() < budget {
        let mut progressed = false;
        for cur in cursors.iter_mut() {
            if picked.len() == budget {
                break;
            }
            loop {
                if cur.pos == cur.fetched.len() {
                    if cur.k >= total {
                        break;
                    }
                    cur.k = (cur.k * 2).max(16).min(total);
                    // Larger k returns the same prefix under the (distance, index) order.
                    cur.fetched = index.knn(&index.points()[cur.seed], cur.k).into_iter().map(|n| n.index).collect();
                }
                let cand = cur.fetched[cur.pos];
                cur.pos += 1;
                if !collected[cand] {
                    collected[cand] = true;
                    picked.push(cand);
                    progressed = true;
                    break;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    Ok(CropRegion::from_indices(picked, cloud, m_init))
}
