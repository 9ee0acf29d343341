use bevcvt_core::dataset::{Sample, SampleId};
use bevcvt_core::geometry::CameraModel;
use candle_core::{Device, Tensor};

use crate::{NnError, Result};

/// Model inputs and targets for a group of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, N, 3, H, W)`, pixel values scaled to `[-0.5, 0.5]`.
    pub images: Tensor,
    /// `(B, 1, Hg, Wg)` sparse trajectory raster, 0/1.
    pub trajectory: Tensor,
    /// `(B, 3, Hg, Wg)` ground truth, 0/1.
    pub target: Tensor,
    /// Calibration per sample and view, in the ego frame.
    pub cameras: Vec<Vec<CameraModel>>,
    pub ids: Vec<SampleId>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample], device: &Device) -> Result<Self> {
        let first = samples.first().ok_or_else(|| NnError::Config("empty batch".into()))?;
        let n = first.views.len();
        let (w, h) = first.views.first().map(|v| v.image.dimensions()).ok_or_else(|| NnError::Config("sample without views".into()))?;
        let (gh, gw) = first.trajectory.dim();
        let mut images = Vec::with_capacity(samples.len() * n * 3 * (w * h) as usize);
        let mut traj = Vec::with_capacity(samples.len() * gh * gw);
        let mut target = Vec::with_capacity(samples.len() * 3 * gh * gw);
        for s in samples {
            if s.views.len() != n {
                return Err(NnError::Config(format!("sample {} has {} views, batch has {n}", s.id, s.views.len())));
            }
            if s.trajectory.dim() != (gh, gw) || s.bev_gt.data.dim() != (3, gh, gw) {
                return Err(NnError::Config(format!("sample {} has a different grid size", s.id)));
            }
            for v in &s.views {
                if v.image.dimensions() != (w, h) {
                    return Err(NnError::Config(format!("sample {} view {} is not {w}x{h}", s.id, v.camera.name)));
                }
                for c in 0..3 {
                    images.extend(v.image.pixels().map(|p| p.0[c] as f32 / 255.0 - 0.5));
                }
            }
            traj.extend(s.trajectory.iter().map(|&v| v as f32));
            target.extend(s.bev_gt.data.iter().map(|&v| v as f32));
        }
        let b = samples.len();
        Ok(Self {
            images: Tensor::from_vec(images, (b, n, 3, h as usize, w as usize), device)?,
            trajectory: Tensor::from_vec(traj, (b, 1, gh, gw), device)?,
            target: Tensor::from_vec(target, (b, 3, gh, gw), device)?,
            cameras: samples.iter().map(|s| s.views.iter().map(|v| v.camera.clone()).collect()).collect(),
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_views(&self) -> usize {
        self.cameras.first().map_or(0, Vec::len)
    }

    /// Reorders the (image, calibration) pairs of every sample.
    pub fn permute_views(&self, order: &[usize]) -> Result<Self> {
        let idx = Tensor::from_vec(order.iter().map(|&i| i as u32).collect::<Vec<_>>(), order.len(), self.images.device())?;
        Ok(Self {
            images: self.images.index_select(&idx, 1)?,
            cameras: self.cameras.iter().map(|cams| order.iter().map(|&i| cams[i].clone()).collect()).collect(),
            ..self.clone()
        })
    }
}
