//! Focal and L1 objectives over `(batch, channel, height, width)` logits.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Focal,
    L1,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Focal => "focal",
            LossKind::L1 => "l1",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub gamma: f64,
    pub alpha: f64,
    /// L1 only: per channel, average the mean error over positive cells and
    /// the mean error over negative cells instead of taking one plain mean.
    pub balance: bool,
    pub channel_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::Focal, gamma: 2.0, alpha: 0.25, balance: true, channel_weights: vec![1.0; 3] }
    }
}

impl LossConfig {
    pub fn l1() -> Self {
        Self { kind: LossKind::L1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(NnError::Config(format!("focal gamma must be >= 0 (got {})", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(NnError::Config(format!("focal alpha must be in (0, 1] (got {})", self.alpha)));
        }
        if self.channel_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(NnError::Config(format!("invalid channel weights {:?}", self.channel_weights)));
        }
        Ok(())
    }

    /// Mean over all cells and channels of the per-channel weighted loss.
    pub fn compute(&self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        let per_cell = match self.kind {
            LossKind::Focal => focal_elementwise(logits, targets, self.gamma, self.alpha)?,
            LossKind::L1 if self.balance => l1_elementwise(logits, targets)?.mul(&balance_weights(targets, logits)?)?,
            LossKind::L1 => l1_elementwise(logits, targets)?,
        };
        let c = channel_dim(logits)?;
        let n_ch = logits.dim(c)?;
        if self.channel_weights.iter().all(|w| *w == 1.0) {
            return Ok(per_cell.mean_all()?);
        }
        if self.channel_weights.len() != n_ch {
            return Err(NnError::Config(format!("{} channel weights for {n_ch} channels", self.channel_weights.len())));
        }
        let mut shape = vec![1; logits.rank()];
        shape[c] = n_ch;
        let w: Vec<f32> = self.channel_weights.iter().map(|w| *w as f32).collect();
        let w = Tensor::from_vec(w, shape, logits.device())?.to_dtype(logits.dtype())?;
        Ok(per_cell.broadcast_mul(&w)?.mean_all()?)
    }
}

fn channel_dim(t: &Tensor) -> Result<usize> {
    match t.rank() {
        r if r >= 3 => Ok(r - 3),
        r => Err(NnError::Config(format!("loss input needs at least 3 axes (channel, height, width), got {r}"))),
    }
}

/// Per-cell weights `M / (2 n_pos)` on positives and `M / (2 n_neg)` on
/// negatives, with counts taken per channel over the whole batch and `M`
/// the number of cells per channel, so that a plain mean of the weighted
/// errors averages the two class means of every channel.
fn balance_weights(targets: &Tensor, logits: &Tensor) -> Result<Tensor> {
    check_shapes(logits, targets)?;
    let c = channel_dim(logits)?;
    let y = targets.to_dtype(logits.dtype())?.detach();
    let mut n_pos = y.clone();
    for d in (0..y.rank()).rev().filter(|&d| d != c) {
        n_pos = n_pos.sum_keepdim(d)?;
    }
    let m = (y.elem_count() / y.dim(c)?) as f64;
    let w_pos = (n_pos.clamp(1.0, m)?.recip()? * (m / 2.0))?;
    let w_neg = ((n_pos.neg()? + m)?.clamp(1.0, m)?.recip()? * (m / 2.0))?;
    Ok(y.broadcast_mul(&w_pos)?.add(&(y.neg()? + 1.0)?.broadcast_mul(&w_neg)?)?)
}

fn check_shapes(logits: &Tensor, targets: &Tensor) -> Result<()> {
    if logits.dims() != targets.dims() {
        return Err(candle_core::Error::ShapeMismatchBinaryOp {
            lhs: logits.shape().clone(),
            rhs: targets.shape().clone(),
            op: "loss",
        }
        .into());
    }
    Ok(())
}

/// `ln(1 + e^x)` evaluated without overflow, with the exact derivative
/// `sigmoid(x)` (a max/abs composition gets the derivative wrong at 0).
struct Softplus;

fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl CustomOp1 for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("softplus expects a contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|&x| softplus_f64(x as f64) as f32).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|&x| softplus_f64(x)).collect()),
            _ => candle_core::bail!("softplus supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.mul(&candle_nn::ops::sigmoid(arg)?)?))
    }
}

pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softplus)?)
}

/// `−α_t (1−p_t)^γ ln p_t` per element, with `ln p_t = −softplus(−z)` and
/// `ln(1−p_t) = −softplus(z)` for the signed logit `z = x (2y − 1)`.
pub fn focal_elementwise(logits: &Tensor, targets: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    check_shapes(logits, targets)?;
    let y = targets.to_dtype(logits.dtype())?;
    let z = logits.mul(&((&y * 2.0)? - 1.0)?)?;
    let nll = softplus(&z.neg()?)?;
    let weighted = if gamma == 0.0 { nll } else { nll.mul(&(softplus(&z)? * -gamma)?.exp()?)? };
    let alpha_t = ((&y * (2.0 * alpha - 1.0))? + (1.0 - alpha))?;
    Ok(weighted.mul(&alpha_t)?)
}

pub fn focal_loss(logits: &Tensor, targets: &Tensor, gamma: f64, alpha: f64) -> Result<Tensor> {
    Ok(focal_elementwise(logits, targets, gamma, alpha)?.mean_all()?)
}

/// `|sigmoid(x) − y|` per element.
pub fn l1_elementwise(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    check_shapes(logits, targets)?;
    let p = candle_nn::ops::sigmoid(logits)?;
    Ok(p.sub(&targets.to_dtype(logits.dtype())?)?.abs()?)
}

pub fn l1_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok(l1_elementwise(logits, targets)?.mean_all()?)
}
