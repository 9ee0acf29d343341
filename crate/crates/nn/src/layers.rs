//! Minimal layers expressed with matmuls and reshapes. Convolutions use an
//! explicit im2col so their backward pass is plain matrix products, which is
//! considerably faster on CPU than transposed convolutions.
//!
//! Image-like activations are stored channel-major, `(C, B, H, W)`, so that
//! every convolution is a single 2-D matrix product. (Batched matmuls with a
//! broadcast batch axis are avoided altogether.)

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Result;

/// Named trainable parameters, initialized from a seeded generator so that
/// identical seeds give bit-identical models.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed), device: device.clone() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a parameter drawn uniformly from `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| self.rng.random_range(-bound..=bound) as f32).collect();
        self.insert(name, Tensor::from_vec(data, shape, &self.device)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = Tensor::full(value as f32, shape, &self.device)?;
        self.insert(name, t)
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        assert!(!self.vars.contains_key(name), "parameter {name} registered twice");
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter; names and shapes must match exactly.
    pub fn assign(&self, tensors: &BTreeMap<String, Tensor>) -> std::result::Result<(), String> {
        if tensors.len() != self.vars.len() {
            return Err(format!("expected {} tensors, found {}", self.vars.len(), tensors.len()));
        }
        for (name, var) in &self.vars {
            let t = tensors.get(name).ok_or_else(|| format!("missing tensor {name}"))?;
            if t.dims() != var.dims() {
                return Err(format!("tensor {name}: shape {:?}, expected {:?}", t.dims(), var.dims()));
            }
            var.set(&t.to_dtype(DType::F32).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

/// Fully connected layer on the last axis; weight stored as `(in, out)`.
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, inp: usize, out: usize) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        Ok(Self {
            w: ps.uniform(&format!("{name}.weight"), &[inp, out], (3.0f64).sqrt() * bound)?,
            b: ps.uniform(&format!("{name}.bias"), &[out], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inp = *dims.last().expect("non-scalar input");
        let mut out_dims = dims.clone();
        *out_dims.last_mut().unwrap() = self.w.dim(1)?;
        let y = x.reshape((x.elem_count() / inp, inp))?.matmul(&self.w)?.broadcast_add(&self.b)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.constant(&format!("{name}.weight"), &[dim], 1.0)?,
            beta: ps.constant(&format!("{name}.bias"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(standardize_last(x)?.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }

    /// Normalizes every pixel over channels of a `(C, B, H, W)` map.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        let (c, b, h, w) = x.dims4()?;
        let rows = x.reshape((c, b * h * w))?.t()?;
        Ok(self.forward(&rows)?.t()?.contiguous()?.reshape((c, b, h, w))?)
    }
}

const LN_EPS: f64 = 1e-5;

/// `(x − mean) / sqrt(var + eps)` over the last axis, fused, with the
/// analytic backward `(g − mean(g) − x̂·mean(g⊙x̂)) / σ`.
pub fn standardize_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Standardize)?)
}

struct Standardize;
struct StandardizeGrad;

fn row_stats<T: num_like::Float>(row: &[T]) -> (T, T) {
    let n = T::from_usize(row.len());
    let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
    (mean, T::one() / (var + T::from_f64(LN_EPS)).sqrt())
}

fn standardize_rows<T: num_like::Float>(x: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let (mean, inv) = row_stats(row);
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - mean) * inv;
        }
    }
    out
}

fn standardize_grad_rows<T: num_like::Float>(x: &[T], g: &[T], dim: usize) -> Vec<T> {
    let n = T::from_usize(dim);
    let mut out = vec![T::zero(); x.len()];
    for ((row, gr), dst) in x.chunks_exact(dim).zip(g.chunks_exact(dim)).zip(out.chunks_exact_mut(dim)) {
        let (mean, inv) = row_stats(row);
        let mut g_mean = T::zero();
        let mut gx_mean = T::zero();
        for (&v, &gv) in row.iter().zip(gr) {
            g_mean = g_mean + gv;
            gx_mean = gx_mean + gv * (v - mean) * inv;
        }
        g_mean = g_mean / n;
        gx_mean = gx_mean / n;
        for ((d, &v), &gv) in dst.iter_mut().zip(row).zip(gr) {
            *d = (gv - g_mean - (v - mean) * inv * gx_mean) * inv;
        }
    }
    out
}

fn contiguous<'a>(layout: &candle_core::Layout, what: &str) -> candle_core::Result<(usize, usize)> {
    layout.contiguous_offsets().ok_or_else(|| candle_core::Error::Msg(format!("{what} expects a contiguous input")))
}

impl candle_core::CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "standardize-last"
    }

    fn cpu_fwd(&self, storage: &candle_core::CpuStorage, layout: &candle_core::Layout) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let (start, end) = contiguous(layout, "standardize")?;
        let dim = *layout.dims().last().unwrap_or(&1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(standardize_rows(&v[start..end], dim)),
            CpuStorage::F64(v) => CpuStorage::F64(standardize_rows(&v[start..end], dim)),
            _ => candle_core::bail!("standardize supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad_res.contiguous()?, &StandardizeGrad)?))
    }
}

impl candle_core::CustomOp2 for StandardizeGrad {
    fn name(&self) -> &'static str {
        "standardize-last-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let (a0, a1) = contiguous(l1, "standardize gradient")?;
        let (b0, b1) = contiguous(l2, "standardize gradient")?;
        let dim = *l1.dims().last().unwrap_or(&1);
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(standardize_grad_rows(&x[a0..a1], &g[b0..b1], dim)),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(standardize_grad_rows(&x[a0..a1], &g[b0..b1], dim)),
            _ => candle_core::bail!("standardize gradient supports matching f32 or f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

const OUTPUT_INIT_SCALE: f64 = 0.01;

/// Stride-1 `k×k` convolution with zero padding `k/2` on `(C, B, H, W)`.
pub struct Conv {
    k: usize,
    w: Tensor,
    b: Tensor,
}

impl Conv {
    pub fn new(ps: &mut ParamStore, name: &str, inp: usize, out: usize, k: usize) -> Result<Self> {
        assert!(k % 2 == 1, "odd kernels only");
        let fan_in = (inp * k * k) as f64;
        Ok(Self {
            k,
            w: ps.uniform(&format!("{name}.weight"), &[out, inp * k * k], (6.0 / fan_in).sqrt())?,
            b: ps.uniform(&format!("{name}.bias"), &[out, 1], 1.0 / fan_in.sqrt())?,
        })
    }

    /// Output layer: near-zero weights and zero bias, so every logit starts
    /// close to 0 where the sigmoid is least saturated.
    pub fn output(ps: &mut ParamStore, name: &str, inp: usize, out: usize, k: usize) -> Result<Self> {
        assert!(k % 2 == 1, "odd kernels only");
        let fan_in = (inp * k * k) as f64;
        Ok(Self {
            k,
            w: ps.uniform(&format!("{name}.weight"), &[out, inp * k * k], OUTPUT_INIT_SCALE * (6.0 / fan_in).sqrt())?,
            b: ps.constant(&format!("{name}.bias"), &[out, 1], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, b, h, w) = x.dims4()?;
        let cols = if self.k == 1 {
            x.reshape((c, b * h * w))?
        } else {
            let p = self.k / 2;
            let xp = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
            let mut taps = Vec::with_capacity(self.k * self.k);
            for dy in 0..self.k {
                for dx in 0..self.k {
                    taps.push(xp.narrow(2, dy, h)?.narrow(3, dx, w)?);
                }
            }
            Tensor::cat(&taps, 0)?.reshape((c * self.k * self.k, b * h * w))?
        };
        let out = self.w.matmul(&cols)?.broadcast_add(&self.b)?;
        Ok(out.reshape(((), b, h, w))?)
    }
}

/// Non-overlapping `k×k` patches with stride `k`, linearly projected.
pub struct Patchify {
    k: usize,
    proj: Conv,
}

impl Patchify {
    pub fn new(ps: &mut ParamStore, name: &str, inp: usize, out: usize, k: usize) -> Result<Self> {
        Ok(Self { k, proj: Conv::new(ps, name, inp * k * k, out, 1)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&space_to_depth(x, self.k)?)
    }
}

/// `(C, B, H, W)` → `(C·k·k, B, H/k, W/k)`; channel `(c, dy, dx)` of patch
/// `(i, j)` is pixel `(k·i + dy, k·j + dx)` of channel `c`.
pub fn space_to_depth(x: &Tensor, k: usize) -> Result<Tensor> {
    let (c, b, h, w) = x.dims4()?;
    if h % k != 0 || w % k != 0 {
        return Err(candle_core::Error::Msg(format!("spatial size {h}x{w} not divisible by {k}")).into());
    }
    let t = x.reshape((c, b, h / k, k, w / k, k))?.permute((0, 3, 5, 1, 2, 4))?;
    Ok(t.contiguous()?.reshape((c * k * k, b, h / k, w / k))?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, k: usize) -> Result<Tensor> {
    let (c, b, h, w) = x.dims4()?;
    let co = c / (k * k);
    let t = x.reshape((co, k, k, b, h, w))?.permute((0, 3, 4, 1, 5, 2))?;
    Ok(t.contiguous()?.reshape((co, b, h * k, w * k))?)
}

/// Nearest-neighbour ×2 upsampling of the two trailing axes.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let t = x.reshape((b, c, h, 1, w, 1))?.broadcast_as((b, c, h, 2, w, 2))?;
    Ok(t.contiguous()?.reshape((b, c, 2 * h, 2 * w))?)
}

/// Mean over non-overlapping `k×k` windows of the two trailing axes.
pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / k, k, w / k, k))?.mean(5)?.mean(3)?)
}

/// Softmax over the last axis in a single pass, with the analytic backward
/// `y ⊙ (g − Σ g⊙y)`.
struct SoftmaxLast;

fn softmax_rows<T: num_like::Float>(src: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (row, dst) in src.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            sum = sum + *d;
        }
        let inv = T::one() / sum;
        for d in dst.iter_mut() {
            *d = *d * inv;
        }
    }
    out
}

mod num_like {
    pub trait Float: Copy + std::ops::Add<Output = Self> + std::ops::Sub<Output = Self> + std::ops::Mul<Output = Self> + std::ops::Div<Output = Self> {
        fn zero() -> Self;
        fn one() -> Self;
        fn neg_infinity() -> Self;
        fn max(self, other: Self) -> Self;
        fn exp(self) -> Self;
        fn sqrt(self) -> Self;
        fn from_usize(n: usize) -> Self;
        fn from_f64(v: f64) -> Self;
    }
    macro_rules! impl_float {
        ($t:ty, $exp:path) => {
            impl Float for $t {
                fn zero() -> Self { 0.0 }
                fn one() -> Self { 1.0 }
                fn neg_infinity() -> Self { <$t>::NEG_INFINITY }
                fn max(self, other: Self) -> Self { <$t>::max(self, other) }
                fn exp(self) -> Self { $exp(self) }
                fn sqrt(self) -> Self { <$t>::sqrt(self) }
                fn from_usize(n: usize) -> Self { n as $t }
                fn from_f64(v: f64) -> Self { v as $t }
            }
        };
    }
    impl_float!(f32, f32::exp);
    impl_float!(f64, f64::exp);
}

impl candle_core::CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &candle_core::CpuStorage, layout: &candle_core::Layout) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("softmax expects a contiguous input".into()))?;
        let dim = *layout.dims().last().unwrap_or(&1);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_rows(&v[start..end], dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_rows(&v[start..end], dim)),
            _ => candle_core::bail!("softmax supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&grad_res.contiguous()?, &SoftmaxGrad)?))
    }
}

/// `y ⊙ (g − Σ g⊙y)` row by row, for `(y, g)`.
struct SoftmaxGrad;

fn softmax_grad_rows<T: num_like::Float>(y: &[T], g: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), dst) in y.chunks_exact(dim).zip(g.chunks_exact(dim)).zip(out.chunks_exact_mut(dim)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((d, &a), &b) in dst.iter_mut().zip(yr).zip(gr) {
            *d = a * (b - dot);
        }
    }
    out
}

impl candle_core::CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "softmax-last-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage;
        let msg = || candle_core::Error::Msg("softmax gradient expects contiguous inputs".into());
        let (a0, a1) = l1.contiguous_offsets().ok_or_else(msg)?;
        let (b0, b1) = l2.contiguous_offsets().ok_or_else(msg)?;
        let dim = *l1.dims().last().unwrap_or(&1);
        let out = match (s1, s2) {
            (CpuStorage::F32(y), CpuStorage::F32(g)) => CpuStorage::F32(softmax_grad_rows(&y[a0..a1], &g[b0..b1], dim)),
            (CpuStorage::F64(y), CpuStorage::F64(g)) => CpuStorage::F64(softmax_grad_rows(&y[a0..a1], &g[b0..b1], dim)),
            _ => candle_core::bail!("softmax gradient supports matching f32 or f64 inputs only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

/// Bilinear resampling matrix `(out, inp)` with half-pixel centers.
pub fn bilinear_matrix(inp: usize, out: usize, device: &Device) -> Result<Tensor> {
    let mut m = vec![0f32; out * inp];
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let t = src - lo as f64;
        m[i * inp + lo] += (1.0 - t) as f32;
        m[i * inp + hi] += t as f32;
    }
    Ok(Tensor::from_vec(m, (out, inp), device)?)
}
