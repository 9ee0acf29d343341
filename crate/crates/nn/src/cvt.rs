//! Cross-view transformer: a shared convolutional backbone encodes every
//! view at two resolutions, a camera-aware positional embedding of each
//! feature cell's viewing ray is added to the keys, and a learned BEV map
//! embedding attends over all views, coarse stage first, before a
//! convolutional decoder upsamples it to the output grid.

use bevcvt_core::geometry::{unproject_direction, CameraModel, ImagePoint};
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::layers::{avg_pool, depth_to_space, softmax_last, upsample2, Conv, LayerNorm, Linear, ParamStore, Patchify};
use crate::{NnError, Result};

/// Feature strides of the backbone outputs, coarse first (stage order).
pub const FEATURE_STRIDES: [usize; 2] = [16, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvtConfig {
    pub embed_dim: usize,
    pub n_heads: usize,
    /// Number of refinement stages; stage `r` attends to stride `FEATURE_STRIDES[r]`.
    pub n_resolutions: usize,
    /// Widths of the three backbone blocks (strides 4, 8 and 16).
    pub backbone_widths: Vec<usize>,
    /// Side of the square map embedding grid.
    pub map_resolution: usize,
    /// Widths of the intermediate ×2 decoder stages; the last stage emits logits.
    pub decoder_widths: Vec<usize>,
    pub ffn_mult: usize,
    pub n_views: usize,
    /// `(height, width)` of the input views.
    pub image_size: [usize; 2],
    /// `(height, width)` of the output grid.
    pub bev_size: [usize; 2],
}

impl Default for CvtConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            n_heads: 4,
            n_resolutions: 2,
            backbone_widths: vec![32, 48, 64],
            map_resolution: 16,
            decoder_widths: vec![32, 16],
            ffn_mult: 2,
            n_views: 4,
            image_size: [128, 128],
            bev_size: [128, 128],
        }
    }
}

impl CvtConfig {
    pub fn decoder_stages(&self) -> usize {
        (self.bev_size[0] / self.map_resolution.max(1)).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(NnError::Config(m));
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return err(format!("embed_dim {} must be a positive multiple of n_heads {}", self.embed_dim, self.n_heads));
        }
        if !(1..=FEATURE_STRIDES.len()).contains(&self.n_resolutions) {
            return err(format!("n_resolutions must be in 1..={} (got {})", FEATURE_STRIDES.len(), self.n_resolutions));
        }
        if self.backbone_widths.len() != 3 || self.backbone_widths.contains(&0) {
            return err(format!("backbone needs three positive widths (got {:?})", self.backbone_widths));
        }
        if self.n_views == 0 {
            return err("n_views must be positive".into());
        }
        if self.image_size.iter().any(|s| *s == 0 || s % 16 != 0) {
            return err(format!("image size {:?} must be a positive multiple of 16", self.image_size));
        }
        let m = self.map_resolution;
        let [bh, bw] = self.bev_size;
        if m == 0 || bh % m != 0 || bh != bw || !(bh / m).is_power_of_two() || bh / m < 2 {
            return err(format!(
                "map resolution {m} must divide the square output grid {bh}x{bw} by a power of two >= 2"
            ));
        }
        if self.decoder_widths.len() + 1 != self.decoder_stages() {
            return err(format!(
                "{} decoder stages need {} intermediate widths (got {:?})",
                self.decoder_stages(),
                self.decoder_stages() - 1,
                self.decoder_widths
            ));
        }
        Ok(())
    }
}

/// Pixel centers of the cells of a feature grid with the given stride.
pub fn feature_pixel_centers(stride: usize, h: usize, w: usize) -> Vec<ImagePoint> {
    let s = stride as f64;
    (0..h).flat_map(|i| (0..w).map(move |j| ImagePoint::new((j as f64 + 0.5) * s, (i as f64 + 0.5) * s))).collect()
}

/// Unit viewing rays `R⁻¹K⁻¹x` through the given pixels, flattened `(n, 3)`.
pub fn ray_directions(cam: &CameraModel, pixels: &[ImagePoint]) -> Vec<f32> {
    pixels
        .iter()
        .flat_map(|q| {
            let d = unproject_direction(q, cam).normalize();
            [d.x as f32, d.y as f32, d.z as f32]
        })
        .collect()
}

/// Shared MLP turning unit ray directions into `D`-dimensional embeddings.
pub struct CameraEmbedding {
    fc1: Linear,
    fc2: Linear,
}

impl CameraEmbedding {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self { fc1: Linear::new(ps, &format!("{name}.fc1"), 3, dim)?, fc2: Linear::new(ps, &format!("{name}.fc2"), dim, dim)? })
    }

    /// `directions`: `(..., 3)` → `(..., D)`.
    pub fn forward(&self, directions: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(directions)?.relu()?)
    }

    /// Embedding of every feature cell of every view: `(B, N·h·w, D)`.
    /// Evaluated once and broadcast when all samples share one rig.
    pub fn for_cameras(&self, cameras: &[Vec<CameraModel>], stride: usize, h: usize, w: usize, device: &Device) -> Result<Tensor> {
        let centers = feature_pixel_centers(stride, h, w);
        let n = cameras.first().map_or(0, Vec::len);
        let b = cameras.len();
        if cameras.iter().all(|c| *c == cameras[0]) {
            let dirs: Vec<f32> = cameras[0].iter().flat_map(|c| ray_directions(c, &centers)).collect();
            let emb = self.forward(&Tensor::from_vec(dirs, (1, n * h * w, 3), device)?)?;
            let d = emb.dim(2)?;
            return Ok(emb.broadcast_as((b, n * h * w, d))?);
        }
        let dirs: Vec<f32> = cameras.iter().flatten().flat_map(|c| ray_directions(c, &centers)).collect();
        self.forward(&Tensor::from_vec(dirs, (b, n * h * w, 3), device)?)
    }
}

/// Scaled dot-product attention with `heads` heads; `q` is `(B, Q, D)`,
/// `k`/`v` are `(B, K, D)`. The softmax runs over the whole key axis.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, nq, d) = q.dims3()?;
    let nk = k.dim(1)?;
    let dh = d / heads;
    let split = |t: &Tensor, n: usize| -> Result<Tensor> { Ok(t.reshape((b, n, heads, dh))?.transpose(1, 2)?.contiguous()?) };
    let q = split(&(q * (1.0 / (dh as f64).sqrt()))?, nq)?;
    let (k, v) = (split(k, nk)?, split(v, nk)?);
    let logits = q.matmul(&k.t()?)?;
    let out = softmax_last(&logits)?.matmul(&v)?;
    Ok(out.transpose(1, 2)?.reshape((b, nq, d))?)
}

/// One refinement stage: pre-norm cross-view attention plus a feed-forward block.
pub struct CrossViewAttention {
    heads: usize,
    norm_q: LayerNorm,
    norm_k: LayerNorm,
    norm_v: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    norm_ff: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl CrossViewAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            heads,
            norm_q: LayerNorm::new(ps, &n("norm_q"), dim)?,
            norm_k: LayerNorm::new(ps, &n("norm_k"), dim)?,
            norm_v: LayerNorm::new(ps, &n("norm_v"), dim)?,
            wq: Linear::new(ps, &n("wq"), dim, dim)?,
            wk: Linear::new(ps, &n("wk"), dim, dim)?,
            wv: Linear::new(ps, &n("wv"), dim, dim)?,
            wo: Linear::new(ps, &n("wo"), dim, dim)?,
            norm_ff: LayerNorm::new(ps, &n("norm_ff"), dim)?,
            ff1: Linear::new(ps, &n("ff1"), dim, dim * ffn_mult)?,
            ff2: Linear::new(ps, &n("ff2"), dim * ffn_mult, dim)?,
        })
    }

    /// `map`: `(B, Q, D)`; `pos`: `(1, Q, D)`; `features`, `embeddings`: `(B, K, D)`
    /// with the keys of all views concatenated along `K`.
    pub fn forward(&self, map: &Tensor, pos: &Tensor, features: &Tensor, embeddings: &Tensor) -> Result<Tensor> {
        if features.dims() != embeddings.dims() || features.dim(2)? != map.dim(2)? {
            return Err(NnError::Config(format!(
                "attention dims: map {:?}, features {:?}, embeddings {:?}",
                map.dims(),
                features.dims(),
                embeddings.dims()
            )));
        }
        let q = self.wq.forward(&self.norm_q.forward(&map.broadcast_add(pos)?)?)?;
        let k = self.wk.forward(&self.norm_k.forward(&(features + embeddings)?)?)?;
        let v = self.wv.forward(&self.norm_v.forward(features)?)?;
        let map = (map + self.wo.forward(&multi_head_attention(&q, &k, &v, self.heads)?)?)?;
        let ff = self.ff2.forward(&self.ff1.forward(&self.norm_ff.forward(&map)?)?.relu()?)?;
        Ok((map + ff)?)
    }
}

struct Backbone {
    stem: Patchify,
    conv1: Conv,
    down1: Patchify,
    conv2: Conv,
    down2: Patchify,
    conv3: Conv,
}

impl Backbone {
    fn new(ps: &mut ParamStore, w: &[usize]) -> Result<Self> {
        Ok(Self {
            stem: Patchify::new(ps, "backbone.stem", 3, w[0], 4)?,
            conv1: Conv::new(ps, "backbone.conv1", w[0], w[0], 3)?,
            down1: Patchify::new(ps, "backbone.down1", w[0], w[1], 2)?,
            conv2: Conv::new(ps, "backbone.conv2", w[1], w[1], 3)?,
            down2: Patchify::new(ps, "backbone.down2", w[1], w[2], 2)?,
            conv3: Conv::new(ps, "backbone.conv3", w[2], w[2], 3)?,
        })
    }

    /// `(3, M, H, W)` → [stride-16, stride-8] feature maps, channel-major.
    fn forward(&self, x: &Tensor) -> Result<[Tensor; 2]> {
        let x = self.stem.forward(x)?.relu()?;
        let x = self.conv1.forward(&x)?.relu()?;
        let x = self.down1.forward(&x)?.relu()?;
        let fine = self.conv2.forward(&x)?.relu()?;
        let x = self.down2.forward(&fine)?.relu()?;
        let coarse = self.conv3.forward(&x)?.relu()?;
        Ok([coarse, fine])
    }
}

/// Per-view features at each resolution, coarse first.
pub struct ViewFeatures {
    /// `(B, N, D, h, w)` per resolution.
    pub maps: Vec<Tensor>,
    /// `(stride, h, w)` per resolution.
    pub grids: Vec<(usize, usize, usize)>,
}

impl ViewFeatures {
    /// Keys of all views concatenated: `(B, N·h·w, D)`.
    pub fn tokens(&self, level: usize) -> Result<Tensor> {
        let (b, n, d, h, w) = self.maps[level].dims5()?;
        Ok(self.maps[level].permute((0, 1, 3, 4, 2))?.reshape((b, n * h * w, d))?)
    }
}

/// Fixed sinusoidal encoding of the map cell coordinates, `(m·m, D)`.
pub fn sinusoidal_grid(m: usize, dim: usize, device: &Device) -> Result<Tensor> {
    let quarter = (dim / 4).max(1);
    let mut out = vec![0f32; m * m * dim];
    for i in 0..m {
        for j in 0..m {
            let row = &mut out[(i * m + j) * dim..(i * m + j + 1) * dim];
            for f in 0..quarter {
                let omega = 1.0 / 100f64.powf(f as f64 / quarter as f64);
                let vals = [(i as f64 * omega).sin(), (i as f64 * omega).cos(), (j as f64 * omega).sin(), (j as f64 * omega).cos()];
                for (c, v) in vals.into_iter().enumerate() {
                    if let Some(slot) = row.get_mut(c * quarter + f) {
                        *slot = v as f32;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (1, m * m, dim), device)?)
}

pub struct Cvt {
    config: CvtConfig,
    params: ParamStore,
    backbone: Backbone,
    project: Vec<Conv>,
    embeddings: Vec<CameraEmbedding>,
    stages: Vec<CrossViewAttention>,
    map_embed: Tensor,
    map_init: Conv,
    sinusoid: Tensor,
    decoder: Vec<Conv>,
    head_norm: LayerNorm,
    head: Conv,
}

impl Cvt {
    pub fn new(config: &CvtConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(seed, device);
        let d = config.embed_dim;
        let m = config.map_resolution;
        let w = &config.backbone_widths;
        let backbone = Backbone::new(&mut ps, w)?;
        let feature_widths = [w[2], w[1]];
        let mut project = Vec::new();
        let mut embeddings = Vec::new();
        let mut stages = Vec::new();
        for r in 0..config.n_resolutions {
            project.push(Conv::new(&mut ps, &format!("project{r}"), feature_widths[r], d, 1)?);
            embeddings.push(CameraEmbedding::new(&mut ps, &format!("camera_embedding{r}"), d)?);
            stages.push(CrossViewAttention::new(&mut ps, &format!("stage{r}"), d, config.n_heads, config.ffn_mult)?);
        }
        let map_embed = ps.uniform("map_embed", &[d, 1, m, m], 0.1)?;
        let map_init = Conv::new(&mut ps, "map_init", d + 1, d, 1)?;
        let mut decoder = Vec::new();
        let mut width = d;
        for (i, &out) in config.decoder_widths.iter().enumerate() {
            decoder.push(Conv::new(&mut ps, &format!("decoder{i}"), width, out, 3)?);
            width = out;
        }
        let head_norm = LayerNorm::new(&mut ps, "head_norm", width)?;
        let head = Conv::output(&mut ps, "head", width, 3 * 4, 3)?;
        Ok(Self {
            sinusoid: sinusoidal_grid(m, d, device)?,
            config: config.clone(),
            params: ps,
            backbone,
            project,
            embeddings,
            stages,
            map_embed,
            map_init,
            decoder,
            head_norm,
            head,
        })
    }

    pub fn config(&self) -> &CvtConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn camera_embedding(&self, level: usize) -> &CameraEmbedding {
        &self.embeddings[level]
    }

    /// Shared-weight backbone over all views: `(B, N, 3, H, W)` → features.
    pub fn encode_images(&self, images: &Tensor) -> Result<ViewFeatures> {
        let (b, n, c, h, w) = images.dims5()?;
        let [eh, ew] = self.config.image_size;
        if c != 3 || h != eh || w != ew {
            return Err(candle_core::Error::UnexpectedShape {
                msg: "view images do not match the configured rig resolution".into(),
                expected: (b, n, 3, eh, ew).into(),
                got: images.shape().clone(),
            }
            .into());
        }
        let x = images.reshape((b * n, c, h, w))?.transpose(0, 1)?.contiguous()?;
        let levels = self.backbone.forward(&x)?;
        let mut maps = Vec::new();
        let mut grids = Vec::new();
        for r in 0..self.config.n_resolutions {
            let f = self.project[r].forward(&levels[r])?;
            let (d, _, fh, fw) = f.dims4()?;
            maps.push(f.reshape((d, b, n, fh, fw))?.permute((1, 2, 0, 3, 4))?.contiguous()?);
            grids.push((FEATURE_STRIDES[r], fh, fw));
        }
        Ok(ViewFeatures { maps, grids })
    }

    pub fn forward(&self, batch: &Batch) -> Result<Tensor> {
        if batch.n_views() != self.config.n_views {
            return Err(NnError::Config(format!(
                "model expects {} views, sample has {}",
                self.config.n_views,
                batch.n_views()
            )));
        }
        let (b, _, gh, gw) = batch.trajectory.dims4()?;
        if [gh, gw] != self.config.bev_size {
            return Err(NnError::Config(format!("grid {gh}x{gw} differs from model output {:?}", self.config.bev_size)));
        }
        let d = self.config.embed_dim;
        let m = self.config.map_resolution;
        let device = batch.images.device();
        let features = self.encode_images(&batch.images)?;

        let traj = avg_pool(&batch.trajectory.transpose(0, 1)?, gh / m)?;
        let init = Tensor::cat(&[&self.map_embed.broadcast_as((d, b, m, m))?, &traj], 0)?;
        let mut map = self.map_init.forward(&init)?.reshape((d, b, m * m))?.permute((1, 2, 0))?.contiguous()?;
        let pos = self.map_embed.reshape((1, d, m * m))?.transpose(1, 2)?.broadcast_add(&self.sinusoid)?;
        for (r, stage) in self.stages.iter().enumerate() {
            let (stride, fh, fw) = features.grids[r];
            let emb = self.embeddings[r].for_cameras(&batch.cameras, stride, fh, fw, device)?;
            map = stage.forward(&map, &pos, &features.tokens(r)?, &emb)?;
        }

        let mut x = map.permute((2, 0, 1))?.reshape((d, b, m, m))?;
        for conv in &self.decoder {
            x = conv.forward(&upsample2(&x)?)?.relu()?;
        }
        let x = self.head_norm.forward_channels(&x)?;
        Ok(depth_to_space(&self.head.forward(&x)?, 2)?.transpose(0, 1)?.contiguous()?)
    }
}
