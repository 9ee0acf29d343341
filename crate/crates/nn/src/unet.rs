//! Encoder-decoder baseline: all views are resized to the output grid and
//! stacked with the trajectory raster along channels. Each encoder level
//! halves the resolution; each decoder level upsamples and concatenates the
//! matching encoder output.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::layers::{bilinear_matrix, depth_to_space, upsample2, Conv, LayerNorm, ParamStore, Patchify};
use crate::{NnError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnetConfig {
    pub n_views: usize,
    /// Channel width per encoder level; level `l` runs at 1/2^(l+1) of the grid.
    pub widths: Vec<usize>,
    pub image_size: [usize; 2],
    pub bev_size: [usize; 2],
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self { n_views: 4, widths: vec![16, 32, 48, 72], image_size: [128, 128], bev_size: [128, 128] }
    }
}

impl UnetConfig {
    pub fn in_channels(&self) -> usize {
        3 * self.n_views + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views == 0 || self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(NnError::Config(format!("invalid unet config: {} views, widths {:?}", self.n_views, self.widths)));
        }
        let k = 1usize << self.widths.len();
        if self.bev_size.iter().any(|s| *s == 0 || s % k != 0) {
            return Err(NnError::Config(format!("grid {:?} must be divisible by {k}", self.bev_size)));
        }
        if self.image_size.contains(&0) {
            return Err(NnError::Config("image size must be positive".into()));
        }
        Ok(())
    }
}

struct Level {
    down: Patchify,
    conv: Conv,
}

pub struct Unet {
    config: UnetConfig,
    params: ParamStore,
    encoder: Vec<Level>,
    decoder: Vec<Conv>,
    head_norm: LayerNorm,
    head: Conv,
    resize: Option<(Tensor, Tensor)>,
}

impl Unet {
    pub fn new(config: &UnetConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(seed, device);
        let w = &config.widths;
        let mut encoder = Vec::new();
        let mut prev = config.in_channels();
        for (l, &width) in w.iter().enumerate() {
            encoder.push(Level {
                down: Patchify::new(&mut ps, &format!("enc{l}.down"), prev, width, 2)?,
                conv: Conv::new(&mut ps, &format!("enc{l}.conv"), width, width, 3)?,
            });
            prev = width;
        }
        let mut decoder = Vec::new();
        for l in (0..w.len() - 1).rev() {
            decoder.push(Conv::new(&mut ps, &format!("dec{l}"), w[l + 1] + w[l], w[l], 3)?);
        }
        let head_norm = LayerNorm::new(&mut ps, "head_norm", w[0])?;
        let head = Conv::output(&mut ps, "head", w[0], 3 * 4, 3)?;
        let [ih, iw] = config.image_size;
        let [gh, gw] = config.bev_size;
        let resize = if [ih, iw] == [gh, gw] {
            None
        } else {
            Some((bilinear_matrix(ih, gh, device)?.t()?.contiguous()?, bilinear_matrix(iw, gw, device)?.t()?.contiguous()?))
        };
        Ok(Self { config: config.clone(), params: ps, encoder, decoder, head_norm, head, resize })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Views resized to the grid, stacked with the trajectory, channel-major:
    /// `(3N+1, B, Hg, Wg)`.
    pub fn stack_inputs(&self, batch: &Batch) -> Result<Tensor> {
        let (b, n, c, h, w) = batch.images.dims5()?;
        if 3 * n + 1 != self.config.in_channels() || [h, w] != self.config.image_size {
            return Err(NnError::Config(format!(
                "input has {} channels at {h}x{w}; model expects {} at {:?}",
                3 * n + 1,
                self.config.in_channels(),
                self.config.image_size
            )));
        }
        let [gh, gw] = self.config.bev_size;
        if batch.trajectory.dims4()? != (b, 1, gh, gw) {
            return Err(NnError::Config(format!("trajectory {:?} differs from grid {:?}", batch.trajectory.dims(), self.config.bev_size)));
        }
        let m = n * c * b;
        let views = batch.images.permute((1, 2, 0, 3, 4))?.contiguous()?;
        let views = match &self.resize {
            None => views.reshape((n * c, b, gh, gw))?,
            Some((rows_t, cols_t)) => {
                let x = views.reshape((m * h, w))?.matmul(cols_t)?.reshape((m, h, gw))?;
                let x = x.transpose(1, 2)?.contiguous()?.reshape((m * gw, h))?.matmul(rows_t)?;
                x.reshape((m, gw, gh))?.transpose(1, 2)?.reshape((n * c, b, gh, gw))?
            }
        };
        Ok(Tensor::cat(&[&views, &batch.trajectory.transpose(0, 1)?], 0)?)
    }

    pub fn forward(&self, batch: &Batch) -> Result<Tensor> {
        self.forward_with_skips(batch, true)
    }

    /// With `skips == false` every skip tensor is replaced by zeros.
    pub fn forward_with_skips(&self, batch: &Batch, skips: bool) -> Result<Tensor> {
        let mut x = self.stack_inputs(batch)?;
        let mut outs = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            x = level.conv.forward(&level.down.forward(&x)?.relu()?)?.relu()?;
            outs.push(x.clone());
        }
        for (i, conv) in self.decoder.iter().enumerate() {
            let skip = &outs[outs.len() - 2 - i];
            let skip = if skips { skip.clone() } else { skip.zeros_like()? };
            x = conv.forward(&Tensor::cat(&[&upsample2(&x)?, &skip], 0)?)?.relu()?;
        }
        let x = self.head_norm.forward_channels(&x)?;
        Ok(depth_to_space(&self.head.forward(&x)?, 2)?.transpose(0, 1)?.contiguous()?)
    }
}
