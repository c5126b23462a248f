//! Multi-task patch discriminator: a shared conv trunk downsamples the glyph
//! to an N x N feature grid; learned content and style embeddings are dotted
//! against each grid cell to produce two per-patch score maps. Hinge losses
//! over those maps drive adversarial training.
//!
//! Trunk kernels are 3x3 only where the map is downsampled and 1x1 elsewhere,
//! which keeps each patch's receptive field well under the image size; the
//! corner-patch locality test depends on that containment.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, Embedding, ParamMode, VarSet};

const LEAK: f64 = 0.2;

/// Which adversarial signal the discriminator provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscVariant {
    /// Two unconditional patch heads; labels are ignored.
    Patch,
    /// Label-conditioned scores averaged over patches before the hinge.
    Multitask,
    /// Label-conditioned per-patch scores (the full model).
    MultitaskPatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    /// Channel widths after the conv block and the three downsampling
    /// residual blocks; the final two residual blocks keep the last width,
    /// and the embedding dimension equals it.
    pub widths: [usize; 4],
    pub num_contents: usize,
    pub num_styles: usize,
    pub variant: DiscVariant,
}

impl DiscConfig {
    /// Full-scale reference shape: 64x64x1 input -> 4x4x256 features with
    /// 256-dimensional label embeddings.
    pub fn full(num_contents: usize, num_styles: usize) -> Self {
        DiscConfig {
            widths: [32, 64, 128, 256],
            num_contents,
            num_styles,
            variant: DiscVariant::MultitaskPatch,
        }
    }

    /// Sized for single-core runs.
    pub fn desk(num_contents: usize, num_styles: usize) -> Self {
        DiscConfig {
            widths: [8, 16, 32, 64],
            num_contents,
            num_styles,
            variant: DiscVariant::MultitaskPatch,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.widths[3]
    }

    fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::config("discriminator widths must be positive"));
        }
        if self.num_contents == 0 || self.num_styles == 0 {
            return Err(Error::config("discriminator needs at least one label per head"));
        }
        Ok(())
    }
}

/// Residual block; `down` halves the resolution with a 3x3 stride-2 conv and
/// projects the skip, otherwise both convs are 1x1 and the skip is identity.
#[derive(Debug)]
struct ResBlock {
    conv_a: Conv2d,
    conv_b: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn init(
        vs: &mut VarSet,
        name: &str,
        in_c: usize,
        out_c: usize,
        down: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (conv_a, skip) = if down {
            (
                Conv2d::init(vs, &format!("{name}.a"), in_c, out_c, 3, 2, 1, rng)?,
                Some(Conv2d::init(vs, &format!("{name}.skip"), in_c, out_c, 1, 2, 0, rng)?),
            )
        } else {
            (Conv2d::init(vs, &format!("{name}.a"), in_c, out_c, 1, 1, 0, rng)?, None)
        };
        let conv_b = Conv2d::init(vs, &format!("{name}.b"), out_c, out_c, 1, 1, 0, rng)?;
        Ok(ResBlock { conv_a, conv_b, skip })
    }

    fn forward(&self, x: &Tensor, mode: ParamMode) -> Result<Tensor> {
        let h = self.conv_b.forward(&leaky_relu(&self.conv_a.forward(x, mode)?, LEAK)?, mode)?;
        let s = match &self.skip {
            Some(skip) => skip.forward(x, mode)?,
            None => x.clone(),
        };
        leaky_relu(&(h + s)?, LEAK)
    }
}

#[derive(Debug)]
pub struct Discriminator {
    config: DiscConfig,
    vs: VarSet,
    conv0: Conv2d,
    blocks: Vec<ResBlock>,
    embed_content: Embedding,
    embed_style: Embedding,
    head_content: Conv2d,
    head_style: Conv2d,
}

impl Discriminator {
    pub fn new(config: DiscConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut vs = VarSet::new();
        let [w0, w1, w2, w3] = config.widths;
        let conv0 = Conv2d::init(&mut vs, "conv0", 1, w0, 3, 2, 1, rng)?;
        let blocks = vec![
            ResBlock::init(&mut vs, "rb0", w0, w1, true, rng)?,
            ResBlock::init(&mut vs, "rb1", w1, w2, true, rng)?,
            ResBlock::init(&mut vs, "rb2", w2, w3, true, rng)?,
            ResBlock::init(&mut vs, "rb3", w3, w3, false, rng)?,
            ResBlock::init(&mut vs, "rb4", w3, w3, false, rng)?,
        ];
        let embed_content =
            Embedding::init(&mut vs, "embed_c", config.num_contents, w3, rng)?;
        let embed_style = Embedding::init(&mut vs, "embed_s", config.num_styles, w3, rng)?;
        // Unconditional per-patch heads, used by the `patch` variant only.
        let head_content = Conv2d::init(&mut vs, "head_c", w3, 1, 1, 1, 0, rng)?;
        let head_style = Conv2d::init(&mut vs, "head_s", w3, 1, 1, 1, 0, rng)?;
        Ok(Discriminator {
            config,
            vs,
            conv0,
            blocks,
            embed_content,
            embed_style,
            head_content,
            head_style,
        })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn vars(&self) -> &VarSet {
        &self.vs
    }

    /// Shared encoder: (B,1,H,W) -> (B, C, H/16, W/16).
    pub fn trunk(&self, x: &Tensor, mode: ParamMode) -> Result<Tensor> {
        let mut h = leaky_relu(&self.conv0.forward(x, mode)?, LEAK)?;
        for b in &self.blocks {
            h = b.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Per-patch dot product of trunk features with one embedding row:
    /// (B,C,N,N) x (B,C) -> (B,N,N).
    pub fn project_scores(
        &self,
        features: &Tensor,
        ids: &Tensor,
        embed: &Embedding,
        mode: ParamMode,
    ) -> Result<Tensor> {
        let e = embed.forward(ids, mode, features.dtype())?;
        let (b, c) = e.dims2()?;
        let e = e.reshape((b, c, 1, 1))?;
        Ok(features.broadcast_mul(&e)?.sum(1)?)
    }

    fn check_ids(&self, ids: &Tensor, limit: usize, what: &str) -> Result<()> {
        let v = ids.to_vec1::<u32>()?;
        if let Some(bad) = v.iter().find(|x| **x as usize >= limit) {
            return Err(Error::config(format!("{what} label {bad} outside table of {limit}")));
        }
        Ok(())
    }

    /// Content and style score maps for a batch of images under the
    /// configured variant. For `multitask_patch` the maps are (B,N,N); for
    /// `multitask` they are the patch means, (B,1,1); for `patch` they come
    /// from unconditional heads and the labels are ignored.
    pub fn score_maps(
        &self,
        images: &Tensor,
        y_c: &Tensor,
        y_s: &Tensor,
        mode: ParamMode,
    ) -> Result<(Tensor, Tensor)> {
        let f = self.trunk(images, mode)?;
        match self.config.variant {
            DiscVariant::Patch => {
                let c = self.head_content.forward(&f, mode)?.squeeze(1)?;
                let s = self.head_style.forward(&f, mode)?.squeeze(1)?;
                Ok((c, s))
            }
            DiscVariant::Multitask | DiscVariant::MultitaskPatch => {
                self.check_ids(y_c, self.config.num_contents, "content")?;
                self.check_ids(y_s, self.config.num_styles, "style")?;
                let c = self.project_scores(&f, y_c, &self.embed_content, mode)?;
                let s = self.project_scores(&f, y_s, &self.embed_style, mode)?;
                if self.config.variant == DiscVariant::Multitask {
                    let cm = c.mean_keepdim(2)?.mean_keepdim(1)?;
                    let sm = s.mean_keepdim(2)?.mean_keepdim(1)?;
                    Ok((cm, sm))
                } else {
                    Ok((c, s))
                }
            }
        }
    }

    pub fn embed_content(&self) -> &Embedding {
        &self.embed_content
    }

    pub fn embed_style(&self) -> &Embedding {
        &self.embed_style
    }
}

/// Hinge loss for the discriminator: per head, mean over patches and batch of
/// max(0, 1 - D(real)) + max(0, 1 + D(fake)); heads averaged. All scores at
/// zero give exactly 2.
pub fn adv_loss_d(real: &(Tensor, Tensor), fake: &(Tensor, Tensor)) -> Result<Tensor> {
    let hinge_real = |t: &Tensor| -> Result<Tensor> {
        Ok((1.0 - t)?.relu()?.mean_all()?)
    };
    let hinge_fake = |t: &Tensor| -> Result<Tensor> {
        Ok((1.0 + t)?.relu()?.mean_all()?)
    };
    let real_term = ((hinge_real(&real.0)? + hinge_real(&real.1)?)? * 0.5)?;
    let fake_term = ((hinge_fake(&fake.0)? + hinge_fake(&fake.1)?)? * 0.5)?;
    Ok((real_term + fake_term)?)
}

/// Generator-side adversarial loss: the negated per-head score means, summed
/// over the two heads. All scores at +1 give exactly -2.
pub fn adv_loss_g(fake: &(Tensor, Tensor)) -> Result<Tensor> {
    let c = fake.0.mean_all()?;
    let s = fake.1.mean_all()?;
    Ok(((c + s)? * -1.0)?)
}
