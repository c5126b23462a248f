//! Multi-layer style projector: a three-stage conv trunk whose feature maps
//! at full, half, and quarter resolution are each pooled (average and max),
//! pushed through a small per-scale MLP, and L2-normalized into unit style
//! codes. One image yields three codes, one per scale.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, global_avg_pool, global_max_pool, leaky_relu, pixel_norm, Conv2d, Linear, ParamMode,
    VarSet,
};
use crate::raster::Raster;

pub const NUM_SCALES: usize = 3;

/// Per-scale unit style vectors for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleCode {
    pub z: [Vec<f32>; NUM_SCALES],
}

impl StyleCode {
    /// Wraps raw per-scale vectors; they must share a dimension and be finite.
    pub fn new(z: [Vec<f32>; NUM_SCALES]) -> Result<Self> {
        let dim = z[0].len();
        if dim == 0 || z.iter().any(|v| v.len() != dim) {
            return Err(Error::config("style code scales must share a nonzero dimension"));
        }
        if z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("style code contains non-finite values"));
        }
        Ok(StyleCode { z })
    }

    /// Wraps and L2-normalizes each scale.
    pub fn normalized(mut z: [Vec<f32>; NUM_SCALES]) -> Result<Self> {
        for v in &mut z {
            let norm = (v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>()).sqrt();
            if norm < 1e-12 {
                return Err(Error::config("cannot normalize a zero style vector"));
            }
            for x in v.iter_mut() {
                *x = (*x as f64 / norm) as f32;
            }
        }
        StyleCode::new(z)
    }

    pub fn dim(&self) -> usize {
        self.z[0].len()
    }

    pub fn norm(&self, scale: usize) -> f64 {
        self.z[scale].iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MspConfig {
    /// Trunk channel widths per stage; stages 2 and 3 run at stride 2.
    pub widths: [usize; NUM_SCALES],
    /// Hidden width of each per-scale projection MLP.
    pub mlp_hidden: usize,
    /// Style code dimension K.
    pub code_dim: usize,
}

impl Default for MspConfig {
    /// Full-scale reference dimensions.
    fn default() -> Self {
        MspConfig { widths: [64, 128, 256], mlp_hidden: 512, code_dim: 256 }
    }
}

impl MspConfig {
    /// Sized for single-core smoke runs and tests.
    pub fn desk() -> Self {
        MspConfig { widths: [8, 16, 32], mlp_hidden: 64, code_dim: 64 }
    }
}

/// Channel-wise pooled statistics of a feature map: (avg, max), each (B, C).
pub fn pooled_stats(features: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((global_avg_pool(features)?, global_max_pool(features)?))
}

#[derive(Debug)]
pub struct Msp {
    config: MspConfig,
    vs: VarSet,
    trunk: Vec<Conv2d>,
    heads: Vec<(Linear, Linear)>,
}

impl Msp {
    pub fn new(config: MspConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.code_dim == 0 || config.mlp_hidden == 0 || config.widths.contains(&0) {
            return Err(Error::config("style projector dimensions must be positive"));
        }
        let mut vs = VarSet::new();
        let mut trunk = Vec::new();
        let mut in_c = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            trunk.push(Conv2d::init(&mut vs, &format!("trunk{i}"), in_c, w, 3, stride, 1, rng)?);
            in_c = w;
        }
        let mut heads = Vec::new();
        for (i, &w) in config.widths.iter().enumerate() {
            let l1 = Linear::init(&mut vs, &format!("head{i}.fc1"), 2 * w, config.mlp_hidden, rng)?;
            let l2 = Linear::init(&mut vs, &format!("head{i}.fc2"), config.mlp_hidden, config.code_dim, rng)?;
            heads.push((l1, l2));
        }
        Ok(Msp { config, vs, trunk, heads })
    }

    pub fn config(&self) -> &MspConfig {
        &self.config
    }

    pub fn vars(&self) -> &VarSet {
        &self.vs
    }

    /// Trunk feature maps at spatial fractions 1, 1/2, 1/4 of the input.
    pub fn trunk_features(&self, x: &Tensor, mode: ParamMode) -> Result<[Tensor; NUM_SCALES]> {
        let mut feats = Vec::with_capacity(NUM_SCALES);
        let mut h = x.clone();
        for conv in &self.trunk {
            h = leaky_relu(&pixel_norm(&conv.forward(&h, mode)?)?, 0.2)?;
            feats.push(h.clone());
        }
        Ok([feats[0].clone(), feats[1].clone(), feats[2].clone()])
    }

    /// Differentiable batched encoding: images (B,1,H,W) to three (B,K)
    /// unit-norm code matrices.
    pub fn encode_t(&self, images: &Tensor, mode: ParamMode) -> Result<[Tensor; NUM_SCALES]> {
        let feats = self.trunk_features(images, mode)?;
        let mut out = Vec::with_capacity(NUM_SCALES);
        for (i, f) in feats.iter().enumerate() {
            let (avg, max) = pooled_stats(f)?;
            let stats = Tensor::cat(&[&avg, &max], 1)?;
            let (l1, l2) = &self.heads[i];
            let h = leaky_relu(&l1.forward(&stats, mode)?, 0.2)?;
            let code = l2.forward(&h, mode)?;
            let norm = (code.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
            out.push(code.broadcast_div(&norm)?);
        }
        Ok([out[0].clone(), out[1].clone(), out[2].clone()])
    }

    /// Convenience scalar encoding of a list of rasters.
    pub fn encode(&self, images: &[&Raster]) -> Result<Vec<StyleCode>> {
        if images.is_empty() {
            return Err(Error::config("cannot encode an empty image list"));
        }
        let batch = nn::glyph_batch(images)?;
        let codes = self.encode_t(&batch, ParamMode::Frozen)?;
        let per_scale: Vec<Vec<Vec<f32>>> =
            codes.iter().map(|t| t.to_vec2::<f32>()).collect::<candle_core::Result<_>>()?;
        (0..images.len())
            .map(|b| {
                StyleCode::new([
                    per_scale[0][b].clone(),
                    per_scale[1][b].clone(),
                    per_scale[2][b].clone(),
                ])
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::test_utils::grad_at;
    use crate::rng::{substream, TAG_INIT};
    use candle_core::{Device, Var};

    fn tiny() -> Msp {
        let mut rng = substream(42, TAG_INIT, 100);
        Msp::new(MspConfig { widths: [4, 6, 8], mlp_hidden: 12, code_dim: 10 }, &mut rng).unwrap()
    }

    fn rand_image(seed: u64, size: usize) -> Tensor {
        use rand::Rng;
        let mut rng = substream(seed, TAG_INIT, 999);
        let data: Vec<f32> = (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, (1, 1, size, size), &Device::Cpu).unwrap()
    }

    #[test]
    fn default_config_is_full_scale() {
        let c = MspConfig::default();
        assert_eq!(c.widths, [64, 128, 256]);
        assert_eq!(c.mlp_hidden, 512);
        assert_eq!(c.code_dim, 256);
    }

    #[test]
    fn codes_are_unit_norm_for_any_params() {
        for seed in 0..4 {
            let mut rng = substream(seed, TAG_INIT, 101);
            let msp =
                Msp::new(MspConfig { widths: [3, 5, 7], mlp_hidden: 9, code_dim: 6 }, &mut rng)
                    .unwrap();
            let x = rand_image(seed, 32);
            let codes = msp.encode_t(&x, ParamMode::Live).unwrap();
            for t in &codes {
                let n = t.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap().sqrt();
                assert!((n - 1.0).abs() < 1e-5, "norm {n}");
            }
        }
    }

    #[test]
    fn trunk_resolutions_are_full_half_quarter() {
        let msp = tiny();
        let x = rand_image(1, 64);
        let feats = msp.trunk_features(&x, ParamMode::Frozen).unwrap();
        assert_eq!(feats[0].dims(), &[1, 4, 64, 64]);
        assert_eq!(feats[1].dims(), &[1, 6, 32, 32]);
        assert_eq!(feats[2].dims(), &[1, 8, 16, 16]);
    }

    #[test]
    fn zeroed_single_channel_trunk_pools_to_zero() {
        let mut rng = substream(7, TAG_INIT, 102);
        let msp =
            Msp::new(MspConfig { widths: [1, 1, 1], mlp_hidden: 2, code_dim: 2 }, &mut rng)
                .unwrap();
        // Hand-set every trunk parameter to zero; a zero image then produces
        // all-zero feature maps, so avg and max pooled stats are exactly 0.
        for i in 0..3 {
            for part in ["weight", "bias"] {
                let v = msp.vars().get(&format!("trunk{i}.{part}")).unwrap();
                v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::zeros((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let feats = msp.trunk_features(&x, ParamMode::Frozen).unwrap();
        for f in &feats {
            let (avg, max) = pooled_stats(f).unwrap();
            assert_eq!(avg.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![0.0]);
            assert_eq!(max.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn batch_encode_matches_single_encode_and_permutes() {
        let msp = tiny();
        let mut images = Vec::new();
        for s in 0..3u64 {
            let t = rand_image(s, 32).flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let data = t.iter().map(|v| (v + 1.0) / 2.0).collect();
            images.push(Raster::from_vec(32, data).unwrap());
        }
        let refs: Vec<&Raster> = images.iter().collect();
        let batch = msp.encode(&refs).unwrap();
        assert_eq!(batch.len(), 3);
        for (i, img) in images.iter().enumerate() {
            let single = msp.encode(&[img]).unwrap();
            for sc in 0..NUM_SCALES {
                for (a, b) in batch[i].z[sc].iter().zip(&single[0].z[sc]) {
                    assert!((a - b).abs() < 1e-5, "batch vs single mismatch");
                }
            }
            assert!((batch[i].norm(0) - 1.0).abs() < 1e-5);
        }
        let permuted_refs: Vec<&Raster> = vec![&images[2], &images[0], &images[1]];
        let permuted = msp.encode(&permuted_refs).unwrap();
        for sc in 0..NUM_SCALES {
            for (a, b) in permuted[0].z[sc].iter().zip(&batch[2].z[sc]) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn full_res_scale_stays_local_while_codes_change_globally() {
        let msp = tiny();
        let x = rand_image(3, 32);
        let feats_a = msp.trunk_features(&x, ParamMode::Frozen).unwrap();
        let codes_a = msp.encode_t(&x, ParamMode::Frozen).unwrap();

        // Bump a 4x4 patch at (12..16, 12..16).
        let mut data = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for y in 12..16 {
            for xx in 12..16 {
                data[y * 32 + xx] += 0.7;
            }
        }
        let x2 = Tensor::from_vec(data, (1, 1, 32, 32), &Device::Cpu).unwrap();
        let feats_b = msp.trunk_features(&x2, ParamMode::Frozen).unwrap();
        let codes_b = msp.encode_t(&x2, ParamMode::Frozen).unwrap();

        // All three codes move.
        for sc in 0..NUM_SCALES {
            let d = (&codes_a[sc] - &codes_b[sc])
                .unwrap()
                .abs()
                .unwrap()
                .max_keepdim(1)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()[0];
            assert!(d > 1e-6, "scale {sc} code did not move");
        }

        // The full-resolution map changes only inside the 3x3-conv receptive
        // field of the patch (one pixel of dilation).
        let a = feats_a[0].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = feats_b[0].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let c = feats_a[0].dims()[1];
        for ch in 0..c {
            for y in 0..32 {
                for xx in 0..32 {
                    let idx = ch * 32 * 32 + y * 32 + xx;
                    let inside = (11..=16).contains(&y) && (11..=16).contains(&xx);
                    if !inside {
                        assert!(
                            (a[idx] - b[idx]).abs() < 1e-6,
                            "leak outside receptive field at ch{ch} ({xx},{y})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn input_gradients_match_finite_difference() {
        let msp = tiny();
        let x64 = rand_image(5, 32).to_dtype(DType::F64).unwrap();
        let xv = Var::from_tensor(&x64).unwrap();

        // d(code[scale][coord]) / d(pixel) for a few probes.
        for (scale, coord, pix) in [(0usize, 2usize, 100usize), (1, 7, 311), (2, 0, 512)] {
            let codes = msp.encode_t(xv.as_tensor(), ParamMode::Frozen).unwrap();
            let target = codes[scale].flatten_all().unwrap().narrow(0, coord, 1).unwrap();
            let grads = target.sum_all().unwrap().backward().unwrap();
            let analytic = grads
                .get(xv.as_tensor())
                .expect("input gradient missing")
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()[pix];

            let f = |xs: &Var| -> f64 {
                let codes = msp.encode_t(xs.as_tensor(), ParamMode::Frozen).unwrap();
                codes[scale]
                    .flatten_all()
                    .unwrap()
                    .to_vec1::<f64>()
                    .unwrap()[coord]
            };
            let eps = 1e-6;
            let mut data = x64.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            data[pix] += eps;
            xv.set(&Tensor::from_vec(data.clone(), (1, 1, 32, 32), &Device::Cpu).unwrap()).unwrap();
            let hi = f(&xv);
            data[pix] -= 2.0 * eps;
            xv.set(&Tensor::from_vec(data.clone(), (1, 1, 32, 32), &Device::Cpu).unwrap()).unwrap();
            let lo = f(&xv);
            data[pix] += eps;
            xv.set(&Tensor::from_vec(data, (1, 1, 32, 32), &Device::Cpu).unwrap()).unwrap();
            let numeric = (hi - lo) / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-3,
                "scale {scale} coord {coord} pix {pix}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn msp_param_gradients_match_finite_difference() {
        let msp = tiny();
        let x = rand_image(6, 32).to_dtype(DType::F64).unwrap();
        let loss_of = |m: &Msp| -> f64 {
            let codes = m.encode_t(&x, ParamMode::Live).unwrap();
            let mut acc = 0.0f64;
            for c in &codes {
                acc += c.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
                    + c.sum_all().unwrap().to_scalar::<f64>().unwrap();
            }
            acc
        };
        let codes = msp.encode_t(&x, ParamMode::Live).unwrap();
        let mut loss = Tensor::zeros((), DType::F64, &Device::Cpu).unwrap();
        for c in &codes {
            loss = (loss + c.sqr().unwrap().sum_all().unwrap()).unwrap();
            loss = (loss + c.sum_all().unwrap()).unwrap();
        }
        let grads = loss.backward().unwrap();
        for (name, idx) in [("trunk0.weight", 3), ("head1.fc2.weight", 17), ("head2.fc1.bias", 2)]
        {
            let v = msp.vars().get(name).unwrap();
            let analytic = grad_at(&grads, v, idx);
            // Small eps: the loss runs in f64 end to end, and max-pool and
            // leaky-relu kinks must not be crossed by the probe.
            let numeric =
                crate::nn::test_utils::numeric_grad(v, idx, 2e-5, || Ok(loss_of(&msp))).unwrap();
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-3,
                "{name}[{idx}]: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn style_code_constructors_validate() {
        assert!(StyleCode::new([vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0]]).is_err());
        assert!(StyleCode::new([vec![f32::NAN], vec![1.0], vec![1.0]]).is_err());
        let c = StyleCode::normalized([vec![3.0, 4.0], vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
        assert!((c.z[0][0] - 0.6).abs() < 1e-6 && (c.z[0][1] - 0.8).abs() < 1e-6);
        assert!(StyleCode::normalized([vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).is_err());
    }
}
