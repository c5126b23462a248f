//! Cluster memory dictionary and the contrastive style loss.
//!
//! The memory holds one unit-norm center per (scale, training style),
//! rebuilt from class means at each epoch start and nudged toward fresh
//! ground-truth codes by a momentum rule during the epoch. The loss is
//! InfoNCE over the style axis, summed across the three scales.
//!
//! Two routes compute the same loss: a scalar f64 route with hand-derived
//! gradients (the reference), and a candle graph route used for training
//! backprop. A consistency test binds them together.

use candle_core::{DType, Device, Tensor};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::msp::{StyleCode, NUM_SCALES};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MemoryConfig {
    /// Weight kept on the old center during a momentum update.
    pub momentum: f64,
    /// Softmax temperature shared by both loss paths.
    pub tau: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig { momentum: 0.1, tau: 0.05 }
    }
}

impl MemoryConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1]"));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }
}

/// Per-scale, per-style unit cluster centers, f64 for reproducible updates.
#[derive(Debug, Clone)]
pub struct StyleMemory {
    centers: [Vec<Vec<f64>>; NUM_SCALES],
    num_styles: usize,
    dim: usize,
    pub config: MemoryConfig,
}

fn normalize_in_place(v: &mut [f64]) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::integrity("degenerate (near-zero) cluster center"));
    }
    for x in v {
        *x /= norm;
    }
    Ok(())
}

impl StyleMemory {
    /// Builds centers as L2-normalized class means of the given codes.
    /// `codes` pairs each style code with its dense style index in [0, S).
    pub fn from_codes(
        codes: &[(StyleCode, usize)],
        num_styles: usize,
        config: MemoryConfig,
    ) -> Result<Self> {
        config.validate()?;
        if num_styles == 0 {
            return Err(Error::config("memory needs at least one style"));
        }
        let Some((first, _)) = codes.first() else {
            return Err(Error::config("memory init needs at least one code"));
        };
        let dim = first.dim();
        let mut centers: [Vec<Vec<f64>>; NUM_SCALES] =
            std::array::from_fn(|_| vec![vec![0.0; dim]; num_styles]);
        let mut counts = vec![0usize; num_styles];
        for (code, style) in codes {
            if *style >= num_styles {
                return Err(Error::config(format!("style index {style} out of range")));
            }
            if code.dim() != dim {
                return Err(Error::config("mixed style code dimensions"));
            }
            counts[*style] += 1;
            for scale in 0..NUM_SCALES {
                for (acc, v) in centers[scale][*style].iter_mut().zip(&code.z[scale]) {
                    *acc += *v as f64;
                }
            }
        }
        for (s, n) in counts.iter().enumerate() {
            if *n == 0 {
                return Err(Error::integrity(format!("style {s} has no glyphs to average")));
            }
            for scale in 0..NUM_SCALES {
                for v in centers[scale][s].iter_mut() {
                    *v /= *n as f64;
                }
                normalize_in_place(&mut centers[scale][s])?;
            }
        }
        Ok(StyleMemory { centers, num_styles, dim, config })
    }

    pub fn num_styles(&self) -> usize {
        self.num_styles
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, scale: usize, style: usize) -> &[f64] {
        &self.centers[scale][style]
    }

    /// c <- normalize(m * c + (1 - m) * q), per scale; other rows untouched.
    pub fn momentum_update(&mut self, query: &StyleCode, style: usize) -> Result<()> {
        if style >= self.num_styles {
            return Err(Error::config(format!("style index {style} out of range")));
        }
        if query.dim() != self.dim {
            return Err(Error::config("query dimension does not match memory"));
        }
        let m = self.config.momentum;
        for scale in 0..NUM_SCALES {
            let c = &mut self.centers[scale][style];
            for (cv, qv) in c.iter_mut().zip(&query.z[scale]) {
                *cv = m * *cv + (1.0 - m) * (*qv as f64);
            }
            normalize_in_place(c)?;
        }
        Ok(())
    }

    /// InfoNCE against this memory: for each scale, the positive is the
    /// center of `positive_style` and every other style's center is a
    /// negative; the denominator includes the positive. Returns the summed
    /// loss and its gradient with respect to the query (centers are
    /// constants). All arithmetic is f64.
    pub fn ccs_loss(
        &self,
        query: &StyleCode,
        positive_style: usize,
    ) -> Result<(f64, [Vec<f64>; NUM_SCALES])> {
        if positive_style >= self.num_styles {
            return Err(Error::config(format!("style index {positive_style} out of range")));
        }
        if query.dim() != self.dim {
            return Err(Error::config("query dimension does not match memory"));
        }
        let tau = self.config.tau;
        let mut total = 0.0f64;
        let mut grads: [Vec<f64>; NUM_SCALES] = std::array::from_fn(|_| vec![0.0; self.dim]);
        for scale in 0..NUM_SCALES {
            let q = &query.z[scale];
            let logits: Vec<f64> = (0..self.num_styles)
                .map(|s| {
                    self.centers[scale][s]
                        .iter()
                        .zip(q)
                        .map(|(c, qv)| c * (*qv as f64))
                        .sum::<f64>()
                        / tau
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - logits[positive_style];
            for (s, l) in logits.iter().enumerate() {
                let p = (l - max).exp() / sum_exp;
                let coeff = (p - if s == positive_style { 1.0 } else { 0.0 }) / tau;
                for (g, c) in grads[scale].iter_mut().zip(&self.centers[scale][s]) {
                    *g += coeff * c;
                }
            }
        }
        Ok((total, grads))
    }

    /// Centers of one scale as an (S, K) tensor at the requested dtype, for
    /// the graph loss route. The tensor is a constant snapshot.
    pub fn centers_tensor(&self, scale: usize, dtype: DType) -> Result<Tensor> {
        let flat: Vec<f64> = self.centers[scale].iter().flatten().copied().collect();
        let t = Tensor::from_vec(flat, (self.num_styles, self.dim), &Device::Cpu)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn tensors(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for scale in 0..NUM_SCALES {
            out.push((
                format!("{prefix}/centers{scale}"),
                self.centers_tensor(scale, DType::F64)?,
            ));
        }
        Ok(out)
    }

    pub fn restore(&mut self, prefix: &str, map: &BTreeMap<String, Tensor>) -> Result<()> {
        for scale in 0..NUM_SCALES {
            let key = format!("{prefix}/centers{scale}");
            let t = map
                .get(&key)
                .ok_or_else(|| Error::integrity(format!("checkpoint is missing {key}")))?;
            if t.dims() != [self.num_styles, self.dim] {
                return Err(Error::integrity(format!(
                    "checkpoint {key} has shape {:?}, memory expects {:?}",
                    t.dims(),
                    [self.num_styles, self.dim]
                )));
            }
            self.centers[scale] = t.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        }
        Ok(())
    }
}

/// Graph-route loss: mean over the batch of the summed per-scale InfoNCE.
/// `queries` are (B, K) unit-norm code matrices, `positives` a (B,) u32
/// tensor of dense style indices, `centers` constant (S, K) snapshots.
/// Matches `StyleMemory::ccs_loss` averaged over the batch.
pub fn ccs_loss_graph(
    queries: &[Tensor; NUM_SCALES],
    positives: &Tensor,
    centers: &[Tensor; NUM_SCALES],
    tau: f64,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for scale in 0..NUM_SCALES {
        let logits = (queries[scale].matmul(&centers[scale].t()?)? / tau)?;
        let nll = candle_nn::loss::cross_entropy(&logits, positives)?;
        total = Some(match total {
            Some(t) => (t + nll)?,
            None => nll,
        });
    }
    Ok(total.expect("three scales"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use rand::Rng;

    fn unit(v: Vec<f32>) -> Vec<f32> {
        let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        v.into_iter().map(|x| (x as f64 / n) as f32).collect()
    }

    fn code3(v: Vec<f32>) -> StyleCode {
        let u = unit(v);
        StyleCode::new([u.clone(), u.clone(), u]).unwrap()
    }

    fn random_code(rng: &mut impl Rng, dim: usize) -> StyleCode {
        let z = std::array::from_fn(|_| {
            unit((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        });
        StyleCode::new(z).unwrap()
    }

    #[test]
    fn single_glyph_center_is_its_code() {
        let c = code3(vec![0.3, -0.8, 0.52]);
        let mem = StyleMemory::from_codes(&[(c.clone(), 0)], 1, MemoryConfig::default()).unwrap();
        for scale in 0..NUM_SCALES {
            for (a, b) in mem.center(scale, 0).iter().zip(&c.z[scale]) {
                assert!((a - *b as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn two_orthogonal_codes_average_to_diagonal() {
        let a = code3(vec![1.0, 0.0]);
        let b = code3(vec![0.0, 1.0]);
        let mem =
            StyleMemory::from_codes(&[(a, 0), (b, 0)], 1, MemoryConfig::default()).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        for scale in 0..NUM_SCALES {
            let c = mem.center(scale, 0);
            assert!((c[0] - s).abs() < 1e-9 && (c[1] - s).abs() < 1e-9, "center {c:?}");
        }
    }

    #[test]
    fn init_requires_every_style_covered() {
        let a = code3(vec![1.0, 0.0]);
        let err = StyleMemory::from_codes(&[(a, 0)], 2, MemoryConfig::default()).unwrap_err();
        assert_eq!(err.category(), crate::ErrorCategory::Integrity);
        assert!(err.to_string().contains("style 1"));
    }

    #[test]
    fn centers_stay_unit_norm_through_updates() {
        let mut rng = crate::rng::substream(1, crate::rng::TAG_CLUSTER, 0);
        let codes: Vec<(StyleCode, usize)> =
            (0..12).map(|i| (random_code(&mut rng, 6), i % 4)).collect();
        let mut mem = StyleMemory::from_codes(&codes, 4, MemoryConfig::default()).unwrap();
        for i in 0..40 {
            mem.momentum_update(&random_code(&mut rng, 6), i % 4).unwrap();
        }
        for scale in 0..NUM_SCALES {
            for s in 0..4 {
                let n = mem.center(scale, s).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12, "scale {scale} style {s} norm {n}");
            }
        }
    }

    #[test]
    fn momentum_endpoints_and_hand_value() {
        let c0 = code3(vec![1.0, 0.0]);
        let q = code3(vec![0.0, 1.0]);

        // m = 1: fixed point.
        let mut mem = StyleMemory::from_codes(
            &[(c0.clone(), 0)],
            1,
            MemoryConfig { momentum: 1.0, tau: 0.05 },
        )
        .unwrap();
        mem.momentum_update(&q, 0).unwrap();
        assert!((mem.center(0, 0)[0] - 1.0).abs() < 1e-12);

        // m = 0: full replacement by the (already unit) query.
        let mut mem = StyleMemory::from_codes(
            &[(c0.clone(), 0)],
            1,
            MemoryConfig { momentum: 0.0, tau: 0.05 },
        )
        .unwrap();
        mem.momentum_update(&q, 0).unwrap();
        assert!((mem.center(0, 0)[1] - 1.0).abs() < 1e-12);

        // m = 0.1: pre-norm (0.1, 0.9), normalized (0.11043, 0.99388).
        let mut mem =
            StyleMemory::from_codes(&[(c0, 0)], 1, MemoryConfig::default()).unwrap();
        mem.momentum_update(&q, 0).unwrap();
        let c = mem.center(0, 0);
        assert!((c[0] - 0.110432).abs() < 1e-5, "got {c:?}");
        assert!((c[1] - 0.993884).abs() < 1e-5, "got {c:?}");
    }

    #[test]
    fn uniform_similarities_give_three_ln_s() {
        // All centers identical: every style has the same similarity to any
        // query, so the softmax is uniform and each scale contributes ln S.
        for s in 2..=16usize {
            let base = code3(vec![0.6, 0.8]);
            let codes: Vec<(StyleCode, usize)> =
                (0..s).map(|i| (base.clone(), i)).collect();
            let mem = StyleMemory::from_codes(&codes, s, MemoryConfig::default()).unwrap();
            let q = code3(vec![-0.8, 0.6]);
            let (loss, _) = mem.ccs_loss(&q, s / 2).unwrap();
            let expect = 3.0 * (s as f64).ln();
            assert!((loss - expect).abs() < 1e-12, "S={s}: {loss} vs {expect}");
        }
    }

    #[test]
    fn orthogonal_positive_margin_oracle() {
        // K=2, S=2, tau=0.05, q = c+ = (1,0), c- = (0,1):
        // per-scale loss = ln(1 + e^{-20}), total three times that.
        let pos = code3(vec![1.0, 0.0]);
        let neg = code3(vec![0.0, 1.0]);
        let mem = StyleMemory::from_codes(
            &[(pos.clone(), 0), (neg, 1)],
            2,
            MemoryConfig::default(),
        )
        .unwrap();
        let (loss, _) = mem.ccs_loss(&pos, 0).unwrap();
        let per_scale = (-20.0f64).exp().ln_1p();
        assert!((loss / 3.0 - per_scale).abs() < 1e-12, "per-scale {} vs {per_scale}", loss / 3.0);
        assert!((loss - 3.0 * per_scale).abs() < 1e-12);
        assert!((per_scale - 2.0611536e-9).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_and_monotone_in_positive_similarity() {
        let neg = code3(vec![0.0, 1.0]);
        let mut prev = f64::INFINITY;
        for step in 0..10 {
            // Rotate the query toward the positive center (1,0).
            let angle = 1.2 - step as f64 * 0.12;
            let q = code3(vec![angle.cos() as f32, angle.sin() as f32]);
            let pos = code3(vec![1.0, 0.0]);
            let mem = StyleMemory::from_codes(
                &[(pos, 0), (neg.clone(), 1)],
                2,
                MemoryConfig::default(),
            )
            .unwrap();
            let (loss, _) = mem.ccs_loss(&q, 0).unwrap();
            assert!(loss >= 0.0);
            assert!(loss < prev, "loss must fall as q approaches c+: {loss} !< {prev}");
            prev = loss;
        }
    }

    #[test]
    fn permuting_negative_rows_leaves_loss_unchanged() {
        let mut rng = crate::rng::substream(2, crate::rng::TAG_CLUSTER, 1);
        let codes: Vec<StyleCode> = (0..5).map(|_| random_code(&mut rng, 8)).collect();
        let q = random_code(&mut rng, 8);
        let forward: Vec<(StyleCode, usize)> =
            codes.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
        let mem = StyleMemory::from_codes(&forward, 5, MemoryConfig::default()).unwrap();
        let (loss_a, _) = mem.ccs_loss(&q, 2).unwrap();

        // Swap negative styles 0 and 4; the positive keeps its row.
        let perm = [4usize, 1, 2, 3, 0];
        let permuted: Vec<(StyleCode, usize)> =
            codes.iter().cloned().enumerate().map(|(i, c)| (c, perm[i])).collect();
        let mem2 = StyleMemory::from_codes(&permuted, 5, MemoryConfig::default()).unwrap();
        let (loss_b, _) = mem2.ccs_loss(&q, 2).unwrap();
        assert!((loss_a - loss_b).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_finite_difference() {
        let mut rng = crate::rng::substream(3, crate::rng::TAG_CLUSTER, 2);
        let codes: Vec<(StyleCode, usize)> =
            (0..6).map(|i| (random_code(&mut rng, 7), i % 3)).collect();
        let mem = StyleMemory::from_codes(&codes, 3, MemoryConfig::default()).unwrap();
        let q = random_code(&mut rng, 7);
        let (_, grads) = mem.ccs_loss(&q, 1).unwrap();
        let eps = 1e-6;
        for scale in 0..NUM_SCALES {
            for coord in [0usize, 3, 6] {
                let mut hi = q.clone();
                hi.z[scale][coord] += eps as f32;
                // f32 storage cannot hold a 1e-6 bump exactly; recompute the
                // actual applied step from the stored values.
                let applied = (hi.z[scale][coord] - q.z[scale][coord]) as f64;
                let mut lo = q.clone();
                lo.z[scale][coord] = (q.z[scale][coord] as f64 - applied) as f32;
                let (lh, _) = mem.ccs_loss(&hi, 1).unwrap();
                let (ll, _) = mem.ccs_loss(&lo, 1).unwrap();
                let numeric = (lh - ll) / (2.0 * applied);
                let analytic = grads[scale][coord];
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    ((analytic - numeric) / denom).abs() < 1e-4,
                    "scale {scale} coord {coord}: {analytic} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn unknown_style_is_a_config_error() {
        let c = code3(vec![1.0, 0.0]);
        let mut mem =
            StyleMemory::from_codes(&[(c.clone(), 0)], 1, MemoryConfig::default()).unwrap();
        assert!(mem.ccs_loss(&c, 5).is_err());
        assert!(mem.momentum_update(&c, 5).is_err());
    }

    #[test]
    fn graph_route_agrees_with_scalar_route() {
        let mut rng = crate::rng::substream(4, crate::rng::TAG_CLUSTER, 3);
        let dim = 9;
        let num_styles = 5;
        let codes: Vec<(StyleCode, usize)> =
            (0..10).map(|i| (random_code(&mut rng, dim), i % num_styles)).collect();
        let mem = StyleMemory::from_codes(&codes, num_styles, MemoryConfig::default()).unwrap();

        let batch: Vec<StyleCode> = (0..4).map(|_| random_code(&mut rng, dim)).collect();
        let positives: Vec<usize> = vec![0, 3, 1, 4];

        // Scalar route: mean of per-sample losses; collect grads.
        let mut scalar_loss = 0.0;
        let mut scalar_grads = vec![[vec![0.0f64; dim], vec![0.0; dim], vec![0.0; dim]]; 4];
        for (b, (q, p)) in batch.iter().zip(&positives).enumerate() {
            let (l, g) = mem.ccs_loss(q, *p).unwrap();
            scalar_loss += l / 4.0;
            scalar_grads[b] = g;
        }

        // Graph route on the same data.
        let queries: [Tensor; NUM_SCALES] = std::array::from_fn(|scale| {
            let flat: Vec<f32> = batch.iter().flat_map(|c| c.z[scale].clone()).collect();
            Tensor::from_vec(flat, (4, dim), &Device::Cpu).unwrap()
        });
        let qvars: Vec<Var> = queries.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
        let qts: [Tensor; NUM_SCALES] =
            std::array::from_fn(|i| qvars[i].as_tensor().clone());
        let centers: [Tensor; NUM_SCALES] =
            std::array::from_fn(|i| mem.centers_tensor(i, DType::F32).unwrap());
        let pos = Tensor::from_vec(
            positives.iter().map(|p| *p as u32).collect::<Vec<_>>(),
            (4,),
            &Device::Cpu,
        )
        .unwrap();
        let loss_t = ccs_loss_graph(&qts, &pos, &centers, 0.05).unwrap();
        let graph_loss = loss_t.to_scalar::<f32>().unwrap() as f64;
        assert!(
            (graph_loss - scalar_loss).abs() < 1e-5,
            "graph {graph_loss} vs scalar {scalar_loss}"
        );

        // Gradients: graph grad of the mean = scalar per-sample grad / B.
        let grads = loss_t.backward().unwrap();
        for scale in 0..NUM_SCALES {
            let g = grads
                .get(qvars[scale].as_tensor())
                .expect("query gradient missing")
                .to_vec2::<f32>()
                .unwrap();
            for b in 0..4 {
                for d in 0..dim {
                    let expect = scalar_grads[b][scale][d] / 4.0;
                    assert!(
                        (g[b][d] as f64 - expect).abs() < 1e-5,
                        "grad mismatch at b{b} scale{scale} d{d}: {} vs {expect}",
                        g[b][d]
                    );
                }
            }
        }
    }

    #[test]
    fn memory_serialization_round_trips_exactly() {
        let mut rng = crate::rng::substream(5, crate::rng::TAG_CLUSTER, 4);
        let codes: Vec<(StyleCode, usize)> =
            (0..6).map(|i| (random_code(&mut rng, 5), i % 2)).collect();
        let mut mem = StyleMemory::from_codes(&codes, 2, MemoryConfig::default()).unwrap();
        mem.momentum_update(&random_code(&mut rng, 5), 1).unwrap();
        let saved: BTreeMap<String, Tensor> = mem.tensors("mem").unwrap().into_iter().collect();
        let mut restored =
            StyleMemory::from_codes(&codes, 2, MemoryConfig::default()).unwrap();
        restored.restore("mem", &saved).unwrap();
        for scale in 0..NUM_SCALES {
            for s in 0..2 {
                assert_eq!(mem.center(scale, s), restored.center(scale, s));
            }
        }
    }
}
