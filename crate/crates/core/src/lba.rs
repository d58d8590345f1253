//! Learnable bias alignment (Stage 3): closed-form estimation, gradient
//! training, and fusion of the per-output-channel correction that cancels
//! the mean quantization error
//! E(ŴX̂) − E(WX) = ΔW·E(X̂) + W·E(ΔX).

use crate::autodiff::Tape;
use crate::backbone::{ModelLayer, QuantModel};
use crate::calib::CalibSet;
use crate::error::{Error, Result};
use crate::linalg;
use crate::qlayer::ForwardMode;
use crate::quant::QuantParams;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// LBA training configuration: one epoch at the second-phase learning rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LbaConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for LbaConfig {
    fn default() -> Self {
        LbaConfig {
            epochs: 1,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Both sides of the mean-error decomposition for one weight matrix:
/// lhs = mean(Ŵx̂ − Wx), rhs = ΔW·mean(x̂) + W·mean(Δx), per output channel.
///
/// `w` is `[m×n]`, `x_batch` is `[rows×n]`.
pub fn bias_identity_check(
    w: &Tensor,
    x_batch: &Tensor,
    wq: &QuantParams,
    aq: &QuantParams,
) -> Result<(Tensor, Tensor)> {
    let (rows, n) = x_batch.dims2()?;
    let (m, nw) = w.dims2()?;
    if n != nw {
        return Err(Error::dim(format!(
            "batch width {} != weight width {}",
            n, nw
        )));
    }
    if rows == 0 {
        return Err(Error::arg("empty batch"));
    }
    let w_hat = wq.fake_quant(w);
    let x_hat = aq.fake_quant(x_batch);

    let col_mean = |t: &Tensor| -> Tensor {
        let (r, c) = t.dims2().unwrap();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += t.data()[i * c + j];
            }
        }
        Tensor::new(vec![1, c], out.into_iter().map(|v| v / r as f64).collect()).unwrap()
    };

    let lhs_rows = linalg::matmul_nt(&x_hat, &w_hat)?.sub(&linalg::matmul_nt(x_batch, w)?)?;
    let lhs = col_mean(&lhs_rows).reshape(vec![m])?;

    let dw = w_hat.sub(w)?;
    let mean_x_hat = col_mean(&x_hat);
    let mean_dx = col_mean(&x_hat.sub(x_batch)?);
    let rhs = linalg::matmul_nt(&mean_x_hat, &dw)?
        .add(&linalg::matmul_nt(&mean_dx, w)?)?
        .reshape(vec![m])?;
    Ok((lhs, rhs))
}

/// Per-channel mean over a [t, c, h, w] video.
fn channel_means(video: &Tensor) -> Result<Vec<f64>> {
    let (t, c, h, w) = video.dims4()?;
    let mut out = vec![0.0; c];
    for ti in 0..t {
        for ci in 0..c {
            let base = (ti * c + ci) * h * w;
            out[ci] += video.data()[base..base + h * w].iter().sum::<f64>();
        }
    }
    let norm = (t * h * w) as f64;
    Ok(out.into_iter().map(|v| v / norm).collect())
}

/// Closed-form initialization: sequentially (front to back) set each
/// quantized layer's a_bias to the per-output-channel mean of
/// (FP layer output − quantized layer output) over the calibration set.
/// After assignment the layer's mean residual on the same data is zero.
pub fn estimate_bias_closed_form(model: &mut QuantModel, calib: &CalibSet) -> Result<()> {
    if calib.pairs.is_empty() {
        return Err(Error::arg("bias estimation needs a non-empty calibration set"));
    }
    // FP teacher activations, fixed throughout
    let teachers: Vec<Vec<Tensor>> = calib
        .pairs
        .iter()
        .map(|p| {
            model
                .forward_collect(&p.input, ForwardMode::FpExact)
                .map(|(_, _, outs)| outs)
        })
        .collect::<Result<_>>()?;

    for i in model.quant_layers() {
        let (m, _) = model.quant_ref(i)?.kind.flat_dims();
        let mut acc = vec![0.0; m];
        for (p, pair) in calib.pairs.iter().enumerate() {
            let (_, _, outs) = model.forward_collect(&pair.input, ForwardMode::FakeQuant)?;
            let resid = teachers[p][i].sub(&outs[i])?;
            for (a, v) in acc.iter_mut().zip(channel_means(&resid)?) {
                *a += v;
            }
        }
        let n = calib.pairs.len() as f64;
        let layer = model.quant_mut(i)?;
        let delta = Tensor::new(vec![m], acc.into_iter().map(|v| v / n).collect())?;
        layer.a_bias = layer.a_bias.add(&delta)?;
    }
    Ok(())
}

/// Per-layer per-channel mean residual (FP teacher output − quantized
/// output) on the calibration set; the closed-form check quantity.
pub fn mean_channel_residuals(
    model: &QuantModel,
    calib: &CalibSet,
) -> Result<HashMap<usize, Vec<f64>>> {
    let mut out: HashMap<usize, Vec<f64>> = HashMap::new();
    for pair in &calib.pairs {
        let (_, _, fp_outs) = model.forward_collect(&pair.input, ForwardMode::FpExact)?;
        let (_, _, q_outs) = model.forward_collect(&pair.input, ForwardMode::FakeQuant)?;
        for i in model.quant_layers() {
            let means = channel_means(&fp_outs[i].sub(&q_outs[i])?)?;
            let entry = out.entry(i).or_insert_with(|| vec![0.0; means.len()]);
            for (a, v) in entry.iter_mut().zip(means) {
                *a += v;
            }
        }
    }
    let n = calib.pairs.len() as f64;
    for v in out.values_mut() {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    Ok(out)
}

fn mean_calib_loss(model: &QuantModel, calib: &CalibSet) -> Result<f64> {
    let mut acc = 0.0;
    for pair in &calib.pairs {
        let y = model.forward(&pair.input, ForwardMode::FakeQuant)?;
        let d = y.sub(&pair.fp_output)?;
        acc += d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
    }
    Ok(acc / calib.pairs.len() as f64)
}

/// Stage 3: train every quantized layer's a_bias (only) against the stored
/// FP outputs. Epoch-level backtracking as in refinement: an epoch that ends
/// worse than it started is rolled back. Returns the loss curve
/// [entry, after epoch 1, ...].
pub fn train_lba(model: &mut QuantModel, calib: &CalibSet, cfg: &LbaConfig) -> Result<Vec<f64>> {
    if calib.pairs.is_empty() {
        return Err(Error::arg("LBA training needs a non-empty calibration set"));
    }
    let targets = model.quant_layers();
    let mut adam_m: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut adam_v: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut adam_t: u64 = 0;
    for &i in &targets {
        let m = model.quant_ref(i)?.a_bias.len();
        adam_m.insert(i, vec![0.0; m]);
        adam_v.insert(i, vec![0.0; m]);
    }

    let mut losses = vec![mean_calib_loss(model, calib)?];
    for _epoch in 0..cfg.epochs {
        let snap: HashMap<usize, Tensor> = targets
            .iter()
            .map(|&i| (i, model.quant_ref(i).unwrap().a_bias.clone()))
            .collect();
        let snap_opt = (adam_m.clone(), adam_v.clone(), adam_t);

        for pair in &calib.pairs {
            let tape = Tape::new();
            let mut params = HashMap::new();
            for &i in &targets {
                let l = model.quant_ref(i)?;
                let l1 = l.l1.clone().map(|t| tape.constant(t));
                let l2 = l.l2.clone().map(|t| tape.constant(t));
                let ab = tape.leaf(l.a_bias.clone());
                params.insert(i, (l1, l2, ab));
            }
            let y = model.forward_tape(&tape, &pair.input, &params, true)?;
            let loss = y.mse_against(&pair.fp_output)?;
            loss.backward()?;
            if cfg.lr == 0.0 {
                continue;
            }
            adam_t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(adam_t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(adam_t as i32);
            for &i in &targets {
                let (_, _, abv) = &params[&i];
                let Some(g) = abv.grad() else { continue };
                let m = adam_m.get_mut(&i).unwrap();
                let v = adam_v.get_mut(&i).unwrap();
                let layer = model.quant_mut(i)?;
                for (k, gk) in g.data().iter().enumerate() {
                    m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
                    v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
                    layer.a_bias.data_mut()[k] -=
                        cfg.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
                }
            }
        }

        let end_loss = mean_calib_loss(model, calib)?;
        let start_loss = *losses.last().unwrap();
        if end_loss > start_loss {
            for &i in &targets {
                model.quant_mut(i)?.a_bias = snap[&i].clone();
            }
            adam_m = snap_opt.0;
            adam_v = snap_opt.1;
            adam_t = snap_opt.2;
            losses.push(start_loss);
        } else {
            losses.push(end_loss);
        }
    }
    Ok(losses)
}

/// Fold every a_bias into the layer bias (creating one if absent) and clear
/// it. Forward outputs are unchanged: both vectors are added per output
/// channel in the same place.
pub fn fuse(model: &mut QuantModel) -> Result<()> {
    for layer in model.layers.iter_mut() {
        if let ModelLayer::Quant(l) = layer {
            let fused = match &l.bias {
                Some(b) => b.add(&l.a_bias)?,
                None => l.a_bias.clone(),
            };
            l.bias = Some(fused);
            l.a_bias = Tensor::zeros(vec![l.a_bias.len()]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{Granularity, Scheme};
    use crate::rng::RngState;
    use crate::stca::tests_helpers::prep;

    fn seeded(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = RngState::new(seed);
        Tensor::random_uniform(shape, -1.0, 1.0, &mut rng)
    }

    fn quantizers(w: &Tensor, x: &Tensor, bits: u8) -> (QuantParams, QuantParams) {
        let wq = QuantParams::calibrate(w, bits, Scheme::Symmetric, Granularity::PerChannel)
            .unwrap();
        let aq = QuantParams::calibrate(x, bits, Scheme::Asymmetric, Granularity::PerTensor)
            .unwrap();
        (wq, aq)
    }

    #[test]
    fn identity_zero_at_32_bits() {
        let w = seeded(vec![8, 8], 200);
        let x = seeded(vec![16, 8], 201);
        let (wq, aq) = quantizers(&w, &x, 32);
        let (lhs, rhs) = bias_identity_check(&w, &x, &wq, &aq).unwrap();
        assert!(lhs.max_abs() < 1e-12);
        assert!(rhs.max_abs() < 1e-12);
    }

    #[test]
    fn identity_holds_at_w4a4() {
        for seed in 0..5 {
            let w = seeded(vec![8, 8], 210 + seed);
            let x = seeded(vec![12, 8], 220 + seed);
            let (wq, aq) = quantizers(&w, &x, 4);
            let (lhs, rhs) = bias_identity_check(&w, &x, &wq, &aq).unwrap();
            assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }
    }

    #[test]
    fn identity_weight_only_reduction() {
        // lossless activation quantizer: lhs collapses to ΔW · mean(x)
        let w = seeded(vec![8, 8], 230);
        let x = seeded(vec![12, 8], 231);
        let (wq, _) = quantizers(&w, &x, 4);
        let (_, aq32) = quantizers(&w, &x, 32);
        let (lhs, rhs) = bias_identity_check(&w, &x, &wq, &aq32).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        let dw = wq.fake_quant(&w).sub(&w).unwrap();
        let mut mean_x = vec![0.0; 8];
        for r in 0..12 {
            for j in 0..8 {
                mean_x[j] += x.data()[r * 8 + j] / 12.0;
            }
        }
        let want = linalg::matmul_nt(
            &Tensor::new(vec![1, 8], mean_x).unwrap(),
            &dw,
        )
        .unwrap()
        .reshape(vec![8])
        .unwrap();
        assert!(lhs.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn closed_form_zeroes_mean_residuals() {
        let (mut model, calib) = prep(300, 4, 8, 4);
        estimate_bias_closed_form(&mut model, &calib).unwrap();
        let residuals = mean_channel_residuals(&model, &calib).unwrap();
        for (layer, res) in residuals {
            for (c, v) in res.iter().enumerate() {
                assert!(
                    v.abs() <= 1e-9,
                    "layer {} channel {} mean residual {}",
                    layer,
                    c,
                    v
                );
            }
        }
    }

    #[test]
    fn closed_form_is_zero_without_quant_error() {
        let (mut model, calib) = prep(301, 32, 8, 2);
        estimate_bias_closed_form(&mut model, &calib).unwrap();
        for i in model.quant_layers() {
            assert!(model.quant_ref(i).unwrap().a_bias.max_abs() < 1e-12);
        }
    }

    #[test]
    fn train_lba_zero_lr_is_identity() {
        let (mut model, calib) = prep(302, 4, 8, 2);
        estimate_bias_closed_form(&mut model, &calib).unwrap();
        let before: Vec<Vec<u64>> = model
            .quant_layers()
            .iter()
            .map(|&i| {
                model.quant_ref(i).unwrap().a_bias.data().iter().map(|v| v.to_bits()).collect()
            })
            .collect();
        let cfg = LbaConfig { lr: 0.0, ..LbaConfig::default() };
        train_lba(&mut model, &calib, &cfg).unwrap();
        for (k, &i) in model.quant_layers().iter().enumerate() {
            let after: Vec<u64> = model
                .quant_ref(i)
                .unwrap()
                .a_bias
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(before[k], after);
        }
    }

    #[test]
    fn train_lba_loss_non_increasing() {
        let (mut model, calib) = prep(303, 4, 8, 4);
        estimate_bias_closed_form(&mut model, &calib).unwrap();
        let losses = train_lba(&mut model, &calib, &LbaConfig::default()).unwrap();
        assert_eq!(losses.len(), 2);
        assert!(losses[1] <= losses[0], "curve: {:?}", losses);
    }

    #[test]
    fn fuse_preserves_outputs_and_creates_bias() {
        let (mut model, calib) = prep(304, 4, 8, 2);
        estimate_bias_closed_form(&mut model, &calib).unwrap();
        let x = &calib.pairs[0].input;
        let before = model.forward(x, ForwardMode::FakeQuant).unwrap();
        // linear layer starts without a bias: fusion must create one
        let linear_idx = 2;
        assert!(model.quant_ref(linear_idx).unwrap().bias.is_none());
        assert!(model.quant_ref(linear_idx).unwrap().a_bias.max_abs() > 0.0);
        fuse(&mut model).unwrap();
        assert!(model.quant_ref(linear_idx).unwrap().bias.is_some());
        for i in model.quant_layers() {
            assert_eq!(model.quant_ref(i).unwrap().a_bias.max_abs(), 0.0);
        }
        let after = model.forward(x, ForwardMode::FakeQuant).unwrap();
        assert!(before.max_abs_diff(&after) <= 1e-12);
    }
}
