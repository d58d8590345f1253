//! Spatio-temporal complexity-aware rank allocation and dual-branch
//! refinement: complexity measurement over calibration inputs, percentile
//! thresholds, the per-layer rank counter, SVD initialization of the FP
//! branch, and joint training of L1/L2 against FP outputs.

use crate::autodiff::Tape;
use crate::backbone::QuantModel;
use crate::calib::CalibSet;
use crate::error::{Error, Result};
use crate::linalg::percentile;
use crate::qlayer::{ForwardMode, QLayer};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Complexity of one calibration sample's input at one layer.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ComplexityRecord {
    pub layer_id: usize,
    pub sample_id: usize,
    pub c_t: f64,
    pub c_s: f64,
}

/// Rank-allocation policy constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RankPolicy {
    pub r_min: usize,
    pub r_max: usize,
    pub r_init: usize,
    pub lower_pct: f64,
    pub upper_pct: f64,
    pub multiple: usize,
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy {
            r_min: 16,
            r_max: 64,
            r_init: 16,
            lower_pct: 25.0,
            upper_pct: 75.0,
            multiple: 8,
        }
    }
}

/// Refinement training configuration. One learning rate per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineConfig {
    pub epochs: usize,
    pub lr_schedule: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Keep the weight quantizer fixed after SVD init instead of refreshing
    /// it whenever L1/L2 move (ablation flag).
    pub freeze_wq: bool,
    /// Train against per-layer FP outputs instead of the model output
    /// (ablation flag).
    pub per_layer_loss: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            epochs: 2,
            lr_schedule: vec![1e-3, 2e-4],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            freeze_wq: false,
            per_layer_loss: false,
        }
    }
}

/// Mean inter-frame difference energy: (1/(T-1)) Σ_t ‖X_{t+1}-X_t‖²_F / CHW.
pub fn temporal_complexity(x: &Tensor) -> Result<f64> {
    let (t, c, h, w) = x.dims4()?;
    if t < 2 {
        return Err(Error::arg("temporal complexity needs at least 2 frames"));
    }
    let frame = c * h * w;
    let mut acc = 0.0;
    for ti in 0..t - 1 {
        let mut e = 0.0;
        for i in 0..frame {
            let d = x.data()[(ti + 1) * frame + i] - x.data()[ti * frame + i];
            e += d * d;
        }
        acc += e / frame as f64;
    }
    Ok(acc / (t - 1) as f64)
}

/// Mean spatial population standard deviation: (1/(TC)) Σ_t Σ_c std(X_{t,c}).
pub fn spatial_complexity(x: &Tensor) -> Result<f64> {
    let (t, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut acc = 0.0;
    for ti in 0..t {
        for ci in 0..c {
            let base = (ti * c + ci) * hw;
            let plane = &x.data()[base..base + hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            acc += var.sqrt();
        }
    }
    Ok(acc / (t * c) as f64)
}

/// Percentile thresholds of one layer's complexity distribution.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Thresholds {
    pub l_t: f64,
    pub u_t: f64,
    pub l_s: f64,
    pub u_s: f64,
}

/// Record each quantized layer's input complexity for every calibration
/// sample, running the model without quantization.
pub fn measure_complexity(
    model: &QuantModel,
    calib: &CalibSet,
) -> Result<HashMap<usize, Vec<ComplexityRecord>>> {
    if calib.pairs.is_empty() {
        return Err(Error::arg("empty calibration set"));
    }
    let mut records: HashMap<usize, Vec<ComplexityRecord>> = HashMap::new();
    for (sample_id, pair) in calib.pairs.iter().enumerate() {
        let (_, inputs, _) = model.forward_collect(&pair.input, ForwardMode::FpExact)?;
        for layer_id in model.quant_layers() {
            let x = &inputs[layer_id];
            records.entry(layer_id).or_default().push(ComplexityRecord {
                layer_id,
                sample_id,
                c_t: temporal_complexity(x)?,
                c_s: spatial_complexity(x)?,
            });
        }
    }
    Ok(records)
}

/// Nearest-rank percentile thresholds of one layer's records.
pub fn compute_thresholds(records: &[ComplexityRecord], policy: &RankPolicy) -> Result<Thresholds> {
    if records.len() < 4 {
        return Err(Error::arg(format!(
            "threshold computation needs at least 4 records, got {}",
            records.len()
        )));
    }
    let ct: Vec<f64> = records.iter().map(|r| r.c_t).collect();
    let cs: Vec<f64> = records.iter().map(|r| r.c_s).collect();
    Ok(Thresholds {
        l_t: percentile(&ct, policy.lower_pct)?,
        u_t: percentile(&ct, policy.upper_pct)?,
        l_s: percentile(&cs, policy.lower_pct)?,
        u_s: percentile(&cs, policy.upper_pct)?,
    })
}

/// Rank counter: +1 per record above both upper thresholds, -1 per record
/// below both lower thresholds, clamped once at the end, then rounded to the
/// nearest multiple (ties up).
pub fn allocate_rank(
    records: &[ComplexityRecord],
    th: &Thresholds,
    policy: &RankPolicy,
) -> usize {
    let mut counter = policy.r_init as i64;
    for r in records {
        if r.c_t > th.u_t && r.c_s > th.u_s {
            counter += 1;
        } else if r.c_t < th.l_t && r.c_s < th.l_s {
            counter -= 1;
        }
    }
    let clamped = counter.clamp(policy.r_min as i64, policy.r_max as i64) as usize;
    let m = policy.multiple;
    (clamped + m / 2) / m * m
}

/// Install SVD-initialized factors and fit the residual weight quantizer.
pub fn svd_init(layer: &mut QLayer, r: usize, bits_w: u8) -> Result<()> {
    layer.set_rank_svd(r)?;
    layer.calibrate_weight_quantizer(bits_w)
}

#[derive(Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize, cfg: &RefineConfig) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    fn step(&mut self, params: &mut Tensor, grad: &Tensor, lr: f64) {
        if lr == 0.0 {
            return;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grad.data().iter().enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params.data_mut()[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Largest usable FP-branch rank for a layer: half the smaller flattened
/// weight extent. An uncapped rank equal to min(m, n) would make the
/// low-rank branch reconstruct W exactly and erase the quantized branch
/// entirely, so allocated ranks are clamped here when applied.
pub fn applied_rank(allocated: usize, m: usize, n: usize) -> usize {
    allocated.min(m.min(n) / 2)
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

struct LayerSnapshot {
    l1: Option<Tensor>,
    l2: Option<Tensor>,
    wq: Option<crate::quant::QuantParams>,
}

/// Stage 2: jointly train every quantized layer's L1 and L2 against the
/// stored FP outputs with per-sample Adam steps, everything else frozen.
///
/// After each epoch the calibration-mean loss is re-evaluated; an epoch that
/// ends worse than it started is rolled back (parameters, quantizers, and
/// optimizer state), so the returned loss curve is non-increasing. Returns
/// [initial mean loss, mean loss after epoch 1, ..., after the last epoch].
pub fn refine(model: &mut QuantModel, calib: &CalibSet, cfg: &RefineConfig) -> Result<Vec<f64>> {
    if calib.pairs.is_empty() {
        return Err(Error::arg("refinement needs a non-empty calibration set"));
    }
    if cfg.lr_schedule.len() != cfg.epochs {
        return Err(Error::config(format!(
            "lr schedule has {} entries for {} epochs",
            cfg.lr_schedule.len(),
            cfg.epochs
        )));
    }
    let trainable: Vec<usize> = model
        .quant_layers()
        .into_iter()
        .filter(|&i| model.quant_ref(i).map(|l| l.rank > 0).unwrap_or(false))
        .collect();
    let mut opt: HashMap<usize, (Adam, Adam)> = trainable
        .iter()
        .map(|&i| {
            let l = model.quant_ref(i).unwrap();
            (
                i,
                (
                    Adam::new(l.l1.as_ref().unwrap().len(), cfg),
                    Adam::new(l.l2.as_ref().unwrap().len(), cfg),
                ),
            )
        })
        .collect();

    let mut losses = vec![mean_calib_loss(model, calib)?];
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_schedule[epoch];
        // snapshot for epoch-level backtracking
        let snap: HashMap<usize, LayerSnapshot> = trainable
            .iter()
            .map(|&i| {
                let l = model.quant_ref(i).unwrap();
                (
                    i,
                    LayerSnapshot {
                        l1: l.l1.clone(),
                        l2: l.l2.clone(),
                        wq: l.wq.clone(),
                    },
                )
            })
            .collect();
        let opt_snap: HashMap<usize, (Adam, Adam)> = opt
            .iter()
            .map(|(&i, (a, b))| (i, (a.clone(), b.clone())))
            .collect();

        for pair in &calib.pairs {
            let tape = Tape::new();
            let mut params = HashMap::new();
            for &i in &trainable {
                let l = model.quant_ref(i)?;
                let l1 = tape.leaf(l.l1.clone().unwrap());
                let l2 = tape.leaf(l.l2.clone().unwrap());
                let ab = tape.constant(l.a_bias.clone());
                params.insert(i, (Some(l1), Some(l2), ab));
            }
            let loss = if cfg.per_layer_loss {
                per_layer_loss(model, &tape, pair, &params)?
            } else {
                let y = model.forward_tape(&tape, &pair.input, &params, true)?;
                y.mse_against(&pair.fp_output)?
            };
            loss.backward()?;
            for &i in &trainable {
                let (l1v, l2v, _) = &params[&i];
                let (g1, g2) = (
                    l1v.as_ref().and_then(|v| v.grad()),
                    l2v.as_ref().and_then(|v| v.grad()),
                );
                let (o1, o2) = opt.get_mut(&i).unwrap();
                let layer = model.quant_mut(i)?;
                if let Some(g) = g1 {
                    o1.step(layer.l1.as_mut().unwrap(), &g, lr);
                }
                if let Some(g) = g2 {
                    o2.step(layer.l2.as_mut().unwrap(), &g, lr);
                }
                if !cfg.freeze_wq && lr != 0.0 {
                    let bits = layer.wq.as_ref().map(|q| q.bits).ok_or_else(|| {
                        Error::state("refine requires calibrated weight quantizers")
                    })?;
                    layer.calibrate_weight_quantizer(bits)?;
                }
            }
        }

        let end_loss = mean_calib_loss(model, calib)?;
        let start_loss = *losses.last().unwrap();
        if end_loss > start_loss {
            // epoch made things worse at this lr: roll back
            for &i in &trainable {
                let s = &snap[&i];
                let layer = model.quant_mut(i)?;
                layer.l1 = s.l1.clone();
                layer.l2 = s.l2.clone();
                layer.wq = s.wq.clone();
            }
            opt = opt_snap;
            losses.push(start_loss);
        } else {
            losses.push(end_loss);
        }
    }
    Ok(losses)
}

/// Ablation loss: sum over quantized layers of the MSE between the layer's
/// fake-quant output and its FP output on the same (FP) input.
fn per_layer_loss(
    model: &QuantModel,
    tape: &Tape,
    pair: &crate::calib::CalibPair,
    params: &HashMap<
        usize,
        (
            Option<crate::autodiff::Var>,
            Option<crate::autodiff::Var>,
            crate::autodiff::Var,
        ),
    >,
) -> Result<crate::autodiff::Var> {
    let (_, inputs, _) = model.forward_collect(&pair.input, ForwardMode::FpExact)?;
    let mut total: Option<crate::autodiff::Var> = None;
    for (&i, (l1, l2, ab)) in params {
        let layer = model.quant_ref(i)?;
        let target = layer.forward(&inputs[i], ForwardMode::FpExact)?;
        let xv = tape.constant(inputs[i].clone());
        let y = layer.forward_tape(&xv, l1.as_ref(), l2.as_ref(), ab, true)?;
        let l = y.mse_against(&target)?;
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::arg("no trainable layers"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{substitute, QuantConfig, ToyBackbone};
    use crate::calib::{capture_calib, CalibSchedule};
    use crate::rng::RngState;

    fn rec(c_t: f64, c_s: f64) -> ComplexityRecord {
        ComplexityRecord {
            layer_id: 0,
            sample_id: 0,
            c_t,
            c_s,
        }
    }

    #[test]
    fn temporal_complexity_hand_cases() {
        let constant = Tensor::full(vec![3, 2, 4, 4], 2.5);
        assert_eq!(temporal_complexity(&constant).unwrap(), 0.0);

        // frame1 all zeros, frame2 all ones -> energy CHW, normalized -> 1.0
        let mut data = vec![0.0; 2 * 2 * 3 * 3];
        for v in data.iter_mut().skip(2 * 3 * 3) {
            *v = 1.0;
        }
        let x = Tensor::new(vec![2, 2, 3, 3], data).unwrap();
        assert!((temporal_complexity(&x).unwrap() - 1.0).abs() < 1e-15);

        let single = Tensor::zeros(vec![1, 2, 3, 3]);
        assert!(matches!(
            temporal_complexity(&single),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn temporal_complexity_matches_loop_oracle() {
        let mut rng = RngState::new(100);
        let x = Tensor::random_uniform(vec![5, 4, 8, 8], -2.0, 2.0, &mut rng);
        let (t, c, h, w) = x.dims4().unwrap();
        let mut acc = 0.0;
        for ti in 0..t - 1 {
            let mut e = 0.0;
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let i0 = ((ti * c + ci) * h + y) * w + xx;
                        let i1 = (((ti + 1) * c + ci) * h + y) * w + xx;
                        let d = x.data()[i1] - x.data()[i0];
                        e += d * d;
                    }
                }
            }
            acc += e / (c * h * w) as f64;
        }
        let want = acc / (t - 1) as f64;
        assert!((temporal_complexity(&x).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn spatial_complexity_hand_cases() {
        let constant = Tensor::full(vec![3, 2, 4, 4], -1.0);
        assert_eq!(spatial_complexity(&constant).unwrap(), 0.0);

        // single frame/channel with values {0,0,1,1}: population std = 0.5
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((spatial_complexity(&x).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn spatial_complexity_matches_loop_oracle() {
        let mut rng = RngState::new(101);
        let x = Tensor::random_uniform(vec![5, 4, 8, 8], -2.0, 2.0, &mut rng);
        let (t, c, h, w) = x.dims4().unwrap();
        let mut acc = 0.0;
        for ti in 0..t {
            for ci in 0..c {
                let mut sum = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        sum += x.data()[((ti * c + ci) * h + y) * w + xx];
                    }
                }
                let mean = sum / (h * w) as f64;
                let mut var = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        let d = x.data()[((ti * c + ci) * h + y) * w + xx] - mean;
                        var += d * d;
                    }
                }
                acc += (var / (h * w) as f64).sqrt();
            }
        }
        let want = acc / (t * c) as f64;
        assert!((spatial_complexity(&x).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn complexities_are_scale_covariant() {
        let mut rng = RngState::new(102);
        let x = Tensor::random_uniform(vec![4, 3, 6, 6], -1.0, 1.0, &mut rng);
        let a = 3.5;
        let xs = x.scale(a);
        let ct = temporal_complexity(&x).unwrap();
        let cs = spatial_complexity(&x).unwrap();
        assert!((temporal_complexity(&xs).unwrap() - a * a * ct).abs() < 1e-12);
        assert!((spatial_complexity(&xs).unwrap() - a * cs).abs() < 1e-12);
    }

    #[test]
    fn thresholds_nearest_rank_hand_case() {
        let records: Vec<_> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&v| rec(v, 10.0 * v))
            .collect();
        let th = compute_thresholds(&records, &RankPolicy::default()).unwrap();
        assert_eq!(th.l_t, 1.0);
        assert_eq!(th.u_t, 3.0);
        assert_eq!(th.l_s, 10.0);
        assert_eq!(th.u_s, 30.0);
    }

    #[test]
    fn thresholds_need_four_records() {
        let records = vec![rec(1.0, 1.0); 3];
        assert!(matches!(
            compute_thresholds(&records, &RankPolicy::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn thresholds_degenerate_band() {
        let records = vec![rec(2.0, 5.0); 6];
        let th = compute_thresholds(&records, &RankPolicy::default()).unwrap();
        assert_eq!(th.l_t, th.u_t);
        assert_eq!(th.l_s, th.u_s);
    }

    #[test]
    fn allocate_rank_rule_arithmetic() {
        let policy = RankPolicy::default();
        let th = Thresholds {
            l_t: 1.0,
            u_t: 3.0,
            l_s: 1.0,
            u_s: 3.0,
        };
        // all neutral -> r_init
        let neutral = vec![rec(2.0, 2.0); 10];
        assert_eq!(allocate_rank(&neutral, &th, &policy), 16);
        // 100 above both uppers -> 116 -> clamp 64
        let hot = vec![rec(4.0, 4.0); 100];
        assert_eq!(allocate_rank(&hot, &th, &policy), 64);
        // net drift +6 -> 22 -> rounds to 24
        let mut six = vec![rec(4.0, 4.0); 6];
        six.extend(vec![rec(2.0, 2.0); 4]);
        assert_eq!(allocate_rank(&six, &th, &policy), 24);
        // net drift +4 -> 20 -> tie rounds up to 24
        let four = vec![rec(4.0, 4.0); 4];
        assert_eq!(allocate_rank(&four, &th, &policy), 24);
        // negative drift clamps at r_min
        let cold = vec![rec(0.5, 0.5); 30];
        assert_eq!(allocate_rank(&cold, &th, &policy), 16);
    }

    #[test]
    fn allocate_rank_is_permutation_invariant_and_in_grid() {
        let policy = RankPolicy::default();
        let th = Thresholds {
            l_t: 1.0,
            u_t: 3.0,
            l_s: 1.0,
            u_s: 3.0,
        };
        let mut rng = RngState::new(103);
        let records: Vec<_> = (0..50)
            .map(|_| rec(rng.uniform(0.0, 5.0), rng.uniform(0.0, 5.0)))
            .collect();
        let r = allocate_rank(&records, &th, &policy);
        assert!([16, 24, 32, 40, 48, 56, 64].contains(&r));
        let mut reversed = records.clone();
        reversed.reverse();
        assert_eq!(allocate_rank(&reversed, &th, &policy), r);
    }

    #[test]
    fn svd_init_zero_residual_and_idempotent() {
        use crate::linalg;
        let mut rng = RngState::new(104);
        let a = Tensor::random_uniform(vec![16, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::random_uniform(vec![4, 16], -1.0, 1.0, &mut rng);
        let w = linalg::matmul(&a, &b).unwrap();
        let mut layer = QLayer::new(
            crate::qlayer::LayerKind::Linear { n_in: 16, n_out: 16 },
            w,
            None,
            7,
        )
        .unwrap();
        svd_init(&mut layer, 4, 4).unwrap();
        assert!(layer.residual().unwrap().max_abs() < 1e-10);
        let l1 = layer.l1.clone().unwrap();
        svd_init(&mut layer, 4, 4).unwrap();
        assert_eq!(layer.l1.unwrap().data(), l1.data());
    }

    fn prepared_model(seed: u64, bits: u8, rank: usize) -> (QuantModel, CalibSet) {
        let bb = ToyBackbone::new(seed);
        let model = substitute(&bb, &QuantConfig::all_kinds(bits, bits, seed)).unwrap();
        let sched = CalibSchedule {
            seed,
            n_videos: 2,
            steps: 4,
            sample_every: 2,
            frames: 3,
            height: 4,
            width: 4,
        };
        let calib = capture_calib(&bb, &sched).unwrap();
        let mut model = model;
        for i in model.quant_layers() {
            svd_init(model.quant_mut(i).unwrap(), rank, bits).unwrap();
        }
        let inputs: Vec<Vec<Tensor>> = calib
            .pairs
            .iter()
            .map(|p| {
                model
                    .forward_collect(&p.input, ForwardMode::FpExact)
                    .unwrap()
                    .1
            })
            .collect();
        for i in model.quant_layers() {
            let xs: Vec<Tensor> = inputs.iter().map(|v| v[i].clone()).collect();
            model
                .quant_mut(i)
                .unwrap()
                .calibrate_activation_quantizer(&xs, bits)
                .unwrap();
        }
        (model, calib)
    }

    #[test]
    fn refine_decreases_loss_at_w4a4() {
        let (mut model, calib) = prepared_model(42, 4, 4);
        let losses = refine(&mut model, &calib, &RefineConfig::default()).unwrap();
        assert_eq!(losses.len(), 3); // initial + one entry per epoch
        for w in losses.windows(2) {
            assert!(w[1] <= w[0], "loss curve increased: {:?}", losses);
        }
    }

    #[test]
    fn refine_with_zero_lr_changes_nothing() {
        let (mut model, calib) = prepared_model(43, 4, 4);
        let before: Vec<Vec<u64>> = model
            .quant_layers()
            .iter()
            .map(|&i| {
                model
                    .quant_ref(i)
                    .unwrap()
                    .l1
                    .as_ref()
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();
        let cfg = RefineConfig {
            epochs: 1,
            lr_schedule: vec![0.0],
            ..RefineConfig::default()
        };
        refine(&mut model, &calib, &cfg).unwrap();
        for (k, &i) in model.quant_layers().iter().enumerate() {
            let after: Vec<u64> = model
                .quant_ref(i)
                .unwrap()
                .l1
                .as_ref()
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(before[k], after);
        }
    }

    #[test]
    fn refine_at_32_bits_is_a_no_op_in_practice() {
        let (mut model, calib) = prepared_model(44, 32, 4);
        let before: Vec<Tensor> = model
            .quant_layers()
            .iter()
            .map(|&i| model.quant_ref(i).unwrap().l1.clone().unwrap())
            .collect();
        let losses = refine(&mut model, &calib, &RefineConfig::default()).unwrap();
        assert!(losses[0] < 1e-20, "32-bit loss should start at 0: {}", losses[0]);
        for (k, &i) in model.quant_layers().iter().enumerate() {
            let after = model.quant_ref(i).unwrap().l1.clone().unwrap();
            let moved = before[k].sub(&after).unwrap().frobenius_norm();
            assert!(moved <= 1e-6, "layer {} moved {}", i, moved);
        }
    }

    #[test]
    fn measure_complexity_covers_all_quant_layers() {
        let (model, calib) = prepared_model(45, 8, 4);
        let records = measure_complexity(&model, &calib).unwrap();
        for i in model.quant_layers() {
            assert_eq!(records[&i].len(), calib.pairs.len());
            for r in &records[&i] {
                assert!(r.c_t >= 0.0 && r.c_s >= 0.0);
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests_helpers {
    use super::*;
    use crate::backbone::{substitute, QuantConfig, QuantModel, ToyBackbone};
    use crate::calib::{capture_calib, CalibSchedule, CalibSet};

    pub fn prep(seed: u64, bits: u8, rank: usize, n_videos: usize) -> (QuantModel, CalibSet) {
        let bb = ToyBackbone::new(seed);
        let mut model = substitute(&bb, &QuantConfig::all_kinds(bits, bits, seed)).unwrap();
        let sched = CalibSchedule { seed, n_videos, steps: 4, sample_every: 2, frames: 3, height: 8, width: 8 };
        let calib = capture_calib(&bb, &sched).unwrap();
        for i in model.quant_layers() {
            let l = model.quant_mut(i).unwrap();
            let (m, n) = l.kind.flat_dims();
            svd_init(l, rank.min(m.min(n)), bits).unwrap();
        }
        let inputs: Vec<Vec<Tensor>> = calib.pairs.iter().map(|p| model.forward_collect(&p.input, ForwardMode::FpExact).unwrap().1).collect();
        for i in model.quant_layers() {
            let xs: Vec<Tensor> = inputs.iter().map(|v| v[i].clone()).collect();
            model.quant_mut(i).unwrap().calibrate_activation_quantizer(&xs, bits).unwrap();
        }
        (model, calib)
    }
}
