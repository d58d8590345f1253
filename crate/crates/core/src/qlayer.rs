//! The composite quantized layer: a full-precision low-rank branch, a
//! Hadamard-rotated low-bit residual branch, and a learnable bias term,
//! for Linear, Conv2d, and Conv3d layers.
//!
//! For any parameters, `X·L1L2 + dequant(Q_A(XH)·Q_W(HᵀR)) + biases` with
//! `R = W − L1L2` reconstructs `X·W + bias` exactly when quantization is
//! bypassed, because the rotation is orthonormal and the branches sum to W.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::linalg::{self, ConvSpec};
use crate::quant::{Granularity, QuantParams, Scheme};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Linear { n_in: usize, n_out: usize },
    Conv2d(ConvSpec),
    Conv3d(ConvSpec),
}

impl LayerKind {
    /// Flattened weight extents (m = output channels, n = contraction width).
    pub fn flat_dims(&self) -> (usize, usize) {
        match self {
            LayerKind::Linear { n_in, n_out } => (*n_out, *n_in),
            LayerKind::Conv2d(s) | LayerKind::Conv3d(s) => (s.c_out, s.k_dim()),
        }
    }

    /// Rotation block size along the contraction axis: the full input width
    /// for linear layers, the per-tap input-channel count for convolutions.
    pub fn rotation_block(&self) -> usize {
        match self {
            LayerKind::Linear { n_in, .. } => *n_in,
            LayerKind::Conv2d(s) | LayerKind::Conv3d(s) => s.c_in,
        }
    }

    pub fn conv_spec(&self) -> Option<&ConvSpec> {
        match self {
            LayerKind::Linear { .. } => None,
            LayerKind::Conv2d(s) | LayerKind::Conv3d(s) => Some(s),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Linear { .. } => "linear",
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::Conv3d(_) => "conv3d",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// No quantization anywhere; must reproduce the reference layer.
    FpExact,
    /// Quantize-dequantize both operands in floating point.
    FakeQuant,
    /// True integer accumulation with post-rescale.
    IntPath,
}

/// Layout bookkeeping for lowering inputs to row matrices and raising the
/// output rows back.
enum Lowered {
    Matrix,
    Video { t: usize, h: usize, w: usize },
}

/// One quantized layer: frozen reference weight, low-rank branch, rotated
/// low-bit residual branch, and the bias-alignment vector.
#[derive(Debug, Clone)]
pub struct QLayer {
    pub kind: LayerKind,
    /// Original weights, natural layout, frozen reference.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub rank: usize,
    /// Low-rank factors; None while rank is 0 (no FP branch).
    pub l1: Option<Tensor>,
    pub l2: Option<Tensor>,
    pub hadamard_seed: u64,
    pub rotate: bool,
    /// Residual weight quantizer (symmetric per-output-channel).
    pub wq: Option<QuantParams>,
    /// Rotated-activation quantizer (asymmetric per-tensor, static).
    pub aq: Option<QuantParams>,
    /// Learnable bias alignment vector, one entry per output channel.
    pub a_bias: Tensor,
}

impl QLayer {
    pub fn new(
        kind: LayerKind,
        weight: Tensor,
        bias: Option<Tensor>,
        hadamard_seed: u64,
    ) -> Result<QLayer> {
        let (m, _) = kind.flat_dims();
        if let Some(b) = &bias {
            if b.len() != m {
                return Err(Error::dim("bias length must equal output channels"));
            }
        }
        Ok(QLayer {
            kind,
            weight,
            bias,
            rank: 0,
            l1: None,
            l2: None,
            hadamard_seed,
            rotate: true,
            wq: None,
            aq: None,
            a_bias: Tensor::zeros(vec![m]),
        })
    }

    /// Flattened `[m×n]` weight matching the im2col column order.
    pub fn weight_flat(&self) -> Result<Tensor> {
        match &self.kind {
            LayerKind::Linear { .. } => Ok(self.weight.clone()),
            LayerKind::Conv2d(s) | LayerKind::Conv3d(s) => {
                linalg::flatten_conv_weight(&self.weight, s)
            }
        }
    }

    /// `R = W − L1·L2`, recomputed from the current factors.
    pub fn residual(&self) -> Result<Tensor> {
        let wflat = self.weight_flat()?;
        match (&self.l1, &self.l2) {
            (Some(l1), Some(l2)) => wflat.sub(&linalg::matmul(l1, l2)?),
            _ => Ok(wflat),
        }
    }

    /// Install SVD-initialized factors for the given rank and refresh the
    /// weight quantizer if one is configured.
    pub fn set_rank_svd(&mut self, r: usize) -> Result<()> {
        let wflat = self.weight_flat()?;
        let (m, n) = wflat.dims2()?;
        if r > m.min(n) {
            return Err(Error::arg(format!(
                "rank {} exceeds min dimension {}",
                r,
                m.min(n)
            )));
        }
        if r == 0 {
            self.rank = 0;
            self.l1 = None;
            self.l2 = None;
        } else {
            let (l1, l2) = linalg::svd_truncated(&wflat, r)?;
            self.rank = r;
            self.l1 = Some(l1);
            self.l2 = Some(l2);
        }
        if let Some(wq) = &self.wq {
            let bits = wq.bits;
            self.calibrate_weight_quantizer(bits)?;
        }
        Ok(())
    }

    /// Rotate a `[rows×n]` matrix along its contraction axis, one signed
    /// Hadamard block per kernel tap.
    pub fn rotate_rows(&self, x: &Tensor) -> Result<Tensor> {
        if !self.rotate {
            return Ok(x.clone());
        }
        let d = self.kind.rotation_block();
        if !d.is_power_of_two() {
            return Err(Error::dim(format!(
                "rotation block {} is not a power of two",
                d
            )));
        }
        let total = x.len();
        let blocks = x.reshape(vec![total / d, d])?;
        let rotated = linalg::fwht(&blocks, self.hadamard_seed)?;
        rotated.reshape(x.shape().to_vec())
    }

    /// Inverse (transpose) rotation; composes with [`Self::rotate_rows`] to
    /// the identity.
    pub fn rotate_rows_inverse(&self, x: &Tensor) -> Result<Tensor> {
        if !self.rotate {
            return Ok(x.clone());
        }
        let d = self.kind.rotation_block();
        let total = x.len();
        let blocks = x.reshape(vec![total / d, d])?;
        let back = linalg::fwht_inverse(&blocks, self.hadamard_seed)?;
        back.reshape(x.shape().to_vec())
    }

    /// Fit the residual quantizer on the rotated residual (symmetric,
    /// per output channel).
    pub fn calibrate_weight_quantizer(&mut self, bits: u8) -> Result<()> {
        let rr = self.rotate_rows(&self.residual()?)?;
        self.wq = Some(QuantParams::calibrate(
            &rr,
            bits,
            Scheme::Symmetric,
            Granularity::PerChannel,
        )?);
        Ok(())
    }

    fn lower(&self, x: &Tensor) -> Result<(Tensor, Lowered)> {
        match &self.kind {
            LayerKind::Linear { n_in, .. } => {
                if x.ndim() == 2 {
                    let (_, n) = x.dims2()?;
                    if n != *n_in {
                        return Err(Error::dim(format!(
                            "linear input width {} != {}",
                            n, n_in
                        )));
                    }
                    Ok((x.clone(), Lowered::Matrix))
                } else {
                    let (t, c, h, w) = x.dims4()?;
                    if c != *n_in {
                        return Err(Error::dim(format!(
                            "linear input channels {} != {}",
                            c, n_in
                        )));
                    }
                    Ok((linalg::video_to_rows(x)?, Lowered::Video { t, h, w }))
                }
            }
            LayerKind::Conv2d(s) | LayerKind::Conv3d(s) => {
                let (t, _, h, w) = x.dims4()?;
                let (ot, oh, ow) = s.out_dims(t, h, w)?;
                Ok((
                    linalg::im2col(x, s)?,
                    Lowered::Video { t: ot, h: oh, w: ow },
                ))
            }
        }
    }

    fn raise(&self, y: &Tensor, lowered: &Lowered) -> Result<Tensor> {
        match lowered {
            Lowered::Matrix => Ok(y.clone()),
            Lowered::Video { t, h, w } => linalg::rows_to_video(y, *t, *h, *w),
        }
    }

    fn add_channel_vectors(&self, y: &mut Tensor, mode: ForwardMode) -> Result<()> {
        let (rows, m) = y.dims2()?;
        for r in 0..rows {
            for o in 0..m {
                let mut v = y.data()[r * m + o];
                if let Some(b) = &self.bias {
                    v += b.data()[o];
                }
                // compensates quantization error; the exact path has none
                if !matches!(mode, ForwardMode::FpExact) {
                    v += self.a_bias.data()[o];
                }
                y.data_mut()[r * m + o] = v;
            }
        }
        Ok(())
    }

    /// Low-bit branch on the *unlowered* operands: rotate, quantize both
    /// sides, multiply, rescale.
    fn quant_branch(&self, x_rows: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let resid = self.residual()?;
        match mode {
            ForwardMode::FpExact => linalg::matmul_nt(x_rows, &resid),
            ForwardMode::FakeQuant => {
                let (wq, aq) = self.require_quantizers()?;
                let xr = self.rotate_rows(x_rows)?;
                let rr = self.rotate_rows(&resid)?;
                linalg::matmul_nt(&aq.fake_quant(&xr), &wq.fake_quant(&rr))
            }
            ForwardMode::IntPath => {
                let (wq, aq) = self.require_quantizers()?;
                let xr = self.rotate_rows(x_rows)?;
                let rr = self.rotate_rows(&resid)?;
                let a_int = aq.quantize(&xr);
                let w_int = wq.quantize(&rr);
                let (rows, k) = xr.dims2()?;
                let (m, _) = rr.dims2()?;
                let s_a = aq.scales[0];
                let z_a = aq.zero_points[0] as i64;
                // per-output-channel integer sums for zero-point correction
                let w_sums: Vec<i64> = (0..m)
                    .map(|o| w_int.data()[o * k..(o + 1) * k].iter().map(|&v| v as i64).sum())
                    .collect();
                let mut out = vec![0.0; rows * m];
                for i in 0..rows {
                    let arow = &a_int.data()[i * k..(i + 1) * k];
                    for o in 0..m {
                        let wrow = &w_int.data()[o * k..(o + 1) * k];
                        let mut acc: i64 = 0;
                        for kk in 0..k {
                            acc += arow[kk] as i64 * wrow[kk] as i64;
                        }
                        let s_w = if wq.scales.len() == 1 {
                            wq.scales[0]
                        } else {
                            wq.scales[o]
                        };
                        out[i * m + o] = s_a * s_w * (acc - z_a * w_sums[o]) as f64;
                    }
                }
                Tensor::new(vec![rows, m], out)
            }
        }
    }

    /// Lowered input rows after rotation: exactly what the activation
    /// quantizer sees at inference time.
    pub fn rotated_input_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (x_rows, _) = self.lower(x)?;
        self.rotate_rows(&x_rows)
    }

    /// Fit the static activation quantizer (asymmetric, per-tensor) over a
    /// set of sample inputs.
    pub fn calibrate_activation_quantizer(&mut self, inputs: &[Tensor], bits: u8) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::arg("activation calibration needs at least one sample"));
        }
        let mut all = Vec::new();
        for x in inputs {
            all.extend_from_slice(self.rotated_input_rows(x)?.data());
        }
        let flat = Tensor::new(vec![all.len()], all)?;
        self.aq = Some(QuantParams::calibrate(
            &flat,
            bits,
            Scheme::Asymmetric,
            Granularity::PerTensor,
        )?);
        Ok(())
    }

    fn require_quantizers(&self) -> Result<(&QuantParams, &QuantParams)> {
        match (&self.wq, &self.aq) {
            (Some(w), Some(a)) => Ok((w, a)),
            _ => Err(Error::state(
                "quantized forward requires calibrated weight and activation quantizers",
            )),
        }
    }

    /// Full composite forward. Accepts `[rows×n]` matrices or `T×C×H×W`
    /// videos (convolutions require videos).
    pub fn forward(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let (x_rows, lowered) = self.lower(x)?;
        let (rows, _) = x_rows.dims2()?;
        let (m, _) = self.kind.flat_dims();
        let mut y = match (&self.l1, &self.l2) {
            (Some(l1), Some(l2)) => {
                let h = linalg::matmul_nt(&x_rows, l2)?;
                linalg::matmul_nt(&h, l1)?
            }
            _ => Tensor::zeros(vec![rows, m]),
        };
        y = y.add(&self.quant_branch(&x_rows, mode)?)?;
        self.add_channel_vectors(&mut y, mode)?;
        self.raise(&y, &lowered)
    }

    /// Tape-recorded fake-quant forward for refinement and LBA training.
    ///
    /// `l1`/`l2`/`a_bias` are the caller's parameter leaves (pass constants
    /// to freeze them). The weight quantizer is treated as fixed within one
    /// step; `round: false` switches to the clip-only surrogate used by
    /// gradient checks.
    pub fn forward_tape(
        &self,
        x: &Var,
        l1: Option<&Var>,
        l2: Option<&Var>,
        a_bias: &Var,
        round: bool,
    ) -> Result<Var> {
        let (wq, aq) = self.require_quantizers()?;
        let xshape = x.shape();
        let (x_rows, geom) = match &self.kind {
            LayerKind::Linear { .. } => {
                if xshape.len() == 2 {
                    (x.clone(), None)
                } else {
                    let (t, h, w) = (xshape[0], xshape[2], xshape[3]);
                    (x.video_to_rows()?, Some((t, h, w)))
                }
            }
            LayerKind::Conv2d(s) | LayerKind::Conv3d(s) => {
                let (ot, oh, ow) = s.out_dims(xshape[0], xshape[2], xshape[3])?;
                (x.im2col(s)?, Some((ot, oh, ow)))
            }
        };
        let tape = x_rows.tape();
        let wflat = tape.constant(self.weight_flat()?);

        // FP branch and residual share the same factors.
        let (fp_out, resid) = match (l1, l2) {
            (Some(l1), Some(l2)) => {
                let h = x_rows.matmul_nt(l2)?;
                let fp = h.matmul_nt(l1)?;
                let r = wflat.sub(&l1.matmul(l2)?)?;
                (Some(fp), r)
            }
            _ => (None, wflat),
        };

        let rotate_var = |v: &Var| -> Result<Var> {
            if !self.rotate {
                return Ok(v.clone());
            }
            let d = self.kind.rotation_block();
            let shape = v.shape();
            let total: usize = shape.iter().product();
            let blocks = v.reshape(vec![total / d, d])?;
            blocks.fwht(self.hadamard_seed)?.reshape(shape)
        };

        let xr = rotate_var(&x_rows)?.fake_quant(aq, round);
        let rr = rotate_var(&resid)?.fake_quant(wq, round);
        let mut y = xr.matmul_nt(&rr)?;
        if let Some(fp) = fp_out {
            y = y.add(&fp)?;
        }
        if let Some(b) = &self.bias {
            let bv = tape.constant(b.clone());
            y = y.add_bias(&bv)?;
        }
        y = y.add_bias(a_bias)?;
        match geom {
            Some((t, h, w)) => y.rows_to_video(t, h, w),
            None => Ok(y),
        }
    }

    /// Reference (unquantized, no-branch) layer output.
    pub fn reference_forward(&self, x: &Tensor) -> Result<Tensor> {
        let (x_rows, lowered) = self.lower(x)?;
        let mut y = linalg::matmul_nt(&x_rows, &self.weight_flat()?)?;
        if let Some(b) = &self.bias {
            let (rows, m) = y.dims2()?;
            for r in 0..rows {
                for o in 0..m {
                    y.data_mut()[r * m + o] += b.data()[o];
                }
            }
        }
        self.raise(&y, &lowered)
    }

    /// Cost accounting for one layer at the given bit widths and row count
    /// (output positions of the evaluation input shape).
    pub fn compression_stats(&self, bits_w: u8, bits_a: u8, rows: usize) -> CompressionStats {
        let (m, n) = self.kind.flat_dims();
        let r = self.rank;
        let bias_params = if self.bias.is_some() { m } else { 0 };
        let lba_params = if self.a_bias.data().iter().any(|&v| v != 0.0) {
            m
        } else {
            0
        };
        let params_bits =
            m as u64 * n as u64 * bits_w as u64 + (r * (m + n)) as u64 * 32 + (bias_params + lba_params) as u64 * 32;
        let baseline_params_bits = m as u64 * n as u64 * 32 + bias_params as u64 * 32;

        let d = self.kind.rotation_block();
        let rot_ops = if self.rotate && bits_w < 32 {
            (rows * n) as u64 * (d as f64).log2().round() as u64
        } else {
            0
        };
        let quant_macs = (rows * m * n) as u64;
        let fp_macs = (rows * r * (m + n)) as u64;
        let ops_count = quant_macs + fp_macs + rot_ops;
        // bit-weighted ops: integer MACs scale with bits_w·bits_a relative
        // to a 32×32 FP MAC; FP-branch and rotation ops stay full width.
        let ops_weighted = quant_macs as f64 * (bits_w as f64 * bits_a as f64) / (32.0 * 32.0)
            + fp_macs as f64
            + rot_ops as f64;
        CompressionStats {
            params_bits,
            baseline_params_bits,
            ops_count,
            ops_weighted,
            baseline_ops: quant_macs,
            fp_branch_ratio: (r * (m + n)) as f64 / (m * n) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    /// Stored parameter bits of the quantized layer.
    pub params_bits: u64,
    /// Stored parameter bits of the 32-bit reference layer.
    pub baseline_params_bits: u64,
    /// Raw multiply-accumulate count of all branches plus rotation.
    pub ops_count: u64,
    /// MACs weighted by operand bit widths (integer MACs count
    /// bits_w·bits_a/1024 of an FP MAC); basis of the Ops reduction ratio.
    pub ops_weighted: f64,
    /// MACs of the 32-bit reference layer on the same input.
    pub baseline_ops: u64,
    /// FP-branch overhead r(m+n)/(mn).
    pub fp_branch_ratio: f64,
}
