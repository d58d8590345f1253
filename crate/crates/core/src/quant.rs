//! Uniform affine quantization.
//!
//! Convention: `x_int = clip(round(x/s) + z, l, u)` and `x̂ = s·(x_int − z)`,
//! so real 0 maps to integer z and the map is invertible in the no-clip
//! regime. Ties round to even.

use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    PerTensor,
    /// Per leading-axis (output-channel) slice.
    PerChannel,
}

/// The (s, z, l, u) of a uniform quantizer, per tensor or per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    pub scheme: Scheme,
    pub granularity: Granularity,
    /// One scale per channel (length 1 for per-tensor).
    pub scales: Vec<f64>,
    /// One zero-point per channel; all zeros for symmetric.
    pub zero_points: Vec<i32>,
    pub clip_lo: i32,
    pub clip_hi: i32,
}

fn clip_bounds(bits: u8, scheme: Scheme) -> (i32, i32) {
    match scheme {
        Scheme::Symmetric => (-(1i64 << (bits - 1)) as i32, ((1i64 << (bits - 1)) - 1) as i32),
        Scheme::Asymmetric => (0, ((1i64 << bits) - 1).min(i32::MAX as i64) as i32),
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(2..=32).contains(&bits) {
        return Err(Error::arg(format!("unsupported bit width {}", bits)));
    }
    Ok(())
}

/// Symmetric fit for one channel: s = max|x| / (2^(bits−1) − 1).
fn fit_symmetric(vals: &[f64], hi: i32) -> f64 {
    let amax = vals.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    if amax == 0.0 {
        1.0
    } else {
        amax / hi as f64
    }
}

/// Asymmetric fit for one channel. A degenerate all-equal range is extended
/// to include zero so the constant round-trips exactly.
fn fit_asymmetric(vals: &[f64], lo_i: i32, hi_i: i32) -> (f64, i32) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    fit_asymmetric_range(lo, hi, lo_i, hi_i)
}

fn fit_asymmetric_range(mut lo: f64, mut hi: f64, lo_i: i32, hi_i: i32) -> (f64, i32) {
    if lo == hi {
        if lo == 0.0 {
            return (1.0, 0);
        }
        lo = lo.min(0.0);
        hi = hi.max(0.0);
    }
    let levels = (hi_i - lo_i) as f64;
    let s = (hi - lo) / levels;
    let z = (-lo / s).round_ties_even() as i64;
    let z = z.clamp(lo_i as i64, hi_i as i64) as i32;
    (s, z)
}

impl QuantParams {
    /// Fit (s, z) on a sample tensor. For per-channel granularity the
    /// leading axis of `sample` is the channel axis.
    pub fn calibrate(
        sample: &Tensor,
        bits: u8,
        scheme: Scheme,
        granularity: Granularity,
    ) -> Result<QuantParams> {
        check_bits(bits)?;
        if sample.is_empty() {
            return Err(Error::arg("cannot calibrate on an empty tensor"));
        }
        let (lo_i, hi_i) = clip_bounds(bits, scheme);
        let channels = match granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => sample.shape()[0],
        };
        let chunk = sample.len() / channels;
        let mut scales = Vec::with_capacity(channels);
        let mut zero_points = Vec::with_capacity(channels);
        for c in 0..channels {
            let vals = &sample.data()[c * chunk..(c + 1) * chunk];
            match scheme {
                Scheme::Symmetric => {
                    scales.push(fit_symmetric(vals, hi_i));
                    zero_points.push(0);
                }
                Scheme::Asymmetric => {
                    let (s, z) = fit_asymmetric(vals, lo_i, hi_i);
                    scales.push(s);
                    zero_points.push(z);
                }
            }
        }
        Ok(QuantParams {
            bits,
            scheme,
            granularity,
            scales,
            zero_points,
            clip_lo: lo_i,
            clip_hi: hi_i,
        })
    }

    /// Fit a per-tensor quantizer from a pre-accumulated value range,
    /// used for static activation quantizers observed over a whole set.
    pub fn calibrate_from_range(lo: f64, hi: f64, bits: u8, scheme: Scheme) -> Result<QuantParams> {
        check_bits(bits)?;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::arg(format!("invalid range [{}, {}]", lo, hi)));
        }
        let (lo_i, hi_i) = clip_bounds(bits, scheme);
        let (scales, zero_points) = match scheme {
            Scheme::Symmetric => {
                let amax = lo.abs().max(hi.abs());
                (vec![if amax == 0.0 { 1.0 } else { amax / hi_i as f64 }], vec![0])
            }
            Scheme::Asymmetric => {
                let (s, z) = fit_asymmetric_range(lo, hi, lo_i, hi_i);
                (vec![s], vec![z])
            }
        };
        Ok(QuantParams {
            bits,
            scheme,
            granularity: Granularity::PerTensor,
            scales,
            zero_points,
            clip_lo: lo_i,
            clip_hi: hi_i,
        })
    }

    pub fn num_channels(&self) -> usize {
        self.scales.len()
    }

    fn channel_of(&self, idx: usize, len: usize) -> usize {
        if self.scales.len() == 1 {
            0
        } else {
            idx / (len / self.scales.len())
        }
    }

    /// `x_int = clip(round(x/s) + z, l, u)`.
    pub fn quantize(&self, x: &Tensor) -> IntTensor {
        let len = x.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = self.channel_of(i, len);
                let q = (v / self.scales[c]).round_ties_even() + self.zero_points[c] as f64;
                q.clamp(self.clip_lo as f64, self.clip_hi as f64) as i32
            })
            .collect();
        IntTensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    /// `x̂ = s·(x_int − z)`.
    pub fn dequantize(&self, x_int: &IntTensor) -> Result<Tensor> {
        let len = x_int.len();
        let mut out = Vec::with_capacity(len);
        for (i, &q) in x_int.data().iter().enumerate() {
            if q < self.clip_lo || q > self.clip_hi {
                return Err(Error::Invariant(format!(
                    "integer value {} outside clip range [{}, {}]",
                    q, self.clip_lo, self.clip_hi
                )));
            }
            let c = self.channel_of(i, len);
            out.push(self.scales[c] * (q - self.zero_points[c]) as f64);
        }
        Tensor::new(x_int.shape().to_vec(), out)
    }

    /// Quantize-then-dequantize in floating point. Effectively lossless
    /// quantizers (bits >= 32 on an f64 engine) pass values through exactly.
    pub fn fake_quant(&self, x: &Tensor) -> Tensor {
        if self.is_effectively_lossless() {
            return x.clone();
        }
        self.dequantize(&self.quantize(x)).expect("fresh quantize is in range")
    }

    /// STE gradient mask: 1 where the pre-clip integer lands inside
    /// [l, u], 0 where the value was clipped.
    pub fn ste_mask(&self, x: &Tensor) -> Tensor {
        if self.is_effectively_lossless() {
            return Tensor::full(x.shape().to_vec(), 1.0);
        }
        let len = x.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = self.channel_of(i, len);
                let q = (v / self.scales[c]).round_ties_even() + self.zero_points[c] as f64;
                if q >= self.clip_lo as f64 && q <= self.clip_hi as f64 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    /// Gradient mask of the clip-only surrogate: 1 where `x/s + z` lies in
    /// [l, u] before clamping (no rounding involved).
    pub fn clip_mask(&self, x: &Tensor) -> Tensor {
        if self.is_effectively_lossless() {
            return Tensor::full(x.shape().to_vec(), 1.0);
        }
        let len = x.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = self.channel_of(i, len);
                let q = v / self.scales[c] + self.zero_points[c] as f64;
                if q >= self.clip_lo as f64 && q <= self.clip_hi as f64 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    /// The clip-only surrogate `s·(clip(x/s + z, l, u) − z)`.
    ///
    /// Its exact derivative is the STE mask, which makes it the
    /// finite-difference reference for gradient checks (the rounded
    /// forward is piecewise constant and has no usable difference
    /// quotient).
    pub fn fake_quant_no_round(&self, x: &Tensor) -> Tensor {
        if self.is_effectively_lossless() {
            return x.clone();
        }
        let len = x.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = self.channel_of(i, len);
                let q = (v / self.scales[c] + self.zero_points[c] as f64)
                    .clamp(self.clip_lo as f64, self.clip_hi as f64);
                self.scales[c] * (q - self.zero_points[c] as f64)
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    /// A 32-bit symmetric identity-like quantizer (negligible error),
    /// used for "no quantization" configurations.
    pub fn is_effectively_lossless(&self) -> bool {
        self.bits >= 32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qp_sym(bits: u8, s: f64) -> QuantParams {
        let (lo, hi) = clip_bounds(bits, Scheme::Symmetric);
        QuantParams {
            bits,
            scheme: Scheme::Symmetric,
            granularity: Granularity::PerTensor,
            scales: vec![s],
            zero_points: vec![0],
            clip_lo: lo,
            clip_hi: hi,
        }
    }

    #[test]
    fn calibrate_symmetric_4bit_hand_case() {
        let x = Tensor::new(vec![3], vec![7.0, -2.0, 1.5]).unwrap();
        let qp = QuantParams::calibrate(&x, 4, Scheme::Symmetric, Granularity::PerTensor).unwrap();
        assert_eq!(qp.scales, vec![1.0]);
        assert_eq!(qp.zero_points, vec![0]);
        assert_eq!((qp.clip_lo, qp.clip_hi), (-8, 7));
    }

    #[test]
    fn calibrate_asymmetric_4bit_hand_case() {
        let x = Tensor::new(vec![4], vec![-1.0, 0.0, 2.0, 3.0]).unwrap();
        let qp = QuantParams::calibrate(&x, 4, Scheme::Asymmetric, Granularity::PerTensor).unwrap();
        assert!((qp.scales[0] - 4.0 / 15.0).abs() < 1e-15);
        assert_eq!(qp.zero_points, vec![4]);
    }

    #[test]
    fn constant_tensor_roundtrips_exactly() {
        for c in [5.0, -3.25, 0.0, 100.5] {
            let x = Tensor::full(vec![4], c);
            let qp =
                QuantParams::calibrate(&x, 4, Scheme::Asymmetric, Granularity::PerTensor).unwrap();
            let back = qp.fake_quant(&x);
            assert_eq!(back.data()[0], c, "constant {} failed to round-trip", c);
        }
    }

    #[test]
    fn quantize_hand_cases() {
        let qp = qp_sym(4, 1.0);
        let x = Tensor::new(vec![3], vec![0.0, 2.4, 100.0]).unwrap();
        let xi = qp.quantize(&x);
        assert_eq!(xi.data(), &[0, 2, 7]);
    }

    #[test]
    fn dequantize_hand_cases() {
        let qp = qp_sym(4, 1.0);
        let xi = IntTensor::new(vec![1], vec![0]).unwrap();
        assert_eq!(qp.dequantize(&xi).unwrap().data(), &[0.0]);

        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let qp2 = QuantParams {
            bits: 4,
            scheme: Scheme::Asymmetric,
            granularity: Granularity::PerTensor,
            scales: vec![4.0 / 15.0],
            zero_points: vec![4],
            clip_lo: 0,
            clip_hi: 15,
        };
        let xi = IntTensor::new(vec![1], vec![4]).unwrap();
        assert_eq!(qp2.dequantize(&xi).unwrap().data(), &[0.0]);
        let _ = x;
    }

    #[test]
    fn dequantize_rejects_out_of_range() {
        let qp = qp_sym(4, 1.0);
        let xi = IntTensor::new(vec![1], vec![9]).unwrap();
        assert!(qp.dequantize(&xi).is_err());
    }

    #[test]
    fn roundtrip_error_bounded_by_half_scale() {
        let mut rng = crate::rng::RngState::new(5);
        let x = Tensor::random_uniform(vec![256], -6.0, 6.0, &mut rng);
        let qp = QuantParams::calibrate(&x, 8, Scheme::Asymmetric, Granularity::PerTensor).unwrap();
        let back = qp.fake_quant(&x);
        let s = qp.scales[0];
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= s / 2.0 + 1e-12);
        }
    }

    #[test]
    fn fake_quant_is_idempotent() {
        let mut rng = crate::rng::RngState::new(6);
        let x = Tensor::random_uniform(vec![64], -2.0, 2.0, &mut rng);
        let qp = QuantParams::calibrate(&x, 4, Scheme::Symmetric, Granularity::PerTensor).unwrap();
        let once = qp.fake_quant(&x);
        let twice = qp.fake_quant(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn per_channel_roundtrip_bound_per_channel() {
        let mut rng = crate::rng::RngState::new(7);
        let w = Tensor::random_uniform(vec![4, 16], -3.0, 3.0, &mut rng);
        let qp = QuantParams::calibrate(&w, 4, Scheme::Symmetric, Granularity::PerChannel).unwrap();
        assert_eq!(qp.num_channels(), 4);
        let back = qp.fake_quant(&w);
        for c in 0..4 {
            let s = qp.scales[c];
            for j in 0..16 {
                let d = (w.at2(c, j) - back.at2(c, j)).abs();
                assert!(d <= s / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn ste_mask_matches_clip_indicator() {
        let qp = qp_sym(4, 1.0);
        let x = Tensor::new(vec![4], vec![0.2, 6.6, 100.0, -9.0]).unwrap();
        let mask = qp.ste_mask(&x);
        assert_eq!(mask.data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn no_round_surrogate_matches_inside_grid_points() {
        let qp = qp_sym(4, 0.5);
        // at exact grid multiples the surrogate and the real fake-quant agree
        let x = Tensor::new(vec![3], vec![-1.0, 0.5, 3.0]).unwrap();
        assert!(qp.fake_quant_no_round(&x).max_abs_diff(&qp.fake_quant(&x)) < 1e-15);
    }
}
