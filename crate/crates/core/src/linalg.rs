//! Linear-algebra kernels: GEMM, im2col convolution, the fast signed
//! Walsh-Hadamard transform, truncated SVD, and percentile statistics.
//!
//! All reductions run in a fixed k-major order so results are reproducible
//! bit-for-bit across runs and platforms.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {} vs {}",
            k, k2
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    // i-k-j order: for each (i, j) the k-sum accumulates in ascending k.
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = ad[i * k + kk];
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · bᵀ` where `b` is stored `[n×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_nt inner extents differ: {} vs {}",
            k, k2
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Spatio-temporal convolution geometry shared by conv2d (kt = 1, pad_t = 0)
/// and conv3d layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_t: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvSpec {
    /// Output extents for an input of shape T×Cin×H×W.
    pub fn out_dims(&self, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let ot = out_extent(t, self.kt, self.pad_t, self.stride)?;
        let oh = out_extent(h, self.kh, self.pad_h, self.stride)?;
        let ow = out_extent(w, self.kw, self.pad_w, self.stride)?;
        Ok((ot, oh, ow))
    }

    /// Contraction width of the flattened weight: Cin · kT · kH · kW.
    pub fn k_dim(&self) -> usize {
        self.c_in * self.kt * self.kh * self.kw
    }
}

fn out_extent(n: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = n + 2 * pad;
    if k > padded {
        return Err(Error::dim(format!(
            "kernel extent {} exceeds padded input {}",
            k, padded
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Lower a video tensor to the im2col matrix `[T'·H'·W' × Cin·kT·kH·kW]`.
///
/// Rows follow (t, h, w) output order. Columns are tap-major with the
/// input-channel index fastest, so each kernel tap owns one contiguous
/// Cin-block; the Hadamard rotation operates per block.
pub fn im2col(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (t, c, h, w) = x.dims4()?;
    if c != spec.c_in {
        return Err(Error::dim(format!(
            "input channels {} != conv c_in {}",
            c, spec.c_in
        )));
    }
    let (ot, oh, ow) = spec.out_dims(t, h, w)?;
    let kdim = spec.k_dim();
    let rows = ot * oh * ow;
    let mut out = vec![0.0; rows * kdim];
    let xd = x.data();
    let (it, ih, iw) = (t as isize, h as isize, w as isize);
    let mut row = 0;
    for tt in 0..ot {
        for hh in 0..oh {
            for ww in 0..ow {
                let base = row * kdim;
                let mut col = 0;
                for dt in 0..spec.kt {
                    let st = (tt * spec.stride + dt) as isize - spec.pad_t as isize;
                    for dh in 0..spec.kh {
                        let sh = (hh * spec.stride + dh) as isize - spec.pad_h as isize;
                        for dw in 0..spec.kw {
                            let sw = (ww * spec.stride + dw) as isize - spec.pad_w as isize;
                            let inside =
                                st >= 0 && st < it && sh >= 0 && sh < ih && sw >= 0 && sw < iw;
                            if inside {
                                let (st, sh, sw) = (st as usize, sh as usize, sw as usize);
                                for ci in 0..c {
                                    out[base + col + ci] =
                                        xd[((st * c + ci) * h + sh) * w + sw];
                                }
                            }
                            col += c;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::new(vec![rows, kdim], out)
}

/// Adjoint of [`im2col`]: scatter-add a cols-matrix gradient back onto the
/// video input shape.
pub fn col2im(cols: &Tensor, spec: &ConvSpec, t: usize, h: usize, w: usize) -> Result<Tensor> {
    let (ot, oh, ow) = spec.out_dims(t, h, w)?;
    let kdim = spec.k_dim();
    let c = spec.c_in;
    let (rows, kd) = cols.dims2()?;
    if rows != ot * oh * ow || kd != kdim {
        return Err(Error::dim("col2im shape mismatch"));
    }
    let mut out = vec![0.0; t * c * h * w];
    let cd = cols.data();
    let (it, ih, iw) = (t as isize, h as isize, w as isize);
    let mut row = 0;
    for tt in 0..ot {
        for hh in 0..oh {
            for ww in 0..ow {
                let base = row * kdim;
                let mut col = 0;
                for dt in 0..spec.kt {
                    let st = (tt * spec.stride + dt) as isize - spec.pad_t as isize;
                    for dh in 0..spec.kh {
                        let sh = (hh * spec.stride + dh) as isize - spec.pad_h as isize;
                        for dw in 0..spec.kw {
                            let sw = (ww * spec.stride + dw) as isize - spec.pad_w as isize;
                            let inside =
                                st >= 0 && st < it && sh >= 0 && sh < ih && sw >= 0 && sw < iw;
                            if inside {
                                let (st, sh, sw) = (st as usize, sh as usize, sw as usize);
                                for ci in 0..c {
                                    out[((st * c + ci) * h + sh) * w + sw] +=
                                        cd[base + col + ci];
                                }
                            }
                            col += c;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::new(vec![t, c, h, w], out)
}

/// Flatten a natural-layout kernel `[Cout, Cin, kT, kH, kW]` into the
/// `[Cout × Cin·kT·kH·kW]` matrix matching the [`im2col`] column order.
pub fn flatten_conv_weight(w: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let expect = [spec.c_out, spec.c_in, spec.kt, spec.kh, spec.kw];
    if w.shape() != expect {
        return Err(Error::dim(format!(
            "conv weight shape {:?}, expected {:?}",
            w.shape(),
            expect
        )));
    }
    let kdim = spec.k_dim();
    let c = spec.c_in;
    let taps = spec.kt * spec.kh * spec.kw;
    let mut out = vec![0.0; spec.c_out * kdim];
    let wd = w.data();
    for o in 0..spec.c_out {
        for ci in 0..c {
            for tap in 0..taps {
                out[o * kdim + tap * c + ci] = wd[(o * c + ci) * taps + tap];
            }
        }
    }
    Tensor::new(vec![spec.c_out, kdim], out)
}

/// Reassemble a `[T'·H'·W' × Cout]` row matrix into video layout
/// `[T' × Cout × H' × W']`.
pub fn rows_to_video(y: &Tensor, t: usize, h: usize, w: usize) -> Result<Tensor> {
    let (rows, c) = y.dims2()?;
    if rows != t * h * w {
        return Err(Error::dim("rows_to_video extent mismatch"));
    }
    let mut out = vec![0.0; rows * c];
    let yd = y.data();
    for tt in 0..t {
        for hh in 0..h {
            for ww in 0..w {
                let r = (tt * h + hh) * w + ww;
                for o in 0..c {
                    out[((tt * c + o) * h + hh) * w + ww] = yd[r * c + o];
                }
            }
        }
    }
    Tensor::new(vec![t, c, h, w], out)
}

/// Inverse of [`rows_to_video`], also used to lower linear-layer inputs.
pub fn video_to_rows(x: &Tensor) -> Result<Tensor> {
    let (t, c, h, w) = x.dims4()?;
    let mut out = vec![0.0; t * c * h * w];
    let xd = x.data();
    for tt in 0..t {
        for hh in 0..h {
            for ww in 0..w {
                let r = (tt * h + hh) * w + ww;
                for ci in 0..c {
                    out[r * c + ci] = xd[((tt * c + ci) * h + hh) * w + ww];
                }
            }
        }
    }
    Tensor::new(vec![t * h * w, c], out)
}

/// Cross-correlation (no kernel flip) via im2col + GEMM.
pub fn conv_forward(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (t, _, h, wd) = x.dims4()?;
    let (ot, oh, ow) = spec.out_dims(t, h, wd)?;
    let cols = im2col(x, spec)?;
    let wflat = flatten_conv_weight(w, spec)?;
    let y = matmul_nt(&cols, &wflat)?;
    rows_to_video(&y, ot, oh, ow)
}

/// Seeded ±1 diagonal for the randomized Hadamard transform.
pub fn hadamard_signs(d: usize, sign_seed: u64) -> Vec<f64> {
    let mut rng = RngState::new(0).derive(sign_seed);
    (0..d).map(|_| rng.sign()).collect()
}

fn require_pow2(d: usize) -> Result<()> {
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::dim(format!(
            "Hadamard dimension {} is not a power of two",
            d
        )));
    }
    Ok(())
}

/// In-place unnormalized Walsh-Hadamard butterfly over a power-of-two slice.
fn wht_in_place(v: &mut [f64]) {
    let d = v.len();
    let mut half = 1;
    while half < d {
        let step = half * 2;
        for base in (0..d).step_by(step) {
            for i in base..base + half {
                let a = v[i];
                let b = v[i + half];
                v[i] = a + b;
                v[i + half] = a - b;
            }
        }
        half = step;
    }
}

/// Apply `H = D · H_walsh / √d` along the last axis: `y = x·H` per row.
pub fn fwht(x: &Tensor, sign_seed: u64) -> Result<Tensor> {
    let d = *x.shape().last().ok_or_else(|| Error::arg("empty shape"))?;
    require_pow2(d)?;
    let signs = hadamard_signs(d, sign_seed);
    let mut out = x.clone();
    let norm = 1.0 / (d as f64).sqrt();
    for row in out.data_mut().chunks_mut(d) {
        for (v, s) in row.iter_mut().zip(signs.iter()) {
            *v *= s;
        }
        wht_in_place(row);
        for v in row.iter_mut() {
            *v *= norm;
        }
    }
    Ok(out)
}

/// Apply `Hᵀ = H_walsh · D / √d` along the last axis; inverts [`fwht`].
pub fn fwht_inverse(y: &Tensor, sign_seed: u64) -> Result<Tensor> {
    let d = *y.shape().last().ok_or_else(|| Error::arg("empty shape"))?;
    require_pow2(d)?;
    let signs = hadamard_signs(d, sign_seed);
    let mut out = y.clone();
    let norm = 1.0 / (d as f64).sqrt();
    for row in out.data_mut().chunks_mut(d) {
        wht_in_place(row);
        for (v, s) in row.iter_mut().zip(signs.iter()) {
            *v *= s * norm;
        }
    }
    Ok(out)
}

/// Nearest-rank percentile: sort ascending, take the element at index
/// ceil(p/100 · N) − 1 (index 0 for p = 0).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::arg("percentile of empty list"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::arg(format!("percentile p = {} out of [0, 100]", p)));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in percentile input"));
    let n = sorted.len();
    let rank = (p / 100.0 * n as f64).ceil() as usize;
    let idx = rank.saturating_sub(1).min(n - 1);
    Ok(sorted[idx])
}

/// Cyclic-Jacobi eigendecomposition of a symmetric matrix.
/// Returns eigenvalues (descending) and eigenvectors as matrix columns.
fn jacobi_eig_sym(g: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (n, n2) = g.dims2()?;
    if n != n2 {
        return Err(Error::dim("jacobi expects a square matrix"));
    }
    let mut a = g.data().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let tol = 1e-12;
    for _sweep in 0..60 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if (2.0 * off).sqrt() <= tol * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol * scale * 1e-4 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // rotate rows/cols p and q of A
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, usize)> = (0..n).map(|i| (a[i * n + i], i)).collect();
    pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).expect("NaN eigenvalue"));
    let eigvals: Vec<f64> = pairs.iter().map(|&(l, _)| l).collect();
    let mut vecs = vec![0.0; n * n];
    for (new_col, &(_, old_col)) in pairs.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + new_col] = v[k * n + old_col];
        }
    }
    Ok((eigvals, Tensor::new(vec![n, n], vecs)?))
}

/// Best rank-r factorization in Frobenius norm: `L1 = U_r Σ_r`, `L2 = V_rᵀ`.
///
/// Computed via Jacobi eigendecomposition of the smaller Gram matrix;
/// adequate for desk-scale extents.
pub fn svd_truncated(w: &Tensor, r: usize) -> Result<(Tensor, Tensor)> {
    let (m, n) = w.dims2()?;
    if r < 1 || r > m.min(n) {
        return Err(Error::arg(format!(
            "rank {} out of range [1, {}]",
            r,
            m.min(n)
        )));
    }
    if n <= m {
        // G = WᵀW, columns of V are right singular vectors; L1 col = W·v.
        let g = matmul(&transpose(w)?, w)?;
        let (eigvals, v) = jacobi_eig_sym(&g)?;
        let mut l1 = vec![0.0; m * r];
        let mut l2 = vec![0.0; r * n];
        for j in 0..r {
            let _sigma = eigvals[j].max(0.0).sqrt();
            // W·v_j = σ_j u_j, which is exactly the j-th column of U_r Σ_r.
            for i in 0..m {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += w.data()[i * n + k] * v.data()[k * n + j];
                }
                l1[i * r + j] = acc;
            }
            for k in 0..n {
                l2[j * n + k] = v.data()[k * n + j];
            }
        }
        Ok((Tensor::new(vec![m, r], l1)?, Tensor::new(vec![r, n], l2)?))
    } else {
        // G = WWᵀ, columns of U are left singular vectors.
        let g = matmul(w, &transpose(w)?)?;
        let (eigvals, u) = jacobi_eig_sym(&g)?;
        let mut l1 = vec![0.0; m * r];
        let mut l2 = vec![0.0; r * n];
        for j in 0..r {
            let sigma = eigvals[j].max(0.0).sqrt();
            for i in 0..m {
                l1[i * r + j] = u.data()[i * m + j] * sigma;
            }
            if sigma > 1e-300 {
                // v_jᵀ = u_jᵀ W / σ_j
                for k in 0..n {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += u.data()[i * m + j] * w.data()[i * n + k];
                    }
                    l2[j * n + k] = acc / sigma;
                }
            }
        }
        Ok((Tensor::new(vec![m, r], l1)?, Tensor::new(vec![r, n], l2)?))
    }
}
