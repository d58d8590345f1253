//! Built-in spatio-temporal denoiser used to exercise the quantization
//! pipeline end to end, plus the model container that swaps its layers for
//! composite quantized ones.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, ConvSpec};
use crate::qlayer::{ForwardMode, LayerKind, QLayer};
use crate::rng::RngState;
use crate::tensor::Tensor;
use std::collections::HashMap;

pub const IO_CHANNELS: usize = 4;
pub const HIDDEN_CHANNELS: usize = 16;

/// Plain full-precision layer of the toy backbone.
#[derive(Debug, Clone)]
pub struct FpLayer {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v / (1.0 + (-v).exp()))
}

fn add_channel_bias(video: &mut Tensor, bias: &Tensor) -> Result<()> {
    let (t, c, h, w) = video.dims4()?;
    if bias.len() != c {
        return Err(Error::dim("bias length must equal channel count"));
    }
    for ti in 0..t {
        for ci in 0..c {
            let base = (ti * c + ci) * h * w;
            let b = bias.data()[ci];
            for p in 0..h * w {
                video.data_mut()[base + p] += b;
            }
        }
    }
    Ok(())
}

impl FpLayer {
    /// Forward on a video tensor [t, c, h, w].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match &self.kind {
            LayerKind::Linear { n_in, n_out } => {
                let (t, c, h, w) = x.dims4()?;
                if c != *n_in {
                    return Err(Error::dim(format!(
                        "linear expects {} channels, got {}",
                        n_in, c
                    )));
                }
                let rows = linalg::video_to_rows(x)?;
                let mut out = linalg::matmul_nt(&rows, &self.weight)?;
                if let Some(b) = &self.bias {
                    let n = *n_out;
                    for r in 0..t * h * w {
                        for j in 0..n {
                            out.data_mut()[r * n + j] += b.data()[j];
                        }
                    }
                }
                linalg::rows_to_video(&out, t, h, w)
            }
            LayerKind::Conv2d(spec) | LayerKind::Conv3d(spec) => {
                let mut out = linalg::conv_forward(x, &self.weight, spec)?;
                if let Some(b) = &self.bias {
                    add_channel_bias(&mut out, b)?;
                }
                Ok(out)
            }
        }
    }
}

/// Fixed-topology spatio-temporal denoising backbone:
/// conv2d 4->16 / SiLU / conv3d 16->16 / SiLU / linear 16->16 / SiLU /
/// conv2d 16->4.
#[derive(Debug)]
pub struct ToyBackbone {
    pub layers: Vec<FpLayer>,
    pub silu_after: Vec<bool>,
}

fn conv2d_spec(c_in: usize, c_out: usize) -> ConvSpec {
    ConvSpec {
        c_in,
        c_out,
        kt: 1,
        kh: 3,
        kw: 3,
        stride: 1,
        pad_t: 0,
        pad_h: 1,
        pad_w: 1,
    }
}

fn conv3d_spec(c_in: usize, c_out: usize) -> ConvSpec {
    ConvSpec {
        c_in,
        c_out,
        kt: 3,
        kh: 3,
        kw: 3,
        stride: 1,
        pad_t: 1,
        pad_h: 1,
        pad_w: 1,
    }
}

fn init_weight(rng: &mut RngState, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::random_uniform(shape, -bound, bound, rng)
}

impl ToyBackbone {
    pub fn new(seed: u64) -> Self {
        let mut rng = RngState::new(seed).derive(0x6262_6f6e); // backbone stream
        let mut layers = Vec::new();

        let s0 = conv2d_spec(IO_CHANNELS, HIDDEN_CHANNELS);
        let fan0 = s0.k_dim();
        layers.push(FpLayer {
            weight: init_weight(&mut rng, vec![s0.c_out, s0.c_in, 1, s0.kh, s0.kw], fan0),
            bias: Some(init_weight(&mut rng, vec![s0.c_out], fan0)),
            kind: LayerKind::Conv2d(s0),
        });

        let s1 = conv3d_spec(HIDDEN_CHANNELS, HIDDEN_CHANNELS);
        let fan1 = s1.k_dim();
        layers.push(FpLayer {
            weight: init_weight(
                &mut rng,
                vec![s1.c_out, s1.c_in, s1.kt, s1.kh, s1.kw],
                fan1,
            ),
            bias: Some(init_weight(&mut rng, vec![s1.c_out], fan1)),
            kind: LayerKind::Conv3d(s1),
        });

        layers.push(FpLayer {
            weight: init_weight(
                &mut rng,
                vec![HIDDEN_CHANNELS, HIDDEN_CHANNELS],
                HIDDEN_CHANNELS,
            ),
            bias: None,
            kind: LayerKind::Linear {
                n_in: HIDDEN_CHANNELS,
                n_out: HIDDEN_CHANNELS,
            },
        });

        let s3 = conv2d_spec(HIDDEN_CHANNELS, IO_CHANNELS);
        let fan3 = s3.k_dim();
        layers.push(FpLayer {
            weight: init_weight(&mut rng, vec![s3.c_out, s3.c_in, 1, s3.kh, s3.kw], fan3),
            bias: Some(init_weight(&mut rng, vec![s3.c_out], fan3)),
            kind: LayerKind::Conv2d(s3),
        });

        ToyBackbone {
            layers,
            silu_after: vec![true, true, true, false],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(&cur)?;
            if self.silu_after[i] {
                cur = silu(&cur);
            }
        }
        Ok(cur)
    }
}

/// One layer of a (partially) quantized model.
#[derive(Debug, Clone)]
pub enum ModelLayer {
    Fp(FpLayer),
    Quant(QLayer),
}

impl ModelLayer {
    pub fn kind(&self) -> &LayerKind {
        match self {
            ModelLayer::Fp(l) => &l.kind,
            ModelLayer::Quant(l) => &l.kind,
        }
    }
}

/// Backbone with some layers replaced by composite quantized layers.
#[derive(Debug, Clone)]
pub struct QuantModel {
    pub layers: Vec<ModelLayer>,
    pub silu_after: Vec<bool>,
}

/// Which layer kinds to quantize, and at what widths.
#[derive(Clone, Debug)]
pub struct QuantConfig {
    pub bits_w: u8,
    pub bits_a: u8,
    pub kinds: Vec<String>,
    pub rotate: bool,
    pub seed: u64,
}

impl QuantConfig {
    pub fn all_kinds(bits_w: u8, bits_a: u8, seed: u64) -> Self {
        QuantConfig {
            bits_w,
            bits_a,
            kinds: vec!["linear".into(), "conv2d".into(), "conv3d".into()],
            rotate: true,
            seed,
        }
    }
}

/// Replace every layer whose kind is named in the config with a composite
/// quantized layer. Layers start at rank 0 (no FP branch) until ranks are
/// allocated.
pub fn substitute(backbone: &ToyBackbone, cfg: &QuantConfig) -> Result<QuantModel> {
    for k in &cfg.kinds {
        if k != "linear" && k != "conv2d" && k != "conv3d" {
            return Err(Error::config(format!("unknown layer kind '{}'", k)));
        }
    }
    let mut layers = Vec::new();
    for (i, l) in backbone.layers.iter().enumerate() {
        let name = l.kind.name();
        if cfg.kinds.iter().any(|k| k == name) {
            let seed = RngState::new(cfg.seed).derive(0x726f74 + i as u64).seed();
            let mut q = QLayer::new(l.kind.clone(), l.weight.clone(), l.bias.clone(), seed)?;
            q.rotate = cfg.rotate;
            layers.push(ModelLayer::Quant(q));
        } else {
            layers.push(ModelLayer::Fp(l.clone()));
        }
    }
    Ok(QuantModel {
        layers,
        silu_after: backbone.silu_after.clone(),
    })
}

/// Residual refinement trajectory: x_{k+1} = x_k - f(x_k) / steps.
/// Returns the full trajectory [x_0, x_1, ..., x_steps].
pub fn run_refinement(
    model: &QuantModel,
    x0: &Tensor,
    steps: usize,
    mode: ForwardMode,
) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(Error::arg("refinement needs at least one step"));
    }
    let inv = 1.0 / steps as f64;
    let mut traj = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    traj.push(x.clone());
    for _ in 0..steps {
        let f = model.forward(&x, mode)?;
        x = x.zip(&f, |a, b| a - b * inv)?;
        traj.push(x.clone());
    }
    Ok(traj)
}

impl QuantModel {
    pub fn forward(&self, x: &Tensor, mode: ForwardMode) -> Result<Tensor> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                ModelLayer::Fp(l) => l.forward(&cur)?,
                ModelLayer::Quant(l) => l.forward(&cur, mode)?,
            };
            if self.silu_after[i] {
                cur = silu(&cur);
            }
        }
        Ok(cur)
    }

    /// Forward that also returns each layer's input and pre-activation
    /// output (needed by the calibration-driven stages).
    pub fn forward_collect(
        &self,
        x: &Tensor,
        mode: ForwardMode,
    ) -> Result<(Tensor, Vec<Tensor>, Vec<Tensor>)> {
        let mut cur = x.clone();
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(cur.clone());
            cur = match layer {
                ModelLayer::Fp(l) => l.forward(&cur)?,
                ModelLayer::Quant(l) => l.forward(&cur, mode)?,
            };
            outputs.push(cur.clone());
            if self.silu_after[i] {
                cur = silu(&cur);
            }
        }
        Ok((cur, inputs, outputs))
    }

    /// Indices of the quantized layers, in forward order.
    pub fn quant_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                ModelLayer::Quant(_) => Some(i),
                ModelLayer::Fp(_) => None,
            })
            .collect()
    }

    pub fn quant_mut(&mut self, idx: usize) -> Result<&mut QLayer> {
        match self.layers.get_mut(idx) {
            Some(ModelLayer::Quant(l)) => Ok(l),
            Some(ModelLayer::Fp(_)) => {
                Err(Error::state(format!("layer {} is not quantized", idx)))
            }
            None => Err(Error::arg(format!("no layer {}", idx))),
        }
    }

    pub fn quant_ref(&self, idx: usize) -> Result<&QLayer> {
        match self.layers.get(idx) {
            Some(ModelLayer::Quant(l)) => Ok(l),
            Some(ModelLayer::Fp(_)) => {
                Err(Error::state(format!("layer {} is not quantized", idx)))
            }
            None => Err(Error::arg(format!("no layer {}", idx))),
        }
    }

    /// Tape forward. `params[i]` supplies the trainable (l1, l2, a_bias)
    /// leaves for the quantized layer at model index i; quantized layers
    /// without an entry use their stored values as constants.
    pub fn forward_tape(
        &self,
        tape: &Tape,
        x: &Tensor,
        params: &HashMap<usize, (Option<Var>, Option<Var>, Var)>,
        round: bool,
    ) -> Result<Var> {
        let mut cur = tape.constant(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                ModelLayer::Fp(l) => fp_layer_tape(tape, l, &cur)?,
                ModelLayer::Quant(l) => match params.get(&i) {
                    Some((l1, l2, ab)) => {
                        l.forward_tape(&cur, l1.as_ref(), l2.as_ref(), ab, round)?
                    }
                    None => {
                        let l1 = l.l1.clone().map(|t| tape.constant(t));
                        let l2 = l.l2.clone().map(|t| tape.constant(t));
                        let ab = tape.constant(l.a_bias.clone());
                        l.forward_tape(&cur, l1.as_ref(), l2.as_ref(), &ab, round)?
                    }
                },
            };
            if self.silu_after[i] {
                cur = cur.silu();
            }
        }
        Ok(cur)
    }
}

fn fp_layer_tape(tape: &Tape, l: &FpLayer, x: &Var) -> Result<Var> {
    let w = tape.constant(l.weight.clone());
    let xshape = x.shape();
    let (t, h, wd) = (xshape[0], xshape[2], xshape[3]);
    match &l.kind {
        LayerKind::Linear { .. } => {
            let rows = x.video_to_rows()?;
            let mut out = rows.matmul_nt(&w)?;
            if let Some(b) = &l.bias {
                out = out.add_bias(&tape.constant(b.clone()))?;
            }
            out.rows_to_video(t, h, wd)
        }
        LayerKind::Conv2d(spec) | LayerKind::Conv3d(spec) => {
            let (ot, oh, ow) = spec.out_dims(t, h, wd)?;
            let wf = tape.constant(linalg::flatten_conv_weight(&l.weight, spec)?);
            let cols = x.im2col(spec)?;
            let mut out = cols.matmul_nt(&wf)?;
            if let Some(b) = &l.bias {
                out = out.add_bias(&tape.constant(b.clone()))?;
            }
            out.rows_to_video(ot, oh, ow)
        }
    }
}
