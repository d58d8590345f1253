//! Tape-based reverse-mode differentiation over the engine's op set:
//! matmul, convolution lowering, the Hadamard rotation, elementwise
//! arithmetic, SiLU, fake quantization (STE rule), and mean-square
//! reductions. No higher-order derivatives.
//!
//! Recording and backward are single-threaded per tape; a tape lives for
//! one forward/backward pass.

use crate::error::{Error, Result};
use crate::linalg::{self, ConvSpec};
use crate::quant::QuantParams;
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::rc::Rc;

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
    requires_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

/// Gradient tape. Clone is shallow; all clones share the same graph.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                backward_done: false,
            })),
        }
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = parents.iter().any(|&p| inner.nodes[p].requires_grad);
        inner.nodes.push(Node {
            value,
            parents,
            back,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    /// A trainable leaf: gradients will be accumulated for it.
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            parents: vec![],
            back: None,
            requires_grad: true,
        });
        Var {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    /// A non-trainable input: no gradient is propagated into it.
    pub fn constant(&self, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            parents: vec![],
            back: None,
            requires_grad: false,
        });
        Var {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    idx: usize,
}

impl Var {
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx].value.shape().to_vec()
    }

    /// Gradient populated by [`Var::backward`]; None before backward or for
    /// paths gradient propagation skipped.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.inner.borrow().grads.get(self.idx).cloned().flatten()
    }

    fn unary(
        &self,
        value: Tensor,
        back: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Var {
        self.tape.push(
            value,
            vec![self.idx],
            Some(Box::new(move |g| vec![back(g)])),
        )
    }

    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        let a = self.value();
        let b = rhs.value();
        let value = linalg::matmul(&a, &b)?;
        Ok(self.tape.push(
            value,
            vec![self.idx, rhs.idx],
            Some(Box::new(move |g| {
                let ga = linalg::matmul_nt(g, &b).expect("shape checked at forward");
                let gb = linalg::matmul(&linalg::transpose(&a).unwrap(), g)
                    .expect("shape checked at forward");
                vec![ga, gb]
            })),
        ))
    }

    /// `self · rhsᵀ` with `rhs` stored `[n×k]`.
    pub fn matmul_nt(&self, rhs: &Var) -> Result<Var> {
        let a = self.value();
        let b = rhs.value();
        let value = linalg::matmul_nt(&a, &b)?;
        Ok(self.tape.push(
            value,
            vec![self.idx, rhs.idx],
            Some(Box::new(move |g| {
                let ga = linalg::matmul(g, &b).expect("shape checked at forward");
                let gb = linalg::matmul(&linalg::transpose(g).unwrap(), &a)
                    .expect("shape checked at forward");
                vec![ga, gb]
            })),
        ))
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        let value = self.value().add(&rhs.value())?;
        Ok(self.tape.push(
            value,
            vec![self.idx, rhs.idx],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        let value = self.value().sub(&rhs.value())?;
        Ok(self.tape.push(
            value,
            vec![self.idx, rhs.idx],
            Some(Box::new(move |g| vec![g.clone(), g.scale(-1.0)])),
        ))
    }

    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        let a = self.value();
        let b = rhs.value();
        let value = a.zip(&b, |x, y| x * y)?;
        Ok(self.tape.push(
            value,
            vec![self.idx, rhs.idx],
            Some(Box::new(move |g| {
                vec![
                    g.zip(&b, |gi, bi| gi * bi).unwrap(),
                    g.zip(&a, |gi, ai| gi * ai).unwrap(),
                ]
            })),
        ))
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(self.value().scale(c), move |g| g.scale(c))
    }

    /// Broadcast-add a length-n bias to a `[rows×n]` matrix.
    pub fn add_bias(&self, bias: &Var) -> Result<Var> {
        let x = self.value();
        let b = bias.value();
        let (rows, n) = x.dims2()?;
        if b.len() != n {
            return Err(Error::dim(format!(
                "bias length {} != column count {}",
                b.len(),
                n
            )));
        }
        let mut out = x.clone();
        for r in 0..rows {
            for j in 0..n {
                out.data_mut()[r * n + j] += b.data()[j];
            }
        }
        Ok(self.tape.push(
            out,
            vec![self.idx, bias.idx],
            Some(Box::new(move |g| {
                let mut gb = vec![0.0; n];
                for r in 0..rows {
                    for j in 0..n {
                        gb[j] += g.data()[r * n + j];
                    }
                }
                vec![g.clone(), Tensor::new(vec![n], gb).unwrap()]
            })),
        ))
    }

    pub fn silu(&self) -> Var {
        let x = self.value();
        let value = x.map(|v| v / (1.0 + (-v).exp()));
        self.tape.push(
            value,
            vec![self.idx],
            Some(Box::new(move |g| {
                let dx = x.map(|v| {
                    let s = 1.0 / (1.0 + (-v).exp());
                    s * (1.0 + v * (1.0 - s))
                });
                vec![g.zip(&dx, |gi, di| gi * di).unwrap()]
            })),
        )
    }

    /// Signed Hadamard rotation along the last axis. Its backward applies
    /// the transpose (= inverse) rotation to the upstream gradient.
    pub fn fwht(&self, sign_seed: u64) -> Result<Var> {
        let value = linalg::fwht(&self.value(), sign_seed)?;
        Ok(self.unary(value, move |g| {
            linalg::fwht_inverse(g, sign_seed).expect("power-of-two checked at forward")
        }))
    }

    pub fn im2col(&self, spec: &ConvSpec) -> Result<Var> {
        let x = self.value();
        let (t, _, h, w) = x.dims4()?;
        let value = linalg::im2col(&x, spec)?;
        let spec = *spec;
        Ok(self.unary(value, move |g| {
            linalg::col2im(g, &spec, t, h, w).expect("shape checked at forward")
        }))
    }

    pub fn rows_to_video(&self, t: usize, h: usize, w: usize) -> Result<Var> {
        let value = linalg::rows_to_video(&self.value(), t, h, w)?;
        Ok(self.unary(value, move |g| {
            linalg::video_to_rows(g).expect("shape checked at forward")
        }))
    }

    pub fn video_to_rows(&self) -> Result<Var> {
        let x = self.value();
        let (t, _, h, w) = x.dims4()?;
        let value = linalg::video_to_rows(&x)?;
        Ok(self.unary(value, move |g| {
            linalg::rows_to_video(g, t, h, w).expect("shape checked at forward")
        }))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        let x = self.value();
        let old = x.shape().to_vec();
        let value = x.reshape(shape)?;
        Ok(self.unary(value, move |g| g.reshape(old.clone()).unwrap()))
    }

    /// Fake quantization with the straight-through estimator backward:
    /// upstream gradient passes where the pre-clip integer lies in [l, u],
    /// zero where clipped.
    ///
    /// With `round: false` the forward is the clip-only surrogate and the
    /// mask is its exact derivative (clip test without rounding); gradient
    /// checks difference that surrogate.
    pub fn fake_quant(&self, qp: &QuantParams, round: bool) -> Var {
        let x = self.value();
        let mask = if round { qp.ste_mask(&x) } else { qp.clip_mask(&x) };
        let value = if round {
            qp.fake_quant(&x)
        } else {
            qp.fake_quant_no_round(&x)
        };
        self.unary(value, move |g| g.zip(&mask, |gi, mi| gi * mi).unwrap())
    }

    /// Scalar mean of squared elements.
    pub fn mean_square(&self) -> Var {
        let x = self.value();
        let n = x.len() as f64;
        let value = Tensor::scalar(x.data().iter().map(|v| v * v).sum::<f64>() / n);
        self.unary(value, move |g| {
            let go = g.data()[0];
            x.map(|v| 2.0 * v * go / n)
        })
    }

    /// Scalar MSE against a constant target.
    pub fn mse_against(&self, target: &Tensor) -> Result<Var> {
        let x = self.value();
        if x.shape() != target.shape() {
            return Err(Error::dim(format!(
                "MSE shape mismatch {:?} vs {:?}",
                x.shape(),
                target.shape()
            )));
        }
        let n = x.len() as f64;
        let mse = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let t = target.clone();
        Ok(self.unary(Tensor::scalar(mse), move |g| {
            let go = g.data()[0];
            x.zip(&t, |a, b| 2.0 * (a - b) * go / n).unwrap()
        }))
    }

    /// Reverse pass from a scalar loss; populates gradients for every
    /// node on a grad-requiring path.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        if inner.backward_done {
            return Err(Error::state("backward already ran on this tape"));
        }
        if inner.nodes[self.idx].value.len() != 1 {
            return Err(Error::arg("backward requires a scalar loss"));
        }
        inner.backward_done = true;
        let n = inner.nodes.len();
        inner.grads = vec![None; n];
        inner.grads[self.idx] = Some(Tensor::scalar(1.0));
        for i in (0..=self.idx).rev() {
            let Some(g) = inner.grads[i].clone() else {
                continue;
            };
            let node = &inner.nodes[i];
            if !node.requires_grad && !node.parents.is_empty() {
                continue;
            }
            let Some(back) = &node.back else { continue };
            let parent_grads = back(&g);
            let parents = node.parents.clone();
            for (p, pg) in parents.into_iter().zip(parent_grads) {
                if !inner.nodes[p].requires_grad && inner.nodes[p].back.is_none() {
                    continue; // constant leaf
                }
                inner.grads[p] = Some(match inner.grads[p].take() {
                    Some(acc) => acc.add(&pg).expect("gradient shapes agree"),
                    None => pg,
                });
            }
        }
        Ok(())
    }
}
