//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Storage is a flat row-major `Vec<f64>`; every operation copies rather
//! than aliasing, which keeps the backward pass simple at desk scale.
//! A `Tensor` is a shared handle into a computation graph confined to one
//! thread; independent graphs may live on different threads. Gradients
//! accumulate additively into leaf tensors until `zero_grad` is called.

mod ops;

pub use ops::{raw_matmul, softmax_rows};

use crate::error::{Error, Result};
use crate::rng::Rng;
use ops::Op;
use rand::Rng as _;
use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub(crate) struct Inner {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Shared handle to a tensor node. Cloning is cheap and aliases storage.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<RefCell<Inner>>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

fn check_shape(shape: &[usize], data_len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != data_len {
        return Err(Error::Shape(format!(
            "shape {shape:?} implies {numel} elements, got {data_len}"
        )));
    }
    Ok(())
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        Tensor(Rc::new(RefCell::new(Inner {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        })))
    }

    /// Leaf tensor from explicit data. `requires_grad` is off; call
    /// [`Tensor::param`] or [`set_requires_grad`](Tensor::set_requires_grad)
    /// for trainables.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        ensure_finite(&data, "from_vec")?;
        Ok(Tensor::new(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        t.0.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel], false, Op::Leaf)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v], false, Op::Leaf)
    }

    /// Seeded normal(0, std) leaf.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| std * normal_sample(rng)).collect();
        Tensor::new(shape.to_vec(), data, false, Op::Leaf)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.0.borrow(), |inner| inner.data.as_slice())
    }

    pub fn data_clone(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// Scalar value; contract error when the tensor is not 1-element.
    pub fn item(&self) -> Result<f64> {
        let inner = self.0.borrow();
        if inner.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                inner.shape
            )));
        }
        Ok(inner.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Toggle trainability of a leaf. Interior graph nodes keep the flag
    /// they were recorded with.
    pub fn set_requires_grad(&self, value: bool) {
        self.0.borrow_mut().requires_grad = value;
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.borrow().op, Op::Leaf)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// In-place update of leaf data (optimizer steps, merges). The closure
    /// sees `(data, grad)`; grad is empty when absent.
    pub fn update_data<F: FnOnce(&mut [f64], &[f64])>(&self, f: F) {
        let mut inner = self.0.borrow_mut();
        let grad = inner.grad.take();
        f(&mut inner.data, grad.as_deref().unwrap_or(&[]));
        inner.grad = grad;
    }

    /// Detached copy: same data, fresh leaf, no grad.
    pub fn detach(&self) -> Tensor {
        let inner = self.0.borrow();
        Tensor::new(inner.shape.clone(), inner.data.clone(), false, Op::Leaf)
    }

    pub(crate) fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode backprop from a scalar loss. Gradients of interior
    /// nodes live only for the duration of the call; leaf gradients
    /// accumulate additively across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Topological order via iterative DFS keyed on node identity.
        let mut order: Vec<Tensor> = Vec::new();
        let mut state: HashMap<usize, bool> = HashMap::new(); // false = open, true = done
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, children_done)) = stack.pop() {
            let id = node.ptr_id();
            if children_done {
                state.insert(id, true);
                order.push(node);
                continue;
            }
            if state.contains_key(&id) {
                continue;
            }
            state.insert(id, false);
            stack.push((node.clone(), true));
            for parent in node.0.borrow().op.parents() {
                if parent.requires_grad() && !state.contains_key(&parent.ptr_id()) {
                    stack.push((parent, false));
                }
            }
        }

        // Transient gradient buffers for the whole traversal.
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.ptr_id(), vec![1.0]);

        for node in order.iter().rev() {
            let Some(gout) = grads.remove(&node.ptr_id()) else {
                continue;
            };
            let inner = node.0.borrow();
            if matches!(inner.op, Op::Leaf) {
                if inner.requires_grad {
                    drop(inner);
                    let mut inner = node.0.borrow_mut();
                    match &mut inner.grad {
                        Some(g) => {
                            for (gi, d) in g.iter_mut().zip(&gout) {
                                *gi += d;
                            }
                        }
                        None => inner.grad = Some(gout),
                    }
                    ensure_finite(inner.grad.as_ref().unwrap(), "backward gradient")?;
                }
                continue;
            }
            inner.op.backward(&gout, |parent, contribution| {
                if !parent.requires_grad() {
                    return;
                }
                let slot = grads
                    .entry(parent.ptr_id())
                    .or_insert_with(|| vec![0.0; parent.numel()]);
                for (s, c) in slot.iter_mut().zip(contribution) {
                    *s += c;
                }
            });
        }
        Ok(())
    }
}

pub(crate) fn ensure_finite(data: &[f64], context: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

/// Box–Muller draw; two uniforms per normal keeps the stream layout simple.
fn normal_sample(rng: &mut Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Max over entries of `|analytic − central| / (|analytic| + |central| + 1e-12)`
/// where `central` is the two-sided finite difference of `f` at `x` with
/// step `h`. `f` must be deterministic and return a scalar.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(Error::Contract("finite_diff_check requires h > 0".into()));
    }
    let shape = x.shape();
    let base = x.data_clone();

    let var = Tensor::param(&shape, base.clone())?;
    let loss = f(&var)?;
    if loss.numel() != 1 {
        return Err(Error::Contract(
            "finite_diff_check target must return a scalar".into(),
        ));
    }
    loss.backward()?;
    let analytic = var.grad().unwrap_or_else(|| vec![0.0; base.len()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let probe = Tensor::from_vec(&shape, data)?;
        let out = f(&probe)?;
        let v = out.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "finite_diff_check probe".into(),
            });
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let rel = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests;
