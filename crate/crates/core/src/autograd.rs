//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] lives for one forward/backward pass. Every operation records its
//! output value and, when any input requires a gradient, a closure mapping the
//! output gradient to input gradients. Values that do not require a gradient
//! never get a closure, so a [`Var::detach`] barrier yields exactly zero flow.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{self, Scalar, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Rc::new(value), Vec::new(), None, requires_grad)
    }

    /// A trainable input.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn push(
        &self,
        value: Rc<Tensor<T>>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn op(
        &self,
        inputs: &[Var<'_, T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        let parents = inputs.iter().map(|v| v.id).collect();
        let backward: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(Rc::new(value), parents, backward, requires_grad)
    }

    /// Differentiate the scalar `root` w.r.t. every variable recorded before it.
    ///
    /// The tape is left intact, so several roots can be differentiated in turn.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be a scalar");
        if !nodes[root.id].requires_grad {
            return Gradients { grads };
        }
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), T::one()));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, no gradient flow back through this point.
    pub fn detach(self) -> Self {
        let value = self.value();
        self.tape.push(value, Vec::new(), None, false)
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", v.shape());
        v.data()[0]
    }

    fn unary(
        self,
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> Self {
        self.tape.op(&[self], value, move |g| vec![Some(backward(g))])
    }

    pub fn add(self, other: Self) -> Self {
        let value = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape
            .op(&[self, other], value, |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Self) -> Self {
        let value = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape.op(&[self, other], value, |g| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        let value = a.zip_map(&b, |x, y| x * y);
        self.tape.op(&[self, other], value, move |g| {
            vec![Some(g.zip_map(&b, |g, y| g * y)), Some(g.zip_map(&a, |g, x| g * x))]
        })
    }

    /// Multiply by a constant `[1, H, W]` (or same-shaped) mask, broadcast over channels.
    pub fn mul_mask(self, mask: &Tensor<T>) -> Self {
        let mask = Rc::new(mask.clone());
        let value = broadcast_mul(&self.value(), &mask);
        self.unary(value, move |g| broadcast_mul(g, &mask))
    }

    pub fn scale(self, factor: T) -> Self {
        let value = self.value().map(|v| v * factor);
        self.unary(value, move |g| g.map(|v| v * factor))
    }

    pub fn add_scalar(self, offset: T) -> Self {
        let value = self.value().map(|v| v + offset);
        self.unary(value, |g| g.clone())
    }

    pub fn abs(self) -> Self {
        let x = self.value();
        let value = x.map(|v| v.abs());
        self.unary(value, move |g| {
            g.zip_map(&x, |g, x| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })
        })
    }

    pub fn square(self) -> Self {
        let x = self.value();
        let value = x.map(|v| v * v);
        let two = T::of(2.0);
        self.unary(value, move |g| g.zip_map(&x, |g, x| two * g * x))
    }

    pub fn relu(self) -> Self {
        self.leaky_relu(T::zero())
    }

    pub fn leaky_relu(self, slope: T) -> Self {
        let x = self.value();
        let value = x.map(|v| if v > T::zero() { v } else { v * slope });
        self.unary(value, move |g| {
            g.zip_map(&x, |g, x| if x > T::zero() { g } else { g * slope })
        })
    }

    pub fn tanh(self) -> Self {
        let y = Rc::new(self.value().map(|v| v.tanh()));
        let yc = y.clone();
        self.tape.op(&[self], (*y).clone(), move |g| {
            vec![Some(g.zip_map(&yc, |g, y| g * (T::one() - y * y)))]
        })
    }

    pub fn sum(self) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = Tensor::scalar(x.sum());
        self.unary(value, move |g| Tensor::full(&shape, g.data()[0]))
    }

    pub fn mean(self) -> Self {
        let n = self.value().len();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    /// Stack two `[C, H, W]` tensors along the channel axis.
    pub fn concat_channels(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        let (ca, h, w) = a.chw();
        let (cb, hb, wb) = b.chw();
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        let split = a.len();
        self.tape.op(
            &[self, other],
            Tensor::from_vec(&[ca + cb, h, w], data),
            move |g| {
                vec![
                    Some(Tensor::from_vec(&[ca, h, w], g.data()[..split].to_vec())),
                    Some(Tensor::from_vec(&[cb, h, w], g.data()[split..].to_vec())),
                ]
            },
        )
    }

    pub fn conv2d(self, weight: Self, bias: Option<Self>, stride: usize, pad: usize) -> Self {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let value = tensor::conv2d(&x, &w, b.as_deref(), stride, pad);
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = inputs.len() == 3;
        self.tape.op(&inputs, value, move |g| {
            let (dx, dw, db) = tensor::conv2d_backward(&x, &w, g, stride, pad);
            let mut out = vec![Some(dx), Some(dw)];
            if has_bias {
                out.push(Some(db));
            }
            out
        })
    }

    pub fn conv_transpose2d(
        self,
        weight: Self,
        bias: Option<Self>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Self {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let value = tensor::conv_transpose2d(&x, &w, b.as_deref(), stride, pad, out_pad);
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = inputs.len() == 3;
        self.tape.op(&inputs, value, move |g| {
            let (dx, dw, db) = tensor::conv_transpose2d_backward(&x, &w, g, stride, pad, out_pad);
            let mut out = vec![Some(dx), Some(dw)];
            if has_bias {
                out.push(Some(db));
            }
            out
        })
    }

    pub fn reflection_pad(self, pad: usize) -> Self {
        let value = tensor::reflection_pad(&self.value(), pad);
        self.unary(value, move |g| tensor::reflection_pad_backward(g, pad))
    }

    /// Per-channel normalization over the spatial extent with an affine scale/shift.
    pub fn instance_norm(self, scale: Self, shift: Self, eps: T) -> Self {
        let x = self.value();
        let (c, h, w) = x.chw();
        let n = h * w;
        let nt = T::of(n as f64);
        let gamma = scale.value();
        let beta = shift.value();
        assert_eq!(gamma.len(), c);
        assert_eq!(beta.len(), c);
        let mut xhat = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            let plane = &x.data()[ch * n..(ch + 1) * n];
            let mean = plane.iter().copied().sum::<T>() / nt;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[ch] = istd;
            for i in 0..n {
                let xh = (plane[i] - mean) * istd;
                xhat[ch * n + i] = xh;
                out[ch * n + i] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
        self.tape.op(
            &[self, scale, shift],
            Tensor::from_vec(&[c, h, w], out),
            move |g| {
                let mut dx = vec![T::zero(); c * n];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let gp = &g.data()[ch * n..(ch + 1) * n];
                    let xp = &xhat[ch * n..(ch + 1) * n];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for i in 0..n {
                        sum_g = sum_g + gp[i];
                        sum_gx = sum_gx + gp[i] * xp[i];
                    }
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    let k = gamma.data()[ch] * inv_std[ch] / nt;
                    for i in 0..n {
                        dx[ch * n + i] = k * (nt * gp[i] - sum_g - xp[i] * sum_gx);
                    }
                }
                vec![
                    Some(Tensor::from_vec(&[c, h, w], dx)),
                    Some(Tensor::from_vec(&[c], dgamma)),
                    Some(Tensor::from_vec(&[c], dbeta)),
                ]
            },
        )
    }
}

/// Elementwise product with a mask that is either same-shaped or `[1, H, W]`.
pub(crate) fn broadcast_mul<T: Scalar>(x: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
    if x.shape() == mask.shape() {
        return x.zip_map(mask, |a, b| a * b);
    }
    let (c, h, w) = x.chw();
    let (mc, mh, mw) = mask.chw();
    assert!(mc == 1 && mh == h && mw == w, "mask {:?} does not broadcast to {:?}", mask.shape(), x.shape());
    let plane = h * w;
    let mut out = x.clone();
    for ch in 0..c {
        for (v, &m) in out.data_mut()[ch * plane..(ch + 1) * plane]
            .iter_mut()
            .zip(mask.data())
        {
            *v = *v * m;
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn probe(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut s = seed;
        Tensor::from_vec(
            shape,
            (0..n)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
                })
                .collect(),
        )
    }

    /// Central-difference check of d(f)/d(input) for a scalar-valued graph builder.
    pub(crate) fn check_grad(
        input: Tensor<f64>,
        build: impl for<'t> Fn(Var<'t, f64>) -> Var<'t, f64>,
        tol: f64,
    ) {
        let tape = Tape::new();
        let x = tape.variable(input.clone());
        let y = build(x);
        let grads = tape.backward(y);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let h = 1e-6;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut p = input.clone();
                p.data_mut()[i] += delta;
                let t = Tape::new();
                build(t.constant(p)).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-3);
            assert!(err < tol, "index {i}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn conv_and_norm_gradients_match_finite_differences() {
        let w = probe(&[3, 2, 3, 3], 7);
        let b = probe(&[3], 8);
        check_grad(
            probe(&[2, 6, 6], 1),
            move |x| {
                let t = x.tape();
                let w = t.constant(w.clone());
                let b = t.constant(b.clone());
                let g = t.constant(Tensor::full(&[3], 1.3));
                let s = t.constant(Tensor::full(&[3], 0.2));
                x.reflection_pad(1)
                    .conv2d(w, Some(b), 2, 1)
                    .instance_norm(g, s, 1e-5)
                    .tanh()
                    .square()
                    .mean()
            },
            1e-5,
        );
    }

    #[test]
    fn transposed_conv_weight_gradient() {
        let x = probe(&[2, 3, 3], 3);
        check_grad(
            probe(&[2, 3, 3, 3], 4),
            move |w| {
                let t = w.tape();
                let xin = t.constant(x.clone());
                xin.conv_transpose2d(w, None, 2, 1, 1).leaky_relu(0.2).square().sum()
            },
            1e-6,
        );
    }

    #[test]
    fn detached_branch_receives_no_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.variable(probe(&[1, 2, 2], 5));
        let b = a.scale(3.0).detach();
        let loss = b.mul(b).sum().add(a.abs().sum());
        let grads = tape.backward(loss);
        assert!(grads.get(b).is_none());
        let ga = grads.get(a).unwrap();
        let va = a.value();
        for (g, v) in ga.data().iter().zip(va.data()) {
            assert_eq!(*g, v.signum());
        }
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        let tape = Tape::<f64>::new();
        let a = tape.variable(Tensor::from_vec(&[1, 1, 2], vec![1.0, -2.0]));
        let y = a.mul(a).add(a).sum();
        let g = tape.backward(y);
        assert_eq!(g.get(a).unwrap().data(), &[3.0, -3.0]);
    }
}
