//! Reverse-mode automatic differentiation on a tape of tensor ops.
//!
//! A `Tape` records every operation as a node holding its value and a
//! backward closure over cloned operand values. `backward` runs one
//! reverse sweep from a scalar loss and accumulates gradients for all
//! nodes, so any node pushed with `input` can serve as a trainable
//! parameter. Shape errors inside tape ops are programmer errors and
//! panic; fallible validation belongs to the plain tensor functions.

use std::cell::RefCell;

use crate::error::CoreError;
use crate::tensor::{self, Tensor};

type BackFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients keyed by tape node, produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, backward: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Record an input (parameter, activation, or constant).
    pub fn input(&self, t: Tensor) -> Var {
        self.push(t, vec![], None)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    // ── Elementwise binary ops (broadcasting) ───────────────────────

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = tensor::zip_broadcast(&va, &vb, |x, y| x + y).expect("add: bad shapes");
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                vec![g.reduce_to(&sa), g.reduce_to(&sb)]
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = tensor::zip_broadcast(&va, &vb, |x, y| x - y).expect("sub: bad shapes");
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                vec![g.reduce_to(&sa), g.scale(-1.0).reduce_to(&sb)]
            })),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = tensor::zip_broadcast(&va, &vb, |x, y| x * y).expect("mul: bad shapes");
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let ga = tensor::zip_broadcast(g, &vb, |g, y| g * y).unwrap();
                let gb = tensor::zip_broadcast(g, &va, |g, x| g * x).unwrap();
                vec![ga.reduce_to(va.shape()), gb.reduce_to(vb.shape())]
            })),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = tensor::zip_broadcast(&va, &vb, |x, y| x / y).expect("div: bad shapes");
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let ga = tensor::zip_broadcast(g, &vb, |g, y| g / y).unwrap();
                let num = tensor::zip_broadcast(g, &va, |g, x| g * x).unwrap();
                let gb = tensor::zip_broadcast(&num, &vb, |n, y| -n / (y * y)).unwrap();
                vec![ga.reduce_to(va.shape()), gb.reduce_to(vb.shape())]
            })),
        )
    }

    // ── Scalar and unary ops ────────────────────────────────────────

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, vec![a.0], Some(Box::new(|g| vec![g.clone()])))
    }

    pub fn mul_scalar(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, vec![a.0], Some(Box::new(move |g| vec![g.scale(s)])))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let y = self.value(a).map(f64::sqrt);
        let yc = y.clone();
        self.push(
            y,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![tensor::zip_broadcast(g, &yc, |g, y| 0.5 * g / y).unwrap()]
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let y = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        let yc = y.clone();
        self.push(
            y,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![tensor::zip_broadcast(g, &yc, |g, y| g * y * (1.0 - y)).unwrap()]
            })),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let y = self.value(a).map(f64::tanh);
        let yc = y.clone();
        self.push(
            y,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![tensor::zip_broadcast(g, &yc, |g, y| g * (1.0 - y * y)).unwrap()]
            })),
        )
    }

    /// Elementwise `max(x, lo)`. Subgradient 0 at the boundary.
    pub fn clamp_min(&self, a: Var, lo: f64) -> Var {
        let va = self.value(a);
        let out = va.map(|v| v.max(lo));
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![tensor::zip_broadcast(g, &va, |g, x| if x > lo { g } else { 0.0 }).unwrap()]
            })),
        )
    }

    /// Gaussian error linear unit, tanh approximation (smooth).
    pub fn gelu(&self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let x3 = self.mul(self.mul(a, a), a);
        let inner = self.add(a, self.mul_scalar(x3, 0.044715));
        let t = self.tanh(self.mul_scalar(inner, C));
        self.mul(self.mul_scalar(a, 0.5), self.add_scalar(t, 1.0))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = tensor::matmul(&va, &vb).expect("matmul: bad shapes");
        self.push(
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let ga = tensor::matmul(g, &vb.swap_last2()).unwrap().reduce_to(va.shape());
                let gb = tensor::matmul(&va.swap_last2(), g).unwrap().reduce_to(vb.shape());
                vec![ga, gb]
            })),
        )
    }

    // ── Softmax family (last axis) ──────────────────────────────────

    pub fn softmax_last(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let last = *shape.last().expect("softmax_last: rank 0");
        let flat = va.reshape(&[va.numel() / last, last]).unwrap();
        let y = tensor::softmax_rows(&flat)
            .expect("softmax_last: invalid input")
            .reshape(&shape)
            .unwrap();
        let yc = y.clone();
        let last_axis = shape.len() - 1;
        self.push(
            y,
            vec![a.0],
            Some(Box::new(move |g| {
                let gy = tensor::zip_broadcast(g, &yc, |g, y| g * y).unwrap();
                let s = gy.sum_axis(last_axis, true);
                let centered = tensor::zip_broadcast(g, &s, |g, s| g - s).unwrap();
                vec![tensor::zip_broadcast(&yc, &centered, |y, c| y * c).unwrap()]
            })),
        )
    }

    pub fn log_softmax_last(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let last = *shape.last().expect("log_softmax_last: rank 0");
        let rows = va.numel() / last;
        let mut out = vec![0.0; va.numel()];
        for r in 0..rows {
            let row = &va.data()[r * last..(r + 1) * last];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (dst, &v) in out[r * last..(r + 1) * last].iter_mut().zip(row) {
                *dst = v - lse;
            }
        }
        let y = Tensor::from_vec(shape.clone(), out).unwrap();
        let soft = y.map(f64::exp);
        let last_axis = shape.len() - 1;
        self.push(
            y,
            vec![a.0],
            Some(Box::new(move |g| {
                let s = g.sum_axis(last_axis, true);
                let scaled = tensor::zip_broadcast(&soft, &s, |p, s| p * s).unwrap();
                vec![tensor::zip_broadcast(g, &scaled, |g, q| g - q).unwrap()]
            })),
        )
    }

    // ── Reductions ──────────────────────────────────────────────────

    /// Sum of all entries, shape `[1]`.
    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = Tensor::scalar(va.sum());
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![Tensor::filled(&shape, g.data()[0])]
            })),
        )
    }

    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = va.sum_axis(axis, true);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| vec![g.broadcast_to(&shape).unwrap()])),
        )
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let n = shape[axis] as f64;
        let out = va.mean_axis(axis, true);
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g.broadcast_to(&shape).unwrap().scale(1.0 / n)]
            })),
        )
    }

    // ── Shape ops ───────────────────────────────────────────────────

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let orig = va.shape().to_vec();
        let out = va.reshape(shape).expect("reshape: element count mismatch");
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| vec![g.reshape(&orig).unwrap()])),
        )
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let out = self.value(a).permute(axes);
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| vec![g.permute(&inverse)])),
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        assert!(axis < shape.len() && start + len <= shape[axis], "narrow: out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axdim = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axdim + start) * inner;
            out.extend_from_slice(&va.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::from_vec(out_shape, out).unwrap();
        self.push(
            out,
            vec![a.0],
            Some(Box::new(move |g| {
                let mut full = Tensor::zeros(&shape);
                for o in 0..outer {
                    let dst = (o * axdim + start) * inner;
                    let src = o * len * inner;
                    full.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![full]
            })),
        )
    }

    /// Concatenate along `axis`.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat: no parts");
        let values: Vec<Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let first = values[0].shape().to_vec();
        let mut lens = Vec::with_capacity(values.len());
        let mut total = 0usize;
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), first.len(), "concat: rank mismatch");
            for (ax, (&d, &e)) in s.iter().zip(&first).enumerate() {
                assert!(ax == axis || d == e, "concat: off-axis shape mismatch");
            }
            lens.push(s[axis]);
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first;
        out_shape[axis] = total;
        let mut out = vec![0.0; outer * total * inner];
        for o in 0..outer {
            let mut written = 0usize;
            for (v, &len) in values.iter().zip(&lens) {
                let src = o * len * inner;
                let dst = (o * total + written) * inner;
                out[dst..dst + len * inner].copy_from_slice(&v.data()[src..src + len * inner]);
                written += len;
            }
        }
        let out = Tensor::from_vec(out_shape, out).unwrap();
        self.push(
            out,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g| {
                let mut grads = Vec::with_capacity(lens.len());
                let mut offset = 0usize;
                for &len in &lens {
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        part.extend_from_slice(&g.data()[src..src + len * inner]);
                    }
                    let mut shape = g.shape().to_vec();
                    shape[axis] = len;
                    grads.push(Tensor::from_vec(shape, part).unwrap());
                    offset += len;
                }
                grads
            })),
        )
    }

    // ── Reverse sweep ───────────────────────────────────────────────

    /// Backpropagate from a scalar loss. Panics if `loss` is not a
    /// single-element tensor.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.numel(),
            1,
            "backward: loss must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(Tensor::filled(nodes[loss.0].value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[id].clone() else { continue };
            let pgrads = bw(&g);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(pgrads) {
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape());
                match &mut grads[pid] {
                    Some(acc) => {
                        for (av, sv) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *av += sv;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

// ── Gradient certification ──────────────────────────────────────────

/// Result of comparing analytic and central-difference gradients.
pub struct GradCheckReport {
    /// Relative error per input group: `|fd - an| / max(|fd|, |an|, tiny)`
    /// in the Euclidean norm over the whole group.
    pub per_input: Vec<f64>,
    pub max: f64,
}

/// Compare tape gradients of `f` against central differences at step `h`.
/// `f` must deterministically map the given inputs to a scalar loss.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport, CoreError>
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&tape, &vars);
    if tape.value(loss).numel() != 1 {
        return Err(CoreError::invalid("check_gradients: loss must be scalar"));
    }
    let grads = tape.backward(loss);

    let eval = |probe: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&tape, &vars);
        tape.value(loss).data()[0]
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut max = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut probe: Vec<Tensor> = inputs.to_vec();
        let fd = crate::tensor::finite_diff_grad(
            |theta| {
                probe[i] = Tensor::from_vec(input.shape().to_vec(), theta.to_vec()).unwrap();
                eval(&probe)
            },
            input.data(),
            h,
        )?;
        probe[i] = input.clone();
        let mut diff_sq = 0.0;
        let mut fd_sq = 0.0;
        let mut an_sq = 0.0;
        for (fv, av) in fd.iter().zip(analytic.data()) {
            diff_sq += (fv - av) * (fv - av);
            fd_sq += fv * fv;
            an_sq += av * av;
        }
        let denom = fd_sq.sqrt().max(an_sq.sqrt()).max(1e-12);
        let rel = diff_sq.sqrt() / denom;
        per_input.push(rel);
        max = max.max(rel);
    }
    Ok(GradCheckReport { per_input, max })
}
