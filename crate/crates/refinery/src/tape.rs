//! Dynamic tape for reverse-mode differentiation.
//!
//! Every value (leaf or op output) lives in an arena owned by the tape; ops
//! are recorded in forward order and replayed in reverse by [`Tape::backward`].
//! A value's gradient accumulates into its tensor's grad buffer, so running
//! backward twice without resetting doubles every gradient. The tape and its
//! tensors are confined to one execution context: the type is `Send` but has
//! no interior mutability, so it can move between threads, never be shared.

use crate::error::{Error, Result};
use crate::ops;
use crate::ops::ConvSpec;
use crate::tensor::{MaskTensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub(crate) usize);

pub(crate) enum OpRecord {
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: Option<ValueId>,
        spec: ConvSpec,
        out: ValueId,
    },
    MaxPool2d {
        x: ValueId,
        out: ValueId,
        argmax: Vec<usize>,
    },
    Relu {
        x: ValueId,
        out: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
        out: ValueId,
    },
    BilinearResize {
        x: ValueId,
        out: ValueId,
    },
    Crop {
        x: ValueId,
        out: ValueId,
    },
    SoftmaxXent {
        scores: ValueId,
        out: ValueId,
        target: MaskTensor,
        ignore: u8,
        scored: usize,
    },
}

impl OpRecord {
    fn out_id(&self) -> ValueId {
        match self {
            OpRecord::Conv2d { out, .. }
            | OpRecord::MaxPool2d { out, .. }
            | OpRecord::Relu { out, .. }
            | OpRecord::Add { out, .. }
            | OpRecord::BilinearResize { out, .. }
            | OpRecord::Crop { out, .. }
            | OpRecord::SoftmaxXent { out, .. } => *out,
        }
    }
}

#[derive(Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<OpRecord>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Register a leaf value. Gradient flows into it iff `requires_grad` is
    /// set on the tensor.
    pub fn leaf(&mut self, t: Tensor) -> ValueId {
        let id = ValueId(self.tensors.len());
        self.tensors.push(t);
        id
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Loss convenience: the single element of a scalar value.
    pub fn scalar(&self, id: ValueId) -> f64 {
        debug_assert_eq!(self.tensors[id.0].numel(), 1);
        self.tensors[id.0].data()[0]
    }

    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.tensors[id.0].grad()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub(crate) fn needs_grad(&self, id: ValueId) -> bool {
        self.tensors[id.0].requires_grad()
    }

    pub(crate) fn push_value(&mut self, mut t: Tensor, needs: bool) -> ValueId {
        t.set_requires_grad(needs);
        t.zero_grad();
        self.leaf(t)
    }

    pub(crate) fn push_op(&mut self, op: OpRecord) {
        debug_assert!(
            {
                let out = op.out_id();
                self.ops.iter().all(|o| o.out_id() != out)
            },
            "every value is produced by at most one op"
        );
        self.ops.push(op);
    }

    /// Reverse sweep from a scalar root, seeding d(root)/d(root) = 1.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        if self.tensors[root.0].numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "root must be scalar, got shape {}",
                    self.tensors[root.0].shape()
                ),
            ));
        }
        self.backward_seeded(root, &[1.0])
    }

    /// Reverse sweep with an explicit output cotangent (used by the gradient
    /// checker to project tensor-valued outputs to a scalar).
    pub fn backward_seeded(&mut self, root: ValueId, seed: &[f64]) -> Result<()> {
        if seed.len() != self.tensors[root.0].numel() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed length {} does not match root numel {}",
                    seed.len(),
                    self.tensors[root.0].numel()
                ),
            ));
        }
        // Per-call flow buffers; persistent accumulation happens in each
        // tensor's grad field as the flow for that value is finalized.
        let mut flow: Vec<Option<Vec<f64>>> = (0..self.tensors.len()).map(|_| None).collect();
        flow[root.0] = Some(seed.to_vec());

        // Split borrows: ops are read-only during the sweep.
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            let out = op.out_id();
            let Some(gout) = flow[out.0].take() else {
                continue;
            };
            if self.tensors[out.0].requires_grad() {
                self.tensors[out.0].accumulate_grad(&gout);
            }
            match op {
                OpRecord::Conv2d { x, w, b, spec, out: _ } => {
                    let need_x = self.needs_grad(*x);
                    let need_w = self.needs_grad(*w);
                    let need_b = b.map(|i| self.needs_grad(i));
                    let mut gx = need_x.then(|| vec![0.0; self.tensors[x.0].numel()]);
                    let mut gw = need_w.then(|| vec![0.0; self.tensors[w.0].numel()]);
                    let mut gb = match (b, need_b) {
                        (Some(bid), Some(true)) => Some(vec![0.0; self.tensors[bid.0].numel()]),
                        _ => None,
                    };
                    ops::conv2d_backward(
                        &self.tensors[x.0],
                        &self.tensors[w.0],
                        spec,
                        &gout,
                        ops::ConvGrads {
                            gx: gx.as_deref_mut(),
                            gw: gw.as_deref_mut(),
                            gb: gb.as_deref_mut(),
                        },
                    );
                    if let Some(gx) = gx {
                        add_flow(&mut flow, *x, gx);
                    }
                    if let Some(gw) = gw {
                        add_flow(&mut flow, *w, gw);
                    }
                    if let (Some(bid), Some(gb)) = (b, gb) {
                        add_flow(&mut flow, *bid, gb);
                    }
                }
                OpRecord::MaxPool2d { x, argmax, out: _ } => {
                    if self.needs_grad(*x) {
                        let mut gx = vec![0.0; self.tensors[x.0].numel()];
                        ops::maxpool2d_backward(argmax, &gout, &mut gx);
                        add_flow(&mut flow, *x, gx);
                    }
                }
                OpRecord::Relu { x, out: _ } => {
                    if self.needs_grad(*x) {
                        let mut gx = vec![0.0; self.tensors[x.0].numel()];
                        ops::relu_backward(&self.tensors[x.0], &gout, &mut gx);
                        add_flow(&mut flow, *x, gx);
                    }
                }
                OpRecord::Add { a, b, out: _ } => {
                    if self.needs_grad(*a) {
                        add_flow_ref(&mut flow, *a, &gout);
                    }
                    if self.needs_grad(*b) {
                        add_flow_ref(&mut flow, *b, &gout);
                    }
                }
                OpRecord::BilinearResize { x, out } => {
                    if self.needs_grad(*x) {
                        let os = self.tensors[out.0].shape();
                        let mut gx = vec![0.0; self.tensors[x.0].numel()];
                        ops::bilinear_backward(
                            self.tensors[x.0].shape(),
                            os.h,
                            os.w,
                            &gout,
                            &mut gx,
                        );
                        add_flow(&mut flow, *x, gx);
                    }
                }
                OpRecord::Crop { x, out } => {
                    if self.needs_grad(*x) {
                        let os = self.tensors[out.0].shape();
                        let mut gx = vec![0.0; self.tensors[x.0].numel()];
                        ops::crop_backward(self.tensors[x.0].shape(), os.h, os.w, &gout, &mut gx);
                        add_flow(&mut flow, *x, gx);
                    }
                }
                OpRecord::SoftmaxXent {
                    scores,
                    target,
                    ignore,
                    scored,
                    out: _,
                } => {
                    if self.needs_grad(*scores) {
                        let mut gx = vec![0.0; self.tensors[scores.0].numel()];
                        ops::softmax_xent_backward(
                            &self.tensors[scores.0],
                            target,
                            *ignore,
                            *scored,
                            gout[0],
                            &mut gx,
                        );
                        add_flow(&mut flow, *scores, gx);
                    }
                }
            }
        }
        self.ops = ops;

        // Leaves are never an op output; finalize their accumulation here.
        for (i, f) in flow.iter().enumerate() {
            if let Some(g) = f {
                if self.tensors[i].requires_grad() {
                    self.tensors[i].accumulate_grad(g);
                }
            }
        }
        Ok(())
    }
}

fn add_flow(flow: &mut [Option<Vec<f64>>], id: ValueId, g: Vec<f64>) {
    match &mut flow[id.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn add_flow_ref(flow: &mut [Option<Vec<f64>>], id: ValueId, g: &[f64]) {
    match &mut flow[id.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn add_gradients_pass_through() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::filled(Shape::new(1, 1, 1, 2), 2.0).with_grad());
        let b = tape.leaf(Tensor::filled(Shape::new(1, 1, 1, 2), 5.0).with_grad());
        let y = tape.add(a, b).unwrap();
        tape.backward_seeded(y, &[1.0, 3.0]).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 3.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 3.0]);
    }

    // Chain of k adds of the same tensor accumulates k times the upstream
    // gradient; hand computation for k = 3: y = ((x + x) + x) so dy/dx = 3.
    #[test]
    fn repeated_operand_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 1, 1), 1.5).with_grad());
        let y = tape.add(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
        assert_eq!(tape.scalar(z), 4.5);
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 1, 1), 2.0).with_grad());
        let y = tape.relu(x);
        let z = tape.add(y, x).unwrap();
        tape.backward(z).unwrap();
        let first: Vec<f64> = tape.grad(x).unwrap().to_vec();
        tape.backward(z).unwrap();
        let second: Vec<f64> = tape.grad(x).unwrap().to_vec();
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(2.0 * a, *b);
        }
        // Interior values with requires_grad double as well.
        assert_eq!(tape.grad(y).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)).with_grad());
        let y = tape.relu(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn no_grad_leaves_stay_clean() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 1, 1), 3.0));
        let w = tape.leaf(Tensor::filled(Shape::new(1, 1, 1, 1), 4.0).with_grad());
        let y = tape.add(x, w).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[1.0]);
    }
}
