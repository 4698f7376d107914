//! Dense tensor type with reverse-mode automatic differentiation.
//!
//! Covers exactly the operations the rest of the crate needs: elementwise
//! arithmetic with singleton broadcasting, reductions, 2-D convolution with
//! sliding-patch norms, grouped channel max, shape plumbing, and a reverse
//! topological backward sweep. Values are stored as `f32`; reductions and
//! convolution inner loops accumulate in `f64`.

mod conv;
mod simd;
mod elementwise;
mod reduce;

pub use conv::{conv2d, conv_output_extent, maxout_channels, patch_norms};
pub(crate) use conv::for_each_patch_entry;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{HxError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&[f32])>;

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    /// Leaf flag; may be toggled between graph constructions to freeze
    /// parameters (evaluation and explanation skip their gradients).
    requires_grad: Cell<bool>,
    /// Gradient flows through this op node (some parent was active when the
    /// op was built). Leaves consult `requires_grad` instead.
    active: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Handle to a node of the computation graph. Cloning is cheap (`Rc`).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                active: false,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Result of an op. `backward` receives the output gradient and pushes
    /// contributions into the parents via [`Tensor::accum_grad`].
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        let active = parents.iter().any(|p| p.is_active());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                active,
                parents: if active { parents } else { Vec::new() },
                backward: if active { Some(backward) } else { None },
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if numel_of(shape) != data.len() {
            return Err(HxError::InvalidArgument(format!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(HxError::InvalidArgument(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    /// Leaf with gradient accumulation enabled (parameters, explained inputs).
    pub fn param_from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let t = Tensor::from_vec(shape, data)?;
        let values = t.to_vec();
        Ok(Tensor::leaf(t.inner.shape.clone(), values, true))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![0.0; numel_of(shape)], false)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![value; numel_of(shape)], false)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::leaf(vec![1], vec![value], false)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggle gradient accumulation on a leaf. Takes effect for graphs
    /// built after the call.
    pub fn set_requires_grad(&self, value: bool) {
        debug_assert!(self.inner.backward.is_none(), "only leaves are toggled");
        self.inner.requires_grad.set(value);
    }

    pub(crate) fn is_active(&self) -> bool {
        if self.inner.backward.is_none() {
            self.inner.requires_grad.get()
        } else {
            self.inner.active
        }
    }

    pub(crate) fn data_ref(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    /// In-place data mutation. Single-writer contract: only the optimizer
    /// (or checkpoint loading) updates parameter data between forwards.
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accum_grad(&self, contribution: &[f32]) {
        debug_assert_eq!(contribution.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Same values, treated as a constant under differentiation.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.inner.shape.clone(), self.to_vec(), false)
    }

    /// Reverse topological sweep from a one-element tensor. Gradients
    /// accumulate additively across fan-out and across repeated calls;
    /// callers reset leaves with [`Tensor::zero_grad`] between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(HxError::InvalidArgument(format!(
                "backward requires a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.is_active() {
            return Ok(());
        }
        self.accum_grad(&[1.0]);

        // Node ids increase monotonically with creation and every parent is
        // created before its children, so descending id order is a valid
        // reverse topological order.
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(node) = stack.pop() {
            if !node.is_active() || !seen.insert(node.inner.id) {
                continue;
            }
            for p in &node.inner.parents {
                stack.push(p.clone());
            }
            nodes.push(node);
        }
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        for node in &nodes {
            let guard = node.inner.grad.borrow();
            let Some(gy) = guard.as_ref() else { continue };
            if let Some(backward) = &node.inner.backward {
                backward(gy);
            }
        }
        Ok(())
    }

    /// New view of the same values with a different shape.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if numel_of(new_shape) != self.numel() {
            return Err(HxError::ShapeMismatch {
                left: self.shape().to_vec(),
                right: new_shape.to_vec(),
                context: "reshape".into(),
            });
        }
        let parent = self.clone();
        Ok(Tensor::from_op(
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |gy| {
                if parent.is_active() {
                    parent.accum_grad(gy);
                }
            }),
        ))
    }

    /// One element as a `[1]` tensor; backward scatters into that position.
    pub fn select_item(&self, index: &[usize]) -> Result<Tensor> {
        if index.len() != self.shape().len() {
            return Err(HxError::InvalidArgument(format!(
                "index rank {} does not match tensor rank {}",
                index.len(),
                self.shape().len()
            )));
        }
        let mut flat = 0usize;
        for (i, (&ix, &dim)) in index.iter().zip(self.shape()).enumerate() {
            if ix >= dim {
                return Err(HxError::InvalidArgument(format!(
                    "index {ix} out of range for axis {i} with extent {dim}"
                )));
            }
            flat = flat * dim + ix;
        }
        let value = self.data_ref()[flat];
        let parent = self.clone();
        let n = self.numel();
        Ok(Tensor::from_op(
            vec![1],
            vec![value],
            vec![self.clone()],
            Box::new(move |gy| {
                if parent.is_active() {
                    let mut buf = vec![0.0f32; n];
                    buf[flat] = gy[0];
                    parent.accum_grad(&buf);
                }
            }),
        ))
    }
}

/// Concatenate along `axis`; all other extents must match.
pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
    if tensors.is_empty() {
        return Err(HxError::InvalidArgument("concat of zero tensors".into()));
    }
    let rank = tensors[0].shape().len();
    if axis >= rank {
        return Err(HxError::InvalidArgument(format!(
            "concat axis {axis} out of range for rank {rank}"
        )));
    }
    for t in &tensors[1..] {
        if t.shape().len() != rank
            || t.shape()
                .iter()
                .zip(tensors[0].shape())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(HxError::ShapeMismatch {
                left: tensors[0].shape().to_vec(),
                right: t.shape().to_vec(),
                context: format!("concat along axis {axis}"),
            });
        }
    }

    let mut out_shape = tensors[0].shape().to_vec();
    let axis_extents: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
    out_shape[axis] = axis_extents.iter().sum();

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let total_axis = out_shape[axis];

    let mut data = vec![0.0f32; numel_of(&out_shape)];
    let mut offset = 0usize;
    for t in tensors {
        let src = t.data_ref();
        let a = t.shape()[axis];
        for o in 0..outer {
            let dst_start = (o * total_axis + offset) * inner;
            let src_start = o * a * inner;
            data[dst_start..dst_start + a * inner]
                .copy_from_slice(&src[src_start..src_start + a * inner]);
        }
        offset += a;
    }

    let parents: Vec<Tensor> = tensors.to_vec();
    let parents_cl = parents.clone();
    Ok(Tensor::from_op(
        out_shape,
        data,
        parents,
        Box::new(move |gy| {
            let mut offset = 0usize;
            for (t, &a) in parents_cl.iter().zip(&axis_extents) {
                if t.is_active() {
                    let mut slice = vec![0.0f32; t.numel()];
                    for o in 0..outer {
                        let src_start = (o * total_axis + offset) * inner;
                        let dst_start = o * a * inner;
                        slice[dst_start..dst_start + a * inner]
                            .copy_from_slice(&gy[src_start..src_start + a * inner]);
                    }
                    t.accum_grad(&slice);
                }
                offset += a;
            }
        }),
    ))
}
