//! Axis reductions: sum, mean, max (first-index tie-break), L2 norm.
//! Accumulation is in f64 regardless of the f32 storage.

use super::{numel_of, Tensor};
use crate::error::{HxError, Result};

fn check_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    if axes.is_empty() {
        return Err(HxError::InvalidArgument(
            "reduction over an empty axis list".into(),
        ));
    }
    let mut seen = vec![false; shape.len()];
    for &ax in axes {
        if ax >= shape.len() {
            return Err(HxError::InvalidArgument(format!(
                "reduction axis {ax} out of range for rank {}",
                shape.len()
            )));
        }
        if seen[ax] {
            return Err(HxError::InvalidArgument(format!(
                "duplicate reduction axis {ax}"
            )));
        }
        seen[ax] = true;
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axes: &[usize], keepdim: bool) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for (ax, &d) in shape.iter().enumerate() {
        if axes.contains(&ax) {
            if keepdim {
                out.push(1);
            }
        } else {
            out.push(d);
        }
    }
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// For every input flat offset (ascending), yields the output slot it
/// reduces into.
fn for_each_input(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    // output stride per input axis; 0 on reduced axes
    let mut out_strides = vec![0usize; rank];
    let mut acc = 1usize;
    for ax in (0..rank).rev() {
        if !axes.contains(&ax) {
            out_strides[ax] = acc;
            acc *= shape[ax];
        }
    }
    let total = numel_of(shape);
    let mut idx = vec![0usize; rank];
    let mut out = 0usize;
    for i in 0..total {
        f(i, out);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            out += out_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            out -= out_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

impl Tensor {
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        check_axes(self.shape(), axes)?;
        let out_shape = reduced_shape(self.shape(), axes, keepdim);
        let mut acc = vec![0.0f64; numel_of(&out_shape)];
        {
            let xv = self.data_ref();
            for_each_input(self.shape(), axes, |i, o| acc[o] += xv[i] as f64);
        }
        let data: Vec<f32> = acc.iter().map(|&v| v as f32).collect();
        let parent = self.clone();
        let shape = self.shape().to_vec();
        let axes_cl = axes.to_vec();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |gy| {
                if !parent.is_active() {
                    return;
                }
                let mut gx = vec![0.0f32; parent.numel()];
                for_each_input(&shape, &axes_cl, |i, o| gx[i] = gy[o]);
                parent.accum_grad(&gx);
            }),
        ))
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        check_axes(self.shape(), axes)?;
        let count: usize = axes.iter().map(|&ax| self.shape()[ax]).product();
        let sum = self.sum_axes(axes, keepdim)?;
        Ok(sum.mul_scalar(1.0 / count as f32))
    }

    /// Max over one axis; gradient routes to the first maximal element
    /// (ties broken by lowest index along the axis).
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let axes = [axis];
        check_axes(self.shape(), &axes)?;
        let out_shape = reduced_shape(self.shape(), &axes, keepdim);
        let out_n = numel_of(&out_shape);
        let mut best = vec![f32::NEG_INFINITY; out_n];
        let mut arg = vec![usize::MAX; out_n];
        {
            let xv = self.data_ref();
            for_each_input(self.shape(), &axes, |i, o| {
                if xv[i] > best[o] {
                    best[o] = xv[i];
                    arg[o] = i;
                }
            });
        }
        let parent = self.clone();
        Ok(Tensor::from_op(
            out_shape,
            best,
            vec![self.clone()],
            Box::new(move |gy| {
                if !parent.is_active() {
                    return;
                }
                let mut gx = vec![0.0f32; parent.numel()];
                for (o, &i) in arg.iter().enumerate() {
                    gx[i] += gy[o];
                }
                parent.accum_grad(&gx);
            }),
        ))
    }

    /// Euclidean norm over the given axes. Zero slices get zero gradient.
    pub fn l2_norm_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        check_axes(self.shape(), axes)?;
        let out_shape = reduced_shape(self.shape(), axes, keepdim);
        let mut acc = vec![0.0f64; numel_of(&out_shape)];
        {
            let xv = self.data_ref();
            for_each_input(self.shape(), axes, |i, o| {
                acc[o] += (xv[i] as f64) * (xv[i] as f64)
            });
        }
        let norms: Vec<f32> = acc.iter().map(|&v| v.sqrt() as f32).collect();
        let parent = self.clone();
        let shape = self.shape().to_vec();
        let axes_cl = axes.to_vec();
        let norms_cl = norms.clone();
        Ok(Tensor::from_op(
            out_shape,
            norms,
            vec![self.clone()],
            Box::new(move |gy| {
                if !parent.is_active() {
                    return;
                }
                let xv = parent.data_ref();
                let mut gx = vec![0.0f32; parent.numel()];
                for_each_input(&shape, &axes_cl, |i, o| {
                    gx[i] = gy[o] * xv[i] / norms_cl[o].max(1e-30);
                });
                drop(xv);
                parent.accum_grad(&gx);
            }),
        ))
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean_axes(&axes, false)
    }
}
