use super::scalar::{gemm, MatRef};
use super::{GradVector, LayerSpec, NetworkSpec, NnError, ParamVector, Scalar, Shape, Tensor};

/// Activations recorded during a forward pass, reused by the backward pass.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    /// `acts[i]` is the input of layer `i`; the last entry is the network output.
    acts: Vec<Tensor<T>>,
    /// Flat argmax positions for max-pool layers.
    pool_argmax: Vec<Option<Vec<u32>>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("trace holds at least the input")
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.acts.pop().expect("trace holds at least the input")
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.acts[0]
    }
}

fn check_input<T: Scalar>(spec: &NetworkSpec, input: &Tensor<T>) -> Result<usize, NnError> {
    let dims = input.shape().dims();
    if dims.len() != spec.input_shape().rank() + 1 || &dims[1..] != spec.input_shape().dims() {
        return Err(NnError::InputShape { expected: spec.input_shape().clone(), actual: input.shape().clone() });
    }
    Ok(dims[0])
}

/// Evaluates the network on a batch whose shape is `[batch, ..input_shape]`.
pub fn forward<T: Scalar>(spec: &NetworkSpec, params: &ParamVector<T>, input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    Ok(forward_trace(spec, params, input)?.into_output())
}

/// Forward pass that keeps every intermediate activation.
pub fn forward_trace<T: Scalar>(spec: &NetworkSpec, params: &ParamVector<T>, input: &Tensor<T>) -> Result<Trace<T>, NnError> {
    spec.check_params(params.len())?;
    let batch = check_input(spec, input)?;
    let layout = spec.layout();
    let mut slots = layout.iter();
    let mut acts = Vec::with_capacity(spec.layers().len() + 1);
    let mut pool_argmax = Vec::with_capacity(spec.layers().len());
    acts.push(input.clone());
    for (i, layer) in spec.layers().iter().enumerate() {
        let x = &acts[i];
        let out_shape = spec.shape_at(i + 1).batched(batch)?;
        let mut argmax = None;
        let y = match *layer {
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                let slot = slots.next().expect("layout matches layers");
                conv_forward(
                    x,
                    &params[slot.weight_offset..slot.bias_offset],
                    &params[slot.bias_offset..slot.end()],
                    ConvDims::new(spec.shape_at(i), in_channels, out_channels, kernel),
                    out_shape,
                )
            }
            LayerSpec::Dense { inputs, outputs } => {
                let slot = slots.next().expect("layout matches layers");
                let w = &params[slot.weight_offset..slot.bias_offset];
                let b = &params[slot.bias_offset..slot.end()];
                let mut y = vec![T::zero(); batch * outputs];
                gemm(batch, inputs, outputs, MatRef::rows(x.data(), inputs), MatRef::rows_t(w, inputs), T::zero(), &mut y);
                for row in y.chunks_exact_mut(outputs) {
                    for (v, &bb) in row.iter_mut().zip(b) {
                        *v += bb;
                    }
                }
                Tensor::from_parts(out_shape, y)
            }
            LayerSpec::MaxPool2d { size } => {
                let (y, idx) = maxpool_forward(x, size, spec.shape_at(i), out_shape);
                argmax = Some(idx);
                y
            }
            LayerSpec::Relu => {
                let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
                Tensor::from_parts(out_shape, data)
            }
            LayerSpec::Flatten => Tensor::from_parts(out_shape, x.data().to_vec()),
            LayerSpec::SoftmaxOutput => {
                let w = x.row_len();
                let mut data = x.data().to_vec();
                for row in data.chunks_exact_mut(w) {
                    softmax_in_place(row);
                }
                Tensor::from_parts(out_shape, data)
            }
        };
        if let Some(pos) = y.data().iter().position(|v| !v.is_finite()) {
            return Err(NnError::NumericLayer { layer: i, kind: *layer, index: pos });
        }
        pool_argmax.push(argmax);
        acts.push(y);
    }
    Ok(Trace { acts, pool_argmax })
}

/// Exact reverse-mode gradients for a given upstream gradient on the output.
///
/// The forward pass is recomputed internally.
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    input: &Tensor<T>,
    output_grad: &Tensor<T>,
) -> Result<(GradVector<T>, Tensor<T>), NnError> {
    let trace = forward_trace(spec, params, input)?;
    let (g, gx) = backward_trace(spec, params, &trace, output_grad, true)?;
    Ok((g, gx.expect("input gradient requested")))
}

/// Backward pass reusing a recorded [`Trace`]. The input gradient is only
/// materialised when `want_input_grad` is set.
pub fn backward_trace<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamVector<T>,
    trace: &Trace<T>,
    output_grad: &Tensor<T>,
    want_input_grad: bool,
) -> Result<(GradVector<T>, Option<Tensor<T>>), NnError> {
    spec.check_params(params.len())?;
    if output_grad.shape() != trace.output().shape() {
        return Err(NnError::OutputGradShape {
            expected: trace.output().shape().clone(),
            actual: output_grad.shape().clone(),
        });
    }
    let batch = trace.input().batch();
    let layout = spec.layout();
    let mut slot_iter = layout.iter().rev();
    let mut grads = vec![T::zero(); spec.param_count()];
    let mut g = output_grad.data().to_vec();

    for (i, layer) in spec.layers().iter().enumerate().rev() {
        let x = &trace.acts[i];
        let y = &trace.acts[i + 1];
        let need_dx = want_input_grad || i > 0;
        g = match *layer {
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                let slot = slot_iter.next().expect("layout matches layers");
                let (gw, gb) = grads[slot.weight_offset..slot.end()].split_at_mut(slot.weight_len());
                conv_backward(
                    x,
                    &params[slot.weight_offset..slot.bias_offset],
                    &g,
                    ConvDims::new(spec.shape_at(i), in_channels, out_channels, kernel),
                    gw,
                    gb,
                    need_dx,
                )
            }
            LayerSpec::Dense { inputs, outputs } => {
                let slot = slot_iter.next().expect("layout matches layers");
                let w = &params[slot.weight_offset..slot.bias_offset];
                let (gw, gb) = grads[slot.weight_offset..slot.end()].split_at_mut(slot.weight_len());
                gemm(outputs, batch, inputs, MatRef::rows_t(&g, outputs), MatRef::rows(x.data(), inputs), T::zero(), gw);
                for row in g.chunks_exact(outputs) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                if need_dx {
                    let mut dx = vec![T::zero(); batch * inputs];
                    gemm(batch, outputs, inputs, MatRef::rows(&g, outputs), MatRef::rows(w, inputs), T::zero(), &mut dx);
                    dx
                } else {
                    Vec::new()
                }
            }
            LayerSpec::MaxPool2d { .. } => {
                let idx = trace.pool_argmax[i].as_ref().expect("pool layer records argmax");
                let mut dx = vec![T::zero(); x.data().len()];
                for (&j, &v) in idx.iter().zip(&g) {
                    dx[j as usize] += v;
                }
                dx
            }
            LayerSpec::Relu => x
                .data()
                .iter()
                .zip(&g)
                .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                .collect(),
            LayerSpec::Flatten => g,
            LayerSpec::SoftmaxOutput => {
                let w = y.row_len();
                let mut dx = g;
                for (drow, yrow) in dx.chunks_exact_mut(w).zip(y.data().chunks_exact(w)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (d, &p) in drow.iter_mut().zip(yrow) {
                        *d = p * (*d - dot);
                    }
                }
                dx
            }
        };
    }
    let input_grad = if want_input_grad {
        Some(Tensor::from_parts(trace.input().shape().clone(), g))
    } else {
        None
    };
    Ok((GradVector(grads), input_grad))
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

#[derive(Clone, Copy)]
struct ConvDims {
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn new(input: &Shape, cin: usize, cout: usize, k: usize) -> Self {
        let d = input.dims();
        ConvDims { cin, cout, k, h: d[1], w: d[2], oh: d[1] - k + 1, ow: d[2] - k + 1 }
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Scalar>(x: &[T], d: ConvDims, cols: &mut [T]) {
    let p = d.positions();
    for ci in 0..d.cin {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (ci * d.k + ky) * d.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let src = ci * d.h * d.w + (oy + ky) * d.w + kx;
                    dst[oy * d.ow..(oy + 1) * d.ow].copy_from_slice(&x[src..src + d.ow]);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], d: ConvDims, dx: &mut [T]) {
    let p = d.positions();
    for ci in 0..d.cin {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (ci * d.k + ky) * d.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.oh {
                    let dst = ci * d.h * d.w + (oy + ky) * d.w + kx;
                    for (a, &b) in dx[dst..dst + d.ow].iter_mut().zip(&src[oy * d.ow..(oy + 1) * d.ow]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, weights: &[T], bias: &[T], d: ConvDims, out_shape: Shape) -> Tensor<T> {
    let batch = x.batch();
    let (kk, p) = (d.patch(), d.positions());
    let in_len = d.cin * d.h * d.w;
    let out_len = d.cout * p;
    let mut cols = vec![T::zero(); kk * p];
    let mut out = vec![T::zero(); batch * out_len];
    for n in 0..batch {
        im2col(&x.data()[n * in_len..(n + 1) * in_len], d, &mut cols);
        let dst = &mut out[n * out_len..(n + 1) * out_len];
        gemm(d.cout, kk, p, MatRef::rows(weights, kk), MatRef::rows(&cols, p), T::zero(), dst);
        for (row, &b) in dst.chunks_exact_mut(p).zip(bias) {
            for v in row {
                *v += b;
            }
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weights: &[T],
    g: &[T],
    d: ConvDims,
    gw: &mut [T],
    gb: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    let batch = x.batch();
    let (kk, p) = (d.patch(), d.positions());
    let in_len = d.cin * d.h * d.w;
    let out_len = d.cout * p;
    let mut cols = vec![T::zero(); kk * p];
    let mut dcols = if need_dx { vec![T::zero(); kk * p] } else { Vec::new() };
    let mut dx = if need_dx { vec![T::zero(); batch * in_len] } else { Vec::new() };
    for n in 0..batch {
        let gout = &g[n * out_len..(n + 1) * out_len];
        im2col(&x.data()[n * in_len..(n + 1) * in_len], d, &mut cols);
        gemm(d.cout, p, kk, MatRef::rows(gout, p), MatRef::rows_t(&cols, p), T::one(), gw);
        for (acc, row) in gb.iter_mut().zip(gout.chunks_exact(p)) {
            *acc += row.iter().copied().sum::<T>();
        }
        if need_dx {
            gemm(kk, d.cout, p, MatRef::rows_t(weights, kk), MatRef::rows(gout, p), T::zero(), &mut dcols);
            col2im_add(&dcols, d, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    dx
}

fn maxpool_forward<T: Scalar>(x: &Tensor<T>, size: usize, in_shape: &Shape, out_shape: Shape) -> (Tensor<T>, Vec<u32>) {
    let dims = in_shape.dims();
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let (oh, ow) = (h / size, w / size);
    let batch = x.batch();
    let data = x.data();
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut idx = Vec::with_capacity(batch * c * oh * ow);
    for plane in 0..batch * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                let mut best_v = data[best];
                for dy in 0..size {
                    for dx in 0..size {
                        let j = base + (oy * size + dy) * w + ox * size + dx;
                        // strict comparison keeps the first maximum in scan order
                        if data[j] > best_v {
                            best_v = data[j];
                            best = j;
                        }
                    }
                }
                out.push(best_v);
                idx.push(best as u32);
            }
        }
    }
    (Tensor::from_parts(out_shape, out), idx)
}
