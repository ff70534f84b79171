use std::fmt;

use super::{NnError, ParamVector, Scalar, Shape, Tensor};

/// One layer of a feed-forward network.
///
/// Convolution weights are stored `[out, in, k, k]`, dense weights `[out, in]`,
/// both row-major and followed by the bias vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    /// Stride-one convolution without padding.
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize },
    /// Non-overlapping max pooling (stride equals the window size).
    MaxPool2d { size: usize },
    Dense { inputs: usize, outputs: usize },
    Relu,
    Flatten,
    /// Row-wise softmax producing class probabilities; only valid as last layer.
    SoftmaxOutput,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                out_channels * in_channels * kernel * kernel + out_channels
            }
            LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// Output shape (without batch dimension) for a given input shape.
    pub fn output_shape(&self, index: usize, input: &Shape) -> Result<Shape, NnError> {
        let fail = |msg: String| NnError::LayerShape { layer: index, kind: *self, msg };
        let dims = input.dims();
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 {
                    return Err(fail("sizes must be positive".into()));
                }
                if dims.len() != 3 {
                    return Err(fail(format!("expects [channels, h, w] input, got {input:?}")));
                }
                if dims[0] != in_channels {
                    return Err(fail(format!("expects {in_channels} input channels, got {}", dims[0])));
                }
                if dims[1] < kernel || dims[2] < kernel {
                    return Err(fail(format!("kernel {kernel} larger than {}x{} input", dims[1], dims[2])));
                }
                Shape::new(vec![out_channels, dims[1] - kernel + 1, dims[2] - kernel + 1])
            }
            LayerSpec::MaxPool2d { size } => {
                if size == 0 {
                    return Err(fail("window must be positive".into()));
                }
                if dims.len() != 3 {
                    return Err(fail(format!("expects [channels, h, w] input, got {input:?}")));
                }
                if dims[1] < size || dims[2] < size {
                    return Err(fail(format!("window {size} larger than {}x{} input", dims[1], dims[2])));
                }
                Shape::new(vec![dims[0], dims[1] / size, dims[2] / size])
            }
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(fail("sizes must be positive".into()));
                }
                if dims.len() != 1 || dims[0] != inputs {
                    return Err(fail(format!("expects [{inputs}] input, got {input:?}")));
                }
                Shape::new(vec![outputs])
            }
            LayerSpec::Relu => Ok(input.clone()),
            LayerSpec::Flatten => Shape::new(vec![input.numel()]),
            LayerSpec::SoftmaxOutput => {
                if dims.len() != 1 {
                    return Err(fail(format!("expects flat input, got {input:?}")));
                }
                Ok(input.clone())
            }
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                write!(f, "conv2d({in_channels}x{kernel}x{kernel}x{out_channels})")
            }
            LayerSpec::MaxPool2d { size } => write!(f, "maxpool2d({size}x{size})"),
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense({inputs}x{outputs})"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::SoftmaxOutput => f.write_str("softmax"),
        }
    }
}

/// Offsets of one parameterised layer inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSlot {
    pub layer: usize,
    pub weight_offset: usize,
    pub weight_dims: Vec<usize>,
    pub bias_offset: usize,
    pub bias_len: usize,
}

impl LayerSlot {
    pub fn weight_len(&self) -> usize {
        self.weight_dims.iter().product()
    }

    pub fn end(&self) -> usize {
        self.bias_offset + self.bias_len
    }

    pub fn fan_in_out(&self) -> (usize, usize) {
        match self.weight_dims.as_slice() {
            [o, i] => (*i, *o),
            [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
            _ => unreachable!("weights are rank 2 or 4"),
        }
    }
}

/// A validated, shape-consistent layer stack.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    input_shape: Shape,
    layers: Vec<LayerSpec>,
    shapes: Vec<Shape>,
    param_count: usize,
}

impl NetworkSpec {
    pub fn new(input_shape: Shape, layers: Vec<LayerSpec>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::EmptyNetwork);
        }
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input_shape.clone());
        for (i, layer) in layers.iter().enumerate() {
            if *layer == LayerSpec::SoftmaxOutput && i + 1 != layers.len() {
                return Err(NnError::LayerShape {
                    layer: i,
                    kind: *layer,
                    msg: "softmax must be the final layer".into(),
                });
            }
            let next = layer.output_shape(i, &shapes[i])?;
            shapes.push(next);
        }
        let last = shapes.last().expect("non-empty");
        if last.rank() != 1 {
            return Err(NnError::LayerShape {
                layer: layers.len() - 1,
                kind: layers[layers.len() - 1],
                msg: format!("network output must be flat, got {last:?}"),
            });
        }
        let param_count = layers.iter().map(LayerSpec::param_count).sum();
        Ok(NetworkSpec { input_shape, layers, shapes, param_count })
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-example shape entering layer `i`; index `layers().len()` is the output.
    pub fn shape_at(&self, i: usize) -> &Shape {
        &self.shapes[i]
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().expect("non-empty").numel()
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn ends_with_softmax(&self) -> bool {
        self.layers.last() == Some(&LayerSpec::SoftmaxOutput)
    }

    /// Same network without a trailing softmax, producing logits.
    pub fn logits_spec(&self) -> NetworkSpec {
        if !self.ends_with_softmax() {
            return self.clone();
        }
        let mut layers = self.layers.clone();
        layers.pop();
        NetworkSpec::new(self.input_shape.clone(), layers).expect("prefix of a valid spec is valid")
    }

    /// Parameter offsets for every layer that owns parameters.
    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        let mut slots = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let (weight_dims, bias_len) = match *layer {
                LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                    (vec![out_channels, in_channels, kernel, kernel], out_channels)
                }
                LayerSpec::Dense { inputs, outputs } => (vec![outputs, inputs], outputs),
                _ => continue,
            };
            let wlen: usize = weight_dims.iter().product();
            slots.push(LayerSlot {
                layer: i,
                weight_offset: offset,
                weight_dims,
                bias_offset: offset + wlen,
                bias_len,
            });
            offset += wlen + bias_len;
        }
        debug_assert_eq!(offset, self.param_count);
        slots
    }

    /// Splits a flat vector into per-layer `(weights, bias)` tensors.
    pub fn unflatten<T: Scalar>(&self, params: &ParamVector<T>) -> Result<Vec<(Tensor<T>, Tensor<T>)>, NnError> {
        self.check_params(params.len())?;
        self.layout()
            .into_iter()
            .map(|slot| {
                let w = params[slot.weight_offset..slot.bias_offset].to_vec();
                let b = params[slot.bias_offset..slot.end()].to_vec();
                Ok((
                    Tensor::new(Shape::new(slot.weight_dims.clone())?, w)?,
                    Tensor::new(Shape::new(vec![slot.bias_len])?, b)?,
                ))
            })
            .collect()
    }

    /// Inverse of [`NetworkSpec::unflatten`].
    pub fn flatten<T: Scalar>(&self, tensors: &[(Tensor<T>, Tensor<T>)]) -> Result<ParamVector<T>, NnError> {
        let layout = self.layout();
        if tensors.len() != layout.len() {
            return Err(NnError::LengthMismatch {
                what: "parameterised layers",
                expected: layout.len(),
                actual: tensors.len(),
            });
        }
        let mut out = Vec::with_capacity(self.param_count);
        for (slot, (w, b)) in layout.iter().zip(tensors) {
            if w.shape().dims() != slot.weight_dims.as_slice() || b.data().len() != slot.bias_len {
                return Err(NnError::LayerShape {
                    layer: slot.layer,
                    kind: self.layers[slot.layer],
                    msg: format!("parameter tensors {:?}/{:?} do not fit", w.shape(), b.shape()),
                });
            }
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        Ok(ParamVector(out))
    }

    pub(crate) fn check_params(&self, len: usize) -> Result<(), NnError> {
        if len != self.param_count {
            return Err(NnError::LengthMismatch { what: "parameters", expected: self.param_count, actual: len });
        }
        Ok(())
    }

    /// Stable textual description, used for digests and manifests.
    pub fn describe(&self) -> String {
        let layers: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        format!("input={} layers=[{}]", self.input_shape, layers.join(","))
    }
}

/// Exact number of scalar parameters of a spec.
pub fn param_count(spec: &NetworkSpec) -> usize {
    spec.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_dense_has_two_params() {
        let spec = NetworkSpec::new(Shape::new(vec![1]).unwrap(), vec![LayerSpec::Dense { inputs: 1, outputs: 1 }]).unwrap();
        assert_eq!(param_count(&spec), 2);
    }

    #[test]
    fn inconsistent_spec_names_offending_layer() {
        let err = NetworkSpec::new(
            Shape::new(vec![4]).unwrap(),
            vec![
                LayerSpec::Dense { inputs: 4, outputs: 3 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 5, outputs: 2 },
            ],
        )
        .unwrap_err();
        match err {
            NnError::LayerShape { layer, .. } => assert_eq!(layer, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dense_after_conv_needs_flatten() {
        let err = NetworkSpec::new(
            Shape::new(vec![1, 4, 4]).unwrap(),
            vec![LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3 }, LayerSpec::Dense { inputs: 8, outputs: 2 }],
        )
        .unwrap_err();
        assert!(matches!(err, NnError::LayerShape { layer: 1, .. }));
    }

    #[test]
    fn softmax_only_last() {
        let err = NetworkSpec::new(
            Shape::new(vec![2]).unwrap(),
            vec![LayerSpec::SoftmaxOutput, LayerSpec::Dense { inputs: 2, outputs: 2 }],
        )
        .unwrap_err();
        assert!(matches!(err, NnError::LayerShape { layer: 0, .. }));
    }
}
