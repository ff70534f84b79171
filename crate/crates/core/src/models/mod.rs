//! The three networks of the method: personalized LeNet client model,
//! embedding network producing client descriptors, and the fully connected
//! hypernetwork that maps descriptors to client-model parameters.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::nn::{
    self, backward_trace, forward, forward_trace, init_params, GradVector, LayerSpec, NetworkSpec, NnError, ParamVector,
    Scalar, Shape, Tensor,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("descriptor batch is empty")]
    EmptyBatch,
    #[error("the {0} embedding consumes labels only and cannot describe unlabeled data")]
    UnlabeledUnsupported(EmbeddingKind),
    #[error("descriptor has length {actual}, hypernetwork expects {expected}")]
    DescriptorDim { expected: usize, actual: usize },
    #[error("image batch has {actual} values per example, expected {expected}")]
    ImageSize { expected: usize, actual: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// Shape of the images fed to convolutional models, channels first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageGeometry {
    pub channels: usize,
    pub size: usize,
}

impl ImageGeometry {
    pub const CIFAR: ImageGeometry = ImageGeometry { channels: 3, size: 32 };

    pub fn pixels(&self) -> usize {
        self.channels * self.size * self.size
    }

    /// Spatial size after the two conv(5) + pool(2) stages of the LeNet trunk.
    fn trunk_size(&self) -> Result<usize, ModelError> {
        let after_first = self.size.checked_sub(4).map(|s| s / 2).unwrap_or(0);
        let after_second = after_first.checked_sub(4).map(|s| s / 2).unwrap_or(0);
        if after_second == 0 {
            return Err(ModelError::Config(format!("image size {} too small for the LeNet trunk (needs >= 14)", self.size)));
        }
        Ok(after_second)
    }
}

impl Default for ImageGeometry {
    fn default() -> Self {
        ImageGeometry::CIFAR
    }
}

fn lenet(input_channels: usize, geometry: ImageGeometry, outputs: usize, head: Option<LayerSpec>) -> Result<NetworkSpec, ModelError> {
    let trunk = geometry.trunk_size()?;
    let mut layers = vec![
        LayerSpec::Conv2d { in_channels: input_channels, out_channels: 16, kernel: 5 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2 },
        LayerSpec::Conv2d { in_channels: 16, out_channels: 32, kernel: 5 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { inputs: 32 * trunk * trunk, outputs: 120 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 120, outputs: 84 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 84, outputs },
    ];
    layers.extend(head);
    Ok(NetworkSpec::new(Shape::new(vec![input_channels, geometry.size, geometry.size])?, layers)?)
}

/// LeNet client model for 32×32 RGB inputs and `classes` outputs, ending in softmax.
pub fn build_client_model(classes: usize) -> Result<NetworkSpec, ModelError> {
    build_client_model_for(classes, ImageGeometry::CIFAR)
}

/// LeNet client model for an arbitrary image geometry.
pub fn build_client_model_for(classes: usize, geometry: ImageGeometry) -> Result<NetworkSpec, ModelError> {
    if classes < 2 {
        return Err(ModelError::Config(format!("client model needs at least 2 classes, got {classes}")));
    }
    lenet(geometry.channels, geometry, classes, Some(LayerSpec::SoftmaxOutput))
}

/// Which embedding network computes per-example embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbeddingKind {
    /// Single dense projection of the one-hot label.
    LinearOneHot,
    /// LeNet trunk over the image extended with one constant plane per class.
    LenetConv,
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::LinearOneHot => "linear-onehot",
            EmbeddingKind::LenetConv => "lenet-conv",
        })
    }
}

impl FromStr for EmbeddingKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear-onehot" | "linear" | "mlp" => Ok(EmbeddingKind::LinearOneHot),
            "lenet-conv" | "cnn" | "conv" => Ok(EmbeddingKind::LenetConv),
            other => Err(format!("unknown embedding kind `{other}` (expected linear-onehot or lenet-conv)")),
        }
    }
}

pub fn build_embedding_net(kind: EmbeddingKind, classes: usize, dim: usize) -> Result<NetworkSpec, ModelError> {
    build_embedding_net_for(kind, classes, dim, ImageGeometry::CIFAR)
}

pub fn build_embedding_net_for(
    kind: EmbeddingKind,
    classes: usize,
    dim: usize,
    geometry: ImageGeometry,
) -> Result<NetworkSpec, ModelError> {
    if dim == 0 {
        return Err(ModelError::Config("descriptor dimension must be positive".into()));
    }
    match kind {
        EmbeddingKind::LinearOneHot => Ok(NetworkSpec::new(
            Shape::new(vec![classes])?,
            vec![LayerSpec::Dense { inputs: classes, outputs: dim }],
        )?),
        EmbeddingKind::LenetConv => lenet(geometry.channels + classes, geometry, dim, None),
    }
}

/// Recommended descriptor dimension `n / 4` for `n` clients (at least 1).
pub fn recommended_descriptor_dim(clients: usize) -> usize {
    (clients / 4).max(1)
}

/// Hypernetwork depth presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HyperSize {
    Small,
    Medium,
    Large,
}

impl HyperSize {
    /// Number of `width × width` hidden blocks after the input layer.
    pub fn hidden_layers(self) -> usize {
        match self {
            HyperSize::Small => 1,
            HyperSize::Medium => 3,
            HyperSize::Large => 5,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            HyperSize::Small => "S",
            HyperSize::Medium => "M",
            HyperSize::Large => "L",
        }
    }
}

impl FromStr for HyperSize {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "S" | "s" | "small" => Ok(HyperSize::Small),
            "M" | "m" | "medium" => Ok(HyperSize::Medium),
            "L" | "l" | "large" => Ok(HyperSize::Large),
            other => Err(format!("unknown hypernetwork size `{other}` (expected S, M or L)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HyperConfig {
    pub descriptor_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub output_dim: usize,
}

impl HyperConfig {
    pub fn new(size: HyperSize, descriptor_dim: usize, output_dim: usize) -> Self {
        HyperConfig { descriptor_dim, hidden_width: 100, hidden_layers: size.hidden_layers(), output_dim }
    }
}

/// `l×w` + ReLU, `hidden_layers` × (`w×w` + ReLU), then a linear `w×D` output.
pub fn build_hypernetwork(cfg: &HyperConfig) -> Result<NetworkSpec, ModelError> {
    if cfg.descriptor_dim == 0 || cfg.hidden_width == 0 || cfg.output_dim == 0 {
        return Err(ModelError::Config(format!("hypernetwork sizes must be positive: {cfg:?}")));
    }
    let w = cfg.hidden_width;
    let mut layers = vec![LayerSpec::Dense { inputs: cfg.descriptor_dim, outputs: w }, LayerSpec::Relu];
    for _ in 0..cfg.hidden_layers {
        layers.push(LayerSpec::Dense { inputs: w, outputs: w });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense { inputs: w, outputs: cfg.output_dim });
    Ok(NetworkSpec::new(Shape::new(vec![cfg.descriptor_dim])?, layers)?)
}

/// Hypernetwork initialisation: standard init for the hidden layers, output
/// weights shrunk by 0.01 and output bias set to a fresh client-model init,
/// so round-zero models start near an ordinary client initialisation.
pub fn init_hypernetwork<T: Scalar, R: Rng + ?Sized>(hyper: &NetworkSpec, client: &NetworkSpec, rng: &mut R) -> Result<ParamVector<T>, ModelError> {
    if hyper.output_dim() != client.param_count() {
        return Err(ModelError::Config(format!(
            "hypernetwork outputs {} values but the client model has {} parameters",
            hyper.output_dim(),
            client.param_count()
        )));
    }
    let mut params: ParamVector<T> = init_params(hyper, rng);
    let last = hyper.layout().pop().expect("hypernetwork has dense layers");
    let scale = T::of(0.01);
    for v in &mut params[last.weight_offset..last.bias_offset] {
        *v *= scale;
    }
    let bias: ParamVector<T> = init_params(client, rng);
    params[last.bias_offset..last.end()].copy_from_slice(&bias);
    Ok(params)
}

/// Client descriptor: mean embedding of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor<T>(pub Vec<T>);

impl<T: Scalar> Descriptor<T> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn distance(&self, other: &Descriptor<T>) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>().sqrt()
    }
}

/// A batch of examples in model-ready form: normalised images (channels
/// first, concatenated) and, when labeled, class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleBatch<T> {
    image_dims: [usize; 3],
    pixels: Vec<T>,
    labels: Option<Vec<usize>>,
}

impl<T: Scalar> ExampleBatch<T> {
    pub fn new(image_dims: [usize; 3], pixels: Vec<T>, labels: Option<Vec<usize>>) -> Result<Self, ModelError> {
        let per: usize = image_dims.iter().product();
        if per == 0 || pixels.len() % per != 0 {
            return Err(ModelError::ImageSize { expected: per, actual: pixels.len() });
        }
        if let Some(l) = &labels {
            if l.len() != pixels.len() / per {
                return Err(NnError::LengthMismatch { what: "labels", expected: pixels.len() / per, actual: l.len() }.into());
            }
        }
        Ok(ExampleBatch { image_dims, pixels, labels })
    }

    pub fn labeled(image_dims: [usize; 3], pixels: Vec<T>, labels: Vec<usize>) -> Result<Self, ModelError> {
        Self::new(image_dims, pixels, Some(labels))
    }

    pub fn unlabeled(image_dims: [usize; 3], pixels: Vec<T>) -> Result<Self, ModelError> {
        Self::new(image_dims, pixels, None)
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image_dims(&self) -> [usize; 3] {
        self.image_dims
    }

    pub fn image_len(&self) -> usize {
        self.image_dims.iter().product()
    }

    pub fn image(&self, i: usize) -> &[T] {
        let w = self.image_len();
        &self.pixels[i * w..(i + 1) * w]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// The same images with labels dropped.
    pub fn without_labels(&self) -> Self {
        ExampleBatch { image_dims: self.image_dims, pixels: self.pixels.clone(), labels: None }
    }

    /// Images as a `[batch, c, h, w]` tensor.
    pub fn images(&self) -> Result<Tensor<T>, ModelError> {
        if self.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let [c, h, w] = self.image_dims;
        Ok(Tensor::new(Shape::new(vec![self.len(), c, h, w])?, self.pixels.clone())?)
    }

    /// Sub-batch selected by position.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            pixels.extend_from_slice(self.image(i));
        }
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        ExampleBatch { image_dims: self.image_dims, pixels, labels }
    }

    pub fn cast<U: Scalar>(&self) -> ExampleBatch<U> {
        ExampleBatch {
            image_dims: self.image_dims,
            pixels: self.pixels.iter().map(|v| U::of(v.as_f64())).collect(),
            labels: self.labels.clone(),
        }
    }
}

/// Builds the input tensor the embedding network consumes for a batch.
///
/// Missing labels produce all-zero label channels.
pub fn embedding_input<T: Scalar>(embed: &NetworkSpec, kind: EmbeddingKind, batch: &ExampleBatch<T>) -> Result<Tensor<T>, ModelError> {
    let n = batch.len();
    match kind {
        EmbeddingKind::LinearOneHot => {
            let labels = batch.labels().ok_or(ModelError::UnlabeledUnsupported(kind))?;
            let classes = embed.input_shape().numel();
            let mut data = vec![T::zero(); n * classes];
            for (row, &y) in data.chunks_exact_mut(classes).zip(labels) {
                if y >= classes {
                    return Err(NnError::LabelOutOfRange { label: y, classes }.into());
                }
                row[y] = T::one();
            }
            Ok(Tensor::new(embed.input_shape().batched(n)?, data)?)
        }
        EmbeddingKind::LenetConv => {
            let dims = embed.input_shape().dims();
            let (total_c, h, w) = (dims[0], dims[1], dims[2]);
            let plane = h * w;
            let [image_c, ih, iw] = batch.image_dims();
            let image_len = batch.image_len();
            if ih != h || iw != w || image_c >= total_c {
                return Err(ModelError::ImageSize { expected: (total_c.saturating_sub(1)) * plane, actual: image_len });
            }
            let classes = total_c - image_c;
            let mut data = vec![T::zero(); n * total_c * plane];
            for i in 0..n {
                let dst = &mut data[i * total_c * plane..(i + 1) * total_c * plane];
                dst[..image_len].copy_from_slice(batch.image(i));
                if let Some(labels) = batch.labels() {
                    let y = labels[i];
                    if y >= classes {
                        return Err(NnError::LabelOutOfRange { label: y, classes }.into());
                    }
                    let start = (image_c + y) * plane;
                    dst[start..start + plane].fill(T::one());
                }
            }
            Ok(Tensor::new(embed.input_shape().batched(n)?, data)?)
        }
    }
}

/// Mean of per-example embeddings, `v(S) = |S|⁻¹ Σ φ(x, y)`.
///
/// The mean is accumulated in double precision per coordinate.
pub fn compute_descriptor<T: Scalar>(
    batch: &ExampleBatch<T>,
    embed: &NetworkSpec,
    eta_v: &ParamVector<T>,
    kind: EmbeddingKind,
) -> Result<Descriptor<T>, ModelError> {
    if batch.len() == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let input = embedding_input(embed, kind, batch)?;
    let out = forward(embed, eta_v, &input)?;
    Ok(mean_rows(&out))
}

/// Descriptor from images only; label channels are left at zero.
pub fn compute_descriptor_unlabeled<T: Scalar>(
    batch: &ExampleBatch<T>,
    embed: &NetworkSpec,
    eta_v: &ParamVector<T>,
    kind: EmbeddingKind,
) -> Result<Descriptor<T>, ModelError> {
    if kind == EmbeddingKind::LinearOneHot {
        return Err(ModelError::UnlabeledUnsupported(kind));
    }
    compute_descriptor(&batch.without_labels(), embed, eta_v, kind)
}

fn mean_rows<T: Scalar>(out: &Tensor<T>) -> Descriptor<T> {
    let (n, l) = (out.batch(), out.row_len());
    let mut acc = vec![0.0f64; l];
    for i in 0..n {
        for (a, v) in acc.iter_mut().zip(out.row(i)) {
            *a += v.as_f64();
        }
    }
    Descriptor(acc.into_iter().map(|a| T::of(a / n as f64)).collect())
}

/// Vector–Jacobian product of the batch-mean embedding: gradient of
/// `<upstream, v(batch; eta_v)>` with respect to `eta_v`.
pub fn descriptor_vjp<T: Scalar>(
    batch: &ExampleBatch<T>,
    embed: &NetworkSpec,
    eta_v: &ParamVector<T>,
    kind: EmbeddingKind,
    upstream: &[T],
) -> Result<GradVector<T>, ModelError> {
    if batch.len() == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if upstream.len() != embed.output_dim() {
        return Err(ModelError::DescriptorDim { expected: embed.output_dim(), actual: upstream.len() });
    }
    let input = embedding_input(embed, kind, batch)?;
    let trace = forward_trace(embed, eta_v, &input)?;
    let n = batch.len();
    let scale = T::one() / T::of(n as f64);
    let row: Vec<T> = upstream.iter().map(|&g| g * scale).collect();
    let data: Vec<T> = (0..n).flat_map(|_| row.iter().copied()).collect();
    let out_grad = Tensor::new(trace.output().shape().clone(), data)?;
    let (g, _) = backward_trace(embed, eta_v, &trace, &out_grad, false)?;
    Ok(g)
}

/// `θ = h(v; η_h)`, the personalised client-model parameters.
pub fn generate_personal_model<T: Scalar>(
    descriptor: &Descriptor<T>,
    eta_h: &ParamVector<T>,
    hyper: &NetworkSpec,
) -> Result<ParamVector<T>, ModelError> {
    let input = descriptor_input(descriptor, hyper)?;
    Ok(ParamVector(forward(hyper, eta_h, &input)?.into_data()))
}

/// Vector–Jacobian products of the hypernetwork at `v` with upstream `Δθ`:
/// returns `(Δη_h, Δv)`.
pub fn hypernetwork_vjp<T: Scalar>(
    descriptor: &Descriptor<T>,
    eta_h: &ParamVector<T>,
    hyper: &NetworkSpec,
    upstream: &[T],
) -> Result<(GradVector<T>, GradVector<T>), ModelError> {
    let input = descriptor_input(descriptor, hyper)?;
    if upstream.len() != hyper.output_dim() {
        return Err(NnError::LengthMismatch { what: "model delta", expected: hyper.output_dim(), actual: upstream.len() }.into());
    }
    let trace = forward_trace(hyper, eta_h, &input)?;
    let out_grad = Tensor::new(trace.output().shape().clone(), upstream.to_vec())?;
    let (g, gv) = backward_trace(hyper, eta_h, &trace, &out_grad, true)?;
    Ok((g, GradVector(gv.expect("input gradient requested").into_data())))
}

fn descriptor_input<T: Scalar>(descriptor: &Descriptor<T>, hyper: &NetworkSpec) -> Result<Tensor<T>, ModelError> {
    let expected = hyper.input_shape().numel();
    if descriptor.len() != expected {
        return Err(ModelError::DescriptorDim { expected, actual: descriptor.len() });
    }
    Ok(Tensor::new(hyper.input_shape().batched(1)?, descriptor.0.clone())?)
}

/// Parameter count of a spec, re-exported for convenience.
pub fn model_size(spec: &NetworkSpec) -> usize {
    nn::param_count(spec)
}
