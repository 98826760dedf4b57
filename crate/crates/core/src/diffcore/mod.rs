//! Dense tensors, reverse-mode differentiation and the layer primitives the
//! learnable parts of the detector are built from.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
mod tensor;

pub use layers::{
    join, named_params, param_count, set_param, zero_grads, BatchNorm, Conv2dLayer, ConvBnRelu,
    LinearBnRelu, LinearLayer, Module, UpConvLayer, Visitor, VisitorMut,
};
pub use ops::{
    add, add_all, concat, conv2d, gather_rows, linear, max_over_set, mul, relu, reshape,
    scatter_rows_to_grid, scale, segment_max, sigmoid, sigmoid_scalar, sub, sum, transpose,
    upconv2d,
};
pub use tensor::Tensor;

/// Shorthand for [`LinearLayer::forward`].
pub fn linear_forward(x: &Tensor, layer: &LinearLayer) -> crate::Result<Tensor> {
    layer.forward(x)
}

/// Shorthand for [`BatchNorm::forward`].
pub fn batchnorm_forward(x: &Tensor, bn: &BatchNorm, training: bool) -> crate::Result<Tensor> {
    bn.forward(x, training)
}

/// Cross-correlation without bias.
pub fn conv2d_forward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> crate::Result<Tensor> {
    conv2d(x, kernel, None, stride, padding)
}
