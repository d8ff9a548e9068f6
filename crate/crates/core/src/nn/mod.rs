//! A small deterministic neural-network toolkit: layers with explicit
//! forward/backward passes over `[N, C, H, W]` tensors.

pub mod act;
pub mod adam;
pub mod conv;
pub mod init;
pub mod linear;
pub mod norm;
pub mod param;
pub mod pool;

pub use act::{
    channel_softmax, channel_softmax_backward, leaky_relu, leaky_relu_backward, relu,
    relu_backward, tanh, tanh_backward,
};
pub use adam::Adam;
pub use conv::Conv2d;
pub use init::Init;
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnMode};
pub use param::{Param, Params};
pub use pool::{max_pool2, max_pool2_backward, upsample2, upsample2_backward};

use ndarray::{Array2, Array4};

/// Concatenate two feature maps along the channel axis (standard layout).
pub fn concat_channels(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    let (n, ca, h, w) = a.dim();
    let (nb, cb, hb, wb) = b.dim();
    assert_eq!((n, h, w), (nb, hb, wb), "channel concat shapes");
    let mut out = Array4::<f32>::zeros((n, ca + cb, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    out
}

/// Concatenate two batches along the batch axis (standard layout).
pub fn concat_batch(a: &Array4<f32>, b: &Array4<f32>) -> Array4<f32> {
    let (na, c, h, w) = a.dim();
    let (nb, cb, hb, wb) = b.dim();
    assert_eq!((c, h, w), (cb, hb, wb), "batch concat shapes");
    let mut out = Array4::<f32>::zeros((na + nb, c, h, w));
    out.slice_mut(ndarray::s![..na, .., .., ..]).assign(a);
    out.slice_mut(ndarray::s![na.., .., .., ..]).assign(b);
    out
}

/// Split a channel-axis gradient back into the two concatenated parts.
pub fn split_channels(g: &Array4<f32>, c_first: usize) -> (Array4<f32>, Array4<f32>) {
    let a = g.slice(ndarray::s![.., ..c_first, .., ..]).to_owned();
    let b = g.slice(ndarray::s![.., c_first.., .., ..]).to_owned();
    (a, b)
}

/// Flatten `[N, C, H, W]` to `[N, C*H*W]`.
pub fn flatten(x: &Array4<f32>) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    x.to_shape(((n, c * h * w), ndarray::Order::RowMajor))
        .expect("flatten")
        .to_owned()
}

/// Inverse of [`flatten`].
pub fn unflatten(x: &Array2<f32>, (c, h, w): (usize, usize, usize)) -> Array4<f32> {
    let n = x.dim().0;
    x.to_shape(((n, c, h, w), ndarray::Order::RowMajor))
        .expect("unflatten")
        .to_owned()
}
