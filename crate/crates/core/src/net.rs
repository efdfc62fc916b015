//! The Z-network: a ReLU MLP `(t/T, x) -> Z` with two hidden layers of width `n + 10`,
//! plus the trainable initial value `alpha` of the backward state.
//!
//! All trainable numbers live in one flat buffer. The order is
//!
//! ```text
//! alpha (m)
//! W1 (h x (n+1), row-major), b1 (h)
//! W2 (h x h,     row-major), b2 (h)
//! W3 (m*d x h,   row-major), b3 (m*d)
//! ```
//!
//! with `h = n + 10`. Gradients use the same type and layout, which is also the
//! order of the snapshot format in [`crate::checkpoint`].

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::model::Dims;

pub const HIDDEN_EXTRA: usize = 10;
pub const LAYERS: usize = 3;

/// Stream of the parameter-initialization RNG; iterations use streams from 0 up.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetShape {
    pub dims: Dims,
    pub hidden: usize,
}

impl NetShape {
    pub fn for_dims(dims: Dims) -> Self {
        NetShape {
            dims,
            hidden: dims.n + HIDDEN_EXTRA,
        }
    }

    /// `(out, in)` of layer `l`.
    pub fn layer_dims(&self, l: usize) -> (usize, usize) {
        let Dims { n, m, d } = self.dims;
        let h = self.hidden;
        match l {
            0 => (h, n + 1),
            1 => (h, h),
            2 => (m * d, h),
            _ => panic!("layer index {l} out of range"),
        }
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = self.dims.m;
        for k in 0..l {
            let (o, i) = self.layer_dims(k);
            off += o * i + o;
        }
        let (o, i) = self.layer_dims(l);
        (off, off + o * i)
    }

    pub fn num_params(&self) -> usize {
        let (_, bias) = self.layer_offsets(LAYERS - 1);
        bias + self.layer_dims(LAYERS - 1).0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    shape: NetShape,
    data: Vec<f64>,
}

impl NetParams {
    pub fn zeros(shape: NetShape) -> Self {
        NetParams {
            shape,
            data: vec![0.0; shape.num_params()],
        }
    }

    pub fn from_flat(shape: NetShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                shape.num_params(),
                data.len()
            )));
        }
        Ok(NetParams { shape, data })
    }

    /// `alpha ~ U[0,1]^m`, Glorot-uniform weights, zero biases.
    pub fn init(seed: u64, dims: Dims) -> Self {
        let shape = NetShape::for_dims(dims);
        let mut p = Self::zeros(shape);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let unit = Uniform::new(0.0, 1.0);
        for a in p.alpha_mut() {
            *a = unit.sample(&mut rng);
        }
        for l in 0..LAYERS {
            let (fan_out, fan_in) = shape.layer_dims(l);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            for w in p.weight_mut(l).iter_mut() {
                *w = dist.sample(&mut rng);
            }
        }
        p
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn alpha(&self) -> &[f64] {
        &self.data[..self.shape.dims.m]
    }

    pub fn alpha_mut(&mut self) -> &mut [f64] {
        let m = self.shape.dims.m;
        &mut self.data[..m]
    }

    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let (o, i) = self.shape.layer_dims(l);
        let (w, b) = self.shape.layer_offsets(l);
        ArrayView2::from_shape((o, i), &self.data[w..b]).expect("layout")
    }

    pub fn weight_mut(&mut self, l: usize) -> ArrayViewMut2<'_, f64> {
        let (o, i) = self.shape.layer_dims(l);
        let (w, b) = self.shape.layer_offsets(l);
        ArrayViewMut2::from_shape((o, i), &mut self.data[w..b]).expect("layout")
    }

    pub fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (o, _) = self.shape.layer_dims(l);
        let (_, b) = self.shape.layer_offsets(l);
        ArrayView1::from(&self.data[b..b + o])
    }

    pub fn bias_mut(&mut self, l: usize) -> ArrayViewMut1<'_, f64> {
        let (o, _) = self.shape.layer_dims(l);
        let (_, b) = self.shape.layer_offsets(l);
        ArrayViewMut1::from(&mut self.data[b..b + o])
    }

    /// Splits into per-layer `(weight, bias)` mutable views.
    fn layers_mut(&mut self) -> Vec<(ArrayViewMut2<'_, f64>, ArrayViewMut1<'_, f64>)> {
        let shape = self.shape;
        let m = shape.dims.m;
        let mut rest = &mut self.data[m..];
        let mut out = Vec::with_capacity(LAYERS);
        for l in 0..LAYERS {
            let (o, i) = shape.layer_dims(l);
            let (w, tail) = rest.split_at_mut(o * i);
            let (b, tail) = tail.split_at_mut(o);
            rest = tail;
            out.push((
                ArrayViewMut2::from_shape((o, i), w).expect("layout"),
                ArrayViewMut1::from(b),
            ));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += other`, entrywise.
    pub fn add_assign(&mut self, other: &NetParams) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Human-readable name of flat coordinate `idx`, e.g. `W2[3,4]`.
    pub fn coordinate_name(&self, idx: usize) -> String {
        let m = self.shape.dims.m;
        if idx < m {
            return format!("alpha[{idx}]");
        }
        for l in 0..LAYERS {
            let (o, i) = self.shape.layer_dims(l);
            let (w, b) = self.shape.layer_offsets(l);
            if idx < b {
                let k = idx - w;
                return format!("W{}[{},{}]", l + 1, k / i, k % i);
            }
            if idx < b + o {
                return format!("b{}[{}]", l + 1, idx - b);
            }
        }
        format!("#{idx}")
    }
}

/// Intermediate values of a batched forward pass, kept for the reverse pass.
///
/// Matrices are feature-major: column `p` belongs to path `p`.
#[derive(Clone, Debug)]
pub struct Activations {
    /// `(n+1, B)`: the time feature in row 0, then the state.
    pub input: Array2<f64>,
    /// `(h, B)` post-ReLU outputs of the first hidden layer.
    pub hidden1: Array2<f64>,
    /// `(h, B)` post-ReLU outputs of the second hidden layer.
    pub hidden2: Array2<f64>,
}

/// `out = w * input + b` for feature-major `input`.
fn affine(w: ArrayView2<f64>, b: ArrayView1<f64>, input: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((w.nrows(), input.ncols()));
    for (mut row, &bias) in out.rows_mut().into_iter().zip(b) {
        row.fill(bias);
    }
    general_mat_mul(1.0, &w, input, 1.0, &mut out);
    out
}

/// `out = w^T * delta` for feature-major `delta`.
fn transpose_apply(w: ArrayView2<f64>, delta: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((w.ncols(), delta.ncols()));
    general_mat_mul(1.0, &w.t(), &delta, 0.0, &mut out);
    out
}

fn relu_in_place(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Batched forward pass. `xs` is `(B, n)`; returns `Z` as `(B, m*d)` (each row a
/// row-major `m x d` matrix) and the activations.
pub fn forward_batch(
    params: &NetParams,
    time_feature: f64,
    xs: ArrayView2<f64>,
) -> (Array2<f64>, Activations) {
    let batch = xs.nrows();
    let n = params.shape.dims.n;
    let mut input = Array2::zeros((n + 1, batch));
    input.row_mut(0).fill(time_feature);
    input.slice_mut(ndarray::s![1.., ..]).assign(&xs.t());

    let mut hidden1 = affine(params.weight(0), params.bias(0), &input);
    relu_in_place(&mut hidden1);
    let mut hidden2 = affine(params.weight(1), params.bias(1), &hidden1);
    relu_in_place(&mut hidden2);
    let out = affine(params.weight(2), params.bias(2), &hidden2);
    (
        out.reversed_axes().as_standard_layout().into_owned(),
        Activations {
            input,
            hidden1,
            hidden2,
        },
    )
}

/// Reverse pass of [`forward_batch`].
///
/// `adj_z` is `(B, m*d)`. Parameter gradients are accumulated into `grads`
/// and the state adjoint into `adj_x` (`(B, n)`).
pub fn backward_batch(
    params: &NetParams,
    acts: &Activations,
    adj_z: ArrayView2<f64>,
    grads: &mut NetParams,
    mut adj_x: ArrayViewMut2<f64>,
) {
    let mut layers = grads.layers_mut();
    let delta3 = adj_z.t();

    {
        let (gw, gb) = &mut layers[2];
        general_mat_mul(1.0, &delta3, &acts.hidden2.t(), 1.0, gw);
        *gb += &delta3.sum_axis(Axis(1));
    }
    let mut delta2 = transpose_apply(params.weight(2), delta3);
    ndarray::Zip::from(&mut delta2)
        .and(&acts.hidden2)
        .for_each(|g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
    {
        let (gw, gb) = &mut layers[1];
        general_mat_mul(1.0, &delta2, &acts.hidden1.t(), 1.0, gw);
        *gb += &delta2.sum_axis(Axis(1));
    }
    let mut delta1 = transpose_apply(params.weight(1), delta2.view());
    ndarray::Zip::from(&mut delta1)
        .and(&acts.hidden1)
        .for_each(|g, &a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
    {
        let (gw, gb) = &mut layers[0];
        general_mat_mul(1.0, &delta1, &acts.input.t(), 1.0, gw);
        *gb += &delta1.sum_axis(Axis(1));
    }
    // row 0 is the time feature; only the state receives an adjoint
    let d_input = transpose_apply(params.weight(0), delta1.view());
    adj_x += &d_input.slice(ndarray::s![1.., ..]).t();
}

/// Single-point forward pass: `Z = Phi(t/T, x)` as an `m x d` matrix.
pub fn forward(params: &NetParams, time_feature: f64, x: &[f64]) -> (Array2<f64>, Activations) {
    let Dims { n, m, d } = params.shape.dims;
    assert_eq!(x.len(), n, "state has wrong length");
    let xs = ArrayView2::from_shape((1, n), x).expect("shape");
    let (z, acts) = forward_batch(params, time_feature, xs);
    let z = z.into_shape_with_order((m, d)).expect("m*d outputs");
    (z, acts)
}
