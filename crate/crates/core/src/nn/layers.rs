use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::scalar::{sigmoid, Scalar};

fn uniform_init<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect()
}

/// Fully connected layer, `y = x W^T + b` on row-major batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        let bound = gain / (inputs as f64).sqrt();
        Self {
            weight: Array2::from_shape_vec((outputs, inputs), uniform_init(rng, inputs * outputs, bound))
                .expect("shape"),
            bias: Array1::from(uniform_init(rng, outputs, bound)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }

    pub fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Dense<T>) -> Array2<T> {
        general_mat_mul(T::one(), &dy.t(), x, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

impl<T: Scalar> Parameters<T> for Dense<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Square-kernel convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    /// Output size of a forward convolution over an `h x w` input.
    pub fn conv_out(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    /// Output size of the transposed convolution over an `h x w` input.
    pub fn transposed_out(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n - 1) * self.stride + self.kernel - 2 * self.padding;
        (f(h), f(w))
    }
}

/// Patch extraction: `(n, c*h*w)` -> `(n*ho*wo, c*k*k)`.
fn im2col<T: Scalar>(
    x: ArrayView2<'_, T>,
    c: usize,
    (h, w): (usize, usize),
    (k, s, p): (usize, usize, usize),
    (ho, wo): (usize, usize),
) -> Array2<T> {
    let n = x.nrows();
    let mut cols = Array2::<T>::zeros((n * ho * wo, c * k * k));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("contiguous");
    let out = cols.as_slice_mut().expect("contiguous");
    let row_len = c * k * k;
    for b in 0..n {
        let img = &xs[b * c * h * w..(b + 1) * c * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut out[((b * ho + oy) * wo + ox) * row_len..][..row_len];
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row[(ci * k + ky) * k + kx] = img[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patches back, summing overlaps.
fn col2im<T: Scalar>(
    cols: ArrayView2<'_, T>,
    n: usize,
    c: usize,
    (h, w): (usize, usize),
    (k, s, p): (usize, usize, usize),
    (ho, wo): (usize, usize),
) -> Array2<T> {
    let mut x = Array2::<T>::zeros((n, c * h * w));
    let cs = cols.as_standard_layout();
    let cs = cs.as_slice().expect("contiguous");
    let xs = x.as_slice_mut().expect("contiguous");
    let row_len = c * k * k;
    for b in 0..n {
        let img = &mut xs[b * c * h * w..(b + 1) * c * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &cs[((b * ho + oy) * wo + ox) * row_len..][..row_len];
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            img[(ci * h + iy as usize) * w + ix as usize] += row[(ci * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(n, c*hw)` -> `(n*hw, c)`.
fn to_rows<T: Scalar>(x: &Array2<T>, c: usize, hw: usize) -> Array2<T> {
    let n = x.nrows();
    x.view()
        .into_shape_with_order((n, c, hw))
        .expect("layout")
        .permuted_axes([0, 2, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * hw, c))
        .expect("layout")
}

/// `(n*hw, c)` -> `(n, c*hw)`.
fn from_rows<T: Scalar>(x: &Array2<T>, n: usize, c: usize, hw: usize) -> Array2<T> {
    x.view()
        .into_shape_with_order((n, hw, c))
        .expect("layout")
        .permuted_axes([0, 2, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c * hw))
        .expect("layout")
}

fn add_channel_bias<T: Scalar>(y: &mut Array2<T>, bias: &Array1<T>, hw: usize) {
    let c = bias.len();
    for mut row in y.rows_mut() {
        let row = row.as_slice_mut().expect("contiguous");
        for ci in 0..c {
            let b = bias[ci];
            for v in &mut row[ci * hw..(ci + 1) * hw] {
                *v += b;
            }
        }
    }
}

fn accumulate_channel_bias<T: Scalar>(grad: &mut Array1<T>, dy: &Array2<T>, hw: usize) {
    let c = grad.len();
    for row in dy.rows() {
        for ci in 0..c {
            let mut s = T::zero();
            for j in ci * hw..(ci + 1) * hw {
                s += row[j];
            }
            grad[ci] += s;
        }
    }
}

/// 2-D convolution over channel-major feature maps flattened per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub geometry: ConvGeometry,
    /// `(out_channels, in_channels * k * k)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(geometry: ConvGeometry, gain: f64, rng: &mut R) -> Self {
        let fan_in = geometry.in_channels * geometry.kernel * geometry.kernel;
        let bound = gain / (fan_in as f64).sqrt();
        Self {
            geometry,
            weight: Array2::from_shape_vec(
                (geometry.out_channels, fan_in),
                uniform_init(rng, geometry.out_channels * fan_in, bound),
            )
            .expect("shape"),
            bias: Array1::from(uniform_init(rng, geometry.out_channels, bound)),
        }
    }

    fn kernel(&self) -> (usize, usize, usize) {
        (self.geometry.kernel, self.geometry.stride, self.geometry.padding)
    }

    pub fn forward(&self, x: &Array2<T>, hw: (usize, usize)) -> Array2<T> {
        let g = self.geometry;
        let out_hw = g.conv_out(hw.0, hw.1);
        let cols = im2col(x.view(), g.in_channels, hw, self.kernel(), out_hw);
        let rows = cols.dot(&self.weight.t());
        let mut y = from_rows(&rows, x.nrows(), g.out_channels, out_hw.0 * out_hw.1);
        add_channel_bias(&mut y, &self.bias, out_hw.0 * out_hw.1);
        y
    }

    pub fn backward(
        &self,
        x: &Array2<T>,
        hw: (usize, usize),
        dy: &Array2<T>,
        grad: &mut Conv2d<T>,
    ) -> Array2<T> {
        let g = self.geometry;
        let out_hw = g.conv_out(hw.0, hw.1);
        let ohw = out_hw.0 * out_hw.1;
        let cols = im2col(x.view(), g.in_channels, hw, self.kernel(), out_hw);
        let dy_rows = to_rows(dy, g.out_channels, ohw);
        general_mat_mul(T::one(), &dy_rows.t(), &cols, T::one(), &mut grad.weight);
        accumulate_channel_bias(&mut grad.bias, dy, ohw);
        let dcols = dy_rows.dot(&self.weight);
        col2im(dcols.view(), x.nrows(), g.in_channels, hw, self.kernel(), out_hw)
    }
}

impl<T: Scalar> Parameters<T> for Conv2d<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Transposed convolution (fractionally strided), the adjoint of [`Conv2d`]
/// with the same geometry read in reverse.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub geometry: ConvGeometry,
    /// `(in_channels, out_channels * k * k)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(geometry: ConvGeometry, gain: f64, rng: &mut R) -> Self {
        let k2 = geometry.kernel * geometry.kernel;
        let fan_in = geometry.in_channels * k2 / (geometry.stride * geometry.stride).max(1);
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        Self {
            geometry,
            weight: Array2::from_shape_vec(
                (geometry.in_channels, geometry.out_channels * k2),
                uniform_init(rng, geometry.in_channels * geometry.out_channels * k2, bound),
            )
            .expect("shape"),
            bias: Array1::from(uniform_init(rng, geometry.out_channels, bound)),
        }
    }

    fn kernel(&self) -> (usize, usize, usize) {
        (self.geometry.kernel, self.geometry.stride, self.geometry.padding)
    }

    pub fn forward(&self, x: &Array2<T>, hw: (usize, usize)) -> Array2<T> {
        let g = self.geometry;
        let out_hw = g.transposed_out(hw.0, hw.1);
        let x_rows = to_rows(x, g.in_channels, hw.0 * hw.1);
        let cols = x_rows.dot(&self.weight);
        let mut y = col2im(cols.view(), x.nrows(), g.out_channels, out_hw, self.kernel(), hw);
        add_channel_bias(&mut y, &self.bias, out_hw.0 * out_hw.1);
        y
    }

    pub fn backward(
        &self,
        x: &Array2<T>,
        hw: (usize, usize),
        dy: &Array2<T>,
        grad: &mut ConvTranspose2d<T>,
    ) -> Array2<T> {
        let g = self.geometry;
        let out_hw = g.transposed_out(hw.0, hw.1);
        let x_rows = to_rows(x, g.in_channels, hw.0 * hw.1);
        let dcols = im2col(dy.view(), g.out_channels, out_hw, self.kernel(), hw);
        general_mat_mul(T::one(), &x_rows.t(), &dcols, T::one(), &mut grad.weight);
        accumulate_channel_bias(&mut grad.bias, dy, out_hw.0 * out_hw.1);
        let dx_rows = dcols.dot(&self.weight.t());
        from_rows(&dx_rows, x.nrows(), g.in_channels, hw.0 * hw.1)
    }
}

impl<T: Scalar> Parameters<T> for ConvTranspose2d<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Lookup table mapping integer ids to learned vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    /// `(num_ids, dim)`.
    pub table: Array2<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new<R: Rng + ?Sized>(num_ids: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            table: Array2::from_shape_vec((num_ids, dim), uniform_init(rng, num_ids * dim, scale))
                .expect("shape"),
        }
    }

    pub fn num_ids(&self) -> usize {
        self.table.nrows()
    }

    /// Rows of the table for each id; panics on an out-of-range id.
    pub fn forward(&self, ids: &[usize]) -> Array2<T> {
        self.table.select(Axis(0), ids)
    }

    pub fn backward(&self, ids: &[usize], dy: &Array2<T>, grad: &mut Embedding<T>) {
        for (row, &id) in dy.rows().into_iter().zip(ids) {
            let mut g = grad.table.row_mut(id);
            g += &row;
        }
    }
}

impl<T: Scalar> Parameters<T> for Embedding<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![self.table.as_slice().expect("standard layout")]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.table.as_slice_mut().expect("standard layout")]
    }
}

/// Adds `v[b, c]` to every spatial position of channel `c` in sample `b`.
pub fn add_per_channel<T: Scalar>(x: &mut Array2<T>, v: &Array2<T>, hw: usize) {
    let c = v.ncols();
    for (mut row, vals) in x.rows_mut().into_iter().zip(v.rows()) {
        let row = row.as_slice_mut().expect("contiguous");
        for ci in 0..c {
            let b = vals[ci];
            for e in &mut row[ci * hw..(ci + 1) * hw] {
                *e += b;
            }
        }
    }
}

/// Adjoint of [`add_per_channel`]: sums each channel's spatial gradient.
pub fn sum_per_channel<T: Scalar>(dy: &Array2<T>, channels: usize, hw: usize) -> Array2<T> {
    let mut out = Array2::zeros((dy.nrows(), channels));
    for (row, mut o) in dy.rows().into_iter().zip(out.rows_mut()) {
        for ci in 0..channels {
            o[ci] = row.slice(ndarray::s![ci * hw..(ci + 1) * hw]).sum();
        }
    }
    out
}

/// `x * sigmoid(x)`.
pub fn silu<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient of [`silu`] given the pre-activation input.
pub fn silu_backward<T: Scalar>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d *= s * (T::one() + v * (T::one() - s));
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Loss = sum(y * r) for a fixed random r, so dL/dy = r.
    fn check_gradients<L, F, B>(layer: &L, x: &Array2<f64>, forward: F, backward: B)
    where
        L: Parameters<f64> + Clone,
        F: Fn(&L, &Array2<f64>) -> Array2<f64>,
        B: Fn(&L, &Array2<f64>, &Array2<f64>, &mut L) -> Array2<f64>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = forward(layer, x);
        let r = Array2::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0));
        let loss = |l: &L, x: &Array2<f64>| (forward(l, x) * &r).sum();
        let mut grad = layer.zeros_like();
        let dx = backward(layer, x, &r, &mut grad);
        let h = 1e-6;

        // input gradient by central differences
        for idx in [0usize, 3, x.len() / 2, x.len() - 1] {
            let (i, j) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            let fd = (loss(layer, &xp) - loss(layer, &xm)) / (2.0 * h);
            assert!((fd - dx[[i, j]]).abs() < 1e-6, "dx[{i},{j}]: fd {fd} vs {}", dx[[i, j]]);
        }
        // parameter gradients
        let analytic: Vec<f64> = grad.tensors().concat();
        let n = layer.num_params();
        for idx in [0usize, 1, n / 3, n / 2, n - 1] {
            let perturbed = |delta: f64| {
                let mut l = layer.clone();
                let mut k = idx;
                for t in l.tensors_mut() {
                    if k < t.len() {
                        t[k] += delta;
                        break;
                    }
                    k -= t.len();
                }
                loss(&l, x)
            };
            let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            assert!((fd - analytic[idx]).abs() < 1e-6, "param {idx}: fd {fd} vs {}", analytic[idx]);
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = Dense::<f64>::new(5, 3, 1.0, &mut rng);
        let x = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        check_gradients(&layer, &x, |l, x| l.forward(x), |l, x, dy, g| l.backward(x, dy, g));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for geom in [
            ConvGeometry::same(2, 3, 3),
            ConvGeometry { in_channels: 2, out_channels: 3, kernel: 4, stride: 2, padding: 1 },
        ] {
            let layer = Conv2d::<f64>::new(geom, 1.0, &mut rng);
            let x = Array2::from_shape_fn((2, 2 * 6 * 6), |_| rng.random_range(-1.0..1.0));
            check_gradients(&layer, &x, |l, x| l.forward(x, (6, 6)), |l, x, dy, g| l.backward(x, (6, 6), dy, g));
        }
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let geom = ConvGeometry { in_channels: 3, out_channels: 2, kernel: 4, stride: 2, padding: 1 };
        let layer = ConvTranspose2d::<f64>::new(geom, 1.0, &mut rng);
        let x = Array2::from_shape_fn((2, 3 * 3 * 3), |_| rng.random_range(-1.0..1.0));
        let y = layer.forward(&x, (3, 3));
        assert_eq!(y.ncols(), 2 * 6 * 6);
        check_gradients(&layer, &x, |l, x| l.forward(x, (3, 3)), |l, x, dy, g| l.backward(x, (3, 3), dy, g));
    }

    #[test]
    fn same_conv_with_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::<f64>::new(ConvGeometry::same(1, 1, 3), 1.0, &mut rng);
        conv.weight.fill(0.0);
        conv.weight[[0, 4]] = 1.0;
        conv.bias.fill(0.0);
        let x = Array2::from_shape_fn((1, 16), |(_, j)| j as f64);
        assert_eq!(conv.forward(&x, (4, 4)), x);
    }

    #[test]
    fn silu_gradient() {
        let x = Array2::from_shape_vec((1, 3), vec![-2.0, 0.0, 1.5]).unwrap();
        let dy = Array2::from_elem((1, 3), 1.0);
        let g = silu_backward(&x, &dy);
        for j in 0..3 {
            let h = 1e-6;
            let f = |v: f64| v * sigmoid(v);
            let fd = (f(x[[0, j]] + h) - f(x[[0, j]] - h)) / (2.0 * h);
            assert!((fd - g[[0, j]]).abs() < 1e-8);
        }
    }
}
