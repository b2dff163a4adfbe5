//! Layer graph with hand-written backward passes.
//!
//! A [`Sequential`] owns no parameters; it refers to tensors in a
//! [`ParamStore`] by [`ParamId`], so the same graph runs on `f32` training
//! weights and on an `f64` copy used for gradient checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scalar::{gemm, Scalar};
use super::tensor::{Gradients, ParamId, ParamStore, Tensor};

/// Spatial geometry of a 2-D convolution (or of the convolution whose
/// adjoint a transposed convolution computes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `floor((d + 2 pad - kernel) / stride) + 1`, or `None` when it would be < 1.
pub fn conv_out_dim(d: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = d + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// `(d - 1) stride - 2 pad + kernel + output_padding`.
pub fn conv_transpose_out_dim(d: usize, kernel: usize, stride: usize, pad: usize, output_padding: usize) -> Option<usize> {
    let full = (d - 1) * stride + kernel + output_padding;
    full.checked_sub(2 * pad).filter(|v| *v >= 1)
}

impl ConvGeom {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, in_h: usize, in_w: usize) -> Option<Self> {
        Some(ConvGeom {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            in_h,
            in_w,
            out_h: conv_out_dim(in_h, kernel, stride, pad)?,
            out_w: conv_out_dim(in_w, kernel, stride, pad)?,
        })
    }

    /// Transposed convolution from `in_h×in_w` with explicit output padding.
    #[allow(clippy::too_many_arguments)]
    pub fn transposed(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
        output_padding: (usize, usize),
    ) -> Option<Self> {
        if output_padding.0 >= stride || output_padding.1 >= stride {
            return None;
        }
        Some(ConvGeom {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            in_h,
            in_w,
            out_h: conv_transpose_out_dim(in_h, kernel, stride, pad, output_padding.0)?,
            out_w: conv_transpose_out_dim(in_w, kernel, stride, pad, output_padding.1)?,
        })
    }

    fn col_rows(&self, ch: usize) -> usize {
        ch * self.kernel * self.kernel
    }
}

/// Unfold `x` (`c × h × w`) into `col` (`c·k·k × oh·ow`).
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, oh: usize, ow: usize, col: &mut [S]) {
    let opix = oh * ow;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * opix..(row + 1) * opix];
                for oi in 0..oh {
                    let ii = (oi * s + ki) as isize - p as isize;
                    let drow = &mut dst[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= h as isize {
                        drow.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let xrow = &xc[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * s + kj) as isize - p as isize;
                        *d = if jj < 0 || jj >= w as isize { S::zero() } else { xrow[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(col: &[S], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, oh: usize, ow: usize, x: &mut [S]) {
    let opix = oh * ow;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * opix..(row + 1) * opix];
                for oi in 0..oh {
                    let ii = (oi * s + ki) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let xrow = &mut xc[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..ow {
                        let jj = (oj * s + kj) as isize - p as isize;
                        if jj >= 0 && jj < w as isize {
                            xrow[jj as usize] = xrow[jj as usize] + src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// `y = x W + b`, `W: [in, out]`.
    Dense { w: ParamId, b: ParamId, inp: usize, out: usize },
    /// `W: [out_ch, in_ch, k, k]`.
    Conv2d { w: ParamId, b: ParamId, geom: ConvGeom },
    /// `W: [in_ch, out_ch, k, k]`; `geom.in_*` is the (small) input size.
    ConvTranspose2d { w: ParamId, b: ParamId, geom: ConvGeom },
    Relu,
    Sigmoid,
    Tanh,
    /// Per-sample reshape; the batch dimension is kept.
    Reshape { shape: Vec<usize> },
}

impl Layer {
    pub fn dense<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let w = store.he_uniform(format!("{name}.weight"), &[inp, out], inp, rng);
        let b = store.zeros(format!("{name}.bias"), &[out]);
        Layer::Dense { w, b, inp, out }
    }

    pub fn conv<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, geom: ConvGeom, rng: &mut R) -> Self {
        let k = geom.kernel;
        let w = store.he_uniform(format!("{name}.weight"), &[geom.out_ch, geom.in_ch, k, k], geom.in_ch * k * k, rng);
        let b = store.zeros(format!("{name}.bias"), &[geom.out_ch]);
        Layer::Conv2d { w, b, geom }
    }

    pub fn conv_transpose<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, geom: ConvGeom, rng: &mut R) -> Self {
        let k = geom.kernel;
        let w = store.he_uniform(format!("{name}.weight"), &[geom.in_ch, geom.out_ch, k, k], geom.in_ch * k * k, rng);
        let b = store.zeros(format!("{name}.bias"), &[geom.out_ch]);
        Layer::ConvTranspose2d { w, b, geom }
    }

    fn output_shape(&self, input: &[usize]) -> Vec<usize> {
        let n = input[0];
        match self {
            Layer::Dense { out, .. } => vec![n, *out],
            Layer::Conv2d { geom, .. } | Layer::ConvTranspose2d { geom, .. } => vec![n, geom.out_ch, geom.out_h, geom.out_w],
            Layer::Relu | Layer::Sigmoid | Layer::Tanh => input.to_vec(),
            Layer::Reshape { shape } => std::iter::once(n).chain(shape.iter().copied()).collect(),
        }
    }

    fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: &Tensor<S>) -> Tensor<S> {
        let n = x.batch();
        let mut y = Tensor::zeros(&self.output_shape(x.shape()));
        match self {
            Layer::Dense { w, b, inp, out } => {
                assert_eq!(x.sample_len(), *inp, "dense input width");
                let ys = y.data_mut();
                let bias = p.get(*b);
                for row in ys.chunks_mut(*out) {
                    row.copy_from_slice(bias);
                }
                gemm(n, *inp, *out, S::one(), x.data(), false, p.get(*w), false, S::one(), ys);
            }
            Layer::Conv2d { w, b, geom: g } => {
                assert_eq!(x.sample_len(), g.in_ch * g.in_h * g.in_w, "conv input shape");
                let opix = g.out_h * g.out_w;
                let rows = g.col_rows(g.in_ch);
                let mut col = vec![S::zero(); rows * opix];
                let bias = p.get(*b);
                let il = x.sample_len();
                let ol = g.out_ch * opix;
                for s in 0..n {
                    im2col(&x.data()[s * il..(s + 1) * il], g.in_ch, g.in_h, g.in_w, g.kernel, g.stride, g.pad, g.out_h, g.out_w, &mut col);
                    let ys = &mut y.data_mut()[s * ol..(s + 1) * ol];
                    for (co, chunk) in ys.chunks_mut(opix).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = bias[co]);
                    }
                    gemm(g.out_ch, rows, opix, S::one(), p.get(*w), false, &col, false, S::one(), ys);
                }
            }
            Layer::ConvTranspose2d { w, b, geom: g } => {
                assert_eq!(x.sample_len(), g.in_ch * g.in_h * g.in_w, "conv-transpose input shape");
                let ipix = g.in_h * g.in_w;
                let rows = g.col_rows(g.out_ch);
                let mut col = vec![S::zero(); rows * ipix];
                let bias = p.get(*b);
                let il = x.sample_len();
                let opix = g.out_h * g.out_w;
                let ol = g.out_ch * opix;
                for s in 0..n {
                    gemm(rows, g.in_ch, ipix, S::one(), p.get(*w), true, &x.data()[s * il..(s + 1) * il], false, S::zero(), &mut col);
                    let ys = &mut y.data_mut()[s * ol..(s + 1) * ol];
                    for (co, chunk) in ys.chunks_mut(opix).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = bias[co]);
                    }
                    col2im(&col, g.out_ch, g.out_h, g.out_w, g.kernel, g.stride, g.pad, g.in_h, g.in_w, ys);
                }
            }
            Layer::Relu => {
                for (o, i) in y.data_mut().iter_mut().zip(x.data()) {
                    *o = if *i > S::zero() { *i } else { S::zero() };
                }
            }
            Layer::Sigmoid => {
                for (o, i) in y.data_mut().iter_mut().zip(x.data()) {
                    *o = S::one() / (S::one() + (-*i).exp());
                }
            }
            Layer::Tanh => {
                for (o, i) in y.data_mut().iter_mut().zip(x.data()) {
                    *o = i.tanh();
                }
            }
            Layer::Reshape { .. } => y.data_mut().copy_from_slice(x.data()),
        }
        y
    }

    /// Backpropagate `dy` through the layer, accumulating parameter
    /// gradients into `g` and returning `dx`.
    fn backward<S: Scalar>(&self, p: &ParamStore<S>, x: &Tensor<S>, y: &Tensor<S>, dy: &Tensor<S>, g: &mut Gradients<S>) -> Tensor<S> {
        let n = x.batch();
        let mut dx = Tensor::zeros(x.shape());
        match self {
            Layer::Dense { w, b, inp, out } => {
                gemm(*inp, n, *out, S::one(), x.data(), true, dy.data(), false, S::one(), g.get_mut(*w));
                let db = g.get_mut(*b);
                for row in dy.data().chunks(*out) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d = *d + *v;
                    }
                }
                gemm(n, *out, *inp, S::one(), dy.data(), false, p.get(*w), true, S::zero(), dx.data_mut());
            }
            Layer::Conv2d { w, b, geom: gm } => {
                let opix = gm.out_h * gm.out_w;
                let rows = gm.col_rows(gm.in_ch);
                let mut col = vec![S::zero(); rows * opix];
                let mut dcol = vec![S::zero(); rows * opix];
                let il = x.sample_len();
                let ol = gm.out_ch * opix;
                for s in 0..n {
                    let xs = &x.data()[s * il..(s + 1) * il];
                    let dys = &dy.data()[s * ol..(s + 1) * ol];
                    im2col(xs, gm.in_ch, gm.in_h, gm.in_w, gm.kernel, gm.stride, gm.pad, gm.out_h, gm.out_w, &mut col);
                    gemm(gm.out_ch, opix, rows, S::one(), dys, false, &col, true, S::one(), g.get_mut(*w));
                    let db = g.get_mut(*b);
                    for (co, chunk) in dys.chunks(opix).enumerate() {
                        db[co] = db[co] + chunk.iter().copied().sum::<S>();
                    }
                    gemm(rows, gm.out_ch, opix, S::one(), p.get(*w), true, dys, false, S::zero(), &mut dcol);
                    col2im(&dcol, gm.in_ch, gm.in_h, gm.in_w, gm.kernel, gm.stride, gm.pad, gm.out_h, gm.out_w, &mut dx.data_mut()[s * il..(s + 1) * il]);
                }
            }
            Layer::ConvTranspose2d { w, b, geom: gm } => {
                let ipix = gm.in_h * gm.in_w;
                let rows = gm.col_rows(gm.out_ch);
                let mut dcol = vec![S::zero(); rows * ipix];
                let il = x.sample_len();
                let opix = gm.out_h * gm.out_w;
                let ol = gm.out_ch * opix;
                for s in 0..n {
                    let xs = &x.data()[s * il..(s + 1) * il];
                    let dys = &dy.data()[s * ol..(s + 1) * ol];
                    let db = g.get_mut(*b);
                    for (co, chunk) in dys.chunks(opix).enumerate() {
                        db[co] = db[co] + chunk.iter().copied().sum::<S>();
                    }
                    im2col(dys, gm.out_ch, gm.out_h, gm.out_w, gm.kernel, gm.stride, gm.pad, gm.in_h, gm.in_w, &mut dcol);
                    gemm(gm.in_ch, ipix, rows, S::one(), xs, false, &dcol, true, S::one(), g.get_mut(*w));
                    gemm(gm.in_ch, rows, ipix, S::one(), p.get(*w), false, &dcol, false, S::zero(), &mut dx.data_mut()[s * il..(s + 1) * il]);
                }
            }
            Layer::Relu => {
                for ((d, i), o) in dx.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
                    *d = if *i > S::zero() { *o } else { S::zero() };
                }
            }
            Layer::Sigmoid => {
                for ((d, s), o) in dx.data_mut().iter_mut().zip(y.data()).zip(dy.data()) {
                    *d = *o * *s * (S::one() - *s);
                }
            }
            Layer::Tanh => {
                for ((d, t), o) in dx.data_mut().iter_mut().zip(y.data()).zip(dy.data()) {
                    *d = *o * (S::one() - *t * *t);
                }
            }
            Layer::Reshape { .. } => dx.data_mut().copy_from_slice(dy.data()),
        }
        dx
    }
}

/// Activations retained by a forward pass: `acts[i]` is the input to layer
/// `i`, and the last entry is the network output.
#[derive(Debug, Clone)]
pub struct Tape<S> {
    acts: Vec<Tensor<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn output(&self) -> &Tensor<S> {
        self.acts.last().expect("tape holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: Layer) -> &mut Self {
        self.layers.push(layer);
        self
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Multilayer perceptron `widths[0] → … → widths[last]`, with `act`
    /// after every hidden layer and a linear output.
    pub fn mlp<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, widths: &[usize], act: Layer, rng: &mut R) -> Self {
        let mut net = Sequential::new();
        for (i, pair) in widths.windows(2).enumerate() {
            net.push(Layer::dense(store, &format!("{name}.{i}"), pair[0], pair[1], rng));
            if i + 2 < widths.len() {
                net.push(act.clone());
            }
        }
        net
    }

    pub fn forward<S: Scalar>(&self, p: &ParamStore<S>, x: Tensor<S>) -> Tape<S> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            let y = layer.forward(p, acts.last().unwrap());
            acts.push(y);
        }
        Tape { acts }
    }

    /// Forward pass without retaining intermediate activations.
    pub fn infer<S: Scalar>(&self, p: &ParamStore<S>, x: &Tensor<S>) -> Tensor<S> {
        let mut cur: Option<Tensor<S>> = None;
        for layer in &self.layers {
            let next = layer.forward(p, cur.as_ref().unwrap_or(x));
            cur = Some(next);
        }
        cur.unwrap_or_else(|| x.clone())
    }

    pub fn backward<S: Scalar>(&self, p: &ParamStore<S>, tape: &Tape<S>, dy: Tensor<S>, g: &mut Gradients<S>) -> Tensor<S> {
        let mut grad = dy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            grad = layer.backward(p, &tape.acts[i], &tape.acts[i + 1], &grad, g);
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct (loop) convolution oracle.
    fn conv_naive(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
        let k = g.kernel;
        let mut y = vec![0.0; g.out_ch * g.out_h * g.out_w];
        for co in 0..g.out_ch {
            for oi in 0..g.out_h {
                for oj in 0..g.out_w {
                    let mut acc = bias[co];
                    for ci in 0..g.in_ch {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                                let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < g.in_h && (jj as usize) < g.in_w {
                                    acc += w[((co * g.in_ch + ci) * k + ki) * k + kj] * x[(ci * g.in_h + ii as usize) * g.in_w + jj as usize];
                                }
                            }
                        }
                    }
                    y[(co * g.out_h + oi) * g.out_w + oj] = acc;
                }
            }
        }
        y
    }

    /// Scatter-form transposed convolution oracle.
    fn conv_t_naive(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
        let k = g.kernel;
        let mut y = vec![0.0; g.out_ch * g.out_h * g.out_w];
        for co in 0..g.out_ch {
            for v in &mut y[co * g.out_h * g.out_w..(co + 1) * g.out_h * g.out_w] {
                *v = bias[co];
            }
        }
        for ci in 0..g.in_ch {
            for i in 0..g.in_h {
                for j in 0..g.in_w {
                    let xv = x[(ci * g.in_h + i) * g.in_w + j];
                    for co in 0..g.out_ch {
                        for ki in 0..k {
                            for kj in 0..k {
                                let oi = (i * g.stride + ki) as isize - g.pad as isize;
                                let oj = (j * g.stride + kj) as isize - g.pad as isize;
                                if oi >= 0 && oj >= 0 && (oi as usize) < g.out_h && (oj as usize) < g.out_w {
                                    y[(co * g.out_h + oi as usize) * g.out_w + oj as usize] += xv * w[((ci * g.out_ch + co) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let g = ConvGeom::conv(2, 3, 5, 2, 1, 9, 8).unwrap();
        let layer = Layer::conv(&mut store, "c", g, &mut rng);
        if let Layer::Conv2d { b, .. } = &layer {
            store.get_mut(*b).iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64);
        }
        let x: Vec<f64> = (0..2 * 9 * 8).map(|i| (i as f64 * 0.7).sin()).collect();
        let y = layer.forward(&store, &Tensor::from_vec(&[1, 2, 9, 8], x.clone()).unwrap());
        let want = conv_naive(&x, store.get(ParamId(0)), store.get(ParamId(1)), &g);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_forward_matches_scatter_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let g = ConvGeom::transposed(3, 2, 3, 2, 1, 4, 5, (1, 0)).unwrap();
        assert_eq!((g.out_h, g.out_w), (8, 9));
        let layer = Layer::conv_transpose(&mut store, "t", g, &mut rng);
        let x: Vec<f64> = (0..3 * 4 * 5).map(|i| (i as f64 * 0.3).cos()).collect();
        let y = layer.forward(&store, &Tensor::from_vec(&[1, 3, 4, 5], x.clone()).unwrap());
        let want = conv_t_naive(&x, store.get(ParamId(0)), store.get(ParamId(1)), &g);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_dims_follow_conv_arithmetic() {
        assert_eq!(conv_out_dim(128, 5, 2, 1), Some(63));
        assert_eq!(conv_out_dim(63, 5, 2, 1), Some(31));
        assert_eq!(conv_out_dim(31, 5, 2, 1), Some(15));
        assert_eq!(conv_out_dim(2, 5, 2, 1), None);
        assert_eq!(conv_transpose_out_dim(8, 3, 2, 1, 1), Some(16));
        assert_eq!(conv_transpose_out_dim(8, 3, 2, 1, 0), Some(15));
    }

    #[test]
    fn mlp_has_linear_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let net = Sequential::mlp(&mut store, "m", &[2, 4, 4, 1], Layer::Relu, &mut rng);
        assert_eq!(net.layers().len(), 5);
        assert!(matches!(net.layers().last(), Some(Layer::Dense { .. })));
        assert_eq!(store.scalar_count(), 2 * 4 + 4 + 4 * 4 + 4 + 4 + 1);
    }
}
