//! Forward and backward kernels for the layer types of the network.
//!
//! The slice-level functions work on `[C, H, W]` buffers and are used by the
//! model; the tensor-level wrappers add shape checks.

use crate::imagecore::{Scalar, Tensor};

use super::NetError;

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yy, &xx) in y.iter_mut().zip(x) {
        *yy += alpha * xx;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Zero-pad every channel of `[C, H, W]` by `pad` on each side.
pub(crate) fn pad_chw<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, pad: usize) -> Vec<T> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); c * hp * wp];
    for ch in 0..c {
        for i in 0..h {
            let src = &x[(ch * h + i) * w..(ch * h + i + 1) * w];
            let dst = (ch * hp + i + pad) * wp + pad;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

/// Same-padded stride-1 convolution over a pre-padded input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward<T: Scalar>(
    xpad: &[T],
    c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
    f: usize,
    k: usize,
) -> Vec<T> {
    let wp = w + k - 1;
    let hp = h + k - 1;
    let mut y = vec![T::zero(); f * h * w];
    for (fo, out) in y.chunks_exact_mut(h * w).enumerate() {
        out.iter_mut().for_each(|v| *v = bias[fo]);
        for ci in 0..c {
            let plane = &xpad[ci * hp * wp..(ci + 1) * hp * wp];
            for u in 0..k {
                for v in 0..k {
                    let wt = weight[((fo * c + ci) * k + u) * k + v];
                    if wt == T::zero() {
                        continue;
                    }
                    for i in 0..h {
                        let src = &plane[(i + u) * wp + v..(i + u) * wp + v + w];
                        axpy(wt, src, &mut out[i * w..(i + 1) * w]);
                    }
                }
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients into `dw`, `db` and returns the
/// gradient with respect to the unpadded input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    xpad: &[T],
    c: usize,
    h: usize,
    w: usize,
    weight: &[T],
    f: usize,
    k: usize,
    g: &[T],
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let pad = k / 2;
    let wp = w + k - 1;
    let hp = h + k - 1;
    let mut dxpad = if need_dx {
        vec![T::zero(); c * hp * wp]
    } else {
        Vec::new()
    };
    for fo in 0..f {
        let gf = &g[fo * h * w..(fo + 1) * h * w];
        db[fo] += gf.iter().copied().sum();
        for ci in 0..c {
            let plane = &xpad[ci * hp * wp..(ci + 1) * hp * wp];
            for u in 0..k {
                for v in 0..k {
                    let widx = ((fo * c + ci) * k + u) * k + v;
                    let mut acc = T::zero();
                    for i in 0..h {
                        let src = &plane[(i + u) * wp + v..(i + u) * wp + v + w];
                        acc += dot(&gf[i * w..(i + 1) * w], src);
                    }
                    dw[widx] += acc;
                    if need_dx {
                        let wt = weight[widx];
                        let dplane = &mut dxpad[ci * hp * wp..(ci + 1) * hp * wp];
                        for i in 0..h {
                            let dst = &mut dplane[(i + u) * wp + v..(i + u) * wp + v + w];
                            axpy(wt, &gf[i * w..(i + 1) * w], dst);
                        }
                    }
                }
            }
        }
    }
    if !need_dx {
        return None;
    }
    let mut dx = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for i in 0..h {
            let start = (ci * hp + i + pad) * wp + pad;
            dx.extend_from_slice(&dxpad[start..start + w]);
        }
    }
    Some(dx)
}

pub(crate) fn relu_in_place<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zero the upstream gradient wherever the activation was clipped.
pub(crate) fn relu_mask<T: Scalar>(activated: &[T], g: &mut [T]) {
    for (gg, &a) in g.iter_mut().zip(activated) {
        if a <= T::zero() {
            *gg = T::zero();
        }
    }
}

/// 2×2 stride-2 max pooling. Returns pooled values and the flat input index of
/// each window's maximum (first in row-major order on ties).
pub(crate) fn maxpool2_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(c * ho * wo);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let base = (ch * h + 2 * i) * w + 2 * j;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                y.push(x[best]);
                idx.push(best);
            }
        }
    }
    (y, idx)
}

pub(crate) fn route_backward<T: Scalar>(g: &[T], idx: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&gg, &k) in g.iter().zip(idx) {
        dx[k] += gg;
    }
    dx
}

pub(crate) fn fc_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let n = x.len();
    weight
        .chunks_exact(n)
        .zip(bias)
        .map(|(row, &b)| b + dot(row, x))
        .collect()
}

/// Accumulates `dw += g xᵀ`, `db += g`; returns `Wᵀ g` when requested.
pub(crate) fn fc_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    g: &[T],
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Option<Vec<T>> {
    let n = x.len();
    let mut dx = if need_dx {
        vec![T::zero(); n]
    } else {
        Vec::new()
    };
    for (m, &gm) in g.iter().enumerate() {
        if gm == T::zero() {
            continue;
        }
        db[m] += gm;
        axpy(gm, x, &mut dw[m * n..(m + 1) * n]);
        if need_dx {
            axpy(gm, &weight[m * n..(m + 1) * n], &mut dx);
        }
    }
    need_dx.then_some(dx)
}

/// Max over consecutive groups of `pieces`, first index on ties.
pub(crate) fn maxout_forward<T: Scalar>(x: &[T], pieces: usize) -> (Vec<T>, Vec<usize>) {
    let mut y = Vec::with_capacity(x.len() / pieces);
    let mut idx = Vec::with_capacity(x.len() / pieces);
    for (gi, group) in x.chunks_exact(pieces).enumerate() {
        let mut best = 0;
        for (p, &v) in group.iter().enumerate().skip(1) {
            if v > group[best] {
                best = p;
            }
        }
        y.push(group[best]);
        idx.push(gi * pieces + best);
    }
    (y, idx)
}

/// Mean squared error and its gradient with respect to `pred`.
pub(crate) fn mse<T: Scalar>(pred: &[T], target: &[T]) -> (T, Vec<T>) {
    let n = T::of(pred.len() as f64);
    let two = T::of(2.0);
    let mut loss = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d * d;
            two * d / n
        })
        .collect();
    (loss / n, grad)
}

fn shape_err(what: &str, detail: String) -> NetError {
    NetError::ShapeMismatch(format!("{what}: {detail}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn conv_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize), NetError> {
    let [c, h, wd] = x.shape() else {
        return Err(shape_err("conv2d input", format!("{:?}", x.shape())));
    };
    let [f, cw, k, k2] = w.shape() else {
        return Err(shape_err("conv2d weight", format!("{:?}", w.shape())));
    };
    if cw != c || k != k2 || k % 2 == 0 || b.shape() != [*f] {
        return Err(shape_err(
            "conv2d",
            format!(
                "input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    Ok((*c, *h, *wd, *f, *k))
}

/// `y[f,i,j] = b[f] + Σ w[f,c,u,v] · x_pad[c, i+u, j+v]`, zero padding `k/2`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, NetError> {
    let (c, h, wd, f, k) = conv_dims(x, w, b)?;
    let xpad = pad_chw(x.data(), c, h, wd, k / 2);
    let y = conv_forward(&xpad, c, h, wd, w.data(), b.data(), f, k);
    Ok(Tensor::new(vec![f, h, wd], y)?)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<ConvGrads<T>, NetError> {
    let (c, h, wd, f, k) = conv_dims(x, w, b)?;
    if g.shape() != [f, h, wd] {
        return Err(shape_err(
            "conv2d upstream gradient",
            format!("{:?}", g.shape()),
        ));
    }
    let xpad = pad_chw(x.data(), c, h, wd, k / 2);
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); f];
    let dx = conv_backward(
        &xpad,
        c,
        h,
        wd,
        w.data(),
        f,
        k,
        g.data(),
        &mut dw,
        &mut db,
        true,
    )
    .expect("input gradient requested");
    Ok(ConvGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        weight: Tensor::new(w.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![f], db)?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>, NetError> {
    if x.shape() != g.shape() {
        return Err(shape_err(
            "relu",
            format!("{:?} vs {:?}", x.shape(), g.shape()),
        ));
    }
    let mut out = g.clone();
    relu_mask(relu(x).data(), out.data_mut());
    Ok(out)
}

fn pool_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize), NetError> {
    let [c, h, w] = x.shape() else {
        return Err(shape_err("maxpool2 input", format!("{:?}", x.shape())));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NetError::OddDimension {
            height: *h,
            width: *w,
        });
    }
    Ok((*c, *h, *w))
}

pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, NetError> {
    let (c, h, w) = pool_dims(x)?;
    let (y, _) = maxpool2_forward(x.data(), c, h, w);
    Ok(Tensor::new(vec![c, h / 2, w / 2], y)?)
}

pub fn maxpool2_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>, NetError> {
    let (c, h, w) = pool_dims(x)?;
    if g.shape() != [c, h / 2, w / 2] {
        return Err(shape_err(
            "maxpool2 upstream gradient",
            format!("{:?}", g.shape()),
        ));
    }
    let (_, idx) = maxpool2_forward(x.data(), c, h, w);
    Ok(Tensor::new(
        x.shape().to_vec(),
        route_backward(g.data(), &idx, x.len()),
    )?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn fc_dims<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(usize, usize), NetError> {
    match (x.shape(), w.shape(), b.shape()) {
        ([n], [m, n2], [m2]) if n == n2 && m == m2 => Ok((*m, *n)),
        _ => Err(shape_err(
            "fully_connected",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        )),
    }
}

/// `y = W x + b`.
pub fn fully_connected<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, NetError> {
    let (m, _) = fc_dims(x, w, b)?;
    Ok(Tensor::new(
        vec![m],
        fc_forward(x.data(), w.data(), b.data()),
    )?)
}

pub fn fully_connected_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<FcGrads<T>, NetError> {
    let (m, n) = fc_dims(x, w, b)?;
    if g.shape() != [m] {
        return Err(shape_err(
            "fully_connected upstream gradient",
            format!("{:?}", g.shape()),
        ));
    }
    let mut dw = vec![T::zero(); m * n];
    let mut db = vec![T::zero(); m];
    let dx = fc_backward(x.data(), w.data(), g.data(), &mut dw, &mut db, true).expect("requested");
    Ok(FcGrads {
        input: Tensor::new(vec![n], dx)?,
        weight: Tensor::new(vec![m, n], dw)?,
        bias: Tensor::new(vec![m], db)?,
    })
}

fn check_pieces<T: Scalar>(x: &Tensor<T>, pieces: usize) -> Result<(), NetError> {
    if pieces == 0 || x.len() % pieces != 0 || x.len() / pieces == 0 {
        return Err(NetError::IndivisibleLength {
            len: x.len(),
            pieces,
        });
    }
    Ok(())
}

pub fn maxout<T: Scalar>(x: &Tensor<T>, pieces: usize) -> Result<Tensor<T>, NetError> {
    check_pieces(x, pieces)?;
    let (y, _) = maxout_forward(x.data(), pieces);
    Ok(Tensor::new(vec![y.len()], y)?)
}

pub fn maxout_backward<T: Scalar>(
    x: &Tensor<T>,
    pieces: usize,
    g: &Tensor<T>,
) -> Result<Tensor<T>, NetError> {
    check_pieces(x, pieces)?;
    if g.len() != x.len() / pieces {
        return Err(shape_err(
            "maxout upstream gradient",
            format!("{:?}", g.shape()),
        ));
    }
    let (_, idx) = maxout_forward(x.data(), pieces);
    Ok(Tensor::new(
        vec![x.len()],
        route_backward(g.data(), &idx, x.len()),
    )?)
}

/// `L = mean((pred − target)²)` and `∂L/∂pred`.
pub fn mse_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(T, Tensor<T>), NetError> {
    if pred.len() != target.len() {
        return Err(shape_err(
            "mse_loss",
            format!("{} vs {}", pred.len(), target.len()),
        ));
    }
    let (loss, grad) = mse(pred.data(), target.data());
    Ok((loss, Tensor::new(pred.shape().to_vec(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_and_padding() {
        let x = Tensor::from_fn_2d(3, 4, |i, j| (i * 4 + j) as f64)
            .reshape(vec![1, 3, 4])
            .unwrap();
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        assert_eq!(conv2d(&x, &w, &b).unwrap(), x);

        let c = Tensor::full(vec![1, 4, 4], 2.0);
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let y = conv2d(&c, &w, &b).unwrap();
        assert_eq!(y.data()[5], 18.0);
        assert_eq!(y.data()[0], 8.0);
        assert_eq!(y.data()[1], 12.0);
    }

    #[test]
    fn conv_rejects_mismatched_channels() {
        let x = Tensor::<f64>::zeros(vec![2, 3, 3]);
        let w = Tensor::zeros(vec![1, 3, 3, 3]);
        let b = Tensor::zeros(vec![1]);
        assert!(matches!(
            conv2d(&x, &w, &b),
            Err(NetError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn relu_and_pool_cases() {
        let r = relu(&t(&[2], &[-1.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 2.0]);

        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(maxpool2(&x).unwrap().data(), &[4.0]);
        let g = maxpool2_backward(&x, &t(&[1, 1, 1], &[1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);

        let tie = t(&[1, 2, 2], &[5.0; 4]);
        let g = maxpool2_backward(&tie, &t(&[1, 1, 1], &[1.0])).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);

        let odd = Tensor::<f64>::zeros(vec![1, 3, 2]);
        assert!(matches!(maxpool2(&odd), Err(NetError::OddDimension { .. })));
    }

    #[test]
    fn fc_cases() {
        let x = t(&[2], &[2.0, 3.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(fully_connected(&x, &eye, &t(&[2], &[0.0, 0.0])).unwrap(), x);
        let y = fully_connected(&x, &t(&[1, 2], &[1.0, 1.0]), &t(&[1], &[0.5])).unwrap();
        assert_eq!(y.data(), &[5.5]);
        assert!(fully_connected(&x, &t(&[1, 3], &[1.0; 3]), &t(&[1], &[0.0])).is_err());
    }

    #[test]
    fn maxout_cases() {
        let y = maxout(&t(&[4], &[1.0, 3.0, 2.0, 0.0]), 2).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0]);
        let x = t(&[2], &[4.0, 4.0]);
        assert_eq!(maxout(&x, 2).unwrap().data(), &[4.0]);
        let g = maxout_backward(&x, 2, &t(&[1], &[1.0])).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0]);
        assert!(matches!(
            maxout(&t(&[3], &[1.0; 3]), 2),
            Err(NetError::IndivisibleLength { .. })
        ));
    }

    #[test]
    fn mse_cases() {
        let target = Tensor::from_fn_2d(1, 1024, |_, j| (j % 7) as f64 / 7.0)
            .reshape(vec![1024])
            .unwrap();
        assert_eq!(mse_loss(&target, &target).unwrap().0, 0.0);
        let pred = target.map(|v| v + 0.1);
        let (l, g) = mse_loss(&pred, &target).unwrap();
        assert!((l - 0.01).abs() < 1e-12);
        assert!(g.data().iter().all(|&v| (v - 0.2 / 1024.0).abs() < 1e-15));
        assert!(mse_loss(&pred, &t(&[2], &[0.0, 0.0])).is_err());
    }
}
