//! Forward and backward kernels for the non-normalizing layer types.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn spatial_dims(x: &Tensor<impl Real>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::Shape(format!("{what} needs [batch, c, h, w], got {s:?}"))),
    }
}

/// Unfolds 3x3 neighbourhoods (zero border of 1) into a `[c*9, n*h*w]` matrix.
fn im2col<R: Real>(x: &[R], n: usize, c: usize, h: usize, w: usize) -> Vec<R> {
    let hw = h * w;
    let cols_per_row = n * hw;
    let mut cols = vec![R::zero(); c * 9 * cols_per_row];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * cols_per_row;
                for s in 0..n {
                    let src = &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    let dst = &mut cols[row + s * hw..row + (s + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                dst[y * w + xx] = src[sy * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<R: Real>(cols: &[R], n: usize, c: usize, h: usize, w: usize) -> Vec<R> {
    let hw = h * w;
    let cols_per_row = n * hw;
    let mut x = vec![R::zero(); n * c * hw];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * cols_per_row;
                for s in 0..n {
                    let src = &cols[row + s * hw..row + (s + 1) * hw];
                    let dst = &mut x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < w as isize {
                                dst[sy * w + sx as usize] += src[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Saved state of a convolution forward pass.
#[derive(Clone, Debug)]
pub struct ConvCache<R> {
    cols: Vec<R>,
    in_shape: Vec<usize>,
}

/// 3x3 convolution, stride 1, zero padding 1. `weight` is `[out, in, 3, 3]`.
pub fn conv3x3_forward<R: Real>(
    x: &Tensor<R>,
    weight: &Tensor<R>,
    bias: Option<&Tensor<R>>,
) -> Result<(Tensor<R>, ConvCache<R>)> {
    let (n, c, h, w) = spatial_dims(x, "conv3x3")?;
    let out_c = match *weight.shape() {
        [o, i, 3, 3] if i == c => o,
        ref s => {
            return Err(Error::Shape(format!(
                "conv3x3 weight {s:?} does not fit input with {c} channels"
            )))
        }
    };
    if let Some(b) = bias {
        if b.shape() != [out_c] {
            return Err(Error::Shape(format!(
                "conv3x3 bias {:?}, expected [{out_c}]",
                b.shape()
            )));
        }
    }
    let hw = h * w;
    let k = c * 9;
    let cols = im2col(x.data(), n, c, h, w);

    // out[o, s*hw + p] = W[o, :] . cols[:, s*hw + p], written straight into NCHW order.
    let mut out = vec![R::zero(); n * out_c * hw];
    for s in 0..n {
        R::gemm(
            out_c,
            k,
            hw,
            R::one(),
            weight.data(),
            (k as isize, 1),
            &cols[s * hw..],
            ((n * hw) as isize, 1),
            R::zero(),
            &mut out[s * out_c * hw..(s + 1) * out_c * hw],
            (hw as isize, 1),
        );
    }
    if let Some(b) = bias {
        for s in 0..n {
            for (o, &bo) in b.data().iter().enumerate() {
                let start = (s * out_c + o) * hw;
                out[start..start + hw].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    Ok((
        Tensor::new(vec![n, out_c, h, w], out)?,
        ConvCache {
            cols,
            in_shape: x.shape().to_vec(),
        },
    ))
}

/// Returns `(dx, dweight, dbias)`; `dbias` is `None` when the layer has no bias.
pub fn conv3x3_backward<R: Real>(
    cache: &ConvCache<R>,
    weight: &Tensor<R>,
    has_bias: bool,
    dout: &Tensor<R>,
) -> Result<(Tensor<R>, Tensor<R>, Option<Tensor<R>>)> {
    let (n, c, h, w) = match *cache.in_shape.as_slice() {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::Shape("conv3x3 cache has a bad input shape".into())),
    };
    let out_c = weight.shape()[0];
    if dout.shape() != [n, out_c, h, w] {
        return Err(Error::Shape(format!(
            "conv3x3 upstream {:?}, expected {:?}",
            dout.shape(),
            [n, out_c, h, w]
        )));
    }
    let hw = h * w;
    let k = c * 9;
    let g = dout.data();

    let mut dweight = vec![R::zero(); out_c * k];
    let mut dcols = vec![R::zero(); k * n * hw];
    for s in 0..n {
        let g_s = &g[s * out_c * hw..(s + 1) * out_c * hw];
        // dW += g_s (out_c x hw) * cols_s^T (hw x k)
        R::gemm(
            out_c,
            hw,
            k,
            R::one(),
            g_s,
            (hw as isize, 1),
            &cache.cols[s * hw..],
            (1, (n * hw) as isize),
            R::one(),
            &mut dweight,
            (k as isize, 1),
        );
        // dcols_s = W^T (k x out_c) * g_s (out_c x hw)
        R::gemm(
            k,
            out_c,
            hw,
            R::one(),
            weight.data(),
            (1, k as isize),
            g_s,
            (hw as isize, 1),
            R::zero(),
            &mut dcols[s * hw..],
            ((n * hw) as isize, 1),
        );
    }
    let dbias = has_bias.then(|| {
        let mut db = vec![R::zero(); out_c];
        for s in 0..n {
            for (o, slot) in db.iter_mut().enumerate() {
                let start = (s * out_c + o) * hw;
                *slot += g[start..start + hw].iter().copied().sum::<R>();
            }
        }
        Tensor::from_vec(db)
    });
    let dx = col2im(&dcols, n, c, h, w);
    Ok((
        Tensor::new(cache.in_shape.clone(), dx)?,
        Tensor::new(weight.shape().to_vec(), dweight)?,
        dbias,
    ))
}

/// `y = x W^T + b` with `x` flattened to `[batch, in]` and `W` of shape `[out, in]`.
pub fn dense_forward<R: Real>(x: &Tensor<R>, weight: &Tensor<R>, bias: Option<&Tensor<R>>) -> Result<Tensor<R>> {
    let n = x.batch();
    let (out_f, in_f) = match *weight.shape() {
        [o, i] => (o, i),
        ref s => return Err(Error::Shape(format!("dense weight {s:?} is not 2-d"))),
    };
    if n == 0 || x.len() != n * in_f {
        return Err(Error::Shape(format!(
            "dense layer expects {in_f} features per sample, input is {:?}",
            x.shape()
        )));
    }
    let mut y = vec![R::zero(); n * out_f];
    R::gemm(
        n,
        in_f,
        out_f,
        R::one(),
        x.data(),
        (in_f as isize, 1),
        weight.data(),
        (1, in_f as isize),
        R::zero(),
        &mut y,
        (out_f as isize, 1),
    );
    if let Some(b) = bias {
        if b.shape() != [out_f] {
            return Err(Error::Shape(format!("dense bias {:?}, expected [{out_f}]", b.shape())));
        }
        for row in y.chunks_mut(out_f) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bo)| *v += bo);
        }
    }
    Tensor::new(vec![n, out_f], y)
}

pub fn dense_backward<R: Real>(
    x: &Tensor<R>,
    weight: &Tensor<R>,
    has_bias: bool,
    dout: &Tensor<R>,
) -> Result<(Tensor<R>, Tensor<R>, Option<Tensor<R>>)> {
    let n = x.batch();
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    if dout.shape() != [n, out_f] {
        return Err(Error::Shape(format!(
            "dense upstream {:?}, expected [{n}, {out_f}]",
            dout.shape()
        )));
    }
    let mut dw = vec![R::zero(); out_f * in_f];
    // dW = dout^T (out x n) * x (n x in)
    R::gemm(
        out_f,
        n,
        in_f,
        R::one(),
        dout.data(),
        (1, out_f as isize),
        x.data(),
        (in_f as isize, 1),
        R::zero(),
        &mut dw,
        (in_f as isize, 1),
    );
    let mut dx = vec![R::zero(); n * in_f];
    R::gemm(
        n,
        out_f,
        in_f,
        R::one(),
        dout.data(),
        (out_f as isize, 1),
        weight.data(),
        (in_f as isize, 1),
        R::zero(),
        &mut dx,
        (in_f as isize, 1),
    );
    let db = has_bias.then(|| {
        let mut db = vec![R::zero(); out_f];
        for row in dout.data().chunks(out_f) {
            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
        }
        Tensor::from_vec(db)
    });
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![out_f, in_f], dw)?,
        db,
    ))
}

/// Returns the activations and the mask of strictly positive inputs.
pub fn relu_forward<R: Real>(x: &Tensor<R>) -> (Tensor<R>, Vec<bool>) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > R::zero()).collect();
    let y = x.map(|v| if v > R::zero() { v } else { R::zero() });
    (y, mask)
}

pub fn relu_backward<R: Real>(mask: &[bool], dout: &Tensor<R>) -> Result<Tensor<R>> {
    if mask.len() != dout.len() {
        return Err(Error::Shape("relu upstream does not match cached mask".into()));
    }
    let dx = dout
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &m)| if m { g } else { R::zero() })
        .collect();
    Tensor::new(dout.shape().to_vec(), dx)
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Also returns, per output, the flat input index that won (first maximum in
/// row-major order).
pub fn maxpool2_forward<R: Real>(x: &Tensor<R>) -> Result<(Tensor<R>, Vec<u32>)> {
    let (n, c, h, w) = spatial_dims(x, "maxpool2")?;
    let (oh, ow) = (h / 2, w / 2);
    let data = x.data();
    let mut y = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                y.push(data[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], y)?, argmax))
}

pub fn maxpool2_backward<R: Real>(in_shape: &[usize], argmax: &[u32], dout: &Tensor<R>) -> Result<Tensor<R>> {
    if argmax.len() != dout.len() {
        return Err(Error::Shape("maxpool2 upstream does not match cached indices".into()));
    }
    let mut dx = vec![R::zero(); in_shape.iter().product()];
    for (&idx, &g) in argmax.iter().zip(dout.data()) {
        dx[idx as usize] += g;
    }
    Tensor::new(in_shape.to_vec(), dx)
}

/// Mean over spatial positions: `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool_forward<R: Real>(x: &Tensor<R>) -> Result<Tensor<R>> {
    let (n, c, h, w) = spatial_dims(x, "global_avg_pool")?;
    let hw = h * w;
    let scale = R::of_f64(hw as f64).recip();
    let y = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<R>() * scale)
        .collect();
    Tensor::new(vec![n, c], y)
}

pub fn global_avg_pool_backward<R: Real>(in_shape: &[usize], dout: &Tensor<R>) -> Result<Tensor<R>> {
    let hw: usize = in_shape[2..].iter().product();
    if dout.len() * hw != in_shape.iter().product::<usize>() {
        return Err(Error::Shape("global_avg_pool upstream does not match input".into()));
    }
    let scale = R::of_f64(hw as f64).recip();
    let dx = dout
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, hw))
        .collect();
    Tensor::new(in_shape.to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct (non-GEMM) convolution used as the oracle.
    fn direct_conv(x: &[f64], n: usize, c: usize, h: usize, w: usize, wt: &[f64], o: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * o * h * w];
        for s in 0..n {
            for oc in 0..o {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y as isize + ky - 1, xx as isize + kx - 1);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += wt[((oc * c + ic) * 3 + ky as usize) * 3 + kx as usize]
                                        * x[((s * c + ic) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        out[((s * o + oc) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) * scale).collect()
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = Tensor::new(vec![1, 1, 5, 5], seq(25, 0.1)).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = Tensor::new(vec![1, 1, 3, 3], k).unwrap();
        let b = Tensor::zeros(vec![1]);
        let (y, _) = conv3x3_forward(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), x.shape());
        let oracle = direct_conv(x.data(), 1, 1, 5, 5, w.data(), 1);
        assert_eq!(y.data(), oracle.as_slice());
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let (n, c, h, w, o) = (2, 3, 5, 4, 4);
        let x = Tensor::new(vec![n, c, h, w], seq(n * c * h * w, 0.05)).unwrap();
        let wt = Tensor::new(vec![o, c, 3, 3], seq(o * c * 9, 0.03)).unwrap();
        let (y, _) = conv3x3_forward(&x, &wt, None).unwrap();
        let oracle = direct_conv(x.data(), n, c, h, w, wt.data(), o);
        for (a, b) in y.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), v> == <x, col2im(v)>
        let (n, c, h, w) = (2, 2, 3, 4);
        let x = seq(n * c * h * w, 0.1);
        let v = seq(c * 9 * n * h * w, 0.07);
        let lhs: f64 = im2col(&x, n, c, h, w).iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&v, n, c, h, w)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn relu_definition() {
        let (y, mask) = relu_forward(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), [0.0, 0.0, 2.0]);
        assert_eq!(mask, [false, false, true]);
    }

    #[test]
    fn maxpool_takes_block_max() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), [3.0]);
        assert_eq!(arg, [1]);
        let dx = maxpool2_backward(x.shape(), &arg, &Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap()).unwrap();
        assert_eq!(dx.data(), [0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn global_pool_averages_planes() {
        let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 3.0, -2.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool_forward(&x).unwrap().data(), [2.0, 1.0]);
    }

    #[test]
    fn dense_matches_hand_product() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![0.5, 0.0, 1.0, -1.0, 1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(vec![0.1, 0.2]);
        let y = dense_forward(&x, &w, Some(&b)).unwrap();
        for (a, b) in y.data().iter().zip([3.6f64, 1.2, 0.6, 1.2]) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
