//! Single-sample layer kernels. Activations are `(C, H, W)` tensors.
//!
//! Convolutions lower to one matrix product via im2col; everything else is a
//! direct loop.

use super::tensor::Tensor;
use super::{NnetError, Result};

/// `c = a * b (+ c if accumulate)` for row-major `m x k` and `k x n`
/// operands. `a_t` / `b_t` read the operand transposed in place.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides describe row-major (or transposed) layouts within them.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `(C, H, W)` into a `(C*k*k, H*W)` patch matrix for a stride-1,
/// same-padded `k x k` kernel.
fn im2col(input: &[f32], c: usize, h: usize, w: usize, k: usize, col: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    // x range whose source column stays inside the row
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    out[..x0.min(w)].fill(0.0);
                    if x0 < x1 {
                        let s0 = (x0 as isize + dx) as usize;
                        out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                    out[x1.max(x0.min(w))..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back to `(C, H, W)`.
fn col2im(col: &[f32], c: usize, h: usize, w: usize, k: usize, out: &mut [f32]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    out.fill(0.0);
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, g) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += g;
                    }
                }
            }
        }
    }
}

fn conv_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    let (c, h, w) = input.chw()?;
    let (f, wc, k) = match *weights.shape() {
        [f, wc, kh, kw] if kh == kw && kh % 2 == 1 => (f, wc, kh),
        _ => {
            return Err(NnetError::Shape(format!(
                "conv weights must be (F, C, k, k) with odd k, got {:?}",
                weights.shape()
            )))
        }
    };
    if wc != c {
        return Err(NnetError::Shape(format!(
            "conv expects {wc} input channels, got {c}"
        )));
    }
    bias.expect_shape(&[f], "conv bias")?;
    Ok((c, h, w, f, k))
}

/// Stride-1 cross-correlation with zero padding `k / 2`; spatial size is
/// preserved.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w, f, k) = conv_dims(input, weights, bias)?;
    let hw = h * w;
    let mut col = vec![0.0; c * k * k * hw];
    im2col(input.data(), c, h, w, k, &mut col);
    let mut out = vec![0.0; f * hw];
    for (row, &b) in out.chunks_exact_mut(hw).zip(bias.data()) {
        row.fill(b);
    }
    gemm(f, c * k * k, hw, weights.data(), false, &col, false, &mut out, true);
    Tensor::new(vec![f, h, w], out)
}

pub struct ConvGrads {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor>,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Exact gradients of [`conv2d_forward`] given the upstream gradient.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let (c, h, w) = input.chw()?;
    let f = weights.shape().first().copied().unwrap_or(0);
    let bias_shape = Tensor::zeros(vec![f]);
    let (_, _, _, f, k) = conv_dims(input, weights, &bias_shape)?;
    grad_out.expect_shape(&[f, h, w], "conv grad_out")?;
    let hw = h * w;
    let ckk = c * k * k;
    let mut col = vec![0.0; ckk * hw];
    im2col(input.data(), c, h, w, k, &mut col);

    let mut gw = vec![0.0; f * ckk];
    gemm(f, hw, ckk, grad_out.data(), false, &col, true, &mut gw, false);
    let gb: Vec<f32> = grad_out
        .data()
        .chunks_exact(hw)
        .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();

    let input_grad = if need_input_grad {
        // reuse the patch buffer for the patch-space gradient
        gemm(ckk, f, hw, weights.data(), true, grad_out.data(), false, &mut col, false);
        let mut gi = vec![0.0; c * hw];
        col2im(&col, c, h, w, k, &mut gi);
        Some(Tensor::new(vec![c, h, w], gi)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: input_grad,
        weights: Tensor::new(weights.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![f], gb)?,
    })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Gradient passes where the forward input was strictly positive; the
/// subgradient at exactly 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape(x.shape(), "relu grad_out")?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, per output
/// element, the flat input index of the winning element (first wins ties,
/// scanning the window row by row).
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (c, h, w) = x.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnetError::Shape(format!(
            "max pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let d = x.data();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                out.push(d[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(NnetError::Shape(format!(
            "pool backward: {} gradients for {} windows",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut g = Tensor::zeros(input_shape.to_vec());
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i as usize] += v;
    }
    Ok(g)
}

/// `(C, H, W)` -> `(C)` spatial mean.
pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let hw = h * w;
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect();
    Tensor::new(vec![c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match *input_shape {
        [c, h, w] => (c, h, w),
        _ => return Err(NnetError::Shape(format!("gap input shape {input_shape:?}"))),
    };
    grad_out.expect_shape(&[c], "gap grad_out")?;
    let hw = h * w;
    let inv = 1.0 / hw as f32;
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat(g * inv).take(hw))
        .collect();
    Tensor::new(vec![c, h, w], data)
}

/// `y = W x + b` with `W: (O, I)`.
pub fn fully_connected_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (o, i) = fc_dims(weights)?;
    x.expect_shape(&[i], "fc input")?;
    bias.expect_shape(&[o], "fc bias")?;
    let mut out = bias.data().to_vec();
    for (r, y) in out.iter_mut().enumerate() {
        let row = &weights.data()[r * i..(r + 1) * i];
        *y += row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f32>();
    }
    Tensor::new(vec![o], out)
}

pub struct FcGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn fully_connected_backward(x: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<FcGrads> {
    let (o, i) = fc_dims(weights)?;
    x.expect_shape(&[i], "fc input")?;
    grad_out.expect_shape(&[o], "fc grad_out")?;
    let g = grad_out.data();
    let mut gi = vec![0.0f32; i];
    let mut gw = Vec::with_capacity(o * i);
    for r in 0..o {
        let row = &weights.data()[r * i..(r + 1) * i];
        for (acc, w) in gi.iter_mut().zip(row) {
            *acc += g[r] * w;
        }
        gw.extend(x.data().iter().map(|&v| g[r] * v));
    }
    Ok(FcGrads {
        input: Tensor::new(vec![i], gi)?,
        weights: Tensor::new(vec![o, i], gw)?,
        bias: grad_out.clone(),
    })
}

fn fc_dims(weights: &Tensor) -> Result<(usize, usize)> {
    match *weights.shape() {
        [o, i] => Ok((o, i)),
        _ => Err(NnetError::Shape(format!(
            "fc weights must be (O, I), got {:?}",
            weights.shape()
        ))),
    }
}

/// Max-subtracted softmax of one logit row, computed in `f64`.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let e: Vec<f64> = logits.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy of one sample: `(loss, probs)`. The logit gradient is
/// `probs - onehot(label)`.
pub fn cross_entropy_row(logits: &[f32], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = m + logits.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    (lse - logits[label] as f64, softmax(logits))
}

pub struct SoftmaxLoss {
    /// Mean loss over the batch.
    pub loss: f64,
    /// `(N, K)` gradient of the mean loss.
    pub grad_logits: Tensor,
    /// `(N, K)` row-stochastic probabilities.
    pub probs: Tensor,
}

/// Softmax cross-entropy over an `(N, K)` batch of logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<SoftmaxLoss> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        _ => return Err(NnetError::Shape(format!("logits must be (N, K), got {:?}", logits.shape()))),
    };
    if labels.len() != n {
        return Err(NnetError::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NnetError::Shape(format!("label {bad} out of range for {k} classes")));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    let mut probs = Vec::with_capacity(n * k);
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let (l, p) = cross_entropy_row(row, label);
        loss += l;
        for (j, &pj) in p.iter().enumerate() {
            let y = if j == label { 1.0 } else { 0.0 };
            grad.push(((pj - y) / n as f64) as f32);
            probs.push(pj as f32);
        }
    }
    Ok(SoftmaxLoss {
        loss: loss / n as f64,
        grad_logits: Tensor::new(vec![n, k], grad)?,
        probs: Tensor::new(vec![n, k], probs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution, independent of im2col.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (c, h, wd) = x.chw().unwrap();
        let (f, k) = (w.shape()[0], w.shape()[2]);
        let p = (k / 2) as isize;
        let mut out = vec![0.0f64; f * h * wd];
        for o in 0..f {
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = b.data()[o] as f64;
                    for ch in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - p;
                                let sx = xx as isize + kx as isize - p;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                s += x.data()[(ch * h + sy as usize) * wd + sx as usize] as f64
                                    * w.data()[((o * c + ch) * k + ky) * k + kx] as f64;
                            }
                        }
                    }
                    out[(o * h + y) * wd + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = rand_tensor(vec![2, 5, 4], 1);
        let mut w = Tensor::zeros(vec![2, 2, 3, 3]);
        w.data_mut()[4] = 1.0; // filter 0 picks channel 0 center
        w.data_mut()[(2 + 1) * 9 + 4] = 1.0; // filter 1 picks channel 1 center
        let y = conv2d_forward(&x, &w, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_weights_give_bias() {
        let x = rand_tensor(vec![3, 4, 4], 2);
        let w = Tensor::zeros(vec![2, 3, 3, 3]);
        let b = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        let y = conv2d_forward(&x, &w, &b).unwrap();
        assert!(y.data()[..16].iter().all(|&v| v == 0.5));
        assert!(y.data()[16..].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn conv_matches_nested_loops() {
        for (shape, f, seed) in [(vec![1, 4, 4], 1, 3), (vec![3, 6, 5], 4, 4), (vec![2, 1, 7], 2, 5)] {
            let x = rand_tensor(shape.clone(), seed);
            let w = rand_tensor(vec![f, shape[0], 3, 3], seed + 10);
            let b = rand_tensor(vec![f], seed + 20);
            let y = conv2d_forward(&x, &w, &b).unwrap();
            for (a, e) in y.data().iter().zip(conv_oracle(&x, &w, &b)) {
                assert_abs_diff_eq!(*a as f64, e, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = rand_tensor(vec![2, 4, 4], 1);
        let w = rand_tensor(vec![1, 3, 3, 3], 1);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros(vec![1])).is_err());
        let w = rand_tensor(vec![1, 2, 3, 3], 1);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros(vec![2])).is_err());
        assert!(conv2d_backward(&x, &w, &Tensor::zeros(vec![1, 3, 4]), true).is_err());
    }

    #[test]
    fn conv_backward_basics() {
        let x = rand_tensor(vec![2, 4, 5], 7);
        let w = rand_tensor(vec![3, 2, 3, 3], 8);
        let g = conv2d_backward(&x, &w, &Tensor::zeros(vec![3, 4, 5]), true).unwrap();
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
        assert!(g.input.unwrap().data().iter().all(|&v| v == 0.0));

        let go = rand_tensor(vec![3, 4, 5], 9);
        let g = conv2d_backward(&x, &w, &go, false).unwrap();
        assert!(g.input.is_none());
        for (fi, &gb) in g.bias.data().iter().enumerate() {
            let s: f32 = go.data()[fi * 20..(fi + 1) * 20].iter().sum();
            assert_abs_diff_eq!(gb, s, epsilon = 1e-5);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        // linear in each argument, so f64 central differences of the oracle
        // are exact up to rounding
        let x = rand_tensor(vec![2, 4, 4], 11);
        let w = rand_tensor(vec![3, 2, 3, 3], 12);
        let b = rand_tensor(vec![3], 13);
        let go = rand_tensor(vec![3, 4, 4], 14);
        let loss = |x: &Tensor, w: &Tensor| -> f64 {
            conv_oracle(x, w, &b)
                .iter()
                .zip(go.data())
                .map(|(a, g)| a * *g as f64)
                .sum()
        };
        let g = conv2d_backward(&x, &w, &go, true).unwrap();
        let h = 1e-3f32;
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.data_mut()[i] += h;
            wm.data_mut()[i] -= h;
            let num = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h as f64);
            let ana = g.weights.data()[i] as f64;
            assert!((num - ana).abs() <= 1e-2 * num.abs().max(ana.abs()).max(1e-2), "w[{i}] {num} vs {ana}");
        }
        let gi = g.input.unwrap();
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let num = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h as f64);
            let ana = gi.data()[i] as f64;
            assert!((num - ana).abs() <= 1e-2 * num.abs().max(ana.abs()).max(1e-2), "x[{i}] {num} vs {ana}");
        }
    }

    #[test]
    fn maxpool_rules() {
        let x = Tensor::filled(vec![1, 2, 4], 3.0);
        let (y, arg) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0]);
        assert_eq!(arg, vec![0, 2]);
        let g = maxpool2_backward(x.shape(), &arg, &Tensor::filled(vec![1, 1, 2], 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let inc = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let (y, arg) = maxpool2_forward(&inc).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);

        assert!(maxpool2_forward(&Tensor::zeros(vec![1, 3, 4])).is_err());
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let x = rand_tensor(vec![2, 4, 4], 21);
        let (y, _) = maxpool2_forward(&x).unwrap();
        for c in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut m = f32::MIN;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.data()[c * 16 + (2 * oy + dy) * 4 + 2 * ox + dx]);
                        }
                    }
                    assert_eq!(y.data()[c * 4 + oy * 2 + ox], m);
                }
            }
        }
    }

    #[test]
    fn relu_gap_fc() {
        let x = Tensor::new(vec![4], vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0, 0.0]);
        let g = relu_backward(&x, &Tensor::filled(vec![4], 1.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 0.0]);

        let c = Tensor::filled(vec![3, 5, 2], 0.75);
        assert!(global_avg_pool_forward(&c).unwrap().data().iter().all(|&v| v == 0.75));
        let gb = global_avg_pool_backward(&[3, 5, 2], &Tensor::filled(vec![3], 1.0)).unwrap();
        assert!(gb.data().iter().all(|&v| (v - 0.1).abs() < 1e-7));

        let w = rand_tensor(vec![3, 5], 31);
        let b = rand_tensor(vec![3], 32);
        let x = rand_tensor(vec![5], 33);
        let y = fully_connected_forward(&x, &w, &b).unwrap();
        for r in 0..3 {
            let e: f64 = (0..5).map(|c| w.data()[r * 5 + c] as f64 * x.data()[c] as f64).sum::<f64>()
                + b.data()[r] as f64;
            assert_abs_diff_eq!(y.data()[r] as f64, e, epsilon = 1e-6);
        }
        let go = rand_tensor(vec![3], 34);
        let g = fully_connected_backward(&x, &w, &go).unwrap();
        for c in 0..5 {
            let e: f32 = (0..3).map(|r| w.data()[r * 5 + c] * go.data()[r]).sum();
            assert_abs_diff_eq!(g.input.data()[c], e, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(g.weights.data()[7], go.data()[1] * x.data()[2], epsilon = 1e-7);
        assert!(fully_connected_forward(&rand_tensor(vec![4], 1), &w, &b).is_err());
    }

    #[test]
    fn softmax_loss_cases() {
        let l = softmax_cross_entropy(&Tensor::zeros(vec![2, 5]), &[0, 3]).unwrap();
        assert_abs_diff_eq!(l.loss, 5f64.ln(), epsilon = 1e-12);
        let mut big = vec![0.0; 5];
        big[2] = 50.0;
        let l = softmax_cross_entropy(&Tensor::new(vec![1, 5], big).unwrap(), &[2]).unwrap();
        assert!(l.loss < 1e-20);
        let logits = rand_tensor(vec![4, 5], 41);
        let l = softmax_cross_entropy(&logits, &[0, 1, 4, 2]).unwrap();
        for row in l.probs.data().chunks(5) {
            assert_abs_diff_eq!(row.iter().map(|&v| v as f64).sum::<f64>(), 1.0, epsilon = 1e-6);
        }
        assert!(softmax_cross_entropy(&logits, &[0, 1, 5, 2]).is_err());
    }

    #[test]
    fn softmax_grad_matches_finite_differences() {
        let logits = rand_tensor(vec![3, 5], 51);
        let labels = [1, 0, 4];
        let l = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-3f32;
        for i in 0..logits.len() {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (softmax_cross_entropy(&p, &labels).unwrap().loss
                - softmax_cross_entropy(&m, &labels).unwrap().loss)
                / (2.0 * h as f64);
            let ana = l.grad_logits.data()[i] as f64;
            assert!((num - ana).abs() <= 1e-2 * num.abs().max(ana.abs()).max(1e-3), "{num} vs {ana}");
        }
    }
}
