//! Raw-slice kernels for 3x3 same-padding convolution, ReLU and 2x2 max
//! pooling, each with its reverse-mode counterpart. Layout is CHW.

/// Output rows/cols `i` for which `i + offset` stays inside `0..len`.
#[inline]
fn valid_range(offset: isize, len: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo, hi)
}

/// Patch matrix of shape `(c * 9) x (h * w)`: row `ic * 9 + ky * 3 + kx`
/// holds the input shifted by `(ky - 1, kx - 1)`, zero outside the image.
fn im2col(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut col = vec![0.0; c * 9 * hw];
    for ic in 0..c {
        let src = &input[ic * hw..(ic + 1) * hw];
        for k in 0..9 {
            let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
            let (y0, y1) = valid_range(dy, h);
            let (x0, x1) = valid_range(dx, w);
            let dst = &mut col[(ic * 9 + k) * hw..(ic * 9 + k + 1) * hw];
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let sx = (x0 as isize + dx) as usize;
                dst[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + sx..sy * w + sx + x1 - x0]);
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back to the input.
fn col2im(col: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ic in 0..c {
        let dst = &mut out[ic * hw..(ic + 1) * hw];
        for k in 0..9 {
            let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
            let (y0, y1) = valid_range(dy, h);
            let (x0, x1) = valid_range(dx, w);
            let src = &col[(ic * 9 + k) * hw..(ic * 9 + k + 1) * hw];
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let sx = (x0 as isize + dx) as usize;
                for (d, s) in dst[sy * w + sx..sy * w + sx + x1 - x0].iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                    *d += s;
                }
            }
        }
    }
    out
}

/// `c += a · b` for row-major `a: m x k`, `b: k x n`, `c: m x n`, where either
/// operand may be read transposed.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    // Strides for row-major storage of `a` (m x k) or of its transpose (k x m).
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the slices hold m*k, k*n and m*n elements and the strides
    // describe dense row-major layouts within them.
    unsafe {
        matrixmultiply::dgemm(
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv3x3_forward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
) -> Vec<f64> {
    let hw = h * w;
    debug_assert_eq!(input.len(), c_in * hw);
    debug_assert_eq!(weight.len(), c_out * c_in * 9);
    let col = im2col(input, c_in, h, w);
    let mut out = Vec::with_capacity(c_out * hw);
    for &b in &bias[..c_out] {
        out.extend(std::iter::repeat_n(b, hw));
    }
    gemm_acc(c_out, c_in * 9, hw, weight, false, &col, false, &mut out);
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input_grad` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let hw = h * w;
    let kk = c_in * 9;
    let col = im2col(input, c_in, h, w);
    for oc in 0..c_out {
        d_bias[oc] += d_out[oc * hw..(oc + 1) * hw].iter().sum::<f64>();
    }
    // dW (c_out x kk) += dOut (c_out x hw) · colᵀ (hw x kk)
    gemm_acc(c_out, hw, kk, d_out, false, &col, true, d_weight);
    need_input_grad.then(|| {
        // dCol (kk x hw) = Wᵀ (kk x c_out) · dOut (c_out x hw)
        let mut d_col = vec![0.0; kk * hw];
        gemm_acc(kk, c_out, hw, weight, true, d_out, false, &mut d_col);
        col2im(&d_col, c_in, h, w)
    })
}

pub fn relu(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| v.max(0.0)).collect()
}

/// Zeroes the gradient where the pre-activation was not positive.
pub fn relu_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &z) in grad.iter_mut().zip(pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 stride-2 max pooling. Returns pooled values and, per output element,
/// the flat input index of the winner; ties go to the first element in
/// row-major window order.
pub fn maxpool2_forward(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(grad_out: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut d_in = vec![0.0; input_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        d_in[i] += g;
    }
    d_in
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &[f64], c_in: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], c_out: usize) -> Vec<f64> {
        let mut out = vec![0.0; c_out * h * w];
        for oc in 0..c_out {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut s = bias[oc];
                    for ic in 0..c_in {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (iy, ix) = (y + ky - 1, x + kx - 1);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += weight[((oc * c_in + ic) * 3 + ky as usize) * 3 + kx as usize]
                                    * input[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(oc * h + y as usize) * w + x as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let (c_in, c_out, h, w) = (2, 3, 5, 4);
        let input: Vec<f64> = (0..c_in * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let weight: Vec<f64> = (0..c_out * c_in * 9).map(|i| ((i * 5) % 13) as f64 / 7.0 - 0.9).collect();
        let bias = [0.5, -1.0, 0.25];
        let fast = conv3x3_forward(&input, c_in, h, w, &weight, &bias, c_out);
        let slow = naive_conv(&input, c_in, h, w, &weight, &bias, c_out);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_matches_linear_oracle() {
        // The conv is linear in weights and input, so each partial derivative
        // is the naive conv evaluated on a basis vector.
        let (c_in, c_out, h, w) = (2, 2, 4, 3);
        let input: Vec<f64> = (0..c_in * h * w).map(|i| ((i * 7) % 11) as f64 / 3.0 - 1.5).collect();
        let weight: Vec<f64> = (0..c_out * c_in * 9).map(|i| ((i * 5) % 13) as f64 / 7.0 - 0.9).collect();
        let d_out: Vec<f64> = (0..c_out * h * w).map(|i| ((i * 3) % 7) as f64 - 3.0).collect();
        let zero_b = vec![0.0; c_out];
        let project = |o: &[f64]| o.iter().zip(&d_out).map(|(a, b)| a * b).sum::<f64>();

        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; c_out];
        let d_in = conv3x3_backward(&input, c_in, h, w, &weight, c_out, &d_out, &mut dw, &mut db, true).unwrap();
        for j in 0..weight.len() {
            let mut e = vec![0.0; weight.len()];
            e[j] = 1.0;
            let expect = project(&naive_conv(&input, c_in, h, w, &e, &zero_b, c_out));
            assert!((dw[j] - expect).abs() < 1e-12);
        }
        for j in 0..input.len() {
            let mut e = vec![0.0; input.len()];
            e[j] = 1.0;
            let expect = project(&naive_conv(&e, c_in, h, w, &weight, &zero_b, c_out));
            assert!((d_in[j] - expect).abs() < 1e-12);
        }
        for oc in 0..c_out {
            assert_eq!(db[oc], d_out[oc * h * w..(oc + 1) * h * w].iter().sum::<f64>());
        }
    }

    #[test]
    fn maxpool_tie_goes_to_first() {
        let input = [2.0, 2.0, 2.0, 2.0];
        let (out, arg) = maxpool2_forward(&input, 1, 2, 2);
        assert_eq!(out, vec![2.0]);
        assert_eq!(arg, vec![0]);
        assert_eq!(maxpool2_backward(&[1.5], &arg, 4), vec![1.5, 0.0, 0.0, 0.0]);

        let input = [1.0, 3.0, 3.0, 0.0];
        let (_, arg) = maxpool2_forward(&input, 1, 2, 2);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn relu_gradient_mask() {
        let pre = [-1.0, 0.0, 2.0];
        let mut g = [1.0, 1.0, 1.0];
        relu_backward(&pre, &mut g);
        assert_eq!(g, [0.0, 0.0, 1.0]);
        assert_eq!(relu(&pre), vec![0.0, 0.0, 2.0]);
    }
}
