//! Dense CHW activation buffers and the handful of layers the network uses:
//! 3×3 same-padded convolution, ReLU, 2×2 average pooling and 2× bilinear
//! upsampling, each with its backward pass.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Act {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    fn plane_len(&self) -> usize {
        self.h * self.w
    }
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weight layout: `[cout][cin][3][3]`.
pub(crate) fn conv3x3(input: &Act, weights: &[f64], bias: &[f64], cout: usize) -> Act {
    let (cin, h, w) = (input.c, input.h, input.w);
    debug_assert_eq!(weights.len(), cout * cin * 9);
    let hw = h * w;
    let mut out = Act::zeros(cout, h, w);
    for co in 0..cout {
        let o = &mut out.data[co * hw..(co + 1) * hw];
        o.fill(bias[co]);
        for ci in 0..cin {
            let inp = &input.data[ci * hw..(ci + 1) * hw];
            let k = &weights[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
            for y in 0..h {
                let orow = &mut o[y * w..(y + 1) * w];
                for ky in 0..3 {
                    let Some(iy) = (y + ky).checked_sub(1).filter(|&iy| iy < h) else {
                        continue;
                    };
                    let irow = &inp[iy * w..(iy + 1) * w];
                    axpy(orow, k[ky * 3 + 1], irow);
                    if w > 1 {
                        axpy(&mut orow[1..], k[ky * 3], &irow[..w - 1]);
                        axpy(&mut orow[..w - 1], k[ky * 3 + 2], &irow[1..]);
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv3x3`]. Accumulates into `dweights`/`dbias` when
/// given and returns the gradient with respect to the input.
pub(crate) fn conv3x3_backward(
    input: &Act,
    weights: &[f64],
    dout: &Act,
    params: Option<(&mut [f64], &mut [f64])>,
    need_input: bool,
) -> Option<Act> {
    let (cin, h, w) = (input.c, input.h, input.w);
    let cout = dout.c;
    let hw = h * w;
    let mut din = need_input.then(|| Act::zeros(cin, h, w));
    let mut params = params;
    for co in 0..cout {
        let d = &dout.data[co * hw..(co + 1) * hw];
        if let Some((_, dbias)) = params.as_mut() {
            dbias[co] += d.iter().sum::<f64>();
        }
        for ci in 0..cin {
            let base = (co * cin + ci) * 9;
            let k = &weights[base..base + 9];
            let inp = &input.data[ci * hw..(ci + 1) * hw];
            for y in 0..h {
                let drow = &d[y * w..(y + 1) * w];
                for ky in 0..3 {
                    let Some(iy) = (y + ky).checked_sub(1).filter(|&iy| iy < h) else {
                        continue;
                    };
                    if let Some((dweights, _)) = params.as_mut() {
                        let irow = &inp[iy * w..(iy + 1) * w];
                        let dk = &mut dweights[base..base + 9];
                        dk[ky * 3 + 1] += dot(drow, irow);
                        if w > 1 {
                            dk[ky * 3] += dot(&drow[1..], &irow[..w - 1]);
                            dk[ky * 3 + 2] += dot(&drow[..w - 1], &irow[1..]);
                        }
                    }
                    if let Some(din) = din.as_mut() {
                        let dirow = &mut din.data[ci * hw + iy * w..ci * hw + (iy + 1) * w];
                        axpy(dirow, k[ky * 3 + 1], drow);
                        if w > 1 {
                            axpy(&mut dirow[..w - 1], k[ky * 3], &drow[1..]);
                            axpy(&mut dirow[1..], k[ky * 3 + 2], &drow[..w - 1]);
                        }
                    }
                }
            }
        }
    }
    din
}

pub(crate) fn relu_inplace(a: &mut Act) {
    for v in &mut a.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub(crate) fn relu_backward_inplace(output: &Act, grad: &mut Act) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

pub(crate) fn avg_pool2(input: &Act) -> Act {
    let (c, h, w) = (input.c, input.h / 2, input.w / 2);
    let mut out = Act::zeros(c, h, w);
    let iw = input.w;
    for ch in 0..c {
        let ip = &input.data[ch * input.plane_len()..(ch + 1) * input.plane_len()];
        let op = &mut out.data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * iw + 2 * x;
                op[y * w + x] = 0.25 * (ip[i] + ip[i + 1] + ip[i + iw] + ip[i + iw + 1]);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward(dout: &Act) -> Act {
    let (c, h, w) = (dout.c, dout.h * 2, dout.w * 2);
    let mut din = Act::zeros(c, h, w);
    for ch in 0..c {
        let dp = &dout.data[ch * dout.plane_len()..(ch + 1) * dout.plane_len()];
        let ip = &mut din.data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                ip[y * w + x] = 0.25 * dp[(y / 2) * dout.w + x / 2];
            }
        }
    }
    din
}

/// Taps of 2× linear upsampling along one axis (half-pixel centres, edges
/// clamped): output `2i` mixes inputs `i` and `i − 1`, `2i + 1` mixes `i`
/// and `i + 1`, with weights ¾ and ¼.
#[inline]
fn taps(o: usize, n: usize) -> [(usize, f64); 2] {
    let i = o / 2;
    let j = if o % 2 == 0 { i.saturating_sub(1) } else { (i + 1).min(n - 1) };
    [(i, 0.75), (j, 0.25)]
}

pub(crate) fn upsample2(input: &Act) -> Act {
    let (c, h, w) = (input.c, input.h * 2, input.w * 2);
    let (ih, iw) = (input.h, input.w);
    let mut out = Act::zeros(c, h, w);
    let mut rows = vec![0.0; ih * w];
    for ch in 0..c {
        let ip = &input.data[ch * ih * iw..(ch + 1) * ih * iw];
        for y in 0..ih {
            for x in 0..w {
                let [(a, wa), (b, wb)] = taps(x, iw);
                rows[y * w + x] = wa * ip[y * iw + a] + wb * ip[y * iw + b];
            }
        }
        let op = &mut out.data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let [(a, wa), (b, wb)] = taps(y, ih);
            for x in 0..w {
                op[y * w + x] = wa * rows[a * w + x] + wb * rows[b * w + x];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dout: &Act) -> Act {
    let (c, h, w) = (dout.c, dout.h / 2, dout.w / 2);
    let ow = dout.w;
    let mut din = Act::zeros(c, h, w);
    let mut rows = vec![0.0; h * ow];
    for ch in 0..c {
        let dp = &dout.data[ch * dout.plane_len()..(ch + 1) * dout.plane_len()];
        rows.fill(0.0);
        for y in 0..dout.h {
            let [(a, wa), (b, wb)] = taps(y, h);
            for x in 0..ow {
                let g = dp[y * ow + x];
                rows[a * ow + x] += wa * g;
                rows[b * ow + x] += wb * g;
            }
        }
        let ip = &mut din.data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..ow {
                let [(a, wa), (b, wb)] = taps(x, w);
                let g = rows[y * ow + x];
                ip[y * w + a] += wa * g;
                ip[y * w + b] += wb * g;
            }
        }
    }
    din
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &Act, weights: &[f64], bias: &[f64], cout: usize) -> Act {
        let mut out = Act::zeros(cout, input.h, input.w);
        for co in 0..cout {
            for y in 0..input.h as isize {
                for x in 0..input.w as isize {
                    let mut acc = bias[co];
                    for ci in 0..input.c {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (iy, ix) = (y + ky - 1, x + kx - 1);
                                if iy < 0 || ix < 0 || iy >= input.h as isize || ix >= input.w as isize {
                                    continue;
                                }
                                acc += weights[((co * input.c + ci) * 3 + ky as usize) * 3 + kx as usize]
                                    * input.data[(ci * input.h + iy as usize) * input.w + ix as usize];
                            }
                        }
                    }
                    out.data[(co * input.h + y as usize) * input.w + x as usize] = acc;
                }
            }
        }
        out
    }

    fn ramp(c: usize, h: usize, w: usize) -> Act {
        let mut a = Act::zeros(c, h, w);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64 - 5.0) * 0.1;
        }
        a
    }

    #[test]
    fn conv_matches_naive() {
        let input = ramp(2, 5, 4);
        let weights: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.05).collect();
        let bias = [0.1, -0.2, 0.3];
        let fast = conv3x3(&input, &weights, &bias, 3);
        let slow = naive_conv(&input, &weights, &bias, 3);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv^T(g)> + <bias, sum g> for the linear part
        let input = ramp(2, 4, 6);
        let weights: Vec<f64> = (0..2 * 2 * 9).map(|i| ((i * 5 % 9) as f64 - 4.0) * 0.1).collect();
        let zero_bias = [0.0, 0.0];
        let out = conv3x3(&input, &weights, &zero_bias, 2);
        let g = ramp(2, 4, 6);
        let lhs: f64 = dot(&out.data, &g.data);
        let mut dw = vec![0.0; weights.len()];
        let mut db = vec![0.0; 2];
        let din = conv3x3_backward(&input, &weights, &g, Some((&mut dw, &mut db)), true).unwrap();
        let rhs = dot(&input.data, &din.data);
        assert!((lhs - rhs).abs() < 1e-10);
        // and linear in the weights
        let rhs_w = dot(&weights, &dw);
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn upsample_preserves_constants_and_ramps() {
        let mut a = Act::zeros(1, 3, 4);
        a.data.fill(2.5);
        assert!(upsample2(&a).data.iter().all(|&v| (v - 2.5).abs() < 1e-15));
        // interior of a linear ramp stays linear at half-pixel centres
        let mut r = Act::zeros(1, 1, 4);
        r.data = vec![0.0, 1.0, 2.0, 3.0];
        let u = upsample2(&r);
        assert_eq!(&u.data[1..7], &[0.25, 0.75, 1.25, 1.75, 2.25, 2.75]);
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let x = ramp(3, 4, 6);
        let y = ramp(3, 2, 3);
        let lhs = dot(&avg_pool2(&x).data, &y.data);
        let rhs = dot(&x.data, &avg_pool2_backward(&y).data);
        assert!((lhs - rhs).abs() < 1e-12);
        let lhs = dot(&upsample2(&y).data, &x.data);
        let rhs = dot(&y.data, &upsample2_backward(&x).data);
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
