//! Raw numerical routines behind the tape operations. Everything here works
//! on plain slices so the forward rules stay individually testable against
//! loop oracles.

use crate::scalar::{sc, Scalar};

/// C = A·B with A `[m,k]`, B `[k,n]`, all row-major.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for t in 0..k {
            let a_it = a[i * k + t];
            if a_it == T::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += a_it * bv;
            }
        }
    }
    out
}

/// C = A·Bᵀ with A `[m,k]`, B `[n,k]`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// C = Aᵀ·B with A `[k,m]`, B `[k,n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let a_ti = arow[i];
            if a_ti == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += a_ti * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Row,
    Col,
}

/// Softmax along `axis` of a `[rows, cols]` matrix. Subtract-max
/// stabilization is unconditional.
pub fn softmax_axis<T: Scalar>(a: &[T], rows: usize, cols: usize, axis: Axis) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    match axis {
        Axis::Row => {
            for i in 0..rows {
                let row = &a[i * cols..(i + 1) * cols];
                let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut sum = T::zero();
                for j in 0..cols {
                    let e = (row[j] - m).exp();
                    out[i * cols + j] = e;
                    sum += e;
                }
                for j in 0..cols {
                    out[i * cols + j] /= sum;
                }
            }
        }
        Axis::Col => {
            for j in 0..cols {
                let mut m = T::neg_infinity();
                for i in 0..rows {
                    m = m.max(a[i * cols + j]);
                }
                let mut sum = T::zero();
                for i in 0..rows {
                    let e = (a[i * cols + j] - m).exp();
                    out[i * cols + j] = e;
                    sum += e;
                }
                for i in 0..rows {
                    out[i * cols + j] /= sum;
                }
            }
        }
    }
    out
}

/// d(softmax)/dx given the forward output `y`: dx = y ∘ (dy − Σ dy∘y along axis).
pub fn softmax_backward<T: Scalar>(
    y: &[T],
    dy: &[T],
    rows: usize,
    cols: usize,
    axis: Axis,
) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * cols];
    match axis {
        Axis::Row => {
            for i in 0..rows {
                let mut dot = T::zero();
                for j in 0..cols {
                    dot += dy[i * cols + j] * y[i * cols + j];
                }
                for j in 0..cols {
                    let idx = i * cols + j;
                    dx[idx] = y[idx] * (dy[idx] - dot);
                }
            }
        }
        Axis::Col => {
            for j in 0..cols {
                let mut dot = T::zero();
                for i in 0..rows {
                    dot += dy[i * cols + j] * y[i * cols + j];
                }
                for i in 0..rows {
                    let idx = i * cols + j;
                    dx[idx] = y[idx] * (dy[idx] - dot);
                }
            }
        }
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, dilation: usize, pad: Padding) -> usize {
    let span = dilation * (k - 1);
    match pad {
        Padding::Same => (input + stride - 1) / stride,
        Padding::Valid => (input - span - 1) / stride + 1,
    }
}

/// 2-D cross-correlation (no kernel flip). Input `[w,h,cin]`, kernel
/// `[k,k,cin,cout]` laid out `(ky,kx,ci,co)`, output `[w',h',cout]`.
pub fn conv2d<T: Scalar>(
    input: &[T],
    kernel: &[T],
    w: usize,
    h: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    dilation: usize,
    pad: Padding,
) -> Vec<T> {
    let ow = conv_out_extent(w, k, stride, dilation, pad);
    let oh = conv_out_extent(h, k, stride, dilation, pad);
    let p = match pad {
        Padding::Same => (dilation * (k - 1) / 2) as isize,
        Padding::Valid => 0,
    };
    let mut out = vec![T::zero(); ow * oh * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..k {
                let iy = (oy * stride) as isize - p + (ky * dilation) as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride) as isize - p + (kx * dilation) as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * w + ix as usize) * cin;
                    let kbase = ((ky * k + kx) * cin) * cout;
                    for ci in 0..cin {
                        let v = input[ibase + ci];
                        if v == T::zero() {
                            continue;
                        }
                        let krow = &kernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (o, &kv) in orow.iter_mut().zip(krow) {
                            *o += v * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d` w.r.t. input and kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    d_out: &[T],
    w: usize,
    h: usize,
    cin: usize,
    k: usize,
    cout: usize,
    stride: usize,
    dilation: usize,
    pad: Padding,
) -> (Vec<T>, Vec<T>) {
    let ow = conv_out_extent(w, k, stride, dilation, pad);
    let oh = conv_out_extent(h, k, stride, dilation, pad);
    let p = match pad {
        Padding::Same => (dilation * (k - 1) / 2) as isize,
        Padding::Valid => 0,
    };
    let mut d_in = vec![T::zero(); w * h * cin];
    let mut d_k = vec![T::zero(); k * k * cin * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let grow = &d_out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..k {
                let iy = (oy * stride) as isize - p + (ky * dilation) as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride) as isize - p + (kx * dilation) as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ibase = (iy as usize * w + ix as usize) * cin;
                    let kbase = ((ky * k + kx) * cin) * cout;
                    for ci in 0..cin {
                        let v = input[ibase + ci];
                        let krow = &kernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let dkrow = &mut d_k[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let mut acc = T::zero();
                        for ((&g, &kv), dk) in grow.iter().zip(krow).zip(dkrow.iter_mut()) {
                            acc += g * kv;
                            *dk += g * v;
                        }
                        d_in[ibase + ci] += acc;
                    }
                }
            }
        }
    }
    (d_in, d_k)
}

/// Bilinear resample of a `[w,h,c]` map to `[ow,oh,c]` with corner alignment.
/// Returns the interpolated map; `bilinear_backward` scatters with the same
/// weights.
pub fn bilinear<T: Scalar>(input: &[T], w: usize, h: usize, c: usize, ow: usize, oh: usize) -> Vec<T> {
    let mut out = vec![T::zero(); ow * oh * c];
    let sx = axis_scale(w, ow);
    let sy = axis_scale(h, oh);
    for oy in 0..oh {
        let (y0, y1, fy) = sample_coords(oy, sy, h);
        for ox in 0..ow {
            let (x0, x1, fx) = sample_coords(ox, sx, w);
            let w00 = sc::<T>((1.0 - fx) * (1.0 - fy));
            let w10 = sc::<T>(fx * (1.0 - fy));
            let w01 = sc::<T>((1.0 - fx) * fy);
            let w11 = sc::<T>(fx * fy);
            let obase = (oy * ow + ox) * c;
            let b00 = (y0 * w + x0) * c;
            let b10 = (y0 * w + x1) * c;
            let b01 = (y1 * w + x0) * c;
            let b11 = (y1 * w + x1) * c;
            for ch in 0..c {
                out[obase + ch] = w00 * input[b00 + ch]
                    + w10 * input[b10 + ch]
                    + w01 * input[b01 + ch]
                    + w11 * input[b11 + ch];
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(
    d_out: &[T],
    w: usize,
    h: usize,
    c: usize,
    ow: usize,
    oh: usize,
) -> Vec<T> {
    let mut d_in = vec![T::zero(); w * h * c];
    let sx = axis_scale(w, ow);
    let sy = axis_scale(h, oh);
    for oy in 0..oh {
        let (y0, y1, fy) = sample_coords(oy, sy, h);
        for ox in 0..ow {
            let (x0, x1, fx) = sample_coords(ox, sx, w);
            let w00 = sc::<T>((1.0 - fx) * (1.0 - fy));
            let w10 = sc::<T>(fx * (1.0 - fy));
            let w01 = sc::<T>((1.0 - fx) * fy);
            let w11 = sc::<T>(fx * fy);
            let obase = (oy * ow + ox) * c;
            let b00 = (y0 * w + x0) * c;
            let b10 = (y0 * w + x1) * c;
            let b01 = (y1 * w + x0) * c;
            let b11 = (y1 * w + x1) * c;
            for ch in 0..c {
                let g = d_out[obase + ch];
                d_in[b00 + ch] += w00 * g;
                d_in[b10 + ch] += w10 * g;
                d_in[b01 + ch] += w01 * g;
                d_in[b11 + ch] += w11 * g;
            }
        }
    }
    d_in
}

fn axis_scale(input: usize, output: usize) -> f64 {
    if output <= 1 || input <= 1 {
        0.0
    } else {
        (input - 1) as f64 / (output - 1) as f64
    }
}

fn sample_coords(o: usize, scale: f64, input: usize) -> (usize, usize, f64) {
    let src = o as f64 * scale;
    let x0 = src.floor() as usize;
    let x0 = x0.min(input - 1);
    let x1 = (x0 + 1).min(input - 1);
    (x0, x1, src - x0 as f64)
}

pub const NORM_EPS: f64 = 1e-8;

/// Divide each channel's spatial map by its L2 norm (+ε).
pub fn l2_channel<T: Scalar>(input: &[T], positions: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); input.len()];
    let eps = sc::<T>(NORM_EPS);
    for ch in 0..c {
        let mut sq = T::zero();
        for p in 0..positions {
            let v = input[p * c + ch];
            sq += v * v;
        }
        let denom = sq.sqrt() + eps;
        for p in 0..positions {
            out[p * c + ch] = input[p * c + ch] / denom;
        }
    }
    out
}

pub fn l2_channel_backward<T: Scalar>(input: &[T], dy: &[T], positions: usize, c: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input.len()];
    let eps = sc::<T>(NORM_EPS);
    for ch in 0..c {
        let mut sq = T::zero();
        let mut dot = T::zero();
        for p in 0..positions {
            let v = input[p * c + ch];
            sq += v * v;
            dot += dy[p * c + ch] * v;
        }
        let n = sq.sqrt();
        let denom = n + eps;
        // y = x / (n + eps); dx = dy/(n+eps) − x·(dy·x)/((n+eps)²·n)
        let second = if n > T::zero() { dot / (denom * denom * n) } else { T::zero() };
        for p in 0..positions {
            dx[p * c + ch] = dy[p * c + ch] / denom - input[p * c + ch] * second;
        }
    }
    dx
}

/// Divide each position's channel vector by its L2 norm (+ε).
pub fn channel_pos<T: Scalar>(input: &[T], positions: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); input.len()];
    let eps = sc::<T>(NORM_EPS);
    for p in 0..positions {
        let row = &input[p * c..(p + 1) * c];
        let mut sq = T::zero();
        for &v in row {
            sq += v * v;
        }
        let denom = sq.sqrt() + eps;
        for ch in 0..c {
            out[p * c + ch] = row[ch] / denom;
        }
    }
    out
}

pub fn channel_pos_backward<T: Scalar>(input: &[T], dy: &[T], positions: usize, c: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input.len()];
    let eps = sc::<T>(NORM_EPS);
    for p in 0..positions {
        let row = &input[p * c..(p + 1) * c];
        let grow = &dy[p * c..(p + 1) * c];
        let mut sq = T::zero();
        let mut dot = T::zero();
        for (&v, &g) in row.iter().zip(grow) {
            sq += v * v;
            dot += g * v;
        }
        let n = sq.sqrt();
        let denom = n + eps;
        let second = if n > T::zero() { dot / (denom * denom * n) } else { T::zero() };
        for ch in 0..c {
            dx[p * c + ch] = grow[ch] / denom - row[ch] * second;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    // Triple-loop reference used to pin matmul results.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    out[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_matches_bruteforce_example() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let expect = matmul_oracle(&a, &b, 2, 2, 2);
        assert_eq!(expect, vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul(&a, &b, 2, 2, 2), expect);
    }

    #[test]
    fn matmul_variants_agree_with_transposes() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.37 - 1.0).collect(); // [3,4]
        let b: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect(); // [4,5]
        let c = matmul(&a, &b, 3, 4, 5);
        let bt = transpose(&b, 4, 5); // [5,4]
        assert_eq!(matmul_nt(&a, &bt, 3, 4, 5), c);
        let at = transpose(&a, 3, 4); // [4,3]
        assert_eq!(matmul_tn(&at, &b, 3, 4, 5), c);
    }

    #[test]
    fn softmax_rows_and_cols_normalize() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).cos()).collect();
        let r = softmax_axis(&a, 3, 4, Axis::Row);
        for i in 0..3 {
            let s: f64 = r[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let c = softmax_axis(&a, 3, 4, Axis::Col);
        for j in 0..4 {
            let s: f64 = (0..3).map(|i| c[i * 4 + j]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_identity_kernel() {
        let input: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let kernel = [1.0];
        let out = conv2d(&input, &kernel, 3, 3, 1, 1, 1, 1, 1, Padding::Same);
        assert_eq!(out, input);
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        // 4×4 single-channel input with a fixed 3×3 kernel; oracle computed
        // by explicit loops over the same cross-correlation definition.
        let input: Vec<f64> = (0..16).map(|i| (i as f64) * 0.5 - 3.0).collect();
        let kernel: Vec<f64> = vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0, 2.0, 1.0, -0.5];
        let mut expect = vec![0.0; 16];
        for oy in 0..4i32 {
            for ox in 0..4i32 {
                let mut acc = 0.0;
                for ky in 0..3i32 {
                    for kx in 0..3i32 {
                        let iy = oy + ky - 1;
                        let ix = ox + kx - 1;
                        if iy >= 0 && iy < 4 && ix >= 0 && ix < 4 {
                            acc += input[(iy * 4 + ix) as usize] * kernel[(ky * 3 + kx) as usize];
                        }
                    }
                }
                expect[(oy * 4 + ox) as usize] = acc;
            }
        }
        let out = conv2d(&input, &kernel, 4, 4, 1, 3, 1, 1, 1, Padding::Same);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_averaging_kernel_on_constant_interior() {
        let input = vec![2.5f64; 25];
        let kernel = vec![1.0 / 9.0; 9];
        let out = conv2d(&input, &kernel, 5, 5, 1, 3, 1, 1, 1, Padding::Same);
        // interior positions keep the constant; the border is attenuated
        assert!((out[2 * 5 + 2] - 2.5).abs() < 1e-12);
        assert!(out[0] < 2.5);
    }

    #[test]
    fn conv2d_stride_and_valid_extents() {
        assert_eq!(conv_out_extent(64, 3, 2, 1, Padding::Same), 32);
        assert_eq!(conv_out_extent(5, 3, 1, 1, Padding::Valid), 3);
        assert_eq!(conv_out_extent(7, 3, 1, 2, Padding::Valid), 3);
    }

    #[test]
    fn bilinear_identity_and_corner_aligned_upsample() {
        let input = vec![0.0f64, 1.0, 2.0, 3.0]; // [2,2,1]: (0,0)=0,(1,0)=1,(0,1)=2,(1,1)=3
        assert_eq!(bilinear(&input, 2, 2, 1, 2, 2), input);
        // hand interpolation on the corner-aligned 3×3 grid
        let up = bilinear(&input, 2, 2, 1, 3, 3);
        let expect = vec![0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        for (a, b) in up.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_channel_345_case() {
        let out = l2_channel(&[3.0f64, 4.0], 2, 1);
        assert!((out[0] - 0.6).abs() < 1e-7);
        assert!((out[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_zero_input_maps_to_zero() {
        let z = vec![0.0f64; 12];
        assert!(l2_channel(&z, 4, 3).iter().all(|&v| v == 0.0));
        assert!(channel_pos(&z, 4, 3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_pos_unit_norms() {
        let input: Vec<f64> = (0..48).map(|i| (i as f64 * 0.7).sin() + 0.2).collect();
        let out = channel_pos(&input, 16, 3);
        for p in 0..16 {
            let n: f64 = (0..3).map(|c| out[p * 3 + c].powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
