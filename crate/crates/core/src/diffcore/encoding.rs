use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};

/// Width of the encoding of a `dim`-vector.
pub fn encoded_dim(dim: usize, n_freq: usize, include_input: bool) -> usize {
    dim * (2 * n_freq + usize::from(include_input))
}

/// `[x?, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]`,
/// each block spanning all components of `x`.
pub fn positional_encoding(x: &[f64], n_freq: usize, include_input: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_dim(x.len(), n_freq, include_input));
    if include_input {
        out.extend_from_slice(x);
    }
    for k in 0..n_freq {
        let f = (1u64 << k) as f64 * PI;
        out.extend(x.iter().map(|v| (f * v).sin()));
        out.extend(x.iter().map(|v| (f * v).cos()));
    }
    out
}

/// Row-wise [`positional_encoding`]; higher octaves come from the
/// double-angle recurrence (relative error about `2^L` ulps).
pub fn encode_batch(x: ArrayView2<f64>, n_freq: usize, include_input: bool) -> Array2<f64> {
    let d = x.ncols();
    let mut out = Array2::zeros((x.nrows(), encoded_dim(d, n_freq, include_input)));
    for (row, mut o) in x.rows().into_iter().zip(out.rows_mut()) {
        let mut c = 0;
        if include_input {
            for &v in row {
                o[c] = v;
                c += 1;
            }
        }
        for (j, &v) in row.iter().enumerate() {
            let (mut s, mut co) = (PI * v).sin_cos();
            for k in 0..n_freq {
                let at = c + 2 * d * k + j;
                o[at] = s;
                o[at + d] = co;
                (s, co) = (2.0 * s * co, (co - s) * (co + s));
            }
        }
    }
    out
}

/// Gradient with respect to `x` given the gradient of the encoding.
pub fn encode_backward(x: ArrayView2<f64>, g_enc: ArrayView2<f64>, n_freq: usize, include_input: bool) -> Array2<f64> {
    let d = x.ncols();
    let mut gx = Array2::zeros(x.raw_dim());
    for ((row, g), mut o) in x.rows().into_iter().zip(g_enc.rows()).zip(gx.rows_mut()) {
        let mut c = 0;
        if include_input {
            for j in 0..d {
                o[j] += g[j];
            }
            c = d;
        }
        for (j, &v) in row.iter().enumerate() {
            let (mut s, mut co) = (PI * v).sin_cos();
            let mut f = PI;
            for k in 0..n_freq {
                let at = c + 2 * d * k + j;
                o[j] += f * (co * g[at] - s * g[at + d]);
                (s, co) = (2.0 * s * co, (co - s) * (co + s));
                f *= 2.0;
            }
        }
    }
    gx
}
