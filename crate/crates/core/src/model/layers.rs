//! Per-example kernels for the conv trunk and the batched head layers.
//!
//! Everything is channels-last (`H x W x C`) and works on plain slices so the
//! trunk can be run example-by-example and the head on a whole batch.

/// Same-padded stride-1 convolution. `weight` is laid out `[kh][kw][cin][cout]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    bias: &[f64],
    k: usize,
    cout: usize,
    out: &mut [f64],
) {
    let pad = k / 2;
    debug_assert_eq!(input.len(), h * w * cin);
    debug_assert_eq!(out.len(), h * w * cout);
    for oh in 0..h {
        for ow in 0..w {
            let o = &mut out[(oh * w + ow) * cout..(oh * w + ow + 1) * cout];
            o.copy_from_slice(bias);
            for kh in 0..k {
                let ih = oh as isize + kh as isize - pad as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for kw in 0..k {
                    let iw = ow as isize + kw as isize - pad as isize;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let px = &input[(ih as usize * w + iw as usize) * cin..][..cin];
                    let wbase = (kh * k + kw) * cin * cout;
                    for (ci, &x) in px.iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        let wrow = &weight[wbase + ci * cout..][..cout];
                        for (acc, &wv) in o.iter_mut().zip(wrow) {
                            *acc += x * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and writes the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weight: &[f64],
    k: usize,
    cout: usize,
    dout: &[f64],
    din: Option<&mut [f64]>,
    dweight: &mut [f64],
    dbias: &mut [f64],
) {
    let pad = k / 2;
    let mut din = din;
    if let Some(d) = din.as_deref_mut() {
        d.iter_mut().for_each(|v| *v = 0.0);
    }
    for oh in 0..h {
        for ow in 0..w {
            let g = &dout[(oh * w + ow) * cout..][..cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (db, &gv) in dbias.iter_mut().zip(g) {
                *db += gv;
            }
            for kh in 0..k {
                let ih = oh as isize + kh as isize - pad as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for kw in 0..k {
                    let iw = ow as isize + kw as isize - pad as isize;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let pix = (ih as usize * w + iw as usize) * cin;
                    let wbase = (kh * k + kw) * cin * cout;
                    for ci in 0..cin {
                        let x = input[pix + ci];
                        let wrow = &weight[wbase + ci * cout..][..cout];
                        let dwrow = &mut dweight[wbase + ci * cout..][..cout];
                        let mut acc = 0.0;
                        for ((dwv, &wv), &gv) in dwrow.iter_mut().zip(wrow).zip(g) {
                            *dwv += x * gv;
                            acc += wv * gv;
                        }
                        if let Some(d) = din.as_deref_mut() {
                            d[pix + ci] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling (floor). Returns pooled values and argmax offsets.
pub(crate) fn maxpool_forward(input: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh_n, ow_n) = (h / 2, w / 2);
    let mut out = vec![0.0; oh_n * ow_n * c];
    let mut idx = vec![0usize; oh_n * ow_n * c];
    for oh in 0..oh_n {
        for ow in 0..ow_n {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dh in 0..2 {
                    for dw in 0..2 {
                        let i = ((2 * oh + dh) * w + (2 * ow + dw)) * c + ch;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                let o = (oh * ow_n + ow) * c + ch;
                out[o] = best;
                idx[o] = best_i;
            }
        }
    }
    (out, idx)
}

pub(crate) fn maxpool_backward(dout: &[f64], idx: &[usize], input_len: usize) -> Vec<f64> {
    let mut din = vec![0.0; input_len];
    for (&g, &i) in dout.iter().zip(idx) {
        din[i] += g;
    }
    din
}

pub(crate) fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Numerically stable softmax over one row.
pub fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Pull a gradient w.r.t. a softmax output back to the logits:
/// `dz = p * (g - <p, g>)`.
pub fn softmax_backward_row(p: &[f64], grad_p: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(grad_p).map(|(a, b)| a * b).sum();
    for ((o, &pv), &gv) in out.iter_mut().zip(p).zip(grad_p) {
        *o = pv * (gv - dot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel_copies_input() {
        // 3x3 kernel with a single 1 at the center, cin = cout = 1.
        let input: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let mut weight = vec![0.0; 9];
        weight[4] = 1.0;
        let mut out = vec![0.0; 9];
        conv_forward(&input, 3, 3, 1, &weight, &[0.0], 3, 1, &mut out);
        assert_eq!(out, input);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let (h, w, cin, cout, k) = (4, 3, 2, 3, 3);
        let input: Vec<f64> = (0..h * w * cin).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let weight: Vec<f64> = (0..k * k * cin * cout).map(|i| ((i * 5 % 13) as f64 - 6.0) / 10.0).collect();
        let bias = vec![0.1, -0.2, 0.3];
        let dout: Vec<f64> = (0..h * w * cout).map(|i| ((i * 3 % 7) as f64 - 3.0) / 4.0).collect();
        let loss = |inp: &[f64], wt: &[f64]| {
            let mut out = vec![0.0; h * w * cout];
            conv_forward(inp, h, w, cin, wt, &bias, k, cout, &mut out);
            out.iter().zip(&dout).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut din = vec![0.0; input.len()];
        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; cout];
        conv_backward(&input, h, w, cin, &weight, k, cout, &dout, Some(&mut din), &mut dw, &mut db);
        let eps = 1e-6;
        for i in 0..input.len() {
            let mut p = input.clone();
            p[i] += eps;
            let mut m = input.clone();
            m[i] -= eps;
            let fd = (loss(&p, &weight) - loss(&m, &weight)) / (2.0 * eps);
            assert!((fd - din[i]).abs() < 1e-7, "din[{i}] {fd} vs {}", din[i]);
        }
        for i in 0..weight.len() {
            let mut p = weight.clone();
            p[i] += eps;
            let mut m = weight.clone();
            m[i] -= eps;
            let fd = (loss(&input, &p) - loss(&input, &m)) / (2.0 * eps);
            assert!((fd - dw[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let input = vec![1.0, 5.0, 2.0, 3.0];
        let (out, idx) = maxpool_forward(&input, 2, 2, 1);
        assert_eq!(out, vec![5.0]);
        assert_eq!(maxpool_backward(&[2.0], &idx, 4), vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_is_normalized_and_shift_invariant() {
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        softmax_row(&[1.0, 2.0, 3.0], &mut a);
        softmax_row(&[101.0, 102.0, 103.0], &mut b);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
