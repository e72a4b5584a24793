//! Windowed affine + tanh layers with stride subsampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numeric::{affine, affine_backward, Matrix};

/// Number of output frames for `frames` inputs at `stride`.
pub fn subsampled_len(frames: usize, stride: usize) -> usize {
    frames.div_ceil(stride)
}

/// Cached activations of one layer.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub input: Matrix,
    /// tanh outputs before dropout
    pub activation: Matrix,
    pub mask: Option<Matrix>,
    pub output: Matrix,
    pub stride: usize,
    pub half_window: usize,
}

/// Gathers the zero-padded context window around `center` into `buf`.
fn gather(input: &Matrix, center: usize, half_window: usize, buf: &mut [f64]) {
    let d = input.cols();
    for (j, chunk) in buf.chunks_exact_mut(d).enumerate() {
        let pos = center as isize + j as isize - half_window as isize;
        if pos >= 0 && (pos as usize) < input.rows() {
            chunk.copy_from_slice(input.row(pos as usize));
        } else {
            chunk.fill(0.0);
        }
    }
}

pub fn layer_forward(
    weight: &[f64],
    bias: &[f64],
    input: Matrix,
    half_window: usize,
    stride: usize,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> LayerTrace {
    let out_dim = bias.len();
    let n_out = subsampled_len(input.rows(), stride);
    let mut activation = Matrix::zeros(n_out, out_dim);
    let mut window = vec![0.0; (2 * half_window + 1) * input.cols()];
    for i in 0..n_out {
        gather(&input, i * stride, half_window, &mut window);
        let row = activation.row_mut(i);
        affine(weight, Some(bias), &window, row);
        for v in row.iter_mut() {
            *v = v.tanh();
        }
    }
    let (output, mask) = match dropout {
        Some((p, rng)) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mut mask = Matrix::zeros(n_out, out_dim);
            for m in mask.as_mut_slice() {
                *m = if rng.random::<f64>() < p { 0.0 } else { keep };
            }
            let mut out = activation.clone();
            for (o, m) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *o *= m;
            }
            (out, Some(mask))
        }
        _ => (activation.clone(), None),
    };
    LayerTrace { input, activation, mask, output, stride, half_window }
}

/// Backpropagates `d_output` through one layer, accumulating weight/bias
/// gradients and returning the gradient w.r.t. the layer input when requested.
pub fn layer_backward(
    trace: &LayerTrace,
    weight: &[f64],
    d_output: &Matrix,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    want_input_grad: bool,
) -> Option<Matrix> {
    let input = &trace.input;
    let d_in = input.cols();
    let span = 2 * trace.half_window + 1;
    let mut d_input = want_input_grad.then(|| Matrix::zeros(input.rows(), d_in));
    let mut window = vec![0.0; span * d_in];
    let mut d_window = vec![0.0; span * d_in];
    let mut d_pre = vec![0.0; trace.activation.cols()];
    for i in 0..trace.activation.rows() {
        let act = trace.activation.row(i);
        let dout = d_output.row(i);
        let mut any = false;
        for (j, dp) in d_pre.iter_mut().enumerate() {
            let m = trace.mask.as_ref().map_or(1.0, |m| m.get(i, j));
            *dp = dout[j] * m * (1.0 - act[j] * act[j]);
            any |= *dp != 0.0;
        }
        if !any {
            continue;
        }
        let center = i * trace.stride;
        gather(input, center, trace.half_window, &mut window);
        if let Some(d_input) = d_input.as_mut() {
            d_window.fill(0.0);
            affine_backward(weight, &window, &d_pre, d_weight, Some(d_bias), Some(&mut d_window));
            for (j, chunk) in d_window.chunks_exact(d_in).enumerate() {
                let pos = center as isize + j as isize - trace.half_window as isize;
                if pos >= 0 && (pos as usize) < input.rows() {
                    for (d, g) in d_input.row_mut(pos as usize).iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
            }
        } else {
            affine_backward(weight, &window, &d_pre, d_weight, Some(d_bias), None);
        }
    }
    d_input
}

/// Seeded RNG for dropout masks.
pub fn dropout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_length_is_ceiling() {
        assert_eq!(subsampled_len(5, 2), 3);
        assert_eq!(subsampled_len(4, 2), 2);
        assert_eq!(subsampled_len(7, 1), 7);
    }

    #[test]
    fn strided_layer_shapes() {
        let w = vec![0.1; 4 * 3 * 2];
        let b = vec![0.0; 4];
        let x = Matrix::from_vec(5, 2, (0..10).map(|v| v as f64 * 0.1).collect());
        let tr = layer_forward(&w, &b, x, 1, 2, None);
        assert_eq!(tr.output.rows(), 3);
        assert_eq!(tr.output.cols(), 4);
    }
}
