//! Same-padded 2-D convolution via im2col and GEMM, one image at a time.

use crate::Scalar;

/// Spatial geometry of one convolution call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Rows of the im2col matrix (`C * k * k`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds one `C x H x W` image into a `(C k k) x (H W)` matrix, zero padded.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..g.in_channels {
        let plane = &image[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out_row[..x_lo].fill(T::zero());
                    out_row[x_hi..].fill(T::zero());
                    let s0 = (x_lo as isize + dx) as usize;
                    out_row[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image gradient.
pub(crate) fn col2im_add<T: Scalar>(g: &ConvGeometry, cols: &[T], image_grad: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..g.in_channels {
        let plane = &mut image_grad[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let s0 = (x_lo as isize + dx) as usize;
                    for (d, &v) in dst[s0..s0 + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&src[y * w + x_lo..y * w + x_hi])
                    {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Batched forward pass; `input` is `B x C x H x W`, `out` is `B x M x H x W`.
pub(crate) fn conv_forward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let hw = g.pixels();
    let kk = g.patch_len();
    let m = g.out_channels;
    let mut cols = if g.kernel == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for b in 0..batch {
        let image = &input[b * g.in_channels * hw..(b + 1) * g.in_channels * hw];
        let dst = &mut out[b * m * hw..(b + 1) * m * hw];
        for (o, row) in dst.chunks_exact_mut(hw).enumerate() {
            row.fill(bias[o]);
        }
        let rhs: &[T] = if g.kernel == 1 {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        T::gemm(
            m,
            kk,
            hw,
            T::one(),
            weight,
            (kk as isize, 1),
            rhs,
            (hw as isize, 1),
            T::one(),
            dst,
            (hw as isize, 1),
        );
    }
}

/// Batched backward pass. Weight and bias gradients are accumulated image by
/// image in batch order; the input gradient is written only when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_weight: &mut [T],
    grad_bias: &mut [T],
    mut grad_input: Option<&mut [T]>,
) {
    let hw = g.pixels();
    let kk = g.patch_len();
    let m = g.out_channels;
    let mut cols = if g.kernel == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut dcols = if g.kernel == 1 || grad_input.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); kk * hw]
    };
    for b in 0..batch {
        let image = &input[b * g.in_channels * hw..(b + 1) * g.in_channels * hw];
        let dy = &grad_out[b * m * hw..(b + 1) * m * hw];
        for (o, row) in dy.chunks_exact(hw).enumerate() {
            grad_bias[o] += row.iter().copied().sum::<T>();
        }
        let cols_ref: &[T] = if g.kernel == 1 {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        // dW += dY * cols^T
        T::gemm(
            m,
            hw,
            kk,
            T::one(),
            dy,
            (hw as isize, 1),
            cols_ref,
            (1, hw as isize),
            T::one(),
            grad_weight,
            (kk as isize, 1),
        );
        if let Some(gi) = grad_input.as_deref_mut() {
            let gi_b = &mut gi[b * g.in_channels * hw..(b + 1) * g.in_channels * hw];
            if g.kernel == 1 {
                // dX += W^T * dY
                T::gemm(
                    kk,
                    m,
                    hw,
                    T::one(),
                    weight,
                    (1, kk as isize),
                    dy,
                    (hw as isize, 1),
                    T::one(),
                    gi_b,
                    (hw as isize, 1),
                );
            } else {
                T::gemm(
                    kk,
                    m,
                    hw,
                    T::one(),
                    weight,
                    (1, kk as isize),
                    dy,
                    (hw as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (hw as isize, 1),
                );
                col2im_add(g, &dcols, gi_b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn direct(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let (h, w, k) = (g.height, g.width, g.kernel);
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; g.out_channels * h * w];
        for o in 0..g.out_channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[o];
                    for c in 0..g.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = x as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += weight[((o * g.in_channels + c) * k + ky) * k + kx]
                                    * input[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + seed) * 12.9898).sin() * 0.5).collect()
    }

    #[test]
    fn forward_matches_direct_convolution() {
        for kernel in [1, 3] {
            let g = ConvGeometry {
                in_channels: 3,
                out_channels: 4,
                height: 5,
                width: 6,
                kernel,
            };
            let input = pseudo(3 * 30, 1.0);
            let weight = pseudo(4 * g.patch_len(), 2.0);
            let bias = pseudo(4, 3.0);
            let mut out = vec![0.0; 4 * 30];
            conv_forward(&g, 1, &input, &weight, &bias, &mut out);
            for (a, b) in out.iter().zip(direct(&g, &input, &weight, &bias)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeometry {
            in_channels: 2,
            out_channels: 1,
            height: 4,
            width: 3,
            kernel: 3,
        };
        let x = pseudo(2 * 12, 4.0);
        let c = pseudo(g.patch_len() * 12, 5.0);
        let mut cols = vec![0.0; c.len()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im_add(&g, &c, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
