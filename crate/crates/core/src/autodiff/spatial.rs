//! Spatial kernels for the tape: convolution, bilinear upsampling, pixel
//! shuffle. Features are `(H, W, C)`, kernels `(kh, kw, Cin, Cout)`.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, ArrayView4};

pub fn conv2d_output_size(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    (
        (h + 2 * pad - kh) / stride + 1,
        (w + 2 * pad - kw) / stride + 1,
    )
}

/// Lower input patches into a `(Ho*Wo, kh*kw*Cin)` matrix.
fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (h, w, cin) = x.dim();
    let (ho, wo) = conv2d_output_size(h, w, kh, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((ho * wo, kh * kw * cin));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (ky * kw + kx) * cin;
                    for ci in 0..cin {
                        cols[[row, base + ci]] = x[[iy as usize, ix as usize, ci]];
                    }
                }
            }
        }
    }
    cols
}

pub fn conv2d_forward(
    x: &ArrayView3<f64>,
    kernel: &ArrayView4<f64>,
    bias: &ArrayView1<f64>,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (h, w, cin) = x.dim();
    let (kh, kw, kcin, cout) = kernel.dim();
    assert_eq!(cin, kcin, "conv2d input channels {cin} vs kernel {kcin}");
    assert_eq!(bias.len(), cout, "conv2d bias length");
    let (ho, wo) = conv2d_output_size(h, w, kh, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad);
    let k2 = kernel
        .to_shape((kh * kw * cin, cout))
        .expect("kernel reshape");
    let mut out2 = cols.dot(&k2);
    for mut row in out2.rows_mut() {
        row += bias;
    }
    out2.into_shape_with_order((ho, wo, cout)).unwrap()
}

pub fn conv2d_backward(
    x: &ArrayView3<f64>,
    kernel: &ArrayView4<f64>,
    grad_out: &ArrayView3<f64>,
    stride: usize,
    pad: usize,
) -> (Array3<f64>, ndarray::Array4<f64>, Array1<f64>) {
    let (h, w, cin) = x.dim();
    let (kh, kw, _, cout) = kernel.dim();
    let (ho, wo, gco) = grad_out.dim();
    assert_eq!(gco, cout);

    let g2 = grad_out
        .to_shape((ho * wo, cout))
        .expect("grad reshape")
        .to_owned();

    let cols = im2col(x, kh, kw, stride, pad);
    let dk2 = cols.t().dot(&g2);
    let dkernel = dk2.into_shape_with_order((kh, kw, cin, cout)).unwrap();

    let dbias = g2.sum_axis(ndarray::Axis(0));

    let k2 = kernel
        .to_shape((kh * kw * cin, cout))
        .expect("kernel reshape");
    let dcols = g2.dot(&k2.t());

    // col2im: scatter patch gradients back onto the input grid
    let mut dx = Array3::<f64>::zeros((h, w, cin));
    for oy in 0..ho {
        for ox in 0..wo {
            let row = oy * wo + ox;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base = (ky * kw + kx) * cin;
                    for ci in 0..cin {
                        dx[[iy as usize, ix as usize, ci]] += dcols[[row, base + ci]];
                    }
                }
            }
        }
    }
    (dx, dkernel, dbias)
}

/// Sample position and weights for one output coordinate of a 2x bilinear
/// upsample with half-pixel centers, clamped at the border.
#[inline]
fn up2x_taps(o: usize, n: usize) -> (usize, usize, f64) {
    let s = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

pub fn upsample_bilinear_2x_forward(x: &ArrayView3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let mut out = Array3::<f64>::zeros((2 * h, 2 * w, c));
    for oy in 0..2 * h {
        let (y0, y1, wy) = up2x_taps(oy, h);
        for ox in 0..2 * w {
            let (x0, x1, wx) = up2x_taps(ox, w);
            for ci in 0..c {
                out[[oy, ox, ci]] = (1.0 - wy) * (1.0 - wx) * x[[y0, x0, ci]]
                    + (1.0 - wy) * wx * x[[y0, x1, ci]]
                    + wy * (1.0 - wx) * x[[y1, x0, ci]]
                    + wy * wx * x[[y1, x1, ci]];
            }
        }
    }
    out
}

pub fn upsample_bilinear_2x_backward(
    grad_out: &ArrayView3<f64>,
    in_dim: (usize, usize, usize),
) -> Array3<f64> {
    let (h, w, c) = in_dim;
    let mut dx = Array3::<f64>::zeros((h, w, c));
    for oy in 0..2 * h {
        let (y0, y1, wy) = up2x_taps(oy, h);
        for ox in 0..2 * w {
            let (x0, x1, wx) = up2x_taps(ox, w);
            for ci in 0..c {
                let g = grad_out[[oy, ox, ci]];
                dx[[y0, x0, ci]] += (1.0 - wy) * (1.0 - wx) * g;
                dx[[y0, x1, ci]] += (1.0 - wy) * wx * g;
                dx[[y1, x0, ci]] += wy * (1.0 - wx) * g;
                dx[[y1, x1, ci]] += wy * wx * g;
            }
        }
    }
    dx
}

pub fn pixel_shuffle_forward(x: &ArrayView3<f64>, r: usize) -> Array3<f64> {
    let (h, w, c_in) = x.dim();
    assert!(
        c_in % (r * r) == 0,
        "pixel_shuffle channels {c_in} not divisible by r^2 = {}",
        r * r
    );
    let c_out = c_in / (r * r);
    let mut out = Array3::<f64>::zeros((h * r, w * r, c_out));
    for y in 0..h {
        for x_ in 0..w {
            for co in 0..c_out {
                for dy in 0..r {
                    for dx in 0..r {
                        out[[y * r + dy, x_ * r + dx, co]] = x[[y, x_, co * r * r + dy * r + dx]];
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_shuffle_backward(grad_out: &ArrayView3<f64>, r: usize) -> Array3<f64> {
    let (ho, wo, c_out) = grad_out.dim();
    let (h, w) = (ho / r, wo / r);
    let mut dx = Array3::<f64>::zeros((h, w, c_out * r * r));
    for y in 0..h {
        for x_ in 0..w {
            for co in 0..c_out {
                for dy in 0..r {
                    for dx_ in 0..r {
                        dx[[y, x_, co * r * r + dy * r + dx_]] =
                            grad_out[[y * r + dy, x_ * r + dx_, co]];
                    }
                }
            }
        }
    }
    dx
}
