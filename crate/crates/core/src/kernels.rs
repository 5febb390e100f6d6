//! Raw numeric kernels shared by the differentiable operations.

/// Arithmetic used for matrix products.
///
/// Storage is always `f64`; `F32` rounds operands to single precision inside
/// the product kernels only, which roughly halves the cost of convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Strided matrix view: element (i, j) lives at `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: 1, cs: cols }
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + (accumulate ? c : 0)`, `c` row-major.
pub(crate) fn gemm(
    precision: Precision,
    m: usize,
    k: usize,
    n: usize,
    a: Mat<'_>,
    b: Mat<'_>,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    match precision {
        Precision::F64 => unsafe {
            // SAFETY: the strided views cover m×k and k×n elements and `c` holds m×n.
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        },
        Precision::F32 => {
            let a32 = to_f32(a, m, k);
            let b32 = to_f32(b, k, n);
            let mut c32 = vec![0f32; m * n];
            unsafe {
                // SAFETY: contiguous row-major buffers of the stated sizes.
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a32.as_ptr(),
                    k as isize,
                    1,
                    b32.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for (dst, src) in c.iter_mut().zip(&c32) {
                if accumulate {
                    *dst += *src as f64;
                } else {
                    *dst = *src as f64;
                }
            }
        }
    }
}

fn to_f32(m: Mat<'_>, rows: usize, cols: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(m.data[i * m.rs + j * m.cs] as f32);
        }
    }
    out
}

/// Geometry of a 2-D cross-correlation over one sample.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1, stride 1, no padding: the input already is its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds `x[C,H,W]` into columns `[C·kh·kw, out_h·out_w]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_len();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx[C,H,W]`.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.out_len();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            plane[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Where the sample grids of a bilinear resize sit relative to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    /// First and last samples of both grids coincide.
    Corners,
    /// Sample `i` of the coarse grid sits on sample `i·scale` of the fine
    /// one, which is where a padded stride-2 convolution puts its outputs.
    Strided,
}

/// Sampling table for one axis: `(lo, hi, frac)` per output index.
pub(crate) fn bilinear_axis(input: usize, output: usize, align: Alignment) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            let src = match align {
                _ if input == 1 => return (0, 0, 0.0),
                Alignment::Corners if output == 1 => return (0, 0, 0.0),
                Alignment::Corners => o as f64 * (input - 1) as f64 / (output - 1) as f64,
                Alignment::Strided => (o as f64 * input as f64 / output as f64).min((input - 1) as f64),
            };
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of one `[H,W]` plane.
pub(crate) fn resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize, align: Alignment, dst: &mut [f64]) {
    let ys = bilinear_axis(h, oh, align);
    let xs = bilinear_axis(w, ow, align);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            dst[oy * ow + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
}

/// Adjoint of [`resize_plane`].
pub(crate) fn resize_plane_backward(
    grad: &[f64],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    align: Alignment,
    dsrc: &mut [f64],
) {
    let ys = bilinear_axis(h, oh, align);
    let xs = bilinear_axis(w, ow, align);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let g = grad[oy * ow + ox];
            dsrc[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
            dsrc[y0 * w + x1] += g * (1.0 - fy) * fx;
            dsrc[y1 * w + x0] += g * fy * (1.0 - fx);
            dsrc[y1 * w + x1] += g * fy * fx;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3×4
        let mut c = vec![0.0; 8];
        gemm(Precision::F64, 2, 3, 4, Mat::rows(&a, 3), Mat::rows(&b, 4), &mut c, false);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|t| a[i * 3 + t] * b[t * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // aᵀ·aᵀᵀ == aᵀ·a as a 3×3 product
        let mut d = vec![0.0; 9];
        gemm(Precision::F64, 3, 2, 3, Mat::transposed(&a, 3), Mat::rows(&a, 3), &mut d, false);
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..2).map(|t| a[t * 3 + i] * a[t * 3 + j]).sum();
                assert_eq!(d[i * 3 + j], want);
            }
        }
    }

    #[test]
    fn bilinear_axis_is_corner_aligned() {
        let t = bilinear_axis(2, 3, Alignment::Corners);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[1], (0, 1, 0.5));
        assert_eq!(t[2], (1, 1, 0.0));
    }

    #[test]
    fn bilinear_axis_strided_follows_the_stride() {
        // 2 → 8: output o reads input o/4, clamped at the last sample
        let t = bilinear_axis(2, 8, Alignment::Strided);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[1], (0, 1, 0.25));
        assert_eq!(t[3], (0, 1, 0.75));
        assert_eq!(t[4], (1, 1, 0.0));
        assert_eq!(t[7], (1, 1, 0.0));
    }
}
