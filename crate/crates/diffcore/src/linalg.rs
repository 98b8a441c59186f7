//! Matrix kernels used by the differentiable ops.

/// `c = a·b + beta·c` for row-major `c` of shape `m×n`.
///
/// `a` is logically `m×k`, stored row-major, or stored as its `k×m`
/// transpose when `a_t` is set. Same convention for `b` (`k×n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds asserted above cover every element addressed by
    // the given dimensions and strides.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Source coordinate along one axis, or `None` inside the zero padding.
    #[inline]
    fn src(out: usize, k: usize, stride: usize, padding: usize, extent: usize) -> Option<usize> {
        (out * stride + k).checked_sub(padding).filter(|&p| p < extent)
    }
}

/// Unfolds `input[c_in, h, w]` into `cols[c_in·kh·kw, h_out·w_out]`.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let out_len = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * out_len];
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for oy in 0..g.h_out {
                    let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.padding, g.h) else {
                        continue;
                    };
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        if let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.padding, g.w) {
                            *d = src_row[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, input_grad: &mut [f64]) {
    let out_len = g.out_len();
    for ci in 0..g.c_in {
        let plane = &mut input_grad[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * out_len..(row + 1) * out_len];
                for oy in 0..g.h_out {
                    let Some(iy) = ConvGeom::src(oy, ky, g.stride, g.padding, g.h) else {
                        continue;
                    };
                    let src_row = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, &v) in src_row.iter().enumerate() {
                        if let Some(ix) = ConvGeom::src(ox, kx, g.stride, g.padding, g.w) {
                            plane[iy * g.w + ix] += v;
                        }
                    }
                }
            }
        }
    }
}
