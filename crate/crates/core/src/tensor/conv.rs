use super::{dim_err, Result, Scalar};

/// Output side of a convolution: `floor((n + 2p - k) / s) + 1`.
pub fn conv_out_side(n: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return dim_err("conv2d", "stride must be >= 1");
    }
    if n + 2 * pad < kernel {
        return dim_err("conv2d", format!("input {n} + 2*pad {pad} smaller than kernel {kernel}"));
    }
    Ok((n + 2 * pad - kernel) / stride + 1)
}

/// Output side of a transposed convolution: `(n - 1) * s - 2p + k`.
pub fn conv_transpose_out_side(n: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return dim_err("conv_transpose2d", "stride must be >= 1");
    }
    let full = (n - 1) * stride + kernel;
    if full <= 2 * pad {
        return dim_err("conv_transpose2d", format!("padding {pad} consumes the whole output"));
    }
    Ok(full - 2 * pad)
}

/// Output side of a max-pool without padding.
pub fn pool_out_side(n: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return dim_err("maxpool2d", "window and stride must be >= 1");
    }
    if window > n {
        return dim_err("maxpool2d", format!("window {window} larger than input {n}"));
    }
    Ok((n - window) / stride + 1)
}

/// Geometry shared by the unfold/fold pair.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Patch {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Patch {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfolds `[N, C, H, W]` into `[C*kh*kw, N*oh*ow]`.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &Patch) -> Vec<T> {
    let ncols = g.cols();
    let plane = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.rows() * ncols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let drow = &mut dst[n * plane + oy * g.ow..n * plane + (oy + 1) * g.ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates `[C*kh*kw, N*oh*ow]` back into `[N, C, H, W]`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &Patch) -> Vec<T> {
    let ncols = g.cols();
    let plane = g.oh * g.ow;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let srow = &src[n * plane + oy * g.ow..n * plane + (oy + 1) * g.ow];
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, C, P]` -> `[C, N*P]`.
pub(crate) fn batch_to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for ch in 0..c {
            let src = &x[(i * c + ch) * p..(i * c + ch + 1) * p];
            out[ch * n * p + i * p..ch * n * p + (i + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[C, N*P]` -> `[N, C, P]`.
pub(crate) fn channel_to_batch_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        for i in 0..n {
            let src = &x[ch * n * p + i * p..ch * n * p + (i + 1) * p];
            out[(i * c + ch) * p..(i * c + ch + 1) * p].copy_from_slice(src);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_formulas() {
        assert_eq!(conv_out_side(64, 4, 2, 1).unwrap(), 32);
        assert_eq!(conv_transpose_out_side(1, 4, 1, 0).unwrap(), 4);
        assert_eq!(conv_transpose_out_side(4, 4, 2, 1).unwrap(), 8);
        assert_eq!(pool_out_side(4, 2, 2).unwrap(), 2);
        assert!(conv_out_side(2, 5, 1, 1).is_err());
        assert!(pool_out_side(2, 3, 1).is_err());
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let g = Patch { n: 2, c: 2, h: 5, w: 4, kh: 3, kw: 2, stride: 2, pad: 1, oh: 0, ow: 0 };
        let g = Patch {
            oh: conv_out_side(g.h, g.kh, g.stride, g.pad).unwrap(),
            ow: conv_out_side(g.w, g.kw, g.stride, g.pad).unwrap(),
            ..g
        };
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&col2im(&y, &g)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
