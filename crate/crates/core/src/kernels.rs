//! Low-level dense kernels shared by the graph operators.

use crate::real::Real;

/// Row-major `c = a·b + beta·c`, with `a` `[m,k]` (or `[k,m]` when `ta`)
/// and `b` `[k,n]` (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    beta: T,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strided views touch.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

#[inline]
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one `[ci, h, w]` image into `[ci*k*k, ho*wo]` patches.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    col: &mut [T],
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let plane = ho * wo;
    for c in 0..ci {
        let xin = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xin[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *out = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    col: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [T],
) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let plane = ho * wo;
    for c in 0..ci {
        let xin = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xin[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear corner weights for a zero-padded sample at `(y, x)` in an
/// `h × w` grid; out-of-range corners get index `None`.
#[derive(Clone, Copy, Debug)]
pub struct Bilinear<T> {
    pub idx: [Option<usize>; 4],
    pub wgt: [T; 4],
    /// Fractional parts, needed for location gradients.
    pub fy: T,
    pub fx: T,
}

impl<T: Real> Bilinear<T> {
    /// Zero padding outside the grid: corners `(y0,x0) (y0,x1) (y1,x0) (y1,x1)`.
    pub fn zero_padded(y: T, x: T, h: usize, w: usize) -> Self {
        let one = T::one();
        // Also rejects non-finite locations before the integer conversion.
        let inside = |v: T, n: usize| v > -one && v < T::from_f64(n as f64);
        if !(inside(y, h) && inside(x, w)) {
            return Bilinear { idx: [None; 4], wgt: [T::zero(); 4], fy: T::zero(), fx: T::zero() };
        }
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let y0i = y0.as_f64() as i64;
        let x0i = x0.as_f64() as i64;
        let mut idx = [None; 4];
        let wgt = [(one - fy) * (one - fx), (one - fy) * fx, fy * (one - fx), fy * fx];
        let corners = [(y0i, x0i), (y0i, x0i + 1), (y0i + 1, x0i), (y0i + 1, x0i + 1)];
        for (slot, &(cy, cx)) in idx.iter_mut().zip(corners.iter()) {
            if cy >= 0 && cy < h as i64 && cx >= 0 && cx < w as i64 {
                *slot = Some(cy as usize * w + cx as usize);
            }
        }
        Bilinear { idx, wgt, fy, fx }
    }

    /// Align-style sampling: points up to one pixel outside are clamped to
    /// the border, farther points contribute nothing.
    pub fn clamped(y: T, x: T, h: usize, w: usize) -> Self {
        let one = T::one();
        let fh = T::from_f64(h as f64);
        let fw = T::from_f64(w as f64);
        if y < -one || y > fh || x < -one || x > fw || h == 0 || w == 0 {
            return Bilinear { idx: [None; 4], wgt: [T::zero(); 4], fy: T::zero(), fx: T::zero() };
        }
        let y = if y <= T::zero() { T::zero() } else { y };
        let x = if x <= T::zero() { T::zero() } else { x };
        let mut y0 = y.floor().as_f64() as usize;
        let mut x0 = x.floor().as_f64() as usize;
        let (y1, yy) = if y0 >= h - 1 {
            y0 = h - 1;
            (h - 1, T::from_f64(y0 as f64))
        } else {
            (y0 + 1, y)
        };
        let (x1, xx) = if x0 >= w - 1 {
            x0 = w - 1;
            (w - 1, T::from_f64(x0 as f64))
        } else {
            (x0 + 1, x)
        };
        let fy = yy - T::from_f64(y0 as f64);
        let fx = xx - T::from_f64(x0 as f64);
        let wgt = [(one - fy) * (one - fx), (one - fy) * fx, fy * (one - fx), fy * fx];
        let idx = [Some(y0 * w + x0), Some(y0 * w + x1), Some(y1 * w + x0), Some(y1 * w + x1)];
        Bilinear { idx, wgt, fy, fx }
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        let mut acc = T::zero();
        for c in 0..4 {
            if let Some(i) = self.idx[c] {
                acc += self.wgt[c] * plane[i];
            }
        }
        acc
    }

    #[inline]
    fn corner(&self, plane: &[T], c: usize) -> T {
        self.idx[c].map_or(T::zero(), |i| plane[i])
    }

    /// Partial derivatives of the zero-padded sample w.r.t. `(y, x)`.
    #[inline]
    pub fn grad_yx(&self, plane: &[T]) -> (T, T) {
        let one = T::one();
        let (v00, v01, v10, v11) =
            (self.corner(plane, 0), self.corner(plane, 1), self.corner(plane, 2), self.corner(plane, 3));
        let dy = (one - self.fx) * (v10 - v00) + self.fx * (v11 - v01);
        let dx = (one - self.fy) * (v01 - v00) + self.fy * (v11 - v10);
        (dy, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (ci, h, w, k, s, p) = (2, 5, 4, 3, 2, 1);
        let ho = conv_out(h, k, s, p);
        let wo = conv_out(w, k, s, p);
        let x: Vec<f64> = (0..ci * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..ci * k * k * ho * wo).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, ci, h, w, k, s, p, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&y, ci, h, w, k, s, p, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_reproduces_grid_values() {
        let plane = [1.0f64, 2.0, 3.0, 4.0];
        let b = Bilinear::zero_padded(0.0, 1.0, 2, 2);
        assert_eq!(b.sample(&plane), 2.0);
        let mid = Bilinear::zero_padded(0.5, 0.5, 2, 2);
        assert!((mid.sample(&plane) - 2.5).abs() < 1e-12);
        let out = Bilinear::zero_padded(-3.0, 0.0, 2, 2);
        assert_eq!(out.sample(&plane), 0.0);
    }
}
