//! Bilinear sampling with zero padding outside the field.

use crate::scalar::Scalar;

/// Four-neighbour interpolation stencil for one fractional coordinate.
///
/// Corner order is `(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)`.
/// Corners outside the field carry `valid = false` and contribute zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil<T> {
    pub idx: [usize; 4],
    pub valid: [bool; 4],
    pub weight: [T; 4],
    /// Fractional parts `(ly, lx)`.
    pub frac: (T, T),
}

impl<T: Scalar> Stencil<T> {
    /// `None` when every neighbour falls outside the `h x w` field.
    #[inline]
    pub fn new(h: usize, w: usize, y: T, x: T) -> Option<Self> {
        let (hf, wf) = (T::lit(h as f64), T::lit(w as f64));
        let neg1 = -T::one();
        // also rejects NaN
        if !(y > neg1 && y < hf && x > neg1 && x < wf) {
            return None;
        }
        let (y0f, x0f) = (y.floor(), x.floor());
        let (ly, lx) = (y - y0f, x - x0f);
        let (hy, hx) = (T::one() - ly, T::one() - lx);
        let y0 = y0f.to_isize().unwrap_or(-1);
        let x0 = x0f.to_isize().unwrap_or(-1);
        let (hi, wi) = (h as isize, w as isize);
        let inside = |yy: isize, xx: isize| yy >= 0 && yy < hi && xx >= 0 && xx < wi;
        let at = |yy: isize, xx: isize| {
            if inside(yy, xx) {
                (yy * wi + xx) as usize
            } else {
                0
            }
        };
        Some(Self {
            idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
            valid: [
                inside(y0, x0),
                inside(y0, x0 + 1),
                inside(y0 + 1, x0),
                inside(y0 + 1, x0 + 1),
            ],
            weight: [hy * hx, hy * lx, ly * hx, ly * lx],
            frac: (ly, lx),
        })
    }

    #[inline]
    pub fn corners(&self, plane: &[T]) -> [T; 4] {
        let mut v = [T::zero(); 4];
        for i in 0..4 {
            if self.valid[i] {
                v[i] = plane[self.idx[i]];
            }
        }
        v
    }

    #[inline]
    pub fn value(&self, plane: &[T]) -> T {
        let v = self.corners(plane);
        self.weight[0] * v[0] + self.weight[1] * v[1] + self.weight[2] * v[2] + self.weight[3] * v[3]
    }

    /// Partial derivatives `(d/dy, d/dx)` of the interpolated value.
    #[inline]
    pub fn coord_grad(&self, v: [T; 4]) -> (T, T) {
        let (ly, lx) = self.frac;
        let (hy, hx) = (T::one() - ly, T::one() - lx);
        let dy = hx * (v[2] - v[0]) + lx * (v[3] - v[1]);
        let dx = hy * (v[1] - v[0]) + ly * (v[3] - v[2]);
        (dy, dx)
    }
}

/// Bilinear interpolation of a single `h x w` plane at fractional `(y, x)`.
///
/// Neighbours outside `[0, h-1] x [0, w-1]` contribute zero, so the function
/// is total and decays to zero one pixel beyond the border.
pub fn bilinear_sample<T: Scalar>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    debug_assert_eq!(plane.len(), h * w);
    match Stencil::new(h, w, y, x) {
        Some(s) => s.value(plane),
        None => T::zero(),
    }
}
