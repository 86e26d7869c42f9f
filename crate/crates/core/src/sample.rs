//! Bilinear sampling with zero padding.
//!
//! Sampling coordinates are continuous cell indices: `(i, j)` as floats hits
//! the center of cell `(i, j)` exactly. Neighbors that fall off the grid
//! contribute zero.

use crate::scalar::Scalar;

/// One of the four neighbors touched by a bilinear sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap<F> {
    /// Row-major flat cell index, `None` when the neighbor is off the grid.
    pub index: Option<usize>,
    pub weight: F,
    /// Partial derivatives of `weight` with respect to the sample coordinates.
    pub d_u: F,
    pub d_v: F,
}

/// The four bilinear taps of a sample at `(u, v)` on an `nx` by `ny` grid.
pub fn bilinear_taps<F: Scalar>(u: F, v: F, nx: usize, ny: usize) -> [Tap<F>; 4] {
    let zero = F::zero();
    let one = F::one();
    let dead = Tap {
        index: None,
        weight: zero,
        d_u: zero,
        d_v: zero,
    };
    if !(u.is_finite() && v.is_finite()) {
        return [dead; 4];
    }
    let u0 = u.floor();
    let v0 = v.floor();
    // Far off the grid every neighbor is dead; bail before the casts below.
    if u0 < -one || v0 < -one || u0 > F::of(nx as f64) || v0 > F::of(ny as f64) {
        return [dead; 4];
    }
    let fu = u - u0;
    let fv = v - v0;
    let (iu, iv) = (u0.as_f64() as i64, v0.as_f64() as i64);
    let at = |di: i64, dj: i64| -> Option<usize> {
        let (i, j) = (iu + di, iv + dj);
        (i >= 0 && j >= 0 && (i as usize) < nx && (j as usize) < ny)
            .then(|| i as usize * ny + j as usize)
    };
    [
        Tap {
            index: at(0, 0),
            weight: (one - fu) * (one - fv),
            d_u: -(one - fv),
            d_v: -(one - fu),
        },
        Tap {
            index: at(1, 0),
            weight: fu * (one - fv),
            d_u: one - fv,
            d_v: -fu,
        },
        Tap {
            index: at(0, 1),
            weight: (one - fu) * fv,
            d_u: -fv,
            d_v: one - fu,
        },
        Tap {
            index: at(1, 1),
            weight: fu * fv,
            d_u: fv,
            d_v: fu,
        },
    ]
}
