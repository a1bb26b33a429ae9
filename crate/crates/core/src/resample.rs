//! Separable interpolation kernels and dense resize operators.
//!
//! Downsampling widens the kernel by the scale factor (antialiasing), so a
//! 1024 -> 32 bicubic reduction averages over the whole footprint instead
//! of point-sampling it. Weights of every output sample sum to one.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Filter {
    Bilinear,
    /// Keys cubic convolution with `a = -0.5`.
    Bicubic,
    /// Nearest sample; keeps binary and one-hot images binary.
    Nearest,
}

pub const CUBIC_A: f64 = -0.5;

impl Filter {
    pub fn support(self) -> f64 {
        match self {
            Filter::Bilinear | Filter::Nearest => 1.0,
            Filter::Bicubic => 2.0,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        let x = libm::fabs(x);
        match self {
            Filter::Nearest => {
                if x < 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            Filter::Bilinear => {
                if x < 1.0 {
                    1.0 - x
                } else {
                    0.0
                }
            }
            Filter::Bicubic => {
                let a = CUBIC_A;
                if x < 1.0 {
                    ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
                } else if x < 2.0 {
                    (((x - 5.0) * x + 8.0) * x - 4.0) * a
                } else {
                    0.0
                }
            }
        }
    }
}

/// Row-major `n_out x n_in` matrix mapping a 1-D signal to its resized version.
pub fn resize_matrix(n_in: usize, n_out: usize, filter: Filter) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    if n_in == n_out {
        for i in 0..n_in {
            m[i * n_in + i] = 1.0;
        }
        return m;
    }
    let scale = n_in as f64 / n_out as f64;
    if filter == Filter::Nearest {
        for o in 0..n_out {
            let i = ((o as f64 + 0.5) * scale) as usize;
            m[o * n_in + i.min(n_in - 1)] = 1.0;
        }
        return m;
    }
    let fscale = scale.max(1.0);
    let support = filter.support() * fscale;
    for o in 0..n_out {
        let center = (o as f64 + 0.5) * scale;
        let lo = libm::floor(center - support - 0.5).max(0.0) as usize;
        let hi = (libm::ceil(center + support - 0.5) as usize + 1).min(n_in);
        let row = &mut m[o * n_in..(o + 1) * n_in];
        let mut total = 0.0;
        for (i, slot) in row.iter_mut().enumerate().take(hi).skip(lo) {
            let w = filter.eval((i as f64 + 0.5 - center) / fscale);
            *slot = w;
            total += w;
        }
        if total != 0.0 {
            for w in &mut row[lo..hi] {
                *w /= total;
            }
        }
    }
    m
}

/// Resize every `h x w` plane of a planar buffer to `ho x wo`.
pub fn resize_planes(planes: &[f32], h: usize, w: usize, ho: usize, wo: usize, filter: Filter) -> Vec<f32> {
    let rows = resize_matrix(h, ho, filter);
    let cols = resize_matrix(w, wo, filter);
    let n = planes.len() / (h * w);
    let mut out = vec![0.0f32; n * ho * wo];
    let mut tmp = vec![0.0f64; h * wo];
    for p in 0..n {
        let src = &planes[p * h * w..(p + 1) * h * w];
        // Columns first, then rows; accumulation in f64.
        for y in 0..h {
            for ox in 0..wo {
                let cw = &cols[ox * w..(ox + 1) * w];
                let mut acc = 0.0;
                for x in 0..w {
                    if cw[x] != 0.0 {
                        acc += cw[x] * src[y * w + x] as f64;
                    }
                }
                tmp[y * wo + ox] = acc;
            }
        }
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let rw = &rows[oy * h..(oy + 1) * h];
            for ox in 0..wo {
                let mut acc = 0.0;
                for y in 0..h {
                    if rw[y] != 0.0 {
                        acc += rw[y] * tmp[y * wo + ox];
                    }
                }
                dst[oy * wo + ox] = acc as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one() {
        for &(a, b) in &[(8, 4), (64, 8), (4, 8), (5, 13), (1024, 32)] {
            for f in [Filter::Bilinear, Filter::Bicubic] {
                let m = resize_matrix(a, b, f);
                for o in 0..b {
                    let s: f64 = m[o * a..(o + 1) * a].iter().sum();
                    assert!((s - 1.0).abs() < 1e-12, "{a}->{b} {f:?}");
                }
            }
        }
    }

    #[test]
    fn cubic_kernel_interpolates() {
        assert_eq!(Filter::Bicubic.eval(0.0), 1.0);
        assert_eq!(Filter::Bicubic.eval(1.0), 0.0);
        assert_eq!(Filter::Bicubic.eval(2.0), 0.0);
        assert!((Filter::Bicubic.eval(0.5) - 0.5625).abs() < 1e-12);
    }

    #[test]
    fn bilinear_upsample_by_two_matches_half_pixel_rule() {
        let m = resize_matrix(2, 4, Filter::Bilinear);
        // Output centers at 0.25, 0.75, 1.25, 1.75 in input pixel units.
        assert_eq!(&m[0..2], &[1.0, 0.0]);
        assert!((m[2] - 0.75).abs() < 1e-12 && (m[3] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn same_size_is_identity() {
        let data: Vec<f32> = (0..16).map(|i| i as f32 * 0.1).collect();
        assert_eq!(resize_planes(&data, 4, 4, 4, 4, Filter::Bicubic), data);
    }
}
