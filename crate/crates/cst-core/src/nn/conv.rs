//! im2col / col2im kernels shared by convolution and transposed convolution.
//!
//! The window grid is always passed explicitly so the same scatter/gather
//! code serves both directions (transposed convolution is the adjoint of
//! convolution over the same geometry).

use ndarray::{Array2, Array3, ArrayView3};

use super::Flt;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    /// Window grid height/width (output positions of the gather direction).
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn for_conv(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        ConvGeom { kh, kw, stride, pad, oh, ow }
    }
}

/// Gathers sliding windows of `x` (C, H, W) into a matrix
/// [C·kh·kw, oh·ow]. Out-of-bounds positions contribute zeros.
pub fn im2col<F: Flt>(x: &ArrayView3<'_, F>, g: ConvGeom) -> Array2<F> {
    let (cin, h, w) = x.dim();
    let l = g.oh * g.ow;
    let mut cols = Array2::<F>::zeros((cin * g.kh * g.kw, l));
    let xs = x.as_slice().expect("im2col input must be contiguous");
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let row_off = row * l;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_off = ci * h * w + iy as usize * w;
                    let c_off = row_off + oy * g.ow;
                    let (lo, hi) = ox_range(w, g.stride, g.pad, kj, g.ow);
                    for ox in lo..hi {
                        let ix = ox * g.stride + kj - g.pad;
                        cs[c_off + ox] = xs[x_off + ix];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into a (C, H, W) image.
pub fn col2im<F: Flt>(cols: &Array2<F>, cin: usize, h: usize, w: usize, g: ConvGeom) -> Array3<F> {
    let l = g.oh * g.ow;
    debug_assert_eq!(cols.dim(), (cin * g.kh * g.kw, l));
    let mut out = Array3::<F>::zeros((cin, h, w));
    let os = out.as_slice_mut().unwrap();
    let cs = cols.as_slice().expect("col2im input must be contiguous");
    for ci in 0..cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let row_off = row * l;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_off = ci * h * w + iy as usize * w;
                    let c_off = row_off + oy * g.ow;
                    let (lo, hi) = ox_range(w, g.stride, g.pad, kj, g.ow);
                    for ox in lo..hi {
                        let ix = ox * g.stride + kj - g.pad;
                        os[x_off + ix] = os[x_off + ix] + cs[c_off + ox];
                    }
                }
            }
        }
    }
    out
}

/// Valid output-column range such that ix = ox·stride + kj − pad ∈ [0, w).
fn ox_range(w: usize, stride: usize, pad: usize, kj: usize, ow: usize) -> (usize, usize) {
    let lo = if pad > kj { (pad - kj).div_ceil(stride) } else { 0 };
    let max_num = w as isize - 1 + pad as isize - kj as isize;
    if max_num < 0 {
        return (0, 0);
    }
    let hi = (max_num as usize / stride + 1).min(ow);
    (lo.min(hi), hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn im2col_identity_kernel_geometry() {
        let x = array![[[1.0f64, 2.0], [3.0, 4.0]]];
        let g = ConvGeom::for_conv(2, 2, 1, 1, 1, 0);
        let cols = im2col(&x.view(), g);
        assert_eq!(cols, array![[1.0, 2.0, 3.0, 4.0]]);
    }

    #[test]
    fn im2col_3x3_padded_center() {
        // 3x3 kernel over a 2x2 image with pad 1: center tap row equals the image.
        let x = array![[[1.0f64, 2.0], [3.0, 4.0]]];
        let g = ConvGeom::for_conv(2, 2, 3, 3, 1, 1);
        let cols = im2col(&x.view(), g);
        assert_eq!(g.oh, 2);
        // center tap is (ki=1, kj=1) → row 4
        assert_eq!(cols.row(4).to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        // top-left tap (0,0) only sees the image at output (1,1)
        assert_eq!(cols.row(0).to_vec(), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for &(h, w, k, s, p) in
            &[(5usize, 7usize, 3usize, 1usize, 1usize), (6, 6, 4, 2, 1), (8, 5, 3, 2, 0), (4, 4, 1, 1, 0)]
        {
            let g = ConvGeom::for_conv(h, w, k, k, s, p);
            let x = Array3::from_shape_fn((2, h, w), |_| rng.gen_range(-1.0f64..1.0));
            let c = Array2::from_shape_fn((2 * k * k, g.oh * g.ow), |_| rng.gen_range(-1.0f64..1.0));
            let lhs: f64 = (&im2col(&x.view(), g) * &c).sum();
            let rhs: f64 = (&x * &col2im(&c, 2, h, w, g)).sum();
            assert!((lhs - rhs).abs() < 1e-10, "adjoint mismatch: {lhs} vs {rhs}");
        }
    }
}
