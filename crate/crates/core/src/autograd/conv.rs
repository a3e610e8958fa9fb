use ndarray::{Array2, ArrayD, IxDyn};

use super::Float;

/// Unfolds a channels-last `[b, h, w, c]` buffer into `[b*h*w, 9c]` rows of
/// zero-padded 3x3 neighbourhoods ordered `(dy, dx, c)`.
pub fn im2col_3x3<F: Float>(src: &[F], b: usize, h: usize, w: usize, c: usize) -> Array2<F> {
    let mut cols = Array2::<F>::zeros((b * h * w, 9 * c));
    let dst = cols.as_slice_mut().unwrap();
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = ((bi * h + y) * w + x) * 9 * c;
                for dy in 0..3 {
                    let sy = y + dy;
                    if sy == 0 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    for dx in 0..3 {
                        let sx = x + dx;
                        if sx == 0 || sx > w {
                            continue;
                        }
                        let s = ((bi * h + sy) * w + sx - 1) * c;
                        let d = row + (dy * 3 + dx) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_3x3`]: scatters `[b*h*w, 9c]` rows back onto the image.
pub fn col2im_3x3<F: Float>(cols: &[F], b: usize, h: usize, w: usize, c: usize) -> ArrayD<F> {
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, h, w, c]));
    let dst = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = ((bi * h + y) * w + x) * 9 * c;
                for dy in 0..3 {
                    let sy = y + dy;
                    if sy == 0 || sy > h {
                        continue;
                    }
                    let sy = sy - 1;
                    for dx in 0..3 {
                        let sx = x + dx;
                        if sx == 0 || sx > w {
                            continue;
                        }
                        let d = ((bi * h + sy) * w + sx - 1) * c;
                        let s = row + (dy * 3 + dx) * c;
                        for (o, &v) in dst[d..d + c].iter_mut().zip(&cols[s..s + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution, for comparison.
    fn naive_conv(x: &[f64], wt: &[f64], b: usize, h: usize, w: usize, c: usize, o: usize) -> Vec<f64> {
        let mut out = vec![0.0; b * h * w * o];
        for bi in 0..b {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    for oc in 0..o {
                        let mut acc = 0.0;
                        for dy in -1..=1isize {
                            for dx in -1..=1isize {
                                let (sy, sx) = (y + dy, xx + dx);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                for ic in 0..c {
                                    let xi = ((bi * h + sy as usize) * w + sx as usize) * c + ic;
                                    let wi = (((dy + 1) * 3 + dx + 1) as usize * c + ic) * o + oc;
                                    acc += x[xi] * wt[wi];
                                }
                            }
                        }
                        out[((bi * h + y as usize) * w + xx as usize) * o + oc] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matmul_matches_direct_convolution() {
        let (b, h, w, c, o) = (2, 5, 4, 3, 2);
        let x: Vec<f64> = (0..b * h * w * c).map(|i| ((i * 37 % 17) as f64) - 8.0).collect();
        let wt: Vec<f64> = (0..9 * c * o).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
        let cols = im2col_3x3(&x, b, h, w, c);
        let wm = Array2::from_shape_vec((9 * c, o), wt.clone()).unwrap();
        let got = cols.dot(&wm);
        let want = naive_conv(&x, &wt, b, h, w, c, o);
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-9);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (b, h, w, c) = (1, 3, 4, 2);
        let x: Vec<f64> = (0..b * h * w * c).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..b * h * w * 9 * c).map(|i| (i as f64 * 0.7).cos()).collect();
        let cols = im2col_3x3(&x, b, h, w, c);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im_3x3(&y, b, h, w, c);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
