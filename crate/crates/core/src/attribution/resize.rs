//! Bilinear resize, corner-aligned, no antialiasing.

/// Resizes a row-major `in_h x in_w` grid to `out_h x out_w`.
///
/// Corner pixels map onto corner pixels. Same-size input is returned unchanged.
pub fn bilinear(values: &[f64], in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    debug_assert_eq!(values.len(), in_h * in_w);
    if in_h == out_h && in_w == out_w {
        return values.to_vec();
    }
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let src = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, in_h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, in_w, out_w);
            let top = values[y0 * in_w + x0] * (1.0 - fx) + values[y0 * in_w + x1] * fx;
            let bottom = values[y1 * in_w + x0] * (1.0 - fx) + values[y1 * in_w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corners_preserved_and_midpoints_interpolated() {
        let v = [0.0, 1.0, 2.0, 3.0];
        let out = bilinear(&v, 2, 2, 3, 3);
        assert_eq!(out, vec![0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn constant_grid_stays_constant() {
        let out = bilinear(&[4.0; 4], 2, 2, 8, 8);
        assert!(out.iter().all(|&v| (v - 4.0).abs() < 1e-15));
    }

    #[test]
    fn single_cell_broadcasts() {
        assert_eq!(bilinear(&[2.5], 1, 1, 2, 3), vec![2.5; 6]);
    }
}
