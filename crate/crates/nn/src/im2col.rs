//! Patch extraction for stride-1 "same" convolutions with odd kernels.
//!
//! A patch matrix has one row per (plane, ky, kx) and one column per output
//! pixel. Planes are addressed by offsets into a flat buffer so the 3D path
//! can list the same frame more than once (temporal edge replication).

fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let x0 = ((-dx).max(0) as usize).min(w);
    let x1 = ((w as isize - dx).min(w as isize)).max(x0 as isize) as usize;
    (x0, x1.min(w))
}

pub(crate) fn im2col(x: &[f32], planes: &[usize], h: usize, w: usize, k: usize, col: &mut [f32]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    debug_assert_eq!(col.len(), planes.len() * k * k * hw);
    for (pi, &off) in planes.iter().enumerate() {
        let plane = &x[off..off + hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (pi * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let (x0, x1) = valid_span(w, dx);
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    let d = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        d.fill(0.0);
                        continue;
                    }
                    d[..x0].fill(0.0);
                    d[x1..].fill(0.0);
                    if x1 > x0 {
                        let s = iy as usize * w + (x0 as isize + dx) as usize;
                        d[x0..x1].copy_from_slice(&plane[s..s + (x1 - x0)]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into their planes.
pub(crate) fn col2im(col: &[f32], planes: &[usize], h: usize, w: usize, k: usize, dx_buf: &mut [f32]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for (pi, &off) in planes.iter().enumerate() {
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = (pi * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let (x0, x1) = valid_span(w, dx);
                if x1 <= x0 {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let s = &src[oy * w + x0..oy * w + x1];
                    let base = off + iy as usize * w + (x0 as isize + dx) as usize;
                    for (d, v) in dx_buf[base..base + (x1 - x0)].iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_of_3x3_image() {
        let x: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let mut col = vec![0.0; 9 * 9];
        im2col(&x, &[0], 3, 3, 3, &mut col);
        // centre tap reproduces the image
        assert_eq!(&col[4 * 9..5 * 9], &x[..]);
        // top-left tap is the image shifted down-right with zero fill
        assert_eq!(&col[0..9], &[0., 0., 0., 0., 1., 2., 0., 4., 5.]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let h = 4;
        let w = 5;
        let x: Vec<f32> = (0..2 * h * w).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
        let planes = [0, h * w];
        let mut col = vec![0.0; 2 * 9 * h * w];
        im2col(&x, &planes, h, w, 3, &mut col);
        let c: Vec<f32> = (0..col.len()).map(|i| ((i * 13) % 17) as f32 - 8.0).collect();
        let lhs: f32 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &planes, h, w, 3, &mut back);
        let rhs: f32 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
