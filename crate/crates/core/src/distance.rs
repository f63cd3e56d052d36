//! Exact Euclidean distance transforms on anisotropic voxel grids.

use ndarray::{Array3, Axis};

/// Squared physical distance from every voxel centre to the nearest `true`
/// voxel of `set`. Voxels are `infinity` when `set` is empty.
///
/// `spacing` is `(slice, row, col)` in the same order as the array axes.
pub fn squared_edt(set: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut f = set.mapv(|v| if v { 0.0 } else { f64::INFINITY });
    if !set.iter().any(|&v| v) {
        return f;
    }
    for axis in [2usize, 1, 0] {
        let n = f.len_of(Axis(axis));
        let mut buf = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut env = Envelope::new(n);
        for mut lane in f.lanes_mut(Axis(axis)) {
            for (b, v) in buf.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            env.transform(&buf, spacing[axis], &mut out);
            for (v, o) in lane.iter_mut().zip(&out) {
                *v = *o;
            }
        }
    }
    f
}

/// Lower envelope of parabolas for the one-dimensional pass.
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Envelope { v: vec![0; n], z: vec![0.0; n + 1] }
    }

    fn transform(&mut self, f: &[f64], step: f64, out: &mut [f64]) {
        let n = f.len();
        let pos = |q: usize| q as f64 * step;
        let mut k: isize = -1;
        for q in 0..n {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                if k < 0 {
                    k = 0;
                    self.v[0] = q;
                    self.z[0] = f64::NEG_INFINITY;
                    self.z[1] = f64::INFINITY;
                    break;
                }
                let p = self.v[k as usize];
                let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
                if s <= self.z[k as usize] {
                    k -= 1;
                    continue;
                }
                k += 1;
                self.v[k as usize] = q;
                self.z[k as usize] = s;
                self.z[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
        if k < 0 {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
        let mut j = 0usize;
        for (q, o) in out.iter_mut().enumerate() {
            while self.z[j + 1] < pos(q) {
                j += 1;
            }
            let p = self.v[j];
            let d = q.abs_diff(p) as f64 * step;
            *o = d * d + f[p];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(set: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
        let pts: Vec<_> = set.indexed_iter().filter(|(_, &v)| v).map(|(i, _)| i).collect();
        Array3::from_shape_fn(set.dim(), |(a, b, c)| {
            pts.iter()
                .map(|&(x, y, z)| {
                    let d0 = a.abs_diff(x) as f64 * spacing[0];
                    let d1 = b.abs_diff(y) as f64 * spacing[1];
                    let d2 = c.abs_diff(z) as f64 * spacing[2];
                    d0 * d0 + d1 * d1 + d2 * d2
                })
                .fold(f64::INFINITY, f64::min)
        })
    }

    #[test]
    fn matches_all_pairs_on_small_grids() {
        let mut state = 12345u64;
        for _ in 0..40 {
            let set = Array3::from_shape_fn((3, 5, 6), |_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 33) % 5 == 0
            });
            let spacing = [5.0, 0.75, 1.25];
            let a = squared_edt(&set, spacing);
            let b = brute(&set, spacing);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-9 || (x.is_infinite() && y.is_infinite()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn empty_set_is_infinite() {
        let d = squared_edt(&Array3::from_elem((2, 2, 2), false), [1.0; 3]);
        assert!(d.iter().all(|v| v.is_infinite()));
    }
}
