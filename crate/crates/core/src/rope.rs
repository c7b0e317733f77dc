//! Two-axis rotary position encoding.
//!
//! Each head's dimensions are taken as consecutive pairs. The first half of
//! the pairs rotates with the row coordinate, the second half with the column
//! coordinate, each axis using the usual geometric frequency ladder.

use alloc::rc::Rc;
use alloc::vec::Vec;

use crate::layout::Coord;
use crate::math;

/// Frequency of pair `p` within one axis that owns `pairs_per_axis` pairs.
pub fn axis_frequency(p: usize, pairs_per_axis: usize, theta: f64) -> f64 {
    math::powf(theta, -(p as f64) / pairs_per_axis as f64)
}

/// Rotation angle for every pair of a `head_dim`-wide head at `coord`.
pub fn angles(coord: Coord, head_dim: usize, theta: f64) -> Vec<f64> {
    debug_assert!(head_dim.is_multiple_of(4), "head_dim must be divisible by 4");
    let per_axis = head_dim / 4;
    (0..head_dim / 2)
        .map(|p| {
            let (pos, k) = if p < per_axis {
                (coord.0, p)
            } else {
                (coord.1, p - per_axis)
            };
            pos as f64 * axis_frequency(k, per_axis, theta)
        })
        .collect()
}

/// Cos/sin tables for a run of tokens, laid out row by row as the tape's
/// pair-rotation op expects.
#[derive(Debug, Clone)]
pub struct RopeTable {
    pub cos: Rc<Vec<f64>>,
    pub sin: Rc<Vec<f64>>,
    pub head_dim: usize,
}

impl RopeTable {
    pub fn new(coords: &[Coord], head_dim: usize, theta: f64) -> Self {
        let mut cos = Vec::with_capacity(coords.len() * head_dim / 2);
        let mut sin = Vec::with_capacity(coords.len() * head_dim / 2);
        for &c in coords {
            for a in angles(c, head_dim, theta) {
                let (s, co) = math::sin_cos(a);
                cos.push(co);
                sin.push(s);
            }
        }
        Self {
            cos: Rc::new(cos),
            sin: Rc::new(sin),
            head_dim,
        }
    }
}

/// Rotates one head vector in place.
pub fn rope_2d(v: &mut [f64], coord: Coord, theta: f64) {
    let head_dim = v.len();
    for (p, a) in angles(coord, head_dim, theta).into_iter().enumerate() {
        let (s, c) = math::sin_cos(a);
        let (x, y) = (v[2 * p], v[2 * p + 1]);
        v[2 * p] = x * c - y * s;
        v[2 * p + 1] = x * s + y * c;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normals, stream, Role};
    use alloc::vec;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn origin_is_identity() {
        let mut v = vec![0.3, -1.0, 2.0, 0.5, 1.5, -0.2, 0.9, 0.1];
        let before = v.clone();
        rope_2d(&mut v, (0, 0), 10_000.0);
        assert_eq!(v, before);
    }

    #[test]
    fn single_pair_rotation() {
        let mut v = vec![1.0, 0.0, 0.0, 0.0];
        rope_2d(&mut v, (1, 0), 10_000.0);
        // pair 0 uses frequency theta^0 = 1
        let f = axis_frequency(0, 1, 10_000.0);
        assert_eq!(f, 1.0);
        assert!((v[0] - f.cos()).abs() < 1e-15 && (v[1] - f.sin()).abs() < 1e-15);
        let mut w = vec![0.0, 0.0, 1.0, 0.0];
        rope_2d(&mut w, (5, 1), 10_000.0);
        assert!((w[2] - 1f64.cos()).abs() < 1e-15 && (w[3] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn relative_position_property() {
        let mut rng = stream(1, 0, Role::Probe, 0);
        for trial in 0..50i64 {
            let q = normals(&mut rng, 16);
            let k = normals(&mut rng, 16);
            let (a, b, c, d) = (trial % 7, 3 - trial % 5, trial % 4, trial % 9);
            let (s, u) = (trial - 20, 11 - trial);
            let score = |qc: Coord, kc: Coord| {
                let (mut qq, mut kk) = (q.clone(), k.clone());
                rope_2d(&mut qq, qc, 10_000.0);
                rope_2d(&mut kk, kc, 10_000.0);
                dot(&qq, &kk)
            };
            let base = score((a, b), (c, d));
            let shifted = score((a + s, b + u), (c + s, d + u));
            assert!((base - shifted).abs() < 1e-6, "{base} vs {shifted}");
        }
    }
}
