use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;
use crate::scene::{dist, FloorPlan};

/// Geometric frequency ladder from 1 to 128 over `count` terms.
pub fn pe_frequencies(count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![1.0];
    }
    let last = (count - 1) as f64;
    (0..count)
        .map(|j| if j + 1 == count { 128.0 } else { 128f64.powf(j as f64 / last) })
        .collect()
}

/// Sinusoidal encoding: the sine block by ascending frequency, then the
/// cosine block.
pub fn positional_encode(x: f64, freqs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * freqs.len());
    out.extend(freqs.iter().map(|f| (f * x).sin()));
    out.extend(freqs.iter().map(|f| (f * x).cos()));
    out
}

/// `count` points spaced evenly by arc length along the boundary, starting
/// at a seeded offset, as rows `(x, y, nx, ny)` with outward unit normals.
pub fn sample_floor_points(floor: &FloorPlan, count: usize, seed: u64) -> Result<Tensor> {
    let edges: Vec<_> = floor.edges().filter(|(a, b)| dist(*a, *b) > 0.0).collect();
    let perimeter: f64 = edges.iter().map(|(a, b)| dist(*a, *b)).sum();
    if count == 0 || !(perimeter > 0.0) || edges.len() < 3 {
        return Err(Error::DegeneratePolygon(format!(
            "cannot sample {count} points from a boundary of length {perimeter}"
        )));
    }
    let offset: f64 = rng::seeded(seed).random_range(0.0..1.0);
    let step = perimeter / count as f64;
    let mut rows = Vec::with_capacity(count * 4);
    let mut edge = 0;
    let mut edge_start = 0.0;
    for i in 0..count {
        let s = (offset + i as f64) * step;
        while edge + 1 < edges.len() && s >= edge_start + dist(edges[edge].0, edges[edge].1) {
            edge_start += dist(edges[edge].0, edges[edge].1);
            edge += 1;
        }
        let (a, b) = edges[edge];
        let len = dist(a, b);
        let u = ((s - edge_start) / len).clamp(0.0, 1.0);
        let d = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
        rows.extend_from_slice(&[a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]), d[1], -d[0]]);
    }
    Tensor::from_vec(count, 4, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_of_zero() {
        let pe = positional_encode(0.0, &pe_frequencies(32));
        assert_eq!(pe.len(), 64);
        assert!(pe[..32].iter().all(|&v| v == 0.0));
        assert!(pe[32..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn frequency_ladder_endpoints() {
        let f = pe_frequencies(32);
        assert_eq!(f[0], 1.0);
        assert_eq!(f[31], 128.0);
        for w in f.windows(2) {
            assert!((w[1] / w[0] - 128f64.powf(1.0 / 31.0)).abs() < 1e-12);
        }
        assert_eq!(pe_frequencies(1), vec![1.0]);
    }

    #[test]
    fn encoding_is_bounded() {
        let f = pe_frequencies(32);
        for x in [-1.7, -0.3, 0.01, 0.9, 12.5] {
            assert!(positional_encode(x, &f).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn square_floor_normals_are_axis_aligned_and_outward() {
        let floor = FloorPlan::unit_square();
        let pts = sample_floor_points(&floor, 250, 3).unwrap();
        assert_eq!(pts.shape(), (250, 4));
        for i in 0..250 {
            let r = pts.row(i);
            let n = [r[2], r[3]];
            assert!((n[0].abs() == 1.0 && n[1] == 0.0) || (n[1].abs() == 1.0 && n[0] == 0.0), "{n:?}");
            // The point lies on the side the normal points to.
            let k = if n[0] != 0.0 { 0 } else { 1 };
            assert!((r[k] - n[k]).abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn points_are_evenly_spaced_by_arc_length() {
        let floor = FloorPlan::new(vec![[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [0.0, 1.0]]).unwrap();
        let pts = sample_floor_points(&floor, 60, 9).unwrap();
        // Along the bottom edge consecutive points are one step apart.
        let bottom: Vec<f64> = (0..60).map(|i| pts.row(i)).filter(|r| r[3] == -1.0).map(|r| r[0]).collect();
        assert_eq!(bottom.len(), 20);
        for w in bottom.windows(2) {
            assert!((w[1] - w[0] - 0.1).abs() < 1e-12);
        }
    }
}
