//! Classical single-frame detectors used as reference points for the
//! annotator: a depth median filter and a point-cloud statistical filter.
//! Both emit binary smeared scores (1 = flagged).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{backproject_camera, PointCloud};
use crate::spatial::NeighborIndex;
use crate::types::DepthFrame;

/// Residual threshold of the median detector, mm.
pub const DEFAULT_MEDIAN_TAU_MM: f64 = 20.0;
pub const DEFAULT_MEDIAN_WINDOW: usize = 5;
pub const DEFAULT_STAT_NEIGHBORS: usize = 20;
pub const DEFAULT_STAT_RATIO: f64 = 2.0;

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Flags pixels whose depth departs from the `k × k` median of the
/// non-zero depths around them by more than `tau_mm`. Zero-depth pixels
/// score 0.
pub fn median_filter(frame: &DepthFrame, k: usize, tau_mm: f64) -> Result<Vec<f64>> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidConfig(format!("median window must be odd, got {k}")));
    }
    if !(tau_mm >= 0.0) {
        return Err(Error::InvalidConfig(format!("median threshold must be >= 0, got {tau_mm}")));
    }
    let (w, h) = (frame.width(), frame.height());
    let r = k / 2;
    let scores = (0..w * h)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(k * k),
            |window, i| {
                let (u, v) = (i % w, i / w);
                let d = frame.depth[i] as f64;
                if d <= 0.0 {
                    return 0.0;
                }
                window.clear();
                for y in v.saturating_sub(r)..=(v + r).min(h - 1) {
                    for x in u.saturating_sub(r)..=(u + r).min(w - 1) {
                        let n = frame.depth[y * w + x] as f64;
                        if n > 0.0 {
                            window.push(n);
                        }
                    }
                }
                if (d - median(window)).abs() > tau_mm {
                    1.0
                } else {
                    0.0
                }
            },
        )
        .collect();
    Ok(scores)
}

/// Mean distance from every point to its `n_neighbors` nearest other
/// points.
pub fn mean_neighbor_distances(cloud: &PointCloud, n_neighbors: usize) -> Result<Vec<f64>> {
    if n_neighbors == 0 {
        return Err(Error::InvalidConfig("n_neighbors must be >= 1".into()));
    }
    if cloud.len() < n_neighbors + 1 {
        return Err(Error::InvalidInput(format!(
            "statistical filter needs more than {n_neighbors} points, cloud has {}",
            cloud.len()
        )));
    }
    let index = NeighborIndex::new(&cloud.points);
    Ok(cloud
        .points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let found = index.k_nearest(p, n_neighbors + 1);
            // drop the query itself, or one duplicate standing in for it
            let skip = found.iter().position(|(j, _)| *j == i).unwrap_or(n_neighbors);
            let sum: f64 = found
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != skip)
                .map(|(_, (_, d2))| d2.sqrt())
                .sum();
            sum / n_neighbors as f64
        })
        .collect())
}

/// Flags points whose mean neighbour distance exceeds the cloud mean by more
/// than `std_ratio` standard deviations.
pub fn statistical_outlier_filter(cloud: &PointCloud, n_neighbors: usize, std_ratio: f64) -> Result<Vec<bool>> {
    if !std_ratio.is_finite() {
        return Err(Error::InvalidConfig(format!("std_ratio must be finite, got {std_ratio}")));
    }
    let dist = mean_neighbor_distances(cloud, n_neighbors)?;
    let n = dist.len() as f64;
    let mean = dist.iter().sum::<f64>() / n;
    let var = dist.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    // guard against rounding noise when every point sees the same spacing
    let limit = mean + std_ratio * var.sqrt() + 1e-9 * mean;
    Ok(dist.into_iter().map(|d| d > limit).collect())
}

/// Statistical filter on one frame's camera-space cloud, scattered back to
/// a score raster. Frames with too few returns score 0 everywhere.
pub fn statistical_scores(frame: &DepthFrame, n_neighbors: usize, std_ratio: f64) -> Result<Vec<f64>> {
    let cloud = backproject_camera(frame);
    let mut scores = vec![0.0; frame.width() * frame.height()];
    if cloud.len() < n_neighbors + 1 {
        return Ok(scores);
    }
    let flags = statistical_outlier_filter(&cloud, n_neighbors, std_ratio)?;
    for (px, flagged) in cloud.source_pixel.iter().zip(flags) {
        if flagged {
            scores[px.v as usize * frame.width() + px.u as usize] = 1.0;
        }
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::SourcePixel;
    use crate::types::{CameraModel, RigidPose};
    use nalgebra::{Point3, Vector3};

    fn frame(depth: Vec<f32>) -> DepthFrame {
        let cam = CameraModel::new(20.0, 20.0, 5.0, 5.0, 10, 10).unwrap();
        DepthFrame::new(0, depth, cam, None).unwrap()
    }

    fn grid(n: u32) -> PointCloud {
        let mut cloud = PointCloud::default();
        for a in 0..n {
            for b in 0..n {
                cloud.points.push(Point3::new(a as f64 * 10.0, b as f64 * 10.0, 1000.0));
                cloud.source_pixel.push(SourcePixel { frame_id: 0, u: a, v: b });
            }
        }
        cloud
    }

    #[test]
    fn median_ignores_constant_raster() {
        let s = median_filter(&frame(vec![1234.0; 100]), 5, DEFAULT_MEDIAN_TAU_MM).unwrap();
        assert!(s.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn median_flags_single_outlier() {
        let mut d = vec![1000.0; 100];
        d[44] = 1500.0;
        let s = median_filter(&frame(d), 5, DEFAULT_MEDIAN_TAU_MM).unwrap();
        assert_eq!(s[44], 1.0);
        assert_eq!(s.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn median_skips_holes() {
        let mut d = vec![1000.0; 100];
        for i in 0..50 {
            d[i] = 0.0;
        }
        let s = median_filter(&frame(d), 5, DEFAULT_MEDIAN_TAU_MM).unwrap();
        assert!(s.iter().all(|x| *x == 0.0));
        assert!(median_filter(&frame(vec![1.0; 100]), 4, 20.0).is_err());
    }

    #[test]
    fn uniform_ring_has_no_statistical_outliers() {
        let mut cloud = PointCloud::default();
        for i in 0..360u32 {
            let a = (i as f64).to_radians();
            cloud.points.push(Point3::new(1000.0 * a.cos(), 1000.0 * a.sin(), 2000.0));
            cloud.source_pixel.push(SourcePixel { frame_id: 0, u: i, v: 0 });
        }
        let flags = statistical_outlier_filter(&cloud, 6, 0.5).unwrap();
        assert!(flags.iter().all(|f| !f));
    }

    #[test]
    fn far_point_is_flagged_and_rigid_invariant() {
        let mut cloud = grid(20);
        cloud.points.push(Point3::new(100.0, 100.0, 1500.0));
        cloud.source_pixel.push(SourcePixel { frame_id: 0, u: 99, v: 99 });
        let flags = statistical_outlier_filter(&cloud, 8, 1.0).unwrap();
        assert!(flags[400]);
        assert_eq!(flags.iter().filter(|f| **f).count(), 1);
        let moved = cloud.transformed(&RigidPose::from_scaled_axis(
            Vector3::new(0.3, -0.2, 0.9),
            Vector3::new(500.0, -40.0, 7.0),
        ));
        assert_eq!(statistical_outlier_filter(&moved, 8, 1.0).unwrap(), flags);
    }

    #[test]
    fn tiny_cloud_is_rejected() {
        let err = statistical_outlier_filter(&grid(2), 4, 1.0).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }
}
