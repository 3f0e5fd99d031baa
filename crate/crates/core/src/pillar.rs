//! Point-cloud quantization into a dense pillar grid.
//!
//! The ground plane is cut into equal cells along x and y (never along z);
//! the points of each occupied cell form one pillar, padded or seeded-
//! subsampled to a fixed point budget, and every retained point is decorated
//! with nine channels: raw `x, y, z, r`, offsets to the pillar's point mean,
//! and planar offsets to the cell center.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Channels produced by [`decorate`].
pub const DECORATION_CHANNELS: usize = 9;

/// One LiDAR return: position in metres plus normalized reflectance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

/// A validated point cloud. Reflectance is clamped into `[0, 1]`; the number
/// of clamped values is kept for reporting.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub reflectance_clamped: usize,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let mut clamped = 0usize;
        let mut out = Vec::with_capacity(points.len());
        for (i, mut p) in points.into_iter().enumerate() {
            if ![p.x, p.y, p.z, p.r].iter().all(|v| v.is_finite()) {
                return Err(Error::invalid("point_cloud", format!("non-finite point at index {i}")));
            }
            if p.r < 0.0 || p.r > 1.0 {
                p.r = p.r.clamp(0.0, 1.0);
                clamped += 1;
            }
            out.push(p);
        }
        Ok(PointCloud {
            points: out,
            reflectance_clamped: clamped,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Grid geometry and capacity limits for pillarization.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Cell extents along x and y; the full z extent forms the pillar height.
    pub pillar_x: f64,
    pub pillar_y: f64,
    pub max_pillars: usize,
    pub max_points_per_pillar: usize,
}

impl PillarConfig {
    /// Pedestrian preset over the front camera field of view:
    /// x [0, 47.36], y [-19.84, 19.84], z [-2.5, 0.5], 0.16 m cells.
    pub fn kitti_ped() -> Self {
        PillarConfig {
            x_min: 0.0,
            x_max: 47.36,
            y_min: -19.84,
            y_max: 19.84,
            z_min: -2.5,
            z_max: 0.5,
            pillar_x: 0.16,
            pillar_y: 0.16,
            max_pillars: 12000,
            max_points_per_pillar: 100,
        }
    }

    /// Small 64x64 grid for CPU-budget training and tests.
    pub fn toy() -> Self {
        PillarConfig {
            x_min: -12.8,
            x_max: 12.8,
            y_min: -12.8,
            y_max: 12.8,
            z_min: -2.0,
            z_max: 2.0,
            pillar_x: 0.4,
            pillar_y: 0.4,
            max_pillars: 4096,
            max_points_per_pillar: 16,
        }
    }

    fn exact_cells(extent: f64, cell: f64) -> Result<usize> {
        let n = extent / cell;
        if (n - n.round()).abs() > 1e-6 || n.round() < 1.0 {
            return Err(Error::Config(format!(
                "range extent {extent} is not an integer multiple of pillar size {cell}"
            )));
        }
        Ok(n.round() as usize)
    }

    /// Grid extents `(nx columns, ny rows)`; errors unless the range is an
    /// exact multiple of the cell size.
    pub fn grid_dims(&self) -> Result<(usize, usize)> {
        if self.x_max <= self.x_min || self.y_max <= self.y_min || self.z_max <= self.z_min {
            return Err(Error::Config("empty detection range".into()));
        }
        if self.pillar_x <= 0.0 || self.pillar_y <= 0.0 {
            return Err(Error::Config("non-positive pillar size".into()));
        }
        let nx = Self::exact_cells(self.x_max - self.x_min, self.pillar_x)?;
        let ny = Self::exact_cells(self.y_max - self.y_min, self.pillar_y)?;
        Ok((nx, ny))
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x_min + (ix as f64 + 0.5) * self.pillar_x,
            self.y_min + (iy as f64 + 0.5) * self.pillar_y,
        )
    }
}

/// Dense pillar grid: features `[occupied, N, 9]` with zero padding beyond
/// each pillar's `counts` entry, plus the grid cell of every pillar.
#[derive(Debug, Clone)]
pub struct PillarTensor<S> {
    pub features: Tensor<S>,
    /// `(ix, iy)` per occupied pillar; unique.
    pub coords: Vec<(usize, usize)>,
    /// Retained points per pillar, each ≥ 1 and ≤ N.
    pub counts: Vec<u32>,
    pub grid_nx: usize,
    pub grid_ny: usize,
    /// Points discarded because a cell overflowed the per-pillar budget.
    pub points_subsampled: usize,
    /// Occupied cells discarded because the grid overflowed `max_pillars`.
    pub pillars_subsampled: usize,
    /// Points exactly on the maximum x/y edge (cells are half-open).
    pub edge_dropped: usize,
}

impl<S> PillarTensor<S> {
    pub fn occupied(&self) -> usize {
        self.coords.len()
    }
}

/// Retain only points inside the closed range box, preserving order.
pub fn crop_to_range(cloud: &PointCloud, cfg: &PillarConfig) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .filter(|p| {
            p.x >= cfg.x_min
                && p.x <= cfg.x_max
                && p.y >= cfg.y_min
                && p.y <= cfg.y_max
                && p.z >= cfg.z_min
                && p.z <= cfg.z_max
        })
        .copied()
        .collect();
    PointCloud {
        points,
        reflectance_clamped: cloud.reflectance_clamped,
    }
}

/// Nine-channel decoration of one pillar's points.
///
/// Channel order: `x, y, z, r, x - x_mean, y - y_mean, z - z_mean,
/// x - x_center, y - y_center` where the mean is over the pillar's retained
/// points and the center is the cell center.
pub fn decorate(points: &[Point], cell_center: (f64, f64)) -> Vec<[f64; DECORATION_CHANNELS]> {
    assert!(!points.is_empty(), "decorate requires a non-empty pillar");
    let n = points.len() as f64;
    let (mut mx, mut my, mut mz) = (0.0, 0.0, 0.0);
    for p in points {
        mx += p.x;
        my += p.y;
        mz += p.z;
    }
    mx /= n;
    my /= n;
    mz /= n;
    points
        .iter()
        .map(|p| {
            [
                p.x,
                p.y,
                p.z,
                p.r,
                p.x - mx,
                p.y - my,
                p.z - mz,
                p.x - cell_center.0,
                p.y - cell_center.1,
            ]
        })
        .collect()
}

/// Quantize a cropped cloud into the dense pillar grid.
///
/// Cells are half-open: a point exactly on the maximum x or y edge belongs to
/// no cell and is dropped (counted in `edge_dropped`). Overflow beyond the
/// per-pillar and grid budgets is resolved by seeded random subsampling.
pub fn pillarize<S: Scalar>(
    cloud: &PointCloud,
    cfg: &PillarConfig,
    seed: u64,
) -> Result<PillarTensor<S>> {
    let (nx, ny) = cfg.grid_dims()?;
    let n_max = cfg.max_points_per_pillar;
    if n_max == 0 || cfg.max_pillars == 0 {
        return Err(Error::Config("zero pillar capacity".into()));
    }

    // Bucket point indices by cell, ordered by (iy, ix) for determinism.
    let mut buckets: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut edge_dropped = 0usize;
    for (i, p) in cloud.points.iter().enumerate() {
        let ix = ((p.x - cfg.x_min) / cfg.pillar_x).floor() as isize;
        let iy = ((p.y - cfg.y_min) / cfg.pillar_y).floor() as isize;
        if ix < 0 || iy < 0 {
            continue; // below range; callers crop first
        }
        let (ix, iy) = (ix as usize, iy as usize);
        if ix >= nx || iy >= ny {
            if p.x <= cfg.x_max && p.y <= cfg.y_max {
                edge_dropped += 1;
            }
            continue;
        }
        buckets.entry((iy, ix)).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Grid overflow: seeded subsample of the occupied cells.
    let mut cells: Vec<(usize, usize)> = buckets.keys().copied().collect();
    let mut pillars_subsampled = 0usize;
    if cells.len() > cfg.max_pillars {
        pillars_subsampled = cells.len() - cfg.max_pillars;
        let mut chosen = rand::seq::index::sample(&mut rng, cells.len(), cfg.max_pillars).into_vec();
        chosen.sort_unstable();
        cells = chosen.into_iter().map(|i| cells[i]).collect();
    }

    let occupied = cells.len().max(1);
    let mut data = vec![S::zero(); occupied * n_max * DECORATION_CHANNELS];
    let mut coords = Vec::with_capacity(cells.len());
    let mut counts = Vec::with_capacity(cells.len());
    let mut points_subsampled = 0usize;

    for (pi, &(iy, ix)) in cells.iter().enumerate() {
        let idxs = &buckets[&(iy, ix)];
        let chosen: Vec<usize> = if idxs.len() > n_max {
            points_subsampled += idxs.len() - n_max;
            let mut sel = rand::seq::index::sample(&mut rng, idxs.len(), n_max).into_vec();
            sel.sort_unstable();
            sel.into_iter().map(|k| idxs[k]).collect()
        } else {
            idxs.clone()
        };
        let pts: Vec<Point> = chosen.iter().map(|&i| cloud.points[i]).collect();
        let rows = decorate(&pts, cfg.cell_center(ix, iy));
        for (ni, row) in rows.iter().enumerate() {
            let base = (pi * n_max + ni) * DECORATION_CHANNELS;
            for (ci, &v) in row.iter().enumerate() {
                data[base + ci] = S::from_f64(v);
            }
        }
        coords.push((ix, iy));
        counts.push(pts.len() as u32);
    }

    // An empty cloud still yields a well-formed (single all-zero, count 0)
    // tensor so downstream shapes hold.
    if cells.is_empty() {
        coords.push((0, 0));
        counts.push(0);
    }

    let features = Tensor::new(vec![occupied, n_max, DECORATION_CHANNELS], data)?;
    Ok(PillarTensor {
        features,
        coords,
        counts,
        grid_nx: nx,
        grid_ny: ny,
        points_subsampled,
        pillars_subsampled,
        edge_dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(x: f64, y: f64, z: f64, r: f64) -> Point {
        Point { x, y, z, r }
    }

    #[test]
    fn kitti_grid_dims() {
        // (47.36 - 0) / 0.16 and (19.84 - -19.84) / 0.16.
        let cfg = PillarConfig::kitti_ped();
        assert_eq!(cfg.grid_dims().unwrap(), (296, 248));
    }

    #[test]
    fn inexact_grid_rejected() {
        let mut cfg = PillarConfig::kitti_ped();
        cfg.pillar_x = 0.17;
        assert!(cfg.grid_dims().is_err());
    }

    #[test]
    fn crop_examples() {
        let cfg = PillarConfig::kitti_ped();
        let cloud = PointCloud::new(vec![
            pt(50.0, 0.0, 0.0, 0.5), // beyond x_max -> removed
            pt(0.0, 0.0, 0.0, 0.0),  // exactly on the lower boundary -> kept
            pt(10.0, 0.0, -1.0, 0.2),
        ])
        .unwrap();
        let cropped = crop_to_range(&cloud, &cfg);
        assert_eq!(cropped.len(), 2);
        assert_eq!(cropped.points[0], pt(0.0, 0.0, 0.0, 0.0));

        let empty = crop_to_range(&PointCloud::default(), &cfg);
        assert!(empty.is_empty());
    }

    #[test]
    fn reflectance_clamped_with_counter() {
        let cloud = PointCloud::new(vec![pt(0.0, 0.0, 0.0, 1.5), pt(0.0, 0.0, 0.0, 0.5)]).unwrap();
        assert_eq!(cloud.reflectance_clamped, 1);
        assert_eq!(cloud.points[0].r, 1.0);
    }

    #[test]
    fn kitti_cell_arithmetic() {
        // floor(0.40 / 0.16) = 2, y on the lower edge maps to row 0.
        let cfg = PillarConfig::kitti_ped();
        let cloud = PointCloud::new(vec![pt(0.40, -19.84, -1.0, 0.1)]).unwrap();
        let pt_tensor: PillarTensor<f64> = pillarize(&cloud, &cfg, 0).unwrap();
        assert_eq!(pt_tensor.coords, vec![(2, 0)]);
    }

    #[test]
    fn max_edge_points_dropped() {
        let cfg = PillarConfig::toy();
        let cloud = PointCloud::new(vec![pt(12.8, 0.0, 0.0, 0.1), pt(0.0, 0.0, 0.0, 0.1)]).unwrap();
        let t: PillarTensor<f64> = pillarize(&cloud, &cfg, 0).unwrap();
        assert_eq!(t.edge_dropped, 1);
        assert_eq!(t.occupied(), 1);
    }

    #[test]
    fn overflow_subsamples_to_n() {
        let mut cfg = PillarConfig::toy();
        cfg.max_points_per_pillar = 4;
        let pts: Vec<Point> = (0..9).map(|i| pt(0.05, 0.05, -1.0 + 0.01 * i as f64, 0.1)).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let t: PillarTensor<f64> = pillarize(&cloud, &cfg, 7).unwrap();
        assert_eq!(t.counts, vec![4]);
        assert_eq!(t.points_subsampled, 5);
        // Exactly 4 populated rows; the rest are zero padding.
        let f = &t.features;
        for n in 4..cfg.max_points_per_pillar {
            for c in 0..DECORATION_CHANNELS {
                assert_eq!(f.at(&[0, n, c]), 0.0);
            }
        }
    }

    #[test]
    fn two_points_one_pillar() {
        let cfg = PillarConfig::toy();
        let cloud = PointCloud::new(vec![pt(0.1, 0.1, 0.0, 0.1), pt(0.15, 0.12, 0.3, 0.2)]).unwrap();
        let t: PillarTensor<f64> = pillarize(&cloud, &cfg, 0).unwrap();
        assert_eq!(t.occupied(), 1);
        assert_eq!(t.counts, vec![2]);
    }

    #[test]
    fn decorate_single_point_at_center() {
        let rows = decorate(&[pt(1.0, 2.0, 0.5, 0.3)], (1.0, 2.0));
        assert_eq!(rows[0], [1.0, 2.0, 0.5, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn decorate_symmetric_offsets_negate() {
        let rows = decorate(&[pt(1.0, 1.0, 1.0, 0.1), pt(3.0, 5.0, 2.0, 0.1)], (2.0, 3.0));
        for c in 4..7 {
            assert!((rows[0][c] + rows[1][c]).abs() < 1e-12);
        }
    }

    #[test]
    fn decorate_offsets_mean_zero() {
        // Independent oracle: recompute the mean of the offset-to-mean
        // channels over a random pillar; it must vanish.
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let pts: Vec<Point> = (0..17)
            .map(|_| pt(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..0.0), rng.gen()))
            .collect();
        let rows = decorate(&pts, (0.2, 0.2));
        for c in 4..7 {
            let mean: f64 = rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = PillarConfig::toy();
        let pts: Vec<Point> = (0..500)
            .map(|_| {
                pt(
                    rng.gen_range(-12.0..12.0),
                    rng.gen_range(-12.0..12.0),
                    rng.gen_range(-1.9..1.9),
                    rng.gen(),
                )
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let a: PillarTensor<f32> = pillarize(&cloud, &cfg, 9).unwrap();
        let b: PillarTensor<f32> = pillarize(&cloud, &cfg, 9).unwrap();
        assert_eq!(a.features.data(), b.features.data());
        assert_eq!(a.coords, b.coords);
    }

    proptest! {
        // Pillarization partitions the retained points: counts sum to the
        // number of in-grid points when no budget overflows, and every
        // coordinate is unique and in range.
        #[test]
        fn partition_property(seed in 0u64..200) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = PillarConfig::toy();
            let pts: Vec<Point> = (0..rng.gen_range(0..300usize))
                .map(|_| pt(
                    rng.gen_range(-12.8..12.79),
                    rng.gen_range(-12.8..12.79),
                    rng.gen_range(-2.0..2.0),
                    rng.gen(),
                ))
                .collect();
            let m = pts.len();
            let cloud = PointCloud::new(pts).unwrap();
            let t: PillarTensor<f64> = pillarize(&cloud, &cfg, seed).unwrap();
            let total: u32 = t.counts.iter().sum();
            prop_assert!(total as usize <= m);
            if t.points_subsampled == 0 && t.pillars_subsampled == 0 {
                prop_assert_eq!(total as usize, m - t.edge_dropped);
            }
            let mut seen = std::collections::HashSet::new();
            for &(ix, iy) in &t.coords {
                prop_assert!(ix < t.grid_nx && iy < t.grid_ny);
                prop_assert!(seen.insert((ix, iy)));
            }
        }
    }
}
