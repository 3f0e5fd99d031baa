//! Seeded synthetic scenes: a distance-thinned ground plane plus upright
//! elliptic-cylinder point clusters standing in for pedestrians, each with
//! its ground-truth box. Every box is guaranteed at least eight interior
//! points and clusters never overlap in the ground plane.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::geom::{normalize_angle, Box3D};
use crate::pillar::{PillarConfig, Point, PointCloud};

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub pillars: PillarConfig,
    pub peds_min: usize,
    pub peds_max: usize,
    pub ground_points: usize,
    /// Cluster point budget before distance decay (floor of 8 applies).
    pub cluster_points: usize,
    pub ground_z: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            pillars: PillarConfig::toy(),
            peds_min: 2,
            peds_max: 4,
            ground_points: 1200,
            cluster_points: 48,
            ground_z: -1.6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub cloud: PointCloud,
    pub gts: Vec<Box3D>,
}

/// Minimum interior points per ground-truth box.
pub const MIN_CLUSTER_POINTS: usize = 8;

fn distance_keep_prob(x: f64, y: f64) -> f64 {
    let d2 = x * x + y * y;
    1.0 / (1.0 + 0.03 * d2)
}

/// Deterministic scene for `seed`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = &cfg.pillars;
    let margin = 1.2;
    let mut points = Vec::new();
    let mut gts: Vec<Box3D> = Vec::new();

    // Pedestrian clusters first, so their boxes stay clear of each other.
    let n_peds = rng.gen_range(cfg.peds_min..=cfg.peds_max);
    let mut attempts = 0;
    while gts.len() < n_peds && attempts < 1000 {
        attempts += 1;
        let cx = rng.gen_range(p.x_min + margin..p.x_max - margin);
        let cy = rng.gen_range(p.y_min + margin..p.y_max - margin);
        let w: f64 = rng.gen_range(0.55..0.75);
        let l: f64 = rng.gen_range(0.70..0.95);
        let h: f64 = rng.gen_range(1.55..1.85);
        let theta = normalize_angle(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI));
        let sep = 0.5 * (w * w + l * l).sqrt();
        let clear = gts.iter().all(|g| {
            let gsep = 0.5 * (g.w * g.w + g.l * g.l).sqrt();
            let d = ((g.cx - cx).powi(2) + (g.cy - cy).powi(2)).sqrt();
            d > sep + gsep + 0.4
        });
        if !clear {
            continue;
        }
        let boxed = Box3D::new(cx, cy, cfg.ground_z + h / 2.0, w, l, h, theta)?;

        // Sample interior points of the inscribed elliptic cylinder; the
        // budget thins with distance but never below the floor.
        let dist = (cx * cx + cy * cy).sqrt();
        let budget = ((cfg.cluster_points as f64) / (1.0 + 0.08 * dist)).round() as usize;
        let n_points = budget.max(MIN_CLUSTER_POINTS);
        let (sin_t, cos_t) = theta.sin_cos();
        for _ in 0..n_points {
            // Unit-disk rejection sample.
            let (mut u, mut v);
            loop {
                u = rng.gen_range(-1.0..1.0f64);
                v = rng.gen_range(-1.0..1.0f64);
                if u * u + v * v <= 1.0 {
                    break;
                }
            }
            let lu = u * 0.47 * l;
            let lv = v * 0.47 * w;
            let px = cx + cos_t * lu - sin_t * lv;
            let py = cy + sin_t * lu + cos_t * lv;
            let pz = cfg.ground_z + rng.gen_range(0.02..0.98) * h;
            points.push(Point { x: px, y: py, z: pz, r: rng.gen_range(0.1..0.9) });
        }
        gts.push(boxed);
    }

    // Ground plane, thinned with distance to the sensor at the origin.
    let mut placed = 0;
    let mut tries = 0;
    while placed < cfg.ground_points && tries < cfg.ground_points * 50 {
        tries += 1;
        let x = rng.gen_range(p.x_min..p.x_max - 1e-6);
        let y = rng.gen_range(p.y_min..p.y_max - 1e-6);
        if rng.gen::<f64>() > distance_keep_prob(x, y) {
            continue;
        }
        let z = cfg.ground_z + rng.gen_range(-0.04..0.04);
        points.push(Point { x, y, z, r: rng.gen_range(0.05..0.6) });
        placed += 1;
    }

    Ok(SyntheticScene {
        cloud: PointCloud::new(points)?,
        gts,
    })
}

/// `count` scenes derived from one base seed.
pub fn generate_scenes(cfg: &SceneConfig, base_seed: u64, count: usize) -> Result<Vec<SyntheticScene>> {
    (0..count)
        .map(|i| generate_scene(cfg, base_seed.wrapping_add(i as u64).wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(base_seed)))
        .collect()
}

/// Global scene augmentation ranges. Zero-width ranges are exact identity.
#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    /// Rotation about z, uniform in `[-rot_max, rot_max]`.
    pub rot_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Std-dev of the Gaussian translation per axis, in metres.
    pub trans_sigma: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rot_max: std::f64::consts::FRAC_PI_4,
            scale_min: 0.95,
            scale_max: 1.05,
            trans_sigma: 0.2,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            rot_max: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            trans_sigma: 0.0,
            flip_prob: 0.0,
        }
    }
}

/// One global transform applied identically to points and boxes:
/// optional y-flip, rotation about z, uniform scale, Gaussian translation.
pub fn augment_scene(
    cloud: &PointCloud,
    gts: &[Box3D],
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(PointCloud, Vec<Box3D>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = cfg.flip_prob > 0.0 && rng.gen::<f64>() < cfg.flip_prob;
    let phi = if cfg.rot_max > 0.0 {
        rng.gen_range(-cfg.rot_max..cfg.rot_max)
    } else {
        0.0
    };
    let scale = if cfg.scale_max > cfg.scale_min {
        rng.gen_range(cfg.scale_min..cfg.scale_max)
    } else {
        cfg.scale_min
    };
    let (tx, ty, tz) = if cfg.trans_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.trans_sigma).expect("valid sigma");
        (normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng))
    } else {
        (0.0, 0.0, 0.0)
    };
    let (sin_p, cos_p) = phi.sin_cos();

    let xform_point = |x: f64, y: f64, z: f64| {
        let y = if flip { -y } else { y };
        let (rx, ry) = (cos_p * x - sin_p * y, sin_p * x + cos_p * y);
        (rx * scale + tx, ry * scale + ty, z * scale + tz)
    };

    let points = cloud
        .points
        .iter()
        .map(|p| {
            let (x, y, z) = xform_point(p.x, p.y, p.z);
            Point { x, y, z, r: p.r }
        })
        .collect();
    let boxes = gts
        .iter()
        .map(|b| {
            let theta = if flip { -b.theta } else { b.theta };
            let (cx, cy, cz) = xform_point(b.cx, b.cy, b.cz);
            Box3D::new(cx, cy, cz, b.w * scale, b.l * scale, b.h * scale, theta + phi)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((PointCloud::new(points)?, boxes))
}
