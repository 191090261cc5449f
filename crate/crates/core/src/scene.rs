//! Synthetic paired LiDAR/radar scenes.
//!
//! LiDAR returns come from box surfaces plus a ground plane whose density
//! falls off with range. Radar returns are a noisy subsample of the object
//! returns plus uniform clutter, with the total sized as a fraction of the
//! number of LiDAR-occupied pillars.

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Lidar,
    Radar,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Lidar => 0,
            Modality::Radar => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Modality::Lidar),
            1 => Some(Modality::Radar),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Lidar => "lidar",
            Modality::Radar => "radar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
    pub vx: f64,
    pub vy: f64,
}

impl Point {
    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub modality: Modality,
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(modality: Modality) -> Self {
        Self {
            modality,
            points: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// An upright ground-truth box in the BEV plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
    pub class_id: u32,
}

impl GtBox {
    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(u, v)| {
            (self.cx + u * c - v * s, self.cy + u * s + v * c)
        })
    }

    pub fn circumradius(&self) -> f64 {
        self.length.hypot(self.width) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub max_speed: f64,
}

pub fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "car".into(),
            length: 4.6,
            width: 1.9,
            height: 1.7,
            max_speed: 12.0,
        },
        ClassSpec {
            name: "pedestrian".into(),
            length: 0.8,
            width: 0.8,
            height: 1.8,
            max_speed: 1.5,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub range_x: (f64, f64),
    pub range_y: (f64, f64),
    pub n_boxes: usize,
    pub lidar_points_per_box: usize,
    /// LiDAR ground-plane returns per scene.
    pub ground_points: usize,
    /// Ground returns are drawn uniformly over a disk of this radius around the sensor.
    pub ground_max_range: f64,
    pub radar_density_ratio: f64,
    pub radar_position_noise_sigma: f64,
    /// Fraction of the radar return budget spent on uniform clutter.
    pub radar_false_positive_rate: f64,
    /// Cell size used to count occupied LiDAR pillars when sizing the radar budget.
    pub density_cell_size: f64,
    pub classes: Vec<ClassSpec>,
    pub max_placement_retries: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            range_x: (-28.8, 28.8),
            range_y: (-28.8, 28.8),
            n_boxes: 8,
            lidar_points_per_box: 120,
            ground_points: 2500,
            ground_max_range: 20.0,
            radar_density_ratio: 0.1,
            radar_position_noise_sigma: 1.0,
            radar_false_positive_rate: 0.2,
            density_cell_size: 0.45,
            classes: default_classes(),
            max_placement_retries: 200,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (x0, x1) = self.range_x;
        let (y0, y1) = self.range_y;
        if !(x1 > x0) || !(y1 > y0) {
            return Err(Error::Config("detection range must be non-degenerate".into()));
        }
        if !(self.radar_density_ratio > 0.0 && self.radar_density_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "radar_density_ratio must lie in (0, 1], got {}",
                self.radar_density_ratio
            )));
        }
        if !(self.ground_max_range > 0.0) && self.ground_points > 0 {
            return Err(Error::Config("ground_max_range must be positive".into()));
        }
        if !(self.density_cell_size > 0.0) {
            return Err(Error::Config("density_cell_size must be positive".into()));
        }
        if !(self.radar_position_noise_sigma >= 0.0) {
            return Err(Error::Config("radar_position_noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.radar_false_positive_rate) {
            return Err(Error::Config(
                "radar_false_positive_rate must lie in [0, 1]".into(),
            ));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("class table is empty".into()));
        }
        for c in &self.classes {
            if !(c.length > 0.0 && c.width > 0.0 && c.height > 0.0 && c.max_speed >= 0.0) {
                return Err(Error::Config(format!("invalid class spec {:?}", c.name)));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.range_x.0 && x < self.range_x.1 && y >= self.range_y.0 && y < self.range_y.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub lidar: PointCloud,
    pub radar: PointCloud,
    pub boxes: Vec<GtBox>,
}

struct Placed {
    bx: GtBox,
    height: f64,
    vx: f64,
    vy: f64,
}

pub fn gen_scene(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let placed = place_boxes(cfg, &mut rng)?;

    let mut lidar = PointCloud::new(Modality::Lidar);
    let mut object_points: Vec<(usize, Point)> = Vec::new();
    for (k, p) in placed.iter().enumerate() {
        for _ in 0..cfg.lidar_points_per_box {
            let pt = surface_point(p, &mut rng);
            object_points.push((k, pt));
            lidar.points.push(pt);
        }
    }
    append_ground(cfg, &mut rng, &mut lidar.points);

    let budget = cfg.radar_density_ratio * occupied_cells(cfg, &lidar.points) as f64;
    let n_clutter = (cfg.radar_false_positive_rate * budget).round() as usize;
    let mut radar = PointCloud::new(Modality::Radar);
    let n_obj = if object_points.is_empty() {
        0
    } else {
        (budget.round() as usize).saturating_sub(n_clutter)
    };
    let noise = Normal::new(0.0, cfg.radar_position_noise_sigma.max(0.0))
        .map_err(|e| Error::Config(e.to_string()))?;
    let vel_noise = Normal::<f64>::new(0.0, 0.1).expect("fixed sigma");
    let rcs = Normal::<f64>::new(0.0, 0.5).expect("fixed sigma");
    let mut pool: Vec<usize> = (0..object_points.len()).collect();
    for t in 0..n_obj {
        // sample without replacement while the pool lasts
        let src = if t < pool.len() {
            let s = rng.random_range(t..pool.len());
            pool.swap(t, s);
            pool[t]
        } else {
            rng.random_range(0..object_points.len())
        };
        let (k, base) = object_points[src];
        let mut pt = base;
        for _ in 0..16 {
            let (x, y) = (base.x + noise.sample(&mut rng), base.y + noise.sample(&mut rng));
            if cfg.contains(x, y) {
                pt.x = x;
                pt.y = y;
                break;
            }
        }
        pt.z = (base.z + 0.5 * noise.sample(&mut rng)).max(0.0);
        pt.intensity = rcs.sample(&mut rng).exp();
        pt.vx = placed[k].vx + vel_noise.sample(&mut rng);
        pt.vy = placed[k].vy + vel_noise.sample(&mut rng);
        radar.points.push(pt);
    }
    for _ in 0..n_clutter {
        radar.points.push(Point {
            x: rng.random_range(cfg.range_x.0..cfg.range_x.1),
            y: rng.random_range(cfg.range_y.0..cfg.range_y.1),
            z: rng.random_range(0.0..2.0),
            intensity: rcs.sample(&mut rng).exp(),
            vx: vel_noise.sample(&mut rng),
            vy: vel_noise.sample(&mut rng),
        });
    }

    Ok(Scene {
        lidar,
        radar,
        boxes: placed.into_iter().map(|p| p.bx).collect(),
    })
}

fn occupied_cells(cfg: &SceneConfig, points: &[Point]) -> usize {
    let cell = cfg.density_cell_size;
    points
        .iter()
        .map(|p| {
            (
                ((p.x - cfg.range_x.0) / cell).floor() as i64,
                ((p.y - cfg.range_y.0) / cell).floor() as i64,
            )
        })
        .collect::<HashSet<_>>()
        .len()
}

fn place_boxes(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Placed>> {
    let mut placed: Vec<Placed> = Vec::with_capacity(cfg.n_boxes);
    'outer: for _ in 0..cfg.n_boxes {
        for _ in 0..cfg.max_placement_retries.max(1) {
            let class_id = rng.random_range(0..cfg.classes.len());
            let spec = &cfg.classes[class_id];
            let yaw = rng.random_range(-PI..PI);
            let r = spec.length.hypot(spec.width) / 2.0;
            let (x0, x1) = (cfg.range_x.0 + r, cfg.range_x.1 - r);
            let (y0, y1) = (cfg.range_y.0 + r, cfg.range_y.1 - r);
            if !(x1 > x0 && y1 > y0) {
                continue;
            }
            let cx = rng.random_range(x0..x1);
            let cy = rng.random_range(y0..y1);
            let speed = rng.random_range(0.0..=spec.max_speed);
            let bx = GtBox {
                cx,
                cy,
                length: spec.length,
                width: spec.width,
                yaw,
                class_id: class_id as u32,
            };
            // disjoint circumscribed circles imply disjoint boxes
            let clear = placed.iter().all(|p| {
                (p.bx.cx - cx).hypot(p.bx.cy - cy) > p.bx.circumradius() + r
            });
            if clear {
                placed.push(Placed {
                    bx,
                    height: spec.height,
                    vx: speed * yaw.cos(),
                    vy: speed * yaw.sin(),
                });
                continue 'outer;
            }
        }
        return Err(Error::Placement {
            requested: cfg.n_boxes,
            placed: placed.len(),
        });
    }
    Ok(placed)
}

/// A point on the four side faces or the roof, chosen in proportion to face area.
fn surface_point(p: &Placed, rng: &mut ChaCha8Rng) -> Point {
    let (l, w, h) = (p.bx.length, p.bx.width, p.height);
    let side_l = l * h;
    let side_w = w * h;
    let roof = l * w;
    let total = 2.0 * side_l + 2.0 * side_w + roof;
    let pick = rng.random_range(0.0..total);
    let (u, v, z) = if pick < 2.0 * side_l {
        let v = if pick < side_l { w / 2.0 } else { -w / 2.0 };
        (rng.random_range(-l / 2.0..l / 2.0), v, rng.random_range(0.0..h))
    } else if pick < 2.0 * side_l + 2.0 * side_w {
        let u = if pick < 2.0 * side_l + side_w { l / 2.0 } else { -l / 2.0 };
        (u, rng.random_range(-w / 2.0..w / 2.0), rng.random_range(0.0..h))
    } else {
        (
            rng.random_range(-l / 2.0..l / 2.0),
            rng.random_range(-w / 2.0..w / 2.0),
            h,
        )
    };
    // pull face points a hair inside so they stay within the footprint
    let (u, v) = (u * (1.0 - 1e-9), v * (1.0 - 1e-9));
    let (s, c) = p.bx.yaw.sin_cos();
    Point {
        x: p.bx.cx + u * c - v * s,
        y: p.bx.cy + u * s + v * c,
        z,
        intensity: rng.random_range(0.2..1.0),
        vx: 0.0,
        vy: 0.0,
    }
}

/// Ground returns uniform over a disk, clipped to the detection range.
fn append_ground(cfg: &SceneConfig, rng: &mut ChaCha8Rng, out: &mut Vec<Point>) {
    let mut produced = 0;
    while produced < cfg.ground_points {
        let r = cfg.ground_max_range * rng.random_range(0.0..1.0f64).sqrt();
        let theta = rng.random_range(-PI..PI);
        let (x, y) = (r * theta.cos(), r * theta.sin());
        if !cfg.contains(x, y) {
            continue;
        }
        out.push(Point {
            x,
            y,
            z: rng.random_range(0.0..0.05),
            intensity: rng.random_range(0.0..0.3),
            vx: 0.0,
            vy: 0.0,
        });
        produced += 1;
    }
}
