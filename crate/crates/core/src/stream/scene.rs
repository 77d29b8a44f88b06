use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::domain::{
    ClassId, Frame, LabelField, Point, Pose, CANONICAL_CLASSES, MANMADE, PEDESTRIAN, ROAD,
    SIDEWALK, TERRAIN, VEGETATION, VEHICLE,
};
use crate::error::{Error, Result};

use super::config::{validate_configs, SceneConfig, ShiftConfig};

/// Centerline of the ego path: a circular arc (or a line when the yaw step is
/// zero), parameterized by arc length `s`. `d` is the signed lateral offset,
/// positive to the left.
#[derive(Clone, Copy, Debug)]
struct Path {
    curvature: f64,
}

impl Path {
    fn heading(&self, s: f64) -> f64 {
        self.curvature * s
    }

    fn center(&self, s: f64) -> (f64, f64) {
        let k = self.curvature;
        if k.abs() < 1e-12 {
            (s, 0.0)
        } else {
            ((k * s).sin() / k, (1.0 - (k * s).cos()) / k)
        }
    }

    fn to_world(&self, s: f64, d: f64, z: f64) -> Point {
        let (cx, cy) = self.center(s);
        let h = self.heading(s);
        [cx - d * h.sin(), cy + d * h.cos(), z]
    }
}

#[derive(Clone, Copy, Debug)]
struct BoxObject {
    s: f64,
    d: f64,
    length: f64,
    width: f64,
    height: f64,
}

#[derive(Clone, Copy, Debug)]
struct Cylinder {
    s: f64,
    d: f64,
    radius: f64,
    height: f64,
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    s: f64,
    d: f64,
    z: f64,
    sigma: f64,
}

/// Object placement drawn from the scene seed alone.
#[derive(Clone, Debug)]
struct Layout {
    vehicles: Vec<BoxObject>,
    pedestrians: Vec<Cylinder>,
    vegetation: Vec<Blob>,
    terrain_phase: (f64, f64),
}

struct Geometry<'a> {
    scene: &'a SceneConfig,
    path: Path,
    s_min: f64,
    s_max: f64,
}

impl Geometry<'_> {
    fn new(scene: &SceneConfig) -> Geometry<'_> {
        let margin = scene.sensor_range + 2.0;
        Geometry {
            scene,
            path: Path {
                curvature: scene.yaw_step / scene.forward_step,
            },
            s_min: -margin,
            s_max: (scene.frames - 1) as f64 * scene.forward_step + margin,
        }
    }

    fn sidewalk_outer(&self) -> f64 {
        self.scene.road_half_width + self.scene.sidewalk_width
    }

    fn wall_offset(&self) -> f64 {
        self.sidewalk_outer() + self.scene.terrain_width
    }

    fn terrain_height(&self, phase: (f64, f64), s: f64, d: f64) -> f64 {
        let (p1, p2) = phase;
        self.scene.sidewalk_height
            + self.scene.terrain_amplitude * (0.35 * s + p1).sin() * (0.6 * d.abs() + p2).cos()
    }

    /// Evenly spaced slots with a random offset inside each slot.
    fn slots(&self, spacing: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let count = ((self.s_max - self.s_min) / spacing).floor() as usize;
        (0..count)
            .map(|k| self.s_min + spacing * (k as f64 + rng.gen_range(0.2..0.8)))
            .collect()
    }

    fn layout(&self) -> Layout {
        let sc = self.scene;
        let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
        let terrain_phase = (
            rng.gen_range(0.0..std::f64::consts::TAU),
            rng.gen_range(0.0..std::f64::consts::TAU),
        );
        let mut vehicles = Vec::new();
        let mut pedestrians = Vec::new();
        let mut vegetation = Vec::new();
        for side in [-1.0, 1.0] {
            for s in self.slots(sc.vehicle_spacing, &mut rng) {
                let width = rng.gen_range(1.7..2.0);
                let curb_gap = rng.gen_range(0.2..0.5);
                vehicles.push(BoxObject {
                    s,
                    d: side * (sc.road_half_width - curb_gap - width / 2.0),
                    length: rng.gen_range(3.8..4.8),
                    width,
                    height: rng.gen_range(1.4..1.7),
                });
            }
            for s in self.slots(sc.pedestrian_spacing, &mut rng) {
                let inset = rng.gen_range(0.35..(sc.sidewalk_width - 0.35).max(0.36));
                pedestrians.push(Cylinder {
                    s,
                    d: side * (sc.road_half_width + inset),
                    radius: rng.gen_range(0.25..0.35),
                    height: rng.gen_range(1.6..1.9),
                });
            }
            for s in self.slots(sc.vegetation_spacing, &mut rng) {
                let inset = rng.gen_range(1.5..(sc.terrain_width - 1.5).max(1.51));
                let d = side * (self.sidewalk_outer() + inset);
                let lift = rng.gen_range(1.2..2.5);
                vegetation.push(Blob {
                    s,
                    d,
                    z: self.terrain_height(terrain_phase, s, d) + lift,
                    sigma: rng.gen_range(0.5..0.9),
                });
            }
        }
        Layout {
            vehicles,
            pedestrians,
            vegetation,
            terrain_phase,
        }
    }

    fn count(area: f64, density: f64, rng: &mut ChaCha8Rng) -> usize {
        // unbiased rounding keeps small objects from vanishing deterministically
        let expected = area * density;
        let base = expected.floor();
        base as usize + usize::from(rng.gen::<f64>() < expected - base)
    }

    /// Every surface sample of the world, in world coordinates.
    fn sample_world(&self, layout: &Layout, shift: &ShiftConfig) -> Vec<(Point, ClassId)> {
        let sc = self.scene;
        let mut rng = ChaCha8Rng::seed_from_u64(shift.seed);
        let surface = sc.surface_density * shift.density_factor;
        let object = sc.object_density * shift.density_factor;
        let len = self.s_max - self.s_min;
        let mut out = Vec::new();
        let path = self.path;

        let strip = |d0: f64, d1: f64, class: ClassId, out: &mut Vec<_>, rng: &mut ChaCha8Rng| {
            let n = Self::count(len * (d1 - d0), surface, rng);
            for _ in 0..n {
                let s = rng.gen_range(self.s_min..self.s_max);
                let d = rng.gen_range(d0..d1);
                let z = match class {
                    ROAD => 0.0,
                    SIDEWALK => sc.sidewalk_height,
                    _ => self.terrain_height(layout.terrain_phase, s, d),
                };
                out.push((path.to_world(s, d, z), class));
            }
        };
        let (r, w, t) = (
            sc.road_half_width,
            self.sidewalk_outer(),
            self.wall_offset(),
        );
        strip(-r, r, ROAD, &mut out, &mut rng);
        for side in [-1.0, 1.0] {
            let (a, b) = if side > 0.0 { (r, w) } else { (-w, -r) };
            strip(a, b, SIDEWALK, &mut out, &mut rng);
            let (a, b) = if side > 0.0 { (w, t) } else { (-t, -w) };
            strip(a, b, TERRAIN, &mut out, &mut rng);
            let n = Self::count(len * sc.wall_height, surface, &mut rng);
            for _ in 0..n {
                let s = rng.gen_range(self.s_min..self.s_max);
                let z = rng.gen_range(0.0..sc.wall_height);
                out.push((path.to_world(s, side * t, z), MANMADE));
            }
        }

        for v in &layout.vehicles {
            let (l, wd, h) = (v.length, v.width, v.height);
            // top, two long sides, two short sides
            let faces = [
                (l * wd, 0),
                (l * h, 1),
                (l * h, 2),
                (wd * h, 3),
                (wd * h, 4),
            ];
            for (area, face) in faces {
                for _ in 0..Self::count(area, object, &mut rng) {
                    let (u, vv, z) = (
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(0.0..h),
                    );
                    let (ds, dd, z) = match face {
                        0 => (u * l, vv * wd, h),
                        1 => (u * l, -wd / 2.0, z),
                        2 => (u * l, wd / 2.0, z),
                        3 => (-l / 2.0, vv * wd, z),
                        _ => (l / 2.0, vv * wd, z),
                    };
                    out.push((path.to_world(v.s + ds, v.d + dd, z), VEHICLE));
                }
            }
        }
        for p in &layout.pedestrians {
            let area = std::f64::consts::TAU * p.radius * p.height;
            for _ in 0..Self::count(area, object, &mut rng) {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let z = sc.sidewalk_height + rng.gen_range(0.0..p.height);
                out.push((
                    path.to_world(p.s + p.radius * a.cos(), p.d + p.radius * a.sin(), z),
                    PEDESTRIAN,
                ));
            }
        }
        for b in &layout.vegetation {
            let area = 2.0 * std::f64::consts::TAU * b.sigma * b.sigma;
            for _ in 0..Self::count(area, object, &mut rng) {
                let g: [f64; 3] = [0; 3].map(|_| rng.sample::<f64, _>(StandardNormal) * b.sigma);
                out.push((
                    path.to_world(b.s + g[0], b.d + g[1], b.z + g[2]),
                    VEGETATION,
                ));
            }
        }
        out
    }

    fn sensor_pose(&self, t: usize, height_offset: f64) -> Pose {
        let s = t as f64 * self.scene.forward_step;
        let [x, y, _] = self.path.to_world(s, 0.0, 0.0);
        Pose::from_yaw_translation(
            self.path.heading(s),
            [x, y, self.scene.sensor_height + height_offset],
        )
    }
}

/// Exact sensor-to-world pose of frame `t`.
pub fn sensor_pose(scene: &SceneConfig, shift: &ShiftConfig, t: usize) -> Pose {
    Geometry::new(scene).sensor_pose(t, shift.sensor_height_offset)
}

fn frame_rng(seed: u64, t: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream + 2 * t as u64 + 1);
    rng
}

const JITTER_STREAM: u64 = 0;
const DROPOUT_STREAM: u64 = 1;

/// Renders every frame of the sequence in sensor coordinates, with ground
/// truth and exact poses.
pub fn generate_sequence(scene: &SceneConfig, shift: &ShiftConfig) -> Result<Vec<Frame>> {
    validate_configs(scene, shift)?;
    let geo = Geometry::new(scene);
    let layout = geo.layout();
    let world = geo.sample_world(&layout, shift);
    let r2 = scene.sensor_range * scene.sensor_range;
    let mut frames = Vec::with_capacity(scene.frames);
    for t in 0..scene.frames {
        let pose = geo.sensor_pose(t, shift.sensor_height_offset);
        let inverse = pose.inverse();
        let origin = pose.translation();
        let mut jitter = frame_rng(shift.seed, t, JITTER_STREAM);
        let mut dropout = frame_rng(shift.seed, t, DROPOUT_STREAM);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut present = [false; CANONICAL_CLASSES.len()];
        for (p, class) in &world {
            let dx = p[0] - origin.x;
            let dy = p[1] - origin.y;
            let dz = p[2] - origin.z;
            if dx * dx + dy * dy + dz * dz >= r2 {
                continue;
            }
            let mut q = inverse.apply(p);
            if shift.jitter_sigma > 0.0 {
                for v in &mut q {
                    *v += shift.jitter_sigma * jitter.sample::<f64, _>(StandardNormal);
                }
            }
            let drop_p = shift.dropout[*class];
            let u: f64 = dropout.gen();
            if u < drop_p {
                continue;
            }
            present[*class] = true;
            points.push(q);
            labels.push(*class);
        }
        if let Some(missing) = present.iter().position(|&p| !p) {
            return Err(Error::ConfigInvalid(format!(
                "frame {t} contains no {} points; increase density or instance counts",
                CANONICAL_CLASSES[missing]
            )));
        }
        frames
            .push(Frame::new(t as u32, points, pose).with_labels(LabelField::from_classes(labels)));
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            frames: 6,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_sequence(&small(), &ShiftConfig::benchmark_target(1)).unwrap();
        let b = generate_sequence(&small(), &ShiftConfig::benchmark_target(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn point_budget_and_classes() {
        for shift in [ShiftConfig::none(0), ShiftConfig::benchmark_target(0)] {
            for f in generate_sequence(&small(), &shift).unwrap() {
                assert!((2000..=20000).contains(&f.len()), "{}", f.len());
                crate::domain::validate_frame(&f).unwrap();
            }
        }
    }

    #[test]
    fn shift_seed_changes_samples_not_layout() {
        let scene = SceneConfig::default();
        let a = Geometry::new(&scene).layout();
        let b = Geometry::new(&scene).layout();
        assert_eq!(format!("{:?}", a), format!("{:?}", b));
        let f1 = generate_sequence(&small(), &ShiftConfig::none(1)).unwrap();
        let f2 = generate_sequence(&small(), &ShiftConfig::none(2)).unwrap();
        assert_eq!(f1[0].pose, f2[0].pose);
        assert_ne!(f1[0].points, f2[0].points);
    }

    #[test]
    fn static_points_reproject_exactly() {
        let frames = generate_sequence(&small(), &ShiftConfig::none(0)).unwrap();
        let (a, b) = (&frames[0], &frames[5]);
        let rel = b.pose.inverse().compose(&a.pose);
        let moved: Vec<Point> = a.points.iter().map(|p| rel.apply(p)).collect();
        let index = crate::spatial::SpatialIndex::build(&b.points).unwrap();
        let mut exact = 0;
        for p in &moved {
            if index.knn(p, 1).unwrap()[0].distance < 1e-9 {
                exact += 1;
            }
        }
        // everything except points leaving the sensor range
        assert!(
            exact as f64 > 0.8 * a.len() as f64,
            "{exact} of {}",
            a.len()
        );
    }

    #[test]
    fn straight_path() {
        let p = Path { curvature: 0.0 };
        assert_eq!(p.to_world(3.0, 1.0, 2.0), [3.0, 1.0, 2.0]);
        let p = Path { curvature: 0.01 };
        let [x, y, _] = p.to_world(50.0, 0.0, 0.0);
        assert!(((x * x + (y - 100.0).powi(2)).sqrt() - 100.0).abs() < 1e-9);
    }
}
