use std::collections::BTreeMap;

use crate::domain::{CANONICAL_CLASSES, PEDESTRIAN};
use crate::error::{Error, Result};

/// Static layout of the synthetic world and the ego trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Seeds the placement and size of every object.
    pub seed: u64,
    pub frames: usize,
    /// Meters travelled per frame.
    pub forward_step: f64,
    /// Heading change per frame, radians.
    pub yaw_step: f64,
    pub sensor_range: f64,
    pub sensor_height: f64,
    /// Points per square meter on road, sidewalk, terrain and walls.
    pub surface_density: f64,
    /// Points per square meter on vehicles, pedestrians and vegetation.
    pub object_density: f64,
    pub road_half_width: f64,
    pub sidewalk_width: f64,
    pub sidewalk_height: f64,
    pub terrain_width: f64,
    pub terrain_amplitude: f64,
    pub wall_height: f64,
    /// Mean gap between consecutive instances along one side of the road.
    pub vehicle_spacing: f64,
    pub pedestrian_spacing: f64,
    pub vegetation_spacing: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 7,
            frames: 200,
            forward_step: 0.5,
            yaw_step: 0.002,
            sensor_range: 20.0,
            sensor_height: 1.73,
            surface_density: 8.0,
            object_density: 24.0,
            road_half_width: 4.0,
            sidewalk_width: 2.0,
            sidewalk_height: 0.15,
            terrain_width: 6.0,
            terrain_amplitude: 0.25,
            wall_height: 4.0,
            vehicle_spacing: 12.0,
            pedestrian_spacing: 7.0,
            vegetation_spacing: 9.0,
        }
    }
}

/// Sampling-level perturbations applied on top of a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftConfig {
    /// Seeds surface sampling, per-frame jitter and dropout.
    pub seed: u64,
    pub jitter_sigma: f64,
    pub density_factor: f64,
    /// Per-class probability of removing a point from a frame.
    pub dropout: Vec<f64>,
    pub sensor_height_offset: f64,
}

impl ShiftConfig {
    /// No perturbation.
    pub fn none(seed: u64) -> Self {
        ShiftConfig {
            seed,
            jitter_sigma: 0.0,
            density_factor: 1.0,
            dropout: vec![0.0; CANONICAL_CLASSES.len()],
            sensor_height_offset: 0.0,
        }
    }

    /// Noisy, half-density sensor that misses 30% of pedestrian returns.
    pub fn benchmark_target(seed: u64) -> Self {
        let mut dropout = vec![0.0; CANONICAL_CLASSES.len()];
        dropout[PEDESTRIAN] = 0.3;
        ShiftConfig {
            seed,
            jitter_sigma: 0.05,
            density_factor: 0.5,
            dropout,
            sensor_height_offset: 0.0,
        }
    }
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig::none(0)
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ConfigInvalid(msg.into())
}

pub fn validate_configs(scene: &SceneConfig, shift: &ShiftConfig) -> Result<()> {
    let positive = [
        ("forward_step", scene.forward_step),
        ("sensor_range", scene.sensor_range),
        ("surface_density", scene.surface_density),
        ("object_density", scene.object_density),
        ("road_half_width", scene.road_half_width),
        ("sidewalk_width", scene.sidewalk_width),
        ("terrain_width", scene.terrain_width),
        ("wall_height", scene.wall_height),
        ("vehicle_spacing", scene.vehicle_spacing),
        ("pedestrian_spacing", scene.pedestrian_spacing),
        ("vegetation_spacing", scene.vegetation_spacing),
        ("density_factor", shift.density_factor),
    ];
    for (name, v) in positive {
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid(format!(
                "{name} must be positive and finite, got {v}"
            )));
        }
    }
    let finite = [
        ("yaw_step", scene.yaw_step),
        ("sensor_height", scene.sensor_height),
        ("sidewalk_height", scene.sidewalk_height),
        ("terrain_amplitude", scene.terrain_amplitude),
        ("sensor_height_offset", shift.sensor_height_offset),
    ];
    for (name, v) in finite {
        if !v.is_finite() {
            return Err(invalid(format!("{name} must be finite")));
        }
    }
    if scene.frames == 0 {
        return Err(invalid("frames must be at least 1"));
    }
    if !(shift.jitter_sigma.is_finite() && shift.jitter_sigma >= 0.0) {
        return Err(invalid("jitter_sigma must be >= 0"));
    }
    if shift.dropout.len() != CANONICAL_CLASSES.len() {
        return Err(invalid(format!(
            "dropout needs {} entries, got {}",
            CANONICAL_CLASSES.len(),
            shift.dropout.len()
        )));
    }
    if shift.dropout.iter().any(|p| !(0.0..1.0).contains(p)) {
        return Err(invalid("dropout probabilities must lie in [0, 1)"));
    }
    Ok(())
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| invalid(format!("cannot parse value {v:?} for {key}")))
}

/// Reads `key = value` lines. Scene keys use their field names; shift keys
/// are `shift_seed`, `jitter_sigma`, `density_factor`,
/// `sensor_height_offset`, and `dropout.<class name>`. Unset keys keep their
/// defaults.
pub fn parse_config(text: &str) -> Result<(SceneConfig, ShiftConfig)> {
    let mut entries = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| invalid(format!("line {}: expected key = value", lineno + 1)))?;
        if entries
            .insert(k.trim().to_string(), v.trim().to_string())
            .is_some()
        {
            return Err(invalid(format!("key {} set twice", k.trim())));
        }
    }
    let mut scene = SceneConfig::default();
    let mut shift = ShiftConfig::default();
    for (k, v) in &entries {
        let k = k.as_str();
        match k {
            "seed" => scene.seed = parse_value(k, v)?,
            "frames" => scene.frames = parse_value(k, v)?,
            "forward_step" => scene.forward_step = parse_value(k, v)?,
            "yaw_step" => scene.yaw_step = parse_value(k, v)?,
            "sensor_range" => scene.sensor_range = parse_value(k, v)?,
            "sensor_height" => scene.sensor_height = parse_value(k, v)?,
            "surface_density" => scene.surface_density = parse_value(k, v)?,
            "object_density" => scene.object_density = parse_value(k, v)?,
            "road_half_width" => scene.road_half_width = parse_value(k, v)?,
            "sidewalk_width" => scene.sidewalk_width = parse_value(k, v)?,
            "sidewalk_height" => scene.sidewalk_height = parse_value(k, v)?,
            "terrain_width" => scene.terrain_width = parse_value(k, v)?,
            "terrain_amplitude" => scene.terrain_amplitude = parse_value(k, v)?,
            "wall_height" => scene.wall_height = parse_value(k, v)?,
            "vehicle_spacing" => scene.vehicle_spacing = parse_value(k, v)?,
            "pedestrian_spacing" => scene.pedestrian_spacing = parse_value(k, v)?,
            "vegetation_spacing" => scene.vegetation_spacing = parse_value(k, v)?,
            "shift_seed" => shift.seed = parse_value(k, v)?,
            "jitter_sigma" => shift.jitter_sigma = parse_value(k, v)?,
            "density_factor" => shift.density_factor = parse_value(k, v)?,
            "sensor_height_offset" => shift.sensor_height_offset = parse_value(k, v)?,
            _ => {
                let class = k
                    .strip_prefix("dropout.")
                    .and_then(|name| CANONICAL_CLASSES.iter().position(|c| *c == name))
                    .ok_or_else(|| invalid(format!("unknown key {k}")))?;
                shift.dropout[class] = parse_value(k, v)?;
            }
        }
    }
    validate_configs(&scene, &shift)?;
    Ok((scene, shift))
}

/// Inverse of [`parse_config`].
pub fn format_config(scene: &SceneConfig, shift: &ShiftConfig) -> String {
    let mut out = String::new();
    let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    put("seed", scene.seed.to_string());
    put("frames", scene.frames.to_string());
    put("forward_step", scene.forward_step.to_string());
    put("yaw_step", scene.yaw_step.to_string());
    put("sensor_range", scene.sensor_range.to_string());
    put("sensor_height", scene.sensor_height.to_string());
    put("surface_density", scene.surface_density.to_string());
    put("object_density", scene.object_density.to_string());
    put("road_half_width", scene.road_half_width.to_string());
    put("sidewalk_width", scene.sidewalk_width.to_string());
    put("sidewalk_height", scene.sidewalk_height.to_string());
    put("terrain_width", scene.terrain_width.to_string());
    put("terrain_amplitude", scene.terrain_amplitude.to_string());
    put("wall_height", scene.wall_height.to_string());
    put("vehicle_spacing", scene.vehicle_spacing.to_string());
    put("pedestrian_spacing", scene.pedestrian_spacing.to_string());
    put("vegetation_spacing", scene.vegetation_spacing.to_string());
    put("shift_seed", shift.seed.to_string());
    put("jitter_sigma", shift.jitter_sigma.to_string());
    put("density_factor", shift.density_factor.to_string());
    put(
        "sensor_height_offset",
        shift.sensor_height_offset.to_string(),
    );
    for (name, p) in CANONICAL_CLASSES.iter().zip(&shift.dropout) {
        put(&format!("dropout.{name}"), p.to_string());
    }
    out
}
