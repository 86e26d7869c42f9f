//! Synthetic multi-frame BEV episodes: constant-velocity objects observed
//! from a moving ego vehicle, rasterized into per-class occupancy grids.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::SE2Transform;
use crate::error::{Error, Result};
use crate::grid::GridSpec;

/// Current on-disk episode schema.
pub const EPISODE_SCHEMA_VERSION: u32 = 1;

/// Observation channels beyond the per-class occupancy channels.
pub const NUISANCE_CHANNELS: usize = 2;

/// Subsamples per cell side used for coverage rasterization.
const SUBSAMPLES: usize = 4;

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub timestamp: f64,
}

impl EgoPose {
    pub fn new(x: f64, y: f64, yaw: f64, timestamp: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
            timestamp,
        }
    }

    pub fn to_world(&self) -> SE2Transform {
        SE2Transform::from_pose(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: u32,
    pub class_id: usize,
    pub center: [f64; 2],
    /// `(length, width)` in meters.
    pub size: [f64; 2],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl SceneObject {
    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    /// Re-expresses the object in another frame, where `transform` maps this
    /// object's frame into the target frame.
    pub fn transformed(&self, transform: &SE2Transform) -> SceneObject {
        SceneObject {
            center: transform.apply(self.center),
            velocity: transform.apply_vector(self.velocity),
            yaw: normalize_angle(self.yaw + transform.angle),
            ..self.clone()
        }
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        let along = c * d[0] + s * d[1];
        let across = -s * d[0] + c * d[1];
        along.abs() < self.size[0] / 2.0 && across.abs() < self.size[1] / 2.0
    }

    /// Radius of the circle enclosing the footprint.
    fn reach(&self) -> f64 {
        self.size[0].hypot(self.size[1]) / 2.0
    }
}

/// Constant-velocity world trajectory of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    /// World-frame state at `reference_time`.
    pub object: SceneObject,
    pub reference_time: f64,
}

impl ObjectTrack {
    pub fn world_state_at(&self, t: f64) -> SceneObject {
        let dt = t - self.reference_time;
        let mut object = self.object.clone();
        object.center = [
            self.object.center[0] + self.object.velocity[0] * dt,
            self.object.center[1] + self.object.velocity[1] * dt,
        ];
        object
    }
}

/// Ego trajectory with constant speed and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoMotion {
    pub start: EgoPose,
    pub speed: f64,
    pub yaw_rate: f64,
}

impl EgoMotion {
    pub fn stationary(pose: EgoPose) -> Self {
        Self {
            start: pose,
            speed: 0.0,
            yaw_rate: 0.0,
        }
    }

    pub fn pose_at(&self, t: f64) -> EgoPose {
        let dt = t - self.start.timestamp;
        let yaw0 = self.start.yaw;
        let yaw = yaw0 + self.yaw_rate * dt;
        let (x, y) = if self.yaw_rate.abs() < 1e-9 {
            (
                self.start.x + self.speed * dt * yaw0.cos(),
                self.start.y + self.speed * dt * yaw0.sin(),
            )
        } else {
            let r = self.speed / self.yaw_rate;
            (
                self.start.x + r * (yaw.sin() - yaw0.sin()),
                self.start.y - r * (yaw.cos() - yaw0.cos()),
            )
        };
        EgoPose::new(x, y, yaw, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub grid: GridSpec,
    /// Previous frames per episode; episodes hold `n_prev + 1` frames.
    pub n_prev: usize,
    /// Seconds between frames.
    pub time_step: f64,
    /// Inclusive range of objects placed per episode.
    pub object_count: [usize; 2],
    /// Speed range (m/s) of moving objects.
    pub speed_range: [f64; 2],
    /// Probability that an object is parked (zero velocity).
    pub static_prob: f64,
    pub num_classes: usize,
    /// Nominal `(length, width)` per class; cycled when shorter than
    /// `num_classes`.
    pub class_sizes: Vec<[f64; 2]>,
    /// Relative uniform jitter applied to each size component.
    pub size_jitter: f64,
    pub ego_speed_range: [f64; 2],
    pub ego_yaw_rate_range: [f64; 2],
    /// Standard deviation of the Gaussian pixel noise added to every channel.
    pub noise_sigma: f64,
    /// Probability that an object is hidden in one previous frame.
    pub dropout_prob: f64,
    /// Minimum center distance between objects at the current frame.
    pub min_separation: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            n_prev: 2,
            time_step: 1.0,
            object_count: [2, 8],
            speed_range: [1.5, 3.0],
            static_prob: 0.3,
            num_classes: 2,
            class_sizes: vec![[4.0, 2.0], [2.0, 1.0]],
            size_jitter: 0.1,
            ego_speed_range: [0.0, 3.0],
            ego_yaw_rate_range: [-0.1, 0.1],
            noise_sigma: 0.05,
            dropout_prob: 0.1,
            min_separation: 3.0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], min: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] < min || r[1] < r[0] {
        return Err(Error::Config(format!("{name} must satisfy {min} <= lo <= hi, got {r:?}")));
    }
    Ok(())
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_prev < 2 {
            return Err(Error::Config(format!(
                "episodes need at least two previous frames to carry motion, got n_prev = {}",
                self.n_prev
            )));
        }
        if !(self.time_step > 0.0 && self.time_step.is_finite()) {
            return Err(Error::Config(format!("time_step must be positive, got {}", self.time_step)));
        }
        if self.object_count[1] < self.object_count[0] {
            return Err(Error::Config(format!("object_count range is empty: {:?}", self.object_count)));
        }
        check_range("speed_range", self.speed_range, 0.0)?;
        check_range("ego_speed_range", self.ego_speed_range, 0.0)?;
        check_range("ego_yaw_rate_range", self.ego_yaw_rate_range, f64::NEG_INFINITY)?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.class_sizes.is_empty()
            || self
                .class_sizes
                .iter()
                .any(|s| !(s[0] > 0.0 && s[1] > 0.0 && s[0].is_finite() && s[1].is_finite()))
        {
            return Err(Error::Config("class sizes must be positive".into()));
        }
        for (name, p) in [("static_prob", self.static_prob), ("dropout_prob", self.dropout_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return Err(Error::Config(format!("size_jitter must lie in [0, 1), got {}", self.size_jitter)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.min_separation >= 0.0 && self.min_separation.is_finite()) {
            return Err(Error::Config("min_separation must be >= 0".into()));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.num_classes + NUISANCE_CHANNELS
    }

    pub fn num_frames(&self) -> usize {
        self.n_prev + 1
    }

    fn class_size(&self, class_id: usize) -> [f64; 2] {
        self.class_sizes[class_id % self.class_sizes.len()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub pose: EgoPose,
    /// `[X_f, Y_f, N_c + 2]` noisy observation.
    pub observation: Array3<f32>,
    /// Ground truth in this frame's ego coordinates, centers on the grid only.
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// Oldest first; the last frame is the current one.
    pub frames: Vec<Frame>,
    pub time_step: f64,
    pub seed: u64,
    pub grid: GridSpec,
    pub num_classes: usize,
    pub ego: EgoMotion,
    pub tracks: Vec<ObjectTrack>,
}

impl Episode {
    pub fn current(&self) -> &Frame {
        self.frames.last().expect("episodes are never empty")
    }

    pub fn poses(&self) -> Vec<EgoPose> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    /// The episode restricted to its newest `count` frames.
    pub fn newest(&self, count: usize) -> Episode {
        let skip = self.frames.len().saturating_sub(count);
        Episode {
            frames: self.frames[skip..].to_vec(),
            ..self.clone()
        }
    }
}

/// Rasterizes objects (already in the grid's frame) into occupancy coverage.
///
/// Channel `c < N_c` holds the fraction of a cell covered by objects of class
/// `c`, estimated on a regular subsample lattice; the two trailing nuisance
/// channels stay zero here and only receive pixel noise.
pub fn render_observation(objects: &[SceneObject], grid: &GridSpec, num_classes: usize) -> Array3<f32> {
    let (nx, ny) = grid.shape();
    let mut out = Array3::<f32>::zeros((nx, ny, num_classes + NUISANCE_CHANNELS));
    let step = 1.0 / SUBSAMPLES as f64;
    for obj in objects {
        if obj.class_id >= num_classes {
            continue;
        }
        let (u, v) = grid.to_cell_coords(obj.center[0], obj.center[1]);
        let reach = obj.reach() / grid.cell_size;
        let lo_i = (u - reach).floor().max(0.0);
        let lo_j = (v - reach).floor().max(0.0);
        let hi_i = (u + reach).ceil().min(nx as f64);
        let hi_j = (v + reach).ceil().min(ny as f64);
        if !(lo_i < hi_i && lo_j < hi_j) {
            continue;
        }
        for i in lo_i as usize..hi_i as usize {
            for j in lo_j as usize..hi_j as usize {
                let mut hits = 0usize;
                for si in 0..SUBSAMPLES {
                    for sj in 0..SUBSAMPLES {
                        let p = grid.from_cell_coords(
                            i as f64 + (si as f64 + 0.5) * step,
                            j as f64 + (sj as f64 + 0.5) * step,
                        );
                        if obj.contains([p.0, p.1]) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let cover = hits as f32 / (SUBSAMPLES * SUBSAMPLES) as f32;
                    let cell = &mut out[[i, j, obj.class_id]];
                    *cell = cell.max(cover);
                }
            }
        }
    }
    out
}

/// Samples a random scene for `(config, seed)` and renders it.
pub fn generate_episode(config: &SceneConfig, seed: u64) -> Result<Episode> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = config.time_step;
    let current_time = config.n_prev as f64 * dt;

    let ego_speed = rng.random_range(config.ego_speed_range[0]..=config.ego_speed_range[1]);
    let yaw_rate = rng.random_range(config.ego_yaw_rate_range[0]..=config.ego_yaw_rate_range[1]);
    let start_yaw = rng.random_range(-PI..PI);
    let ego = EgoMotion {
        start: EgoPose::new(0.0, 0.0, start_yaw, 0.0),
        speed: ego_speed,
        yaw_rate,
    };
    let current_pose = ego.pose_at(current_time);
    let to_world = current_pose.to_world();

    let count = rng.random_range(config.object_count[0]..=config.object_count[1]);
    let grid = &config.grid;
    let margin = 1.0f64.min(grid.cell_size * grid.cells_x.min(grid.cells_y) as f64 / 4.0);
    let (x_lo, y_lo) = (grid.origin[0] + margin, grid.origin[1] + margin);
    let x_hi = grid.origin[0] + grid.cells_x as f64 * grid.cell_size - margin;
    let y_hi = grid.origin[1] + grid.cells_y as f64 * grid.cell_size - margin;

    let mut placed: Vec<[f64; 2]> = Vec::with_capacity(count);
    let mut tracks = Vec::with_capacity(count);
    for id in 0..count {
        let class_id = rng.random_range(0..config.num_classes);
        let mut center = [0.0; 2];
        for _ in 0..32 {
            center = [rng.random_range(x_lo..x_hi), rng.random_range(y_lo..y_hi)];
            let clear = placed.iter().all(|p| {
                (p[0] - center[0]).hypot(p[1] - center[1]) >= config.min_separation
            });
            if clear {
                break;
            }
        }
        placed.push(center);
        let nominal = config.class_size(class_id);
        let jitter = config.size_jitter;
        let size = [
            nominal[0] * (1.0 + rng.random_range(-jitter..=jitter)),
            nominal[1] * (1.0 + rng.random_range(-jitter..=jitter)),
        ];
        let parked = rng.random_bool(config.static_prob);
        let heading = rng.random_range(-PI..PI);
        let speed = if parked {
            0.0
        } else {
            rng.random_range(config.speed_range[0]..=config.speed_range[1])
        };
        let ego_frame = SceneObject {
            object_id: id as u32,
            class_id,
            center,
            size,
            yaw: heading,
            velocity: [speed * heading.cos(), speed * heading.sin()],
        };
        tracks.push(ObjectTrack {
            object: ego_frame.transformed(&to_world),
            reference_time: current_time,
        });
    }

    let hidden: Vec<Option<usize>> = tracks
        .iter()
        .map(|_| {
            rng.random_bool(config.dropout_prob)
                .then(|| rng.random_range(0..config.n_prev))
        })
        .collect();
    assemble_episode(config, ego, tracks, &hidden, seed, &mut rng)
}

/// Renders an episode from explicit trajectories. `hidden[o]` names a frame
/// in which track `o` is left out of the observation.
pub fn assemble_episode(
    config: &SceneConfig,
    ego: EgoMotion,
    tracks: Vec<ObjectTrack>,
    hidden: &[Option<usize>],
    seed: u64,
    rng: &mut impl Rng,
) -> Result<Episode> {
    config.validate()?;
    let noise = Normal::new(0.0, config.noise_sigma)
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let grid = config.grid;
    let frames = (0..config.num_frames())
        .map(|f| {
            let t = f as f64 * config.time_step;
            let pose = ego.pose_at(t);
            let to_ego = pose.to_world().inverse();
            let in_ego: Vec<SceneObject> = tracks
                .iter()
                .map(|track| track.world_state_at(t).transformed(&to_ego))
                .collect();
            let visible: Vec<SceneObject> = in_ego
                .iter()
                .zip(tracks.iter().enumerate())
                .filter(|(_, (o, _))| hidden.get(*o).copied().flatten() != Some(f))
                .map(|(obj, _)| obj.clone())
                .collect();
            let mut observation = render_observation(&visible, &grid, config.num_classes);
            if config.noise_sigma > 0.0 {
                observation.mapv_inplace(|v| v + noise.sample(rng) as f32);
            }
            let objects = in_ego
                .into_iter()
                .filter(|o| grid.contains(o.center[0], o.center[1]))
                .collect();
            Frame {
                timestamp: t,
                pose,
                observation,
                objects,
            }
        })
        .collect();
    Ok(Episode {
        frames,
        time_step: config.time_step,
        seed,
        grid,
        num_classes: config.num_classes,
        ego,
        tracks,
    })
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    timestamp: f64,
    pose: EgoPose,
    shape: [usize; 3],
    observation: Vec<f32>,
    objects: Vec<SceneObject>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    schema_version: u32,
    seed: u64,
    time_step: f64,
    grid: GridSpec,
    num_classes: usize,
    ego: EgoMotion,
    tracks: Vec<ObjectTrack>,
    frames: Vec<FrameRecord>,
}

/// Serializes an episode as a versioned JSON record.
pub fn episode_to_json(episode: &Episode) -> Result<Vec<u8>> {
    let record = EpisodeRecord {
        schema_version: EPISODE_SCHEMA_VERSION,
        seed: episode.seed,
        time_step: episode.time_step,
        grid: episode.grid,
        num_classes: episode.num_classes,
        ego: episode.ego,
        tracks: episode.tracks.clone(),
        frames: episode
            .frames
            .iter()
            .map(|f| {
                let (a, b, c) = f.observation.dim();
                FrameRecord {
                    timestamp: f.timestamp,
                    pose: f.pose,
                    shape: [a, b, c],
                    observation: f.observation.iter().copied().collect(),
                    objects: f.objects.clone(),
                }
            })
            .collect(),
    };
    Ok(serde_json::to_vec(&record)?)
}

/// Parses and validates an episode record.
pub fn episode_from_json(bytes: &[u8]) -> Result<Episode> {
    let record: EpisodeRecord = serde_json::from_slice(bytes)?;
    if record.schema_version != EPISODE_SCHEMA_VERSION {
        return Err(Error::SchemaVersion(record.schema_version));
    }
    record.grid.validate().map_err(|e| Error::Format(e.to_string()))?;
    if record.frames.is_empty() {
        return Err(Error::Format("episode has no frames".into()));
    }
    if record.num_classes == 0 {
        return Err(Error::Format("num_classes must be positive".into()));
    }
    let expected = [
        record.grid.cells_x,
        record.grid.cells_y,
        record.num_classes + NUISANCE_CHANNELS,
    ];
    let frames = record
        .frames
        .into_iter()
        .map(|f| {
            if f.shape != expected {
                return Err(Error::Format(format!(
                    "observation shape {:?} does not match grid {:?}",
                    f.shape, expected
                )));
            }
            for o in &f.objects {
                if o.class_id >= record.num_classes {
                    return Err(Error::Format(format!("class id {} out of range", o.class_id)));
                }
                if !(o.size[0] > 0.0 && o.size[1] > 0.0) {
                    return Err(Error::Format(format!("object {} has non-positive size", o.object_id)));
                }
            }
            let observation = Array3::from_shape_vec((expected[0], expected[1], expected[2]), f.observation)
                .map_err(|e| Error::Format(e.to_string()))?;
            Ok(Frame {
                timestamp: f.timestamp,
                pose: f.pose,
                observation,
                objects: f.objects,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        frames,
        time_step: record.time_step,
        seed: record.seed,
        grid: record.grid,
        num_classes: record.num_classes,
        ego: record.ego,
        tracks: record.tracks,
    })
}

pub fn episode_file_name(seed: u64) -> String {
    format!("episode_{seed:010}.json")
}

/// Writes one file per episode into `dir`, returning the paths.
pub fn export_episodes(dir: &Path, episodes: &[Episode]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    episodes
        .iter()
        .map(|e| {
            let path = dir.join(episode_file_name(e.seed));
            fs::write(&path, episode_to_json(e)?)?;
            Ok(path)
        })
        .collect()
}

/// Loads every `*.json` episode in `dir`, sorted by file name.
pub fn import_episodes(dir: &Path) -> Result<Vec<Episode>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| episode_from_json(&fs::read(p)?))
        .collect()
}
