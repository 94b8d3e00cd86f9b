//! Deterministic frictionless billiard-table simulator.
//!
//! Worlds hold 1-3 equal-mass balls on a square table; steps advance unit
//! time with exact sub-step collision resolution (wall reflection, elastic
//! ball-ball exchange). Frames are binary boundary images: 1-pixel table
//! border plus a 1-pixel ring outline per ball.
//!
//! Coordinates: pixel centers sit at integer coordinates `0..side-1`; the
//! wall planes coincide with the border pixels, so ball centers live in
//! `[radius, side-1-radius]` on each axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::pgm::{self, GrayImage};

pub const BALL_RADIUS: f64 = 13.0;
pub const TABLE_SIDES: [usize; 5] = [96, 128, 160, 192, 256];
const NEAR_WALL_DISTANCE: f64 = 40.0;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("could not place {n_balls} balls without overlap after {attempts} attempts (side {side})")]
    Placement { n_balls: usize, side: usize, attempts: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Pgm(#[from] pgm::PgmError),
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Ball {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub radius: f64,
}

impl Ball {
    pub fn speed_sq(&self) -> f64 {
        self.vel[0] * self.vel[0] + self.vel[1] * self.vel[1]
    }
}

#[derive(Debug, Clone)]
pub struct BallWorld {
    pub side: usize,
    pub balls: Vec<Ball>,
    pub rng_seed: u64,
    pub step_count: u64,
    /// Cumulative wall collisions since initialization.
    pub wall_collisions: u64,
}

impl BallWorld {
    /// Total kinetic energy up to the constant mass factor.
    pub fn kinetic_energy(&self) -> f64 {
        self.balls.iter().map(Ball::speed_sq).sum()
    }

    pub fn contained(&self, tol: f64) -> bool {
        self.balls.iter().all(|b| {
            b.pos[0] >= lo(b.radius) - tol
                && b.pos[0] <= hi(self.side, b.radius) + tol
                && b.pos[1] >= lo(b.radius) - tol
                && b.pos[1] <= hi(self.side, b.radius) + tol
        })
    }

    /// Largest pairwise overlap depth, 0 when no discs intersect.
    pub fn max_overlap(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.balls.len() {
            for j in i + 1..self.balls.len() {
                let (a, b) = (&self.balls[i], &self.balls[j]);
                let dx = a.pos[0] - b.pos[0];
                let dy = a.pos[1] - b.pos[1];
                let dist = (dx * dx + dy * dy).sqrt();
                worst = worst.max(a.radius + b.radius - dist);
            }
        }
        worst
    }
}

/// Per-pixel boundary confidence in [0,1]; synthetic frames are binary.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFrame {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl BoundaryFrame {
    pub fn zeros(height: usize, width: usize) -> Self {
        BoundaryFrame { height, width, values: vec![0.0; height * width] }
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn foreground(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            pixels: self.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        }
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        BoundaryFrame {
            height: img.height,
            width: img.width,
            values: img.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        }
    }
}

/// Generation knobs the source material leaves open.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldOptions {
    /// Probability of placing a ball center within 40 px of a wall.
    pub near_wall_bias: f64,
    /// Reject the degenerate (0,0) initial velocity.
    pub exclude_zero_velocity: bool,
}

impl Default for WorldOptions {
    fn default() -> Self {
        WorldOptions { near_wall_bias: 0.0, exclude_zero_velocity: false }
    }
}

fn lo(r: f64) -> f64 {
    r
}

fn hi(side: usize, r: f64) -> f64 {
    (side - 1) as f64 - r
}

fn wall_distance(pos: &[f64; 2], side: usize) -> f64 {
    let s = (side - 1) as f64;
    pos[0].min(s - pos[0]).min(pos[1]).min(s - pos[1])
}

/// Deterministic world initialization from a seed: side sampled from the five
/// allowed sizes, integer velocity components in {-3..3}, positions uniform
/// over the valid region (near-wall biased with the configured probability).
pub fn world_init(n_balls: usize, rng_seed: u64, opts: &WorldOptions) -> Result<BallWorld> {
    if !(1..=3).contains(&n_balls) {
        return Err(SimError::InvalidArgument(format!("n_balls must be 1..=3, got {n_balls}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let side = TABLE_SIDES[rng.gen_range(0..TABLE_SIDES.len())];
    let r = BALL_RADIUS;
    let mut balls: Vec<Ball> = Vec::with_capacity(n_balls);
    for _ in 0..n_balls {
        let near_wall = opts.near_wall_bias > 0.0 && rng.gen_bool(opts.near_wall_bias);
        let mut attempts = 0;
        let pos = loop {
            if attempts >= MAX_PLACEMENT_ATTEMPTS {
                return Err(SimError::Placement { n_balls, side, attempts });
            }
            attempts += 1;
            let cand = [
                rng.gen_range(lo(r)..=hi(side, r)),
                rng.gen_range(lo(r)..=hi(side, r)),
            ];
            if near_wall && wall_distance(&cand, side) > NEAR_WALL_DISTANCE {
                continue;
            }
            let overlaps = balls.iter().any(|b| {
                let dx = b.pos[0] - cand[0];
                let dy = b.pos[1] - cand[1];
                (dx * dx + dy * dy).sqrt() < b.radius + r
            });
            if overlaps {
                continue;
            }
            break cand;
        };
        let vel = loop {
            let v = [rng.gen_range(-3i32..=3) as f64, rng.gen_range(-3i32..=3) as f64];
            if opts.exclude_zero_velocity && v == [0.0, 0.0] {
                continue;
            }
            break v;
        };
        balls.push(Ball { pos, vel, radius: r });
    }
    Ok(BallWorld { side, balls, rng_seed, step_count: 0, wall_collisions: 0 })
}

#[derive(Debug, Clone, Copy)]
enum Event {
    Wall { ball: usize, axis: usize },
    Pair { i: usize, j: usize },
}

fn advance(balls: &mut [Ball], dt: f64) {
    for b in balls {
        b.pos[0] += b.vel[0] * dt;
        b.pos[1] += b.vel[1] * dt;
    }
}

/// Advance the world by one unit time step with exact sub-step collision
/// resolution. Pure: the input world is untouched.
pub fn world_step(world: &BallWorld) -> BallWorld {
    let mut w = world.clone();
    let mut remaining = 1.0f64;
    let mut guard = 0;
    while remaining > 0.0 {
        guard += 1;
        debug_assert!(guard < 10_000, "collision resolution did not terminate");
        if guard >= 10_000 {
            break;
        }
        // earliest event within the remaining time; ties resolved by
        // enumeration order (wall events in ball-index order, then pairs)
        let mut best: Option<(f64, Event)> = None;
        let consider = |t: f64, ev: Event, best: &mut Option<(f64, Event)>| {
            if t <= remaining && best.map_or(true, |(bt, _)| t < bt) {
                *best = Some((t, ev));
            }
        };
        for (i, b) in w.balls.iter().enumerate() {
            for axis in 0..2 {
                let v = b.vel[axis];
                if v == 0.0 {
                    continue;
                }
                let target = if v > 0.0 { hi(w.side, b.radius) } else { lo(b.radius) };
                let t = (target - b.pos[axis]) / v;
                if t >= -1e-12 {
                    consider(t.max(0.0), Event::Wall { ball: i, axis }, &mut best);
                }
            }
        }
        for i in 0..w.balls.len() {
            for j in i + 1..w.balls.len() {
                let (bi, bj) = (&w.balls[i], &w.balls[j]);
                let d = [bj.pos[0] - bi.pos[0], bj.pos[1] - bi.pos[1]];
                let rv = [bj.vel[0] - bi.vel[0], bj.vel[1] - bi.vel[1]];
                let b = d[0] * rv[0] + d[1] * rv[1];
                if b >= 0.0 {
                    continue; // separating or parallel
                }
                let a = rv[0] * rv[0] + rv[1] * rv[1];
                let rr = bi.radius + bj.radius;
                let c = d[0] * d[0] + d[1] * d[1] - rr * rr;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    continue;
                }
                let t = (-b - disc.sqrt()) / a;
                if t >= -1e-12 {
                    consider(t.max(0.0), Event::Pair { i, j }, &mut best);
                }
            }
        }
        match best {
            None => {
                advance(&mut w.balls, remaining);
                remaining = 0.0;
            }
            Some((t, ev)) => {
                advance(&mut w.balls, t);
                remaining -= t;
                match ev {
                    Event::Wall { ball, axis } => {
                        w.balls[ball].vel[axis] = -w.balls[ball].vel[axis];
                        w.wall_collisions += 1;
                    }
                    Event::Pair { i, j } => {
                        // equal masses: exchange velocity components along the
                        // center line, tangential components unchanged
                        let d = [
                            w.balls[j].pos[0] - w.balls[i].pos[0],
                            w.balls[j].pos[1] - w.balls[i].pos[1],
                        ];
                        let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
                        let n = [d[0] / dist, d[1] / dist];
                        let rv = [
                            w.balls[j].vel[0] - w.balls[i].vel[0],
                            w.balls[j].vel[1] - w.balls[i].vel[1],
                        ];
                        let vn = rv[0] * n[0] + rv[1] * n[1];
                        w.balls[i].vel[0] += vn * n[0];
                        w.balls[i].vel[1] += vn * n[1];
                        w.balls[j].vel[0] -= vn * n[0];
                        w.balls[j].vel[1] -= vn * n[1];
                    }
                }
            }
        }
    }
    // shave sub-ulp excursions from the event arithmetic
    for b in &mut w.balls {
        for axis in 0..2 {
            b.pos[axis] = b.pos[axis].clamp(lo(b.radius), hi(w.side, b.radius));
        }
    }
    w.step_count += 1;
    w
}

/// Binary boundary image of the world: table border plus one ring per ball.
/// A pixel belongs to a ring when its distance to the ball center lies in
/// `[radius - 0.5, radius + 0.5)`.
pub fn rasterize(world: &BallWorld) -> BoundaryFrame {
    let s = world.side;
    let mut f = BoundaryFrame::zeros(s, s);
    for x in 0..s {
        f.values[x] = 1.0;
        f.values[(s - 1) * s + x] = 1.0;
    }
    for y in 0..s {
        f.values[y * s] = 1.0;
        f.values[y * s + s - 1] = 1.0;
    }
    for b in &world.balls {
        draw_ring(&mut f, b.pos, b.radius);
    }
    f
}

pub fn draw_ring(f: &mut BoundaryFrame, center: [f64; 2], radius: f64) {
    let y0 = ((center[1] - radius - 1.0).floor().max(0.0)) as usize;
    let y1 = ((center[1] + radius + 1.0).ceil()).min((f.height - 1) as f64) as usize;
    let x0 = ((center[0] - radius - 1.0).floor().max(0.0)) as usize;
    let x1 = ((center[0] + radius + 1.0).ceil()).min((f.width - 1) as f64) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - center[0];
            let dy = y as f64 - center[1];
            let d = (dx * dx + dy * dy).sqrt();
            if d >= radius - 0.5 && d < radius + 0.5 {
                f.values[y * f.width + x] = 1.0;
            }
        }
    }
}

/// One generated sequence: frames plus the ground-truth trajectory.
#[derive(Debug, Clone)]
pub struct SequenceData {
    pub frames: Vec<BoundaryFrame>,
    /// Ball states per frame, index-aligned with `frames`.
    pub trajectory: Vec<Vec<Ball>>,
    pub side: usize,
    pub n_balls: usize,
    pub seed: u64,
}

/// Step a freshly initialized world, rasterizing every frame. Stops at
/// `length_limit` frames or once `collision_limit` wall collisions have
/// occurred, whichever comes first.
pub fn generate_sequence(
    n_balls: usize,
    length_limit: usize,
    collision_limit: Option<u64>,
    rng_seed: u64,
    opts: &WorldOptions,
) -> Result<SequenceData> {
    if length_limit == 0 {
        return Err(SimError::InvalidArgument("length_limit must be positive".into()));
    }
    if collision_limit == Some(0) {
        return Err(SimError::InvalidArgument("collision_limit must be positive".into()));
    }
    let mut world = world_init(n_balls, rng_seed, opts)?;
    let mut frames = vec![rasterize(&world)];
    let mut trajectory = vec![world.balls.clone()];
    while frames.len() < length_limit {
        world = world_step(&world);
        frames.push(rasterize(&world));
        trajectory.push(world.balls.clone());
        if let Some(limit) = collision_limit {
            if world.wall_collisions >= limit {
                break;
            }
        }
    }
    Ok(SequenceData { frames, trajectory, side: world.side, n_balls, seed: rng_seed })
}

/// How many sequences of each world type a dataset holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// (n_balls, sequence count) groups.
    pub groups: Vec<(usize, usize)>,
    pub length_limit: usize,
    /// Per-sequence wall-collision budget sampled uniformly from this
    /// inclusive range; `None` disables the collision stop.
    pub collision_budget: Option<(u64, u64)>,
    pub options: WorldOptions,
    /// Sequences shorter than this are regenerated with a derived seed
    /// (4 inputs + 1 target is the minimum usable length).
    pub min_length: usize,
    pub base_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub n_balls: usize,
    pub side: usize,
    pub length: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub sequences: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SimError::Io { path: path.display().to_string(), source: e })?;
        serde_json::from_str(&text).map_err(|e| SimError::Json { path: path.display().to_string(), source: e })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| SimError::Json { path: path.display().to_string(), source: e })?;
        std::fs::write(path, text).map_err(|e| SimError::Io { path: path.display().to_string(), source: e })
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Derive the seed of sequence `index` from a dataset base seed.
pub fn sequence_seed(base_seed: u64, index: u64) -> u64 {
    splitmix64(base_seed ^ splitmix64(index))
}

fn io_ctx(path: &Path, e: std::io::Error) -> SimError {
    SimError::Io { path: path.display().to_string(), source: e }
}

/// Generate a sequence honoring `min_length`, rotating the seed when a world
/// hits its collision budget too early to be usable.
pub fn generate_usable_sequence(spec: &DatasetSpec, n_balls: usize, seed: u64) -> Result<SequenceData> {
    let mut seed = seed;
    for _ in 0..100 {
        let budget = spec.collision_budget.map(|(a, b)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f6c6c);
            rng.gen_range(a..=b)
        });
        let seq = generate_sequence(n_balls, spec.length_limit, budget, seed, &spec.options)?;
        if seq.frames.len() >= spec.min_length {
            return Ok(seq);
        }
        seed = splitmix64(seed ^ 0x7265726f6c6c);
    }
    Err(SimError::InvalidArgument(format!(
        "no sequence of length >= {} found after 100 seed rotations",
        spec.min_length
    )))
}

/// Write every sequence of the dataset under `out_dir` and return the manifest
/// (also written as `manifest.json`). Re-running with the same spec produces
/// byte-identical frames.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_ctx(out_dir, e))?;
    let mut manifest = Manifest::default();
    let mut index = 0u64;
    for &(n_balls, count) in &spec.groups {
        for _ in 0..count {
            let seed = sequence_seed(spec.base_seed, index);
            let seq = generate_usable_sequence(spec, n_balls, seed)?;
            let dir_name = format!("seq_{index:05}");
            let dir = out_dir.join(&dir_name);
            std::fs::create_dir_all(&dir).map_err(|e| io_ctx(&dir, e))?;
            for (fi, frame) in seq.frames.iter().enumerate() {
                pgm::write_pgm(&dir.join(format!("frame_{fi:04}.pgm")), &frame.to_gray())?;
            }
            let traj_path = dir.join("trajectory.json");
            let traj = serde_json::to_string(&seq.trajectory)
                .map_err(|e| SimError::Json { path: traj_path.display().to_string(), source: e })?;
            std::fs::write(&traj_path, traj).map_err(|e| io_ctx(&traj_path, e))?;
            manifest.sequences.push(ManifestEntry {
                dir: dir_name,
                n_balls,
                side: seq.side,
                length: seq.frames.len(),
                seed,
            });
            index += 1;
        }
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
