//! Deterministic moving-shape clips with ground-truth flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::video::VideoTensor;
use crate::error::{Error, Result};
use crate::metrics::FlowField;
use crate::par::{self, Execution};

pub const BACKGROUND: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Right,
    Left,
    Down,
    Up,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Right, Direction::Left, Direction::Down, Direction::Up];

    /// Unit step as `(dx, dy)`; +x is rightwards, +y downwards.
    pub fn unit(self) -> (i64, i64) {
        match self {
            Direction::Right => (1, 0),
            Direction::Left => (-1, 0),
            Direction::Down => (0, 1),
            Direction::Up => (0, -1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Right => "right",
            Direction::Left => "left",
            Direction::Down => "down",
            Direction::Up => "up",
        }
    }

    pub fn parse(s: &str) -> Option<Direction> {
        Direction::ALL.into_iter().find(|d| d.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MotionClass {
    pub direction: Direction,
    /// Pixels per frame.
    pub speed: usize,
}

impl MotionClass {
    pub fn velocity(&self) -> (i64, i64) {
        let (ux, uy) = self.direction.unit();
        (ux * self.speed as i64, uy * self.speed as i64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub clips: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub channels: usize,
    pub fps: f64,
    pub directions: Vec<Direction>,
    pub speeds: Vec<usize>,
    /// Base intensities for shapes, in `(-1, 1]`.
    pub palette: Vec<f64>,
    pub max_shapes: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            clips: 64,
            height: 16,
            width: 16,
            frames: 40,
            channels: 1,
            fps: 16.0,
            directions: Direction::ALL.to_vec(),
            speeds: vec![1, 2],
            palette: vec![0.2, 0.5, 0.8],
            max_shapes: 2,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    /// Motion classes in `direction × speed` order; class id is the index.
    pub fn classes(&self) -> Vec<MotionClass> {
        self.directions
            .iter()
            .flat_map(|&direction| self.speeds.iter().map(move |&speed| MotionClass { direction, speed }))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.directions.len() * self.speeds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 || self.frames == 0 || self.channels == 0 {
            return Err(Error::Config("dataset extents too small".into()));
        }
        if self.num_classes() == 0 || self.palette.is_empty() || self.max_shapes == 0 {
            return Err(Error::Config("dataset needs classes, palette and shapes".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config("dataset fps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub video: VideoTensor,
    pub class_id: usize,
    /// Ground-truth flow for each consecutive frame pair.
    pub flows: Vec<FlowField>,
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Square,
    Disc,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: ShapeKind,
    size: usize,
    x0: i64,
    y0: i64,
    intensity: f64,
    texture_seed: u64,
}

impl Shape {
    fn covers(&self, lx: usize, ly: usize) -> bool {
        match self.kind {
            ShapeKind::Square => true,
            ShapeKind::Disc => {
                let r = self.size as f64 / 2.0;
                let (cx, cy) = (lx as f64 + 0.5 - r, ly as f64 + 0.5 - r);
                cx * cx + cy * cy <= r * r
            }
        }
    }

    fn value(&self, lx: usize, ly: usize) -> f64 {
        let n = unit_noise(lx as i64, ly as i64, 0, self.texture_seed);
        (self.intensity + 0.3 * n).clamp(-1.0, 1.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash noise in `[-1, 1]` at integer coordinates.
fn unit_noise(x: i64, y: i64, c: u64, seed: u64) -> f64 {
    let h = splitmix64(
        seed ^ splitmix64(x as u64 ^ splitmix64(y as u64 ^ splitmix64(c.wrapping_add(0x51)))),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Per-clip RNG derived from the dataset seed and clip index.
pub fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index as u64)))
}

fn start_range(extent: usize, size: usize, step: i64, frames: usize) -> Option<(i64, i64)> {
    let travel = step.unsigned_abs() as usize * frames.saturating_sub(1);
    if size + travel > extent {
        return None;
    }
    let slack = (extent - size - travel) as i64;
    Some(if step >= 0 { (0, slack) } else { (travel as i64, travel as i64 + slack) })
}

/// Clip `i` of the dataset: one or two rigid textured shapes sharing the
/// class velocity. Shapes stay inside the frame when their whole path fits,
/// otherwise they wrap around the borders.
pub fn generate_synthetic(spec: &DatasetSpec, index: usize) -> Result<SyntheticClip> {
    spec.validate()?;
    if index >= spec.clips {
        return Err(Error::Contract(format!(
            "clip index {index} out of range for {} clips",
            spec.clips
        )));
    }
    let classes = spec.classes();
    let class_id = index % classes.len();
    let class = classes[class_id];
    let (vx, vy) = class.velocity();
    let mut rng = clip_rng(spec.seed, index);

    let (h, w, nf) = (spec.height, spec.width, spec.frames);
    let max_size = (h.min(w) / 3).max(2).min(h.min(w));
    let n_shapes = rng.random_range(1..=spec.max_shapes);
    let mut shapes = Vec::with_capacity(n_shapes);
    let mut wrap = false;
    for _ in 0..n_shapes {
        let size = rng.random_range(2..=max_size);
        let kind = if rng.random_bool(0.5) { ShapeKind::Square } else { ShapeKind::Disc };
        let xr = start_range(w, size, vx, nf);
        let yr = start_range(h, size, vy, nf);
        let x0 = match xr {
            Some((lo, hi)) => rng.random_range(lo..=hi),
            None => {
                wrap = true;
                rng.random_range(0..w as i64)
            }
        };
        let y0 = match yr {
            Some((lo, hi)) => rng.random_range(lo..=hi),
            None => {
                wrap = true;
                rng.random_range(0..h as i64)
            }
        };
        let intensity = spec.palette[rng.random_range(0..spec.palette.len())];
        shapes.push(Shape {
            kind,
            size,
            x0,
            y0,
            intensity,
            texture_seed: rng.random(),
        });
    }

    // owner[f][y*w+x] = top-most shape index covering the pixel
    let mut owner = vec![vec![None::<usize>; h * w]; nf];
    let mut video = VideoTensor::new(h, w, nf, spec.channels, spec.fps, vec![BACKGROUND; h * w * nf * spec.channels])?;
    for f in 0..nf {
        for (si, s) in shapes.iter().enumerate() {
            let ox = s.x0 + vx * f as i64;
            let oy = s.y0 + vy * f as i64;
            for ly in 0..s.size {
                for lx in 0..s.size {
                    if !s.covers(lx, ly) {
                        continue;
                    }
                    let (px, py) = (ox + lx as i64, oy + ly as i64);
                    let (px, py) = if wrap {
                        (px.rem_euclid(w as i64), py.rem_euclid(h as i64))
                    } else {
                        (px, py)
                    };
                    debug_assert!((0..w as i64).contains(&px) && (0..h as i64).contains(&py));
                    let (px, py) = (px as usize, py as usize);
                    owner[f][py * w + px] = Some(si);
                    let val = s.value(lx, ly);
                    for c in 0..spec.channels {
                        video.set(py, px, f, c, val);
                    }
                }
            }
        }
    }

    let flows = (0..nf.saturating_sub(1))
        .map(|f| {
            let mut flow = FlowField::zeros(h, w);
            for y in 0..h {
                for x in 0..w {
                    let k = y * w + x;
                    match owner[f][k] {
                        Some(si) => {
                            flow.dx[k] = vx as f64;
                            flow.dy[k] = vy as f64;
                            let (tx, ty) = (x as i64 + vx, y as i64 + vy);
                            flow.valid[k] = (0..w as i64).contains(&tx)
                                && (0..h as i64).contains(&ty)
                                && owner[f + 1][ty as usize * w + tx as usize] == Some(si);
                        }
                        None => flow.valid[k] = owner[f + 1][k].is_none(),
                    }
                }
            }
            flow
        })
        .collect();

    Ok(SyntheticClip {
        video,
        class_id,
        flows,
    })
}

/// Every clip of the dataset, generated per index (parallel when enabled).
pub fn generate_dataset(spec: &DatasetSpec, exec: Execution) -> Result<Vec<SyntheticClip>> {
    par::try_map_range(exec, spec.clips, |i| generate_synthetic(spec, i))
}

/// Full-frame hash texture translating by `(vx, vy)` pixels per frame.
///
/// New content enters from the trailing edges, so ground-truth flow is the
/// uniform velocity, valid wherever the displaced pixel stays in frame.
pub fn textured_translation(
    height: usize,
    width: usize,
    frames: usize,
    channels: usize,
    velocity: (i64, i64),
    seed: u64,
) -> Result<SyntheticClip> {
    let (vx, vy) = velocity;
    let mut video = VideoTensor::zeros(height, width, frames, channels, 16.0);
    for f in 0..frames {
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let sx = x as i64 - vx * f as i64;
                    let sy = y as i64 - vy * f as i64;
                    video.set(y, x, f, c, unit_noise(sx, sy, c as u64, seed));
                }
            }
        }
    }
    let flows = (0..frames.saturating_sub(1))
        .map(|_| {
            let mut flow = FlowField::zeros(height, width);
            for y in 0..height {
                for x in 0..width {
                    let k = y * width + x;
                    flow.dx[k] = vx as f64;
                    flow.dy[k] = vy as f64;
                    let (tx, ty) = (x as i64 + vx, y as i64 + vy);
                    flow.valid[k] = (0..width as i64).contains(&tx) && (0..height as i64).contains(&ty);
                }
            }
            flow
        })
        .collect();
    Ok(SyntheticClip {
        video,
        class_id: 0,
        flows,
    })
}

/// Constant-valued clip with zero flow.
pub fn static_clip(height: usize, width: usize, frames: usize, channels: usize, value: f64) -> SyntheticClip {
    let video = VideoTensor::new(
        height,
        width,
        frames,
        channels,
        16.0,
        vec![value; height * width * frames * channels],
    )
    .expect("positive extents");
    SyntheticClip {
        video,
        class_id: 0,
        flows: (0..frames.saturating_sub(1)).map(|_| FlowField::zeros(height, width)).collect(),
    }
}
