//! Deterministic synthetic clips: a textured box room with a few cuboids seen
//! by a pinhole camera moving along a smooth path.
//!
//! Each frame carries an input feature image, the camera vector
//! (unit quaternion, translation, log focal), a z-depth map and a world-frame
//! point map, all at patch resolution.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channels of the generated input feature image.
pub const INPUT_CHANNELS: usize = 4;

/// Camera vector layout: `[qw, qx, qy, qz, tx, ty, tz, ln f]`. The quaternion
/// rotates camera coordinates into world coordinates; the translation is the
/// camera centre in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraVector(pub [f64; 8]);

impl CameraVector {
    pub fn quaternion(&self) -> [f64; 4] {
        [self.0[0], self.0[1], self.0[2], self.0[3]]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.0[4], self.0[5], self.0[6]]
    }

    pub fn focal(&self) -> f64 {
        self.0[7].exp()
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        quat_to_mat(self.quaternion())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `[h, w, INPUT_CHANNELS]`
    pub image: Tensor<f64>,
    pub camera: CameraVector,
    /// `[h, w]`, strictly positive.
    pub depth: Tensor<f64>,
    /// `[h, w, 3]`, world coordinates.
    pub points: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub frames: Vec<Frame>,
}

impl ClipSample {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Direction of the ray through the centre of pixel `(row, col)` in camera
/// coordinates, scaled so its z component is 1.
pub fn pixel_ray(row: usize, col: usize, h: usize, w: usize, focal: f64) -> [f64; 3] {
    [
        (col as f64 + 0.5 - w as f64 / 2.0) / focal,
        (row as f64 + 0.5 - h as f64 / 2.0) / focal,
        1.0,
    ]
}

/// World point seen at `(row, col)` with z-depth `depth`.
pub fn unproject(row: usize, col: usize, depth: f64, h: usize, w: usize, cam: &CameraVector) -> [f64; 3] {
    let d = pixel_ray(row, col, h, w, cam.focal());
    let r = cam.rotation();
    let t = cam.translation();
    let pc = [d[0] * depth, d[1] * depth, depth];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = t[i] + r[i][0] * pc[0] + r[i][1] * pc[1] + r[i][2] * pc[2];
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    lo: [f64; 3],
    hi: [f64; 3],
}

const ROOM: Aabb = Aabb {
    lo: [-2.0, -1.5, -1.0],
    hi: [2.0, 1.5, 6.0],
};

fn slab(origin: [f64; 3], dir: [f64; 3], b: &Aabb) -> (f64, f64, usize, usize) {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let (mut near_axis, mut far_axis) = (0, 0);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < b.lo[a] || origin[a] > b.hi[a] {
                return (f64::INFINITY, f64::NEG_INFINITY, 0, 0);
            }
            continue;
        }
        let t1 = (b.lo[a] - origin[a]) / dir[a];
        let t2 = (b.hi[a] - origin[a]) / dir[a];
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        if lo > t_near {
            t_near = lo;
            near_axis = a;
        }
        if hi < t_far {
            t_far = hi;
            far_axis = a;
        }
    }
    (t_near, t_far, near_axis, far_axis)
}

struct Scene {
    boxes: Vec<Aabb>,
    noise_seed: u64,
}

impl Scene {
    /// Ray parameter of the first hit and the id of the surface hit.
    fn trace(&self, origin: [f64; 3], dir: [f64; 3]) -> (f64, usize) {
        let (_, t_exit, _, axis) = slab(origin, dir, &ROOM);
        let side = if dir[axis] > 0.0 { 1 } else { 0 };
        let mut best = (t_exit, axis * 2 + side);
        for (i, b) in self.boxes.iter().enumerate() {
            let (t0, t1, _, _) = slab(origin, dir, b);
            if t0 <= t1 && t0 > 1e-6 && t0 < best.0 {
                best = (t0, 6 + i);
            }
        }
        best
    }

    fn texture(&self, p: [f64; 3], surface: usize) -> [f64; INPUT_CHANNELS] {
        let mut out = [0.0; INPUT_CHANNELS];
        let tint = ((surface as f64) * 0.618_033_988_75).fract();
        for (c, o) in out.iter_mut().enumerate() {
            let freq = 1.5 + c as f64 * 1.25;
            let n = value_noise(
                [p[0] * freq, p[1] * freq, p[2] * freq],
                self.noise_seed.wrapping_add(c as u64 * 7919),
            );
            *o = if c == INPUT_CHANNELS - 1 {
                tint
            } else {
                0.7 * n + 0.3 * tint
            };
        }
        out
    }
}

fn hash3(x: i64, y: i64, z: i64, seed: u64) -> f64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 29;
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Trilinearly interpolated lattice noise in `[0, 1)`.
fn value_noise(p: [f64; 3], seed: u64) -> f64 {
    let base = [p[0].floor(), p[1].floor(), p[2].floor()];
    let f = [
        smooth(p[0] - base[0]),
        smooth(p[1] - base[1]),
        smooth(p[2] - base[2]),
    ];
    let b = [base[0] as i64, base[1] as i64, base[2] as i64];
    let mut acc = 0.0;
    for corner in 0..8 {
        let d = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut wgt = 1.0;
        for a in 0..3 {
            wgt *= if d[a] == 1 { f[a] } else { 1.0 - f[a] };
        }
        acc += wgt * hash3(b[0] + d[0] as i64, b[1] + d[1] as i64, b[2] + d[2] as i64, seed);
    }
    acc
}

fn quat_normalize(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn quat_axis_angle(axis: [f64; 3], angle: f64) -> [f64; 4] {
    let (s, c) = (angle / 2.0).sin_cos();
    [c, axis[0] * s, axis[1] * s, axis[2] * s]
}

fn slerp(a: [f64; 4], mut b: [f64; 4], t: f64) -> [f64; 4] {
    let mut dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    if dot < 0.0 {
        b = [-b[0], -b[1], -b[2], -b[3]];
        dot = -dot;
    }
    if dot > 0.9995 {
        let q = [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
            a[3] + t * (b[3] - a[3]),
        ];
        return quat_normalize(q);
    }
    let theta = dot.acos();
    let (wa, wb) = (
        ((1.0 - t) * theta).sin() / theta.sin(),
        (t * theta).sin() / theta.sin(),
    );
    quat_normalize([
        wa * a[0] + wb * b[0],
        wa * a[1] + wb * b[1],
        wa * a[2] + wb * b[2],
        wa * a[3] + wb * b[3],
    ])
}

pub fn quat_to_mat(q: [f64; 4]) -> [[f64; 3]; 3] {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

struct Pose {
    q: [f64; 4],
    t: [f64; 3],
}

fn random_pose(rng: &mut ChaCha8Rng, yaw_range: f64, pitch_range: f64) -> Pose {
    let yaw = rng.gen_range(-yaw_range..=yaw_range);
    let pitch = rng.gen_range(-pitch_range..=pitch_range);
    let q = quat_mul(
        quat_axis_angle([0.0, 1.0, 0.0], yaw),
        quat_axis_angle([1.0, 0.0, 0.0], pitch),
    );
    Pose {
        q: quat_normalize(q),
        t: [
            rng.gen_range(-0.6..0.6),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.2..0.6),
        ],
    }
}

/// Generate a clip of `n` frames at `h × w` patch resolution.
pub fn generate_clip(seed: u64, n: usize, h: usize, w: usize) -> Result<ClipSample> {
    if n == 0 || h < 2 || w < 2 {
        return Err(Error::invalid(format!(
            "clip needs n >= 1 and h, w >= 2 (got n={n}, h={h}, w={w})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_boxes = rng.gen_range(1..=3);
    let boxes = (0..n_boxes)
        .map(|_| {
            let c = [
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-0.9..0.9),
                rng.gen_range(2.5..4.5),
            ];
            let s = [
                rng.gen_range(0.3..0.9),
                rng.gen_range(0.3..0.9),
                rng.gen_range(0.3..0.9),
            ];
            Aabb {
                lo: [c[0] - s[0], c[1] - s[1], c[2] - s[2]],
                hi: [c[0] + s[0], c[1] + s[1], c[2] + s[2]],
            }
        })
        .collect();
    let scene = Scene {
        boxes,
        noise_seed: rng.gen(),
    };
    let start = random_pose(&mut rng, 0.15, 0.08);
    let end = random_pose(&mut rng, 0.35, 0.12);
    let focal = w as f64 * rng.gen_range(0.7..0.9);

    let mut frames = Vec::with_capacity(n);
    for i in 0..n {
        let s = if n == 1 {
            0.0
        } else {
            smooth(i as f64 / (n - 1) as f64)
        };
        let q = slerp(start.q, end.q, s);
        let t = [
            start.t[0] + s * (end.t[0] - start.t[0]),
            start.t[1] + s * (end.t[1] - start.t[1]),
            start.t[2] + s * (end.t[2] - start.t[2]),
        ];
        let camera = CameraVector([q[0], q[1], q[2], q[3], t[0], t[1], t[2], focal.ln()]);
        frames.push(render_frame(&scene, &camera, h, w)?);
    }
    Ok(ClipSample { seed, h, w, frames })
}

fn render_frame(scene: &Scene, cam: &CameraVector, h: usize, w: usize) -> Result<Frame> {
    let r = cam.rotation();
    let origin = cam.translation();
    let f = cam.focal();
    let mut image = Vec::with_capacity(h * w * INPUT_CHANNELS);
    let mut depth = Vec::with_capacity(h * w);
    let mut points = Vec::with_capacity(h * w * 3);
    for row in 0..h {
        for col in 0..w {
            let dc = pixel_ray(row, col, h, w, f);
            let dw = [
                r[0][0] * dc[0] + r[0][1] * dc[1] + r[0][2] * dc[2],
                r[1][0] * dc[0] + r[1][1] * dc[1] + r[1][2] * dc[2],
                r[2][0] * dc[0] + r[2][1] * dc[1] + r[2][2] * dc[2],
            ];
            // dc has unit z, so the ray parameter is the z-depth.
            let (t, surface) = scene.trace(origin, dw);
            let p = unproject(row, col, t, h, w, cam);
            let tex = scene.texture(p, surface);
            let shade = 1.0 / (1.0 + 0.1 * t);
            image.extend(tex.iter().map(|v| v * shade));
            depth.push(t);
            points.extend_from_slice(&p);
        }
    }
    Ok(Frame {
        image: Tensor::new(vec![h, w, INPUT_CHANNELS], image)?,
        camera: *cam,
        depth: Tensor::new(vec![h, w], depth)?,
        points: Tensor::new(vec![h, w, 3], points)?,
    })
}

// ----------------------------------------------------------------------
// on-disk layout: directory of little-endian f64 files + manifest.json
// ----------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub camera: [f64; 8],
    pub image: TensorEntry,
    pub depth: TensorEntry,
    pub points: TensorEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub format: String,
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    pub frames: Vec<FrameEntry>,
}

pub const CLIP_FORMAT: &str = "preprune-clip-v1";

fn write_tensor(dir: &Path, name: String, t: &Tensor<f64>) -> Result<TensorEntry> {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(&name), bytes)?;
    Ok(TensorEntry {
        file: name,
        shape: t.shape().to_vec(),
    })
}

fn read_tensor(dir: &Path, e: &TensorEntry) -> Result<Tensor<f64>> {
    let bytes = fs::read(dir.join(&e.file))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::invalid(format!("{} is not a whole number of f64", e.file)));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(e.shape.clone(), data)
}

impl ClipSample {
    /// Write the clip into `dir` (created if missing) and return the manifest.
    pub fn save_dir(&self, dir: &Path) -> Result<ClipManifest> {
        fs::create_dir_all(dir)?;
        let mut frames = Vec::with_capacity(self.frames.len());
        for (i, f) in self.frames.iter().enumerate() {
            frames.push(FrameEntry {
                camera: f.camera.0,
                image: write_tensor(dir, format!("frame{i:03}_image.f64"), &f.image)?,
                depth: write_tensor(dir, format!("frame{i:03}_depth.f64"), &f.depth)?,
                points: write_tensor(dir, format!("frame{i:03}_points.f64"), &f.points)?,
            });
        }
        let manifest = ClipManifest {
            format: CLIP_FORMAT.to_string(),
            seed: self.seed,
            h: self.h,
            w: self.w,
            frames,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest: ClipManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != CLIP_FORMAT {
            return Err(Error::invalid(format!("unknown clip format {:?}", manifest.format)));
        }
        let frames = manifest
            .frames
            .iter()
            .map(|e| {
                Ok(Frame {
                    image: read_tensor(dir, &e.image)?,
                    camera: CameraVector(e.camera),
                    depth: read_tensor(dir, &e.depth)?,
                    points: read_tensor(dir, &e.points)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClipSample {
            seed: manifest.seed,
            h: manifest.h,
            w: manifest.w,
            frames,
        })
    }
}
