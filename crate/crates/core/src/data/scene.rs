//! Procedural ray-cast scenes: a ground plane, a back wall and a handful of
//! boxes and cylinders, rendered from one or two rectified cameras.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::StereoRig;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Focal length in pixels; `None` uses `width / 2`.
    pub focal_px: Option<f64>,
    pub baseline_m: f64,
    pub camera_height_m: f64,
    pub stereo: bool,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl SceneConfig {
    pub fn new(height: usize, width: usize) -> Self {
        SceneConfig {
            height,
            width,
            d_min: 1.0,
            d_max: 80.0,
            focal_px: None,
            baseline_m: 0.5,
            camera_height_m: 1.6,
            stereo: true,
            min_objects: 2,
            max_objects: 6,
        }
    }

    pub fn focal(&self) -> f64 {
        self.focal_px.unwrap_or(self.width as f64 / 2.0)
    }

    pub fn rig(&self) -> Result<StereoRig> {
        StereoRig::new(self.focal(), self.baseline_m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "scene extent {}x{} is empty",
                self.height, self.width
            )));
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min * 8.0) || !self.d_max.is_finite() {
            return Err(Error::invalid(format!(
                "depth range ({}, {}) is degenerate",
                self.d_min, self.d_max
            )));
        }
        if !(self.focal() > 0.0) || !(self.baseline_m > 0.0) || !(self.camera_height_m > 0.0) {
            return Err(Error::invalid(
                "focal length, baseline and camera height must be positive",
            ));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::invalid("min_objects exceeds max_objects"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// (1, 3, H, W), values in [0, 1].
    pub image: Tensor,
    /// (1, 1, H, W), meters; strictly positive wherever the depth is valid.
    pub depth: Tensor,
    /// 0/1 map of pixels with known depth; `None` means every pixel.
    pub depth_validity: Option<Tensor>,
    pub stereo_image: Option<Tensor>,
    pub rig: Option<StereoRig>,
    /// `image(x) ≈ stereo_image(x + warp_sign·F·B/depth(x))`.
    pub warp_sign: f64,
    /// 1 where the pixel is seen unoccluded in the second view and is not on a
    /// depth edge. For tests only; no loss uses it.
    pub visibility: Option<Tensor>,
    pub seed: u64,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.depth.shape().h
    }

    pub fn width(&self) -> usize {
        self.depth.shape().w
    }

    /// The depth validity map, materialised.
    pub fn validity(&self) -> Tensor {
        self.depth_validity
            .clone()
            .unwrap_or_else(|| Tensor::ones(self.depth.shape()))
    }
}

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Clone, Debug)]
enum Shape3 {
    /// y = height (y points down).
    Ground(f64),
    /// z = distance.
    Wall(f64),
    Box {
        lo: V3,
        hi: V3,
    },
    Cylinder {
        cx: f64,
        cz: f64,
        r: f64,
        top: f64,
        bottom: f64,
    },
}

#[derive(Clone, Debug)]
struct Surface {
    shape: Shape3,
    albedo: V3,
    /// Plane waves (direction, angular frequency in pixels at `ref_depth`, phase, amplitude).
    waves: Vec<(V3, f64, f64, f64)>,
    /// Depth at which the texture frequency is specified; `None` means the hit depth.
    ref_depth: Option<f64>,
}

struct Hit {
    t: f64,
    normal: V3,
    surface: usize,
}

impl Surface {
    fn intersect(&self, o: V3, d: V3) -> Option<(f64, V3)> {
        const EPS: f64 = 1e-9;
        match self.shape {
            Shape3::Ground(h) => {
                let t = (h - o[1]) / d[1];
                (d[1] > EPS && t > EPS).then_some((t, [0.0, -1.0, 0.0]))
            }
            Shape3::Wall(z) => {
                let t = (z - o[2]) / d[2];
                (t > EPS).then_some((t, [0.0, 0.0, -1.0]))
            }
            Shape3::Box { lo, hi } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut normal = [0.0; 3];
                for a in 0..3 {
                    if d[a].abs() < EPS {
                        if o[a] < lo[a] || o[a] > hi[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
                    let mut n = [0.0; 3];
                    n[a] = -d[a].signum();
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        normal = n;
                    }
                    t1 = t1.min(tb);
                }
                (t0 <= t1 && t0 > EPS).then_some((t0, normal))
            }
            Shape3::Cylinder {
                cx,
                cz,
                r,
                top,
                bottom,
            } => {
                let mut best: Option<(f64, V3)> = None;
                let (px, pz) = (o[0] - cx, o[2] - cz);
                let a = d[0] * d[0] + d[2] * d[2];
                let b = 2.0 * (px * d[0] + pz * d[2]);
                let c = px * px + pz * pz - r * r;
                let disc = b * b - 4.0 * a * c;
                if a > EPS && disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    let y = o[1] + t * d[1];
                    if t > EPS && y >= top && y <= bottom {
                        let n = normalize([px + t * d[0], 0.0, pz + t * d[2]]);
                        best = Some((t, n));
                    }
                }
                // top cap, visible from above
                if d[1].abs() > EPS {
                    let t = (top - o[1]) / d[1];
                    let (x, z) = (o[0] + t * d[0] - cx, o[2] + t * d[2] - cz);
                    if t > EPS
                        && o[1] < top
                        && x * x + z * z <= r * r
                        && best.is_none_or(|(bt, _)| t < bt)
                    {
                        best = Some((t, [0.0, -1.0, 0.0]));
                    }
                }
                best
            }
        }
    }

    fn texture(&self, p: V3, focal: f64) -> f64 {
        let z = self.ref_depth.unwrap_or(p[2]).max(1e-6);
        let k = focal / z;
        let mut v = 0.0;
        for &(dir, w, phase, amp) in &self.waves {
            v += amp * (w * k * dot(dir, p) + phase).sin();
        }
        v
    }
}

struct World {
    surfaces: Vec<Surface>,
    light: V3,
}

impl World {
    fn cast(&self, o: V3, d: V3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, s) in self.surfaces.iter().enumerate() {
            if let Some((t, normal)) = s.intersect(o, d) {
                if best.as_ref().is_none_or(|b| t < b.t) {
                    best = Some(Hit {
                        t,
                        normal,
                        surface: i,
                    });
                }
            }
        }
        best
    }

    fn shade(&self, hit: &Hit, o: V3, d: V3, focal: f64) -> V3 {
        let s = &self.surfaces[hit.surface];
        let p = [
            o[0] + hit.t * d[0],
            o[1] + hit.t * d[1],
            o[2] + hit.t * d[2],
        ];
        let tex = 0.65 + 0.35 * s.texture(p, focal).clamp(-1.0, 1.0);
        let light = 0.4 + 0.6 * dot(hit.normal, self.light).max(0.0);
        let mut c = [0.0; 3];
        for (ch, a) in c.iter_mut().zip(s.albedo) {
            *ch = (a * tex * light).clamp(0.0, 1.0);
        }
        c
    }
}

fn random_surface(rng: &mut ChaCha8Rng, shape: Shape3, ref_depth: Option<f64>) -> Surface {
    let albedo = [
        rng.gen_range(0.25..1.0),
        rng.gen_range(0.25..1.0),
        rng.gen_range(0.25..1.0),
    ];
    let waves = (0..3)
        .map(|_| {
            let dir = normalize([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            // period of 8-20 pixels
            let w = std::f64::consts::TAU / rng.gen_range(8.0..20.0);
            (
                dir,
                w,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.3..0.6),
            )
        })
        .collect();
    Surface {
        shape,
        albedo,
        waves,
        ref_depth,
    }
}

fn build_world(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> World {
    let h = cfg.camera_height_m;
    let f = cfg.focal();
    let z_near = (cfg.d_min * 4.0).max(4.0);
    let z_far = (cfg.d_max * 0.4).min(30.0).max(z_near + 1.0);
    let wall = rng.gen_range(0.55..0.85) * cfg.d_max;
    let mut surfaces = vec![
        random_surface(rng, Shape3::Ground(h), None),
        random_surface(rng, Shape3::Wall(wall), None),
    ];
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let half_fov = cfg.width as f64 / 2.0 / f;
    for _ in 0..n {
        let u: f64 = rng.gen();
        let z = z_near + (z_far - z_near) * u * u;
        let x = rng.gen_range(-0.8..0.8) * half_fov * z;
        let size = rng.gen_range(0.8..3.0);
        let top = h - rng.gen_range(0.8..4.0);
        let shape = if rng.gen_bool(0.5) {
            let depth = rng.gen_range(0.8..3.0);
            Shape3::Box {
                lo: [x - size / 2.0, top, z],
                hi: [x + size / 2.0, h, z + depth],
            }
        } else {
            Shape3::Cylinder {
                cx: x,
                cz: z + size / 2.0,
                r: size / 2.0,
                top,
                bottom: h,
            }
        };
        surfaces.push(random_surface(rng, shape, Some(z)));
    }
    let light = normalize([rng.gen_range(-0.5..0.5), -1.0, rng.gen_range(-0.8..-0.2)]);
    World { surfaces, light }
}

struct View {
    image: Tensor,
    depth: Tensor,
}

/// Renders from a camera at `(cam_x, 0, 0)`: colour averaged over 2×2
/// subsamples, depth from the pixel-centre ray.
fn render(world: &World, cfg: &SceneConfig, cam_x: f64) -> Result<View> {
    let (hgt, wid) = (cfg.height, cfg.width);
    let f = cfg.focal();
    let (cx, cy) = (wid as f64 / 2.0, hgt as f64 / 2.0);
    let o = [cam_x, 0.0, 0.0];
    let ray = |u: f64, v: f64| [(u - cx) / f, (v - cy) / f, 1.0];
    let mut image = Tensor::zeros(Shape::new(1, 3, hgt, wid));
    let mut depth = Tensor::zeros(Shape::new(1, 1, hgt, wid));
    for y in 0..hgt {
        for x in 0..wid {
            let d = ray(x as f64 + 0.5, y as f64 + 0.5);
            let hit = world
                .cast(o, d)
                .ok_or_else(|| Error::invalid("ray escaped the scene"))?;
            depth.set(0, 0, y, x, hit.t);
            let mut c = [0.0; 3];
            for sy in [0.25, 0.75] {
                for sx in [0.25, 0.75] {
                    let d = ray(x as f64 + sx, y as f64 + sy);
                    if let Some(hit) = world.cast(o, d) {
                        let s = world.shade(&hit, o, d, f);
                        for k in 0..3 {
                            c[k] += s[k] / 4.0;
                        }
                    }
                }
            }
            for (k, v) in c.iter().enumerate() {
                image.set(0, k, y, x, *v);
            }
        }
    }
    Ok(View { image, depth })
}

fn visibility(depth: &Tensor, second_depth: &Tensor, fb: f64, sign: f64) -> Tensor {
    let s = depth.shape();
    let consistent = |a: f64, b: f64| (a - b).abs() <= 0.02 * a.min(b);
    Tensor::from_fn(s, |_, _, y, x| {
        let z = depth.at(0, 0, y, x);
        let neighbours_ok = (x.saturating_sub(1)..=(x + 1).min(s.w - 1))
            .all(|xx| consistent(z, depth.at(0, 0, y, xx)));
        let u = x as f64 + sign * fb / z;
        if !neighbours_ok || u < 0.0 || u > (s.w - 1) as f64 {
            return 0.0;
        }
        let x0 = u.floor() as usize;
        let x1 = (x0 + 1).min(s.w - 1);
        if consistent(z, second_depth.at(0, 0, y, x0))
            && consistent(z, second_depth.at(0, 0, y, x1))
        {
            1.0
        } else {
            0.0
        }
    })
}

/// Deterministic scene for `seed`. The second camera sits at `x = −B`, so the
/// first view satisfies `I(x) = I′(x + F·B/d(x))` away from occlusions.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = build_world(cfg, &mut rng);
    let first = render(&world, cfg, 0.0)?;
    let (lo, hi) = (first.depth.min(), first.depth.max());
    if !(lo > cfg.d_min && hi < cfg.d_max) {
        return Err(Error::invalid(format!(
            "rendered depth range [{lo}, {hi}] leaves ({}, {})",
            cfg.d_min, cfg.d_max
        )));
    }
    let (stereo_image, rig, vis) = if cfg.stereo {
        let rig = cfg.rig()?;
        let second = render(&world, cfg, -cfg.baseline_m)?;
        let vis = visibility(&first.depth, &second.depth, rig.fb(), 1.0);
        (Some(second.image), Some(rig), Some(vis))
    } else {
        (None, None, None)
    };
    Ok(Scene {
        image: first.image,
        depth: first.depth,
        depth_validity: None,
        stereo_image,
        rig,
        warp_sign: 1.0,
        visibility: vis,
        seed,
    })
}

/// Seed of scene `index` in a dataset generated from `base`.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64)
}

/// Scenes `0..count` of the dataset with seed `base`.
pub fn generate_dataset(base: u64, count: usize, cfg: &SceneConfig) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| generate_scene(scene_seed(base, i), cfg))
        .collect()
}
