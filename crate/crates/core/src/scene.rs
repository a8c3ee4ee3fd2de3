//! Synthetic scenes and the feature maps rendered from them.
//!
//! A scene is a set of ground-truth boxes plus a surround-view pinhole rig.
//! Every object carries a unit-norm "signature" vector; the image renderers
//! splat it into the perspective and BEV maps so that on-object evidence can
//! be identified exactly downstream. The radar branch bins simulated points
//! into a BEV grid with a fixed featurization and a smoothed occupancy
//! heatmap.
//!
//! World frame: x forward, y left, z up, ego at the origin. Camera frame:
//! x right, y down, z along the optical axis.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, GridConfig, GridKind, PvFeatureMap};
use crate::kernel::Matrix;
use crate::scalar::Real;

// Independent RNG streams per consumer of a seed.
const STREAM_SCENE: u64 = 1;
const STREAM_RADAR: u64 = 2;
const STREAM_PV: u64 = 16;
const STREAM_BEV: u64 = 3;
const STREAM_BEV_NOISE: u64 = 5;
const STREAM_RADAR_EMBED: u64 = 4;

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub id: usize,
    /// Box center in meters.
    pub center: [f64; 3],
    /// `(w, l, h)` in meters.
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
    /// Unit-norm identity vector splatted into the image feature maps.
    pub signature: Vec<f64>,
}

impl SceneObject {
    /// BEV corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hw = self.size[0] / 2.0;
        let hl = self.size[1] / 2.0;
        // Length runs along the heading, width across it.
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[a, b]| [self.center[0] + a * c - b * s, self.center[1] + a * s + b * c])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Half-width of the square scene in meters.
    pub extent: f64,
    pub num_objects: usize,
    /// Radar clutter points.
    pub num_clutter: usize,
    pub num_classes: usize,
    pub num_cameras: usize,
    /// Channel width of every rendered feature map and object signature.
    pub feature_dim: usize,
    pub min_separation: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub hfov_deg: f64,
    pub camera_height: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            extent: 51.2,
            num_objects: 30,
            num_clutter: 40,
            num_classes: 10,
            num_cameras: 6,
            feature_dim: 256,
            min_separation: 2.0,
            image_width: 704,
            image_height: 256,
            hfov_deg: 70.0,
            camera_height: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub seed: u64,
    pub config: SceneConfig,
    pub objects: Vec<SceneObject>,
}

/// Pinhole camera. `rotation` maps world directions into the camera frame,
/// `position` is the camera center in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [[f64; 3]; 3],
    pub position: [f64; 3],
}

impl Camera {
    /// Horizontal camera at `height` meters looking along world yaw `yaw`.
    pub fn looking_at_yaw(yaw: f64, height: f64, width: usize, img_height: usize, hfov_deg: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: img_height as f64 / 2.0,
            width,
            height: img_height,
            rotation: [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]],
            position: [0.0, 0.0, height],
        }
    }

    pub fn world_to_camera<T: Real>(&self, p: [T; 3]) -> [T; 3] {
        let d = [
            p[0] - T::of(self.position[0]),
            p[1] - T::of(self.position[1]),
            p[2] - T::of(self.position[2]),
        ];
        self.rotation.map(|r| T::of(r[0]) * d[0] + T::of(r[1]) * d[1] + T::of(r[2]) * d[2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
}

impl CameraRig {
    /// `count` cameras evenly spaced in yaw, the first looking forward.
    pub fn surround(config: &SceneConfig) -> Self {
        let n = config.num_cameras;
        let cameras = (0..n)
            .map(|k| {
                Camera::looking_at_yaw(
                    std::f64::consts::TAU * k as f64 / n as f64,
                    config.camera_height,
                    config.image_width,
                    config.image_height,
                    config.hfov_deg,
                )
            })
            .collect();
        Self { cameras }
    }
}

/// Serialized form of a generated scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDocument {
    pub seed: u64,
    pub config: SceneConfig,
    pub objects: Vec<SceneObject>,
    pub rig: CameraRig,
}

impl SceneDocument {
    pub fn new(scene: &Scene, rig: &CameraRig) -> Self {
        Self {
            seed: scene.seed,
            config: scene.config.clone(),
            objects: scene.objects.clone(),
            rig: rig.clone(),
        }
    }

    pub fn into_parts(self) -> (Scene, CameraRig) {
        (
            Scene {
                seed: self.seed,
                config: self.config,
                objects: self.objects,
            },
            self.rig,
        )
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 10_000;

/// Places `num_objects` boxes uniformly in the extent with a minimum center
/// separation, and builds the surround camera rig.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<(Scene, CameraRig)> {
    if !(config.extent > 0.0) {
        return Err(Error::Config(format!("scene extent must be positive, got {}", config.extent)));
    }
    if config.num_classes == 0 || config.feature_dim == 0 {
        return Err(Error::Config("scene needs at least one class and one feature channel".into()));
    }
    let mut rng = seeded(seed, STREAM_SCENE);
    let e = config.extent;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(config.num_objects);
    for id in 0..config.num_objects {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = rng.gen_range(-e..=e);
            let y = rng.gen_range(-e..=e);
            let clear = objects.iter().all(|o| {
                let dx = o.center[0] - x;
                let dy = o.center[1] - y;
                (dx * dx + dy * dy).sqrt() >= config.min_separation
            });
            if clear {
                placed = Some((x, y));
                break;
            }
        }
        let (x, y) = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place object {id} of {} with {} m separation inside ±{e} m",
                config.num_objects, config.min_separation
            ))
        })?;
        let w = rng.gen_range(1.5..2.5);
        let l = rng.gen_range(3.5..5.0);
        let h = rng.gen_range(1.4..2.0);
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let speed = rng.gen_range(0.0..10.0);
        let class_id = rng.gen_range(0..config.num_classes);
        let signature = unit_vector(&mut rng, config.feature_dim);
        objects.push(SceneObject {
            id,
            center: [x, y, h / 2.0],
            size: [w, l, h],
            yaw,
            velocity: [speed * yaw.cos(), speed * yaw.sin()],
            class_id,
            signature,
        });
    }
    Ok((
        Scene {
            seed,
            config: config.clone(),
            objects,
        },
        CameraRig::surround(config),
    ))
}

pub const MIN_DEPTH: f64 = 0.1;

/// Pinhole projection to `(u, v, depth)`; `None` when the point is closer
/// than [`MIN_DEPTH`] or lands outside the image.
pub fn project_to_view<T: Real>(p: [T; 3], camera: &Camera) -> Option<[T; 3]> {
    let pc = camera.world_to_camera(p);
    let depth = pc[2];
    if !(depth > T::of(MIN_DEPTH)) {
        return None;
    }
    let u = T::of(camera.fx) * pc[0] / depth + T::of(camera.cx);
    let v = T::of(camera.fy) * pc[1] / depth + T::of(camera.cy);
    let inside = u >= T::zero()
        && v >= T::zero()
        && u < T::of_usize(camera.width)
        && v < T::of_usize(camera.height);
    inside.then_some([u, v, depth])
}

/// Inverse of [`project_to_view`] at a known depth.
pub fn back_project<T: Real>(u: T, v: T, depth: T, camera: &Camera) -> [T; 3] {
    let pc = [
        (u - T::of(camera.cx)) / T::of(camera.fx) * depth,
        (v - T::of(camera.cy)) / T::of(camera.fy) * depth,
        depth,
    ];
    let r = &camera.rotation;
    let mut out = [T::zero(); 3];
    for (k, o) in out.iter_mut().enumerate() {
        *o = T::of(r[0][k]) * pc[0] + T::of(r[1][k]) * pc[1] + T::of(r[2][k]) * pc[2]
            + T::of(camera.position[k]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub position: [f64; 3],
    pub velocity: [f64; 2],
    pub rcs: f64,
    pub object_id: Option<usize>,
    pub clutter: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RadarPointCloud {
    pub points: Vec<RadarPoint>,
}

impl RadarPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarConfig {
    pub points_per_object: usize,
    pub pos_noise_sigma: f64,
    pub vel_noise_sigma: f64,
    pub clutter_count: usize,
}

impl Default for RadarConfig {
    fn default() -> Self {
        Self {
            points_per_object: 8,
            pos_noise_sigma: 0.2,
            vel_noise_sigma: 0.2,
            clutter_count: 40,
        }
    }
}

/// The BEV edge of `obj` whose midpoint is nearest the sensor at the origin.
fn near_face(obj: &SceneObject) -> ([f64; 2], [f64; 2]) {
    let c = obj.bev_corners();
    (0..4)
        .map(|k| (c[k], c[(k + 1) % 4]))
        .min_by(|a, b| {
            let m = |(p, q): &([f64; 2], [f64; 2])| {
                let x = (p[0] + q[0]) / 2.0;
                let y = (p[1] + q[1]) / 2.0;
                x * x + y * y
            };
            m(a).total_cmp(&m(b))
        })
        .expect("a box has four edges")
}

/// Returns near-face object returns with Gaussian noise plus uniform clutter.
pub fn simulate_radar_points(scene: &Scene, seed: u64, config: &RadarConfig) -> RadarPointCloud {
    let mut rng = seeded(seed, STREAM_RADAR);
    let pos_noise = Normal::new(0.0, config.pos_noise_sigma.max(0.0)).expect("finite sigma");
    let vel_noise = Normal::new(0.0, config.vel_noise_sigma.max(0.0)).expect("finite sigma");
    let mut points = Vec::with_capacity(scene.objects.len() * config.points_per_object + config.clutter_count);
    for obj in &scene.objects {
        let (a, b) = near_face(obj);
        for _ in 0..config.points_per_object {
            let t: f64 = rng.gen_range(0.0..=1.0);
            let x = a[0] + t * (b[0] - a[0]) + pos_noise.sample(&mut rng);
            let y = a[1] + t * (b[1] - a[1]) + pos_noise.sample(&mut rng);
            points.push(RadarPoint {
                position: [x, y, obj.center[2]],
                velocity: [
                    obj.velocity[0] + vel_noise.sample(&mut rng),
                    obj.velocity[1] + vel_noise.sample(&mut rng),
                ],
                rcs: rng.gen_range(5.0..15.0),
                object_id: Some(obj.id),
                clutter: false,
            });
        }
    }
    let e = scene.config.extent;
    for _ in 0..config.clutter_count {
        points.push(RadarPoint {
            position: [rng.gen_range(-e..=e), rng.gen_range(-e..=e), rng.gen_range(0.0..2.0)],
            velocity: [vel_noise.sample(&mut rng), vel_noise.sample(&mut rng)],
            rcs: rng.gen_range(0.0..5.0),
            object_id: None,
            clutter: true,
        });
    }
    RadarPointCloud { points }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PvRenderConfig {
    /// Image pixels per feature cell.
    pub downsample: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PvRenderConfig {
    fn default() -> Self {
        Self {
            downsample: 16.0,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

pub const PV_SPLAT_SIGMA_CELLS: f64 = 1.5;
pub const BEV_SPLAT_SIGMA_CELLS: f64 = 1.0;

/// Gaussian splat taps `(row, col, weight)` around fractional cell
/// `(fy, fx)`, truncated at three sigma. The weight is one at the center.
fn splat_taps(height: usize, width: usize, sigma: f64, fx: f64, fy: f64) -> Vec<(usize, usize, f64)> {
    let reach = (3.0 * sigma).ceil() as isize;
    let (cx, cy) = (fx.round() as isize, fy.round() as isize);
    let mut taps = Vec::new();
    for r in (cy - reach).max(0)..=(cy + reach).min(height as isize - 1) {
        for c in (cx - reach).max(0)..=(cx + reach).min(width as isize - 1) {
            let d2 = (c as f64 - fx).powi(2) + (r as f64 - fy).powi(2);
            taps.push((r as usize, c as usize, (-d2 / (2.0 * sigma * sigma)).exp()));
        }
    }
    taps
}

fn add_scaled<T: Real>(dst: &mut [T], w: f64, src: &[f64]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += T::of(w * s);
    }
}

fn add_noise<T: Real>(data: &mut [T], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in data {
        *v += T::of(normal.sample(rng));
    }
}

/// Renders one perspective feature map per camera: seeded Gaussian noise
/// plus each visible object's signature splatted at its projected center.
pub fn render_pv_features<T: Real>(
    scene: &Scene,
    rig: &CameraRig,
    config: &PvRenderConfig,
) -> Result<Vec<PvFeatureMap<T>>> {
    let d = scene.config.feature_dim;
    rig.cameras
        .iter()
        .enumerate()
        .map(|(k, cam)| {
            let h = (cam.height as f64 / config.downsample).ceil().max(1.0) as usize;
            let w = (cam.width as f64 / config.downsample).ceil().max(1.0) as usize;
            let mut map = PvFeatureMap::<T>::zeros(k, h, w, d, config.downsample)?;
            let mut rng = seeded(config.seed, STREAM_PV + k as u64);
            let mut noise = vec![T::zero(); h * w * d];
            add_noise(&mut noise, config.noise_sigma, &mut rng);
            for r in 0..h {
                for c in 0..w {
                    let start = (r * w + c) * d;
                    map.cell_mut(r, c).copy_from_slice(&noise[start..start + d]);
                }
            }
            for obj in &scene.objects {
                if let Some([u, v, _]) = project_to_view(obj.center, cam) {
                    let fx = u / config.downsample - 0.5;
                    let fy = v / config.downsample - 0.5;
                    for (r, c, wt) in splat_taps(h, w, PV_SPLAT_SIGMA_CELLS, fx, fy) {
                        add_scaled(map.cell_mut(r, c), wt, &obj.signature);
                    }
                }
            }
            Ok(map)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevRenderConfig {
    pub noise_sigma: f64,
    /// Fraction of objects left out of the image BEV map.
    pub miss_rate: f64,
    pub seed: u64,
}

impl Default for BevRenderConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            miss_rate: 0.2,
            seed: 0,
        }
    }
}

/// Objects dropped from the image BEV map: `round(miss_rate * n)` ids drawn
/// by a seeded choice, sorted ascending.
pub fn missed_objects(scene: &Scene, config: &BevRenderConfig) -> Vec<usize> {
    let n = scene.objects.len();
    let k = ((config.miss_rate.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut rng = seeded(config.seed, STREAM_BEV);
    let mut ids: Vec<usize> = sample_indices(&mut rng, n, k)
        .into_iter()
        .map(|i| scene.objects[i].id)
        .collect();
    ids.sort_unstable();
    ids
}

/// Direct image-BEV synthesis: signatures splatted at object BEV centers
/// over a noise background, with a seeded subset of objects omitted.
/// Returns the grid and the omitted object ids.
pub fn render_image_bev<T: Real>(
    scene: &Scene,
    grid: &GridConfig,
    config: &BevRenderConfig,
) -> Result<(FeatureGrid<T>, Vec<usize>)> {
    let d = scene.config.feature_dim;
    let mut out = FeatureGrid::<T>::zeros(*grid, GridKind::ImgBev, d)?;
    let (h, w) = (out.height(), out.width());
    let missed = missed_objects(scene, config);
    let mut noise = vec![T::zero(); h * w * d];
    add_noise(&mut noise, config.noise_sigma, &mut seeded(config.seed, STREAM_BEV_NOISE));
    for r in 0..h {
        for c in 0..w {
            let start = (r * w + c) * d;
            out.cell_mut(r, c).copy_from_slice(&noise[start..start + d]);
        }
    }
    for obj in &scene.objects {
        if missed.binary_search(&obj.id).is_ok() {
            continue;
        }
        let fx = (obj.center[0] - grid.x_min) / grid.voxel - 0.5;
        let fy = (obj.center[1] - grid.y_min) / grid.voxel - 0.5;
        for (r, c, wt) in splat_taps(h, w, BEV_SPLAT_SIGMA_CELLS, fx, fy) {
            add_scaled(out.cell_mut(r, c), wt, &obj.signature);
        }
    }
    Ok((out, missed))
}

/// Per-cell radar statistics before embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadarCellStats {
    pub count: usize,
    /// Means of `(dx, dy, vx, vy, rcs)`, where `(dx, dy)` is the offset from
    /// the cell center in voxel units.
    pub mean: [f64; 5],
}

impl RadarCellStats {
    /// The fixed featurization that gets linearly embedded.
    pub fn features(&self) -> [f64; RADAR_FEATURES] {
        let [dx, dy, vx, vy, rcs] = self.mean;
        [dx, dy, vx / 10.0, vy / 10.0, rcs / 10.0, (1.0 + self.count as f64).ln()]
    }
}

pub const RADAR_FEATURES: usize = 6;

/// Groups points by cell (row-major) and averages their raw attributes.
/// Points outside the extent are dropped.
pub fn bin_radar_points(points: &RadarPointCloud, grid: &GridConfig) -> Result<Vec<Option<RadarCellStats>>> {
    let (h, w) = grid.dims()?;
    let mut sums = vec![[0.0f64; 5]; h * w];
    let mut counts = vec![0usize; h * w];
    for p in &points.points {
        let Some((r, c)) = grid.cell_of(p.position[0], p.position[1]) else {
            continue;
        };
        let center = grid.cell_center(r, c);
        let idx = r * w + c;
        let s = &mut sums[idx];
        s[0] += (p.position[0] - center[0]) / grid.voxel;
        s[1] += (p.position[1] - center[1]) / grid.voxel;
        s[2] += p.velocity[0];
        s[3] += p.velocity[1];
        s[4] += p.rcs;
        counts[idx] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| {
            (n > 0).then(|| RadarCellStats {
                count: n,
                mean: s.map(|v| v / n as f64),
            })
        })
        .collect())
}

/// Seeded fixed `d x RADAR_FEATURES` embedding used by the radar encoder.
pub fn radar_embedding(d: usize, seed: u64) -> Matrix<f64> {
    let mut rng = seeded(seed, STREAM_RADAR_EMBED);
    let scale = 1.0 / (RADAR_FEATURES as f64).sqrt();
    let data = (0..d * RADAR_FEATURES).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Matrix::from_vec(d, RADAR_FEATURES, data).expect("shape matches")
}

/// Per-cell point counts divided by the maximum count (zero when empty).
pub fn radar_occupancy(points: &RadarPointCloud, grid: &GridConfig) -> Result<Vec<f64>> {
    let cells = bin_radar_points(points, grid)?;
    let max = cells.iter().flatten().map(|s| s.count).max().unwrap_or(0);
    Ok(cells
        .iter()
        .map(|c| match c {
            Some(s) if max > 0 => s.count as f64 / max as f64,
            _ => 0.0,
        })
        .collect())
}

/// Normalized 3x3 Gaussian (sigma one cell).
fn smoothing_kernel() -> [[f64; 3]; 3] {
    let mut k = [[0.0; 3]; 3];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - 1.0).powi(2) + (j as f64 - 1.0).powi(2);
            *v = (-d2 / 2.0).exp();
            total += *v;
        }
    }
    k.map(|row| row.map(|v| v / total))
}

/// Radar BEV encoder: per-cell mean featurization embedded to `d`, and a
/// heatmap of normalized occupancy smoothed by a 3x3 Gaussian, clipped to
/// `[0, 1]`. Clutter is encoded like any other return.
pub fn encode_radar_bev<T: Real>(
    points: &RadarPointCloud,
    grid: &GridConfig,
    d: usize,
    seed: u64,
) -> Result<(FeatureGrid<T>, Vec<T>)> {
    let mut out = FeatureGrid::<T>::zeros(*grid, GridKind::RadBev, d)?;
    let (h, w) = (out.height(), out.width());
    let embed = radar_embedding(d, seed);
    let cells = bin_radar_points(points, grid)?;
    for (idx, stats) in cells.iter().enumerate() {
        if let Some(s) = stats {
            let f = s.features();
            let dst = out.cell_mut(idx / w, idx % w);
            for (o, row) in dst.iter_mut().zip(embed.iter_rows()) {
                *o = T::of(row.iter().zip(&f).map(|(a, b)| a * b).sum());
            }
        }
    }
    let occ = radar_occupancy(points, grid)?;
    let kernel = smoothing_kernel();
    let mut heat = vec![T::zero(); h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (i, krow) in kernel.iter().enumerate() {
                for (j, &kv) in krow.iter().enumerate() {
                    let rr = r as isize + i as isize - 1;
                    let cc = c as isize + j as isize - 1;
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        acc += kv * occ[rr as usize * w + cc as usize];
                    }
                }
            }
            heat[r * w + c] = T::of(acc.clamp(0.0, 1.0));
        }
    }
    Ok((out, heat))
}
