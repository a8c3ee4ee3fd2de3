//! Heterogeneous query initialization: world queries on concentric rings,
//! image queries lifted from 2D proposals, radar queries from heatmap peaks.

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureGrid, PvFeatureMap};
use crate::kernel::Matrix;
use crate::scalar::Real;
use crate::scene::{back_project, project_to_view, seeded, CameraRig, Scene};

const STREAM_WORLD: u64 = 32;
const STREAM_PROPOSALS: u64 = 33;

/// Query type label. Declaration order is the concatenation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QueryType {
    #[serde(rename = "img")]
    Img,
    #[serde(rename = "rad")]
    Rad,
    #[serde(rename = "w")]
    World,
}

impl QueryType {
    pub const ALL: [QueryType; 3] = [QueryType::Img, QueryType::Rad, QueryType::World];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            QueryType::Img => "img",
            QueryType::Rad => "rad",
            QueryType::World => "w",
        }
    }
}

/// Box shape carried by each query between decoder layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxState<T> {
    pub w: T,
    pub l: T,
    pub h: T,
    pub yaw: T,
}

impl<T: Real> BoxState<T> {
    /// `(w, l, h) = (2, 4, 1.5)` m, yaw 0.
    pub fn prior() -> Self {
        Self {
            w: T::of(2.0),
            l: T::of(4.0),
            h: T::of(1.5),
            yaw: T::zero(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet<T> {
    pub embeddings: Matrix<T>,
    /// 3D positions in meters.
    pub positions: Vec<[T; 3]>,
    pub types: Vec<QueryType>,
    pub init_scores: Vec<T>,
    pub boxes: Vec<BoxState<T>>,
    /// Image queries that had to be padded for lack of proposals.
    pub padded: usize,
}

impl<T: Real> QuerySet<T> {
    pub fn empty(d: usize) -> Self {
        Self {
            embeddings: Matrix::zeros(0, d),
            positions: Vec::new(),
            types: Vec::new(),
            init_scores: Vec::new(),
            boxes: Vec::new(),
            padded: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.embeddings.rows() != n
            || self.positions.len() != n
            || self.init_scores.len() != n
            || self.boxes.len() != n
        {
            return Err(Error::Dimension(format!(
                "query set arrays disagree: {} types, {} embeddings, {} positions, {} scores, {} boxes",
                n,
                self.embeddings.rows(),
                self.positions.len(),
                self.init_scores.len(),
                self.boxes.len()
            )));
        }
        Ok(())
    }

    pub fn count(&self, t: QueryType) -> usize {
        self.types.iter().filter(|&&c| c == t).count()
    }

    /// Reorders queries so that new query `k` is old query `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            embeddings: self.embeddings.select_rows(perm),
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            types: perm.iter().map(|&i| self.types[i]).collect(),
            init_scores: perm.iter().map(|&i| self.init_scores[i]).collect(),
            boxes: perm.iter().map(|&i| self.boxes[i]).collect(),
            padded: self.padded,
        }
    }

    pub fn snapshot(&self) -> QuerySnapshot {
        QuerySnapshot {
            types: self.types.clone(),
            positions: self.positions.iter().map(|p| p.map(Real::to_f64_lossy)).collect(),
            scores: self.init_scores.iter().map(|s| s.to_f64_lossy()).collect(),
        }
    }
}

/// Serializable query distribution (types, positions, scores).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySnapshot {
    pub types: Vec<QueryType>,
    pub positions: Vec<[f64; 3]>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RingConfig {
    pub rings: usize,
    pub max_radius: f64,
}

impl Default for RingConfig {
    fn default() -> Self {
        Self {
            rings: 15,
            max_radius: 51.2,
        }
    }
}

/// Queries per ring: proportional to ring radius `k * R_max / R`, rounded
/// by largest remainder so the counts sum to `total`. Remainder ties go to
/// the outer ring.
pub fn ring_counts(total: usize, rings: usize) -> Result<Vec<usize>> {
    if rings == 0 || total < rings {
        return Err(Error::Config(format!(
            "{total} world queries cannot populate {rings} rings"
        )));
    }
    // Radii are proportional to k, so quotas are total * k / sum(k).
    let denom = rings * (rings + 1) / 2;
    let mut counts: Vec<usize> = (1..=rings).map(|k| total * k / denom).collect();
    let mut remainders: Vec<(usize, usize)> = (1..=rings).map(|k| ((total * k) % denom, k - 1)).collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)));
    let assigned: usize = counts.iter().sum();
    for &(_, ring) in remainders.iter().take(total - assigned) {
        counts[ring] += 1;
    }
    Ok(counts)
}

/// World queries on `R` concentric rings with phase offset `k * pi / R` on
/// ring `k`, at `z = 0`, clamped to the extent. Embeddings are seeded
/// normal with standard deviation `1 / sqrt(d)`.
pub fn init_world_queries<T: Real>(
    count: usize,
    extent: f64,
    rings: &RingConfig,
    d: usize,
    seed: u64,
) -> Result<QuerySet<T>> {
    if count == 0 {
        return Err(Error::Config("at least one world query is required".into()));
    }
    let counts = ring_counts(count, rings.rings)?;
    let r_count = rings.rings as f64;
    let mut positions = Vec::with_capacity(count);
    for (idx, &n) in counts.iter().enumerate() {
        let k = (idx + 1) as f64;
        let radius = k * rings.max_radius / r_count;
        let phase = k * std::f64::consts::PI / r_count;
        for j in 0..n {
            let theta = std::f64::consts::TAU * j as f64 / n as f64 + phase;
            let x = (radius * theta.cos()).clamp(-extent, extent);
            let y = (radius * theta.sin()).clamp(-extent, extent);
            positions.push([T::of(x), T::of(y), T::zero()]);
        }
    }
    let mut rng = seeded(seed, STREAM_WORLD);
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite sigma");
    let data = (0..count * d).map(|_| T::of(normal.sample(&mut rng))).collect();
    Ok(QuerySet {
        embeddings: Matrix::from_vec(count, d, data)?,
        positions,
        types: vec![QueryType::World; count],
        init_scores: vec![T::one(); count],
        boxes: vec![BoxState::prior(); count],
        padded: 0,
    })
}

/// One 2D proposal from the oracle pre-detector.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal<T> {
    pub camera: usize,
    pub u: T,
    pub v: T,
    pub score: T,
    pub depth: T,
    pub feature: Vec<T>,
    /// Ground-truth object behind the proposal, `None` for distractors.
    pub object_id: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    pub per_view: usize,
    pub center_noise_px: f64,
    pub depth_noise_sigma: f64,
    pub seed: u64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            per_view: 50,
            center_noise_px: 2.0,
            depth_noise_sigma: 1.0,
            seed: 0,
        }
    }
}

/// Half-width of the uniform jitter added to true-object proposal scores.
pub const PROPOSAL_SCORE_JITTER: f64 = 0.02;
/// Distractor proposals score strictly below this.
pub const DISTRACTOR_SCORE_MAX: f64 = 0.2;

/// Confidence the oracle pre-detector assigns an object at `depth` meters,
/// before jitter.
pub fn proposal_score(depth: f64) -> f64 {
    0.9 * (-depth / 60.0).exp()
}

/// Per-view proposals: visible objects at their (noisy) projected centers,
/// padded with low-score distractors to `per_view` entries.
pub fn generate_2d_proposals<T: Real>(
    scene: &Scene,
    rig: &CameraRig,
    pv_maps: &[PvFeatureMap<T>],
    config: &ProposalConfig,
) -> Result<Vec<Vec<Proposal<T>>>> {
    if pv_maps.len() != rig.cameras.len() {
        return Err(Error::Dimension(format!(
            "{} feature maps for {} cameras",
            pv_maps.len(),
            rig.cameras.len()
        )));
    }
    let mut rng = seeded(config.seed, STREAM_PROPOSALS);
    let px_noise = Normal::new(0.0, config.center_noise_px.max(0.0)).expect("finite sigma");
    let depth_noise = Normal::new(0.0, config.depth_noise_sigma.max(0.0)).expect("finite sigma");
    let mut views = Vec::with_capacity(rig.cameras.len());
    for (k, cam) in rig.cameras.iter().enumerate() {
        let map = &pv_maps[k];
        let (w_px, h_px) = (cam.width as f64, cam.height as f64);
        let mut found: Vec<Proposal<T>> = Vec::new();
        for obj in &scene.objects {
            let Some([u, v, depth]) = project_to_view(obj.center, cam) else {
                continue;
            };
            let u = (u + px_noise.sample(&mut rng)).clamp(0.0, w_px - 1e-6);
            let v = (v + px_noise.sample(&mut rng)).clamp(0.0, h_px - 1e-6);
            let jitter = rng.gen_range(-PROPOSAL_SCORE_JITTER..=PROPOSAL_SCORE_JITTER);
            let score = (proposal_score(depth) + jitter).clamp(0.0, 1.0);
            let noisy_depth = (depth + depth_noise.sample(&mut rng)).max(0.5);
            found.push(Proposal {
                camera: k,
                u: T::of(u),
                v: T::of(v),
                score: T::of(score),
                depth: T::of(noisy_depth),
                feature: map.sample_pixel(T::of(u), T::of(v)),
                object_id: Some(obj.id),
            });
        }
        found.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
        found.truncate(config.per_view);
        while found.len() < config.per_view {
            let u = rng.gen_range(0.0..w_px);
            let v = rng.gen_range(0.0..h_px);
            found.push(Proposal {
                camera: k,
                u: T::of(u),
                v: T::of(v),
                score: T::of(rng.gen_range(0.0..DISTRACTOR_SCORE_MAX)),
                depth: T::of(rng.gen_range(2.0..60.0)),
                feature: map.sample_pixel(T::of(u), T::of(v)),
                object_id: None,
            });
        }
        views.push(found);
    }
    Ok(views)
}

/// Top-`count` proposals across all views by score (ties keep view order),
/// back-projected at their predicted depth. Missing slots are filled with
/// zero-score queries at the origin and counted in `padded`.
pub fn init_image_queries<T: Real>(
    proposals: &[Vec<Proposal<T>>],
    rig: &CameraRig,
    count: usize,
    extent: f64,
    d: usize,
) -> Result<QuerySet<T>> {
    let mut flat: Vec<&Proposal<T>> = proposals.iter().flatten().collect();
    flat.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    flat.truncate(count);
    let mut set = QuerySet::empty(d);
    let mut data = Vec::with_capacity(count * d);
    for p in &flat {
        if p.feature.len() != d {
            return Err(Error::Dimension(format!(
                "proposal feature has {} channels, expected {d}",
                p.feature.len()
            )));
        }
        let cam = rig
            .cameras
            .get(p.camera)
            .ok_or_else(|| Error::Dimension(format!("proposal references camera {}", p.camera)))?;
        let [x, y, z] = back_project(p.u, p.v, p.depth, cam);
        let e = T::of(extent);
        set.positions.push([x.max(-e).min(e), y.max(-e).min(e), z]);
        set.init_scores.push(p.score);
        data.extend_from_slice(&p.feature);
    }
    let padded = count - flat.len();
    data.extend(std::iter::repeat(T::zero()).take(padded * d));
    set.positions.extend(std::iter::repeat([T::zero(); 3]).take(padded));
    set.init_scores.extend(std::iter::repeat(T::zero()).take(padded));
    set.types = vec![QueryType::Img; count];
    set.boxes = vec![BoxState::prior(); count];
    set.embeddings = Matrix::from_vec(count, d, data)?;
    set.padded = padded;
    Ok(set)
}

/// Indices of the `k` largest scores, descending, ties by lower index.
pub fn top_k_indices<T: Real>(scores: &[T], k: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// Radar queries at the top-`count` heatmap cells (ties by row-major
/// index): cell-center positions at `z = 0`, that cell's radar feature as
/// embedding, and the heatmap value as score. Box state stays at the prior.
pub fn init_radar_queries<T: Real>(heatmap: &[T], grid: &FeatureGrid<T>, count: usize) -> Result<QuerySet<T>> {
    let (h, w) = (grid.height(), grid.width());
    if heatmap.len() != h * w {
        return Err(Error::Dimension(format!(
            "heatmap has {} cells, grid has {}",
            heatmap.len(),
            h * w
        )));
    }
    if count > h * w {
        return Err(Error::Config(format!(
            "{count} radar queries requested from {} cells",
            h * w
        )));
    }
    let d = grid.channels();
    let picks = top_k_indices(heatmap, count);
    let mut data = Vec::with_capacity(count * d);
    let mut positions = Vec::with_capacity(count);
    for &idx in &picks {
        let (r, c) = (idx / w, idx % w);
        let [x, y] = grid.config.cell_center(r, c);
        positions.push([T::of(x), T::of(y), T::zero()]);
        data.extend_from_slice(grid.cell(r, c));
    }
    Ok(QuerySet {
        embeddings: Matrix::from_vec(count, d, data)?,
        positions,
        types: vec![QueryType::Rad; count],
        init_scores: picks.iter().map(|&i| heatmap[i]).collect(),
        boxes: vec![BoxState::prior(); count],
        padded: 0,
    })
}

/// Stable concatenation in `(img, rad, w)` order.
pub fn concat_query_sets<T: Real>(image: &QuerySet<T>, radar: &QuerySet<T>, world: &QuerySet<T>) -> Result<QuerySet<T>> {
    let parts = [image, radar, world];
    let d = parts.iter().find(|p| !p.is_empty()).map_or(image.dim(), |p| p.dim());
    let mut out = QuerySet::empty(d);
    let mut data = Vec::new();
    for p in parts {
        p.validate()?;
        if p.is_empty() {
            continue;
        }
        if p.dim() != d {
            return Err(Error::Dimension(format!(
                "cannot concatenate {}-wide and {d}-wide queries",
                p.dim()
            )));
        }
        data.extend_from_slice(p.embeddings.data());
        out.positions.extend_from_slice(&p.positions);
        out.types.extend_from_slice(&p.types);
        out.init_scores.extend_from_slice(&p.init_scores);
        out.boxes.extend_from_slice(&p.boxes);
        out.padded += p.padded;
    }
    out.embeddings = Matrix::from_vec(out.types.len(), d, data)?;
    Ok(out)
}
