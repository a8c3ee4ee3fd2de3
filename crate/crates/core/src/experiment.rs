//! End-to-end runs: scene rendering, query initialization, decoding,
//! evaluation, and the versioned run report.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::decoder::{decode, DecoderConfig, DecoderWeights, LayerOutput, QmixPlacement, SceneFeatures};
use crate::error::{Error, Result};
use crate::grid::{GridConfig, GridKind};
use crate::metrics::{average_precision, match_detections, translation_orientation_errors, Detection, CENTER_THRESHOLDS};
use crate::qinit::{
    concat_query_sets, generate_2d_proposals, init_image_queries, init_radar_queries, init_world_queries,
    ProposalConfig, QuerySet, QuerySnapshot, QueryType, RingConfig,
};
use crate::qmix::{extract_top_links, CrossTypeLink, TypeAttentionStats, LINKS_PER_QUERY, LINK_CONFIDENCE_THRESHOLD};
use crate::qswap::{sample_records, SampleOrigin, SampleRecord, SwapMode};
use crate::scalar::Real;
use crate::scene::{
    encode_radar_bev, generate_scene, render_image_bev, render_pv_features, simulate_radar_points, BevRenderConfig,
    CameraRig, PvRenderConfig, RadarConfig, Scene, SceneConfig, SceneObject,
};
use crate::weights::{init_weights, load_weights};

pub const REPORT_SCHEMA: &str = "hetquery.run-report";
pub const REPORT_VERSION: u32 = 1;
pub const UNTRAINED_NOTE: &str = "Decoder weights are random and untrained. Detection metrics only exercise the \
pipeline and are not comparable to trained detector results.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryCounts {
    pub world: usize,
    pub image: usize,
    pub radar: usize,
}

impl Default for QueryCounts {
    fn default() -> Self {
        Self {
            world: 450,
            image: 225,
            radar: 225,
        }
    }
}

impl QueryCounts {
    pub fn total(&self) -> usize {
        self.world + self.image + self.radar
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Drives the scene and every rendering stage (on separate streams).
    pub scene: u64,
    pub weights: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmitFlags {
    pub attn_stats: bool,
    pub links: bool,
    pub query_snapshots: bool,
    pub sample_dumps: bool,
}

impl Default for EmitFlags {
    fn default() -> Self {
        Self {
            attn_stats: true,
            links: true,
            query_snapshots: false,
            sample_dumps: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub report: Option<String>,
    pub timing: Option<String>,
}

/// Full configuration of one run. The `seed` fields of the rendering
/// sub-configs are overwritten with `seeds.scene`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub radar: RadarConfig,
    pub pv: PvRenderConfig,
    pub bev: BevRenderConfig,
    pub proposals: ProposalConfig,
    pub rings: RingConfig,
    pub voxel: f64,
    pub queries: QueryCounts,
    pub decoder: DecoderConfig,
    pub seeds: Seeds,
    /// Load decoder weights from a `.cfw` file instead of seeding them.
    pub weights_path: Option<String>,
    pub output: OutputPaths,
    pub emit: EmitFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            radar: RadarConfig::default(),
            pv: PvRenderConfig::default(),
            bev: BevRenderConfig::default(),
            proposals: ProposalConfig::default(),
            rings: RingConfig::default(),
            voxel: 0.8,
            queries: QueryCounts::default(),
            decoder: DecoderConfig::default(),
            seeds: Seeds::default(),
            weights_path: None,
            output: OutputPaths::default(),
            emit: EmitFlags::default(),
        }
    }
}

pub const PRESETS: [&str; 16] = [
    "paper-default",
    "desk",
    "table3-qinit",
    "table3-qmix",
    "table3-qmix-qswap",
    "table4-750",
    "table4-300-300-300",
    "table4-450-225-225",
    "table4-1050",
    "table5-pre-agg",
    "table5-post-self",
    "table5-post-self-cross",
    "table5-post-agg",
    "table6-base24",
    "table6-replace",
    "table6-fixed-radius",
];

fn with_components(qmix: bool, qswap: bool) -> RunConfig {
    let mut c = RunConfig::default();
    c.decoder.enable_qmix = qmix;
    c.decoder.enable_qswap = qswap;
    c
}

fn with_counts(world: usize, image: usize, radar: usize) -> RunConfig {
    let mut c = with_components(true, false);
    c.queries = QueryCounts { world, image, radar };
    c
}

fn with_placement(p: QmixPlacement) -> RunConfig {
    let mut c = with_components(true, false);
    c.decoder.qmix_placement = p;
    c
}

impl RunConfig {
    /// Named configurations. `desk` is a reduced-width variant for quick
    /// experiments; the table presets mirror the ablation rows.
    pub fn preset(name: &str) -> Result<RunConfig> {
        let c = match name {
            "paper-default" | "table3-qmix-qswap" => RunConfig::default(),
            "desk" => {
                let mut c = RunConfig::default();
                c.scene.feature_dim = 64;
                c.decoder.d = 64;
                c
            }
            "table3-qinit" => with_components(false, false),
            "table3-qmix" => with_components(true, false),
            "table4-750" => with_counts(450, 150, 150),
            "table4-300-300-300" => with_counts(300, 300, 300),
            "table4-450-225-225" => with_counts(450, 225, 225),
            "table4-1050" => with_counts(600, 225, 225),
            "table5-pre-agg" => with_placement(QmixPlacement::PreAgg),
            "table5-post-self" => with_placement(QmixPlacement::PostSelf),
            "table5-post-self-cross" => with_placement(QmixPlacement::PostSelfCross),
            "table5-post-agg" => with_placement(QmixPlacement::PostAgg),
            "table6-base24" => {
                let mut c = with_components(true, false);
                c.decoder.qswap.k_base = 24;
                c
            }
            "table6-replace" => {
                let mut c = RunConfig::default();
                c.decoder.qswap.mode = SwapMode::Replace;
                c
            }
            "table6-fixed-radius" => {
                let mut c = RunConfig::default();
                c.decoder.qswap.fixed_radius = Some(5.0);
                c
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; known presets: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(c)
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// Applies `a.b.c=value` overrides. Values parse as JSON and fall back to
    /// plain strings; unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<RunConfig> {
        let mut tree = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut tree, path, value)?;
        }
        let c: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("bad override: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.decoder.d != self.scene.feature_dim {
            return Err(Error::Config(format!(
                "decoder width {} differs from feature width {}",
                self.decoder.d, self.scene.feature_dim
            )));
        }
        if self.decoder.num_classes != self.scene.num_classes {
            return Err(Error::Config(format!(
                "decoder has {} classes, scene has {}",
                self.decoder.num_classes, self.scene.num_classes
            )));
        }
        if self.decoder.extent != self.scene.extent {
            return Err(Error::Config(format!(
                "decoder extent {} differs from scene extent {}",
                self.decoder.extent, self.scene.extent
            )));
        }
        if self.queries.total() == 0 {
            return Err(Error::Config("at least one query is required".into()));
        }
        GridConfig::square(self.scene.extent, self.voxel).dims()?;
        Ok(())
    }

    pub fn grid(&self) -> GridConfig {
        GridConfig::square(self.scene.extent, self.voxel)
    }
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {part} is not inside an object")))?;
        if k + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("unknown config key {path}")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {path}")))?;
    }
    Err(Error::Config("empty override key".into()))
}

/// Rendered inputs and initial queries for one scene.
#[derive(Clone, Debug)]
pub struct PreparedScene<T> {
    pub scene: Scene,
    pub features: SceneFeatures<T>,
    pub queries: QuerySet<T>,
    pub radar_points: usize,
    pub missed_in_image_bev: Vec<usize>,
}

pub fn prepare_scene<T: Real>(config: &RunConfig) -> Result<PreparedScene<T>> {
    config.validate()?;
    let seed = config.seeds.scene;
    let d = config.decoder.d;
    let extent = config.scene.extent;
    let grid = config.grid();
    let (scene, rig) = generate_scene(seed, &config.scene)?;
    let pv = render_pv_features::<T>(&scene, &rig, &PvRenderConfig { seed, ..config.pv.clone() })?;
    let (img_bev, missed) = render_image_bev::<T>(&scene, &grid, &BevRenderConfig { seed, ..config.bev.clone() })?;
    let radar = simulate_radar_points(&scene, seed, &config.radar);
    let (rad_bev, heatmap) = encode_radar_bev::<T>(&radar, &grid, d, seed)?;
    let proposals = generate_2d_proposals(&scene, &rig, &pv, &ProposalConfig { seed, ..config.proposals.clone() })?;
    let image = init_image_queries(&proposals, &rig, config.queries.image, extent, d)?;
    let radar_q = init_radar_queries(&heatmap, &rad_bev, config.queries.radar)?;
    let world = init_world_queries(config.queries.world, extent, &config.rings, d, seed)?;
    let queries = concat_query_sets(&image, &radar_q, &world)?;
    Ok(PreparedScene {
        scene,
        features: SceneFeatures {
            img_bev,
            rad_bev,
            pv,
            rig,
        },
        queries,
        radar_points: radar.points.len(),
        missed_in_image_bev: missed,
    })
}

pub fn run_weights<T: Real>(config: &RunConfig) -> Result<DecoderWeights<T>> {
    match &config.weights_path {
        Some(path) => load_weights(std::path::Path::new(path), &config.decoder),
        None => init_weights(config.seeds.weights, &config.decoder),
    }
}

/// One detection per query: the highest-scoring class and its box.
pub fn layer_detections<T: Real>(layer: &LayerOutput<T>) -> Vec<Detection> {
    layer
        .class_scores
        .iter_rows()
        .zip(&layer.boxes)
        .map(|(scores, b)| {
            let (class_id, conf) = scores
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (c, &s)| if s > best.1 { (c, s) } else { best });
            Detection {
                center: [b.center[0].to_f64_lossy(), b.center[1].to_f64_lossy()],
                size: b.size.map(|v| v.to_f64_lossy()),
                yaw: b.yaw.to_f64_lossy(),
                class_id,
                confidence: conf.to_f64_lossy().clamp(0.0, 1.0),
            }
        })
        .collect()
}

pub fn ground_truth(objects: &[SceneObject]) -> Vec<Detection> {
    objects
        .iter()
        .map(|o| Detection {
            center: [o.center[0], o.center[1]],
            size: o.size,
            yaw: o.yaw,
            class_id: o.class_id,
            confidence: 1.0,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub map_center: f64,
    pub thresholds: Vec<f64>,
    /// Class-averaged AP per threshold.
    pub ap_by_threshold: Vec<f64>,
    /// Translation and orientation errors at the 2 m threshold.
    pub ate: f64,
    pub aoe: f64,
    pub matches: usize,
}

pub const ERROR_THRESHOLD: f64 = 2.0;

pub fn evaluate(preds: &[Detection], gts: &[Detection]) -> Result<DetectionMetrics> {
    let ap = average_precision(preds, gts, &CENTER_THRESHOLDS)?;
    let ap_by_threshold = (0..CENTER_THRESHOLDS.len())
        .map(|t| {
            if ap.per_class.is_empty() {
                0.0
            } else {
                ap.per_class.iter().map(|c| c.ap[t]).sum::<f64>() / ap.per_class.len() as f64
            }
        })
        .collect();
    let matched = match_detections(preds, gts, ERROR_THRESHOLD)?;
    let (ate, aoe) = translation_orientation_errors(&matched.matches, preds, gts);
    Ok(DetectionMetrics {
        map_center: ap.map,
        thresholds: CENTER_THRESHOLDS.to_vec(),
        ap_by_threshold,
        ate,
        aoe,
        matches: matched.matches.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSizeSummary {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub metrics: DetectionMetrics,
    /// Indexed like `GridKind::ALL`.
    pub sample_set_sizes: Vec<SetSizeSummary>,
    pub shared_points: usize,
    pub self_attn_stats: Option<TypeAttentionStats>,
    pub qmix_stats: Option<TypeAttentionStats>,
    /// Total attention on same-type off-diagonal pairs after QMix.
    pub qmix_same_type_mass: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub objects: usize,
    pub radar_points: usize,
    pub missed_in_image_bev: Vec<usize>,
    pub grid: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub version: u32,
    pub note: String,
    pub config: RunConfig,
    pub scene: SceneSummary,
    pub query_counts: [usize; 3],
    pub layers: Vec<LayerReport>,
    pub final_metrics: DetectionMetrics,
    /// Query types and positions after the last layer.
    pub final_queries: QuerySnapshot,
    /// Cross-type links from the last layer's QMix attention.
    pub links: Option<Vec<CrossTypeLink>>,
    /// Initial distribution followed by one snapshot per layer.
    pub snapshots: Option<Vec<QuerySnapshot>>,
    /// Per layer, every sample point of every query.
    pub sample_dumps: Option<Vec<Vec<SampleRecord>>>,
}

/// Wall-clock seconds per stage. Kept out of the report so reports stay
/// byte-identical across runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: Vec<(String, f64)>,
}

impl Timing {
    fn record(&mut self, name: &str, start: Instant) {
        self.stages.push((name.to_string(), start.elapsed().as_secs_f64()));
    }

    pub fn total(&self) -> f64 {
        self.stages.iter().map(|s| s.1).sum()
    }
}

fn same_type_offdiag_mass<T: Real>(attn: &crate::kernel::Matrix<T>, types: &[QueryType]) -> f64 {
    let mut total = 0.0;
    for (i, ti) in types.iter().enumerate() {
        for (j, tj) in types.iter().enumerate() {
            if i != j && ti == tj {
                total += attn.get(i, j).to_f64_lossy();
            }
        }
    }
    total
}

fn set_sizes<T: Real>(layer: &LayerOutput<T>) -> Vec<SetSizeSummary> {
    GridKind::ALL
        .iter()
        .map(|g| {
            let sizes: Vec<usize> = layer.sample_sets.iter().map(|s| s[g.index()].len()).collect();
            SetSizeSummary {
                min: sizes.iter().copied().min().unwrap_or(0),
                max: sizes.iter().copied().max().unwrap_or(0),
                mean: sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64,
            }
        })
        .collect()
}

fn snapshot<T: Real>(types: &[QueryType], positions: &[[T; 3]], scores: Vec<f64>) -> QuerySnapshot {
    QuerySnapshot {
        types: types.to_vec(),
        positions: positions.iter().map(|p| p.map(|v| v.to_f64_lossy())).collect(),
        scores,
    }
}

/// Builds the report for decoded layers of a prepared scene.
pub fn build_report<T: Real>(
    config: &RunConfig,
    prepared: &PreparedScene<T>,
    layers: &[LayerOutput<T>],
) -> Result<RunReport> {
    let gts = ground_truth(&prepared.scene.objects);
    let types = &prepared.queries.types;
    let mut reports = Vec::with_capacity(layers.len());
    let mut snapshots = vec![prepared.queries.snapshot()];
    let mut dumps = Vec::new();
    let mut positions_in = prepared.queries.positions.clone();
    for (k, layer) in layers.iter().enumerate() {
        let preds = layer_detections(layer);
        reports.push(LayerReport {
            layer: k,
            metrics: evaluate(&preds, &gts)?,
            sample_set_sizes: set_sizes(layer),
            shared_points: layer.shared_points(),
            self_attn_stats: config.emit.attn_stats.then_some(layer.self_stats),
            qmix_stats: if config.emit.attn_stats { layer.qmix_stats } else { None },
            qmix_same_type_mass: layer.qmix_attn.as_ref().map(|a| same_type_offdiag_mass(a, types)),
        });
        if config.emit.query_snapshots {
            snapshots.push(snapshot(types, &layer.positions, preds.iter().map(|p| p.confidence).collect()));
        }
        if config.emit.sample_dumps {
            let mut records = Vec::new();
            for (sets, pos) in layer.sample_sets.iter().zip(&positions_in) {
                for set in sets {
                    records.extend(sample_records(set, *pos));
                }
            }
            dumps.push(records);
        }
        positions_in = layer.positions.clone();
    }
    let last = layers.last().ok_or_else(|| Error::Config("no decoder layers ran".into()))?;
    let final_preds = layer_detections(last);
    let confidences: Vec<f64> = final_preds.iter().map(|p| p.confidence).collect();
    let links = match (&last.qmix_attn, config.emit.links) {
        (Some(attn), true) => Some(extract_top_links(
            attn,
            types,
            &last.confidences(),
            LINK_CONFIDENCE_THRESHOLD,
            LINKS_PER_QUERY,
        )?),
        _ => None,
    };
    let grid = config.grid().dims()?;
    Ok(RunReport {
        schema: REPORT_SCHEMA.into(),
        version: REPORT_VERSION,
        note: UNTRAINED_NOTE.into(),
        config: config.clone(),
        scene: SceneSummary {
            objects: prepared.scene.objects.len(),
            radar_points: prepared.radar_points,
            missed_in_image_bev: prepared.missed_in_image_bev.clone(),
            grid: [grid.0, grid.1],
        },
        query_counts: QueryType::ALL.map(|t| prepared.queries.count(t)),
        final_metrics: reports.last().map(|r| r.metrics.clone()).expect("at least one layer"),
        layers: reports,
        final_queries: snapshot(types, &last.positions, confidences),
        links,
        snapshots: config.emit.query_snapshots.then_some(snapshots),
        sample_dumps: config.emit.sample_dumps.then_some(dumps),
    })
}

/// Full run in `T` precision.
pub fn run_experiment<T: Real>(config: &RunConfig) -> Result<(RunReport, Timing)> {
    config.validate()?;
    let mut timing = Timing::default();
    let t = Instant::now();
    let prepared = prepare_scene::<T>(config)?;
    timing.record("prepare", t);
    let t = Instant::now();
    let weights = run_weights::<T>(config)?;
    timing.record("weights", t);
    let t = Instant::now();
    let layers = decode(&prepared.features, &prepared.queries, &weights, &config.decoder)?;
    timing.record("decode", t);
    let t = Instant::now();
    let report = build_report(config, &prepared, &layers)?;
    timing.record("report", t);
    Ok((report, timing))
}

/// Serialized report bytes (pretty JSON plus trailing newline).
pub fn report_json(report: &RunReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Header of the attention-statistics CSV.
pub const ATTN_CSV_HEADER: &str = "layer,attention,source_type,target_type,mass,mean_per_key";

/// Per layer, the 3x3 type-to-type mass and mean-per-key for the shared
/// self-attention and for QMix.
pub fn attention_csv(report: &RunReport) -> Result<String> {
    let mut out = String::from(ATTN_CSV_HEADER);
    out.push('\n');
    let mut rows = 0;
    for layer in &report.layers {
        for (name, stats) in [("self", layer.self_attn_stats), ("qmix", layer.qmix_stats)] {
            let Some(s) = stats else { continue };
            for a in QueryType::ALL {
                for b in QueryType::ALL {
                    out.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        layer.layer,
                        name,
                        a.name(),
                        b.name(),
                        s.mass[a.index()][b.index()],
                        s.mean_per_key[a.index()][b.index()]
                    ));
                    rows += 1;
                }
            }
        }
    }
    if rows == 0 {
        return Err(Error::Config("report carries no attention statistics (emit.attn_stats was off)".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkEndpoint {
    pub index: usize,
    pub query_type: QueryType,
    pub position: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub source: LinkEndpoint,
    pub target: LinkEndpoint,
    pub weight: f64,
    pub source_confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkDocument {
    pub note: String,
    pub threshold: f64,
    pub per_query: usize,
    pub links: Vec<LinkRecord>,
}

/// Top cross-type links with endpoint positions for plotting.
pub fn link_document(report: &RunReport) -> Result<LinkDocument> {
    let links = report
        .links
        .as_ref()
        .ok_or_else(|| Error::Config("report carries no links (QMix off or emit.links off)".into()))?;
    let q = &report.final_queries;
    let endpoint = |i: usize| -> Result<LinkEndpoint> {
        Ok(LinkEndpoint {
            index: i,
            query_type: *q
                .types
                .get(i)
                .ok_or_else(|| Error::Dimension(format!("link endpoint {i} outside the query set")))?,
            position: q.positions[i],
        })
    };
    let records = links
        .iter()
        .map(|l| {
            Ok(LinkRecord {
                source: endpoint(l.source)?,
                target: endpoint(l.target)?,
                weight: l.weight,
                source_confidence: l.source_confidence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LinkDocument {
        note: UNTRAINED_NOTE.into(),
        threshold: LINK_CONFIDENCE_THRESHOLD,
        per_query: LINKS_PER_QUERY,
        links: records,
    })
}

/// One ablation variant: a name and the decoder switches it sets.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    pub table: &'static str,
    pub name: &'static str,
    pub enable_qmix: bool,
    pub enable_qswap: bool,
    pub placement: QmixPlacement,
}

/// The component ladder followed by the four QMix placements (QSwap off).
pub fn ablation_variants() -> Vec<AblationVariant> {
    let v = |table, name, enable_qmix, enable_qswap, placement| AblationVariant {
        table,
        name,
        enable_qmix,
        enable_qswap,
        placement,
    };
    vec![
        v("components", "qinit", false, false, QmixPlacement::PostAgg),
        v("components", "qinit+qmix", true, false, QmixPlacement::PostAgg),
        v("components", "qinit+qmix+qswap", true, true, QmixPlacement::PostAgg),
        v("placement", "pre_agg", true, false, QmixPlacement::PreAgg),
        v("placement", "post_self", true, false, QmixPlacement::PostSelf),
        v("placement", "post_self_cross", true, false, QmixPlacement::PostSelfCross),
        v("placement", "post_agg", true, false, QmixPlacement::PostAgg),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: String,
    pub variant: String,
    pub map_center: f64,
    pub ate: f64,
    pub aoe: f64,
    pub mean_set_size: f64,
    pub shared_points: usize,
    pub seconds: f64,
}

/// Runs every variant on one shared scene, query set and weight set.
/// Variants execute concurrently; rows come back in variant order.
pub fn run_ablation<T: Real>(config: &RunConfig) -> Result<Vec<AblationRow>> {
    let prepared = prepare_scene::<T>(config)?;
    let weights = run_weights::<T>(config)?;
    let gts = ground_truth(&prepared.scene.objects);
    ablation_variants()
        .par_iter()
        .map(|v| {
            let start = Instant::now();
            let mut dc = config.decoder.clone();
            dc.enable_qmix = v.enable_qmix;
            dc.enable_qswap = v.enable_qswap;
            dc.qmix_placement = v.placement;
            let layers = decode(&prepared.features, &prepared.queries, &weights, &dc)?;
            let last = layers.last().expect("validated layer count");
            let metrics = evaluate(&layer_detections(last), &gts)?;
            let sizes = set_sizes(last);
            Ok(AblationRow {
                table: v.table.into(),
                variant: v.name.into(),
                map_center: metrics.map_center,
                ate: metrics.ate,
                aoe: metrics.aoe,
                mean_set_size: sizes.iter().map(|s| s.mean).sum::<f64>() / sizes.len() as f64,
                shared_points: layers.iter().map(|l| l.shared_points()).sum(),
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

pub const ABLATION_CSV_HEADER: &str = "table,variant,map_center,ate,aoe,mean_set_size,shared_points,seconds";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("# {UNTRAINED_NOTE}\n{ABLATION_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{:.3}\n",
            r.table, r.variant, r.map_center, r.ate, r.aoe, r.mean_set_size, r.shared_points, r.seconds
        ));
    }
    out
}

/// Number of shared points across a set of sample records.
pub fn shared_record_count(records: &[SampleRecord]) -> usize {
    records.iter().filter(|r| r.origin == SampleOrigin::Shared).count()
}

/// Scene plus rig, as written by the scene generator command.
pub fn scene_only(config: &RunConfig) -> Result<(Scene, CameraRig)> {
    config.validate()?;
    generate_scene(config.seeds.scene, &config.scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates() {
        for p in PRESETS {
            RunConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn overrides_walk_nested_keys() {
        let c = RunConfig::default()
            .with_overrides(&["decoder.qswap.mode=replace", "seeds.scene=7", "decoder.layers=2"])
            .unwrap();
        assert_eq!(c.decoder.qswap.mode, SwapMode::Replace);
        assert_eq!(c.seeds.scene, 7);
        assert_eq!(c.decoder.layers, 2);
    }

    #[test]
    fn unknown_override_key_is_rejected() {
        assert!(RunConfig::default().with_overrides(&["decoder.bogus=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["nokey"]).is_err());
    }

    #[test]
    fn unknown_json_field_is_rejected() {
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
        assert!(RunConfig::from_json("{}").is_ok());
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let err = RunConfig::default().with_overrides(&["decoder.d=64"]).unwrap_err();
        assert_eq!(err.kind(), "config");
    }

    #[test]
    fn ablation_has_seven_variants() {
        let v = ablation_variants();
        assert_eq!(v.len(), 7);
        assert!(v[3..].iter().all(|x| !x.enable_qswap));
    }
}
