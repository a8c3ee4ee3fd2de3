#![allow(dead_code)]

use std::collections::HashMap;

use hetquery::decoder::decode;
use hetquery::experiment::{prepare_scene, run_weights, RunConfig};
use hetquery::grid::{FeatureGrid, GridKind};
use hetquery::kernel::{softmax, Linear, Matrix, MhaWeights};
use hetquery::qswap::{base_points, select_neighbors, swap_samples, QSwapConfig, SampleOrigin, SamplePoint, SwapMode};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, random_vec(rng, rows * cols, scale)).unwrap()
}

pub fn random_linear(rng: &mut ChaCha8Rng, input: usize, output: usize, scale: f64) -> Linear<f64> {
    Linear {
        weight: random_matrix(rng, output, input, scale),
        bias: random_vec(rng, output, scale),
    }
}

pub fn random_mha(rng: &mut ChaCha8Rng, d: usize, heads: usize, scale: f64) -> MhaWeights<f64> {
    MhaWeights {
        heads,
        query: random_linear(rng, d, d, scale),
        key: random_linear(rng, d, d, scale),
        value: random_linear(rng, d, d, scale),
        output: random_linear(rng, d, d, scale),
    }
}

pub fn to_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.get(r, c)).collect()).collect()
}

/// `W x + b` with plain index loops.
pub fn naive_linear(l: &Linear<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; l.weight.rows()];
    for r in 0..l.weight.rows() {
        let mut acc = l.bias[r];
        for c in 0..l.weight.cols() {
            acc += l.weight.get(r, c) * x[c];
        }
        y[r] = acc;
    }
    y
}

pub fn naive_layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(k, v)| (v - mean) / (var + eps).sqrt() * gamma[k] + beta[k])
        .collect()
}

/// Dense reference multi-head attention. Blocked pairs are left out of the
/// softmax entirely. Returns the projected output and head-averaged weights.
pub fn naive_mha(
    xq: &[Vec<f64>],
    xk: &[Vec<f64>],
    xv: &[Vec<f64>],
    blocked: &dyn Fn(usize, usize) -> bool,
    w: &MhaWeights<f64>,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = w.query.weight.rows();
    let hd = d / w.heads;
    let q: Vec<Vec<f64>> = xq.iter().map(|x| naive_linear(&w.query, x)).collect();
    let k: Vec<Vec<f64>> = xk.iter().map(|x| naive_linear(&w.key, x)).collect();
    let v: Vec<Vec<f64>> = xv.iter().map(|x| naive_linear(&w.value, x)).collect();
    let (n, m) = (xq.len(), xk.len());
    let mut ctx = vec![vec![0.0; d]; n];
    let mut attn = vec![vec![0.0; m]; n];
    for i in 0..n {
        for h in 0..w.heads {
            let mut logits = vec![f64::NEG_INFINITY; m];
            for j in 0..m {
                if blocked(i, j) {
                    continue;
                }
                let mut s = 0.0;
                for c in h * hd..(h + 1) * hd {
                    s += q[i][c] * k[j][c];
                }
                logits[j] = s / (hd as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() }).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..m {
                let p = exps[j] / z;
                attn[i][j] += p / w.heads as f64;
                for c in h * hd..(h + 1) * hd {
                    ctx[i][c] += p * v[j][c];
                }
            }
        }
    }
    let out = ctx.iter().map(|c| naive_linear(&w.output, c)).collect();
    (out, attn)
}

pub fn max_rel_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Exhaustive optimum of the capped selection: largest feasible size, then
/// largest score sum. Returns sorted candidate indices.
pub fn brute_force_selection(candidates: &[(usize, f64)], k_per: usize, k_extra: usize) -> Vec<usize> {
    let n = candidates.len();
    assert!(n <= 16);
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        let picked: Vec<usize> = (0..n).filter(|&k| mask & (1 << k) != 0).collect();
        if picked.len() > k_extra {
            continue;
        }
        let mut per = std::collections::HashMap::new();
        let feasible = picked.iter().all(|&k| {
            let c = per.entry(candidates[k].0).or_insert(0usize);
            *c += 1;
            *c <= k_per
        });
        if !feasible {
            continue;
        }
        let sum: f64 = picked.iter().map(|&k| candidates[k].1).sum();
        let better = match &best {
            None => true,
            Some((len, s, _)) => picked.len() > *len || (picked.len() == *len && sum > *s),
        };
        if better {
            best = Some((picked.len(), sum, picked));
        }
    }
    best.map(|b| b.2).unwrap_or_default()
}

/// Random permutation of `0..n`.
pub fn random_permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        p.swap(i, j);
    }
    p
}

/// Randomized swap input: positions, box footprints, row-stochastic
/// affinity and base sets on the image BEV grid.
pub struct SwapInstance {
    pub positions: Vec<[f64; 3]>,
    pub sizes: Vec<(f64, f64)>,
    pub affinity: Matrix<f64>,
    pub base: Vec<Vec<SamplePoint<f64>>>,
}

pub fn random_swap_instance(rng: &mut ChaCha8Rng, n: usize, k_base: usize) -> SwapInstance {
    let spread = rng.gen_range(3.0..30.0);
    let positions = (0..n)
        .map(|_| [rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), 0.0])
        .collect();
    let sizes = (0..n).map(|_| (rng.gen_range(0.5..3.0), rng.gen_range(1.0..6.0))).collect();
    let mut rows = Vec::with_capacity(n * n);
    for _ in 0..n {
        let logits = random_vec(rng, n, 4.0);
        rows.extend(softmax(&logits));
    }
    let affinity = Matrix::from_vec(n, n, rows).unwrap();
    let base = (0..n)
        .map(|i| {
            let samples: Vec<([f64; 2], f64)> = (0..k_base)
                .map(|_| ([rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)], rng.gen_range(-3.0..3.0)))
                .collect();
            base_points(i, GridKind::ImgBev, &samples)
        })
        .collect();
    SwapInstance { positions, sizes, affinity, base }
}

fn top_n_by_affinity(row: &[f64], i: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != i).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Runs neighbor selection and swapping on `inst` and checks every cap,
/// the radius, the neighbor pool, set sizes and that shared points keep
/// their source's absolute location.
pub fn check_swap_constraints(inst: &SwapInstance, cfg: &QSwapConfig) -> Result<(), String> {
    let n = inst.positions.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| select_neighbors(i, inst.affinity.row(i), inst.sizes[i], &inst.positions, cfg))
        .collect::<hetquery::Result<_>>()
        .map_err(|e| e.to_string())?;
    let sets = swap_samples(&inst.base, &inst.positions, &neighbors, &inst.affinity, cfg).map_err(|e| e.to_string())?;
    for i in 0..n {
        let top = top_n_by_affinity(inst.affinity.row(i), i, cfg.neighbors);
        let r = cfg.alpha * (inst.sizes[i].0.powi(2) + inst.sizes[i].1.powi(2)).sqrt();
        let pos = inst.positions[i];
        for &j in &neighbors[i] {
            ensure!(top.contains(&j), "query {i}: neighbor {j} outside the top affinity set");
            let p = inst.positions[j];
            let dist = ((pos[0] - p[0]).powi(2) + (pos[1] - p[1]).powi(2)).sqrt();
            ensure!(dist <= r + 1e-12, "query {i}: neighbor {j} at {dist} beyond radius {r}");
        }
        let shared: Vec<&SamplePoint<f64>> = sets[i].iter().filter(|p| p.origin == SampleOrigin::Shared).collect();
        ensure!(shared.len() <= cfg.k_extra, "query {i}: {} shared points", shared.len());
        let mut per: HashMap<usize, usize> = HashMap::new();
        for p in &shared {
            ensure!(neighbors[i].contains(&p.source), "query {i}: point from non-neighbor {}", p.source);
            ensure!(p.owner == i, "query {i}: shared point owned by {}", p.owner);
            *per.entry(p.source).or_default() += 1;
            let src = &inst.base[p.source][p.point_index];
            let sp = inst.positions[p.source];
            let moved = [pos[0] + p.offset[0] - sp[0] - src.offset[0], pos[1] + p.offset[1] - sp[1] - src.offset[1]];
            ensure!(moved[0].abs() < 1e-9 && moved[1].abs() < 1e-9, "query {i}: shared point moved");
        }
        ensure!(per.values().all(|&c| c <= cfg.k_per), "query {i}: per-neighbor cap exceeded {per:?}");
        match cfg.mode {
            SwapMode::Append => {
                let len = sets[i].len();
                ensure!(len >= cfg.k_base && len <= cfg.k_base + cfg.k_extra, "query {i}: append set of {len}");
                ensure!(sets[i][..cfg.k_base] == inst.base[i][..], "query {i}: base points altered");
            }
            SwapMode::Replace => ensure!(sets[i].len() == cfg.k_base, "query {i}: replace set of {}", sets[i].len()),
        }
    }
    Ok(())
}

/// Sum over every cell of a separable tent kernel centred on the (clamped)
/// fractional cell coordinate.
pub fn tent_oracle(g: &FeatureGrid<f64>, x: f64, y: f64) -> Vec<f64> {
    let cfg = &g.config;
    if !cfg.contains(x, y) {
        return vec![0.0; g.channels()];
    }
    let fx = ((x - cfg.x_min) / cfg.voxel - 0.5).clamp(0.0, (g.width() - 1) as f64);
    let fy = ((y - cfg.y_min) / cfg.voxel - 0.5).clamp(0.0, (g.height() - 1) as f64);
    let tent = |t: f64| (1.0 - t.abs()).max(0.0);
    let mut out = vec![0.0; g.channels()];
    for r in 0..g.height() {
        for c in 0..g.width() {
            let w = tent(fx - c as f64) * tent(fy - r as f64);
            if w > 0.0 {
                for (o, v) in out.iter_mut().zip(g.cell(r, c)) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

/// Projection written from the camera's forward/right axes instead of a
/// rotation matrix.
pub fn yaw_projection(p: [f64; 3], yaw: f64, height: f64, width: usize, img_h: usize, hfov_deg: f64) -> Option<[f64; 3]> {
    let d = [p[0], p[1], p[2] - height];
    let depth = d[0] * yaw.cos() + d[1] * yaw.sin();
    if depth <= 0.1 {
        return None;
    }
    let right = d[0] * yaw.sin() - d[1] * yaw.cos();
    let down = -d[2];
    let f = width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
    let u = width as f64 / 2.0 + f * right / depth;
    let v = img_h as f64 / 2.0 + f * down / depth;
    (u >= 0.0 && v >= 0.0 && u < width as f64 && v < img_h as f64).then_some([u, v, depth])
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

/// Decodes `cfg`'s scene once as generated and once per random query
/// permutation, and checks every layer output permutes with the queries.
pub fn check_equivariance(cfg: &RunConfig, perms: usize, rng: &mut ChaCha8Rng, tol: f64) -> Result<(), String> {
    let prepared = prepare_scene::<f64>(cfg).map_err(|e| e.to_string())?;
    let weights = run_weights::<f64>(cfg).map_err(|e| e.to_string())?;
    let base = decode(&prepared.features, &prepared.queries, &weights, &cfg.decoder).map_err(|e| e.to_string())?;
    let n = prepared.queries.len();
    for _ in 0..perms {
        let perm = random_permutation(rng, n);
        let mut inverse = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            inverse[p] = k;
        }
        let permuted = decode(&prepared.features, &prepared.queries.permuted(&perm), &weights, &cfg.decoder)
            .map_err(|e| e.to_string())?;
        for (layer, (a, b)) in permuted.iter().zip(&base).enumerate() {
            let attn_pairs = [
                (Some(&a.self_attn), Some(&b.self_attn)),
                (a.qmix_attn.as_ref(), b.qmix_attn.as_ref()),
                (a.post_self_attn.as_ref(), b.post_self_attn.as_ref()),
            ];
            for k in 0..n {
                let o = perm[k];
                for c in 0..a.class_scores.cols() {
                    ensure!(close(a.class_scores.get(k, c), b.class_scores.get(o, c), tol), "layer {layer}: class score");
                }
                for c in 0..a.embeddings.cols() {
                    ensure!(close(a.embeddings.get(k, c), b.embeddings.get(o, c), tol), "layer {layer}: embedding");
                }
                let (ba, bb) = (&a.boxes[k], &b.boxes[o]);
                let fa = ba.center.iter().chain(&ba.size).chain([&ba.yaw]).chain(&ba.velocity);
                let fb = bb.center.iter().chain(&bb.size).chain([&bb.yaw]).chain(&bb.velocity);
                for (x, y) in fa.zip(fb) {
                    ensure!(close(*x, *y, tol), "layer {layer}: box");
                }
                for (pa, pb) in &attn_pairs {
                    match (pa, pb) {
                        (Some(pa), Some(pb)) => {
                            for l in 0..n {
                                ensure!(close(pa.get(k, l), pb.get(o, perm[l]), tol), "layer {layer}: attention");
                            }
                        }
                        (None, None) => {}
                        _ => return Err(format!("layer {layer}: attention presence differs")),
                    }
                }
                let mapped: Vec<usize> = b.neighbors[o].iter().map(|&j| inverse[j]).collect();
                ensure!(a.neighbors[k] == mapped, "layer {layer}: neighbors of {k}");
                for g in 0..2 {
                    let (sa, sb) = (&a.sample_sets[k][g], &b.sample_sets[o][g]);
                    ensure!(sa.len() == sb.len(), "layer {layer}: set size of {k}");
                    for (pa, pb) in sa.iter().zip(sb) {
                        ensure!(pa.owner == k && pa.source == inverse[pb.source], "layer {layer}: sample provenance");
                        ensure!(pa.point_index == pb.point_index && pa.origin == pb.origin, "layer {layer}: sample slot");
                        ensure!(close(pa.score, pb.score, tol), "layer {layer}: sample score");
                        for ax in 0..2 {
                            ensure!(close(pa.offset[ax], pb.offset[ax], tol), "layer {layer}: sample offset");
                        }
                    }
                }
            }
        }
    }
    Ok(())
}
