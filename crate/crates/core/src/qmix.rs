//! Cross-type masked attention between heterogeneous queries, plus the
//! attention diagnostics (type-to-type mass and top cross-type links).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{multi_head_attention, relu, AttentionMask, LayerNorm, Linear, Matrix, MhaWeights};
use crate::qinit::QueryType;
use crate::scalar::Real;

/// Open on the diagonal and between queries of different types; blocked
/// between distinct queries of the same type.
pub fn build_cross_type_mask(types: &[QueryType]) -> Result<AttentionMask> {
    let n = types.len();
    if n == 0 {
        return Err(Error::Config("cross-type mask needs at least one query".into()));
    }
    let mut blocked = vec![false; n * n];
    for (i, ci) in types.iter().enumerate() {
        for (j, cj) in types.iter().enumerate() {
            blocked[i * n + j] = i != j && ci == cj;
        }
    }
    AttentionMask::new(n, n, blocked)
}

/// Position-wise MLP `d -> 4d -> d` on a pre-normalized input, added back
/// residually.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub norm: LayerNorm<T>,
    pub expand: Linear<T>,
    pub contract: Linear<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            norm: LayerNorm::new(d),
            expand: Linear::zeros(d, 4 * d),
            contract: Linear::zeros(4 * d, d),
        }
    }

    pub fn apply_rows(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let normed = self.norm.apply_rows(x);
        let mut hidden = self.expand.forward_rows(&normed)?;
        for v in hidden.data_mut() {
            *v = relu(*v);
        }
        x.add(&self.contract.forward_rows(&hidden)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QmixWeights<T> {
    pub attention: MhaWeights<T>,
    pub ffn: FeedForward<T>,
}

/// Masked attention alone, without the residual or MLP: `MHA(Q, Q, Q; M)`.
pub fn cross_type_attention<T: Real>(
    queries: &Matrix<T>,
    types: &[QueryType],
    weights: &MhaWeights<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if types.len() != queries.rows() {
        return Err(Error::Dimension(format!(
            "{} types for {} queries",
            types.len(),
            queries.rows()
        )));
    }
    let mask = build_cross_type_mask(types)?;
    multi_head_attention(queries, queries, queries, &mask, weights)
}

/// Full block: `H = Q + MHA(Q, Q, Q; M)`, then `Q' = H + MLP(LN(H))`.
/// Returns `Q'` and the head-averaged attention matrix.
pub fn qmix_attention<T: Real>(
    queries: &Matrix<T>,
    types: &[QueryType],
    weights: &QmixWeights<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let (mixed, attn) = cross_type_attention(queries, types, &weights.attention)?;
    let h = queries.add(&mixed)?;
    Ok((weights.ffn.apply_rows(&h)?, attn))
}

/// Type-to-type attention statistics. Rows are source (query) types, columns
/// key types, both in `img, rad, w` order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeAttentionStats {
    /// Average attention mass a query of the row type sends to keys of the
    /// column type. Rows sum to one for present types.
    pub mass: [[f64; 3]; 3],
    /// `mass` divided by the number of keys of the column type.
    pub mean_per_key: [[f64; 3]; 3],
    pub counts: [usize; 3],
}

impl TypeAttentionStats {
    /// Elementwise mean over layers.
    pub fn mean(all: &[TypeAttentionStats]) -> Option<TypeAttentionStats> {
        let first = all.first()?;
        let n = all.len() as f64;
        let mut out = TypeAttentionStats {
            mass: [[0.0; 3]; 3],
            mean_per_key: [[0.0; 3]; 3],
            counts: first.counts,
        };
        for s in all {
            for a in 0..3 {
                for b in 0..3 {
                    out.mass[a][b] += s.mass[a][b] / n;
                    out.mean_per_key[a][b] += s.mean_per_key[a][b] / n;
                }
            }
        }
        Some(out)
    }
}

pub fn attention_type_stats<T: Real>(attn: &Matrix<T>, types: &[QueryType]) -> Result<TypeAttentionStats> {
    let n = types.len();
    if attn.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "attention is {:?} for {n} queries",
            attn.shape()
        )));
    }
    let mut counts = [0usize; 3];
    for t in types {
        counts[t.index()] += 1;
    }
    let mut mass = [[0.0f64; 3]; 3];
    for (i, ti) in types.iter().enumerate() {
        let row = attn.row(i);
        for (j, tj) in types.iter().enumerate() {
            mass[ti.index()][tj.index()] += row[j].to_f64_lossy();
        }
    }
    let mut mean_per_key = [[0.0f64; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            if counts[a] > 0 {
                mass[a][b] /= counts[a] as f64;
            }
            mean_per_key[a][b] = if counts[b] > 0 { mass[a][b] / counts[b] as f64 } else { 0.0 };
        }
    }
    Ok(TypeAttentionStats {
        mass,
        mean_per_key,
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossTypeLink {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
    pub source_type: QueryType,
    pub target_type: QueryType,
    pub source_confidence: f64,
}

pub const LINK_CONFIDENCE_THRESHOLD: f64 = 0.1;
pub const LINKS_PER_QUERY: usize = 2;

/// For each query with confidence above `threshold`, its `k` strongest
/// links to queries of a different type (ties by lower target index).
pub fn extract_top_links<T: Real>(
    attn: &Matrix<T>,
    types: &[QueryType],
    confidences: &[T],
    threshold: f64,
    k: usize,
) -> Result<Vec<CrossTypeLink>> {
    let n = types.len();
    if attn.shape() != (n, n) || confidences.len() != n {
        return Err(Error::Dimension(format!(
            "links need an {n}x{n} attention matrix and {n} confidences"
        )));
    }
    let mut links = Vec::new();
    for i in 0..n {
        let conf = confidences[i].to_f64_lossy();
        if !(conf > threshold) {
            continue;
        }
        let row = attn.row(i);
        let mut partners: Vec<usize> = (0..n).filter(|&j| types[j] != types[i]).collect();
        partners.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        links.extend(partners.into_iter().take(k).map(|j| CrossTypeLink {
            source: i,
            target: j,
            weight: row[j].to_f64_lossy(),
            source_type: types[i],
            target_type: types[j],
            source_confidence: conf,
        }));
    }
    Ok(links)
}
