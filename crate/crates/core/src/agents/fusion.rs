//! Detection fusion for the grounder.
//!
//! Per label, candidates from all sources are put in a canonical order and
//! greedily clustered around the most confident one (IoU ≥ [`TAU_MATCH`], at
//! most one box per source). A cluster merges into the confidence-weighted
//! corner average with noisy-or confidence. When a label ends up with several
//! clusters, the one whose centroid satisfies the most scene-graph relations
//! wins, then the more confident one.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::state::{BBox, Detection, RelationKind, SceneGraph};

pub const TAU_MATCH: f64 = 0.5;
/// `near`-style relations hold below this fraction of the image diagonal.
pub const NEAR_FRACTION: f64 = 0.2;

fn canonical_cmp(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.bbox.u_min.total_cmp(&b.bbox.u_min))
        .then(a.bbox.v_min.total_cmp(&b.bbox.v_min))
        .then(a.bbox.u_max.total_cmp(&b.bbox.u_max))
        .then(a.bbox.v_max.total_cmp(&b.bbox.v_max))
        .then(a.source.cmp(&b.source))
        .then(a.label.cmp(&b.label))
}

/// Merges agreeing detections. A single detection is returned unchanged.
pub fn merge_cluster(cluster: &[Detection]) -> Detection {
    if cluster.len() == 1 {
        return cluster[0].clone();
    }
    let total: f64 = cluster.iter().map(|d| d.confidence).sum();
    let weight = |d: &Detection| {
        if total > 0.0 {
            d.confidence / total
        } else {
            1.0 / cluster.len() as f64
        }
    };
    let mut corners = [0.0f64; 4];
    for d in cluster {
        let w = weight(d);
        for (acc, v) in corners.iter_mut().zip(d.bbox.as_array()) {
            *acc += w * v;
        }
    }
    let hull = cluster
        .iter()
        .skip(1)
        .fold(cluster[0].bbox, |h, d| h.hull(&d.bbox));
    let bbox = BBox {
        u_min: corners[0].clamp(hull.u_min, hull.u_max),
        v_min: corners[1].clamp(hull.v_min, hull.v_max),
        u_max: corners[2].clamp(hull.u_min, hull.u_max),
        v_max: corners[3].clamp(hull.v_min, hull.v_max),
    };
    let miss: f64 = cluster.iter().map(|d| 1.0 - d.confidence).product();
    let mut sources: Vec<&str> = cluster.iter().map(|d| d.source.as_str()).collect();
    sources.sort_unstable();
    sources.dedup();
    Detection {
        label: cluster[0].label.clone(),
        bbox,
        confidence: (1.0 - miss).clamp(0.0, 1.0),
        source: sources.join("+"),
    }
}

fn clusters(mut cands: Vec<Detection>) -> Vec<Vec<Detection>> {
    cands.sort_by(canonical_cmp);
    let mut used = vec![false; cands.len()];
    let mut out = Vec::new();
    for i in 0..cands.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let mut cluster = vec![cands[i].clone()];
        for j in i + 1..cands.len() {
            if used[j] || cluster.iter().any(|c| c.source == cands[j].source) {
                continue;
            }
            if cands[i].bbox.iou(&cands[j].bbox) >= TAU_MATCH {
                used[j] = true;
                cluster.push(cands[j].clone());
            }
        }
        out.push(cluster);
    }
    out
}

/// Number of graph relations of `label` satisfied by a candidate centroid,
/// given reference centroids of other labels.
pub fn consistency_score(
    graph: &SceneGraph,
    label: &str,
    centroid: (f64, f64),
    references: &BTreeMap<String, (f64, f64)>,
    image_diag: f64,
) -> usize {
    let Some(node) = graph.node_by_label(label) else {
        return 0;
    };
    graph
        .edges()
        .iter()
        .filter(|e| e.subject_id == node.id)
        .filter_map(|e| {
            let other = graph.node(&e.object_id)?;
            let r = references.get(&other.label.to_lowercase())?;
            let (u, v) = centroid;
            Some(match e.relation {
                RelationKind::LeftOf => u < r.0,
                RelationKind::RightOf => u > r.0,
                RelationKind::Above => v < r.1,
                RelationKind::Below => v > r.1,
                RelationKind::Near | RelationKind::OnTopOf | RelationKind::Inside => {
                    (u - r.0).hypot(v - r.1) < NEAR_FRACTION * image_diag
                }
            })
        })
        .filter(|ok| *ok)
        .count()
}

/// Fuses per-source detection lists into at most one detection per label.
/// The result is sorted by label and does not depend on source order.
pub fn fuse_detections(
    sources: &[Vec<Detection>],
    graph: Option<&SceneGraph>,
    image_size: (usize, usize),
) -> Vec<Detection> {
    let diag = (image_size.0 as f64).hypot(image_size.1 as f64);
    let mut by_label: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for d in sources.iter().flatten() {
        by_label
            .entry(d.label.trim().to_lowercase())
            .or_default()
            .push(d.clone());
    }
    let mut resolved: BTreeMap<String, Detection> = BTreeMap::new();
    let mut conflicts: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (key, cands) in by_label {
        let merged: Vec<Detection> = clusters(cands).iter().map(|c| merge_cluster(c)).collect();
        if merged.len() == 1 {
            resolved.insert(key, merged.into_iter().next().expect("one cluster"));
        } else {
            conflicts.insert(key, merged);
        }
    }
    let references: BTreeMap<String, (f64, f64)> = resolved
        .iter()
        .map(|(k, d)| (k.clone(), d.bbox.centroid()))
        .collect();
    for (key, options) in conflicts {
        let score = |d: &Detection| {
            graph.map_or(0, |g| {
                consistency_score(g, &key, d.bbox.centroid(), &references, diag)
            })
        };
        let best = options
            .into_iter()
            .map(|d| (score(&d), d))
            .reduce(|best, cur| {
                let better =
                    cur.0 > best.0 || (cur.0 == best.0 && cur.1.confidence > best.1.confidence);
                if better {
                    cur
                } else {
                    best
                }
            })
            .map(|(_, d)| d)
            .expect("conflict has options");
        resolved.insert(key, best);
    }
    resolved.into_values().collect()
}
