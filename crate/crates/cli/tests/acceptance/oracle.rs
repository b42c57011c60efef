//! Brute-force reference implementations, written without reference to the
//! library's algorithms.

use std::collections::BTreeSet;

use lungbench_core::{Annotation, Candidate, HitCriterion, LesionGeometry, Point3};

fn dist_sq(a: &Point3, b: &Point3) -> f64 {
    (a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)
}

fn bounds(g: &LesionGeometry) -> ([f64; 3], [f64; 3]) {
    let (c, half) = match g {
        LesionGeometry::Box(b) => (b.center, b.size.map(|s| s / 2.0)),
        LesionGeometry::Sphere { center, diameter } => (*center, [diameter / 2.0; 3]),
    };
    ([c.x - half[0], c.y - half[1], c.z - half[2]], [c.x + half[0], c.y + half[1], c.z + half[2]])
}

fn cube_iou(c: &Point3, side: f64, g: &LesionGeometry) -> f64 {
    let (alo, ahi) = ([c.x - side / 2.0, c.y - side / 2.0, c.z - side / 2.0], [c.x + side / 2.0, c.y + side / 2.0, c.z + side / 2.0]);
    let (blo, bhi) = bounds(g);
    let mut inter = 1.0;
    let mut vb = 1.0;
    for i in 0..3 {
        inter *= (ahi[i].min(bhi[i]) - alo[i].max(blo[i])).max(0.0);
        vb *= bhi[i] - blo[i];
    }
    let va = side * side * side;
    inter / (va + vb - inter)
}

pub fn hits(c: &Point3, g: &LesionGeometry, crit: &HitCriterion) -> bool {
    match (crit, g) {
        (HitCriterion::CenterInSphere, LesionGeometry::Sphere { center, diameter }) => {
            dist_sq(c, center) < (diameter / 2.0) * (diameter / 2.0)
        }
        (HitCriterion::CenterInSphere, LesionGeometry::Box(_)) => panic!("sphere mode needs diameters"),
        (HitCriterion::CenterInBox, g) => {
            let (lo, hi) = bounds(g);
            let p = [c.x, c.y, c.z];
            (0..3).all(|i| lo[i] <= p[i] && p[i] <= hi[i])
        }
        (HitCriterion::IouThreshold { threshold, probe_side_mm }, g) => cube_iou(c, *probe_side_mm, g) >= *threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fate {
    Lesion(usize),
    FalsePositive,
    Ignored,
}

/// What each candidate counts as: the annotation it detects after the
/// overlap / distance / id tie-break, a false positive, or ignored.
pub fn fates(cands: &[Candidate], anns: &[Annotation], excl: &[Annotation], crit: &HitCriterion) -> Vec<Fate> {
    cands
        .iter()
        .map(|c| {
            let mut best: Option<(usize, f64, f64)> = None;
            for (i, a) in anns.iter().enumerate().filter(|(_, a)| a.scan_id == c.scan_id) {
                if !hits(&c.location, &a.geometry, crit) {
                    continue;
                }
                let overlap = match crit {
                    HitCriterion::IouThreshold { probe_side_mm, .. } => cube_iou(&c.location, *probe_side_mm, &a.geometry),
                    _ => 1.0,
                };
                let d = dist_sq(&c.location, &a.geometry.center());
                let better = match best {
                    None => true,
                    Some((j, o, dj)) => {
                        overlap > o || (overlap == o && (d < dj || (d == dj && a.nodule_id < anns[j].nodule_id)))
                    }
                };
                if better {
                    best = Some((i, overlap, d));
                }
            }
            match best {
                Some((i, _, _)) => Fate::Lesion(i),
                None if excl.iter().any(|e| e.scan_id == c.scan_id && hits(&c.location, &e.geometry, crit)) => Fate::Ignored,
                None => Fate::FalsePositive,
            }
        })
        .collect()
}

/// FROC by enumerating every threshold: `(fp per scan, sensitivity)` from
/// the highest threshold down.
pub fn froc_points(cands: &[Candidate], fates: &[Fate], n_ann: usize, n_scans: usize) -> Vec<(f64, f64)> {
    let mut thresholds: Vec<f64> = cands
        .iter()
        .zip(fates)
        .filter(|(c, f)| c.probability > 0.0 && **f != Fate::Ignored)
        .map(|(c, _)| c.probability)
        .collect::<Vec<_>>();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds
        .iter()
        .map(|&t| {
            let mut found = BTreeSet::new();
            let mut fp = 0usize;
            for (c, f) in cands.iter().zip(fates) {
                if c.probability < t {
                    continue;
                }
                match f {
                    Fate::Lesion(i) => {
                        found.insert(*i);
                    }
                    Fate::FalsePositive => fp += 1,
                    Fate::Ignored => {}
                }
            }
            (fp as f64 / n_scans as f64, found.len() as f64 / n_ann as f64)
        })
        .collect()
}

/// Sensitivity at `f`: the curve runs from (0, 0) through the points; at a
/// shared FP rate it is vertical and reads its top value; past the last
/// point it is flat. Between rates the neighbours are the last point of the
/// path to the left and the first point to the right, i.e. the bottom of a
/// vertical run on the right.
pub fn sensitivity_at(points: &[(f64, f64)], f: f64) -> f64 {
    let mut pts = vec![(0.0, 0.0)];
    pts.extend_from_slice(points);
    let at: Vec<f64> = pts.iter().filter(|p| p.0 == f).map(|p| p.1).collect();
    if !at.is_empty() {
        return at.iter().cloned().fold(f64::MIN, f64::max);
    }
    let below = pts.iter().filter(|p| p.0 < f).fold(None, |acc: Option<(f64, f64)>, &p| match acc {
        Some(q) if (q.0, q.1) >= (p.0, p.1) => Some(q),
        _ => Some(p),
    });
    let above = pts.iter().filter(|p| p.0 > f).fold(None, |acc: Option<(f64, f64)>, &p| match acc {
        Some(q) if (q.0, q.1) <= (p.0, p.1) => Some(q),
        _ => Some(p),
    });
    match (below, above) {
        (Some(l), Some(r)) => l.1 + (r.1 - l.1) * (f - l.0) / (r.0 - l.0),
        (Some(l), None) => l.1,
        _ => unreachable!("(0, 0) lies below every positive rate"),
    }
}

pub const RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

pub fn cpm(points: &[(f64, f64)]) -> ([f64; 7], f64) {
    let s = RATES.map(|f| sensitivity_at(points, f));
    (s, s.iter().sum::<f64>() / 7.0)
}

/// AUC by counting every positive/negative pair.
pub fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1;
                twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}
