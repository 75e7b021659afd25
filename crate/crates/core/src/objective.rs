//! Set matching between predictions and targets, and the composite loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{invalid, Result};
use crate::geometry::{giou, iou, Bbox};

/// Per-coordinate weights `(cx, cy, w, h)` for the regression terms.
pub const COORD_WEIGHTS: [f64; 4] = [2.0, 2.0, 1.0, 1.0];

/// Reduced costs within this band of zero count as ties.
const TIGHT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Smooth-L1 weight.
    pub alpha: f64,
    /// GIoU weight.
    pub beta: f64,
    /// Similarity weight.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 5.0,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1_term: f64,
    pub giou_term: f64,
    pub sim_term: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Optimal row-to-column assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<usize>,
    pub total: f64,
}

/// Exact minimum-cost assignment of every row to a distinct column
/// (`rows <= cols`). Among optimal assignments the lexicographically
/// smallest column sequence is returned.
pub fn hungarian(cost: &Mat) -> Result<Assignment> {
    let (n, m) = cost.shape();
    if n > m {
        return Err(invalid(format!("assignment needs rows <= cols, got {n} x {m}")));
    }
    if cost.data.iter().any(|v| !v.is_finite()) {
        return Err(invalid("assignment costs must be finite"));
    }
    if n == 0 {
        return Ok(Assignment {
            row_to_col: Vec::new(),
            total: 0.0,
        });
    }
    // Square up with zero-cost dummy rows; they never change the optimum.
    let a = |i: usize, j: usize| if i < n { cost.get(i, j) } else { 0.0 };

    // Shortest augmenting paths with potentials, 1-indexed.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_of_col: Vec<usize> = (1..=m).map(|j| p[j] - 1).collect();
    let mut col_of_row = vec![0usize; m];
    for (j, &i) in row_of_col.iter().enumerate() {
        col_of_row[i] = j;
    }
    let scale = cost.data.iter().fold(1.0f64, |s, c| s.max(c.abs()));
    let tight = |i: usize, j: usize| (a(i, j) - u[i + 1] - v[j + 1]).abs() <= TIGHT * scale;
    lexicographic_refine(n, m, &tight, &mut col_of_row, &mut row_of_col);

    let row_to_col: Vec<usize> = col_of_row[..n].to_vec();
    let total = row_to_col.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
    Ok(Assignment { row_to_col, total })
}

/// Walk rows in order and move each onto the smallest tight column that
/// still admits a perfect matching of the remaining rows on tight edges.
fn lexicographic_refine(
    real_rows: usize,
    m: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    col_of_row: &mut [usize],
    row_of_col: &mut [usize],
) {
    let mut fixed = vec![false; m];
    for i in 0..real_rows {
        let current = col_of_row[i];
        for j in 0..current {
            if !tight(i, j) || fixed[row_of_col[j]] {
                continue;
            }
            // Row r holding j must reach the column i frees up.
            let r = row_of_col[j];
            let mut visited = vec![false; m];
            visited[j] = true;
            let mut path = Vec::new();
            if reroute(r, current, i, tight, &fixed, row_of_col, &mut visited, &mut path) {
                for &(row, col) in path.iter().rev() {
                    col_of_row[row] = col;
                    row_of_col[col] = row;
                }
                col_of_row[i] = j;
                row_of_col[j] = i;
                break;
            }
        }
        fixed[i] = true;
    }
}

#[allow(clippy::too_many_arguments)]
fn reroute(
    row: usize,
    target_col: usize,
    skip_row: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    fixed: &[bool],
    row_of_col: &[usize],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    for c in 0..visited.len() {
        if visited[c] || !tight(row, c) {
            continue;
        }
        visited[c] = true;
        if c == target_col {
            path.push((row, c));
            return true;
        }
        let next = row_of_col[c];
        if next == skip_row || fixed[next] {
            continue;
        }
        if reroute(next, target_col, skip_row, tight, fixed, row_of_col, visited, path) {
            path.push((row, c));
            return true;
        }
    }
    false
}

fn weighted_l1(pred: Bbox, gt: Bbox, w: &[f64; 4]) -> f64 {
    let (p, g) = (pred.to_array(), gt.to_array());
    (0..4).map(|k| w[k] * (p[k] - g[k]).abs()).sum()
}

/// Matching cost: `alpha * weighted L1 + beta * (1 - giou)`.
pub fn match_cost(pred: Bbox, gt: Bbox, weights: &LossWeights) -> f64 {
    weights.alpha * weighted_l1(pred, gt, &COORD_WEIGHTS)
        + weights.beta * (1.0 - giou(pred.to_xyxy(), gt.to_xyxy()))
}

/// Weighted Huber (delta = 1) over the four coordinates.
pub fn smooth_l1(pred: Bbox, gt: Bbox, coord_weights: &[f64; 4]) -> f64 {
    let (p, g) = (pred.to_array(), gt.to_array());
    (0..4)
        .map(|k| {
            let d = (p[k] - g[k]).abs();
            coord_weights[k] * if d < 1.0 { 0.5 * d * d } else { d - 0.5 }
        })
        .sum()
}

/// `nu[n][i]` = best IoU of box `n` against any ground-truth box of phrase `i`.
pub fn similarity_targets(boxes: &[Bbox], gt_sets: &[Vec<Bbox>]) -> Mat {
    let mut nu = Mat::zeros(boxes.len(), gt_sets.len());
    for (n, b) in boxes.iter().enumerate() {
        let xb = b.to_xyxy();
        for (i, set) in gt_sets.iter().enumerate() {
            let best = set.iter().map(|g| iou(xb, g.to_xyxy())).fold(0.0, f64::max);
            nu.set(n, i, best);
        }
    }
    nu
}

/// Matched `(target slot, prediction slot)` pairs grouped by phrase.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchAssignment {
    pub per_phrase: Vec<Vec<(usize, usize)>>,
}

impl MatchAssignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.per_phrase.iter().flatten().copied()
    }

    pub fn len(&self) -> usize {
        self.per_phrase.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn match_block(
    target_slots: &[usize],
    pred_slots: &[usize],
    targets: &[Bbox],
    preds: &[Bbox],
    weights: &LossWeights,
) -> Result<Vec<(usize, usize)>> {
    let mut cost = Mat::zeros(target_slots.len(), pred_slots.len());
    for (r, &t) in target_slots.iter().enumerate() {
        for (c, &p) in pred_slots.iter().enumerate() {
            cost.set(r, c, match_cost(preds[p], targets[t], weights));
        }
    }
    let a = hungarian(&cost)?;
    Ok(a.row_to_col
        .iter()
        .enumerate()
        .map(|(r, &c)| (target_slots[r], pred_slots[c]))
        .collect())
}

/// Match targets to predictions. With `partitioned`, slot `k` of both sets
/// belongs to phrase `phrase_of[k]` and matching stays within a phrase;
/// otherwise all slots are matched jointly.
pub fn match_sets(
    preds: &[Bbox],
    targets: &[Bbox],
    phrase_of: &[usize],
    phrases: usize,
    weights: &LossWeights,
    partitioned: bool,
) -> Result<MatchAssignment> {
    if preds.len() != targets.len() || phrase_of.len() != targets.len() {
        return Err(invalid("predictions, targets and labels must have equal length"));
    }
    if !partitioned {
        let all: Vec<usize> = (0..targets.len()).collect();
        let pairs = match_block(&all, &all, targets, preds, weights)?;
        let mut per_phrase = vec![Vec::new(); phrases];
        for (t, p) in pairs {
            per_phrase[phrase_of[t]].push((t, p));
        }
        return Ok(MatchAssignment { per_phrase });
    }
    let mut parts = vec![Vec::new(); phrases];
    for (k, &p) in phrase_of.iter().enumerate() {
        if p >= phrases {
            return Err(invalid(format!("phrase label {p} out of range {phrases}")));
        }
        parts[p].push(k);
    }
    let per_phrase = parts
        .iter()
        .map(|slots| match_block(slots, slots, targets, preds, weights))
        .collect::<Result<Vec<_>>>()?;
    Ok(MatchAssignment { per_phrase })
}

/// Inputs of the composite loss that do not carry gradients.
pub struct LossTargets<'a> {
    /// Target boxes by slot, normalized center-size.
    pub targets: &'a [Bbox],
    pub assignment: &'a MatchAssignment,
    /// `N x P` similarity targets.
    pub nu: &'a Mat,
    /// `1 x P` phrase mask, `1` for real phrases and `0` for padding.
    pub phrase_mask: &'a [f64],
}

/// Build the composite loss on `g`.
///
/// `pred_boxes` is `N x 4` normalized center-size and `sim` is `N x P`. Box
/// terms average over matched pairs of unmasked phrases; the similarity
/// term averages `|sim - nu|` over the `N x P_real` unmasked entries.
pub fn composite_loss(
    g: &mut Graph,
    pred_boxes: Var,
    sim: Var,
    t: &LossTargets<'_>,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let (n, p) = g.shape(sim);
    if t.nu.shape() != (n, p) || t.phrase_mask.len() != p {
        return Err(invalid("similarity targets or mask do not match the similarity matrix"));
    }
    let pairs: Vec<(usize, usize)> = t
        .assignment
        .per_phrase
        .iter()
        .enumerate()
        .filter(|(i, _)| t.phrase_mask.get(*i).copied().unwrap_or(0.0) > 0.0)
        .flat_map(|(_, v)| v.iter().copied())
        .collect();

    let mut parts = Vec::new();
    let (mut l1_term, mut giou_term) = (0.0, 0.0);
    if !pairs.is_empty() {
        let pred_idx: Vec<usize> = pairs.iter().map(|&(_, q)| q).collect();
        let target = Mat::from_rows(
            &pairs
                .iter()
                .map(|&(tt, _)| t.targets[tt].to_array().to_vec())
                .collect::<Vec<_>>(),
        );
        let matched = g.gather_rows(pred_boxes, &pred_idx)?;
        let inv = 1.0 / pairs.len() as f64;
        let l1 = g.smooth_l1(matched, &target, &COORD_WEIGHTS)?;
        let l1 = g.scale(l1, inv);
        let gi = g.giou_loss(matched, &target)?;
        let gi = g.scale(gi, inv);
        l1_term = g.value(l1).scalar();
        giou_term = g.value(gi).scalar();
        let l1w = g.scale(l1, weights.alpha);
        let giw = g.scale(gi, weights.beta);
        parts.push(l1w);
        parts.push(giw);
    }

    let real: f64 = t.phrase_mask.iter().sum();
    let mut sim_term = 0.0;
    if real > 0.0 && n > 0 {
        let mut mask = Mat::zeros(n, p);
        let mut nu = t.nu.clone();
        for r in 0..n {
            for c in 0..p {
                mask.set(r, c, t.phrase_mask[c]);
                nu.set(r, c, nu.get(r, c) * t.phrase_mask[c]);
            }
        }
        let mask = g.constant(mask);
        let nu = g.constant(nu);
        let masked = g.mul(sim, mask)?;
        let l = g.l1(masked, nu)?;
        let l = g.scale(l, 1.0 / (n as f64 * real));
        sim_term = g.value(l).scalar();
        if weights.lambda != 0.0 {
            let lw = g.scale(l, weights.lambda);
            parts.push(lw);
        }
    }

    let total_var = match parts.split_first() {
        None => {
            let z = g.constant(Mat::zeros(1, 1));
            g.sum(z)
        }
        Some((&first, rest)) => {
            let mut acc = first;
            for &v in rest {
                acc = g.add(acc, v)?;
            }
            acc
        }
    };
    let total = weights.alpha * l1_term + weights.beta * giou_term + weights.lambda * sim_term;
    Ok((
        total_var,
        LossBreakdown {
            l1_term,
            giou_term,
            sim_term,
            total,
            weights: *weights,
        },
    ))
}
