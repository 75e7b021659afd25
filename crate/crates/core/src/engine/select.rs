use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::geometry::{iou, Bbox};

/// Greedy IoU used to drop near-duplicate selections.
const DEDUP_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum Selection {
    Top1,
    TopK(usize),
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: Bbox,
    pub score: f64,
    /// Index into the candidate pool.
    pub index: usize,
}

/// Indices ordered by descending score, ties broken by ascending index.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression: keep the best remaining box and drop
/// every later box whose IoU with a kept box exceeds `iou_thresh`.
pub fn nms(boxes: &[Bbox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms needs one score per box");
    let xy: Vec<_> = boxes.iter().map(|b| b.to_xyxy()).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in ranked(scores) {
        if kept.iter().all(|&k| iou(xy[k], xy[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Select from `candidates` (indices into `boxes`) by `scores`.
pub fn select_scored(boxes: &[Bbox], scores: &[f64], candidates: &[usize], mode: Selection) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let pick = |i: usize| ScoredBox {
        bbox: boxes[i],
        score: scores[i],
        index: i,
    };
    match mode {
        Selection::Top1 => order.first().map(|&i| vec![pick(i)]).unwrap_or_default(),
        Selection::TopK(k) => dedup(boxes, &order, k).into_iter().map(pick).collect(),
        Selection::Threshold(tau) => {
            let above: Vec<usize> = order.into_iter().filter(|&i| scores[i] >= tau).collect();
            dedup(boxes, &above, usize::MAX).into_iter().map(pick).collect()
        }
    }
}

fn dedup(boxes: &[Bbox], order: &[usize], k: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        if kept.len() >= k {
            break;
        }
        let b = boxes[i].to_xyxy();
        if kept.iter().all(|&j| iou(boxes[j].to_xyxy(), b) <= DEDUP_IOU) {
            kept.push(i);
        }
    }
    kept
}

/// Per-phrase final boxes ranked by the columns of `sim`.
pub fn select_predictions(boxes: &[Bbox], sim: &Mat, mode: Selection) -> Vec<Vec<ScoredBox>> {
    let all: Vec<usize> = (0..boxes.len()).collect();
    (0..sim.cols)
        .map(|c| {
            let scores: Vec<f64> = (0..sim.rows).map(|r| sim.get(r, c)).collect();
            select_scored(boxes, &scores, &all, mode)
        })
        .collect()
}
