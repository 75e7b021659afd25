//! Fixed-size training box sets built from ground truth, and Gaussian
//! proposals for inference.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Bbox, ScaledBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    PhraseBalanced,
    RandomOversample,
    RandomGeneration,
}

impl Schema {
    pub const ALL: [Schema; 3] = [
        Schema::PhraseBalanced,
        Schema::RandomOversample,
        Schema::RandomGeneration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Schema::PhraseBalanced => "phrase_balanced",
            Schema::RandomOversample => "random_oversample",
            Schema::RandomGeneration => "random_generation",
        }
    }
}

/// `boxes[k]` is a target for phrase `phrase_of[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<Bbox>,
    pub phrase_of: Vec<usize>,
    pub schema: Schema,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn counts(&self, phrases: usize) -> Vec<usize> {
        let mut c = vec![0; phrases];
        for &p in &self.phrase_of {
            c[p] += 1;
        }
        c
    }

    /// Slot indices belonging to each phrase.
    pub fn partitions(&self, phrases: usize) -> Vec<Vec<usize>> {
        let mut parts = vec![Vec::new(); phrases];
        for (k, &p) in self.phrase_of.iter().enumerate() {
            parts[p].push(k);
        }
        parts
    }
}

fn check_inputs(gt: &[Vec<Bbox>], total: usize) -> Result<usize> {
    if gt.is_empty() {
        return Err(invalid("proposal padding needs at least one phrase"));
    }
    if let Some(i) = gt.iter().position(|s| s.is_empty()) {
        return Err(invalid(format!("phrase {i} has no ground-truth boxes")));
    }
    let n: usize = gt.iter().map(Vec::len).sum();
    if total < n {
        return Err(invalid(format!(
            "proposal count {total} is below the ground-truth count {n}"
        )));
    }
    Ok(n)
}

/// Per-phrase quotas: `total / P`, remainder to the lowest phrase indices.
pub fn balanced_quotas(phrases: usize, total: usize) -> Vec<usize> {
    let base = total / phrases;
    let extra = total % phrases;
    (0..phrases).map(|i| base + usize::from(i < extra)).collect()
}

pub fn pad(gt: &[Vec<Bbox>], total: usize, schema: Schema, rng: &mut impl Rng) -> Result<ProposalSet> {
    match schema {
        Schema::PhraseBalanced => phrase_balanced_pad(gt, total, rng),
        Schema::RandomOversample => random_oversample_pad(gt, total, rng),
        Schema::RandomGeneration => random_generation_pad(gt, total, rng),
    }
}

/// Phrase-balanced oversampling. The phrase with the fewest proposals is
/// topped up first, one uniformly chosen duplicate at a time, until each
/// phrase holds its quota. A phrase whose ground truth already exceeds its
/// quota is subsampled down to it without replacement.
pub fn phrase_balanced_pad(gt: &[Vec<Bbox>], total: usize, rng: &mut impl Rng) -> Result<ProposalSet> {
    check_inputs(gt, total)?;
    let quotas = balanced_quotas(gt.len(), total);
    let mut per_phrase: Vec<Vec<Bbox>> = gt
        .iter()
        .zip(&quotas)
        .map(|(set, &q)| {
            if set.len() <= q {
                set.clone()
            } else {
                rand::seq::index::sample(rng, set.len(), q)
                    .into_iter()
                    .map(|k| set[k])
                    .collect()
            }
        })
        .collect();
    loop {
        let next = (0..gt.len())
            .filter(|&i| per_phrase[i].len() < quotas[i])
            .min_by_key(|&i| (per_phrase[i].len(), i));
        let Some(i) = next else { break };
        let pick = gt[i][rng.gen_range(0..gt[i].len())];
        per_phrase[i].push(pick);
    }
    let mut boxes = Vec::with_capacity(total);
    let mut phrase_of = Vec::with_capacity(total);
    for (i, set) in per_phrase.into_iter().enumerate() {
        phrase_of.extend(std::iter::repeat(i).take(set.len()));
        boxes.extend(set);
    }
    Ok(ProposalSet {
        boxes,
        phrase_of,
        schema: Schema::PhraseBalanced,
    })
}

fn pooled(gt: &[Vec<Bbox>]) -> (Vec<Bbox>, Vec<usize>) {
    let mut boxes = Vec::new();
    let mut phrase_of = Vec::new();
    for (i, set) in gt.iter().enumerate() {
        boxes.extend_from_slice(set);
        phrase_of.extend(std::iter::repeat(i).take(set.len()));
    }
    (boxes, phrase_of)
}

/// Duplicate uniformly chosen boxes from the pooled ground truth until the
/// set reaches `total`.
pub fn random_oversample_pad(gt: &[Vec<Bbox>], total: usize, rng: &mut impl Rng) -> Result<ProposalSet> {
    let n = check_inputs(gt, total)?;
    let (mut boxes, mut phrase_of) = pooled(gt);
    while boxes.len() < total {
        let k = rng.gen_range(0..n);
        boxes.push(boxes[k]);
        phrase_of.push(phrase_of[k]);
    }
    Ok(ProposalSet {
        boxes,
        phrase_of,
        schema: Schema::RandomOversample,
    })
}

/// Uniformly random valid box.
pub fn random_box(rng: &mut impl Rng) -> Bbox {
    Bbox::new(
        rng.gen_range(0.0..=1.0),
        rng.gen_range(0.0..=1.0),
        rng.gen_range(0.02..=1.0),
        rng.gen_range(0.02..=1.0),
    )
}

/// Keep the ground truth and fill the remainder with random boxes whose
/// phrase labels cycle through the phrases.
pub fn random_generation_pad(gt: &[Vec<Bbox>], total: usize, rng: &mut impl Rng) -> Result<ProposalSet> {
    check_inputs(gt, total)?;
    let (mut boxes, mut phrase_of) = pooled(gt);
    let mut label = 0;
    while boxes.len() < total {
        boxes.push(random_box(rng));
        phrase_of.push(label);
        label = (label + 1) % gt.len();
    }
    Ok(ProposalSet {
        boxes,
        phrase_of,
        schema: Schema::RandomGeneration,
    })
}

/// `count` standard-normal boxes in the signal domain, clamped to `[-scale, scale]`.
pub fn gaussian_proposals(count: usize, scale: f64, rng: &mut impl Rng) -> Vec<ScaledBox> {
    (0..count)
        .map(|_| {
            let v: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
            ScaledBox(v).clamped(scale)
        })
        .collect()
}
