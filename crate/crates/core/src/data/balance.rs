use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Annotations;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub sample_ids: Vec<String>,
    /// Classes with no instances anywhere in the dataset; left out of the objective.
    pub excluded_classes: Vec<usize>,
    pub class_counts: Vec<usize>,
}

/// `max / min` of per-class instance counts over `active` classes; infinite
/// when an active class is absent.
pub fn imbalance_ratio(counts: &[usize], active: &[usize]) -> f64 {
    let vals = active.iter().map(|&c| counts[c]);
    let max = vals.clone().max().unwrap_or(0);
    let min = vals.min().unwrap_or(0);
    if min == 0 {
        f64::INFINITY
    } else {
        max as f64 / min as f64
    }
}

#[derive(PartialEq, PartialOrd)]
struct Objective {
    missing_classes: usize,
    ratio: f64,
    neg_instances: isize,
}

fn objective(counts: &[usize], active: &[usize]) -> Objective {
    let present: Vec<usize> = active.iter().copied().filter(|&c| counts[c] > 0).collect();
    Objective {
        missing_classes: active.len() - present.len(),
        ratio: imbalance_ratio(counts, &present),
        neg_instances: -(active.iter().map(|&c| counts[c]).sum::<usize>() as isize),
    }
}

/// Greedily pick `n_samples` images so per-class instance counts stay as even
/// as possible (smallest `max/min` ratio at each step). Ties go to the first
/// candidate in a seed-shuffled order.
pub fn select_class_balanced(
    annotations: &Annotations,
    n_classes: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Selection> {
    if n_samples > annotations.len() {
        return Err(Error::Config(format!(
            "requested {n_samples} samples from a dataset of {}",
            annotations.len()
        )));
    }
    let per_image: Vec<(&String, Vec<usize>)> = annotations
        .iter()
        .map(|(id, boxes)| {
            let mut counts = vec![0usize; n_classes];
            for b in boxes {
                if b.class_id < n_classes {
                    counts[b.class_id] += 1;
                }
            }
            (id, counts)
        })
        .collect();

    let mut totals = vec![0usize; n_classes];
    for (_, c) in &per_image {
        for (t, v) in totals.iter_mut().zip(c) {
            *t += v;
        }
    }
    let excluded: Vec<usize> = (0..n_classes).filter(|&c| totals[c] == 0).collect();
    for c in &excluded {
        log::warn!("class {c} has no instances; excluded from the balancing objective");
    }
    let active: Vec<usize> = (0..n_classes).filter(|&c| totals[c] > 0).collect();

    let mut order: Vec<usize> = (0..per_image.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut counts = vec![0usize; n_classes];
    let mut taken = vec![false; per_image.len()];
    let mut chosen = Vec::with_capacity(n_samples);
    let mut trial = vec![0usize; n_classes];
    for _ in 0..n_samples {
        let mut best: Option<(usize, Objective)> = None;
        for &i in &order {
            if taken[i] {
                continue;
            }
            for c in 0..n_classes {
                trial[c] = counts[c] + per_image[i].1[c];
            }
            let obj = objective(&trial, &active);
            let better = match &best {
                None => true,
                Some((_, b)) => obj < *b,
            };
            if better {
                best = Some((i, obj));
            }
        }
        let (i, _) = best.expect("n_samples <= dataset size");
        taken[i] = true;
        for c in 0..n_classes {
            counts[c] += per_image[i].1[c];
        }
        chosen.push(per_image[i].0.clone());
    }

    Ok(Selection {
        sample_ids: chosen,
        excluded_classes: excluded,
        class_counts: counts,
    })
}
