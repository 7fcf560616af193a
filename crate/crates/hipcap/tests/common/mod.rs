//! Shared helpers for the integration suites: an independent brute-force
//! reimplementation of tree construction, an independent CIDEr-D reference,
//! and random-scene generators. The reimplementations deliberately use
//! different data structures and control flow from the library so that a
//! shared bug is unlikely.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hipcap::hierarchy::{BBox, Region};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Rectangle intersection-over-union, written from the axis-overlap side.
fn iou_naive(a: &BBox, b: &BBox) -> f64 {
    let horizontal = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let vertical = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = horizontal * vertical;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Parent array (over nodes 0 = root, 1+i = region i, 1+K+i = instance i)
/// produced by a naive restatement of the construction procedure: keep
/// picking the largest unplaced region, attach it to the already-placed
/// region it overlaps most (strictly above epsilon, earliest placement wins
/// ties), otherwise to the root; finally hang each instance leaf under its
/// region.
pub fn brute_force_parents(regions: &[Region], epsilon: f64) -> Vec<Option<usize>> {
    let k = regions.len();
    let mut parent = vec![None; 2 * k + 1];
    let mut remaining: BTreeSet<usize> = (0..k).collect(); // positions into `regions`
    let mut placed: Vec<usize> = Vec::new();
    while !remaining.is_empty() {
        // largest area first; among equals the smallest region index
        let mut pick = usize::MAX;
        for &pos in &remaining {
            if pick == usize::MAX {
                pick = pos;
                continue;
            }
            let (a, b) = (&regions[pos], &regions[pick]);
            if a.bbox.area() > b.bbox.area()
                || (a.bbox.area() == b.bbox.area() && a.index < b.index)
            {
                pick = pos;
            }
        }
        remaining.remove(&pick);

        let mut best_iou = f64::NEG_INFINITY;
        let mut best_pos = usize::MAX;
        for &prev in &placed {
            let o = iou_naive(&regions[pick].bbox, &regions[prev].bbox);
            if o > best_iou {
                best_iou = o;
                best_pos = prev;
            }
        }
        let p = if best_pos != usize::MAX && best_iou > epsilon {
            1 + regions[best_pos].index
        } else {
            0
        };
        parent[1 + regions[pick].index] = Some(p);
        placed.push(pick);
    }
    for r in regions {
        parent[1 + k + r.index] = Some(1 + r.index);
    }
    parent
}

/// Largest pairwise IoU among a region set (0 for fewer than two regions).
pub fn max_pairwise_iou(regions: &[Region]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..regions.len() {
        for j in (i + 1)..regions.len() {
            best = best.max(iou_naive(&regions[i].bbox, &regions[j].bbox));
        }
    }
    best
}

/// Random region set on a coarse grid so areas and overlaps tie often,
/// which stresses both tie-breaking rules.
pub fn random_regions(rng: &mut ChaCha8Rng, k: usize, feature_dim: usize) -> Vec<Region> {
    (0..k)
        .map(|index| {
            let x1 = 5.0 * rng.random_range(0..18) as f64;
            let y1 = 5.0 * rng.random_range(0..18) as f64;
            let w = 5.0 * rng.random_range(1..=8) as f64;
            let h = 5.0 * rng.random_range(1..=8) as f64;
            Region {
                index,
                bbox: BBox::new(x1, y1, x1 + w, y1 + h).expect("grid boxes are valid"),
                confidence: rng.random_range(0.0..=1.0),
                region_feature: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                instance_feature: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            }
        })
        .collect()
}

const REF_N: usize = 4;
const REF_SIGMA: f64 = 6.0;

fn grams(tokens: &[String], n: usize) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.join("\u{1}")).or_insert(0.0) += 1.0;
        }
    }
    counts
}

/// Independent CIDEr-D: document frequencies recomputed from scratch on
/// every call (an n-gram counts once per image over the union of that
/// image's references), TF-IDF weights as count × (ln N − ln max(df, 1)),
/// clipped dot products, Gaussian length penalty on bigram counts, mean
/// over n and references, scaled by 10.
pub fn reference_cider_d(
    candidate: &[String],
    references: &[Vec<String>],
    all_images: &[Vec<Vec<String>>],
) -> f64 {
    let n_docs = all_images.len() as f64;
    let mut df: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); REF_N];
    for image_refs in all_images {
        for (n, slot) in df.iter_mut().enumerate() {
            let mut seen: BTreeSet<String> = BTreeSet::new();
            for r in image_refs {
                seen.extend(grams(r, n + 1).into_keys());
            }
            for g in seen {
                *slot.entry(g).or_insert(0.0) += 1.0;
            }
        }
    }

    let weigh = |tokens: &[String], n: usize| -> (BTreeMap<String, f64>, f64) {
        let mut vec = grams(tokens, n + 1);
        let mut norm_sq = 0.0;
        for (g, w) in vec.iter_mut() {
            let seen = df[n].get(g).copied().unwrap_or(0.0).max(1.0);
            *w *= n_docs.ln() - seen.ln();
            norm_sq += *w * *w;
        }
        (vec, norm_sq.sqrt())
    };
    let bigram_len = |tokens: &[String]| tokens.len().saturating_sub(1) as f64;

    let mut total = 0.0;
    for r in references {
        let delta = bigram_len(candidate) - bigram_len(r);
        let penalty = (-delta * delta / (2.0 * REF_SIGMA * REF_SIGMA)).exp();
        let mut sim_sum = 0.0;
        for n in 0..REF_N {
            let (hyp, hyp_norm) = weigh(candidate, n);
            let (rf, rf_norm) = weigh(r, n);
            let mut dot = 0.0;
            for (g, &h) in &hyp {
                if let Some(&rv) = rf.get(g) {
                    dot += h.min(rv) * rv;
                }
            }
            if hyp_norm > 0.0 && rf_norm > 0.0 {
                sim_sum += dot / (hyp_norm * rf_norm) * penalty;
            }
        }
        total += sim_sum / REF_N as f64;
    }
    10.0 * total / references.len() as f64
}

/// Random lowercase word from a tiny alphabet, biased toward repeats so
/// n-gram overlaps actually occur.
pub fn random_sentence(rng: &mut ChaCha8Rng, min_len: usize, max_len: usize) -> Vec<String> {
    const WORDS: [&str; 12] = [
        "a", "the", "red", "blue", "dog", "cat", "ball", "sits", "runs", "on", "under", "grass",
    ];
    let len = rng.random_range(min_len..=max_len);
    (0..len)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string())
        .collect()
}
