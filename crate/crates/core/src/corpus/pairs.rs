use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{io_err, CorpusError, DatasetIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    GroundTruth,
    SimulatedUtd,
    External,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::GroundTruth => "ground_truth",
            Provenance::SimulatedUtd => "simulated_utd",
            Provenance::External => "external",
        })
    }
}

/// Training pairs of segment ids, believed (not known) to share a type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairList {
    pub pairs: Vec<(String, String)>,
    pub provenance: Provenance,
}

impl PairList {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        self.pairs.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_tsv()).map_err(io_err(path))
    }

    /// Reads `id1 TAB id2` lines; checks ids against `index` and rejects
    /// self-pairs.
    pub fn load(path: &Path, index: &DatasetIndex) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let known: std::collections::HashSet<&str> = index.records.iter().map(|r| r.id.as_str()).collect();
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| CorpusError::Format { path: path.to_path_buf(), line: n + 1, message };
            let (a, b) = line.split_once('\t').ok_or_else(|| bad("expected two tab-separated ids".into()))?;
            if b.contains('\t') {
                return Err(bad("expected two tab-separated ids".into()));
            }
            for id in [a, b] {
                if !known.contains(id) {
                    return Err(CorpusError::UnknownId { path: path.to_path_buf(), id: id.to_string() });
                }
            }
            if a == b {
                return Err(bad(format!("self-pair {a}")));
            }
            pairs.push((a.to_string(), b.to_string()));
        }
        Ok(Self { pairs, provenance: Provenance::External })
    }
}

/// Record positions grouped by label, in label order.
fn by_label(index: &DatasetIndex) -> BTreeMap<&str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in index.records.iter().enumerate() {
        if let Some(l) = &r.label {
            groups.entry(l.as_str()).or_default().push(i);
        }
    }
    groups
}

fn pairable(index: &DatasetIndex) -> Result<Vec<Vec<usize>>, CorpusError> {
    let groups: Vec<Vec<usize>> = by_label(index).into_values().filter(|g| g.len() >= 2).collect();
    if groups.is_empty() {
        return Err(CorpusError::NoPairableLabel);
    }
    Ok(groups)
}

/// Draws one same-label pair, uniformly over all same-label instance pairs.
fn draw_pair<R: Rng>(groups: &[Vec<usize>], weights: &WeightedIndex<u64>, rng: &mut R) -> (usize, usize) {
    let g = &groups[weights.sample(rng)];
    let i = rng.random_range(0..g.len());
    let mut j = rng.random_range(0..g.len() - 1);
    if j >= i {
        j += 1;
    }
    (g[i], g[j])
}

fn pair_weights(groups: &[Vec<usize>]) -> WeightedIndex<u64> {
    let w: Vec<u64> = groups.iter().map(|g| (g.len() * (g.len() - 1) / 2) as u64).collect();
    WeightedIndex::new(w).expect("every group has at least one pair")
}

fn ids(index: &DatasetIndex, pairs: Vec<(usize, usize)>, provenance: Provenance) -> PairList {
    let pairs = pairs.into_iter().map(|(a, b)| (index.records[a].id.clone(), index.records[b].id.clone())).collect();
    PairList { pairs, provenance }
}

/// `n` same-label pairs: a label is drawn in proportion to its number of
/// instance pairs, then two distinct instances of it. Repeats are allowed.
pub fn make_random_pairs(index: &DatasetIndex, n: usize, seed: u64) -> Result<PairList, CorpusError> {
    let groups = pairable(index)?;
    let weights = pair_weights(&groups);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n).map(|_| draw_pair(&groups, &weights, &mut rng)).collect();
    Ok(ids(index, pairs, Provenance::GroundTruth))
}

/// Up to `ceil(n / L)` distinct pairs per label (L = labels with two or
/// more instances), sampled without replacement, shuffled together and
/// trimmed to `n`.
pub fn make_balanced_pairs(index: &DatasetIndex, n: usize, seed: u64) -> Result<PairList, CorpusError> {
    let groups = pairable(index)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = n.div_ceil(groups.len());
    let mut all = Vec::new();
    for g in &groups {
        let mut candidates: Vec<(usize, usize)> =
            (0..g.len()).flat_map(|i| (i + 1..g.len()).map(move |j| (i, j))).map(|(i, j)| (g[i], g[j])).collect();
        candidates.shuffle(&mut rng);
        candidates.truncate(cap);
        all.extend(candidates);
    }
    all.shuffle(&mut rng);
    if all.len() < n {
        warn!("only {} balanced pairs available, {} requested", all.len(), n);
    }
    all.truncate(n);
    Ok(ids(index, all, Provenance::GroundTruth))
}

/// Random same-label pairs whose second member is, with probability
/// `label_noise_rate`, replaced by a uniformly drawn segment of another
/// label, imitating the impure clusters of term discovery.
pub fn simulate_utd_pairs(index: &DatasetIndex, n: usize, label_noise_rate: f64, seed: u64) -> Result<PairList, CorpusError> {
    if !(0.0..1.0).contains(&label_noise_rate) {
        return Err(CorpusError::InvalidConfig(format!("label_noise_rate must be in [0, 1), got {label_noise_rate}")));
    }
    let groups = pairable(index)?;
    let weights = pair_weights(&groups);
    let labelled: Vec<usize> = (0..index.records.len()).filter(|&i| index.records[i].label.is_some()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let (a, mut b) = draw_pair(&groups, &weights, &mut rng);
        if rng.random::<f64>() < label_noise_rate {
            let others: Vec<usize> = labelled.iter().copied().filter(|&i| index.records[i].label != index.records[a].label).collect();
            if !others.is_empty() {
                b = others[rng.random_range(0..others.len())];
            }
        }
        pairs.push((a, b));
    }
    Ok(ids(index, pairs, Provenance::SimulatedUtd))
}
