use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphio::Dataset;
use crate::numcore::Rng;

/// Assignment of every graph to one of `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// `assignments[graph_index]` is the fold id.
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    /// Stratified assignment: each class is shuffled and dealt round-robin,
    /// continuing the deal across classes so fold sizes differ by at most one.
    pub fn stratified(labels: &[usize], k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Argument(format!("fold count must be ≥ 2, got {k}")));
        }
        if labels.len() < k {
            return Err(Error::Argument(format!(
                "{} graphs cannot fill {k} folds",
                labels.len()
            )));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        let mut rng = Rng::derive(seed, &[0xF01D]);
        let mut assignments = vec![0usize; labels.len()];
        let mut cursor = 0usize;
        for (class, members) in by_class.iter_mut().enumerate() {
            if members.is_empty() {
                continue;
            }
            if members.len() < k {
                log::warn!(
                    "class {class} has {} members for {k} folds; it cannot be stratified",
                    members.len()
                );
            }
            rng.shuffle(members);
            for &i in members.iter() {
                assignments[i] = cursor % k;
                cursor += 1;
            }
        }
        Ok(FoldPlan {
            k,
            seed,
            assignments,
        })
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| (f == fold).then_some(i))
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| (f != fold).then_some(i))
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }

    /// `{"k":..,"seed":..,"assignments":[fold of graph 0, ...]}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("fold plan serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: FoldPlan =
            serde_json::from_str(text).map_err(|e| Error::Argument(format!("fold plan: {e}")))?;
        if let Some(&bad) = plan.assignments.iter().find(|&&f| f >= plan.k) {
            return Err(Error::Argument(format!("fold id {bad} ≥ k = {}", plan.k)));
        }
        Ok(plan)
    }
}

pub fn stratified_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    FoldPlan::stratified(&dataset.labels(), k, seed)
}

/// Splits `indices` into `(kept, held_out)`, holding out `fraction` of them
/// (rounded) spread over classes in proportion to their size. At least one graph is held out when `indices` has two
/// or more entries.
pub fn stratified_holdout(
    indices: &[usize],
    labels: &[usize],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let num_classes = indices.iter().map(|&i| labels[i] + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for &i in indices {
        by_class[labels[i]].push(i);
    }
    let mut rng = Rng::derive(seed, &[0x5A11D]);
    let mut kept = Vec::new();
    let mut held = Vec::new();
    // Largest-remainder allocation so the total held out is round(fraction · len).
    let target = ((indices.len() as f64) * fraction).round() as usize;
    let quotas: Vec<f64> = by_class.iter().map(|m| m.len() as f64 * fraction).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(take.iter().sum());
    for &c in order.iter().cycle().take(num_classes * 2) {
        if missing == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            missing -= 1;
        }
    }
    for (members, &t) in by_class.iter_mut().zip(&take) {
        rng.shuffle(members);
        held.extend_from_slice(&members[..t]);
        kept.extend_from_slice(&members[t..]);
    }
    if held.is_empty() && indices.len() >= 2 {
        let largest = by_class
            .iter()
            .enumerate()
            .max_by_key(|(c, m)| (m.len(), std::cmp::Reverse(*c)))
            .map(|(_, m)| m[0])
            .expect("non-empty");
        kept.retain(|&i| i != largest);
        held.push(largest);
    }
    kept.sort_unstable();
    held.sort_unstable();
    (kept, held)
}

/// Shuffles `indices` with `seed` and cuts them into batches of at most
/// `batch_size`.
pub fn batches(indices: &[usize], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    Rng::derive(seed, &[0xBA7C]).shuffle(&mut order);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_twenty() {
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let plan = FoldPlan::stratified(&labels, 10, 3).unwrap();
        for f in 0..10 {
            let test = plan.test_indices(f);
            assert_eq!(test.len(), 2);
            let ones = test.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(ones, 1);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let labels: Vec<usize> = (0..57).map(|i| i % 3).collect();
        let a = FoldPlan::stratified(&labels, 5, 11).unwrap();
        let b = FoldPlan::stratified(&labels, 5, 11).unwrap();
        assert_eq!(a, b);
        let c = FoldPlan::stratified(&labels, 5, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mutag_shaped_fold_sizes() {
        // 125 / 63 class split.
        let labels: Vec<usize> = (0..188).map(|i| usize::from(i >= 125)).collect();
        let plan = FoldPlan::stratified(&labels, 10, 0).unwrap();
        let mut sizes = plan.fold_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![18, 18, 19, 19, 19, 19, 19, 19, 19, 19]);
    }

    #[test]
    fn small_class_still_partitions() {
        let labels = vec![0, 0, 0, 0, 0, 0, 1, 1];
        let plan = FoldPlan::stratified(&labels, 4, 0).unwrap();
        let mut all: Vec<usize> = (0..4).flat_map(|f| plan.test_indices(f)).collect();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn json_round_trip() {
        let labels: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let plan = FoldPlan::stratified(&labels, 10, 1).unwrap();
        assert_eq!(FoldPlan::from_json(&plan.to_json()).unwrap(), plan);
        assert!(FoldPlan::from_json(r#"{"k":2,"seed":0,"assignments":[0,2]}"#).is_err());
    }

    #[test]
    fn holdout_is_stratified_partition() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i % 4 == 0)).collect();
        let idx: Vec<usize> = (0..100).collect();
        let (kept, held) = stratified_holdout(&idx, &labels, 0.1, 5);
        assert_eq!(kept.len() + held.len(), 100);
        assert_eq!(held.len(), 10);
        assert_eq!(held.iter().filter(|&&i| labels[i] == 1).count(), 2);
        assert!(held.iter().all(|i| !kept.contains(i)));
    }

    #[test]
    fn batches_cover_indices() {
        let idx: Vec<usize> = (0..130).collect();
        let b = batches(&idx, 64, 9);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 64, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, idx);
        assert_eq!(b, batches(&idx, 64, 9));
    }
}
