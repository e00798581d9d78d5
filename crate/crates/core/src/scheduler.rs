//! Execution scheduling for ordered contexts: run prefix-sharing requests
//! back-to-back so shared cache entries are reused before eviction.
//!
//! Contexts are grouped by the first element of their search path (the cache
//! region they live under) and each group is sorted by path length
//! descending, so the deepest prefix matches execute first. Groups are
//! emitted in order of first appearance in the input.

use serde::{Deserialize, Serialize};

use crate::ordering::OrderedContext;

/// Grouping key: the root branch a context lives under. Contexts with an
/// empty path share nothing with anyone and get singleton groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupKey {
    Branch(usize),
    Isolated(usize),
}

/// An execution plan for one batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    /// Permutation of input indices in execution order.
    pub order: Vec<usize>,
    /// Partition of input indices; members of a group are contiguous in
    /// `order`.
    pub groups: Vec<(GroupKey, Vec<usize>)>,
}

/// Plans the execution order of a batch of ordered contexts.
///
/// O(N) grouping plus O(N log N) in-group sorting. Ties in path length keep
/// input order, so the schedule is deterministic.
pub fn schedule(batch: &[OrderedContext]) -> Schedule {
    let paths: Vec<&crate::types::SearchPath> = batch.iter().map(|i| &i.path).collect();
    schedule_paths(&paths)
}

/// Path-only variant of [`schedule`], for callers that carry the search
/// paths outside of `OrderedContext` (e.g. multi-turn requests reusing
/// their session path).
pub fn schedule_paths(paths: &[&crate::types::SearchPath]) -> Schedule {
    let mut groups: Vec<(GroupKey, Vec<usize>)> = Vec::new();
    let mut slot_of_branch: std::collections::HashMap<usize, usize> =
        std::collections::HashMap::new();

    for (i, path) in paths.iter().enumerate() {
        match path.first() {
            Some(branch) => match slot_of_branch.get(&branch) {
                Some(slot) => groups[*slot].1.push(i),
                None => {
                    slot_of_branch.insert(branch, groups.len());
                    groups.push((GroupKey::Branch(branch), vec![i]));
                }
            },
            None => groups.push((GroupKey::Isolated(i), vec![i])),
        }
    }

    for (_, members) in groups.iter_mut() {
        // Longest prefix matches first; stable on input position.
        members.sort_by_key(|i| std::cmp::Reverse(paths[*i].len()));
    }

    let order = groups.iter().flat_map(|(_, m)| m.iter().copied()).collect();
    Schedule { order, groups }
}
