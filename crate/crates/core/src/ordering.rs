//! Context ordering: rewrite each retrieved context to lead with its longest
//! cached prefix so prefix-sharing requests produce byte-identical prompt
//! heads, while the documents outside the prefix keep their original
//! retrieval order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::index::{ContextIndex, NodeId};
use crate::types::{Context, DocId, SearchPath};

/// A context rewritten for cache reuse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderedContext {
    /// Documents in prefix-first layout; a permutation of the source docs.
    pub docs: Vec<DocId>,
    /// How many leading docs come from the index match.
    pub matched_prefix_len: usize,
    /// Path to this context's node in the index.
    pub path: SearchPath,
    /// Original retrieval position of every document.
    pub original_rank: HashMap<DocId, usize>,
}

impl OrderedContext {
    /// True when ordering changed nothing.
    pub fn unchanged(&self, original: &Context) -> bool {
        self.docs == original.docs
    }

    /// The original retrieval order of the documents, for order hints.
    pub fn original_order(&self) -> Vec<DocId> {
        let mut docs = self.docs.clone();
        docs.sort_by_key(|d| self.original_rank.get(d).copied().unwrap_or(usize::MAX));
        docs
    }
}

/// Handle to the index node an ordering resolved to, alongside the result.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedPlacement {
    pub ordered: OrderedContext,
    pub node: NodeId,
}

/// Reorders one context against the index and registers it.
///
/// The index is searched for the longest reusable prefix. On a match the
/// output leads with the matched node's stored document order followed by
/// the unmatched documents in retrieval order, and the reordered context is
/// inserted as a child of the match. A context with no overlap keeps its
/// original order and becomes a standalone branch under the root. A context
/// whose documents exactly equal an existing leaf reuses that leaf instead
/// of inserting a duplicate.
pub fn order_context(index: &mut ContextIndex, ctx: &Context) -> Result<OrderedContext> {
    Ok(place_context(index, ctx)?.ordered)
}

/// Like [`order_context`] but also returns the resolved index node, for
/// callers that track sessions.
pub fn place_context(index: &mut ContextIndex, ctx: &Context) -> Result<OrderedPlacement> {
    ctx.validate()?;
    let outcome = index.search(ctx)?;
    let original_rank = ctx.positions();

    let matched = index.node(outcome.node).expect("search returns live node");
    if matched.is_leaf()
        && outcome.shared_prefix.len() == matched.context.len()
        && matched.context.len() == ctx.docs.len()
    {
        // The context is already indexed; reuse the leaf.
        return Ok(OrderedPlacement {
            ordered: OrderedContext {
                docs: matched.context.clone(),
                matched_prefix_len: matched.context.len(),
                path: matched.path.clone(),
                original_rank,
            },
            node: outcome.node,
        });
    }

    let matched_prefix_len = outcome.shared_prefix.len();
    let path = index.insert(ctx, outcome.node, &outcome.path)?;
    let leaf = index.traverse(&path)?;
    let docs = index.node(leaf).expect("inserted leaf").context.clone();
    Ok(OrderedPlacement {
        ordered: OrderedContext {
            docs,
            matched_prefix_len,
            path,
            original_rank,
        },
        node: leaf,
    })
}

/// Orders a batch sequentially; earlier items' insertions are visible to
/// later ones. Results align with the input order.
pub fn order_batch(index: &mut ContextIndex, batch: &[Context]) -> Result<Vec<OrderedContext>> {
    batch.iter().map(|ctx| order_context(index, ctx)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distance::DistanceParams;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn ctx(docs: &[u64]) -> Context {
        Context::with_uniform_tokens(docs.iter().map(|d| DocId(*d)).collect(), 1024, "s", 0)
            .unwrap()
    }

    fn docs(ids: &[u64]) -> Vec<DocId> {
        ids.iter().map(|d| DocId(*d)).collect()
    }

    fn worked_index() -> ContextIndex {
        ContextIndex::build(
            &[ctx(&[2, 1, 3]), ctx(&[2, 6, 1]), ctx(&[4, 1, 0])],
            DistanceParams::default(),
        )
        .unwrap()
    }

    #[test]
    fn reorders_to_matched_prefix() {
        let mut index = worked_index();
        let out = order_context(&mut index, &ctx(&[2, 1, 4])).unwrap();
        assert_eq!(out.docs, docs(&[1, 2, 4]));
        assert_eq!(out.matched_prefix_len, 2);
        assert_eq!(out.path.steps, vec![0, 0, 2]);
    }

    #[test]
    fn already_aligned_context_keeps_its_order() {
        let mut index = worked_index();
        let out = order_context(&mut index, &ctx(&[1, 2, 9])).unwrap();
        assert_eq!(out.docs, docs(&[1, 2, 9]));
        assert_eq!(out.matched_prefix_len, 2);
    }

    #[test]
    fn disjoint_context_forms_standalone_branch() {
        let mut index = worked_index();
        let out = order_context(&mut index, &ctx(&[5, 7, 8])).unwrap();
        assert_eq!(out.docs, docs(&[5, 7, 8]));
        assert_eq!(out.matched_prefix_len, 0);
        assert_eq!(out.path.steps, vec![1]);
        // Registered directly under the root.
        let leaf = index.traverse(&out.path).unwrap();
        assert_eq!(index.node(leaf).unwrap().parent, Some(index.root()));
    }

    #[test]
    fn context_equal_to_existing_leaf_reuses_it() {
        let mut index = worked_index();
        let nodes_before = index.node_count();
        // {4,1,0} is stored as the leaf [1,4,0] at path [0,1].
        let out = order_context(&mut index, &ctx(&[4, 1, 0])).unwrap();
        assert_eq!(out.docs, docs(&[1, 4, 0]));
        assert_eq!(out.matched_prefix_len, 3);
        assert_eq!(out.path.steps, vec![0, 1]);
        assert_eq!(index.node_count(), nodes_before);
    }

    #[test]
    fn batch_reproduces_walkthrough() {
        let mut index = worked_index();
        // Initialization leaves already stored prefix-first.
        let leaves: Vec<Vec<DocId>> = index
            .leaves()
            .iter()
            .map(|l| index.node(*l).unwrap().context.clone())
            .collect();
        assert!(leaves.contains(&docs(&[1, 2, 3])));
        assert!(leaves.contains(&docs(&[1, 2, 6])));

        let batch = vec![ctx(&[2, 1, 4]), ctx(&[5, 7, 8]), ctx(&[1, 2, 9])];
        let out = order_batch(&mut index, &batch).unwrap();
        assert_eq!(out[0].docs, docs(&[1, 2, 4]));
        assert_eq!(out[1].docs, docs(&[5, 7, 8]));
        assert_eq!(out[2].docs, docs(&[1, 2, 9]));
    }

    #[test]
    fn single_disjoint_batch_is_identity() {
        let mut index = ContextIndex::new(DistanceParams::default());
        let batch = vec![ctx(&[3, 1, 4])];
        let out = order_batch(&mut index, &batch).unwrap();
        assert_eq!(out[0].docs, batch[0].docs);
        assert_eq!(out[0].matched_prefix_len, 0);
    }

    #[test]
    fn ordering_is_idempotent() {
        let mut index = worked_index();
        let first = order_context(&mut index, &ctx(&[2, 1, 4])).unwrap();
        // Same docs again, now already in ordered form inside the index.
        let again = order_context(&mut index, &ctx(&[2, 1, 4])).unwrap();
        assert_eq!(again.docs, first.docs);
        assert_eq!(again.matched_prefix_len, first.docs.len());
        assert_eq!(again.path, first.path);
    }

    fn random_context(rng: &mut ChaCha8Rng, universe: u64, len: usize) -> Context {
        let mut pool: Vec<u64> = (0..universe).collect();
        pool.shuffle(rng);
        ctx(&pool[..len])
    }

    #[test]
    fn permutation_and_stability_over_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let init: Vec<Context> = (0..4).map(|_| random_context(&mut rng, 14, 5)).collect();
            let mut index = ContextIndex::build(&init, DistanceParams::default()).unwrap();
            let batch: Vec<Context> = (0..6).map(|_| random_context(&mut rng, 14, 5)).collect();
            let out = order_batch(&mut index, &batch).unwrap();
            for (input, ordered) in batch.iter().zip(&out) {
                // Permutation: no loss, no duplication.
                let mut a = input.docs.clone();
                let mut b = ordered.docs.clone();
                a.sort_unstable();
                b.sort_unstable();
                assert_eq!(a, b);

                // Stability: docs outside the matched prefix keep their
                // relative retrieval order.
                let tail = &ordered.docs[ordered.matched_prefix_len..];
                let expected: Vec<DocId> = input
                    .docs
                    .iter()
                    .filter(|d| tail.contains(d))
                    .copied()
                    .collect();
                assert_eq!(tail, expected.as_slice());
            }
            index.check_invariants().unwrap();
        }
    }

    #[test]
    fn subset_of_a_leaf_splits_it_and_matches_fully() {
        let mut index = ContextIndex::new(DistanceParams::default());
        order_context(&mut index, &ctx(&[1, 2, 4])).unwrap();
        // A retrieval covering only the leaf's leading documents splits the
        // leaf and matches the whole (shorter) context.
        let out = order_context(&mut index, &ctx(&[1, 2])).unwrap();
        assert_eq!(out.docs, docs(&[1, 2]));
        assert_eq!(out.matched_prefix_len, 2);
        let leaf = index.traverse(&out.path).unwrap();
        let parent = index.node(leaf).unwrap().parent.unwrap();
        assert_eq!(index.node(parent).unwrap().context, docs(&[1, 2]));
        index.check_invariants().unwrap();
    }

    #[test]
    fn contexts_matched_to_same_node_share_its_prefix() {
        let mut index = worked_index();
        let a = order_context(&mut index, &ctx(&[2, 1, 4])).unwrap();
        let b = order_context(&mut index, &ctx(&[1, 2, 9])).unwrap();
        // Both matched the {1,2} node; outputs share it as leading docs.
        assert!(a.docs.starts_with(&docs(&[1, 2])));
        assert!(b.docs.starts_with(&docs(&[1, 2])));
    }
}
