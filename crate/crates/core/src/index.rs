//! The context index: a tree over retrieval contexts that mirrors the
//! inference engine's prefix cache at document granularity.
//!
//! The root represents the empty context. Every node stores a document
//! sequence that extends its parent's sequence, so a root-to-node walk spells
//! out a cached prefix. Leaves hold full (reordered) retrieval contexts;
//! virtual nodes hold the shared prefix of everything beneath them.
//!
//! Construction clusters an initial batch of contexts agglomeratively under
//! the context distance, merging the closest pair into a virtual node whose
//! document set is the intersection of its descendants. After construction
//! the index grows online through `search` + `insert` and shrinks through
//! cache eviction events, with no global restructuring.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::distance::{distance_from_parts, DistanceParams};
use crate::error::{Error, Result};
use crate::types::{Context, DocId, SearchPath};

/// Tolerance used when deciding that all children of a node are equidistant
/// from a query, which terminates the greedy descent.
pub const EQUIDISTANT_EPS: f64 = 1e-12;

/// Stable handle to a node in the index arena. Handles stay valid until the
/// node is removed by eviction; they are never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

/// One node of the context-index tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexNode {
    /// Document sequence this node represents. Always extends the parent's
    /// sequence; empty for the root.
    pub context: Vec<DocId>,
    /// Child-index path from the root to this node.
    pub path: SearchPath,
    /// Cached tokens attributed to this node's own segment.
    pub seq_len: u64,
    /// Set when a session parked on this node has entered multi-turn mode.
    pub multi_turn: bool,
    /// Children in insertion order; the position in this list is the child's
    /// path step.
    pub children: Vec<NodeId>,
    /// Logical timestamp of the last access.
    pub last_access: u64,
    /// True for intersection nodes created during clustering or insertion.
    pub is_virtual: bool,
    /// Parent handle; `None` only for the root.
    pub parent: Option<NodeId>,
    /// Creation sequence number, used to break eviction ties.
    pub created: u64,
}

impl IndexNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Prefix-cache notification consumed by the index to stay in sync with the
/// serving engine (or the built-in simulator).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum CacheEvent {
    /// Tokens were evicted; the index drops them from its least recently
    /// used nodes.
    Evicted { n_tokens: u64 },
    /// Tokens were cached for the node at `path`.
    Appended { path: SearchPath, n_tokens: u64 },
    /// The node at `path` was read from cache.
    Accessed { path: SearchPath },
}

/// Result of a greedy index search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// The node where the descent stopped.
    pub node: NodeId,
    /// Path recorded during the descent.
    pub path: SearchPath,
    /// Leading run of the stop node's context covered by the query: the
    /// reusable cached prefix, in the node's stored order.
    pub shared_prefix: Vec<DocId>,
}

/// The context-index tree plus the bookkeeping needed for LRU updates.
#[derive(Debug, Clone)]
pub struct ContextIndex {
    arena: Vec<Option<IndexNode>>,
    root: NodeId,
    params: DistanceParams,
    clock: u64,
    next_created: u64,
    /// Min-heap of (last_access, created, node) over nodes holding tokens.
    /// Entries go stale when a node is touched again; stale entries are
    /// skipped on pop instead of being re-keyed in place.
    access_heap: BinaryHeap<Reverse<(u64, u64, usize)>>,
}

impl ContextIndex {
    /// Creates an index containing only the empty root.
    pub fn new(params: DistanceParams) -> Self {
        let root = IndexNode {
            context: Vec::new(),
            path: SearchPath::root(),
            seq_len: 0,
            multi_turn: false,
            children: Vec::new(),
            last_access: 0,
            is_virtual: true,
            parent: None,
            created: 0,
        };
        ContextIndex {
            arena: vec![Some(root)],
            root: NodeId(0),
            params,
            clock: 0,
            next_created: 1,
            access_heap: BinaryHeap::new(),
        }
    }

    /// Builds the index from an initial batch of contexts by agglomerative
    /// clustering: repeatedly merge the closest pair of active clusters,
    /// the merged cluster's representative being the ascending-sorted
    /// intersection of the two document sets. Merging stops once the
    /// closest pair no longer overlaps; remaining clusters become separate
    /// branches under the root. Leaf contexts are stored prefix-first:
    /// the parent's sequence followed by the remaining documents in their
    /// original retrieval order.
    pub fn build(contexts: &[Context], params: DistanceParams) -> Result<Self> {
        if contexts.is_empty() {
            return Err(Error::TooFewContexts {
                expected: 1,
                got: 0,
            });
        }
        for ctx in contexts {
            ctx.validate()?;
        }

        let mut index = ContextIndex::new(params);
        let forest = cluster(contexts, params.alpha);

        // Materialize the cluster forest top-down so every node's context
        // extends its parent's.
        let root = index.root;
        for tree in &forest {
            index.materialize(tree, root, contexts);
        }
        index.assign_paths(root, SearchPath::root());
        Ok(index)
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn params(&self) -> &DistanceParams {
        &self.params
    }

    pub fn node(&self, id: NodeId) -> Option<&IndexNode> {
        self.arena.get(id.0).and_then(|slot| slot.as_ref())
    }

    pub fn is_alive(&self, id: NodeId) -> bool {
        self.node(id).is_some()
    }

    /// Whether this handle was ever allocated by this index. Dead handles
    /// stay allocated; out-of-range handles come from corrupt inputs.
    pub fn was_allocated(&self, id: NodeId) -> bool {
        id.0 < self.arena.len()
    }

    /// Number of live nodes, including the root.
    pub fn node_count(&self) -> usize {
        self.arena.iter().filter(|slot| slot.is_some()).count()
    }

    /// Sum of cached tokens over all live nodes.
    pub fn total_seq_len(&self) -> u64 {
        self.arena.iter().flatten().map(|n| n.seq_len).sum()
    }

    /// Live leaf handles in depth-first order.
    pub fn leaves(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let node = self.node_ref(id.0);
            if node.children.is_empty() && id != self.root {
                out.push(id);
            }
            for child in node.children.iter().rev() {
                stack.push(*child);
            }
        }
        out
    }

    fn node_ref(&self, idx: usize) -> &IndexNode {
        self.arena[idx].as_ref().expect("live node")
    }

    fn node_mut(&mut self, idx: usize) -> &mut IndexNode {
        self.arena[idx].as_mut().expect("live node")
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn alloc(&mut self, node: IndexNode) -> NodeId {
        let id = NodeId(self.arena.len());
        self.arena.push(Some(node));
        id
    }

    fn next_created(&mut self) -> u64 {
        let c = self.next_created;
        self.next_created += 1;
        c
    }

    fn materialize(&mut self, tree: &BuildNode, parent: NodeId, contexts: &[Context]) {
        let parent_ctx = self.node_ref(parent.0).context.clone();
        let parent_set: HashSet<DocId> = parent_ctx.iter().copied().collect();
        let created = self.next_created();
        match tree {
            BuildNode::Leaf { input } => {
                let original = &contexts[*input];
                let mut context = parent_ctx;
                context.extend(original.docs.iter().filter(|d| !parent_set.contains(d)));
                let id = self.alloc(IndexNode {
                    context,
                    path: SearchPath::root(),
                    seq_len: 0,
                    multi_turn: false,
                    children: Vec::new(),
                    last_access: 0,
                    is_virtual: false,
                    parent: Some(parent),
                    created,
                });
                self.node_mut(parent.0).children.push(id);
            }
            BuildNode::Virtual { set, children } => {
                let mut context = parent_ctx;
                let mut delta: Vec<DocId> = set
                    .iter()
                    .filter(|d| !parent_set.contains(d))
                    .copied()
                    .collect();
                delta.sort_unstable();
                context.extend(delta);
                let id = self.alloc(IndexNode {
                    context,
                    path: SearchPath::root(),
                    seq_len: 0,
                    multi_turn: false,
                    children: Vec::new(),
                    last_access: 0,
                    is_virtual: true,
                    parent: Some(parent),
                    created,
                });
                self.node_mut(parent.0).children.push(id);
                for child in children {
                    self.materialize(child, id, contexts);
                }
            }
        }
    }

    fn assign_paths(&mut self, id: NodeId, path: SearchPath) {
        let children = {
            let node = self.node_mut(id.0);
            node.path = path.clone();
            node.children.clone()
        };
        for (i, child) in children.into_iter().enumerate() {
            self.assign_paths(child, path.child(i));
        }
    }

    /// Greedy descent from the root. At each level the children are compared
    /// against the query; descent follows the child offering the longest
    /// usable cached prefix, with the query-to-node distance breaking ties.
    /// The walk stops at a leaf, when all children sit at the same distance
    /// (the longest shared prefix has been found), or when no child shares a
    /// usable prefix with the query.
    pub fn search(&self, query: &Context) -> Result<SearchOutcome> {
        query.validate()?;
        let qpos = query.positions();
        let mut node = self.root;
        let mut path = SearchPath::root();

        loop {
            let n = self.node_ref(node.0);
            if n.children.is_empty() {
                break;
            }
            let stats: Vec<ChildStat> = n
                .children
                .iter()
                .map(|c| self.child_stat(c.0, &qpos))
                .collect();

            if n.children.len() >= 2 {
                let min = stats
                    .iter()
                    .map(|s| s.distance)
                    .fold(f64::INFINITY, f64::min);
                let max = stats
                    .iter()
                    .map(|s| s.distance)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max - min <= EQUIDISTANT_EPS {
                    break;
                }
            }

            // A child is usable when descending into it cannot strand the
            // query: either its full context is covered by the query, or it
            // is a leaf sharing a non-empty leading run (the leaf can be
            // split on insert).
            let mut best: Option<(usize, &ChildStat)> = None;
            for (i, stat) in stats.iter().enumerate() {
                let usable = stat.run > 0 && (stat.covered || stat.leaf) && stat.distance < 1.0;
                if !usable {
                    continue;
                }
                best = match best {
                    None => Some((i, stat)),
                    Some((bi, bs)) => {
                        if stat.run > bs.run || (stat.run == bs.run && stat.distance < bs.distance)
                        {
                            Some((i, stat))
                        } else {
                            Some((bi, bs))
                        }
                    }
                };
            }
            match best {
                None => break,
                Some((i, _)) => {
                    path = path.child(i);
                    node = n.children[i];
                }
            }
        }

        let n = self.node_ref(node.0);
        let run = leading_run(&n.context, &qpos);
        Ok(SearchOutcome {
            node,
            path,
            shared_prefix: n.context[..run].to_vec(),
        })
    }

    fn child_stat(&self, idx: usize, qpos: &HashMap<DocId, usize>) -> ChildStat {
        let node = self.node_ref(idx);
        let ctx = &node.context;
        let mut shared = 0usize;
        let mut displacement = 0u64;
        let mut run = 0usize;
        let mut running = true;
        for (pc, doc) in ctx.iter().enumerate() {
            match qpos.get(doc) {
                Some(pq) => {
                    shared += 1;
                    displacement += pq.abs_diff(pc) as u64;
                    if running {
                        run += 1;
                    }
                }
                None => running = false,
            }
        }
        // Distance normalized by the node's own length: how fully the query
        // covers this cached prefix.
        let distance = if shared == 0 || ctx.is_empty() {
            1.0
        } else {
            1.0 - shared as f64 / ctx.len() as f64
                + self.params.alpha * (displacement as f64 / shared as f64)
        };
        ChildStat {
            distance,
            run,
            covered: shared == ctx.len() && !ctx.is_empty(),
            leaf: node.children.is_empty(),
        }
    }

    /// Registers a context at the point found by `search`. Matching an
    /// internal node appends the new context as a child; matching a leaf
    /// splits it: a virtual node carrying the shared leading run replaces
    /// the leaf in its parent and adopts both the old leaf and the new one.
    /// Returns the new leaf's path.
    pub fn insert(&mut self, query: &Context, at: NodeId, path: &SearchPath) -> Result<SearchPath> {
        query.validate()?;
        let resolved = self.traverse(path)?;
        if resolved != at {
            return Err(Error::invalid_path(
                path,
                "tree changed since search; path no longer reaches the match node",
            ));
        }
        let qpos = query.positions();
        let at_node = self.node_ref(at.0);

        if !at_node.children.is_empty() || at == self.root {
            // Internal match: O(1) append.
            let prefix = at_node.context.clone();
            if prefix.iter().any(|d| !qpos.contains_key(d)) {
                return Err(Error::invalid_path(
                    path,
                    "insertion point's context is not covered by the query",
                ));
            }
            let context = ordered_docs(&prefix, query);
            let created = self.next_created();
            let child_idx = self.node_ref(at.0).children.len();
            let leaf_path = self.node_ref(at.0).path.child(child_idx);
            let leaf = self.alloc(IndexNode {
                context,
                path: leaf_path.clone(),
                seq_len: 0,
                multi_turn: false,
                children: Vec::new(),
                last_access: 0,
                is_virtual: false,
                parent: Some(at),
                created,
            });
            self.node_mut(at.0).children.push(leaf);
            Ok(leaf_path)
        } else {
            // Leaf match: split on the shared leading run.
            let run = leading_run(&at_node.context, &qpos);
            if run == 0 {
                return Err(Error::invalid_path(
                    path,
                    "leaf insertion point shares no prefix with the query",
                ));
            }
            let shared: Vec<DocId> = at_node.context[..run].to_vec();
            let parent = at_node.parent.expect("non-root leaf has a parent");
            let slot = self
                .node_ref(parent.0)
                .children
                .iter()
                .position(|c| *c == at)
                .expect("leaf registered with its parent");

            let v_path = self.node_ref(at.0).path.clone();
            let created = self.next_created();
            let virtual_id = self.alloc(IndexNode {
                context: shared.clone(),
                path: v_path.clone(),
                seq_len: 0,
                multi_turn: false,
                children: Vec::new(),
                last_access: 0,
                is_virtual: true,
                parent: Some(parent),
                created,
            });
            self.node_mut(parent.0).children[slot] = virtual_id;

            let leaf_context = ordered_docs(&shared, query);
            let leaf_created = self.next_created();
            let new_leaf = self.alloc(IndexNode {
                context: leaf_context,
                path: v_path.child(1),
                seq_len: 0,
                multi_turn: false,
                children: Vec::new(),
                last_access: 0,
                is_virtual: false,
                parent: Some(virtual_id),
                created: leaf_created,
            });

            {
                let old = self.node_mut(at.0);
                old.parent = Some(virtual_id);
                old.path = v_path.child(0);
            }
            let v = self.node_mut(virtual_id.0);
            v.children = vec![at, new_leaf];
            Ok(v_path.child(1))
        }
    }

    /// Follows `path` from the root and returns the node it ends on.
    pub fn traverse(&self, path: &SearchPath) -> Result<NodeId> {
        let mut node = self.root;
        for (depth, step) in path.steps.iter().enumerate() {
            let n = self.node_ref(node.0);
            node = *n.children.get(*step).ok_or_else(|| {
                Error::invalid_path(
                    path,
                    format!("child index {step} out of range at depth {depth}"),
                )
            })?;
        }
        Ok(node)
    }

    /// Applies a prefix-cache notification. Evictions drain tokens from the
    /// least recently used nodes; nodes drained to zero with no children are
    /// detached, recursively removing parents left empty.
    pub fn apply_cache_event(&mut self, event: &CacheEvent) -> Result<()> {
        match event {
            CacheEvent::Appended { path, n_tokens } => {
                let id = self.traverse(path)?;
                let stamp = self.tick();
                let node = self.node_mut(id.0);
                node.seq_len += n_tokens;
                node.last_access = stamp;
                let created = node.created;
                if node.seq_len > 0 {
                    self.access_heap.push(Reverse((stamp, created, id.0)));
                }
                Ok(())
            }
            CacheEvent::Accessed { path } => {
                let id = self.traverse(path)?;
                let stamp = self.tick();
                let node = self.node_mut(id.0);
                node.last_access = stamp;
                let created = node.created;
                if node.seq_len > 0 {
                    self.access_heap.push(Reverse((stamp, created, id.0)));
                }
                Ok(())
            }
            CacheEvent::Evicted { n_tokens } => {
                self.evict(*n_tokens);
                Ok(())
            }
        }
    }

    fn evict(&mut self, n_tokens: u64) {
        let mut remaining = n_tokens;
        while remaining > 0 {
            let entry = match self.access_heap.pop() {
                Some(Reverse(e)) => e,
                None => break,
            };
            let (stamp, _created, idx) = entry;
            let valid = self
                .arena
                .get(idx)
                .and_then(|slot| slot.as_ref())
                .map(|n| n.last_access == stamp && n.seq_len > 0)
                .unwrap_or(false);
            if !valid {
                continue;
            }
            let node = self.node_mut(idx);
            let take = node.seq_len.min(remaining);
            node.seq_len -= take;
            remaining -= take;
            if node.seq_len == 0 {
                if node.children.is_empty() && NodeId(idx) != self.root {
                    self.detach(NodeId(idx));
                }
            } else {
                let created = node.created;
                let last = node.last_access;
                self.access_heap.push(Reverse((last, created, idx)));
            }
        }
    }

    /// Removes a childless node from its parent, renumbering the paths of
    /// any shifted siblings, and removes parents left with no children and
    /// no cached tokens.
    fn detach(&mut self, id: NodeId) {
        let parent = match self.node_ref(id.0).parent {
            Some(p) => p,
            None => return, // never detach the root
        };
        let slot = self
            .node_ref(parent.0)
            .children
            .iter()
            .position(|c| *c == id)
            .expect("child registered with parent");
        self.node_mut(parent.0).children.remove(slot);
        self.arena[id.0] = None;

        let (parent_path, shifted): (SearchPath, Vec<NodeId>) = {
            let p = self.node_ref(parent.0);
            (p.path.clone(), p.children[slot..].to_vec())
        };
        for (offset, child) in shifted.into_iter().enumerate() {
            self.assign_paths(child, parent_path.child(slot + offset));
        }

        let parent_node = self.node_ref(parent.0);
        if parent_node.children.is_empty() && parent_node.seq_len == 0 && parent != self.root {
            self.detach(parent);
        }
    }

    /// Marks the index node backing a multi-turn session.
    pub fn set_multi_turn(&mut self, id: NodeId, value: bool) -> Result<()> {
        if !self.is_alive(id) {
            return Err(Error::InvalidPath {
                path: vec![],
                reason: format!("node {} is not alive", id.0),
            });
        }
        self.node_mut(id.0).multi_turn = value;
        Ok(())
    }

    /// Checks the structural invariants over the whole tree. Test and
    /// import-time support.
    pub fn check_invariants(&self) -> Result<()> {
        let mut visited = 0usize;
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            visited += 1;
            let node = self
                .node(id)
                .ok_or_else(|| Error::Config(format!("node {} referenced but not alive", id.0)))?;
            if let Some(parent) = node.parent {
                let p = self.node(parent).ok_or_else(|| {
                    Error::Config(format!("parent {} of node {} dead", parent.0, id.0))
                })?;
                if !node.context.starts_with(&p.context) {
                    return Err(Error::Config(format!(
                        "prefix integrity violated at node {}",
                        id.0
                    )));
                }
                let slot = p.children.iter().position(|c| *c == id).ok_or_else(|| {
                    Error::Config(format!("node {} missing from parent child list", id.0))
                })?;
                if node.path != p.path.child(slot) {
                    return Err(Error::Config(format!(
                        "path of node {} inconsistent with its position",
                        id.0
                    )));
                }
            } else if id != self.root {
                return Err(Error::Config(format!(
                    "non-root node {} has no parent",
                    id.0
                )));
            }
            let mut seen = HashSet::new();
            for doc in &node.context {
                if !seen.insert(*doc) {
                    return Err(Error::Config(format!(
                        "duplicate doc {doc} in context of node {}",
                        id.0
                    )));
                }
            }
            stack.extend(node.children.iter().copied());
        }
        if visited != self.node_count() {
            return Err(Error::Config(format!(
                "{} live nodes but {} reachable from root",
                self.node_count(),
                visited
            )));
        }
        Ok(())
    }

    /// Exports the tree as a flat node list with parent references. Node ids
    /// are renumbered in depth-first order, so a snapshot is canonical for a
    /// given tree shape.
    pub fn snapshot(&self) -> IndexSnapshot {
        let mut nodes = Vec::with_capacity(self.node_count());
        let mut renumber: HashMap<usize, usize> = HashMap::new();
        let mut stack = vec![self.root];
        // Depth-first, children in order: use an explicit stack of iterators
        // to keep sibling order stable.
        let mut ordered = Vec::new();
        while let Some(id) = stack.pop() {
            ordered.push(id);
            let node = self.node_ref(id.0);
            for child in node.children.iter().rev() {
                stack.push(*child);
            }
        }
        for (new_id, id) in ordered.iter().enumerate() {
            renumber.insert(id.0, new_id);
        }
        for id in &ordered {
            let node = self.node_ref(id.0);
            nodes.push(SnapshotNode {
                id: renumber[&id.0],
                parent: node.parent.map(|p| renumber[&p.0]),
                context: node.context.clone(),
                seq_len: node.seq_len,
                multi_turn: node.multi_turn,
                is_virtual: node.is_virtual,
                last_access: node.last_access,
            });
        }
        IndexSnapshot {
            alpha: self.params.alpha,
            clock: self.clock,
            nodes,
        }
    }

    /// Rebuilds an index from a snapshot, validating the invariants.
    pub fn from_snapshot(snapshot: &IndexSnapshot) -> Result<Self> {
        if snapshot.nodes.is_empty() || snapshot.nodes[0].parent.is_some() {
            return Err(Error::Config(
                "snapshot must start with a parentless root".into(),
            ));
        }
        let params = DistanceParams::unchecked(snapshot.alpha);
        let mut index = ContextIndex::new(params);
        index.clock = snapshot.clock;

        for (i, snap) in snapshot.nodes.iter().enumerate() {
            if snap.id != i {
                return Err(Error::Config("snapshot node ids must be sequential".into()));
            }
            if i == 0 {
                let root = index.root;
                let node = index.node_mut(root.0);
                node.context = snap.context.clone();
                node.seq_len = snap.seq_len;
                node.multi_turn = snap.multi_turn;
                node.last_access = snap.last_access;
                continue;
            }
            let parent = NodeId(
                snap.parent
                    .ok_or_else(|| Error::Config(format!("node {i} has no parent")))?,
            );
            if !index.is_alive(parent) {
                return Err(Error::Config(format!("node {i} references unknown parent")));
            }
            let created = index.next_created();
            let id = index.alloc(IndexNode {
                context: snap.context.clone(),
                path: SearchPath::root(),
                seq_len: snap.seq_len,
                multi_turn: snap.multi_turn,
                children: Vec::new(),
                last_access: snap.last_access,
                is_virtual: snap.is_virtual,
                parent: Some(parent),
                created,
            });
            index.node_mut(parent.0).children.push(id);
        }
        let root = index.root;
        index.assign_paths(root, SearchPath::root());
        index.check_invariants()?;
        for i in 0..index.arena.len() {
            if let Some(node) = &index.arena[i] {
                if node.seq_len > 0 {
                    let entry = (node.last_access, node.created, i);
                    index.access_heap.push(Reverse(entry));
                }
            }
        }
        Ok(index)
    }
}

struct ChildStat {
    distance: f64,
    run: usize,
    covered: bool,
    leaf: bool,
}

/// Length of the longest leading run of `context` whose documents all appear
/// in the query.
fn leading_run(context: &[DocId], qpos: &HashMap<DocId, usize>) -> usize {
    context.iter().take_while(|d| qpos.contains_key(d)).count()
}

/// Prefix followed by the query's remaining documents in retrieval order.
fn ordered_docs(prefix: &[DocId], query: &Context) -> Vec<DocId> {
    let prefix_set: HashSet<DocId> = prefix.iter().copied().collect();
    let mut docs = prefix.to_vec();
    docs.extend(query.docs.iter().filter(|d| !prefix_set.contains(d)));
    docs
}

/// JSON-serializable view of the whole tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSnapshot {
    pub alpha: f64,
    pub clock: u64,
    pub nodes: Vec<SnapshotNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub context: Vec<DocId>,
    pub seq_len: u64,
    pub multi_turn: bool,
    pub is_virtual: bool,
    pub last_access: u64,
}

// ── Agglomerative clustering ─────────────────────────────────────────────

enum BuildNode {
    Leaf {
        input: usize,
    },
    Virtual {
        set: Vec<DocId>, // ascending
        children: Vec<BuildNode>,
    },
}

struct Cluster {
    /// Creation order: input index for leaves, then one per merge.
    id: usize,
    /// Representative document list; retrieval order for leaves,
    /// ascending-sorted intersection for merged clusters.
    rep: Vec<DocId>,
    rep_pos: HashMap<DocId, usize>,
    tree: BuildNode,
}

impl Cluster {
    fn leaf(input: usize, ctx: &Context) -> Self {
        Cluster {
            id: input,
            rep: ctx.docs.clone(),
            rep_pos: ctx.positions(),
            tree: BuildNode::Leaf { input },
        }
    }
}

fn rep_distance(a: &Cluster, b: &Cluster, alpha: f64) -> f64 {
    let mut shared = 0usize;
    let mut displacement = 0u64;
    for (pb, doc) in b.rep.iter().enumerate() {
        if let Some(pa) = a.rep_pos.get(doc) {
            shared += 1;
            displacement += pa.abs_diff(pb) as u64;
        }
    }
    distance_from_parts(shared, displacement, a.rep.len().max(b.rep.len()), alpha)
}

/// Nearest-partner entry: (distance, tie-breaking id pair, partner slot).
type Neighbor = (f64, (usize, usize), usize);

/// Nearest active partner of `slot`, ranked by (distance, id-pair).
fn nearest(
    slot: usize,
    matrix: &[f64],
    n: usize,
    clusters: &[Option<Cluster>],
) -> Option<Neighbor> {
    let my_id = clusters[slot].as_ref()?.id;
    let mut best: Option<Neighbor> = None;
    for (other, cl) in clusters.iter().enumerate() {
        if other == slot {
            continue;
        }
        let Some(cl) = cl else { continue };
        let d = matrix[slot * n + other];
        let pair = (my_id.min(cl.id), my_id.max(cl.id));
        let candidate = (d, pair, other);
        best = match best {
            None => Some(candidate),
            Some(cur) => {
                if (d, pair) < (cur.0, cur.1) {
                    Some(candidate)
                } else {
                    Some(cur)
                }
            }
        };
    }
    best
}

/// Agglomerative merge loop. Returns the resulting cluster forest in slot
/// order; a single tree when every cluster chain overlaps, several when
/// merging stopped at fully disjoint groups.
fn cluster(contexts: &[Context], alpha: f64) -> Vec<BuildNode> {
    let n = contexts.len();
    if n == 1 {
        return vec![BuildNode::Leaf { input: 0 }];
    }

    let mut clusters: Vec<Option<Cluster>> = contexts
        .iter()
        .enumerate()
        .map(|(i, c)| Some(Cluster::leaf(i, c)))
        .collect();
    let mut next_id = n;

    let mut matrix = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = rep_distance(
                clusters[i].as_ref().unwrap(),
                clusters[j].as_ref().unwrap(),
                alpha,
            );
            matrix[i * n + j] = d;
            matrix[j * n + i] = d;
        }
    }
    let mut nn: Vec<Option<Neighbor>> = (0..n).map(|i| nearest(i, &matrix, n, &clusters)).collect();

    let mut active = n;
    while active > 1 {
        // Global minimum over per-slot nearest neighbours.
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for (slot, entry) in nn.iter().enumerate() {
            if clusters[slot].is_none() {
                continue;
            }
            if let Some((d, pair, other)) = entry {
                let candidate = (*d, *pair, slot, *other);
                best = match best {
                    None => Some(candidate),
                    Some(cur) => {
                        if (candidate.0, candidate.1) < (cur.0, cur.1) {
                            Some(candidate)
                        } else {
                            Some(cur)
                        }
                    }
                };
            }
        }
        let Some((d, _pair, slot_a, slot_b)) = best else {
            break;
        };
        if d >= 1.0 {
            // Closest remaining pair is disjoint; further merging would
            // create empty shared prefixes.
            break;
        }
        let (keep, drop) = (slot_a.min(slot_b), slot_a.max(slot_b));
        let a = clusters[keep].take().unwrap();
        let b = clusters[drop].take().unwrap();

        // Sorted intersection of the two representatives.
        let mut set: Vec<DocId> = a
            .rep
            .iter()
            .filter(|doc| b.rep_pos.contains_key(doc))
            .copied()
            .collect();
        set.sort_unstable();
        let rep_pos: HashMap<DocId, usize> = set.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        let merged = Cluster {
            id: next_id,
            rep: set.clone(),
            rep_pos,
            tree: BuildNode::Virtual {
                set,
                children: vec![a.tree, b.tree],
            },
        };
        next_id += 1;
        clusters[keep] = Some(merged);
        nn[drop] = None;
        active -= 1;

        // Refresh the kept slot's row, then repair nearest-neighbour entries.
        for other in 0..n {
            if other == keep || clusters[other].is_none() {
                continue;
            }
            let d = rep_distance(
                clusters[keep].as_ref().unwrap(),
                clusters[other].as_ref().unwrap(),
                alpha,
            );
            matrix[keep * n + other] = d;
            matrix[other * n + keep] = d;
        }
        nn[keep] = nearest(keep, &matrix, n, &clusters);
        let keep_id = clusters[keep].as_ref().unwrap().id;
        for other in 0..n {
            if other == keep || clusters[other].is_none() {
                continue;
            }
            let needs_rescan = match &nn[other] {
                Some((_, _, partner)) => *partner == keep || *partner == drop,
                None => true,
            };
            if needs_rescan {
                nn[other] = nearest(other, &matrix, n, &clusters);
            } else {
                let d = matrix[other * n + keep];
                let other_id = clusters[other].as_ref().unwrap().id;
                let pair = (other_id.min(keep_id), other_id.max(keep_id));
                if let Some(cur) = &nn[other] {
                    if (d, pair) < (cur.0, cur.1) {
                        nn[other] = Some((d, pair, keep));
                    }
                }
            }
        }
    }

    clusters.into_iter().flatten().map(|c| c.tree).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn ctx(docs: &[u64]) -> Context {
        Context::with_uniform_tokens(docs.iter().map(|d| DocId(*d)).collect(), 1024, "s", 0)
            .unwrap()
    }

    fn docs(ids: &[u64]) -> Vec<DocId> {
        ids.iter().map(|d| DocId(*d)).collect()
    }

    /// Worked three-context fixture: {2,1,3}, {2,6,1}, {4,1,0}.
    fn worked_index() -> ContextIndex {
        ContextIndex::build(
            &[ctx(&[2, 1, 3]), ctx(&[2, 6, 1]), ctx(&[4, 1, 0])],
            DistanceParams::default(),
        )
        .unwrap()
    }

    #[test]
    fn build_worked_example_structure() {
        let index = worked_index();
        index.check_invariants().unwrap();

        let root = index.node(index.root()).unwrap();
        assert_eq!(root.context, Vec::<DocId>::new());
        assert_eq!(root.children.len(), 1);

        // Root-level virtual node with context {1}.
        let top = index.node(root.children[0]).unwrap();
        assert!(top.is_virtual);
        assert_eq!(top.context, docs(&[1]));
        assert_eq!(top.children.len(), 2);

        // First child: virtual {1,2} over the two overlapping leaves.
        let pair = index.node(top.children[0]).unwrap();
        assert!(pair.is_virtual);
        assert_eq!(pair.context, docs(&[1, 2]));
        assert_eq!(pair.path.steps, vec![0, 0]);
        let leaf_a = index.node(pair.children[0]).unwrap();
        let leaf_b = index.node(pair.children[1]).unwrap();
        assert_eq!(leaf_a.context, docs(&[1, 2, 3]));
        assert_eq!(leaf_b.context, docs(&[1, 2, 6]));
        assert_eq!(leaf_a.path.steps, vec![0, 0, 0]);
        assert_eq!(leaf_b.path.steps, vec![0, 0, 1]);

        // Second child: the standalone leaf, prefix-first.
        let leaf_c = index.node(top.children[1]).unwrap();
        assert!(!leaf_c.is_virtual);
        assert_eq!(leaf_c.context, docs(&[1, 4, 0]));
        assert_eq!(leaf_c.path.steps, vec![0, 1]);
    }

    #[test]
    fn build_single_context() {
        let index = ContextIndex::build(&[ctx(&[9, 3, 5])], DistanceParams::default()).unwrap();
        let root = index.node(index.root()).unwrap();
        assert_eq!(root.children.len(), 1);
        let leaf = index.node(root.children[0]).unwrap();
        assert_eq!(leaf.context, docs(&[9, 3, 5]));
        assert_eq!(leaf.path.steps, vec![0]);
        index.check_invariants().unwrap();
    }

    #[test]
    fn build_empty_input_rejected() {
        assert!(matches!(
            ContextIndex::build(&[], DistanceParams::default()),
            Err(Error::TooFewContexts { .. })
        ));
    }

    #[test]
    fn build_disjoint_contexts_form_separate_branches() {
        let index = ContextIndex::build(
            &[ctx(&[1, 2]), ctx(&[3, 4]), ctx(&[5, 6])],
            DistanceParams::default(),
        )
        .unwrap();
        let root = index.node(index.root()).unwrap();
        assert_eq!(root.children.len(), 3);
        for (i, child) in root.children.iter().enumerate() {
            let leaf = index.node(*child).unwrap();
            assert!(leaf.is_leaf());
            assert_eq!(leaf.path.steps, vec![i]);
        }
    }

    /// Leaf document sets beneath each virtual node, for the intersection
    /// oracle.
    fn leaf_sets_below(index: &ContextIndex, id: NodeId) -> Vec<HashSet<DocId>> {
        let node = index.node(id).unwrap();
        if node.is_leaf() {
            return vec![node.context.iter().copied().collect()];
        }
        node.children
            .iter()
            .flat_map(|c| leaf_sets_below(index, *c))
            .collect()
    }

    #[test]
    fn build_random_paths_and_intersections() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for round in 0..40 {
            let n = 6;
            let contexts: Vec<Context> = (0..n)
                .map(|_| {
                    let mut pool: Vec<u64> = (0..10).collect();
                    pool.shuffle(&mut rng);
                    ctx(&pool[..4])
                })
                .collect();
            let index = ContextIndex::build(&contexts, DistanceParams::default()).unwrap();
            index.check_invariants().unwrap();

            // Every leaf's stored path replays to that leaf.
            for leaf in index.leaves() {
                let path = index.node(leaf).unwrap().path.clone();
                assert_eq!(index.traverse(&path).unwrap(), leaf, "round {round}");
            }

            // Every virtual node's context set is the intersection of all
            // leaf document sets beneath it, and the part beyond the parent
            // prefix is ascending-sorted.
            let mut stack = vec![index.root()];
            while let Some(id) = stack.pop() {
                let node = index.node(id).unwrap();
                stack.extend(node.children.iter().copied());
                if !node.is_virtual || id == index.root() {
                    continue;
                }
                let sets = leaf_sets_below(&index, id);
                let mut expect: Vec<DocId> = sets[0]
                    .iter()
                    .filter(|d| sets.iter().all(|s| s.contains(*d)))
                    .copied()
                    .collect();
                expect.sort_unstable();
                let mut got: Vec<DocId> = node.context.clone();
                got.sort_unstable();
                assert_eq!(
                    got, expect,
                    "round {round}: virtual context is the shared set"
                );

                let parent_len = node
                    .parent
                    .map(|p| index.node(p).unwrap().context.len())
                    .unwrap_or(0);
                let delta = &node.context[parent_len..];
                assert!(delta.windows(2).all(|w| w[0] < w[1]), "delta sorted");
            }
        }
    }

    #[test]
    fn build_is_deterministic() {
        let contexts = vec![
            ctx(&[2, 1, 3]),
            ctx(&[2, 6, 1]),
            ctx(&[4, 1, 0]),
            ctx(&[7, 1, 2]),
            ctx(&[8, 9, 1]),
        ];
        let a = ContextIndex::build(&contexts, DistanceParams::default()).unwrap();
        let b = ContextIndex::build(&contexts, DistanceParams::default()).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn search_worked_example() {
        let mut index = worked_index();
        let query = ctx(&[2, 1, 4]);
        let outcome = index.search(&query).unwrap();
        assert_eq!(outcome.path.steps, vec![0, 0]);
        let node = index.node(outcome.node).unwrap();
        assert_eq!(node.context, docs(&[1, 2]));
        assert_eq!(outcome.shared_prefix, docs(&[1, 2]));

        let path = index.insert(&query, outcome.node, &outcome.path).unwrap();
        assert_eq!(path.steps, vec![0, 0, 2]);
        let leaf = index.traverse(&path).unwrap();
        assert_eq!(index.node(leaf).unwrap().context, docs(&[1, 2, 4]));
        index.check_invariants().unwrap();
    }

    #[test]
    fn search_exact_leaf_is_distance_zero() {
        let index = worked_index();
        // Stored leaf order for the first context is {1,2,3}.
        let query = ctx(&[1, 2, 3]);
        let qpos = query.positions();
        let outcome = index.search(&query).unwrap();
        let node = index.node(outcome.node).unwrap();
        assert!(node.is_leaf());
        assert_eq!(node.context, docs(&[1, 2, 3]));
        assert_eq!(outcome.shared_prefix, docs(&[1, 2, 3]));
        // Distance is zero at every step of the recorded path.
        let mut cur = index.root();
        for step in &outcome.path.steps {
            let child = index.node(cur).unwrap().children[*step];
            let stat = index.child_stat(child.0, &qpos);
            assert_eq!(stat.distance, 0.0);
            cur = child;
        }
    }

    #[test]
    fn search_empty_tree_returns_root() {
        let index = ContextIndex::new(DistanceParams::default());
        let outcome = index.search(&ctx(&[1, 2])).unwrap();
        assert_eq!(outcome.node, index.root());
        assert!(outcome.path.is_root());
        assert!(outcome.shared_prefix.is_empty());
    }

    #[test]
    fn search_disjoint_query_stops_at_root() {
        let index = worked_index();
        let outcome = index.search(&ctx(&[5, 7, 8])).unwrap();
        assert_eq!(outcome.node, index.root());
        assert!(outcome.shared_prefix.is_empty());
    }

    #[test]
    fn insert_into_empty_tree() {
        let mut index = ContextIndex::new(DistanceParams::default());
        let query = ctx(&[5, 7, 8]);
        let outcome = index.search(&query).unwrap();
        let path = index.insert(&query, outcome.node, &outcome.path).unwrap();
        assert_eq!(path.steps, vec![0]);
        let leaf = index.traverse(&path).unwrap();
        assert_eq!(index.node(leaf).unwrap().context, docs(&[5, 7, 8]));
    }

    #[test]
    fn insert_duplicate_of_leaf_splits_with_full_context() {
        let mut index = worked_index();
        let query = ctx(&[1, 2, 3]);
        let outcome = index.search(&query).unwrap();
        let at = outcome.node;
        assert!(index.node(at).unwrap().is_leaf());
        let path = index.insert(&query, at, &outcome.path).unwrap();

        // A virtual parent now carries the leaf's full context; both
        // children share it as their prefix.
        let leaf = index.traverse(&path).unwrap();
        let virt = index.node(leaf).unwrap().parent.unwrap();
        let vnode = index.node(virt).unwrap();
        assert!(vnode.is_virtual);
        assert_eq!(vnode.context, docs(&[1, 2, 3]));
        assert_eq!(vnode.children.len(), 2);
        for child in &vnode.children {
            assert!(index
                .node(*child)
                .unwrap()
                .context
                .starts_with(&vnode.context));
        }
        index.check_invariants().unwrap();
    }

    #[test]
    fn insert_partial_leaf_match_splits_on_shared_run() {
        let mut index = ContextIndex::new(DistanceParams::default());
        let first = ctx(&[1, 4, 0]);
        let o = index.search(&first).unwrap();
        index.insert(&first, o.node, &o.path).unwrap();

        // Shares the leading {1,4} with the stored leaf but then diverges.
        let second = ctx(&[4, 1, 9]);
        let o = index.search(&second).unwrap();
        assert!(index.node(o.node).unwrap().is_leaf());
        let path = index.insert(&second, o.node, &o.path).unwrap();
        let leaf = index.traverse(&path).unwrap();
        assert_eq!(index.node(leaf).unwrap().context, docs(&[1, 4, 9]));
        let virt = index.node(leaf).unwrap().parent.unwrap();
        assert_eq!(index.node(virt).unwrap().context, docs(&[1, 4]));
        index.check_invariants().unwrap();
    }

    #[test]
    fn insert_with_stale_path_is_rejected() {
        let mut index = worked_index();
        let query = ctx(&[2, 1, 4]);
        let outcome = index.search(&query).unwrap();

        // Mutate the tree between search and insert: evict everything under
        // a sibling so child indices shift.
        let path_c3 = SearchPath::from_steps(vec![0, 1]);
        index
            .apply_cache_event(&CacheEvent::Appended {
                path: path_c3,
                n_tokens: 10,
            })
            .unwrap();
        index
            .apply_cache_event(&CacheEvent::Evicted { n_tokens: 10 })
            .unwrap();

        // The old match node {1,2} still exists at [0,0]; an insert with a
        // genuinely stale pair must fail. Forge one by pointing the path at
        // the (still live) top node while claiming the match was the pair
        // node.
        let err = index
            .insert(&query, outcome.node, &SearchPath::from_steps(vec![0]))
            .unwrap_err();
        assert!(matches!(err, Error::InvalidPath { .. }));
    }

    #[test]
    fn insert_rejects_an_uncovered_insertion_point() {
        let mut index = worked_index();
        // Bypass search and aim a query with no shared docs at the {1,2}
        // node; the insert must refuse rather than break prefix nesting.
        let at = index.traverse(&SearchPath::from_steps(vec![0, 0])).unwrap();
        let err = index
            .insert(&ctx(&[7, 8]), at, &SearchPath::from_steps(vec![0, 0]))
            .unwrap_err();
        assert!(matches!(err, Error::InvalidPath { .. }));
    }

    #[test]
    fn traverse_worked_example() {
        let index = worked_index();
        let pair = index.traverse(&SearchPath::from_steps(vec![0, 0])).unwrap();
        assert_eq!(index.node(pair).unwrap().context, docs(&[1, 2]));
        assert_eq!(index.traverse(&SearchPath::root()).unwrap(), index.root());
        assert!(matches!(
            index.traverse(&SearchPath::from_steps(vec![0, 9])),
            Err(Error::InvalidPath { .. })
        ));
    }

    #[test]
    fn eviction_drains_least_recent_first() {
        let mut index = ContextIndex::new(DistanceParams::default());
        for c in [ctx(&[1, 2]), ctx(&[3, 4])] {
            let o = index.search(&c).unwrap();
            index.insert(&c, o.node, &o.path).unwrap();
        }
        let path_a = SearchPath::from_steps(vec![0]);
        let path_b = SearchPath::from_steps(vec![1]);
        index
            .apply_cache_event(&CacheEvent::Appended {
                path: path_a.clone(),
                n_tokens: 100,
            })
            .unwrap();
        index
            .apply_cache_event(&CacheEvent::Appended {
                path: path_b.clone(),
                n_tokens: 100,
            })
            .unwrap();

        // A is least recent; an eviction of 150 removes A entirely (100)
        // and leaves B at 50.
        index
            .apply_cache_event(&CacheEvent::Evicted { n_tokens: 150 })
            .unwrap();
        assert_eq!(index.total_seq_len(), 50);
        // A's branch is gone; B shifted into slot 0.
        let root = index.node(index.root()).unwrap();
        assert_eq!(root.children.len(), 1);
        let b = index.node(root.children[0]).unwrap();
        assert_eq!(b.context, docs(&[3, 4]));
        assert_eq!(b.seq_len, 50);
        assert_eq!(b.path.steps, vec![0]);
        index.check_invariants().unwrap();
    }

    #[test]
    fn eviction_of_zero_tokens_is_a_no_op() {
        let mut index = worked_index();
        let snap = index.snapshot();
        index
            .apply_cache_event(&CacheEvent::Evicted { n_tokens: 0 })
            .unwrap();
        assert_eq!(index.snapshot(), snap);
    }

    #[test]
    fn accessed_refreshes_eviction_order() {
        let mut index = ContextIndex::new(DistanceParams::default());
        for c in [ctx(&[1, 2]), ctx(&[3, 4])] {
            let o = index.search(&c).unwrap();
            index.insert(&c, o.node, &o.path).unwrap();
        }
        let path_a = SearchPath::from_steps(vec![0]);
        let path_b = SearchPath::from_steps(vec![1]);
        index
            .apply_cache_event(&CacheEvent::Appended {
                path: path_a.clone(),
                n_tokens: 100,
            })
            .unwrap();
        index
            .apply_cache_event(&CacheEvent::Appended {
                path: path_b,
                n_tokens: 100,
            })
            .unwrap();
        // Touch A so B becomes the eviction victim.
        index
            .apply_cache_event(&CacheEvent::Accessed {
                path: path_a.clone(),
            })
            .unwrap();
        index
            .apply_cache_event(&CacheEvent::Evicted { n_tokens: 100 })
            .unwrap();
        let a = index.traverse(&path_a).unwrap();
        assert_eq!(index.node(a).unwrap().seq_len, 100);
        assert_eq!(index.total_seq_len(), 100);
    }

    #[test]
    fn token_conservation_under_random_events() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let contexts: Vec<Context> = (0..5)
                .map(|_| {
                    let mut pool: Vec<u64> = (0..12).collect();
                    pool.shuffle(&mut rng);
                    ctx(&pool[..4])
                })
                .collect();
            let mut index = ContextIndex::build(&contexts, DistanceParams::default()).unwrap();
            let mut expected: i128 = 0;
            for _ in 0..60 {
                let leaves = index.leaves();
                match rng.gen_range(0..3) {
                    0 if !leaves.is_empty() => {
                        let leaf = leaves[rng.gen_range(0..leaves.len())];
                        let path = index.node(leaf).unwrap().path.clone();
                        let n = rng.gen_range(1..200u64);
                        index
                            .apply_cache_event(&CacheEvent::Appended { path, n_tokens: n })
                            .unwrap();
                        expected += n as i128;
                    }
                    1 if !leaves.is_empty() => {
                        let leaf = leaves[rng.gen_range(0..leaves.len())];
                        let path = index.node(leaf).unwrap().path.clone();
                        index
                            .apply_cache_event(&CacheEvent::Accessed { path })
                            .unwrap();
                    }
                    _ => {
                        let n = rng.gen_range(0..300u64);
                        let available = index.total_seq_len() as i128;
                        index
                            .apply_cache_event(&CacheEvent::Evicted { n_tokens: n })
                            .unwrap();
                        expected -= available.min(n as i128);
                    }
                }
                assert_eq!(index.total_seq_len() as i128, expected);
                index.check_invariants().unwrap();
            }
            // After draining everything, no childless node holds zero
            // tokens (ghosts) apart from nodes that never held any.
            index
                .apply_cache_event(&CacheEvent::Evicted { n_tokens: u64::MAX })
                .unwrap();
            assert_eq!(index.total_seq_len(), 0);
        }
    }

    #[test]
    fn zero_ghosts_after_eviction() {
        let mut index = ContextIndex::new(DistanceParams::default());
        for c in [ctx(&[1, 2, 3]), ctx(&[1, 2, 9]), ctx(&[7, 8])] {
            let o = index.search(&c).unwrap();
            let path = index.insert(&c, o.node, &o.path).unwrap();
            index
                .apply_cache_event(&CacheEvent::Appended { path, n_tokens: 64 })
                .unwrap();
        }
        index
            .apply_cache_event(&CacheEvent::Evicted { n_tokens: 1000 })
            .unwrap();
        // Everything drained away, including structural parents.
        assert_eq!(index.node_count(), 1);
        index.check_invariants().unwrap();
    }

    #[test]
    fn snapshot_round_trip() {
        let mut index = worked_index();
        let q = ctx(&[2, 1, 4]);
        let o = index.search(&q).unwrap();
        let path = index.insert(&q, o.node, &o.path).unwrap();
        index
            .apply_cache_event(&CacheEvent::Appended { path, n_tokens: 42 })
            .unwrap();

        let snap = index.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let parsed: IndexSnapshot = serde_json::from_str(&json).unwrap();
        let rebuilt = ContextIndex::from_snapshot(&parsed).unwrap();
        assert_eq!(rebuilt.snapshot(), snap);
        assert_eq!(rebuilt.total_seq_len(), 42);
        rebuilt.check_invariants().unwrap();
    }

    #[test]
    fn snapshot_rejects_corrupt_input() {
        let mut snap = worked_index().snapshot();
        // Break the prefix invariant.
        snap.nodes[2].context = docs(&[9, 9]);
        assert!(ContextIndex::from_snapshot(&snap).is_err());
    }
}
