//! Prefix-forest data structures for grouped rollouts.
//!
//! A [`RolloutForest`] holds the `M` trees that organize one prompt's `K`
//! rollouts. Each tree is an arena of [`Segment`]s: maximal runs of tokens
//! shared by every trajectory passing through them. Leaves are completed
//! rollouts; internal segments are shared prefixes. Behavior log-probs and
//! truncated entropies are recorded at sampling time so the behavior policy
//! never needs re-evaluation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into a fixed vocabulary.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u16);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Arena index of a segment within one tree.
pub type SegmentId = usize;

/// A segment within a specific tree of a forest.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentRef {
    pub tree: usize,
    pub segment: SegmentId,
}

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("segment {parent} already has a child starting with token {token:?}")]
    DuplicateBranchToken { parent: SegmentId, token: TokenId },
    #[error("forest is incomplete: tree {tree} segment {segment} has an unterminated path")]
    IncompleteForest { tree: usize, segment: SegmentId },
}

/// A maximal run of tokens shared by all trajectories through one tree node.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Segment {
    pub tokens: Vec<TokenId>,
    /// Per-token log pi_old, in nats, recorded at sampling time.
    pub behavior_logprobs: Vec<f64>,
    /// Per-token truncated entropy of the behavior distribution, in nats.
    pub entropies: Vec<f64>,
    pub parent: Option<SegmentId>,
    pub children: Vec<SegmentId>,
    /// Absolute generation-time index of this segment's first token.
    pub start_offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Absolute generation-time index one past this segment's last token.
    pub fn end_offset(&self) -> usize {
        self.start_offset + self.tokens.len()
    }
}

/// One prefix tree of rollouts for a prompt.
///
/// Segments are append-only during growth; a branch closes the current
/// segment and creates child segments rather than mutating history.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutTree {
    pub prompt: Vec<TokenId>,
    pub eos: TokenId,
    pub length_cap: usize,
    segments: Vec<Segment>,
    root: SegmentId,
}

impl RolloutTree {
    pub fn new(prompt: Vec<TokenId>, eos: TokenId, length_cap: usize) -> Self {
        let root = Segment {
            tokens: Vec::new(),
            behavior_logprobs: Vec::new(),
            entropies: Vec::new(),
            parent: None,
            children: Vec::new(),
            start_offset: 0,
        };
        RolloutTree {
            prompt,
            eos,
            length_cap,
            segments: vec![root],
            root: 0,
        }
    }

    pub fn root(&self) -> SegmentId {
        self.root
    }

    pub fn segment(&self, id: SegmentId) -> &Segment {
        &self.segments[id]
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn segment_ids(&self) -> impl Iterator<Item = SegmentId> {
        0..self.segments.len()
    }

    /// Appends one sampled token (with its recorded statistics) to a segment.
    pub fn push_token(&mut self, id: SegmentId, token: TokenId, logprob: f64, entropy: f64) {
        debug_assert!(self.segments[id].children.is_empty(), "segment already branched");
        let seg = &mut self.segments[id];
        seg.tokens.push(token);
        seg.behavior_logprobs.push(logprob);
        seg.entropies.push(entropy);
    }

    /// Creates a new child segment seeded with `first_token`.
    ///
    /// Children of one parent must begin with pairwise-distinct tokens.
    pub fn add_child(
        &mut self,
        parent: SegmentId,
        first_token: TokenId,
        logprob: f64,
        entropy: f64,
    ) -> Result<SegmentId, ForestError> {
        let duplicate = self.segments[parent]
            .children
            .iter()
            .any(|&c| self.segments[c].tokens.first() == Some(&first_token));
        if duplicate {
            return Err(ForestError::DuplicateBranchToken {
                parent,
                token: first_token,
            });
        }
        Ok(self.attach_child(parent, first_token, logprob, entropy))
    }

    /// Attaches a child without the distinct-first-token check.
    ///
    /// Root-restart fallback rollouts are independent linear paths and may
    /// legitimately repeat a sibling's first token; only branch points go
    /// through [`RolloutTree::add_child`].
    pub fn attach_restart(
        &mut self,
        parent: SegmentId,
        first_token: TokenId,
        logprob: f64,
        entropy: f64,
    ) -> SegmentId {
        self.attach_child(parent, first_token, logprob, entropy)
    }

    fn attach_child(
        &mut self,
        parent: SegmentId,
        first_token: TokenId,
        logprob: f64,
        entropy: f64,
    ) -> SegmentId {
        let start_offset = self.segments[parent].end_offset();
        let id = self.segments.len();
        self.segments.push(Segment {
            tokens: vec![first_token],
            behavior_logprobs: vec![logprob],
            entropies: vec![entropy],
            parent: Some(parent),
            children: Vec::new(),
            start_offset,
        });
        self.segments[parent].children.push(id);
        id
    }

    /// Converts a non-empty root into a child of a fresh zero-length root so
    /// that restart rollouts can be attached as siblings of the original path.
    pub fn interpose_synthetic_root(&mut self) {
        if self.segments[self.root].is_empty() {
            return;
        }
        let old_root = self.root;
        let id = self.segments.len();
        self.segments.push(Segment {
            tokens: Vec::new(),
            behavior_logprobs: Vec::new(),
            entropies: Vec::new(),
            parent: None,
            children: vec![old_root],
            start_offset: 0,
        });
        self.segments[old_root].parent = Some(id);
        self.root = id;
    }

    /// Leaf segments in deterministic depth-first order (children in
    /// creation order).
    pub fn leaf_segments(&self) -> Vec<SegmentId> {
        let mut leaves = Vec::new();
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let seg = &self.segments[id];
            if seg.is_leaf() {
                leaves.push(id);
            } else {
                for &c in seg.children.iter().rev() {
                    stack.push(c);
                }
            }
        }
        leaves
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_segments().len()
    }

    fn path_terminated(&self, leaf: SegmentId) -> bool {
        let seg = &self.segments[leaf];
        match seg.tokens.last() {
            Some(&t) => t == self.eos || seg.end_offset() >= self.length_cap,
            None => false,
        }
    }

    /// Segment chain from root to `leaf`, inclusive.
    pub fn path_to(&self, leaf: SegmentId) -> Vec<SegmentId> {
        let mut path = vec![leaf];
        let mut cur = leaf;
        while let Some(p) = self.segments[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Local leaf positions (in depth-first leaf order) covered by `segment`.
    pub fn leaves_under_local(&self, segment: SegmentId) -> Vec<usize> {
        let leaves = self.leaf_segments();
        let mut covered = vec![false; self.segments.len()];
        let mut stack = vec![segment];
        while let Some(id) = stack.pop() {
            covered[id] = true;
            stack.extend(&self.segments[id].children);
        }
        leaves
            .iter()
            .enumerate()
            .filter(|&(_, &l)| covered[l])
            .map(|(pos, _)| pos)
            .collect()
    }
}

/// One step of a flattened root-to-leaf trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Step {
    pub token: TokenId,
    pub behavior_logprob: f64,
    pub segment: SegmentRef,
    pub offset_in_segment: usize,
}

/// A root-to-leaf path flattened into per-step records.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryView {
    pub leaf_index: usize,
    pub steps: Vec<Step>,
    /// Scalar sequence-level reward; filled in by the environment.
    pub reward: f64,
}

impl TrajectoryView {
    pub fn tokens(&self) -> Vec<TokenId> {
        self.steps.iter().map(|s| s.token).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// The `M` prefix trees holding one prompt's `K` rollouts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RolloutForest {
    pub trees: Vec<RolloutTree>,
    pub k: usize,
    pub m: usize,
    /// Hash of the behavior-policy snapshot the forest was sampled under.
    pub policy_hash: u64,
}

impl RolloutForest {
    /// Offset of each tree's first leaf in the forest-global leaf order.
    fn leaf_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.trees.len());
        let mut acc = 0;
        for tree in &self.trees {
            offsets.push(acc);
            acc += tree.leaf_count();
        }
        offsets
    }

    /// Flattens every leaf into a [`TrajectoryView`], ordered by tree index
    /// then depth-first child order.
    pub fn enumerate_leaves(&self) -> Result<Vec<TrajectoryView>, ForestError> {
        let mut views = Vec::with_capacity(self.k);
        for (ti, tree) in self.trees.iter().enumerate() {
            for leaf in tree.leaf_segments() {
                if !tree.path_terminated(leaf) {
                    return Err(ForestError::IncompleteForest {
                        tree: ti,
                        segment: leaf,
                    });
                }
                let mut steps = Vec::new();
                for seg_id in tree.path_to(leaf) {
                    let seg = tree.segment(seg_id);
                    for (j, (&token, &logp)) in
                        seg.tokens.iter().zip(&seg.behavior_logprobs).enumerate()
                    {
                        steps.push(Step {
                            token,
                            behavior_logprob: logp,
                            segment: SegmentRef {
                                tree: ti,
                                segment: seg_id,
                            },
                            offset_in_segment: j,
                        });
                    }
                }
                views.push(TrajectoryView {
                    leaf_index: views.len(),
                    steps,
                    reward: 0.0,
                });
            }
        }
        Ok(views)
    }

    /// Forest-global leaf indices whose root-to-leaf path includes `segment`.
    pub fn leaves_under(&self, segment: SegmentRef) -> Vec<usize> {
        let offset = self.leaf_offsets()[segment.tree];
        self.trees[segment.tree]
            .leaves_under_local(segment.segment)
            .into_iter()
            .map(|pos| offset + pos)
            .collect()
    }

    /// Returns `(segment_sum, leaf_sum)`: total tokens with shared prefixes
    /// counted once, and counted once per leaf trajectory.
    pub fn total_generated_tokens(&self) -> (usize, usize) {
        let segment_sum = self
            .trees
            .iter()
            .map(|t| t.segment_ids().map(|s| t.segment(s).len()).sum::<usize>())
            .sum();
        let leaf_sum = self
            .trees
            .iter()
            .map(|t| {
                t.leaf_segments()
                    .into_iter()
                    .map(|l| {
                        t.path_to(l)
                            .into_iter()
                            .map(|s| t.segment(s).len())
                            .sum::<usize>()
                    })
                    .sum::<usize>()
            })
            .sum();
        (segment_sum, leaf_sum)
    }
}
