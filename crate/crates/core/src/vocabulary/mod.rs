//! Incremental visual vocabulary with an inverted index.
//!
//! Descriptors are quantized with the nearest-neighbor distance ratio test
//! against the two closest word prototypes; a descriptor that fails the test
//! founds a new word (mapping) or stays unassigned (query).

mod kdtree;

use std::collections::{BTreeMap, BTreeSet};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Descriptor, FamilyId, FeatureFrame, TwoNearest};
use crate::graph::NodeId;
use kdtree::KdTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WordId(pub u32);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VocabularyError {
    #[error("descriptor family mismatch: vocabulary {0}, frame {1}")]
    FamilyMismatch(FamilyId, FamilyId),
    #[error("vocabulary has no indexed nodes")]
    EmptyVocabulary,
    #[error("malformed vocabulary record: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualWord {
    pub id: WordId,
    pub prototype: Descriptor,
    /// Sorted by node id; counts are at least 1.
    pub postings: Vec<(NodeId, u32)>,
}

/// Nearest-neighbor search over word prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchBackend {
    /// Linear scan; the reference for tests.
    Exact,
    /// KD-tree over real prototypes, rebuilt every `rebuild_every` new words.
    /// Words added since the last rebuild are scanned linearly. Binary
    /// families always fall back to an exact Hamming scan.
    KdTree { max_checks: usize, rebuild_every: usize },
}

impl Default for SearchBackend {
    fn default() -> Self {
        SearchBackend::KdTree {
            max_checks: 96,
            rebuild_every: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Indexing {
    /// Mapping: new words may be created and postings are added for the node.
    Map(NodeId),
    /// Localization query: the vocabulary is left untouched.
    Query,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QuantizeStats {
    pub assigned: usize,
    pub new_words: usize,
}

/// Node similarity scores from the inverted index; absent nodes score 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LikelihoodVector {
    pub scores: BTreeMap<NodeId, f64>,
}

impl LikelihoodVector {
    pub fn get(&self, node: NodeId) -> f64 {
        self.scores.get(&node).copied().unwrap_or(0.0)
    }

    pub fn retain(&mut self, mut keep: impl FnMut(NodeId) -> bool) {
        self.scores.retain(|n, _| keep(*n));
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    family: FamilyId,
    words: Vec<VisualWord>,
    /// Number of word occurrences per indexed node.
    node_word_counts: BTreeMap<NodeId, u32>,
    backend: SearchBackend,
    tree: Option<KdTree>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.family == other.family
            && self.words == other.words
            && self.node_word_counts == other.node_word_counts
            && self.backend == other.backend
    }
}

impl Vocabulary {
    pub fn new(family: FamilyId, backend: SearchBackend) -> Self {
        Self {
            family,
            words: Vec::new(),
            node_word_counts: BTreeMap::new(),
            backend,
            tree: None,
        }
    }

    pub fn family(&self) -> FamilyId {
        self.family
    }

    pub fn backend(&self) -> SearchBackend {
        self.backend
    }

    pub fn words(&self) -> &[VisualWord] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn total_indexed_nodes(&self) -> usize {
        self.node_word_counts.len()
    }

    pub fn node_word_count(&self, node: NodeId) -> u32 {
        self.node_word_counts.get(&node).copied().unwrap_or(0)
    }

    pub fn total_postings(&self) -> u64 {
        self.words.iter().flat_map(|w| w.postings.iter()).map(|(_, c)| *c as u64).sum()
    }

    fn tree_size(&self) -> usize {
        self.tree.as_ref().map_or(0, |t| t.len())
    }

    fn uses_tree(&self) -> bool {
        matches!(self.backend, SearchBackend::KdTree { .. }) && !self.family.is_binary()
    }

    /// Rebuilds the search structure over every current word.
    pub fn rebuild_index(&mut self) {
        if !self.uses_tree() || self.words.is_empty() {
            self.tree = None;
            return;
        }
        let points: Vec<&[f32]> = self.words.iter().map(|w| w.prototype.as_real().unwrap()).collect();
        self.tree = Some(KdTree::build(&points));
    }

    fn maybe_rebuild(&mut self) {
        if let SearchBackend::KdTree { rebuild_every, .. } = self.backend {
            if self.uses_tree() && self.words.len() - self.tree_size() >= rebuild_every.max(1) {
                self.rebuild_index();
            }
        }
    }

    fn two_nearest(&self, query: &Descriptor) -> TwoNearest {
        let mut nn = TwoNearest::new();
        let start = if self.uses_tree() { self.tree_size() } else { 0 };
        for (i, w) in self.words.iter().enumerate().skip(start) {
            nn.offer(i, query.raw_distance(&w.prototype));
        }
        if let (Some(tree), SearchBackend::KdTree { max_checks, .. }) = (&self.tree, self.backend) {
            if self.uses_tree() {
                let words = &self.words;
                let point = |i: usize| words[i].prototype.as_real().unwrap();
                tree.two_nearest(&point, query.as_real().unwrap(), max_checks, &mut nn);
            }
        }
        nn
    }

    /// Read-only quantization of a localization query: descriptors failing
    /// the ratio test stay unassigned.
    pub fn quantize_query(&self, frame: &mut FeatureFrame, nndr_ratio: f64) -> Result<QuantizeStats, VocabularyError> {
        if frame.family != self.family {
            return Err(VocabularyError::FamilyMismatch(self.family, frame.family));
        }
        let ids: Vec<Option<WordId>> = frame
            .descriptors
            .iter()
            .map(|d| {
                let nn = self.two_nearest(d);
                nn.passes_ratio(nndr_ratio).then(|| WordId(nn.best.unwrap().0 as u32))
            })
            .collect();
        let assigned = ids.iter().flatten().count();
        frame.word_ids = ids;
        Ok(QuantizeStats { assigned, new_words: 0 })
    }

    /// Assigns a word to every descriptor of `frame`, writing `frame.word_ids`.
    pub fn quantize_frame(
        &mut self,
        frame: &mut FeatureFrame,
        nndr_ratio: f64,
        indexing: Indexing,
    ) -> Result<QuantizeStats, VocabularyError> {
        if frame.family != self.family {
            return Err(VocabularyError::FamilyMismatch(self.family, frame.family));
        }
        if indexing == Indexing::Query {
            return self.quantize_query(frame, nndr_ratio);
        }
        let mut stats = QuantizeStats::default();
        let mut ids = Vec::with_capacity(frame.len());
        for d in &frame.descriptors {
            let nn = self.two_nearest(d);
            let hit = nn.passes_ratio(nndr_ratio).then(|| WordId(nn.best.unwrap().0 as u32));
            let id = match (hit, indexing) {
                (Some(w), _) => Some(w),
                (None, Indexing::Map(_)) => {
                    let id = WordId(self.words.len() as u32);
                    self.words.push(VisualWord {
                        id,
                        prototype: d.clone(),
                        postings: Vec::new(),
                    });
                    stats.new_words += 1;
                    self.maybe_rebuild();
                    Some(id)
                }
                (None, Indexing::Query) => None,
            };
            if id.is_some() {
                stats.assigned += 1;
            }
            ids.push(id);
        }
        if let Indexing::Map(node) = indexing {
            let assigned: Vec<WordId> = ids.iter().flatten().copied().collect();
            self.add_postings(node, &assigned);
        }
        frame.word_ids = ids;
        Ok(stats)
    }

    /// Indexes `node` as containing the given word occurrences.
    pub fn add_postings(&mut self, node: NodeId, words: &[WordId]) {
        let mut counts: BTreeMap<WordId, u32> = BTreeMap::new();
        for w in words {
            *counts.entry(*w).or_default() += 1;
        }
        for (w, c) in counts {
            let postings = &mut self.words[w.0 as usize].postings;
            match postings.binary_search_by_key(&node, |(n, _)| *n) {
                Ok(i) => postings[i].1 += c,
                Err(i) => postings.insert(i, (node, c)),
            }
        }
        if !words.is_empty() {
            *self.node_word_counts.entry(node).or_default() += words.len() as u32;
        }
    }

    /// tf-idf similarity of every indexed node to an already-quantized query:
    /// `score(i) = Σ_w (n_wi / n_i) · ln(N / n_w)` over distinct shared words.
    pub fn compute_likelihood(&self, query: &FeatureFrame) -> Result<LikelihoodVector, VocabularyError> {
        if self.node_word_counts.is_empty() {
            return Err(VocabularyError::EmptyVocabulary);
        }
        let n_total = self.node_word_counts.len() as f64;
        let distinct: BTreeSet<WordId> = query.word_ids.iter().flatten().copied().collect();
        let mut scores: BTreeMap<NodeId, f64> = BTreeMap::new();
        for w in distinct {
            let Some(word) = self.words.get(w.0 as usize) else { continue };
            if word.postings.is_empty() {
                continue;
            }
            let idf = (n_total / word.postings.len() as f64).ln();
            for &(node, c) in &word.postings {
                let n_i = self.node_word_counts[&node] as f64;
                *scores.entry(node).or_insert(0.0) += c as f64 / n_i * idf;
            }
        }
        Ok(LikelihoodVector { scores })
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct VocabularyRecord {
    family: FamilyId,
    backend: SearchBackend,
    /// Base64 of the concatenated prototype payloads, in word-id order.
    prototypes: String,
    /// `[node, count]` pairs per word, in word-id order.
    postings: Vec<Vec<[u32; 2]>>,
}

impl From<&Vocabulary> for VocabularyRecord {
    fn from(v: &Vocabulary) -> Self {
        let frame = FeatureFrame {
            frame_id: 0,
            timestamp: 0.0,
            family: v.family,
            keypoints: vec![crate::features::Keypoint::new(nalgebra::Vector2::zeros(), 0.0); v.words.len()],
            descriptors: v.words.iter().map(|w| w.prototype.clone()).collect(),
            word_ids: vec![None; v.words.len()],
        };
        let encoded = serde_json::to_value(&frame).expect("frame serializes");
        VocabularyRecord {
            family: v.family,
            backend: v.backend,
            prototypes: encoded["desc"].as_str().unwrap_or_default().to_string(),
            postings: v
                .words
                .iter()
                .map(|w| w.postings.iter().map(|(n, c)| [n.0, *c]).collect())
                .collect(),
        }
    }
}

impl TryFrom<VocabularyRecord> for Vocabulary {
    type Error = VocabularyError;
    fn try_from(r: VocabularyRecord) -> Result<Self, Self::Error> {
        let n = r.postings.len();
        let bytes = B64
            .decode(r.prototypes.as_bytes())
            .map_err(|e| VocabularyError::Malformed(e.to_string()))?;
        let frame_json = serde_json::json!({
            "id": 0, "t": 0.0, "family": r.family,
            "kp": vec![0.0; 3 * n], "desc": B64.encode(&bytes), "words": vec![-1; n],
        });
        let frame: FeatureFrame =
            serde_json::from_value(frame_json).map_err(|e| VocabularyError::Malformed(e.to_string()))?;
        let mut v = Vocabulary::new(r.family, r.backend);
        for (i, (proto, postings)) in frame.descriptors.into_iter().zip(r.postings).enumerate() {
            let postings: Vec<(NodeId, u32)> = postings.into_iter().map(|[n, c]| (NodeId(n), c)).collect();
            if postings.windows(2).any(|w| w[0].0 >= w[1].0) || postings.iter().any(|p| p.1 == 0) {
                return Err(VocabularyError::Malformed(format!("postings of word {i} not sorted")));
            }
            for (node, c) in &postings {
                *v.node_word_counts.entry(*node).or_default() += c;
            }
            v.words.push(VisualWord {
                id: WordId(i as u32),
                prototype: proto,
                postings,
            });
        }
        v.rebuild_index();
        Ok(v)
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        VocabularyRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = VocabularyRecord::deserialize(d)?;
        Vocabulary::try_from(r).map_err(serde::de::Error::custom)
    }
}
