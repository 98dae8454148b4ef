//! Hierarchical k-means vocabulary and its `FSLV` file.
//!
//! Little-endian layout:
//!
//! ```text
//! header: magic "FSLV" | version u32 | k u32 | levels u32 | variant u8 | descriptor length u32
//!         | node count u32 | word count u32
//! node:   parent i32 (-1 for the root) | centroid payload | leaf u8 | word id u32 | idf f64
//! ```
//!
//! Centroid payloads use the feature-file encoding (packed bits or f32 array). Nodes are
//! stored in index order, so every parent precedes its children.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PlaceError;
use crate::features::{BitDescriptor, Descriptor, DescriptorKind};

pub const VOCAB_MAGIC: &[u8; 4] = b"FSLV";
pub const VOCAB_VERSION: u32 = 1;

const KMEANS_ITERATIONS: usize = 20;
const MEDOID_CANDIDATES: usize = 64;
const MEDOID_SAMPLE: usize = 256;
const NO_WORD: u32 = u32::MAX;

pub type WordId = u32;

#[derive(Clone, Debug, PartialEq)]
pub struct VocabNode {
    pub parent: Option<u32>,
    pub children: Vec<u32>,
    pub centroid: Descriptor,
    pub word: Option<WordId>,
    pub idf: f64,
    pub depth: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    k: usize,
    levels: usize,
    kind: DescriptorKind,
    nodes: Vec<VocabNode>,
    /// Node index of every word.
    words: Vec<u32>,
}

/// Sparse TF-IDF signature, L1-normalized.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BowVector(pub BTreeMap<WordId, f64>);

/// Keypoint indices grouped by their vocabulary node at a fixed tree depth; used to
/// restrict descriptor comparisons to features that descend the same branch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureVector(pub BTreeMap<u32, Vec<usize>>);

impl BowVector {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn l1_normalize(&mut self) {
        let total: f64 = self.0.values().map(|v| v.abs()).sum();
        if total > 0.0 {
            self.0.values_mut().for_each(|v| *v /= total);
        }
    }
}

impl FeatureVector {
    /// Index pairs of the two vectors that share a node.
    pub fn shared<'a>(&'a self, other: &'a FeatureVector) -> impl Iterator<Item = (&'a [usize], &'a [usize])> {
        self.0
            .iter()
            .filter_map(move |(node, a)| other.0.get(node).map(|b| (a.as_slice(), b.as_slice())))
    }
}

/// L1 similarity `1 - |a/|a| - b/|b||_1 / 2`, in [0, 1]; 0 if either vector is empty.
pub fn score(a: &BowVector, b: &BowVector) -> f64 {
    let na: f64 = a.0.values().sum();
    let nb: f64 = b.0.values().sum();
    if na <= 0.0 || nb <= 0.0 {
        return 0.0;
    }
    // |x - y| = x + y - 2 min(x, y) over the shared support; the rest contributes its mass.
    let mut common = 0.0;
    for (w, va) in &a.0 {
        if let Some(vb) = b.0.get(w) {
            common += (va / na).min(vb / nb);
        }
    }
    common.clamp(0.0, 1.0)
}

fn zero_descriptor(kind: DescriptorKind) -> Descriptor {
    match kind {
        DescriptorKind::Binary(n) => Descriptor::Binary(BitDescriptor::zeros(n)),
        DescriptorKind::Real(n) => Descriptor::Real(vec![0.0; n]),
    }
}

fn nearest(centers: &[Descriptor], d: &Descriptor) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let dist = c.distance(d);
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best.0
}

fn evenly_spaced(n: usize, m: usize) -> impl Iterator<Item = usize> {
    let m = m.min(n);
    (0..m).map(move |i| i * n / m)
}

fn cluster_center(kind: DescriptorKind, members: &[&Descriptor]) -> Descriptor {
    match kind {
        DescriptorKind::Real(n) => {
            let mut acc = vec![0.0f64; n];
            for d in members {
                if let Descriptor::Real(v) = d {
                    acc.iter_mut().zip(v).for_each(|(a, x)| *a += *x as f64);
                }
            }
            let inv = 1.0 / members.len() as f64;
            Descriptor::Real(acc.into_iter().map(|a| (a * inv) as f32).collect())
        }
        DescriptorKind::Binary(_) => {
            // medoid over a deterministic subsample
            let sample: Vec<&Descriptor> = evenly_spaced(members.len(), MEDOID_SAMPLE).map(|i| members[i]).collect();
            let mut best = (0usize, f64::INFINITY);
            for i in evenly_spaced(members.len(), MEDOID_CANDIDATES) {
                let cost: f64 = sample.iter().map(|s| members[i].distance(s)).sum();
                if cost < best.1 {
                    best = (i, cost);
                }
            }
            members[best.0].clone()
        }
    }
}

/// k-means++ seeding followed by Lloyd iterations. Returns the non-empty clusters.
fn kmeans(kind: DescriptorKind, items: &[&Descriptor], k: usize, rng: &mut ChaCha8Rng) -> Vec<(Descriptor, Vec<usize>)> {
    let n = items.len();
    let mut centers = vec![items[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = items.iter().map(|x| centers[0].distance(x).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, w) in d2.iter().enumerate() {
            if r < *w {
                pick = i;
                break;
            }
            r -= w;
        }
        let c = items[pick].clone();
        for (i, x) in items.iter().enumerate() {
            d2[i] = d2[i].min(c.distance(x).powi(2));
        }
        centers.push(c);
    }
    let mut assign: Vec<usize> = items.iter().map(|x| nearest(&centers, x)).collect();
    for _ in 0..KMEANS_ITERATIONS {
        let mut groups: Vec<Vec<&Descriptor>> = vec![Vec::new(); centers.len()];
        for (i, &a) in assign.iter().enumerate() {
            groups[a].push(items[i]);
        }
        centers = groups
            .iter()
            .filter(|g| !g.is_empty())
            .map(|g| cluster_center(kind, g))
            .collect();
        let next: Vec<usize> = items.iter().map(|x| nearest(&centers, x)).collect();
        let done = next == assign;
        assign = next;
        if done {
            break;
        }
    }
    let mut clusters: Vec<(Descriptor, Vec<usize>)> = centers.into_iter().map(|c| (c, Vec::new())).collect();
    for (i, &a) in assign.iter().enumerate() {
        clusters[a].1.push(i);
    }
    clusters.retain(|c| !c.1.is_empty());
    clusters
}

/// Checks training parameters and corpus without training. Returns the corpus
/// descriptor variant.
pub fn validate_training(corpus: &[Vec<Descriptor>], k: usize, levels: usize) -> Result<DescriptorKind, PlaceError> {
    if k < 2 || levels < 1 {
        return Err(PlaceError::InvalidParameters(format!("need k >= 2 and levels >= 1, got {k}, {levels}")));
    }
    if u32::try_from(levels).ok().and_then(|l| k.checked_pow(l)).is_none_or(|leaves| leaves > u32::MAX as usize) {
        return Err(PlaceError::InvalidParameters(format!("{k}^{levels} leaves do not fit a 32-bit word id")));
    }
    let mut items = corpus.iter().flatten();
    let Some(first) = items.next() else {
        return Err(PlaceError::CorpusTooSmall { size: 0, k });
    };
    let kind = first.kind();
    if let Some(bad) = items.find(|d| d.kind() != kind) {
        return Err(PlaceError::VariantMismatch(kind, bad.kind()));
    }
    let size = corpus.iter().map(Vec::len).sum::<usize>();
    if size < k {
        return Err(PlaceError::CorpusTooSmall { size, k });
    }
    Ok(kind)
}

/// Trains a vocabulary of branching `k` and depth `levels` over a corpus of documents
/// (one descriptor set per image). Deterministic for a given seed.
pub fn train_vocabulary(corpus: &[Vec<Descriptor>], k: usize, levels: usize, seed: u64) -> Result<Vocabulary, PlaceError> {
    let kind = validate_training(corpus, k, levels)?;
    let items: Vec<&Descriptor> = corpus.iter().flatten().collect();
    let mut vocab = Vocabulary {
        k,
        levels,
        kind,
        nodes: vec![VocabNode {
            parent: None,
            children: Vec::new(),
            centroid: zero_descriptor(kind),
            word: None,
            idf: 0.0,
            depth: 0,
        }],
        words: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vocab.grow(0, &items, &mut rng);
    for (i, node) in vocab.nodes.iter_mut().enumerate() {
        if node.children.is_empty() {
            node.word = Some(vocab.words.len() as u32);
            vocab.words.push(i as u32);
        }
    }
    // inverse document frequency ln(1 + N / n_i)
    let mut doc_freq = vec![0usize; vocab.words.len()];
    for doc in corpus {
        let mut seen: Vec<WordId> = doc.iter().map(|d| vocab.descend(d).0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.into_iter().for_each(|w| doc_freq[w as usize] += 1);
    }
    let n_docs = corpus.len().max(1) as f64;
    for (w, &node) in vocab.words.iter().enumerate() {
        let f = doc_freq[w];
        vocab.nodes[node as usize].idf = if f == 0 { (1.0 + n_docs).ln() } else { (1.0 + n_docs / f as f64).ln() };
    }
    Ok(vocab)
}

impl Vocabulary {
    fn grow(&mut self, node: usize, items: &[&Descriptor], rng: &mut ChaCha8Rng) {
        let depth = self.nodes[node].depth as usize;
        if depth >= self.levels || items.len() <= 1 {
            return;
        }
        let clusters: Vec<(Descriptor, Vec<usize>)> = if items.len() <= self.k {
            let mut unique: Vec<(Descriptor, Vec<usize>)> = Vec::new();
            for (i, d) in items.iter().enumerate() {
                match unique.iter_mut().find(|(c, _)| c == *d) {
                    Some((_, m)) => m.push(i),
                    None => unique.push(((*d).clone(), vec![i])),
                }
            }
            unique
        } else {
            kmeans(self.kind, items, self.k, rng)
        };
        if clusters.len() <= 1 {
            return;
        }
        for (centroid, members) in clusters {
            let child = self.nodes.len();
            self.nodes.push(VocabNode {
                parent: Some(node as u32),
                children: Vec::new(),
                centroid,
                word: None,
                idf: 0.0,
                depth: depth as u32 + 1,
            });
            self.nodes[node].children.push(child as u32);
            let sub: Vec<&Descriptor> = members.iter().map(|&i| items[i]).collect();
            self.grow(child, &sub, rng);
        }
    }

    pub fn branching(&self) -> usize {
        self.k
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn kind(&self) -> DescriptorKind {
        self.kind
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn nodes(&self) -> &[VocabNode] {
        &self.nodes
    }

    /// Centroid of every word, indexed by word id.
    pub fn word_centroids(&self) -> Vec<&Descriptor> {
        self.words.iter().map(|&n| &self.nodes[n as usize].centroid).collect()
    }

    pub fn idf(&self, word: WordId) -> f64 {
        self.nodes[self.words[word as usize] as usize].idf
    }

    /// Depth of the nodes used to group features in a [`FeatureVector`].
    pub fn feature_level(&self) -> u32 {
        (self.levels as u32).saturating_sub(4).max(1)
    }

    /// Greedy descent to a leaf. Returns the word and the node at the feature level
    /// (or the leaf when the branch is shallower).
    pub fn descend(&self, d: &Descriptor) -> (WordId, u32) {
        let level = self.feature_level();
        let mut node = 0usize;
        let mut group = 0u32;
        loop {
            let n = &self.nodes[node];
            if n.depth <= level {
                group = node as u32;
            }
            if n.children.is_empty() {
                return (n.word.expect("leaf carries a word"), group);
            }
            let mut best = (n.children[0] as usize, f64::INFINITY);
            for &c in &n.children {
                let dist = self.nodes[c as usize].centroid.distance(d);
                if dist < best.1 {
                    best = (c as usize, dist);
                }
            }
            node = best.0;
        }
    }

    /// BoW signature and feature grouping of one descriptor set.
    pub fn transform(&self, descriptors: &[Descriptor]) -> Result<(BowVector, FeatureVector), PlaceError> {
        let mut bow = BowVector::default();
        let mut fv = FeatureVector::default();
        for (i, d) in descriptors.iter().enumerate() {
            if d.kind() != self.kind {
                return Err(PlaceError::VariantMismatch(self.kind, d.kind()));
            }
            let (w, group) = self.descend(d);
            *bow.0.entry(w).or_insert(0.0) += self.idf(w);
            fv.0.entry(group).or_default().push(i);
        }
        bow.0.retain(|_, v| *v > 0.0);
        bow.l1_normalize();
        Ok((bow, fv))
    }

    pub fn to_bow(&self, descriptors: &[Descriptor]) -> Result<BowVector, PlaceError> {
        Ok(self.transform(descriptors)?.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(VOCAB_MAGIC);
        out.extend_from_slice(&VOCAB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.levels as u32).to_le_bytes());
        out.push(self.kind.variant_code());
        out.extend_from_slice(&(self.kind.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.nodes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.words.len() as u32).to_le_bytes());
        for n in &self.nodes {
            out.extend_from_slice(&n.parent.map_or(-1i32, |p| p as i32).to_le_bytes());
            match &n.centroid {
                Descriptor::Binary(b) => out.extend_from_slice(&b.to_bytes()),
                Descriptor::Real(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
            out.push(u8::from(n.children.is_empty()));
            out.extend_from_slice(&n.word.unwrap_or(NO_WORD).to_le_bytes());
            out.extend_from_slice(&n.idf.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, PlaceError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], PlaceError> {
            let s = buf
                .get(pos..pos + n)
                .ok_or_else(|| PlaceError::Malformed(format!("unexpected end of data at byte {pos}")))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != VOCAB_MAGIC {
            return Err(PlaceError::Malformed("bad magic".into()));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != VOCAB_VERSION {
            return Err(PlaceError::Malformed(format!("unsupported version {version}")));
        }
        let k = u32_at(take(4)?) as usize;
        let levels = u32_at(take(4)?) as usize;
        let variant = take(1)?[0];
        let len = u32_at(take(4)?) as usize;
        let kind = match variant {
            0 => DescriptorKind::Binary(len),
            1 => DescriptorKind::Real(len),
            v => return Err(PlaceError::Malformed(format!("unknown variant {v}"))),
        };
        let n_nodes = u32_at(take(4)?) as usize;
        let n_words = u32_at(take(4)?) as usize;
        let mut nodes: Vec<VocabNode> = Vec::with_capacity(n_nodes.min(1 << 20));
        let mut words = vec![u32::MAX; n_words];
        for i in 0..n_nodes {
            let parent = i32::from_le_bytes(take(4)?.try_into().unwrap());
            let centroid = match kind {
                DescriptorKind::Binary(n) => Descriptor::Binary(BitDescriptor::from_bytes(take(n.div_ceil(8))?, n)),
                DescriptorKind::Real(n) => Descriptor::Real(
                    take(4 * n)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            let leaf = take(1)?[0] == 1;
            let word = u32_at(take(4)?);
            let idf = f64::from_le_bytes(take(8)?.try_into().unwrap());
            let (parent, depth) = if parent < 0 {
                if i != 0 {
                    return Err(PlaceError::Malformed(format!("node {i} has no parent")));
                }
                (None, 0)
            } else {
                let p = parent as usize;
                if p >= i {
                    return Err(PlaceError::Malformed(format!("node {i} precedes its parent {p}")));
                }
                nodes[p].children.push(i as u32);
                (Some(p as u32), nodes[p].depth + 1)
            };
            let word = if leaf {
                if (word as usize) >= n_words || words[word as usize] != u32::MAX {
                    return Err(PlaceError::Malformed(format!("bad word id {word} at node {i}")));
                }
                words[word as usize] = i as u32;
                Some(word)
            } else {
                None
            };
            nodes.push(VocabNode {
                parent,
                children: Vec::new(),
                centroid,
                word,
                idf,
                depth,
            });
        }
        if pos != buf.len() {
            return Err(PlaceError::Malformed(format!("{} trailing bytes", buf.len() - pos)));
        }
        if words.contains(&u32::MAX) || nodes.is_empty() {
            return Err(PlaceError::Malformed("word table incomplete".into()));
        }
        if nodes.iter().any(|n| n.children.is_empty() != n.word.is_some()) {
            return Err(PlaceError::Malformed("leaf flags disagree with the tree".into()));
        }
        Ok(Self {
            k,
            levels,
            kind,
            nodes,
            words,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), PlaceError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| PlaceError::Io(path.display().to_string(), e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self, PlaceError> {
        let buf = std::fs::read(path).map_err(|e| PlaceError::Io(path.display().to_string(), e.to_string()))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bow(pairs: &[(u32, f64)]) -> BowVector {
        BowVector(pairs.iter().copied().collect())
    }

    #[test]
    fn score_cases() {
        let v = bow(&[(1, 0.2), (4, 0.8)]);
        assert!((score(&v, &v) - 1.0).abs() < 1e-12);
        assert_eq!(score(&v, &bow(&[(2, 1.0)])), 0.0);
        let a = bow(&[(0, 0.5), (1, 0.5)]);
        let b = bow(&[(0, 0.5), (2, 0.5)]);
        assert!((score(&a, &b) - 0.5).abs() < 1e-12);
        assert_eq!(score(&a, &BowVector::default()), 0.0);
    }

    #[test]
    fn too_small_corpus() {
        let corpus = vec![vec![Descriptor::Real(vec![0.0]); 9]];
        assert!(matches!(
            train_vocabulary(&corpus, 10, 2, 0),
            Err(PlaceError::CorpusTooSmall { size: 9, k: 10 })
        ));
    }

    #[test]
    fn leaf_centroid_maps_to_its_word() {
        let corpus: Vec<Vec<Descriptor>> = (0..6)
            .map(|d| (0..20).map(|i| Descriptor::Real(vec![(i % 7) as f32 * 3.0 + d as f32 * 0.01, (i % 3) as f32])).collect())
            .collect();
        let v = train_vocabulary(&corpus, 3, 2, 5).unwrap();
        for (w, c) in v.word_centroids().into_iter().enumerate() {
            let b = v.to_bow(std::slice::from_ref(c)).unwrap();
            assert_eq!(b.0.len(), 1);
            assert_eq!(b.0.get(&(w as u32)), Some(&1.0));
        }
        assert!(v.to_bow(&[]).unwrap().is_empty());
    }

    #[test]
    fn bytes_round_trip_and_rejects_garbage() {
        let corpus: Vec<Vec<Descriptor>> = (0..4u8)
            .map(|d| {
                (0..30u8)
                    .map(|i| Descriptor::Binary(BitDescriptor::from_bytes(&[i.wrapping_mul(37) ^ d, i, d, 7], 32)))
                    .collect()
            })
            .collect();
        let v = train_vocabulary(&corpus, 4, 3, 1).unwrap();
        let bytes = v.to_bytes();
        let back = Vocabulary::from_bytes(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_bytes(), bytes);
        assert!(Vocabulary::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
