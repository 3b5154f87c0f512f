//! Datasets, batching and the even-division trimming rule.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Largest fraction of samples a full-batch plan may drop.
pub const MAX_FULL_TRIM: f64 = 0.005;

const IDX_U8: u8 = 0x08;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationData {
    /// Row-major `[n, dim]` features.
    pub inputs: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmData {
    /// Row-major `[n, seq_len]` input ids.
    pub inputs: Vec<usize>,
    /// Next-token targets aligned with `inputs`.
    pub targets: Vec<usize>,
    pub seq_len: usize,
    pub vocab: Vocabulary,
}

/// Sample centres of the quadratic probe, `[n, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointData {
    pub centers: Vec<f64>,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Classification(ClassificationData),
    LanguageModeling(LmData),
    Points(PointData),
}

/// Gathered samples for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Classification { inputs: Vec<f64>, dim: usize, labels: Vec<usize> },
    Tokens { inputs: Vec<usize>, targets: Vec<usize>, seq_len: usize },
    Points { centers: Vec<f64>, dim: usize },
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Classification { labels, .. } => labels.len(),
            Batch::Tokens { inputs, seq_len, .. } => inputs.len() / seq_len,
            Batch::Points { centers, dim } => centers.len() / dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        match self {
            Dataset::Classification(d) => d.labels.len(),
            Dataset::LanguageModeling(d) => d.inputs.len() / d.seq_len,
            Dataset::Points(d) => d.centers.len() / d.dim,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Dataset::Classification(_) => "classification",
            Dataset::LanguageModeling(_) => "language_modeling",
            Dataset::Points(_) => "points",
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        match self {
            Dataset::Classification(d) => {
                let mut inputs = Vec::with_capacity(indices.len() * d.dim);
                for &i in indices {
                    inputs.extend_from_slice(&d.inputs[i * d.dim..(i + 1) * d.dim]);
                }
                Batch::Classification {
                    inputs,
                    dim: d.dim,
                    labels: indices.iter().map(|&i| d.labels[i]).collect(),
                }
            }
            Dataset::LanguageModeling(d) => {
                let s = d.seq_len;
                let mut inputs = Vec::with_capacity(indices.len() * s);
                let mut targets = Vec::with_capacity(indices.len() * s);
                for &i in indices {
                    inputs.extend_from_slice(&d.inputs[i * s..(i + 1) * s]);
                    targets.extend_from_slice(&d.targets[i * s..(i + 1) * s]);
                }
                Batch::Tokens { inputs, targets, seq_len: s }
            }
            Dataset::Points(d) => {
                let mut centers = Vec::with_capacity(indices.len() * d.dim);
                for &i in indices {
                    centers.extend_from_slice(&d.centers[i * d.dim..(i + 1) * d.dim]);
                }
                Batch::Points { centers, dim: d.dim }
            }
        }
    }

    /// First `n` samples in canonical order.
    pub fn truncate(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.n_samples())).collect();
        self.subset(&idx)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        match (self, self.batch(indices)) {
            (Dataset::Classification(d), Batch::Classification { inputs, dim, labels }) => {
                Dataset::Classification(ClassificationData {
                    inputs,
                    dim,
                    labels,
                    num_classes: d.num_classes,
                })
            }
            (Dataset::LanguageModeling(d), Batch::Tokens { inputs, targets, seq_len }) => {
                Dataset::LanguageModeling(LmData {
                    inputs,
                    targets,
                    seq_len,
                    vocab: d.vocab.clone(),
                })
            }
            (Dataset::Points(_), Batch::Points { centers, dim }) => {
                Dataset::Points(PointData { centers, dim })
            }
            _ => unreachable!("batch kind follows dataset kind"),
        }
    }

    /// Splits off the canonical tail as a held-out set. A fraction of zero
    /// returns an empty holdout.
    pub fn split_holdout(&self, fraction: f64) -> Result<(Dataset, Option<Dataset>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidDataset(format!("holdout fraction {fraction}")));
        }
        let n = self.n_samples();
        let held = (n as f64 * fraction).round() as usize;
        if held == 0 {
            return Ok((self.clone(), None));
        }
        if held >= n {
            return Err(Error::InvalidDataset("holdout leaves no training samples".into()));
        }
        let train: Vec<usize> = (0..n - held).collect();
        let hold: Vec<usize> = (n - held..n).collect();
        Ok((self.subset(&train), Some(self.subset(&hold))))
    }
}

// ---- IDX ----

/// An unsigned-byte IDX array, kept close to its on-disk form so it can be
/// written back byte for byte.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedFile { expected: 4, actual: bytes.len() });
        }
        let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let ndims = (magic & 0xff) as usize;
        if magic >> 8 != IDX_U8 as u32 || !(1..=4).contains(&ndims) {
            return Err(Error::BadMagic(magic));
        }
        let header = 4 + 4 * ndims;
        if bytes.len() < header {
            return Err(Error::TruncatedFile { expected: header, actual: bytes.len() });
        }
        let dims: Vec<u32> = bytes[4..header]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let body: usize = dims.iter().map(|&d| d as usize).product();
        let expected = header + body;
        if bytes.len() < expected {
            return Err(Error::TruncatedFile { expected, actual: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(Error::InvalidDataset(format!(
                "{} trailing bytes after IDX body",
                bytes.len() - expected
            )));
        }
        Ok(Self { dims, data: bytes[header..].to_vec() })
    }

    pub fn magic(&self) -> u32 {
        ((IDX_U8 as u32) << 8) | self.dims.len() as u32
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

/// Reads an IDX image file (`0x00000803`) and label file (`0x00000801`).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = IdxArray::parse(&std::fs::read(images)?)?;
    let lab = IdxArray::parse(&std::fs::read(labels)?)?;
    idx_to_dataset(&img, &lab)
}

pub fn idx_to_dataset(images: &IdxArray, labels: &IdxArray) -> Result<Dataset> {
    if images.dims.len() != 3 {
        return Err(Error::BadMagic(images.magic()));
    }
    if labels.dims.len() != 1 {
        return Err(Error::BadMagic(labels.magic()));
    }
    let count = images.dims[0] as usize;
    if count != labels.dims[0] as usize {
        return Err(Error::CountMismatch { images: count, labels: labels.dims[0] as usize });
    }
    if count == 0 {
        return Err(Error::InvalidDataset("IDX file holds no samples".into()));
    }
    let dim = (images.dims[1] * images.dims[2]) as usize;
    let labels: Vec<usize> = labels.data.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    Ok(Dataset::Classification(ClassificationData {
        inputs: images.data.iter().map(|&p| f64::from(p) / 255.0).collect(),
        dim,
        labels,
        num_classes,
    }))
}

// ---- character corpus ----

/// Byte-level vocabulary: the sorted set of distinct bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    bytes: Vec<u8>,
    ids: [Option<u16>; 256],
}

impl Vocabulary {
    pub fn from_text(text: &[u8]) -> Self {
        let mut seen = [false; 256];
        for &b in text {
            seen[b as usize] = true;
        }
        let bytes: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        let mut ids = [None; 256];
        for (i, &b) in bytes.iter().enumerate() {
            ids[b as usize] = Some(i as u16);
        }
        Self { bytes, ids }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn id(&self, byte: u8) -> Option<usize> {
        self.ids[byte as usize].map(usize::from)
    }

    pub fn byte(&self, id: usize) -> Option<u8> {
        self.bytes.get(id).copied()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

/// Cuts `text` into non-overlapping windows of `seq_len` inputs, each paired
/// with the window shifted by one byte. A trailing partial window is dropped.
pub fn tokenize_corpus(text: &[u8], seq_len: usize) -> Result<(Dataset, Vocabulary)> {
    if seq_len == 0 || text.len() < seq_len + 1 {
        return Err(Error::CorpusTooSmall { len: text.len(), seq_len });
    }
    let vocab = Vocabulary::from_text(text);
    let ids: Vec<usize> = text.iter().map(|&b| vocab.id(b).expect("byte in vocabulary")).collect();
    let windows = (text.len() - 1) / seq_len;
    let used = windows * seq_len;
    let data = LmData {
        inputs: ids[..used].to_vec(),
        targets: ids[1..used + 1].to_vec(),
        seq_len,
        vocab: vocab.clone(),
    };
    Ok((Dataset::LanguageModeling(data), vocab))
}

// ---- trimming and batching ----

/// Number of samples kept so that `batch_size` divides it. For full-batch
/// plans a trim above 0.5% is refused.
pub fn trim_for_even_division(n_samples: usize, batch_size: usize, full_batch: bool) -> Result<usize> {
    if batch_size == 0 || batch_size > n_samples {
        return Err(Error::BatchTooLarge { batch_size, available: n_samples });
    }
    let dropped = n_samples % batch_size;
    if full_batch && dropped as f64 > MAX_FULL_TRIM * n_samples as f64 {
        return Err(Error::TrimTooLarge { n_samples, batch_size, dropped });
    }
    Ok(n_samples - dropped)
}

/// One epoch's sample order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub micro_batch: usize,
    pub order: Vec<usize>,
    pub dropped: usize,
}

impl BatchPlan {
    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.order.chunks(self.batch_size)
    }

    pub fn n_batches(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

/// Trims the canonical tail, then shuffles the kept indices with the
/// data-order stream keyed by `epoch`.
pub fn make_batches(
    n_samples: usize,
    batch_size: usize,
    micro_batch: usize,
    full_batch: bool,
    epoch: u64,
    data_order: &RngStream,
) -> Result<BatchPlan> {
    let kept = trim_for_even_division(n_samples, batch_size, full_batch)?;
    let mut order: Vec<usize> = (0..kept).collect();
    data_order.substream(epoch).shuffle(&mut order);
    Ok(BatchPlan {
        batch_size,
        micro_batch: micro_batch.clamp(1, batch_size),
        order,
        dropped: n_samples - kept,
    })
}

// ---- synthetic data ----

/// Gaussian blobs with unit covariance, one per class. Class means are
/// `separation / sqrt(2)` times the first `classes` basis vectors, so every
/// pair of means sits `separation` apart. Labels cycle through the classes.
pub fn synth_classification(
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::InvalidDataset(format!("{n} samples for {classes} classes")));
    }
    if dim < classes {
        return Err(Error::InvalidDataset(format!(
            "dimension {dim} cannot host a {classes}-class simplex"
        )));
    }
    let radius = separation / std::f64::consts::SQRT_2;
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for j in 0..dim {
            let mean = if j == c { radius } else { 0.0 };
            inputs.push(mean + rng.normal(0.0, 1.0));
        }
    }
    Ok(Dataset::Classification(ClassificationData { inputs, dim, labels, num_classes: classes }))
}

/// `n` centres for the quadratic probe, drawn `normal(0, spread)`; a spread
/// of zero puts every centre at the origin.
pub fn synth_points(n: usize, dim: usize, spread: f64, rng: &mut RngStream) -> Result<Dataset> {
    if n == 0 || dim == 0 {
        return Err(Error::InvalidDataset("empty point set".into()));
    }
    let centers = (0..n * dim)
        .map(|_| if spread > 0.0 { rng.normal(0.0, spread) } else { 0.0 })
        .collect();
    Ok(Dataset::Points(PointData { centers, dim }))
}

const CORPUS_WORDS: &[&str] = &[
    "the", "of", "and", "to", "a", "in", "was", "he", "it", "that", "his", "her", "she", "with",
    "as", "had", "for", "at", "on", "not", "but", "be", "they", "by", "from", "which", "said",
    "all", "one", "were", "there", "we", "you", "this", "so", "when", "no", "them", "would",
    "little", "upon", "into", "out", "could", "old", "man", "time", "very", "then", "some",
    "house", "river", "long", "came", "down", "made", "great", "king", "day", "way", "night",
    "eyes", "door", "hand", "went", "again", "light", "water", "morning", "garden", "road",
    "stone", "quiet", "winter", "village", "letter", "bright", "window", "mother", "forest",
    "mountain", "silver", "hollow", "lantern", "harbour", "meadow", "thunder", "whisper",
    "ancient", "journey", "strange", "golden", "shadow", "question", "quickly", "zephyr",
    "jewel", "oxen", "vex", "quartz", "jubilant", "fjord", "waltz", "sphinx", "kiwi",
];

/// Deterministic English-like filler text with Zipf-distributed word
/// frequencies, used as the bundled character corpus.
pub fn synth_corpus(bytes: usize, rng: &mut RngStream) -> Vec<u8> {
    let weights: Vec<f64> = (1..=CORPUS_WORDS.len()).map(|r| 1.0 / r as f64).collect();
    let total: f64 = weights.iter().sum();
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();
    let mut out = Vec::with_capacity(bytes + 16);
    let mut capitalize = true;
    let mut words_in_sentence = 0;
    while out.len() < bytes {
        let u = rng.uniform(0.0, 1.0);
        let idx = cumulative.partition_point(|&c| c < u).min(CORPUS_WORDS.len() - 1);
        let word = CORPUS_WORDS[idx].as_bytes();
        if capitalize {
            out.push(word[0].to_ascii_uppercase());
            out.extend_from_slice(&word[1..]);
            capitalize = false;
        } else {
            out.extend_from_slice(word);
        }
        words_in_sentence += 1;
        if words_in_sentence > 3 && rng.bernoulli(0.12) {
            out.push(if rng.bernoulli(0.15) { b'?' } else { b'.' });
            out.push(if rng.bernoulli(0.2) { b'\n' } else { b' ' });
            capitalize = true;
            words_in_sentence = 0;
        } else if words_in_sentence > 2 && rng.bernoulli(0.08) {
            out.extend_from_slice(b", ");
        } else {
            out.push(b' ');
        }
    }
    out.truncate(bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamId;

    fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn parses_handmade_idx_pair() {
        let images = idx_bytes(0x803, &[2, 2, 2], &[0, 255, 51, 102, 1, 2, 3, 4]);
        let labels = idx_bytes(0x801, &[2], &[1, 0]);
        let img = IdxArray::parse(&images).unwrap();
        let lab = IdxArray::parse(&labels).unwrap();
        let ds = idx_to_dataset(&img, &lab).unwrap();
        assert_eq!(ds.n_samples(), 2);
        let Dataset::Classification(d) = ds else { panic!() };
        assert_eq!(d.dim, 4);
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(&d.inputs[..4], &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(d.inputs[4], 1.0 / 255.0);
        assert_eq!(img.to_bytes(), images);
    }

    #[test]
    fn idx_errors() {
        assert!(matches!(
            IdxArray::parse(&idx_bytes(0xDEAD_BEEF, &[], &[])),
            Err(Error::BadMagic(0xDEAD_BEEF))
        ));
        assert!(matches!(
            IdxArray::parse(&idx_bytes(0x803, &[10, 2, 2], &[0; 12])),
            Err(Error::TruncatedFile { expected: 56, actual: 28 })
        ));
        let img = IdxArray::parse(&idx_bytes(0x803, &[2, 1, 1], &[0, 0])).unwrap();
        let lab = IdxArray::parse(&idx_bytes(0x801, &[3], &[0, 1, 0])).unwrap();
        assert!(matches!(
            idx_to_dataset(&img, &lab),
            Err(Error::CountMismatch { images: 2, labels: 3 })
        ));
    }

    #[test]
    fn tokenize_abab() {
        let (ds, vocab) = tokenize_corpus(b"abab", 2).unwrap();
        assert_eq!(vocab.bytes(), b"ab");
        let Dataset::LanguageModeling(d) = ds else { panic!() };
        assert_eq!(d.inputs, vec![0, 1]);
        assert_eq!(d.targets, vec![1, 0]);
    }

    #[test]
    fn tokenize_window_count() {
        let text: Vec<u8> = (0..71).map(|i| b'a' + (i % 7) as u8).collect();
        let (ds, _) = tokenize_corpus(&text, 10).unwrap();
        assert_eq!(ds.n_samples(), 7);
        assert!(matches!(tokenize_corpus(b"abc", 3), Err(Error::CorpusTooSmall { .. })));
        let (a, va) = tokenize_corpus(&text, 10).unwrap();
        let (b, vb) = tokenize_corpus(&text, 10).unwrap();
        assert_eq!((a, va), (b, vb));
    }

    #[test]
    fn trimming() {
        assert_eq!(trim_for_even_division(1003, 100, false).unwrap(), 1000);
        assert_eq!(trim_for_even_division(1003, 1003, true).unwrap(), 1003);
        assert!(matches!(
            trim_for_even_division(100, 64, true),
            Err(Error::TrimTooLarge { dropped: 36, .. })
        ));
        assert_eq!(trim_for_even_division(100, 64, false).unwrap(), 64);
        // 26,533 windows trimmed to a multiple of 20 keeps 26,520 (0.05%).
        assert_eq!(trim_for_even_division(26_533, 20, true).unwrap(), 26_520);
    }

    #[test]
    fn batch_plans() {
        let rng = RngStream::new(11, StreamId::DataOrder);
        let a = make_batches(1000, 10, 10, false, 0, &rng).unwrap();
        let b = make_batches(1000, 10, 10, false, 0, &rng).unwrap();
        let c = make_batches(1000, 10, 10, false, 1, &rng).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.order, c.order);
        let full = make_batches(1000, 1000, 100, true, 0, &rng).unwrap();
        assert_eq!(full.batches().count(), 1);
        let mut sorted = c.order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn blobs_are_balanced_and_seeded() {
        let mut r1 = RngStream::new(5, StreamId::Fixture);
        let mut r2 = RngStream::new(5, StreamId::Fixture);
        let a = synth_classification(30, 4, 3, 6.0, &mut r1).unwrap();
        let b = synth_classification(30, 4, 3, 6.0, &mut r2).unwrap();
        assert_eq!(a, b);
        let Dataset::Classification(d) = a else { panic!() };
        for c in 0..3 {
            assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 10);
        }
    }

    #[test]
    fn holdout_takes_the_tail() {
        let mut r = RngStream::new(1, StreamId::Fixture);
        let ds = synth_classification(100, 3, 3, 1.0, &mut r).unwrap();
        let (train, hold) = ds.split_holdout(0.1).unwrap();
        assert_eq!(train.n_samples(), 90);
        assert_eq!(hold.unwrap().n_samples(), 10);
        assert!(ds.split_holdout(0.0).unwrap().1.is_none());
    }

    #[test]
    fn corpus_is_deterministic_text() {
        let a = synth_corpus(5000, &mut RngStream::new(0, StreamId::Fixture));
        let b = synth_corpus(5000, &mut RngStream::new(0, StreamId::Fixture));
        assert_eq!(a, b);
        assert_eq!(a.len(), 5000);
        assert!(a.iter().all(|b| b.is_ascii()));
    }
}
