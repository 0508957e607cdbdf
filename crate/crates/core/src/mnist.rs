//! MNIST loading (IDX format), normalization, non-IID client partitions and
//! label-filtered evaluation sets.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{IMAGE_PIXELS, IMAGE_SIDE, NUM_CLASSES};
use crate::rng::DetRng;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const NORM_MEAN: f64 = 0.1307;
pub const NORM_STD: f64 = 0.3081;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX data: need {needed} bytes, have {actual}")]
    Truncated { needed: usize, actual: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("images are {rows}x{cols}, expected 28x28")]
    BadDimensions { rows: usize, cols: usize },
    #[error("label {0} is outside 0..=9")]
    InvalidLabel(u8),
    #[error("a client needs a non-empty label set")]
    EmptyLabelSet,
    #[error("label {label}: {needed} samples requested, {available} available")]
    Insufficient {
        label: u8,
        needed: usize,
        available: usize,
    },
    #[error("label filter {0:?} selects no rows")]
    EmptyResult(Vec<u8>),
    #[error("training data covers labels {present:?}, but all ten are required")]
    MissingLabels { present: Vec<u8> },
}

/// Normalized images (`n x 1 x 28 x 28`) with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    images: Tensor,
    labels: Vec<u8>,
}

impl LabeledSet {
    pub fn new(images: Vec<f64>, labels: Vec<u8>) -> Result<Self, DataError> {
        if images.len() != labels.len() * IMAGE_PIXELS {
            return Err(DataError::CountMismatch {
                images: images.len() / IMAGE_PIXELS,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(DataError::InvalidLabel(bad));
        }
        let n = labels.len();
        Ok(Self {
            images: Tensor::batch(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], images),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images.data()[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        let mut images = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let n = labels.len();
        LabeledSet {
            images: Tensor::batch(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], images),
            labels,
        }
    }

    /// The first `n` rows (or all of them).
    pub fn head(&self, n: usize) -> LabeledSet {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn label_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn label_set(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }
}

pub fn normalize_pixel(p: u8) -> f64 {
    (p as f64 / 255.0 - NORM_MEAN) / NORM_STD
}

/// Inverse of [`normalize_pixel`], returning `pixel / 255`.
pub fn denormalize(v: f64) -> f64 {
    v * NORM_STD + NORM_MEAN
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            needed: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), DataError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses an IDX3 image file into normalized pixels; returns `(count, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, Vec<f64>), DataError> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(DataError::BadDimensions { rows, cols });
    }
    let needed = 16 + count * IMAGE_PIXELS;
    let body = bytes.get(16..needed).ok_or(DataError::Truncated {
        needed,
        actual: bytes.len(),
    })?;
    Ok((count, body.iter().map(|&p| normalize_pixel(p)).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    let body = bytes.get(8..needed).ok_or(DataError::Truncated {
        needed,
        actual: bytes.len(),
    })?;
    Ok(body.to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads and normalizes an IDX image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledSet, DataError> {
    let (count, pixels) = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if count != labels.len() {
        return Err(DataError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    LabeledSet::new(pixels, labels)
}

/// Canonical train and test sets from a directory holding the four
/// uncompressed MNIST files.
pub fn load_mnist_dir(dir: &Path) -> Result<(LabeledSet, LabeledSet), DataError> {
    let train = load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    Ok((train, test))
}

/// One client in a custom partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub labels: Vec<u8>,
    #[serde(default)]
    pub max_per_label: Option<usize>,
}

/// Client label assignments.
///
/// A client with `max_per_label = Some(k)` receives exactly `k` seeded samples
/// of each of its labels. Images a capped client did not take are shared out
/// evenly among the uncapped clients holding that label (earlier clients get
/// the remainder). No image is assigned twice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub clients: Vec<ClientSpec>,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.clients.is_empty() {
            return Err(DataError::EmptyLabelSet);
        }
        for c in &self.clients {
            if c.labels.is_empty() {
                return Err(DataError::EmptyLabelSet);
            }
            if let Some(&bad) = c.labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
                return Err(DataError::InvalidLabel(bad));
            }
        }
        Ok(())
    }
}

pub const SCENARIO1_GROUPS: [&[u8]; 3] = [&[0, 1, 2], &[3, 4, 5], &[6, 7, 8, 9]];
pub const SCENARIO2_DENSE: &[u8] = &[0, 1];
pub const SCENARIO2_SPARSE: &[u8] = &[2, 3, 4, 5, 6, 7, 8, 9];
pub const DEFAULT_SPARSE_PER_LABEL: usize = 750;

fn indices_by_label(labels: &[u8]) -> [Vec<usize>; NUM_CLASSES] {
    let mut by: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by[l as usize].push(i);
    }
    by
}

/// Row indices per client for the three-client label-skew split: labels
/// {0,1,2} / {3,4,5} / {6,7,8,9}, each client sampled down to the size of the
/// smallest group so all three hold the same number of images.
pub fn scenario1_indices(labels: &[u8], seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    let by = indices_by_label(labels);
    let present: Vec<u8> = (0..NUM_CLASSES as u8)
        .filter(|&l| !by[l as usize].is_empty())
        .collect();
    if present.len() < NUM_CLASSES {
        return Err(DataError::MissingLabels { present });
    }
    let pools: Vec<Vec<usize>> = SCENARIO1_GROUPS
        .iter()
        .map(|g| {
            let mut pool: Vec<usize> = g.iter().flat_map(|&l| by[l as usize].clone()).collect();
            pool.sort_unstable();
            pool
        })
        .collect();
    let size = pools.iter().map(Vec::len).min().unwrap_or(0);
    let mut rng = DetRng::new(seed);
    Ok(pools
        .iter()
        .map(|pool| rng.sample_sorted(pool, size))
        .collect())
}

pub fn partition_scenario1(train: &LabeledSet, seed: u64) -> Result<Vec<LabeledSet>, DataError> {
    Ok(scenario1_indices(train.labels(), seed)?
        .iter()
        .map(|idx| train.subset(idx))
        .collect())
}

pub fn scenario2_spec(sparse_per_label: usize) -> PartitionSpec {
    PartitionSpec {
        clients: vec![
            ClientSpec {
                labels: SCENARIO2_DENSE.to_vec(),
                max_per_label: None,
            },
            ClientSpec {
                labels: SCENARIO2_SPARSE.to_vec(),
                max_per_label: Some(sparse_per_label),
            },
        ],
    }
}

/// Two clients: every {0,1} image, and `sparse_per_label` sampled images of each of 2..=9.
pub fn partition_scenario2(
    train: &LabeledSet,
    sparse_per_label: usize,
    seed: u64,
) -> Result<Vec<LabeledSet>, DataError> {
    if sparse_per_label == 0 {
        return Err(DataError::Insufficient {
            label: SCENARIO2_SPARSE[0],
            needed: 0,
            available: 0,
        });
    }
    partition_custom(train, &scenario2_spec(sparse_per_label), seed)
}

pub fn custom_indices(
    labels: &[u8],
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Vec<Vec<usize>>, DataError> {
    spec.validate()?;
    let by = indices_by_label(labels);
    let mut rng = DetRng::new(seed);
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); spec.clients.len()];
    for label in 0..NUM_CLASSES as u8 {
        let holders: Vec<usize> = spec
            .clients
            .iter()
            .enumerate()
            .filter(|(_, c)| c.labels.contains(&label))
            .map(|(i, _)| i)
            .collect();
        if holders.is_empty() {
            continue;
        }
        let mut pool = by[label as usize].clone();
        rng.shuffle(&mut pool);
        let capped: usize = holders
            .iter()
            .filter_map(|&i| spec.clients[i].max_per_label)
            .sum();
        if capped > pool.len() {
            return Err(DataError::Insufficient {
                label,
                needed: capped,
                available: pool.len(),
            });
        }
        let mut cursor = 0;
        for &i in &holders {
            if let Some(k) = spec.clients[i].max_per_label {
                out[i].extend_from_slice(&pool[cursor..cursor + k]);
                cursor += k;
            }
        }
        let open: Vec<usize> = holders
            .iter()
            .copied()
            .filter(|&i| spec.clients[i].max_per_label.is_none())
            .collect();
        if !open.is_empty() {
            let rest = pool.len() - cursor;
            let (share, extra) = (rest / open.len(), rest % open.len());
            for (j, &i) in open.iter().enumerate() {
                let take = share + usize::from(j < extra);
                out[i].extend_from_slice(&pool[cursor..cursor + take]);
                cursor += take;
            }
        }
    }
    for idx in &mut out {
        idx.sort_unstable();
    }
    Ok(out)
}

pub fn partition_custom(
    train: &LabeledSet,
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Vec<LabeledSet>, DataError> {
    Ok(custom_indices(train.labels(), spec, seed)?
        .iter()
        .map(|idx| train.subset(idx))
        .collect())
}

/// Rows whose label is in `labels`, in original order.
pub fn filter_test(test: &LabeledSet, labels: &[u8]) -> Result<LabeledSet, DataError> {
    if labels.is_empty() {
        return Err(DataError::EmptyLabelSet);
    }
    let idx: Vec<usize> = test
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, l)| labels.contains(l))
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        let mut ls = labels.to_vec();
        ls.sort_unstable();
        return Err(DataError::EmptyResult(ls));
    }
    Ok(test.subset(&idx))
}

/// Seeded digit-like stand-in for MNIST: each class is a fixed random stroke
/// prototype plus per-sample noise and a one-pixel jitter. Labels cycle 0..9.
/// Used by tests and demos when the IDX files are not available.
pub fn synthetic(n: usize, seed: u64) -> LabeledSet {
    let mut proto_rng = DetRng::new(0x5EED_D161);
    let protos: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|_| {
            let mut img = vec![0.0; IMAGE_PIXELS];
            // a few random rectangles per class
            for _ in 0..4 {
                let r0 = 4 + proto_rng.below(16) as usize;
                let c0 = 4 + proto_rng.below(16) as usize;
                let (h, w) = (
                    2 + proto_rng.below(6) as usize,
                    2 + proto_rng.below(6) as usize,
                );
                for r in r0..(r0 + h).min(24) {
                    for c in c0..(c0 + w).min(24) {
                        img[r * IMAGE_SIDE + c] = 1.0;
                    }
                }
            }
            img
        })
        .collect();
    let mut rng = DetRng::new(seed);
    let mut images = Vec::with_capacity(n * IMAGE_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % NUM_CLASSES) as u8;
        let proto = &protos[label as usize];
        let (dr, dc) = (rng.below(3) as isize - 1, rng.below(3) as isize - 1);
        for r in 0..IMAGE_SIDE as isize {
            for c in 0..IMAGE_SIDE as isize {
                let (sr, sc) = (r - dr, c - dc);
                let base = if (0..28).contains(&sr) && (0..28).contains(&sc) {
                    proto[(sr * 28 + sc) as usize]
                } else {
                    0.0
                };
                let raw = (base * 0.8 + 0.2 * rng.next_f64()).clamp(0.0, 1.0);
                images.push((raw - NORM_MEAN) / NORM_STD);
            }
        }
        labels.push(label);
    }
    LabeledSet::new(images, labels).expect("consistent by construction")
}

/// Raw IDX encoders, mainly for fixtures.
pub fn encode_idx_images(pixels: &[u8], count: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    out.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let pixels: Vec<u8> = (0..labels.len() * IMAGE_PIXELS)
            .map(|i| (i % 256) as u8)
            .collect();
        (
            encode_idx_images(&pixels, labels.len()),
            encode_idx_labels(labels),
        )
    }

    #[test]
    fn parses_and_normalizes() {
        let (img, lab) = fixture(&[3, 1]);
        let (count, px) = parse_idx_images(&img).unwrap();
        assert_eq!(count, 2);
        assert!((px[0] - (0.0 - NORM_MEAN) / NORM_STD).abs() < 1e-15);
        assert!((px[255] - (1.0 - NORM_MEAN) / NORM_STD).abs() < 1e-15);
        assert_eq!(parse_idx_labels(&lab).unwrap(), vec![3, 1]);
    }

    #[test]
    fn normalization_round_trips() {
        for p in 0..=255u8 {
            assert!((denormalize(normalize_pixel(p)) - p as f64 / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn labels_file_with_images_magic_is_bad_magic() {
        let (img, _) = fixture(&[0]);
        assert!(matches!(
            parse_idx_labels(&img),
            Err(DataError::BadMagic {
                expected: LABELS_MAGIC,
                found: IMAGES_MAGIC
            })
        ));
    }

    #[test]
    fn truncated_and_mismatched_files() {
        let (img, lab) = fixture(&[0, 1, 2]);
        assert!(matches!(
            parse_idx_images(&img[..img.len() - 1]),
            Err(DataError::Truncated { .. })
        ));
        assert!(matches!(
            parse_idx_labels(&lab[..6]),
            Err(DataError::Truncated { .. })
        ));

        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, encode_idx_labels(&[0, 1])).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::CountMismatch {
                images: 3,
                labels: 2
            })
        ));
        std::fs::write(&lp, &lab).unwrap();
        assert_eq!(load_idx(&ip, &lp).unwrap().len(), 3);
        assert!(matches!(
            load_idx(&dir.path().join("missing"), &lp),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn scenario1_is_equal_sized_disjoint_and_covers_all_labels() {
        let data = synthetic(403, 1);
        let parts = partition_scenario1(&data, 9).unwrap();
        assert_eq!(parts.len(), 3);
        assert!(parts.iter().all(|p| p.len() == parts[0].len()));
        let sets: Vec<_> = parts.iter().map(LabeledSet::label_set).collect();
        for (i, a) in sets.iter().enumerate() {
            for b in &sets[i + 1..] {
                assert!(a.is_disjoint(b));
            }
        }
        let union: BTreeSet<u8> = sets.iter().flatten().copied().collect();
        assert_eq!(union, (0..10).collect());
        let idx = scenario1_indices(data.labels(), 9).unwrap();
        let all: BTreeSet<usize> = idx.iter().flatten().copied().collect();
        assert_eq!(all.len(), idx.iter().map(Vec::len).sum::<usize>());
        assert_eq!(idx, scenario1_indices(data.labels(), 9).unwrap());
    }

    #[test]
    fn scenario1_needs_every_label() {
        let data = synthetic(9, 1); // labels 0..8 only
        assert!(matches!(
            partition_scenario1(&data, 0),
            Err(DataError::MissingLabels { .. })
        ));
    }

    #[test]
    fn scenario2_shapes() {
        let data = synthetic(1000, 2);
        let parts = partition_scenario2(&data, 12, 3).unwrap();
        assert_eq!(parts[0].label_set(), [0, 1].into_iter().collect());
        assert_eq!(parts[1].label_set(), (2..10).collect());
        assert_eq!(parts[1].len(), 8 * 12);
        let c = data.label_counts();
        assert_eq!(parts[0].len(), c[0] + c[1]);
        assert!(matches!(
            partition_scenario2(&data, 101, 3),
            Err(DataError::Insufficient {
                needed: 101,
                available: 100,
                ..
            })
        ));
        assert!(partition_scenario2(&data, 0, 3).is_err());
    }

    #[test]
    fn custom_split_shares_open_labels_without_overlap() {
        let data = synthetic(100, 4);
        let spec = PartitionSpec {
            clients: vec![
                ClientSpec {
                    labels: vec![0, 1],
                    max_per_label: Some(3),
                },
                ClientSpec {
                    labels: vec![0, 1],
                    max_per_label: None,
                },
                ClientSpec {
                    labels: vec![0],
                    max_per_label: None,
                },
            ],
        };
        let idx = custom_indices(data.labels(), &spec, 5).unwrap();
        assert_eq!(idx[0].len(), 6);
        // label 0: 10 images, 3 capped, 7 left -> 4 + 3 ; label 1: 7 left -> all to client 1
        assert_eq!(idx[1].len(), 4 + 7);
        assert_eq!(idx[2].len(), 3);
        let all: BTreeSet<usize> = idx.iter().flatten().copied().collect();
        assert_eq!(all.len(), 20);
    }

    #[test]
    fn filter_test_cases() {
        let data = synthetic(50, 3);
        let all: Vec<u8> = (0..10).collect();
        assert_eq!(filter_test(&data, &all).unwrap(), data);
        let zeros = filter_test(&data, &[0]).unwrap();
        assert!(zeros.labels().iter().all(|&l| l == 0));
        assert_eq!(zeros.len(), 5);
        let sub = data.head(5); // labels 0..4
        assert!(matches!(
            filter_test(&sub, &[7]),
            Err(DataError::EmptyResult(_))
        ));
        assert!(matches!(
            filter_test(&sub, &[]),
            Err(DataError::EmptyLabelSet)
        ));
    }
}
