//! Labelled image datasets: a deterministic synthetic generator and the IDX
//! binary format.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

pub const SYNTH_CLASSES: usize = 4;
pub const SYNTH_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::ClassIndex { index: l, classes: class_count });
        }
        Ok(Self { images, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.images.first().and_then(|t| t.chw("dataset").ok())
    }

    /// Samples `[start, start + count)`.
    pub fn slice(&self, start: usize, count: usize) -> Dataset {
        let end = (start + count).min(self.len());
        let start = start.min(end);
        Dataset {
            images: self.images[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            class_count: self.class_count,
        }
    }
}

/// Synthetic 4-class dataset (filled square, hollow square, cross, diagonal
/// stripe) with additive uniform noise, clipped to [0, 1].
pub fn synth_dataset(seed: u64, count: usize, image_size: usize) -> Result<Dataset> {
    synth_range(seed, 0, count, image_size)
}

/// Samples `start..start+count` of the synthetic sequence for `seed`. Each
/// sample depends only on `(seed, index)`, so disjoint index ranges give
/// disjoint train/test partitions.
pub fn synth_range(seed: u64, start: usize, count: usize, image_size: usize) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    if image_size < 12 {
        return Err(Error::InvalidArgument(format!("image size {image_size} < 12")));
    }
    let root = Stream::new(seed).fork_named("synth");
    let (images, labels) = (start..start + count)
        .map(|i| {
            let mut s = root.fork(i as u64);
            let label = s.below(SYNTH_CLASSES as u64) as usize;
            (draw_pattern(&mut s, label, image_size), label)
        })
        .unzip();
    Dataset::new(images, labels, SYNTH_CLASSES)
}

/// Train and test partitions taken from disjoint index ranges.
pub fn synth_split(seed: u64, train: usize, test: usize, image_size: usize) -> Result<(Dataset, Dataset)> {
    Ok((synth_range(seed, 0, train, image_size)?, synth_range(seed, train, test, image_size)?))
}

fn draw_pattern(s: &mut Stream, label: usize, n: usize) -> Tensor {
    let mut img = vec![0.0; n * n];
    let intensity = s.uniform(0.6, 1.0);
    let mut set = |i: usize, j: usize| {
        if i < n && j < n {
            img[i * n + j] = intensity;
        }
    };
    let pick = |s: &mut Stream, lo: usize, hi: usize| lo + s.below((hi - lo + 1) as u64) as usize;
    match label {
        0 => {
            let side = pick(s, n / 4, n / 2);
            let (r, c) = (pick(s, 0, n - side), pick(s, 0, n - side));
            for i in r..r + side {
                for j in c..c + side {
                    set(i, j);
                }
            }
        }
        1 => {
            let side = pick(s, n / 3 + 2, 2 * n / 3);
            let (r, c) = (pick(s, 0, n - side), pick(s, 0, n - side));
            for k in 0..side {
                set(r, c + k);
                set(r + side - 1, c + k);
                set(r + k, c);
                set(r + k, c + side - 1);
            }
        }
        2 => {
            let arm = pick(s, n / 5, n / 3);
            let (r, c) = (pick(s, arm, n - arm - 2), pick(s, arm, n - arm - 2));
            for k in 0..2 * arm + 2 {
                for t in 0..2 {
                    set(r - arm + k, c + t);
                    set(r + t, c - arm + k);
                }
            }
        }
        _ => {
            let offset = pick(s, 0, n / 2) as isize - (n / 4) as isize;
            let width = pick(s, 1, 2) as isize;
            for i in 0..n {
                for j in 0..n {
                    let d = i as isize - j as isize - offset;
                    if (0..=width).contains(&d) {
                        set(i, j);
                    }
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v + s.uniform(-SYNTH_NOISE, SYNTH_NOISE)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, n, n], img).expect("square image")
}

const IDX_UBYTE: u8 = 0x08;

/// Decoded IDX payload.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// A 1-D file: raw class indices.
    Labels(Vec<usize>),
    /// A multi-dimensional file: bytes scaled by 1/255.
    Tensor(Tensor),
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.len() < 4 {
        return Err(Error::IdxTruncated { expected: 4, actual: bytes.len() });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::IdxMagic([bytes[0], bytes[1]]));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::IdxTypeCode(bytes[2]));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(Error::InvalidArgument("idx: zero dimensions".into()));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::IdxTruncated { expected: header, actual: bytes.len() });
    }
    let dims: Vec<usize> =
        bytes[4..header].chunks_exact(4).map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    let n: usize = dims.iter().product();
    let expected = header + n;
    if bytes.len() < expected {
        return Err(Error::IdxTruncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::InvalidArgument(format!("idx: {} trailing bytes", bytes.len() - expected)));
    }
    let payload = &bytes[header..];
    if ndims == 1 {
        Ok(IdxData::Labels(payload.iter().map(|&b| b as usize).collect()))
    } else {
        let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
        Ok(IdxData::Tensor(Tensor::new(dims, data)?))
    }
}

fn idx_header(dims: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

/// Encode a tensor with values in [0, 1] as an unsigned-byte IDX stream.
pub fn write_idx_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = idx_header(t.shape());
    out.extend(t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = idx_header(&[labels.len()]);
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} exceeds a byte")))?);
    }
    Ok(out)
}

/// Read an image file (`[N, H, W]`) and a label file into a dataset.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    let imgs = match parse_idx(&std::fs::read(images)?)? {
        IdxData::Tensor(t) => t,
        IdxData::Labels(_) => return Err(Error::InvalidArgument("image file is one-dimensional".into())),
    };
    let lbls = match parse_idx(&std::fs::read(labels)?)? {
        IdxData::Labels(l) => l,
        IdxData::Tensor(_) => return Err(Error::InvalidArgument("label file is not one-dimensional".into())),
    };
    let (n, h, w) = match imgs.shape()[..] {
        [n, h, w] => (n, h, w),
        _ => return Err(Error::InvalidArgument(format!("image file shape {:?}, want [N,H,W]", imgs.shape()))),
    };
    let per = h * w;
    let images =
        imgs.data().chunks_exact(per).map(|c| Tensor::new(vec![1, h, w], c.to_vec())).collect::<Result<Vec<_>>>()?;
    debug_assert_eq!(images.len(), n);
    let classes = lbls.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(images, lbls, classes)
}
