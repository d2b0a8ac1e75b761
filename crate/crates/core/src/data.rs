//! Image datasets: a synthetic labeled corpus, a raw binary container, and
//! normalized batch extraction.
//!
//! File layout (little endian throughout):
//!
//! ```text
//! magic  b"LGDS"
//! u32    format version (1)
//! u32    count, channels, height, width, num_classes
//! u8     images, count*channels*height*width bytes, row-major
//! u16    labels, count entries
//! ```
//!
//! Loaders validate the header against the actual byte count before any
//! allocation, so truncated or oversized files fail cleanly.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const DATASET_MAGIC: [u8; 4] = *b"LGDS";
pub const DATASET_VERSION: u32 = 1;

/// Pixel normalization applied when batches are built: `(x/255 - MEAN)/STD`.
pub const NORM_MEAN: f32 = 0.5;
pub const NORM_STD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: u32,
    images: Vec<u8>,
    labels: Vec<u16>,
}

impl Dataset {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        num_classes: u32,
        images: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || num_classes == 0 {
            return Err(Error::invalid("dataset", "empty geometry"));
        }
        if images.len() != labels.len() * per {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "{} image bytes do not match {} labels of {} bytes each",
                    images.len(),
                    labels.len(),
                    per
                ),
            ));
        }
        for (i, &y) in labels.iter().enumerate() {
            if u32::from(y) >= num_classes {
                return Err(Error::LabelOutOfRange {
                    index: i,
                    label: u32::from(y),
                    num_classes,
                });
            }
        }
        Ok(Dataset {
            channels,
            height,
            width,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let per = self.channels * self.height * self.width;
        &self.images[i * per..(i + 1) * per]
    }

    /// Normalized `[B, C, H, W]` tensor plus labels for the given rows.
    pub fn batch<F: Real>(&self, rows: &[usize]) -> Result<(Tensor<F>, Vec<usize>)> {
        let per = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(rows.len() * per);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(Error::invalid(
                    "batch",
                    format!("row {} out of range for {} samples", r, self.len()),
                ));
            }
            for &px in self.image_bytes(r) {
                let unit = px as f64 / 255.0;
                data.push(F::from_f64((unit - NORM_MEAN as f64) / NORM_STD as f64));
            }
            labels.push(self.label(r));
        }
        let t = Tensor::new(
            vec![rows.len(), self.channels, self.height, self.width],
            data,
        )?;
        Ok((t, labels))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.images.len() + self.labels.len() * 2);
        buf.extend_from_slice(&DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for v in [
            self.len() as u32,
            self.channels as u32,
            self.height as u32,
            self.width as u32,
            self.num_classes,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.images);
        for &l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let magic = r.take_array::<4>("dataset magic")?;
        if magic != DATASET_MAGIC {
            return Err(Error::BadMagic {
                expected: DATASET_MAGIC,
                found: magic,
            });
        }
        let version = r.take_u32("dataset version")?;
        if version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: DATASET_VERSION,
            });
        }
        let count = r.take_u32("sample count")? as usize;
        let channels = r.take_u32("channels")? as usize;
        let height = r.take_u32("height")? as usize;
        let width = r.take_u32("width")? as usize;
        let num_classes = r.take_u32("class count")?;

        let expected = (channels as u128)
            * (height as u128)
            * (width as u128)
            * (count as u128)
            + (count as u128) * 2;
        if r.remaining() as u128 != expected {
            return Err(Error::Truncated {
                what: "dataset payload",
                needed: expected.min(usize::MAX as u128) as usize,
            });
        }
        let image_bytes = (expected - (count as u128) * 2) as u64;
        let images = r.take_bytes(image_bytes as usize, "images")?.to_vec();
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let b = r.take_array::<2>("label")?;
            labels.push(u16::from_le_bytes(b));
        }
        Dataset::new(channels, height, width, num_classes, images, labels)
    }
}

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take_bytes(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated { what, needed: n });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn take_array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        let b = self.take_bytes(N, what)?;
        let mut out = [0u8; N];
        out.copy_from_slice(b);
        Ok(out)
    }

    pub fn take_u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take_array::<4>(what)?))
    }
}

/// Class-conditional synthetic images: oriented sinusoidal gratings whose
/// angle and frequency are functions of the label, plus seeded pixel noise.
/// Classes are separable but not trivially so.
pub fn gen_synthetic(
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    num_classes: u32,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 || num_classes == 0 {
        return Err(Error::invalid("gen_synthetic", "count and classes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count * channels * height * width);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let y = (i as u32) % num_classes;
        labels.push(y as u16);
        let theta = std::f64::consts::PI * (y as f64) / (num_classes as f64);
        let freq = 1.0 + (y % 3) as f64;
        let jitter: f64 = rng.gen_range(-0.3..0.3);
        for c in 0..channels {
            let phase = 2.0 * std::f64::consts::PI * (c as f64) / (channels as f64) + jitter;
            for py in 0..height {
                for px in 0..width {
                    let u = px as f64 / width as f64;
                    let v = py as f64 / height as f64;
                    let t = freq * 2.0 * std::f64::consts::PI * (u * theta.cos() + v * theta.sin());
                    let clean = 127.5 + 100.0 * (t + phase).sin();
                    let noise: f64 = rng.gen_range(-20.0..20.0);
                    images.push((clean + noise).clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    Dataset::new(channels, height, width, num_classes, images, labels)
}

/// Deterministic epoch shuffle: the order depends only on `(seed, epoch)`.
pub fn epoch_order(count: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mix = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let mut order: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_roundtrips_through_file() {
        let ds = gen_synthetic(20, 3, 8, 8, 5, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = gen_synthetic(10, 1, 6, 6, 3, 42).unwrap();
        let b = gen_synthetic(10, 1, 6, 6, 3, 42).unwrap();
        let c = gen_synthetic(10, 1, 6, 6, 3, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn classes_have_distinct_signatures() {
        // mean pixel profile differs between classes: the generator encodes
        // the label, so a model can actually learn from this corpus
        let ds = gen_synthetic(40, 1, 8, 8, 2, 1).unwrap();
        let mut sums = [[0f64; 64]; 2];
        let mut counts = [0usize; 2];
        for i in 0..ds.len() {
            let y = ds.label(i);
            counts[y] += 1;
            for (j, &b) in ds.image_bytes(i).iter().enumerate() {
                sums[y][j] += b as f64;
            }
        }
        let mut dist = 0f64;
        for j in 0..64 {
            let d = sums[0][j] / counts[0] as f64 - sums[1][j] / counts[1] as f64;
            dist += d * d;
        }
        assert!(dist.sqrt() > 50.0, "class profiles too close: {}", dist.sqrt());
    }

    #[test]
    fn batch_is_normalized_to_unit_range() {
        let ds = gen_synthetic(4, 2, 5, 5, 2, 3).unwrap();
        let (t, labels) = ds.batch::<f32>(&[0, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 5, 5]);
        assert_eq!(labels, vec![0, 0]);
        assert!(t.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn truncated_file_is_rejected_without_allocation() {
        let ds = gen_synthetic(6, 1, 4, 4, 2, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        ds.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            Dataset::from_bytes(&bytes),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let ds = gen_synthetic(2, 1, 4, 4, 2, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        ds.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::BadMagic { .. })));

        let mut bad = good;
        bad[4] = 99;
        assert!(matches!(
            Dataset::from_bytes(&bad),
            Err(Error::UnsupportedVersion { .. })
        ));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let images = vec![0u8; 2 * 4];
        let labels = vec![0u16, 7u16];
        let err = Dataset::new(1, 2, 2, 3, images, labels).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { index: 1, label: 7, .. }));
    }

    #[test]
    fn epoch_order_is_a_permutation_and_varies_by_epoch() {
        let a = epoch_order(100, 5, 0);
        let b = epoch_order(100, 5, 1);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(100, 5, 0));
    }

    #[test]
    fn random_bytes_never_panic_the_loader() {
        // totality fuzz: arbitrary mutations must produce Err, not panics
        let ds = gen_synthetic(3, 1, 4, 4, 2, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        ds.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let mut bytes = good.clone();
            let flips = rng.gen_range(1..8);
            for _ in 0..flips {
                let i = rng.gen_range(0..bytes.len());
                bytes[i] = rng.gen();
            }
            let _ = Dataset::from_bytes(&bytes);
            let cut = rng.gen_range(0..bytes.len());
            let _ = Dataset::from_bytes(&bytes[..cut]);
        }
    }
}
