//! Dataset loading and preparation.
//!
//! Images are stored as a single `(n, c, h, w)` tensor with pixel values in
//! `[0, 1]` (plain `/255` scaling, no standardization: zero must mean "absent
//! pixel" because masking fills with zeros). Labels index `class_names`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
const IDX_MAGIC_IMAGES_3D: u32 = 0x0000_0803;
const IDX_MAGIC_IMAGES_4D: u32 = 0x0000_0804;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

/// One image plus its class label.
#[derive(Debug, Clone)]
pub struct ImageSample {
    /// `(c, h, w)` pixels in `[0, 1]`.
    pub pixels: Array3<f32>,
    pub label: usize,
}

impl ImageSample {
    pub fn new(pixels: Array3<f32>, label: usize) -> Result<Self> {
        if pixels.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(Error::contract(
                "image pixels must be finite and within [0, 1]",
            ));
        }
        Ok(ImageSample { pixels, label })
    }
}

/// An in-memory labeled image dataset. All samples share one shape.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Array4<f32>,
    labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split_tag: SplitTag,
}

impl LabeledDataset {
    pub fn new(
        images: Array4<f32>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        split_tag: SplitTag,
    ) -> Result<Self> {
        if images.shape()[0] == 0 {
            return Err(Error::contract("dataset must be nonempty"));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::contract(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::contract(format!(
                "label {bad} does not index the {} class names",
                class_names.len()
            )));
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_names,
            split_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(c, h, w)` of every sample.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixels(&self, index: usize) -> ArrayView3<'_, f32> {
        self.images.index_axis(Axis(0), index)
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, index: usize) -> ImageSample {
        ImageSample {
            pixels: self.pixels(index).to_owned(),
            label: self.labels[index],
        }
    }

    /// The full `(n, c, h, w)` tensor.
    pub fn images(&self) -> &Array4<f32> {
        &self.images
    }

    /// Rows `indices` stacked into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Array4<f32> {
        let (c, h, w) = self.image_shape();
        let mut out = Array4::zeros((indices.len(), c, h, w));
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row).assign(&self.pixels(i));
        }
        out
    }
}

fn fmt_err(path: &Path, message: impl Into<String>, offset: u64) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
        offset,
    }
}

struct IdxReader<R> {
    inner: R,
    path: PathBuf,
    offset: u64,
}

impl<R: Read> IdxReader<R> {
    fn new(inner: R, path: &Path) -> Self {
        IdxReader {
            inner,
            path: path.to_path_buf(),
            offset: 0,
        }
    }

    fn read_u32(&mut self) -> Result<u32> {
        let at = self.offset;
        let v = self
            .inner
            .read_u32::<BigEndian>()
            .map_err(|_| fmt_err(&self.path, "truncated file while reading header", at))?;
        self.offset += 4;
        Ok(v)
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| {
            fmt_err(
                &self.path,
                format!("truncated file: expected {} more bytes", buf.len()),
                at,
            )
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(fmt_err(
                &self.path,
                "trailing bytes after declared data",
                self.offset,
            )),
            Err(e) => Err(Error::io(&self.path, e)),
        }
    }
}

/// Load a dataset from a pair of IDX files (big-endian dims, magic
/// `0x00000801` for labels, `0x00000803` / `0x00000804` for images).
/// Pixel bytes are scaled to `[0, 1]` by `/255`; sample order is preserved.
pub fn load_idx_dataset(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split_tag: SplitTag,
) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let file = File::open(images_path).map_err(|e| Error::io(images_path, e))?;
    let mut r = IdxReader::new(BufReader::new(file), images_path);
    let magic = r.read_u32()?;
    let (n, c, h, w) = match magic {
        IDX_MAGIC_IMAGES_3D => {
            let n = r.read_u32()? as usize;
            let h = r.read_u32()? as usize;
            let w = r.read_u32()? as usize;
            (n, 1, h, w)
        }
        IDX_MAGIC_IMAGES_4D => {
            let n = r.read_u32()? as usize;
            let c = r.read_u32()? as usize;
            let h = r.read_u32()? as usize;
            let w = r.read_u32()? as usize;
            (n, c, h, w)
        }
        other => {
            return Err(fmt_err(
                images_path,
                format!("malformed magic number {other:#010x} for an image file"),
                0,
            ))
        }
    };
    if n == 0 {
        return Err(fmt_err(images_path, "empty dataset", 4));
    }
    let mut bytes = vec![0u8; n * c * h * w];
    r.read_exact(&mut bytes)?;
    r.expect_eof()?;
    let pixels: Vec<f32> = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
    let images = Array4::from_shape_vec((n, c, h, w), pixels)
        .expect("image byte count matches declared dims");

    let file = File::open(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut r = IdxReader::new(BufReader::new(file), labels_path);
    let magic = r.read_u32()?;
    if magic != IDX_MAGIC_LABELS {
        return Err(fmt_err(
            labels_path,
            format!("malformed magic number {magic:#010x} for a label file"),
            0,
        ));
    }
    let n_labels = r.read_u32()? as usize;
    if n_labels != n {
        return Err(fmt_err(
            labels_path,
            format!("label count {n_labels} does not match image count {n}"),
            4,
        ));
    }
    let mut raw = vec![0u8; n_labels];
    r.read_exact(&mut raw)?;
    r.expect_eof()?;
    let labels: Vec<usize> = raw.iter().map(|&b| b as usize).collect();

    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let class_names = (0..num_classes).map(|c| c.to_string()).collect();
    LabeledDataset::new(images, labels, class_names, split_tag)
}

/// Write a dataset back out as an IDX file pair. Pixels are quantized with
/// `round(p * 255)`, so datasets that came from IDX round-trip bit-exactly.
pub fn save_idx_dataset(
    ds: &LabeledDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let (c, h, w) = ds.image_shape();

    let file = File::create(images_path).map_err(|e| Error::io(images_path, e))?;
    let mut wtr = BufWriter::new(file);
    let write = |wtr: &mut BufWriter<File>, v: u32| -> Result<()> {
        wtr.write_u32::<BigEndian>(v)
            .map_err(|e| Error::io(images_path, e))
    };
    if c == 1 {
        write(&mut wtr, IDX_MAGIC_IMAGES_3D)?;
        write(&mut wtr, ds.len() as u32)?;
    } else {
        write(&mut wtr, IDX_MAGIC_IMAGES_4D)?;
        write(&mut wtr, ds.len() as u32)?;
        write(&mut wtr, c as u32)?;
    }
    write(&mut wtr, h as u32)?;
    write(&mut wtr, w as u32)?;
    let bytes: Vec<u8> = ds
        .images()
        .iter()
        .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    wtr.write_all(&bytes).map_err(|e| Error::io(images_path, e))?;

    let file = File::create(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let mut wtr = BufWriter::new(file);
    wtr.write_u32::<BigEndian>(IDX_MAGIC_LABELS)
        .map_err(|e| Error::io(labels_path, e))?;
    wtr.write_u32::<BigEndian>(ds.len() as u32)
        .map_err(|e| Error::io(labels_path, e))?;
    let raw: Vec<u8> = ds.labels().iter().map(|&l| l as u8).collect();
    wtr.write_all(&raw).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Keep only the samples whose label is in `keep`, relabeling to
/// `0..keep.len()` in the order given. Original relative order is preserved.
pub fn filter_classes(ds: &LabeledDataset, keep: &[usize]) -> Result<LabeledDataset> {
    let mut distinct = keep.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::contract(
            "filter_classes needs at least 2 distinct class ids",
        ));
    }
    if distinct.len() != keep.len() {
        return Err(Error::contract("filter_classes got duplicate class ids"));
    }
    let missing: Vec<usize> = keep
        .iter()
        .copied()
        .filter(|k| !ds.labels().contains(k))
        .collect();
    if !missing.is_empty() {
        return Err(Error::contract(format!(
            "classes {missing:?} are not present in the dataset"
        )));
    }

    let remap = |label: usize| keep.iter().position(|&k| k == label);
    let indices: Vec<usize> = (0..ds.len())
        .filter(|&i| remap(ds.label(i)).is_some())
        .collect();
    let images = ds.gather(&indices);
    let labels: Vec<usize> = indices
        .iter()
        .map(|&i| remap(ds.label(i)).expect("filtered to members of keep"))
        .collect();
    let class_names = keep
        .iter()
        .map(|&k| {
            ds.class_names
                .get(k)
                .cloned()
                .unwrap_or_else(|| k.to_string())
        })
        .collect();
    LabeledDataset::new(images, labels, class_names, ds.split_tag)
}

/// Deterministic shuffle split into `(train, validation)` with sizes
/// `ceil(n * (1 - val_fraction))` and the remainder.
pub fn train_val_split(
    ds: &LabeledDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(Error::contract(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let n = ds.len();
    let n_train = (n as f64 * (1.0 - val_fraction)).ceil() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::contract(format!(
            "split of {n} samples at fraction {val_fraction} leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let build = |idx: &[usize], tag: SplitTag| -> Result<LabeledDataset> {
        LabeledDataset::new(
            ds.gather(idx),
            idx.iter().map(|&i| ds.label(i)).collect(),
            ds.class_names.clone(),
            tag,
        )
    };
    Ok((
        build(&order[..n_train], SplitTag::Train)?,
        build(&order[n_train..], SplitTag::Validation)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use tempfile::tempdir;

    fn toy_dataset(labels: &[usize], num_classes: usize) -> LabeledDataset {
        let n = labels.len();
        let mut images = Array4::zeros((n, 1, 2, 2));
        for i in 0..n {
            images[[i, 0, 0, 0]] = i as f32 / n as f32;
        }
        let class_names = (0..num_classes).map(|c| c.to_string()).collect();
        LabeledDataset::new(images, labels.to_vec(), class_names, SplitTag::Train).unwrap()
    }

    #[test]
    fn idx_round_trip_known_bytes() {
        // hand-built 2-image file with bytes {0, 255} -> pixels {0.0, 1.0}
        let dir = tempdir().unwrap();
        let img = dir.path().join("imgs");
        let lbl = dir.path().join("lbls");
        let mut bytes = vec![];
        bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0u8, 255, 255, 0]);
        std::fs::write(&img, &bytes).unwrap();
        let mut bytes = vec![];
        bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[1u8, 0]);
        std::fs::write(&lbl, &bytes).unwrap();

        let ds = load_idx_dataset(&img, &lbl, SplitTag::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_shape(), (1, 1, 2));
        assert_eq!(ds.pixels(0).as_slice().unwrap(), &[0.0, 1.0]);
        assert_eq!(ds.pixels(1).as_slice().unwrap(), &[1.0, 0.0]);
        assert_eq!(ds.labels(), &[1, 0]);

        // full write/read round trip is bit-exact after /255 quantization
        let img2 = dir.path().join("imgs2");
        let lbl2 = dir.path().join("lbls2");
        save_idx_dataset(&ds, &img2, &lbl2).unwrap();
        assert_eq!(std::fs::read(&img, ).unwrap(), std::fs::read(&img2).unwrap());
        let back = load_idx_dataset(&img2, &lbl2, SplitTag::Train).unwrap();
        assert_eq!(back.images(), ds.images());
    }

    #[test]
    fn idx_empty_dataset_rejected() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("empty");
        let mut bytes = vec![];
        bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        bytes.extend_from_slice(&0u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        std::fs::write(&img, &bytes).unwrap();
        let err = load_idx_dataset(&img, &img, SplitTag::Train).unwrap_err();
        assert!(err.to_string().contains("empty dataset"), "{err}");
    }

    #[test]
    fn idx_bad_magic_and_truncation_name_file_and_offset() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("bad");
        std::fs::write(&img, 0xdead_beefu32.to_be_bytes()).unwrap();
        let err = load_idx_dataset(&img, &img, SplitTag::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad") && msg.contains("magic"), "{msg}");

        let truncated = dir.path().join("trunc");
        let mut bytes = vec![];
        bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0u8; 3]); // needs 8
        std::fs::write(&truncated, &bytes).unwrap();
        let err = load_idx_dataset(&truncated, &truncated, SplitTag::Train).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("trunc") && msg.contains("offset 16"), "{msg}");
    }

    #[test]
    fn filter_classes_remaps_in_keep_order() {
        let ds = toy_dataset(&[0, 1, 2, 0, 1, 2], 3);
        let out = filter_classes(&ds, &[2, 0]).unwrap();
        // original positions (0,2,3,5) survive with labels (1,0,1,0)
        assert_eq!(out.len(), 4);
        assert_eq!(out.labels(), &[1, 0, 1, 0]);
        assert_eq!(out.pixels(0), ds.pixels(0));
        assert_eq!(out.pixels(1), ds.pixels(2));
        assert_eq!(out.pixels(2), ds.pixels(3));
        assert_eq!(out.pixels(3), ds.pixels(5));
        assert_eq!(out.class_names, vec!["2".to_string(), "0".to_string()]);
    }

    #[test]
    fn filter_classes_identity_when_keeping_all() {
        let ds = toy_dataset(&[0, 1, 2, 0], 3);
        let out = filter_classes(&ds, &[0, 1, 2]).unwrap();
        assert_eq!(out.labels(), ds.labels());
        assert_eq!(out.images(), ds.images());
    }

    #[test]
    fn filter_classes_is_idempotent() {
        let ds = toy_dataset(&[0, 1, 2, 0, 1, 2, 1], 3);
        let once = filter_classes(&ds, &[1, 2]).unwrap();
        let twice = filter_classes(&once, &[0, 1]).unwrap(); // already remapped ids
        assert_eq!(once.labels(), twice.labels());
        assert_eq!(once.images(), twice.images());
    }

    #[test]
    fn filter_classes_reports_missing_ids() {
        let ds = toy_dataset(&[0, 1, 0, 1], 2);
        let err = filter_classes(&ds, &[0, 7]).unwrap_err();
        assert!(err.to_string().contains("[7]"), "{err}");
    }

    #[test]
    fn split_is_deterministic_and_sized() {
        let ds = toy_dataset(&(0..100).map(|i| i % 2).collect::<Vec<_>>(), 2);
        let (a_train, a_val) = train_val_split(&ds, 0.2, 7).unwrap();
        let (b_train, b_val) = train_val_split(&ds, 0.2, 7).unwrap();
        assert_eq!(a_train.images(), b_train.images());
        assert_eq!(a_val.images(), b_val.images());
        assert_eq!(a_train.len(), 80);
        assert_eq!(a_val.len(), 20);

        let (c_train, _) = train_val_split(&ds, 0.2, 8).unwrap();
        assert_ne!(a_train.images(), c_train.images(), "distinct seeds differ");

        let ds10 = toy_dataset(&(0..10).map(|i| i % 2).collect::<Vec<_>>(), 2);
        let (t, v) = train_val_split(&ds10, 0.5, 0).unwrap();
        assert_eq!((t.len(), v.len()), (5, 5));
    }

    #[test]
    fn split_of_three_at_034_is_two_one() {
        let ds = toy_dataset(&[0, 1, 0], 2);
        let (t, v) = train_val_split(&ds, 0.34, 3).unwrap();
        assert_eq!((t.len(), v.len()), (2, 1));
        // union equals the original multiset of first-pixel markers
        let mut seen: Vec<i64> = t
            .images()
            .index_axis(Axis(1), 0)
            .index_axis(Axis(1), 0)
            .index_axis(Axis(1), 0)
            .iter()
            .chain(
                v.images()
                    .index_axis(Axis(1), 0)
                    .index_axis(Axis(1), 0)
                    .index_axis(Axis(1), 0)
                    .iter(),
            )
            .map(|&x| (x * 3.0).round() as i64)
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
    }
}
