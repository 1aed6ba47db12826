//! CIFAR binary record format.
//!
//! CIFAR-10 files are a sequence of 3073-byte records: one label byte
//! followed by 3072 pixel bytes, channel-major (the 32×32 red plane, then
//! green, then blue, each row-major). CIFAR-100 records carry two label
//! bytes (coarse, fine) and are 3074 bytes long; the fine label is used.

use std::path::{Path, PathBuf};

use super::{DataError, Dataset, LabelKind, Normalization, Split};
use crate::tensor::Tensor;

pub const IMAGE_BYTES: usize = 3 * 32 * 32;
pub const PLANE: usize = 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + IMAGE_BYTES
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Decoded records, pixels kept as raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecords {
    pub variant: CifarVariant,
    /// Class label (fine label for CIFAR-100).
    pub labels: Vec<u8>,
    /// Coarse labels, CIFAR-100 only.
    pub coarse: Vec<u8>,
    /// `len × 3072` channel-major pixel bytes.
    pub pixels: Vec<u8>,
}

impl CifarRecords {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn parse_records(bytes: &[u8], variant: CifarVariant) -> Result<CifarRecords, DataError> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        let full = bytes.len() / rec;
        return Err(DataError::Format {
            offset: (full * rec) as u64,
            reason: format!(
                "file length {} is not a multiple of the {rec}-byte record size ({} trailing bytes)",
                bytes.len(),
                bytes.len() - full * rec
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut out = CifarRecords {
        variant,
        labels: Vec::with_capacity(n),
        coarse: Vec::new(),
        pixels: Vec::with_capacity(n * IMAGE_BYTES),
    };
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let label = record[variant.label_bytes() - 1];
        if label as usize >= variant.classes() {
            return Err(DataError::Format {
                offset: (i * rec) as u64,
                reason: format!("label {label} out of range in record {i}"),
            });
        }
        if variant == CifarVariant::Cifar100 {
            out.coarse.push(record[0]);
        }
        out.labels.push(label);
        out.pixels.extend_from_slice(&record[variant.label_bytes()..]);
    }
    Ok(out)
}

pub fn encode_records(records: &CifarRecords) -> Vec<u8> {
    let v = records.variant;
    let mut out = Vec::with_capacity(records.len() * v.record_len());
    for (i, &label) in records.labels.iter().enumerate() {
        if v == CifarVariant::Cifar100 {
            out.push(records.coarse.get(i).copied().unwrap_or(0));
        }
        out.push(label);
        out.extend_from_slice(&records.pixels[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]);
    }
    out
}

/// Pixels scaled to `[0, 1]`, no normalization.
pub fn records_to_dataset(records: &CifarRecords, split: Split) -> Dataset {
    let inputs = Tensor::matrix(
        records.len(),
        IMAGE_BYTES,
        records.pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .expect("pixel buffer");
    Dataset::new(
        inputs,
        records.labels.iter().map(|&l| l as i64).collect(),
        LabelKind::MultiClass(records.variant.classes()),
        split,
    )
    .expect("labels validated by the parser")
}

/// Re-encodes an unnormalized `[0, 1]` image dataset as raw records.
pub fn dataset_to_records(ds: &Dataset, variant: CifarVariant) -> Result<CifarRecords, DataError> {
    if ds.normalization().is_some() {
        return Err(DataError::Contract("cannot re-encode normalized pixels".into()));
    }
    if ds.dim() != IMAGE_BYTES {
        return Err(DataError::Contract(format!("expected {IMAGE_BYTES} pixels, got {}", ds.dim())));
    }
    let pixels = ds
        .inputs()
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(CifarRecords {
        variant,
        labels: ds.labels().iter().map(|&l| l as u8).collect(),
        coarse: if variant == CifarVariant::Cifar100 {
            vec![0; ds.len()]
        } else {
            Vec::new()
        },
        pixels,
    })
}

/// Per-channel mean/std, broadcast to all 1024 coordinates of each plane.
pub fn channel_normalization(ds: &Dataset) -> Normalization {
    let mut mean = vec![0.0; IMAGE_BYTES];
    let mut scale = vec![1.0; IMAGE_BYTES];
    let n = ds.len();
    for c in 0..3 {
        let plane = c * PLANE..(c + 1) * PLANE;
        let count = (n * PLANE) as f64;
        let mut sum = 0.0;
        for i in 0..n {
            sum += ds.inputs().row(i)[plane.clone()].iter().sum::<f64>();
        }
        let m = sum / count;
        let mut ss = 0.0;
        for i in 0..n {
            ss += ds.inputs().row(i)[plane.clone()]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        let sd = (ss / count).sqrt();
        mean[plane.clone()].iter_mut().for_each(|v| *v = m);
        scale[plane].iter_mut().for_each(|v| *v = if sd > 0.0 { sd } else { 1.0 });
    }
    Normalization { mean, scale }
}

fn split_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    }
}

/// Reads raw records from a single file or a directory holding the
/// canonical `data_batch_{1..5}.bin` / `test_batch.bin` files.
pub fn read_records(path: &Path, split: Split, variant: CifarVariant) -> Result<CifarRecords, DataError> {
    let files = if path.is_dir() {
        split_files(path, split)
    } else {
        vec![path.to_path_buf()]
    };
    let mut all: Option<CifarRecords> = None;
    for f in files {
        let bytes = std::fs::read(&f).map_err(|e| DataError::io(&f, e))?;
        let recs = parse_records(&bytes, variant)?;
        match all.as_mut() {
            None => all = Some(recs),
            Some(acc) => {
                acc.labels.extend(recs.labels);
                acc.coarse.extend(recs.coarse);
                acc.pixels.extend(recs.pixels);
            }
        }
    }
    Ok(all.expect("at least one file"))
}

/// Reads CIFAR-10, scales pixels to `[0, 1]` and normalizes per channel.
///
/// `stats` supplies the normalization (typically fitted on the training
/// split); when `None` it is fitted on the data being read.
pub fn cifar10_read(path: &Path, split: Split, stats: Option<&Normalization>) -> Result<Dataset, DataError> {
    let records = read_records(path, split, CifarVariant::Cifar10)?;
    let mut ds = records_to_dataset(&records, split);
    let norm = stats.cloned().unwrap_or_else(|| channel_normalization(&ds));
    ds.normalize(norm)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(n: usize, variant: CifarVariant) -> Vec<u8> {
        let mut out = Vec::new();
        for i in 0..n {
            if variant == CifarVariant::Cifar100 {
                out.push((i % 20) as u8);
            }
            out.push((i * 7 % variant.classes()) as u8);
            out.extend((0..IMAGE_BYTES).map(|p| ((p * 31 + i * 17) % 256) as u8));
        }
        out
    }

    #[test]
    fn two_record_round_trip() {
        let mut bytes = synthetic(2, CifarVariant::Cifar10);
        bytes[0] = 7;
        bytes[1] = 255;
        let recs = parse_records(&bytes, CifarVariant::Cifar10).unwrap();
        assert_eq!(recs.labels[0], 7);
        let ds = records_to_dataset(&recs, Split::Train);
        assert_eq!(ds.labels()[0], 7);
        assert_eq!(ds.inputs().row(0)[0], 1.0);
        let again = encode_records(&dataset_to_records(&ds, CifarVariant::Cifar10).unwrap());
        assert_eq!(again, bytes);
    }

    #[test]
    fn cifar100_round_trip() {
        let bytes = synthetic(3, CifarVariant::Cifar100);
        let recs = parse_records(&bytes, CifarVariant::Cifar100).unwrap();
        assert_eq!(recs.coarse.len(), 3);
        assert_eq!(encode_records(&recs), bytes);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let mut bytes = synthetic(2, CifarVariant::Cifar10);
        bytes.truncate(3073 + 100);
        match parse_records(&bytes, CifarVariant::Cifar10) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 3073),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut bytes = synthetic(3, CifarVariant::Cifar10);
        bytes[2 * 3073] = 10;
        match parse_records(&bytes, CifarVariant::Cifar10) {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 2 * 3073),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reads_directory_layout_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), synthetic(2, CifarVariant::Cifar10)).unwrap();
        }
        std::fs::write(dir.path().join("test_batch.bin"), synthetic(3, CifarVariant::Cifar10)).unwrap();
        let train = cifar10_read(dir.path(), Split::Train, None).unwrap();
        assert_eq!(train.len(), 10);
        let norm = train.normalization().unwrap().clone();
        let test = cifar10_read(dir.path(), Split::Test, Some(&norm)).unwrap();
        assert_eq!(test.len(), 3);
        assert_eq!(test.normalization(), Some(&norm));
        // per-channel: constant within a plane
        assert_eq!(norm.mean[0], norm.mean[PLANE - 1]);
        let refit = channel_normalization(&train);
        for c in 0..3 {
            assert!(refit.mean[c * PLANE].abs() < 1e-9);
            assert!((refit.scale[c * PLANE] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = cifar10_read(Path::new("/nonexistent/cifar"), Split::Test, None).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }
}
