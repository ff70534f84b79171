use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{DataError, Dataset};
use crate::models::ImageGeometry;

/// One label byte followed by a 3×32×32 image.
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetFormat {
    /// CIFAR-10 binary batches: a file or a directory of `*.bin` files.
    CifarBinary,
    /// IDX image file; labels are read from the sibling file whose name has
    /// `images` replaced by `labels`.
    IdxPair,
    /// Header `label,p0,…` then one row per image with integer pixels.
    Csv,
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetFormat::CifarBinary => "cifar-binary",
            DatasetFormat::IdxPair => "idx",
            DatasetFormat::Csv => "csv",
        })
    }
}

impl FromStr for DatasetFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cifar-binary" => Ok(DatasetFormat::CifarBinary),
            "idx" => Ok(DatasetFormat::IdxPair),
            "csv" => Ok(DatasetFormat::Csv),
            other => Err(DataError::Parameter(format!("unknown dataset format `{other}` (cifar-binary, idx, csv)"))),
        }
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, DataError> {
    match format {
        DatasetFormat::CifarBinary => {
            if path.is_dir() {
                let mut files: Vec<PathBuf> = fs::read_dir(path)
                    .map_err(|e| io_err(path, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "bin"))
                    .collect();
                files.sort();
                if files.is_empty() {
                    return Err(DataError::Invalid(format!("no .bin files in {}", path.display())));
                }
                let mut bytes = Vec::new();
                for f in &files {
                    let chunk = read(f)?;
                    if chunk.len() % CIFAR_RECORD_LEN != 0 {
                        return Err(truncated(chunk.len()));
                    }
                    bytes.extend(chunk);
                }
                load_cifar_binary(&bytes)
            } else {
                load_cifar_binary(&read(path)?)
            }
        }
        DatasetFormat::IdxPair => {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if !name.contains("images") {
                return Err(DataError::Parameter(format!("idx image file name `{name}` must contain `images`")));
            }
            let labels = path.with_file_name(name.replacen("images", "labels", 1));
            load_idx_pair(&read(path)?, &read(&labels)?)
        }
        DatasetFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            load_csv(&text)
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

fn truncated(len: usize) -> DataError {
    DataError::Truncated { expected: len.div_ceil(CIFAR_RECORD_LEN).max(1) * CIFAR_RECORD_LEN, actual: len }
}

pub fn load_cifar_binary(bytes: &[u8]) -> Result<Dataset, DataError> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(truncated(bytes.len()));
    }
    let count = bytes.len() / CIFAR_RECORD_LEN;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * (CIFAR_RECORD_LEN - 1));
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let y = rec[0] as usize;
        if y >= CIFAR_CLASSES {
            return Err(DataError::Parse { offset: r * CIFAR_RECORD_LEN, msg: format!("label {y} out of range") });
        }
        labels.push(y);
        pixels.extend_from_slice(&rec[1..]);
    }
    Dataset::new(ImageGeometry::CIFAR, pixels, labels, CIFAR_CLASSES)
}

fn idx_header(bytes: &[u8]) -> Result<(Vec<usize>, usize), DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated { expected: 4, actual: bytes.len() });
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(DataError::Parse { offset: 0, msg: "expected unsigned-byte IDX magic 00 00 08".into() });
    }
    let rank = bytes[3] as usize;
    let start = 4 + 4 * rank;
    if bytes.len() < start {
        return Err(DataError::Truncated { expected: start, actual: bytes.len() });
    }
    let dims: Vec<usize> =
        (0..rank).map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize).collect();
    let need = start + dims.iter().product::<usize>();
    if bytes.len() != need {
        return Err(DataError::Truncated { expected: need, actual: bytes.len() });
    }
    Ok((dims, start))
}

/// IDX images of rank 3 (`[N, H, W]`, grayscale) or 4 (`[N, C, H, W]`).
pub fn load_idx_pair(images: &[u8], labels: &[u8]) -> Result<Dataset, DataError> {
    let (dims, start) = idx_header(images)?;
    let geometry = match dims.as_slice() {
        [_, h, w] if h == w => ImageGeometry { channels: 1, size: *h },
        [_, c, h, w] if h == w => ImageGeometry { channels: *c, size: *h },
        _ => return Err(DataError::Parse { offset: 3, msg: format!("unsupported image dims {dims:?}") }),
    };
    let (ldims, lstart) = idx_header(labels)?;
    if ldims.len() != 1 || ldims[0] != dims[0] {
        return Err(DataError::Invalid(format!("{} labels for {} images", ldims.first().copied().unwrap_or(0), dims[0])));
    }
    let labels: Vec<usize> = labels[lstart..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(geometry, images[start..].to_vec(), labels, classes)
}

/// CSV with header `label,p0,…,p{k-1}`; `k` must be `s²` or `3s²`.
pub fn load_csv(text: &str) -> Result<Dataset, DataError> {
    let mut lines = text.lines();
    let mut offset = 0usize;
    let header = lines.next().ok_or(DataError::Parse { offset: 0, msg: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.first() != Some(&"label") {
        return Err(DataError::Parse { offset: 0, msg: "header must start with `label`".into() });
    }
    let k = cols.len() - 1;
    let geometry = [1usize, 3]
        .iter()
        .find_map(|&c| {
            let s = ((k / c) as f64).sqrt().round() as usize;
            (k % c == 0 && s * s * c == k && s > 0).then_some(ImageGeometry { channels: c, size: s })
        })
        .ok_or(DataError::Parse { offset: 0, msg: format!("{k} pixel columns is not s^2 or 3*s^2") })?;
    offset += header.len() + 1;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for line in lines {
        let here = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let parse = |f: Option<&str>| -> Result<u64, DataError> {
            let f = f.ok_or(DataError::Parse { offset: here, msg: format!("expected {} fields", k + 1) })?;
            f.parse().map_err(|_| DataError::Parse { offset: here, msg: format!("bad integer `{f}`") })
        };
        labels.push(parse(fields.next())? as usize);
        for _ in 0..k {
            let v = parse(fields.next())?;
            if v > 255 {
                return Err(DataError::Parse { offset: here, msg: format!("pixel value {v} exceeds 255") });
            }
            pixels.push(v as u8);
        }
        if fields.next().is_some() {
            return Err(DataError::Parse { offset: here, msg: format!("more than {} fields", k + 1) });
        }
    }
    if labels.is_empty() {
        return Err(DataError::Invalid("csv file has no examples".into()));
    }
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(geometry, pixels, labels, classes)
}

/// Inverse of [`load_csv`].
pub fn dataset_to_csv(ds: &Dataset) -> String {
    let k = ds.geometry().pixels();
    let mut out = String::from("label");
    for i in 0..k {
        out.push_str(&format!(",p{i}"));
    }
    out.push('\n');
    for i in 0..ds.len() {
        out.push_str(&ds.label(i).to_string());
        for &p in ds.raw_image(i) {
            out.push(',');
            out.push_str(&p.to_string());
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_records_parse() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_LEN];
        bytes[0] = 3;
        bytes[1] = 255;
        bytes[CIFAR_RECORD_LEN] = 9;
        let ds = load_cifar_binary(&bytes).unwrap();
        assert_eq!(ds.labels(), &[3, 9]);
        assert_eq!(ds.raw_image(0)[0], 255);
    }

    #[test]
    fn cifar_truncation_reports_lengths() {
        let bytes = vec![0u8; CIFAR_RECORD_LEN + 10];
        match load_cifar_binary(&bytes) {
            Err(DataError::Truncated { expected, actual }) => {
                assert_eq!(expected, 2 * CIFAR_RECORD_LEN);
                assert_eq!(actual, CIFAR_RECORD_LEN + 10);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cifar_bad_label_reports_offset() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD_LEN];
        bytes[CIFAR_RECORD_LEN] = 42;
        assert!(matches!(load_cifar_binary(&bytes), Err(DataError::Parse { offset, .. }) if offset == CIFAR_RECORD_LEN));
    }

    #[test]
    fn idx_pair_parses() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([1, 2, 3, 4, 5, 6, 7, 8]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 1, 4];
        let ds = load_idx_pair(&img, &lab).unwrap();
        assert_eq!(ds.classes(), 5);
        assert_eq!(ds.raw_image(1), &[5, 6, 7, 8]);
        assert!(load_idx_pair(&img[..img.len() - 1], &lab).is_err());
    }

    #[test]
    fn csv_parses_and_rejects() {
        let ds = load_csv("label,p0,p1,p2,p3\n1,0,10,20,30\n0,255,0,0,0\n").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.geometry(), ImageGeometry { channels: 1, size: 2 });
        assert!(matches!(load_csv("label,p0,p1,p2,p3\n1,0,10,20,300\n"), Err(DataError::Parse { offset: 18, .. })));
        assert!(load_csv("label,p0,p1,p2,p3,p4\n0,1,2,3,4,5\n").is_err());
        assert!(load_csv("label,p0\n").is_err());
    }
}
