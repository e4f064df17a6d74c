use std::path::Path;

use ptu_tensor::Tensor;

use super::LabeledDataset;
use crate::error::{config, io_err, Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn parse_error(file: &str, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, file: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            parse_error(
                file,
                bytes.len(),
                format!("truncated header: need {} bytes", at + 4),
            )
        })
}

fn check_payload(bytes: &[u8], header: usize, expected: usize, file: &str) -> Result<()> {
    let have = bytes.len() - header;
    if have < expected {
        return Err(parse_error(
            file,
            bytes.len(),
            format!("truncated payload: {expected} bytes declared, {have} present"),
        ));
    }
    if have > expected {
        return Err(parse_error(
            file,
            header + expected,
            format!("{} bytes of trailing data", have - expected),
        ));
    }
    Ok(())
}

/// Parses an IDX image file into `[n×1×rows×cols]` with pixels scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != IMAGE_MAGIC {
        return Err(parse_error(
            file,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    for (at, v) in [(4, n), (8, rows), (12, cols)] {
        if v == 0 {
            return Err(parse_error(file, at, "zero dimension"));
        }
    }
    check_payload(bytes, 16, n * rows * cols, file)?;
    let data = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::from_vec([n, 1, rows, cols], data))
}

pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, file)?;
    if magic != LABEL_MAGIC {
        return Err(parse_error(
            file,
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}"),
        ));
    }
    let n = be_u32(bytes, 4, file)? as usize;
    check_payload(bytes, 8, n, file)?;
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

fn pair(images_path: &Path, labels_path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let (ifile, lfile) = (
        images_path.display().to_string(),
        labels_path.display().to_string(),
    );
    let images = parse_idx_images(&read(images_path)?, &ifile)?;
    let labels = parse_idx_labels(&read(labels_path)?, &lfile)?;
    if images.shape()[0] != labels.len() {
        return Err(parse_error(
            &lfile,
            4,
            format!(
                "{} labels for {} images in {ifile}",
                labels.len(),
                images.shape()[0]
            ),
        ));
    }
    Ok((images, labels))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads an image/label file pair; the class count is one past the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (images, labels) = pair(images_path, labels_path)?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    LabeledDataset::new(images, labels, classes, stem(images_path))
}

pub fn load_idx_with_classes(
    images_path: &Path,
    labels_path: &Path,
    classes: usize,
    name: &str,
) -> Result<LabeledDataset> {
    let (images, labels) = pair(images_path, labels_path)?;
    if let Some(pos) = labels.iter().position(|&l| l >= classes) {
        return Err(parse_error(
            &labels_path.display().to_string(),
            8 + pos,
            format!(
                "label {} outside the {classes} registered classes",
                labels[pos]
            ),
        ));
    }
    LabeledDataset::new(images, labels, classes, name)
}

/// Writes single-channel images (rounded to 8 bits) and labels as IDX files.
pub fn write_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return config(format!(
            "{}: IDX stores single-channel images, got {c} channels",
            ds.name
        ));
    }
    if ds.class_count > 256 {
        return config(format!(
            "{}: IDX labels are bytes, {} classes do not fit",
            ds.name, ds.class_count
        ));
    }
    let n = ds.len();
    let mut img = Vec::with_capacity(16 + n * h * w);
    for v in [IMAGE_MAGIC, n as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        ds.images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lab = Vec::with_capacity(8 + n);
    for v in [LABEL_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    std::fs::write(images_path, img).map_err(io_err(images_path))?;
    std::fs::write(labels_path, lab).map_err(io_err(labels_path))
}
