//! IDX files: a big-endian header (`0x00 0x00 type rank`, then `rank` u32
//! extents) followed by unsigned bytes. Images are rank 3 `[N, H, W]` or,
//! for multi-channel data, rank 4 `[N, C, H, W]`; labels are rank 1.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Dataset, Provenance, Split};
use crate::engine::Tensor;
use crate::error::{Error, Result};

const UNSIGNED_BYTE: u8 = 0x08;

fn idx_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Idx {
        offset,
        message: message.into(),
    }
}

/// Extents and payload of an unsigned-byte IDX buffer.
pub fn decode_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(idx_err(bytes.len(), "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UNSIGNED_BYTE {
        let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        return Err(idx_err(0, format!("bad magic 0x{magic:08x}")));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(idx_err(3, "rank 0"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(idx_err(bytes.len(), format!("truncated header, need {header} bytes")));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let payload = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| idx_err(4, "extent overflow"))?;
    let available = bytes.len() - header;
    if available < payload {
        return Err(idx_err(
            bytes.len(),
            format!("truncated payload, {available} of {payload} bytes present"),
        ));
    }
    if available > payload {
        return Err(idx_err(header + payload, format!("{} trailing bytes", available - payload)));
    }
    Ok((dims, &bytes[header..]))
}

fn encode(dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, UNSIGNED_BYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Pixels quantized to `round(255 v)`. Single-channel images use rank 3.
pub fn encode_idx_images(images: &Tensor<f32>) -> Vec<u8> {
    let s = images.shape();
    let payload: Vec<u8> = images.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    if s[1] == 1 {
        encode(&[s[0], s[2], s[3]], &payload)
    } else {
        encode(s, &payload)
    }
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let payload = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::invalid("labels", format!("{l} does not fit a byte"))))
        .collect::<Result<Vec<u8>>>()?;
    Ok(encode(&[labels.len()], &payload))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads an image/label file pair. The class count is one past the largest
/// label, at least two.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let image_bytes = fs::read(images)?;
    let label_bytes = fs::read(labels)?;
    let (dims, pixels) = decode_idx(&image_bytes)?;
    let shape = match dims.len() {
        3 => vec![dims[0], 1, dims[1], dims[2]],
        4 => dims.clone(),
        r => return Err(idx_err(3, format!("image file has rank {r}, expected 3 or 4"))),
    };
    let (ldims, raw_labels) = decode_idx(&label_bytes)?;
    if ldims.len() != 1 {
        return Err(idx_err(3, format!("label file has rank {}, expected 1", ldims.len())));
    }
    if ldims[0] != shape[0] {
        return Err(Error::CountMismatch {
            images: shape[0],
            labels: ldims[0],
        });
    }
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(
        Tensor::new(shape, data)?,
        labels,
        classes,
        Split::Test,
        Provenance::Idx {
            images_sha256: sha256_hex(&image_bytes),
            labels_sha256: sha256_hex(&label_bytes),
        },
    )
}

/// Writes a dataset as an image/label file pair.
pub fn write_idx(dataset: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    fs::write(images, encode_idx_images(dataset.images()))?;
    fs::write(labels, encode_idx_labels(dataset.labels())?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};

    fn write_pair(dir: &Path, images: &[u8], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let (i, l) = (dir.join("img.idx"), dir.join("lbl.idx"));
        fs::write(&i, images).unwrap();
        fs::write(&l, labels).unwrap();
        (i, l)
    }

    #[test]
    fn single_white_pixel_reads_as_one() {
        let dir = tempfile::tempdir().unwrap();
        let img = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 255];
        let lbl = [0, 0, 8, 1, 0, 0, 0, 1, 1];
        let (i, l) = write_pair(dir.path(), &img, &lbl);
        let d = load_idx(i, l).unwrap();
        assert_eq!(d.images().data(), &[1.0]);
        assert_eq!(d.labels(), &[1]);
    }

    #[test]
    fn count_mismatch_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let img = [0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 9];
        let lbl = [0, 0, 8, 1, 0, 0, 0, 3, 0, 1, 0];
        let (i, l) = write_pair(dir.path(), &img, &lbl);
        let err = load_idx(i, l).unwrap_err();
        assert!(matches!(err, Error::CountMismatch { images: 2, labels: 3 }));
        assert!(err.to_string().contains('2') && err.to_string().contains('3'));
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        assert!(matches!(decode_idx(&[0, 0, 8, 3, 0, 0]), Err(Error::Idx { offset: 6, .. })));
        assert!(matches!(decode_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 1, 0]), Err(Error::Idx { offset: 0, .. })));
        assert!(matches!(decode_idx(&[0, 0, 8, 1, 0, 0, 0, 4, 1, 2]), Err(Error::Idx { offset: 10, .. })));
        assert!(matches!(decode_idx(&[0, 0, 8]), Err(Error::Idx { offset: 3, .. })));
    }

    #[test]
    fn write_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        for channels in [1, 3] {
            let mut spec = SyntheticSpec::new(3, 4, 6, 0.2, 5);
            spec.channels = channels;
            let d = gen_synthetic(&spec, Split::Test).unwrap();
            let (i, l) = (dir.path().join("a.idx"), dir.path().join("b.idx"));
            write_idx(&d, &i, &l).unwrap();
            let once = load_idx(&i, &l).unwrap();
            assert_eq!(once.input_shape(), d.input_shape());
            assert!(once.images().max_abs_diff(d.images()) <= 0.5 / 255.0 + 1e-7);
            write_idx(&once, &i, &l).unwrap();
            let twice = load_idx(&i, &l).unwrap();
            assert_eq!(twice.images(), once.images());
            assert_eq!(twice.labels(), once.labels());
        }
    }
}
