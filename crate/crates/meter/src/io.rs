//! Netpbm images and the JSON-lines corpus manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use meter_core::data::{parse_caption, Image, PairRecord, Qa, Scene};
use serde::{Deserialize, Serialize};

/// Channel value to byte; exact for values produced by [`from_byte`].
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    f64::from(b) / 255.0
}

/// Binary PPM (P6, maxval 255).
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| to_byte(v)));
    out
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pgm pixel count");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses the header of a binary netpbm file; returns width, height and
/// the offset of the first pixel byte.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    ensure!(bytes.len() >= 2 && &bytes[..2] == magic, "expected {} header", String::from_utf8_lossy(magic));
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        ensure!(pos > start, "malformed netpbm header at byte {start}");
        fields.push(std::str::from_utf8(&bytes[start..pos])?.parse::<usize>()?);
    }
    ensure!(pos < bytes.len() && bytes[pos].is_ascii_whitespace(), "missing separator after header");
    ensure!(fields[2] == 255, "only maxval 255 is supported, got {}", fields[2]);
    Ok((fields[0], fields[1], pos + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (w, h, off) = parse_header(bytes, b"P6")?;
    let body = &bytes[off..];
    ensure!(body.len() == w * h * 3, "ppm body has {} bytes, expected {}", body.len(), w * h * 3);
    Ok(Image::new(h, w, body.iter().map(|&b| from_byte(b)).collect())?)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, off) = parse_header(bytes, b"P5")?;
    let body = &bytes[off..];
    ensure!(body.len() == w * h, "pgm body has {} bytes, expected {}", body.len(), w * h);
    Ok((w, h, body.to_vec()))
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub image_path: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_id: Option<usize>,
}

/// Writes `records` as `images/<id>.ppm` plus `manifest.jsonl` under `dir`.
pub fn write_corpus(dir: &Path, records: &[PairRecord]) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).with_context(|| format!("creating {}", images.display()))?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = fs::File::create(&manifest).with_context(|| format!("creating {}", manifest.display()))?;
    for r in records {
        let rel = format!("images/{:08}.ppm", r.id);
        fs::write(dir.join(&rel), encode_ppm(&r.image))?;
        let entry = ManifestEntry {
            id: r.id,
            image_path: rel,
            caption: r.caption.clone(),
            question: r.qa.as_ref().map(|q| q.question.clone()),
            answer_id: r.qa.as_ref().map(|q| q.answer_id),
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    Ok(manifest)
}

/// Reads a manifest; image paths are relative to the manifest's directory
/// and scenes are recovered by parsing the captions.
pub fn read_corpus(manifest: &Path) -> Result<Vec<PairRecord>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(manifest).with_context(|| format!("opening {}", manifest.display()))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", manifest.display(), n + 1))?;
        let path = base.join(&e.image_path);
        let image = decode_ppm(&fs::read(&path).with_context(|| format!("reading {}", path.display()))?)
            .with_context(|| format!("decoding {}", path.display()))?;
        let objects = parse_caption(&e.caption)?;
        let qa = match (e.question, e.answer_id) {
            (Some(question), Some(answer_id)) => Some(Qa { question, answer_id }),
            (None, None) => None,
            _ => bail!("{}:{}: question and answer_id must appear together", manifest.display(), n + 1),
        };
        records.push(PairRecord {
            id: e.id,
            scene: Scene { objects, seed: e.id },
            image,
            caption: e.caption,
            qa,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0, 255]);
        assert_eq!(decode_pgm(&bytes).unwrap(), (2, 1, vec![0, 255]));
        assert!(decode_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\0").is_err());
    }

    #[test]
    fn byte_conversion_round_trips() {
        for b in 0..=255u8 {
            assert_eq!(to_byte(from_byte(b)), b);
        }
    }
}
