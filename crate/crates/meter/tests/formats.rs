//! PPM/PGM encoding against hand-written golden files.

use std::path::PathBuf;

use meter::attention::normalize_map;
use meter::io::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_corpus, write_corpus};
use meter_core::data::{generate_corpus, generate_pair, Image};

fn golden(name: &str) -> Vec<u8> {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "golden", name].iter().collect();
    std::fs::read(p).unwrap()
}

#[test]
fn ppm_matches_golden_checkerboard() {
    let bytes = [255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 0, 128, 128, 128, 0, 0, 0];
    let img = Image::new(2, 3, bytes.iter().map(|&b| f64::from(b) / 255.0).collect()).unwrap();
    assert_eq!(encode_ppm(&img), golden("checker_3x2.ppm"));
    assert_eq!(decode_ppm(&golden("checker_3x2.ppm")).unwrap(), img);
}

#[test]
fn pgm_matches_golden_ramp() {
    let raw: Vec<f64> = (0..16).map(|i| f64::from(i * i) / 225.0).collect();
    let pgm = encode_pgm(4, 4, &normalize_map(&raw));
    assert_eq!(pgm, golden("ramp_4x4.pgm"));
    let (w, h, px) = decode_pgm(&pgm).unwrap();
    assert_eq!((w, h), (4, 4));
    assert_eq!(px[0], 0);
    assert_eq!(px[15], 255);
}

#[test]
fn rendered_scene_is_unchanged() {
    let r = generate_pair(7, 32, false).unwrap();
    assert_eq!(encode_ppm(&r.image), golden("scene_seed7_32.ppm"));
}

#[test]
fn constant_map_normalizes_to_zero() {
    assert_eq!(normalize_map(&[0.25; 16]), vec![0; 16]);
}

#[test]
fn corpus_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let records = generate_corpus(11, 4, 32, true).unwrap();
    let manifest = write_corpus(dir.path(), &records).unwrap();
    assert_eq!(read_corpus(&manifest).unwrap(), records);
}

#[test]
fn truncated_images_are_rejected() {
    let bytes = golden("checker_3x2.ppm");
    assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode_ppm(b"P3\n1 1\n255\n\x00\x00\x00").is_err());
}
