use std::path::PathBuf;

use efumi_core::io::{decode_cube, encode_cube, load_cube, load_mask, save_cube, save_mask};
use efumi_core::*;
use efumi_core::Rng;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

const TINY_CUBE_SHA256: &str = "be3c57e332e51372ead79c75c19f339ee2fabff7fb35fe80a89e0d8242c4753c";
const TINY_MASK_SHA256: &str = "f9474edc3ca86fc5d24bb8308ae7eff80debc453a0d86a908637ffb85e76abf7";
const TINY_MAP_SHA256: &str = "8aadb0e8185d0162d8ca31be315f6a929c7a518a6f5b310e0001fedb4ae57ce5";

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn tiny_cube() -> Cube {
    let data = vec![0.0, 1.0, 0.5, 0.25, -2.0, 0.0625, 3.5, 0.125];
    Cube::new(2, 2, 2, data).unwrap().with_wavelengths(vec![450.0, 650.0]).unwrap()
}

fn tiny_mask() -> LabelMask {
    LabelMask::new(2, 2, vec![2, 1, 0, 1]).unwrap()
}

fn tiny_map() -> SuperpixelMap {
    SuperpixelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap()
}

// Set BLESS=1 to rewrite the golden files after an intentional format change.
fn check_golden(name: &str, bytes: &[u8], pinned: &str) {
    let path = golden(name);
    if std::env::var_os("BLESS").is_some() {
        std::fs::write(&path, bytes).unwrap();
        println!("{name} {}", sha(bytes));
        return;
    }
    let on_disk = std::fs::read(&path).unwrap();
    assert_eq!(sha(&on_disk), pinned, "{name} checksum drifted");
    assert_eq!(on_disk, bytes, "{name} encoding drifted");
}

#[test]
fn golden_cube() {
    let cube = tiny_cube();
    check_golden("tiny.hsic", &encode_cube(&cube).unwrap(), TINY_CUBE_SHA256);
    let back: Cube = load_cube(golden("tiny.hsic")).unwrap();
    assert_eq!(back, cube);
}

#[test]
fn golden_mask() {
    let mask = tiny_mask();
    check_golden("tiny.hsim", &mask.encode().unwrap(), TINY_MASK_SHA256);
    assert_eq!(load_mask(golden("tiny.hsim")).unwrap(), mask);
}

#[test]
fn golden_superpixel_map() {
    let map = tiny_map();
    check_golden("tiny_segments.hsim", &map.encode().unwrap(), TINY_MAP_SHA256);
    assert_eq!(SuperpixelMap::load(golden("tiny_segments.hsim")).unwrap(), map);
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cube = tiny_cube();
    save_cube(&cube, dir.path().join("c.hsic")).unwrap();
    let back: Cube = load_cube(dir.path().join("c.hsic")).unwrap();
    assert_eq!(back, cube);
    save_mask(&tiny_mask(), dir.path().join("m.hsim")).unwrap();
    assert_eq!(load_mask(dir.path().join("m.hsim")).unwrap(), tiny_mask());
}

#[test]
fn f32_cube_decodes_into_f64_exactly() {
    let c32 = Cube32::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let bytes = encode_cube(&c32).unwrap();
    let c64: Cube = decode_cube(&bytes).unwrap();
    assert_eq!(encode_cube(&c64).unwrap(), bytes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cube_round_trip_is_bit_exact(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6, bands in 1usize..5) {
        let mut rng = Rng::new(seed);
        let data: Vec<f32> = (0..rows * cols * bands).map(|_| rng.normal() as f32).collect();
        let cube = Cube32::new(rows, cols, bands, data).unwrap();
        let bytes = encode_cube(&cube).unwrap();
        let back: Cube32 = decode_cube(&bytes).unwrap();
        prop_assert!(back.data().iter().zip(cube.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(encode_cube(&back).unwrap(), bytes);
    }

    #[test]
    fn mask_round_trip_is_exact(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..8) {
        let mut rng = Rng::new(seed);
        let codes: Vec<u16> = (0..rows * cols).map(|_| rng.below(5) as u16).collect();
        let mask = LabelMask::new(rows, cols, codes).unwrap();
        prop_assert_eq!(LabelMask::decode(&mask.encode().unwrap()).unwrap(), mask);
    }
}
