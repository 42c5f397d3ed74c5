//! Directory ingest, Phoenix files, preprocessing and batching.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use lvit_core::data::{batches, parse_phoenix, write_phoenix};
use lvit_core::{load_image_dir, preprocess, LvitError, ResizeMode, RngState, Tensor};
use proptest::prelude::*;

fn write_pgm16(path: &Path, w: usize, h: usize, f: impl Fn(usize, usize) -> u16) {
    let mut bytes = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            bytes.extend_from_slice(&f(x, y).to_be_bytes());
        }
    }
    fs::write(path, bytes).unwrap();
}

/// Ten classes, three files each, mixing every supported container.
fn build_tree(root: &Path) {
    for c in 0..10 {
        let dir = root.join(format!("class_{}", 9 - c));
        fs::create_dir_all(&dir).unwrap();
        GrayImage::from_fn(60, 50, |x, y| Luma([((x * 3 + y * c) % 256) as u8]))
            .save(dir.join("a.pgm"))
            .unwrap();
        write_pgm16(&dir.join("b.pgm"), 48, 48, |x, y| (x * 1000 + y * 7 + c as usize) as u16);
        RgbImage::from_fn(30, 40, |x, y| Rgb([x as u8 * 8, y as u8 * 6, c as u8 * 20])).save(dir.join("c.png")).unwrap();
    }
    fs::write(root.join("README.txt"), "not a class").unwrap();
}

#[test]
fn loads_sorted_tree() {
    let dir = tempfile::tempdir().unwrap();
    build_tree(dir.path());
    let data = load_image_dir(dir.path(), ResizeMode::default(), Some(10)).unwrap();
    assert_eq!(data.len(), 30);
    let names: Vec<String> = (0..10).map(|i| format!("class_{i}")).collect();
    assert_eq!(data.label_names, names);
    for (i, s) in data.samples.iter().enumerate() {
        assert_eq!(s.label, i / 3);
        assert_eq!(s.image.shape(), &[48, 48]);
        assert!(s.image.is_finite());
    }
    assert!(data.samples[0].source_id.ends_with("a.pgm"));
    assert!(data.samples[2].source_id.ends_with("c.png"));

    let again = load_image_dir(dir.path(), ResizeMode::default(), None).unwrap();
    assert_eq!(data.samples, again.samples);
}

#[test]
fn class_count_mismatch_is_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    build_tree(dir.path());
    assert!(matches!(load_image_dir(dir.path(), ResizeMode::default(), Some(9)), Err(LvitError::Contract(_))));
}

#[test]
fn unreadable_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    build_tree(dir.path());
    let bad = dir.path().join("class_4").join("b.pgm");
    fs::write(&bad, b"P5\n48 48\n255\nshort").unwrap();
    match load_image_dir(dir.path(), ResizeMode::default(), None) {
        Err(LvitError::Ingest { path, .. }) => assert_eq!(path, bad),
        other => panic!("expected ingest error, got {other:?}"),
    }
}

#[test]
fn empty_inputs_are_named() {
    let dir = tempfile::tempdir().unwrap();
    match load_image_dir(dir.path(), ResizeMode::default(), None) {
        Err(LvitError::Ingest { path, .. }) => assert_eq!(path, dir.path()),
        other => panic!("expected ingest error, got {other:?}"),
    }
    let empty_class = dir.path().join("only");
    fs::create_dir(&empty_class).unwrap();
    match load_image_dir(dir.path(), ResizeMode::default(), None) {
        Err(LvitError::Ingest { path, .. }) => assert_eq!(path, empty_class),
        other => panic!("expected ingest error, got {other:?}"),
    }
    let missing = dir.path().join("nope");
    match load_image_dir(&missing, ResizeMode::default(), None) {
        Err(e) => assert!(e.to_string().contains("nope")),
        Ok(_) => panic!("missing root accepted"),
    }
}

#[test]
fn phoenix_files_load_from_tree() {
    let dir = tempfile::tempdir().unwrap();
    let class = dir.path().join("t72");
    fs::create_dir(&class).unwrap();
    let mag = Tensor::from_fn(&[64, 64], |i| (i % 97) as f64 * 0.5);
    fs::write(class.join("hb03333.raw"), write_phoenix(&BTreeMap::new(), &mag, None)).unwrap();
    let data = load_image_dir(dir.path(), ResizeMode::default(), None).unwrap();
    assert_eq!(data.len(), 1);
    let (raw, h, w) = (mag.data().to_vec(), 64, 64);
    assert_eq!(data.samples[0].image, preprocess(&raw, h, w, ResizeMode::default()).unwrap());
}

fn f32_exact(rng: &mut RngState) -> f64 {
    (rng.normal() * 100.0) as f32 as f64
}

#[test]
fn phoenix_round_trips_exactly() {
    for (rows, cols) in [(2, 2), (64, 64), (3, 5)] {
        let mut rng = RngState::new((rows * cols) as u64);
        let mag = Tensor::from_fn(&[rows, cols], |_| f32_exact(&mut rng));
        let phase = Tensor::from_fn(&[rows, cols], |_| f32_exact(&mut rng));
        let mut fields = BTreeMap::new();
        fields.insert("TargetType".to_string(), "t72_tank".to_string());
        fields.insert("DesiredDepression".to_string(), "17".to_string());
        let bytes = write_phoenix(&fields, &mag, Some(&phase));
        let (hdr, img) = parse_phoenix(&bytes).unwrap();
        assert_eq!((hdr.rows, hdr.cols), (rows, cols));
        assert_eq!(img.data(), mag.data());
        for (k, v) in &fields {
            assert_eq!(hdr.fields.get(k), Some(v));
        }
        assert_eq!(hdr.fields.get("NumberOfRows").map(String::as_str), Some(rows.to_string().as_str()));

        // Any cut inside the magnitude block is rejected.
        let header_len = bytes.len() - 8 * rows * cols;
        for cut in [header_len, header_len + 1, header_len + 4 * rows * cols - 1] {
            assert!(matches!(parse_phoenix(&bytes[..cut]), Err(LvitError::Truncated(_))), "cut {cut}");
        }
        // The phase block is optional for parsing.
        assert!(parse_phoenix(&bytes[..header_len + 4 * rows * cols]).is_ok());
    }
}

proptest! {
    #[test]
    fn batches_partition_indices(n in 1usize..300, bs in 1usize..70, seed in any::<u64>()) {
        let chunks = batches(n, bs, &mut RngState::new(seed)).unwrap();
        let again = batches(n, bs, &mut RngState::new(seed)).unwrap();
        prop_assert_eq!(&chunks, &again);
        prop_assert_eq!(chunks.len(), n.div_ceil(bs));
        prop_assert!(chunks[..chunks.len() - 1].iter().all(|c| c.len() == bs));
        let all: Vec<usize> = chunks.concat();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(all.into_iter().collect::<BTreeSet<_>>(), (0..n).collect::<BTreeSet<_>>());
    }

    #[test]
    fn preprocessed_images_are_standardized(h in 1usize..120, w in 1usize..120, seed in any::<u64>(), mode_ix in 0usize..3) {
        let mode = [ResizeMode::CropResize, ResizeMode::CropOnly, ResizeMode::ResizeOnly][mode_ix];
        prop_assume!(mode != ResizeMode::CropOnly || (h >= 48 && w >= 48));
        let mut rng = RngState::new(seed);
        let raw: Vec<f64> = (0..h * w).map(|_| rng.uniform_range(0.0, 255.0)).collect();
        let img = preprocess(&raw, h, w, mode).unwrap();
        prop_assert_eq!(img.shape(), &[48, 48]);
        let n = img.len() as f64;
        let mean = img.sum() / n;
        let sd = (img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-9);
        // A centered crop of a 1-pixel-thin image is a single, constant pixel.
        let constant = match mode {
            ResizeMode::CropResize => h.min(w) == 1,
            _ => h * w == 1,
        };
        if !constant {
            prop_assert!((sd - 1.0).abs() < 1e-6, "sd {}", sd);
        }
    }
}

#[test]
fn non_finite_pixels_are_rejected() {
    let mut raw = vec![1.0; 16];
    raw[5] = f64::NAN;
    assert!(matches!(preprocess(&raw, 4, 4, ResizeMode::default()), Err(LvitError::Ingest { .. })));
}
