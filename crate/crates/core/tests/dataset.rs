use std::fs;
use std::path::Path;

use dunet::dataset::{
    gen_shapes_dataset, is_small, load_dataset, split_dataset, validate_splits, write_ppm, AnnotatedDataset, DatasetError,
    FrameRecord, ShapesConfig, DEFAULT_RATIOS, DROSET_CATEGORIES, SHAPE_MIN_PEAK,
};
use dunet::BBox;
use image::RgbImage;
use proptest::prelude::*;

fn tiny_dataset(root: &Path, labels: &[&str]) -> AnnotatedDataset {
    let img = RgbImage::from_pixel(8, 6, image::Rgb([10, 20, 30]));
    let frames = (0..3)
        .map(|i| {
            let rel = format!("img/{i}.ppm");
            write_ppm(&root.join(&rel), &img).unwrap();
            FrameRecord {
                image_path: rel,
                timestamp_ms: i as f64 * 32.68,
                width: 8,
                height: 6,
                boxes: vec![(1 + i % labels.len(), BBox::new(0.1 * i as f64, 0.2, 0.5, 0.7 + 0.01 * i as f64))],
                sequence: Some(i as u64 / 2),
            }
        })
        .collect();
    AnnotatedDataset { root: root.to_path_buf(), labels: labels.iter().map(|s| s.to_string()).collect(), frames, splits: None }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = tiny_dataset(dir.path(), &["a", "b"]);
    ds.save().unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    ds.splits = Some(split_dataset(&ds.frames, (0.5, 0.0, 0.5), 3).unwrap());
    ds.save().unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn droset_categories_load() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), &DROSET_CATEGORIES);
    ds.save().unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.num_classes(), 10);
    assert_eq!(back.labels[9], "tennis racket");
}

#[test]
fn reversed_box_is_rejected_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path(), &["a"]).save().unwrap();
    let ann = dir.path().join("annotations.jsonl");
    let text = fs::read_to_string(&ann).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[1] = r#"{"image":"img/1.ppm","ts":0.0,"w":8,"h":6,"boxes":[{"c":1,"x0":0.6,"y0":0.1,"x1":0.2,"y1":0.5}]}"#.into();
    lines.push("{not json".into());
    fs::write(&ann, lines.join("\n")).unwrap();
    match load_dataset(dir.path()) {
        Err(DatasetError::Invalid(problems)) => {
            assert!(problems.iter().any(|p| p.starts_with("line 2:") && p.contains("out of range")), "{problems:?}");
            assert!(problems.iter().any(|p| p.starts_with("line 4:") && p.contains("malformed")), "{problems:?}");
        }
        other => panic!("expected invalid dataset, got {other:?}"),
    }
}

#[test]
fn dimension_mismatch_and_missing_image_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = tiny_dataset(dir.path(), &["a"]);
    ds.frames[0].width = 9;
    ds.save().unwrap();
    fs::remove_file(dir.path().join("img/2.ppm")).unwrap();
    let Err(DatasetError::Invalid(problems)) = load_dataset(dir.path()) else { panic!("expected invalid") };
    assert!(problems.iter().any(|p| p.starts_with("line 1:") && p.contains("8x6")));
    assert!(problems.iter().any(|p| p.starts_with("line 3:") && p.contains("missing image")));
}

/// Bounding boxes of 8-connected components of shape-coloured pixels.
fn raster_components(img: &RgbImage) -> Vec<(u32, u32, u32, u32)> {
    let (w, h) = img.dimensions();
    let bright = |x: u32, y: u32| img.get_pixel(x, y).0.iter().any(|&c| c >= SHAPE_MIN_PEAK);
    let mut seen = vec![false; (w * h) as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if seen[(y * w + x) as usize] || !bright(x, y) {
                continue;
            }
            let mut ext = (x, y, x + 1, y + 1);
            let mut stack = vec![(x, y)];
            seen[(y * w + x) as usize] = true;
            while let Some((px, py)) = stack.pop() {
                ext = (ext.0.min(px), ext.1.min(py), ext.2.max(px + 1), ext.3.max(py + 1));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (px as i64 + dx, py as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let (nx, ny) = (nx as u32, ny as u32);
                        if !seen[(ny * w + nx) as usize] && bright(nx, ny) {
                            seen[(ny * w + nx) as usize] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            out.push(ext);
        }
    }
    out.sort_unstable();
    out
}

#[test]
fn shapes_boxes_match_raster_extent() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_shapes_dataset(&ShapesConfig::new(1000, 64, 7), dir.path()).unwrap();
    assert_eq!(ds.frames.len(), 1000);
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded, ds);
    for f in &loaded.frames {
        let img = loaded.load_image(f).unwrap();
        assert_eq!((img.width(), img.height()), (f.width, f.height));
        assert!((1..=3).contains(&f.boxes.len()));
        let mut annotated: Vec<(u32, u32, u32, u32)> = f
            .boxes
            .iter()
            .map(|(_, b)| {
                let px = |v: f64| (v * 64.0).round() as u32;
                (px(b.xmin), px(b.ymin), px(b.xmax), px(b.ymax))
            })
            .collect();
        annotated.sort_unstable();
        assert_eq!(raster_components(&img), annotated, "{}", f.image_path);
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = ShapesConfig::new(20, 64, 11);
    gen_shapes_dataset(&cfg, a.path()).unwrap();
    gen_shapes_dataset(&cfg, b.path()).unwrap();
    let read = |root: &Path, rel: &str| fs::read(root.join(rel)).unwrap();
    assert_eq!(read(a.path(), "annotations.jsonl"), read(b.path(), "annotations.jsonl"));
    for i in 0..20 {
        let rel = format!("frames/{i:06}.ppm");
        assert_eq!(read(a.path(), &rel), read(b.path(), &rel));
    }
    let c = tempfile::tempdir().unwrap();
    gen_shapes_dataset(&ShapesConfig { seed: 12, ..cfg }, c.path()).unwrap();
    assert_ne!(read(a.path(), "annotations.jsonl"), read(c.path(), "annotations.jsonl"));
}

#[test]
fn six_pixel_shapes_are_small_tier() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ShapesConfig { size_range: (6, 6), ..ShapesConfig::new(50, 64, 5) };
    let ds = gen_shapes_dataset(&cfg, dir.path()).unwrap();
    for (_, b) in ds.frames.iter().flat_map(|f| &f.boxes) {
        assert!((b.width() - 6.0 / 64.0).abs() < 1e-12);
        assert!((b.width() - 0.094).abs() < 1e-3);
        assert!(is_small(b));
    }
}

fn sequenced(n_seq: usize, per: usize) -> Vec<FrameRecord> {
    (0..n_seq * per)
        .map(|i| FrameRecord {
            image_path: String::new(),
            timestamp_ms: 0.0,
            width: 1,
            height: 1,
            boxes: vec![],
            sequence: Some((i / per) as u64),
        })
        .collect()
}

#[test]
fn hundred_frames_in_ten_sequences() {
    let frames = sequenced(10, 10);
    for seed in 0..20 {
        let s = split_dataset(&frames, DEFAULT_RATIOS, seed).unwrap();
        validate_splits(&s, 100).unwrap();
        for (got, want) in [(s.train.len(), 75i64), (s.val.len(), 15), (s.test.len(), 10)] {
            assert!((got as i64 - want).abs() <= 10, "seed {seed}: {got} vs {want}");
            assert_eq!(got % 10, 0);
        }
        // Whole sequences only.
        for part in [&s.train, &s.val, &s.test] {
            for &i in part.iter() {
                assert!(part.contains(&(i / 10 * 10)));
            }
        }
    }
    assert!(split_dataset(&frames, (0.5, 0.6, 0.1), 0).is_err());
}

proptest! {
    #[test]
    fn splits_are_disjoint_and_cover(n_seq in 3usize..40, per in 1usize..6, seed in any::<u64>(), a in 0.2f64..0.8) {
        let frames = sequenced(n_seq, per);
        let b = (1.0 - a) / 2.0;
        let s = split_dataset(&frames, (a, b, 1.0 - a - b), seed).unwrap();
        prop_assert!(validate_splits(&s, frames.len()).is_ok());
        prop_assert_eq!(s.clone(), split_dataset(&frames, (a, b, 1.0 - a - b), seed).unwrap());
    }
}
