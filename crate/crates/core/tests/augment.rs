use std::fs;
use std::path::Path;

use dunet::augment::{
    apply_filter, build_dataset, capture_indices, ncc, rotated_hull, AugmentConfig, AugmentError, Fill, FilterKind, FilterOp,
    FilterSpec, FrameSource, Gray, PixelBox, TrackOutcome, TrackState, TranslatingSquare, MIN_GAP_MS,
};
use dunet::geometry::iou;
use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy_image(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

fn frame_and_box() -> impl Strategy<Value = (u32, u32, PixelBox)> {
    (8u32..80, 8u32..80).prop_flat_map(|(w, h)| {
        (Just(w), Just(h), 0..w - 1, 0..h - 1).prop_flat_map(|(w, h, x0, y0)| {
            (Just(w), Just(h), (x0 + 1..=w, y0 + 1..=h).prop_map(move |(x1, y1)| PixelBox::new(x0, y0, x1, y1)))
        })
    })
}

fn all_filters() -> Vec<FilterSpec> {
    [
        FilterKind::Brightness,
        FilterKind::Contrast,
        FilterKind::Rotation,
        FilterKind::Flip,
        FilterKind::Shadow,
        FilterKind::Background,
        FilterKind::ColorShift,
    ]
    .into_iter()
    .map(|k| FilterSpec::new(k, 1.0))
    .collect()
}

#[test]
fn capture_indices_on_thirty_fps() {
    let ts: Vec<f64> = (0..100).map(|i| i as f64 * 33.3).collect();
    assert_eq!(capture_indices(&ts, MIN_GAP_MS), vec![0, 16, 32, 48, 64, 80, 96]);
    assert_eq!(capture_indices(&ts, 0.0), (0..100).collect::<Vec<_>>());
}

#[test]
fn photometric_filters_preserve_the_box() {
    let img = noisy_image(40, 30, 1);
    let b = PixelBox::new(5, 7, 21, 19);
    let ops = [
        FilterOp::Brightness { gain: 1.37 },
        FilterOp::Contrast { gain: 0.61 },
        FilterOp::ColorShift { shift: [-30, 12, 29] },
        FilterOp::Shadow { gain: 0.5, angle: 1.0, offset: -3.0 },
        FilterOp::Background { fill: Fill::Flat([0, 0, 255]) },
    ];
    for op in &ops {
        let (out, nb) = apply_filter(&img, &b, op).unwrap();
        assert_eq!(nb, b, "{op:?}");
        assert_eq!(out.dimensions(), img.dimensions());
        assert_ne!(out, img, "{op:?} left the frame untouched");
    }
    // Background keeps the box pixels and replaces the rest.
    let (out, _) = apply_filter(&img, &b, &ops[4]).unwrap();
    assert_eq!(out.get_pixel(5, 7), img.get_pixel(5, 7));
    assert_eq!(out.get_pixel(0, 0).0, [0, 0, 255]);
}

#[test]
fn ncc_autocorrelation_is_one() {
    let a: Vec<f64> = noisy_image(9, 9, 2).pixels().map(|p| p[0] as f64).collect();
    assert!((ncc(&a, &a) - 1.0).abs() < 1e-12);
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    assert!((ncc(&a, &neg) + 1.0).abs() < 1e-12);
    assert_eq!(ncc(&a, &vec![5.0; a.len()]), 0.0);
}

#[test]
fn tracker_examples() {
    let img = noisy_image(64, 48, 3);
    let gray = Gray::from_rgb(&img);
    let b = PixelBox::new(20, 14, 40, 34);
    let s = TrackState::new(&gray, b).unwrap();
    let TrackOutcome::Tracking(same) = s.update(&gray) else { panic!("lost on identical frame") };
    assert_eq!(same.bbox, b);
    assert!((same.confidence - 1.0).abs() < 1e-12);

    // Move a textured patch by (3, 5) on a flat background.
    let patch = noisy_image(20, 20, 4);
    let scene = |dx: u32, dy: u32| {
        RgbImage::from_fn(64, 48, |x, y| {
            if (20 + dx..40 + dx).contains(&x) && (14 + dy..34 + dy).contains(&y) {
                *patch.get_pixel(x - 20 - dx, y - 14 - dy)
            } else {
                Rgb([40, 40, 40])
            }
        })
    };
    let s = TrackState::new(&Gray::from_rgb(&scene(0, 0)), b).unwrap();
    let TrackOutcome::Tracking(moved) = s.update(&Gray::from_rgb(&scene(3, 5))) else { panic!("lost") };
    assert_eq!(moved.bbox, PixelBox::new(23, 19, 43, 39));

    let noise = Gray::from_rgb(&noisy_image(64, 48, 99));
    assert!(matches!(s.update(&noise), TrackOutcome::Lost { confidence, .. } if confidence < 0.3));
    assert!(matches!(TrackState::new(&gray, PixelBox::new(50, 0, 70, 10)), Err(AugmentError::InvalidBox(_))));
}

#[test]
fn tracker_follows_translating_square() {
    let src = TranslatingSquare::new(100, 7);
    let mut state = TrackState::new(&Gray::from_rgb(&src.frame(0).unwrap()), src.truth(0)).unwrap();
    for i in 1..100 {
        state = match state.update(&Gray::from_rgb(&src.frame(i).unwrap())) {
            TrackOutcome::Tracking(s) => s,
            other => panic!("lost at {i}: {other:?}"),
        };
        let overlap = iou(&state.bbox.to_bbox(), &src.truth(i).to_bbox());
        assert!(overlap >= 0.7, "frame {i}: IoU {overlap}");
    }

    let noisy = TranslatingSquare { noise_from: Some(10), ..TranslatingSquare::new(40, 7) };
    let mut state = TrackState::new(&Gray::from_rgb(&noisy.frame(0).unwrap()), noisy.truth(0)).unwrap();
    let mut lost = None;
    for i in 1..40 {
        match state.update(&Gray::from_rgb(&noisy.frame(i).unwrap())) {
            TrackOutcome::Tracking(s) => state = s,
            TrackOutcome::Lost { confidence, .. } => {
                assert!(confidence < 0.3);
                lost = Some(i);
                break;
            }
        }
    }
    assert_eq!(lost, Some(10));
}

fn config(filters: Vec<FilterSpec>, seed: u64) -> AugmentConfig {
    AugmentConfig { filters, min_gap_ms: MIN_GAP_MS, label: "square".into(), sequence: 0, seed }
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for dir in [root.to_path_buf(), root.join("frames")] {
        let mut entries: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_file()).collect();
        entries.sort();
        for p in entries {
            out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out
}

#[test]
fn build_dataset_on_translating_square() {
    let src = TranslatingSquare::new(200, 5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    // Photometric filters only, so every written box is the tracked box.
    let photometric: Vec<FilterSpec> = all_filters().into_iter().filter(|f| !matches!(f.kind, FilterKind::Rotation | FilterKind::Flip)).collect();
    let rep = build_dataset(&src, src.truth(0), &config(photometric, 1), a.path()).unwrap();
    assert_eq!(rep.lost_at, None);
    assert!(rep.dataset.frames.len() >= 10, "{} captures", rep.dataset.frames.len());
    for (f, &i) in rep.dataset.frames.iter().zip(&rep.source_frames) {
        let truth = src.truth(i).normalized(src.width, src.height);
        assert!(iou(&f.boxes[0].1, &truth) >= 0.7, "frame {i}");
    }
    let ts: Vec<f64> = rep.dataset.frames.iter().map(|f| f.timestamp_ms).collect();
    assert!(ts.windows(2).all(|w| w[1] - w[0] >= MIN_GAP_MS));
    assert_eq!(rep.counts.values().sum::<usize>(), rep.dataset.frames.len());

    let full = build_dataset(&src, src.truth(0), &config(all_filters(), 1), b.path()).unwrap();
    assert_eq!(full.counts.len(), 7);
    let c = tempfile::tempdir().unwrap();
    build_dataset(&src, src.truth(0), &config(all_filters(), 1), c.path()).unwrap();
    assert_eq!(tree(b.path()), tree(c.path()));
    assert_eq!(dunet::dataset::load_dataset(b.path()).unwrap().frames, full.dataset.frames);

    assert!(matches!(build_dataset(&src, src.truth(0), &config(vec![], 1), c.path()), Err(AugmentError::NoFilters)));
}

#[test]
fn lost_track_flushes_partial_dataset() {
    let src = TranslatingSquare { noise_from: Some(60), ..TranslatingSquare::new(200, 5) };
    let dir = tempfile::tempdir().unwrap();
    let rep = build_dataset(&src, src.truth(0), &config(all_filters(), 2), dir.path()).unwrap();
    assert_eq!(rep.lost_at, Some(60));
    assert_eq!(rep.source_frames, vec![0, 16, 32, 48]);
    assert_eq!(dunet::dataset::load_dataset(dir.path()).unwrap().frames.len(), 4);
}

proptest! {
    #[test]
    fn double_flip_is_identity((w, h, b) in frame_and_box(), seed in any::<u64>()) {
        let img = noisy_image(w, h, seed);
        let (once, b1) = apply_filter(&img, &b, &FilterOp::Flip).unwrap();
        let (twice, b2) = apply_filter(&once, &b1, &FilterOp::Flip).unwrap();
        prop_assert_eq!(twice.as_raw(), img.as_raw());
        prop_assert_eq!(b2, b);
    }

    #[test]
    fn rotated_hull_contains_rotated_pixels((w, h, b) in frame_and_box(), degrees in -45.0f64..45.0) {
        let hull = rotated_hull(&b, w, h, degrees);
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        let (s, c) = degrees.to_radians().sin_cos();
        for (x, y) in [(b.x0, b.y0), (b.x1, b.y0), (b.x0, b.y1), (b.x1, b.y1)] {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let (rx, ry) = (cx + dx * c + dy * s, cy - dx * s + dy * c);
            let (rx, ry) = (rx.clamp(0.0, w as f64), ry.clamp(0.0, h as f64));
            prop_assert!(hull.x0 as f64 <= rx + 1e-9 && rx <= hull.x1 as f64 + 1e-9);
            prop_assert!(hull.y0 as f64 <= ry + 1e-9 && ry <= hull.y1 as f64 + 1e-9);
        }
        // Pixels that came from inside the box land inside the hull.
        let mask = RgbImage::from_fn(w, h, |x, y| if b.contains(x, y) { Rgb([255; 3]) } else { Rgb([0; 3]) });
        if let Some((out, nb)) = apply_filter(&mask, &b, &FilterOp::Rotation { degrees }) {
            prop_assert_eq!(nb, hull);
            for (x, y, p) in out.enumerate_pixels() {
                prop_assert!(p.0[0] == 0 || hull.contains(x, y), "({x}, {y}) outside {hull:?}");
            }
        }
    }

    #[test]
    fn photometric_boxes_bit_exact((w, h, b) in frame_and_box(), gain in 0.6f64..1.4, shift in -30i16..30, angle in 0.0f64..6.28) {
        let img = noisy_image(w, h, 5);
        for op in [
            FilterOp::Brightness { gain },
            FilterOp::Contrast { gain },
            FilterOp::ColorShift { shift: [shift, -shift, shift / 2] },
            FilterOp::Shadow { gain: gain / 2.0, angle, offset: 0.0 },
            FilterOp::Background { fill: Fill::default() },
        ] {
            prop_assert_eq!(apply_filter(&img, &b, &op).unwrap().1, b);
        }
    }

    #[test]
    fn capture_gaps_hold(steps in prop::collection::vec(0.1f64..400.0, 1..200), gap in 0.0f64..1500.0) {
        let ts: Vec<f64> = steps.iter().scan(0.0, |t, d| { *t += d; Some(*t) }).collect();
        let idx = capture_indices(&ts, gap);
        prop_assert_eq!(idx[0], 0);
        for w in idx.windows(2) {
            prop_assert!(ts[w[1]] - ts[w[0]] >= gap);
            // Nothing in between was eligible.
            prop_assert!((w[0] + 1..w[1]).all(|k| ts[k] - ts[w[0]] < gap));
        }
    }

    #[test]
    fn ncc_is_bounded(a in prop::collection::vec(-100.0f64..100.0, 2..40), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.gen_range(-100.0..100.0)).collect();
        let v = ncc(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&v));
    }
}
