use std::fs;
use std::path::Path;

use cfbt_core::data::{load_dataset, load_sequence, RGB_DIR, RGB_GT, SHARED_GT, TAGS_FILE, TIR_DIR, TIR_GT};
use cfbt_core::synth::{generate_synthetic, SynthConfig};
use cfbt_core::{BBox, CfbtError};
use image::{Rgb, RgbImage};

fn write_frames(dir: &Path, count: usize, shade: u8) {
    for sub in [RGB_DIR, TIR_DIR] {
        fs::create_dir_all(dir.join(sub)).unwrap();
        for i in 0..count {
            RgbImage::from_pixel(32, 24, Rgb([shade, i as u8, 7]))
                .save(dir.join(sub).join(format!("{:04}.png", i + 1)))
                .unwrap();
        }
    }
}

fn boxes(n: usize, dx: f64) -> String {
    (0..n).map(|i| format!("{},{},8,6\n", 2.0 + i as f64 * dx, 3.0)).collect()
}

#[test]
fn two_sequence_fixture_loads_in_name_order() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("alpha");
    let b = root.path().join("beta");
    write_frames(&a, 3, 10);
    write_frames(&b, 4, 20);
    fs::write(a.join(RGB_GT), boxes(3, 1.0)).unwrap();
    fs::write(a.join(TIR_GT), boxes(3, 1.5)).unwrap();
    fs::write(a.join(TAGS_FILE), "OCC 2 3\nFM\n").unwrap();
    fs::write(b.join(SHARED_GT), boxes(4, 2.0)).unwrap();

    let report = load_dataset(root.path()).unwrap();
    assert!(report.errors.is_empty());
    let names: Vec<&str> = report.sequences.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["alpha", "beta"]);

    let s = &report.sequences[0];
    assert_eq!(s.len(), 3);
    assert_eq!(s.gt_tir[2], BBox::new(5.0, 3.0, 8.0, 6.0));
    assert_eq!(s.tags["OCC"], vec![false, true, true]);
    assert_eq!(s.tags["FM"], vec![true; 3]);
    let frame = s.load_frame(1).unwrap();
    assert_eq!(frame.rgb.get_pixel(0, 0), &Rgb([10, 1, 7]));

    // a single shared file serves both modalities
    let t = &report.sequences[1];
    assert_eq!(t.gt_rgb, t.gt_tir);
    assert_eq!(t.frames().count(), 4);
}

#[test]
fn count_mismatch_is_skipped_and_reported() {
    let root = tempfile::tempdir().unwrap();
    let good = root.path().join("good");
    let bad = root.path().join("short");
    write_frames(&good, 2, 1);
    write_frames(&bad, 2, 1);
    fs::write(good.join(RGB_GT), boxes(2, 1.0)).unwrap();
    fs::write(bad.join(RGB_GT), boxes(5, 1.0)).unwrap();
    let report = load_dataset(root.path()).unwrap();
    assert_eq!(report.sequences.len(), 1);
    assert_eq!(report.errors.len(), 1);
    assert_eq!(report.errors[0].name, "short");
    assert!(matches!(load_sequence(&bad), Err(CfbtError::Data(_))));
}

#[test]
fn malformed_annotation_names_the_line() {
    let root = tempfile::tempdir().unwrap();
    let s = root.path().join("s");
    write_frames(&s, 3, 1);
    fs::write(s.join(RGB_GT), "1,2,3,4\n1,2,three,4\n1,2,3,4\n").unwrap();
    match load_sequence(&s) {
        Err(CfbtError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
    // parse errors abort the whole dataset load
    assert!(matches!(load_dataset(root.path()), Err(CfbtError::Parse { .. })));
}

#[test]
fn missing_modality_folder_is_a_data_error() {
    let root = tempfile::tempdir().unwrap();
    let s = root.path().join("s");
    fs::create_dir_all(s.join(RGB_DIR)).unwrap();
    fs::write(s.join(RGB_GT), boxes(1, 1.0)).unwrap();
    assert!(matches!(load_sequence(&s), Err(CfbtError::Data(_))));
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(tree_bytes(&p).into_iter().map(|(n, b)| (format!("{}/{n}", p.file_name().unwrap().to_string_lossy()), b)));
        } else {
            out.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn synthetic_sequences_are_byte_identical_per_seed() {
    let cfg = SynthConfig {
        frames: 12,
        width: 64,
        height: 64,
        target_w: 12.0,
        target_h: 10.0,
        seed: 21,
        ..SynthConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(&cfg, a.path()).unwrap();
    generate_synthetic(&cfg, b.path()).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&SynthConfig { seed: 22, ..cfg }, c.path()).unwrap();
    assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));

    // what was written reads back as the same sequence
    let back = load_sequence(a.path()).unwrap();
    assert_eq!(back.len(), 12);
}

#[test]
fn occluder_covers_target_and_is_tagged() {
    let cfg = SynthConfig {
        frames: 70,
        occlusion: Some((40, 60)),
        distractors: 0,
        seed: 3,
        ..SynthConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let seq = generate_synthetic(&cfg, dir.path()).unwrap();
    let ho = &seq.tags["HO"];
    for (t, &tagged) in ho.iter().enumerate() {
        assert_eq!(tagged, (40..=60).contains(&(t + 1)), "frame {}", t + 1);
    }
    let loaded = load_sequence(dir.path()).unwrap();
    assert_eq!(&loaded.tags["HO"], ho);
    for t in [39usize, 45, 59, 60, 61] {
        let frame = seq.load_frame(t).unwrap();
        let (cx, cy) = seq.gt_rgb[t].center();
        let px = *frame.rgb.get_pixel(cx as u32, cy as u32);
        let hidden = (40..=60).contains(&(t + 1));
        assert_eq!(px == Rgb([90, 90, 95]), hidden, "frame {}", t + 1);
    }
}
