//! End-to-end dataset properties: deterministic regeneration, schema round
//! trips, referential uniqueness under the brute-force resolver, the
//! answer-leak rule, and loader rejection of corrupted files.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nt_mmud::{generate_dataset, load_dataset, rle_decode, GenConfig, Sample, Scene, GRID};

fn small_cfg() -> GenConfig {
    GenConfig { train: 120, val: 30, test: 30, max_objects: 4, refexps_per_scene: 2 }
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn regeneration_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(a.path(), &small_cfg(), 77).unwrap();
    generate_dataset(b.path(), &small_cfg(), 77).unwrap();
    let (fa, fb) = (read_all(a.path()), read_all(b.path()));
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(fb.iter()) {
        assert_eq!(na, nb);
        assert_eq!(ba, bb, "{na} differs between runs");
    }
}

#[test]
fn different_seeds_differ() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(a.path(), &small_cfg(), 1).unwrap();
    generate_dataset(b.path(), &small_cfg(), 2).unwrap();
    let ta = fs::read(a.path().join("train.jsonl")).unwrap();
    let tb = fs::read(b.path().join("train.jsonl")).unwrap();
    assert_ne!(ta, tb);
}

#[test]
fn save_load_save_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), &small_cfg(), 9).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    for (file, split) in
        [("train.jsonl", &ds.train), ("val.jsonl", &ds.val), ("test.jsonl", &ds.test)]
    {
        let original = fs::read_to_string(dir.path().join(file)).unwrap();
        let rewritten: String =
            split.iter().map(|s| serde_json::to_string(s).unwrap() + "\n").collect();
        assert_eq!(original, rewritten, "{file} not stable under reserialization");
    }
}

#[test]
fn default_sized_dataset_fully_validates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig::default();
    generate_dataset(dir.path(), &cfg, 7).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.train.len(), 2000);
    assert_eq!(ds.val.len(), 200);
    assert_eq!(ds.test.len(), 200);
    assert!(ds.vocab.len() < 120);
}

#[test]
fn splits_share_no_scene() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), &small_cfg(), 13).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let mut images = BTreeSet::new();
    for split in [&ds.train, &ds.val, &ds.test] {
        for s in split {
            assert!(images.insert(s.image.clone()), "scene repeated across splits: {}", s.id);
        }
    }
}

#[test]
fn single_object_scenes_omit_reasoning() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig { train: 30, val: 3, test: 3, max_objects: 1, refexps_per_scene: 2 };
    generate_dataset(dir.path(), &cfg, 5).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    for s in &ds.train {
        assert!(s.reasoning.is_none(), "{} has reasoning on a 1-object scene", s.id);
        assert_eq!(s.masks.len(), 1);
    }
}

#[test]
fn unsatisfiable_config_is_an_error() {
    // Only 36 distinct 1-object scenes exist; asking for 120 must fail.
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig { train: 120, val: 0, test: 0, max_objects: 1, refexps_per_scene: 2 };
    let err = generate_dataset(dir.path(), &cfg, 5).unwrap_err();
    assert!(err.to_string().contains("distinct scene space"), "unexpected error: {err}");
}

#[test]
fn every_refexp_resolves_to_its_object() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), &small_cfg(), 21).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        let scene = reconstruct_scene(s);
        for r in &s.refexp {
            let matches = nt_mmud::text::resolve_refexp(&scene, &r.expression);
            assert_eq!(
                matches,
                vec![r.obj_id - 1],
                "{}: {:?} resolves to {:?}",
                s.id,
                r.expression,
                matches
            );
        }
    }
}

#[test]
fn reasoning_questions_never_leak_the_referent() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), &small_cfg(), 33).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let mut checked = 0;
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        let Some(re) = &s.reasoning else { continue };
        let scene = reconstruct_scene(s);
        let referent = &scene.objects[re.obj_ids[0] - 1];
        let q: Vec<&str> = re.question.split_whitespace().collect();
        let color_word = nt_mmud::lang::COLORS[referent.color];
        let shape_word = referent.shape.word();
        let both = q.contains(&color_word) && q.contains(&shape_word);
        assert!(!both, "{}: question names the referent's color and shape: {}", s.id, re.question);
        // Stronger property of these templates: the referent's color never
        // appears at all, since questions only describe the anchor.
        assert!(!q.contains(&color_word), "{}: {}", s.id, re.question);
        checked += 1;
    }
    assert!(checked > 50, "too few reasoning samples to be meaningful");
}

#[test]
fn corrupt_mask_is_rejected_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig { train: 5, val: 1, test: 1, max_objects: 3, refexps_per_scene: 2 };
    generate_dataset(dir.path(), &cfg, 3).unwrap();
    let path = dir.path().join("train.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(|l| l.to_string()).collect();
    // Damage the third line's first mask run so the RLE no longer covers
    // the raster.
    let mut v: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    v["masks"][0][1] = serde_json::json!(3);
    lines[2] = serde_json::to_string(&v).unwrap();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("train.jsonl"), "no file in: {msg}");
    assert!(msg.contains(":3:"), "no line in: {msg}");
    assert!(msg.contains("masks"), "no field in: {msg}");
}

#[test]
fn unknown_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig { train: 2, val: 1, test: 1, max_objects: 2, refexps_per_scene: 1 };
    generate_dataset(dir.path(), &cfg, 3).unwrap();
    let path = dir.path().join("val.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    v["surprise"] = serde_json::json!(1);
    fs::write(&path, serde_json::to_string(&v).unwrap() + "\n").unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(err.to_string().contains("val.jsonl:1"), "{err}");
}

#[test]
fn empty_split_loads_as_empty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig { train: 4, val: 1, test: 1, max_objects: 2, refexps_per_scene: 1 };
    generate_dataset(dir.path(), &cfg, 3).unwrap();
    fs::write(dir.path().join("test.jsonl"), b"").unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert!(ds.test.is_empty());
    assert_eq!(ds.train.len(), 4);
}

#[test]
fn masks_are_consistent_with_the_image() {
    // Every mask-1 pixel must be painted (possibly by a later object, but
    // generated scenes never overlap, so the pixel carries its own color).
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(dir.path(), &small_cfg(), 41).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    for s in &ds.train {
        for rle in &s.masks {
            let mask = rle_decode(rle, GRID * GRID).unwrap();
            for (i, &m) in mask.iter().enumerate() {
                if m == 1 {
                    let px = &s.image[i * 3..i * 3 + 3];
                    assert!(px.iter().any(|&v| v != 0), "{}: mask pixel unpainted", s.id);
                }
            }
        }
    }
}

/// Rebuilds scene geometry from a sample's masks and image. Objects are
/// recovered in mask order; shape is classified from the footprint inside
/// its bounding box, color from any painted pixel.
fn reconstruct_scene(sample: &Sample) -> Scene {
    use nt_mmud::scene::PALETTE;
    use nt_mmud::Shape;
    let mut objects = Vec::new();
    for rle in &sample.masks {
        let mask = rle_decode(rle, GRID * GRID).unwrap();
        let (mut x0, mut y0, mut x1, mut y1) = (GRID, GRID, 0usize, 0usize);
        let mut count = 0usize;
        for r in 0..GRID {
            for c in 0..GRID {
                if mask[r * GRID + c] == 1 {
                    x0 = x0.min(c);
                    y0 = y0.min(r);
                    x1 = x1.max(c + 1);
                    y1 = y1.max(r + 1);
                    count += 1;
                }
            }
        }
        assert!(count > 0, "{}: empty mask", sample.id);
        let (w, h) = (x1 - x0, y1 - y0);
        let shape = if count == w * h {
            if w == h {
                Shape::Square
            } else {
                Shape::Bar
            }
        } else {
            Shape::Circle
        };
        let first = (0..GRID * GRID).find(|&i| mask[i] == 1).unwrap();
        let px = &sample.image[first * 3..first * 3 + 3];
        let color = PALETTE
            .iter()
            .position(|p| p == px)
            .unwrap_or_else(|| panic!("{}: pixel color not in palette", sample.id));
        objects.push(nt_mmud::Object { shape, color, x: x0, y: y0, w, h });
    }
    Scene { objects }
}
