//! Deterministic dataset generation: seeded scene sampling with split-wide
//! dedup, template instantiation, and atomic JSONL + manifest writes.
//! Regeneration from the same (config, seed) is byte-identical.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::MmudError;
use crate::lang;
use crate::records::{
    rle_encode, Manifest, Reasoning, RefExp, Sample, SplitFiles, SplitSizes, SCHEMA_VERSION,
};
use crate::scene::{variant_dims, Object, Scene, QUADRANTS, VARIANTS};
use crate::text;

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Upper bound on objects per scene, 1..=4.
    pub max_objects: usize,
    /// Upper bound on refexp records per sample.
    pub refexps_per_scene: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { train: 2000, val: 200, test: 200, max_objects: 4, refexps_per_scene: 2 }
    }
}

/// Attempts per sample slot before declaring the config unsatisfiable.
/// Dedup across splits is the only rejection source, so exhaustion means
/// the scene space is too small for the requested sizes.
const MAX_TRIES: u32 = 200;

fn sample_scene(rng: &mut impl Rng, max_objects: usize) -> Scene {
    let n = rng.gen_range(1..=max_objects);
    let mut colors: Vec<usize> = (0..6).collect();
    colors.shuffle(rng);
    colors.truncate(n);
    colors.sort_unstable(); // canonical order: ascending color id
    let objects = colors
        .iter()
        .enumerate()
        .map(|(i, &color)| {
            let (shape, w, h) = variant_dims(rng.gen_range(0..VARIANTS));
            let (y, x) = QUADRANTS[i];
            Object { shape, color, x, y, w, h }
        })
        .collect();
    Scene { objects }
}

fn build_sample(scene: &Scene, id: String, rng: &mut impl Rng, cfg: &GenConfig) -> Sample {
    let (image, masks) = scene.render();
    let mut refexps = text::enumerate_refexps(scene);
    refexps.shuffle(rng);
    refexps.truncate(cfg.refexps_per_scene);
    let reasoning_pool = text::enumerate_reasoning(scene);
    let reasoning = if reasoning_pool.is_empty() {
        None
    } else {
        let pick = rng.gen_range(0..reasoning_pool.len());
        let r = &reasoning_pool[pick];
        Some(Reasoning {
            question: r.question.clone(),
            answer: r.answer.clone(),
            obj_ids: r.obj_ids.clone(),
        })
    };
    Sample {
        gen_target_id: id.clone(),
        id,
        image,
        caption: text::caption(scene),
        refexp: refexps
            .into_iter()
            .map(|c| RefExp { expression: c.expression, obj_id: c.obj_id })
            .collect(),
        reasoning,
        masks: masks.iter().map(|m| rle_encode(m)).collect(),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Generates all three splits under `out_dir` and returns the manifest.
/// Scenes are deduplicated across every split by content hash; per-sample
/// rng streams are derived from (seed, split, index, try), so output bytes
/// depend only on (config, seed).
pub fn generate_dataset(out_dir: &Path, cfg: &GenConfig, seed: u64) -> Result<Manifest, MmudError> {
    if cfg.max_objects == 0 || cfg.max_objects > 4 {
        return Err(MmudError::Generation(format!(
            "max_objects {} outside 1..=4",
            cfg.max_objects
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut seen: BTreeSet<[u8; 32]> = BTreeSet::new();
    let splits = [("train", cfg.train), ("val", cfg.val), ("test", cfg.test)];
    for (name, count) in splits {
        let mut lines = Vec::new();
        for idx in 0..count {
            let mut accepted = None;
            for t in 0..MAX_TRIES {
                let mut rng = nt_core::rng::stream(seed, &format!("mmud/{name}/{idx}/{t}"));
                let scene = sample_scene(&mut rng, cfg.max_objects);
                debug_assert!(scene.in_bounds());
                if seen.insert(scene.hash()) {
                    let id = format!("{name}-{idx:06}");
                    accepted = Some(build_sample(&scene, id, &mut rng, cfg));
                    break;
                }
            }
            let sample = accepted.ok_or_else(|| {
                MmudError::Generation(format!(
                    "could not find a fresh scene for {name}[{idx}] after {MAX_TRIES} tries; \
                     requested sizes exceed the distinct scene space"
                ))
            })?;
            let mut line = serde_json::to_string(&sample).expect("sample serializes");
            line.push('\n');
            lines.push(line);
        }
        write_atomic(&out_dir.join(format!("{name}.jsonl")), lines.concat().as_bytes())?;
    }
    let vocab_text = lang::vocabulary().join("\n") + "\n";
    write_atomic(&out_dir.join("vocab.txt"), vocab_text.as_bytes())?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        seed,
        splits: SplitSizes { train: cfg.train, val: cfg.val, test: cfg.test },
        files: SplitFiles {
            train: "train.jsonl".into(),
            val: "val.jsonl".into(),
            test: "test.jsonl".into(),
        },
        vocab: "vocab.txt".into(),
    };
    let mut manifest_text =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    manifest_text.push('\n');
    write_atomic(&out_dir.join("manifest.json"), manifest_text.as_bytes())?;
    Ok(manifest)
}

/// Convenience for tests and the CLI: dataset root paths.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}
