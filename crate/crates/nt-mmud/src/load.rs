//! Loader and validator for datasets in the interchange layout written by
//! `generate_dataset`. Validation failures always name file, line and
//! field; loading never panics on malformed input.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::MmudError;
use crate::lang::parse_obj_marker;
use crate::records::{rle_decode, Manifest, Sample};
use crate::scene::{CHANNELS, GRID};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub vocab: Vec<String>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[Sample]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

fn fail(file: &str, line: usize, field: &'static str, message: String) -> MmudError {
    MmudError::Validation { file: file.to_string(), line, field, message }
}

fn check_text(
    file: &str,
    line: usize,
    field: &'static str,
    text: &str,
    vocab: &BTreeSet<&str>,
) -> Result<(), MmudError> {
    if text.is_empty() {
        return Err(fail(file, line, field, "empty text".into()));
    }
    for tok in text.split_whitespace() {
        if !vocab.contains(tok) {
            return Err(fail(file, line, field, format!("token {tok:?} not in vocabulary")));
        }
    }
    Ok(())
}

fn validate_sample(
    sample: &Sample,
    file: &str,
    line: usize,
    vocab: &BTreeSet<&str>,
) -> Result<(), MmudError> {
    if sample.id.is_empty() {
        return Err(fail(file, line, "id", "empty id".into()));
    }
    let expected = GRID * GRID * CHANNELS;
    if sample.image.len() != expected {
        return Err(fail(
            file,
            line,
            "image",
            format!("length {} != {expected}", sample.image.len()),
        ));
    }
    for (i, rle) in sample.masks.iter().enumerate() {
        rle_decode(rle, GRID * GRID)
            .map_err(|m| fail(file, line, "masks", format!("mask {i}: {m}")))?;
    }
    check_text(file, line, "caption", &sample.caption, vocab)?;
    if sample.refexp.is_empty() {
        return Err(fail(file, line, "refexp", "no referring expressions".into()));
    }
    for r in &sample.refexp {
        check_text(file, line, "refexp", &r.expression, vocab)?;
        if r.obj_id == 0 || r.obj_id > sample.masks.len() {
            return Err(fail(
                file,
                line,
                "refexp",
                format!("obj_id {} outside 1..={}", r.obj_id, sample.masks.len()),
            ));
        }
    }
    if let Some(reasoning) = &sample.reasoning {
        check_text(file, line, "reasoning", &reasoning.question, vocab)?;
        check_text(file, line, "reasoning", &reasoning.answer, vocab)?;
        let markers: Vec<usize> =
            reasoning.answer.split_whitespace().filter_map(parse_obj_marker).collect();
        if markers != reasoning.obj_ids {
            return Err(fail(
                file,
                line,
                "reasoning",
                format!("obj_ids {:?} do not match answer markers {markers:?}", reasoning.obj_ids),
            ));
        }
        for &i in &reasoning.obj_ids {
            if i == 0 || i > sample.masks.len() {
                return Err(fail(
                    file,
                    line,
                    "reasoning",
                    format!("<obj-{i}> has no mask; only {} present", sample.masks.len()),
                ));
            }
        }
    }
    if sample.gen_target_id.is_empty() {
        return Err(fail(file, line, "gen_target_id", "empty id".into()));
    }
    Ok(())
}

fn load_split(path: &Path, vocab: &BTreeSet<&str>) -> Result<Vec<Sample>, MmudError> {
    let file_name = path.display().to_string();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|source| MmudError::Json {
            file: file_name.clone(),
            line: i + 1,
            source,
        })?;
        validate_sample(&sample, &file_name, i + 1, vocab)?;
        out.push(sample);
    }
    if out.is_empty() {
        log::warn!("{file_name}: empty split");
    }
    Ok(out)
}

/// Loads `dir/manifest.json` and all referenced files, validating every
/// sample. Ids must be unique within a split.
pub fn load_dataset(dir: &Path) -> Result<Dataset, MmudError> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&manifest_text).map_err(|e| MmudError::Manifest {
            file: manifest_path.display().to_string(),
            message: e.to_string(),
        })?;
    if manifest.schema_version != crate::records::SCHEMA_VERSION {
        return Err(MmudError::Manifest {
            file: manifest_path.display().to_string(),
            message: format!("unsupported schema_version {}", manifest.schema_version),
        });
    }
    let vocab: Vec<String> = fs::read_to_string(dir.join(&manifest.vocab))?
        .lines()
        .map(|l| l.to_string())
        .filter(|l| !l.is_empty())
        .collect();
    let vocab_set: BTreeSet<&str> = vocab.iter().map(|s| s.as_str()).collect();
    let mut dataset = Dataset {
        train: load_split(&dir.join(&manifest.files.train), &vocab_set)?,
        val: load_split(&dir.join(&manifest.files.val), &vocab_set)?,
        test: load_split(&dir.join(&manifest.files.test), &vocab_set)?,
        manifest,
        vocab,
    };
    for (name, split) in
        [("train", &dataset.train), ("val", &dataset.val), ("test", &dataset.test)]
    {
        let mut ids = BTreeSet::new();
        for s in split.iter() {
            if !ids.insert(s.id.as_str()) {
                return Err(MmudError::Manifest {
                    file: name.to_string(),
                    message: format!("duplicate sample id {}", s.id),
                });
            }
        }
    }
    // Stable order regardless of how files were concatenated.
    dataset.train.sort_by(|a, b| a.id.cmp(&b.id));
    dataset.val.sort_by(|a, b| a.id.cmp(&b.id));
    dataset.test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(dataset)
}
