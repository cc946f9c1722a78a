//! Batch inference over image files.

use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::model::Model;
use crate::pgm::read_pgm;
use std::path::{Path, PathBuf};

/// Expands a file or directory argument into a sorted list of .pgm paths.
pub fn collect_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::io(format!("reading {}", input.display()), e))?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.path())
        .filter(|p| p.extension().map(|e| e == "pgm").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(
            "detect",
            format!("no .pgm images under {}", input.display()),
        ));
    }
    Ok(files)
}

fn detect_one(model: &Model, path: &Path) -> Result<Vec<Detection>> {
    let img = read_pgm(path)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let found = model.detect_image(&img)?;
    Ok(found
        .into_iter()
        .map(|(bbox, score)| Detection {
            image_id: name.clone(),
            bbox,
            score,
        })
        .collect())
}

/// Runs detection over every file. Images are independent, so worker threads
/// split the list and results merge in input order; any thread count yields
/// identical output. Unreadable images are skipped with a warning string.
pub fn detect_files(
    model: &Model,
    files: &[PathBuf],
    threads: usize,
) -> (Vec<Detection>, Vec<String>) {
    let threads = threads.max(1).min(files.len().max(1));
    let results: Vec<Result<Vec<Detection>>> = if threads == 1 {
        files.iter().map(|p| detect_one(model, p)).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<Detection>>>> = (0..files.len()).map(|_| None).collect();
        let chunk = files.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (chunk_idx, slot_chunk) in slots.chunks_mut(chunk).enumerate() {
                let start = chunk_idx * chunk;
                scope.spawn(move || {
                    for (offset, slot) in slot_chunk.iter_mut().enumerate() {
                        *slot = Some(detect_one(model, &files[start + offset]));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    };

    let mut detections = Vec::new();
    let mut warnings = Vec::new();
    for (path, result) in files.iter().zip(results) {
        match result {
            Ok(mut dets) => detections.append(&mut dets),
            Err(e) => warnings.push(format!("skipping {}: {e}", path.display())),
        }
    }
    (detections, warnings)
}
