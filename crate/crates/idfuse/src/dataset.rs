//! Face ingestion from a directory of square images or a manifest file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use idfuse_core::data::{FaceRecord, ImageTensor};

use crate::error::{Error, Result};
use crate::imageio::load_rgb;

const EXTENSIONS: &[&str] = &["png", "bmp", "ppm", "pgm", "pnm"];

/// Records plus the label names; record `label` indexes `labels`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<FaceRecord>,
    pub labels: Vec<String>,
}

/// Identity label of a file: the stem up to the first underscore.
pub fn label_of(path: &Path) -> Option<String> {
    let stem = path.file_stem()?.to_str()?;
    let label = stem.split('_').next().unwrap_or(stem);
    (!label.is_empty()).then(|| label.to_string())
}

fn assemble(items: Vec<(String, PathBuf)>, origin: &Path) -> Result<Dataset> {
    if items.is_empty() {
        return Err(Error::format(origin, "no images found"));
    }
    let labels: Vec<String> = items
        .iter()
        .map(|(l, _)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut records = Vec::with_capacity(items.len());
    let mut side = None;
    for (key, (label, path)) in items.into_iter().enumerate() {
        let image = load_rgb(&path)?;
        check_square(&path, &image, &mut side)?;
        records.push(FaceRecord {
            key,
            label: labels.binary_search(&label).expect("label collected") as u32,
            image,
        });
    }
    Ok(Dataset { records, labels })
}

fn check_square(path: &Path, image: &ImageTensor, side: &mut Option<usize>) -> Result<()> {
    if !image.is_square() {
        return Err(Error::format(
            path,
            format!("image is {}x{}, expected square", image.width(), image.height()),
        ));
    }
    match *side {
        Some(s) if s != image.height() => Err(Error::format(
            path,
            format!("image side {} differs from the first image's {s}", image.height()),
        )),
        _ => {
            *side = Some(image.height());
            Ok(())
        }
    }
}

/// Every image in `dir` (not recursive), in file-name order.
pub fn load_directory(dir: &Path) -> Result<Dataset> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    let items = files
        .into_iter()
        .map(|p| {
            let label = label_of(&p).ok_or_else(|| Error::format(&p, "cannot derive a label from the file name"))?;
            Ok((label, p))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(items, dir)
}

/// `label<TAB>path` lines; relative paths resolve against the manifest's
/// directory. Blank lines and `#` lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (label, file) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, format!("line {}: expected label<TAB>path", i + 1)))?;
        if label.is_empty() || file.is_empty() {
            return Err(Error::format(path, format!("line {}: empty label or path", i + 1)));
        }
        items.push((label.to_string(), base.join(file)));
    }
    assemble(items, path)
}

/// A directory is scanned, anything else is read as a manifest.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        load_directory(path)
    } else {
        load_manifest(path)
    }
}
