//! Dataset directories laid out as `root/<subject>/<class>/<sample>`, where a sample is either a
//! PGM/PPM image or a directory of ordered PGM/PPM frames.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::dynimg::{dynamic_image_from_frames, normalize_for_display};
use crate::error::{Error, Result};
use crate::image::{is_pnm, read_pnm, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Image,
    Video,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject: String,
    pub label: usize,
    /// One image path, or the frames of a video sample in order.
    pub paths: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub kind: SampleKind,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

fn sorted_children(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let hidden = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'));
        if !hidden {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Scans `root` against an explicit class table. Subjects, classes and samples are visited in
/// lexicographic order.
pub fn ingest(root: &Path, classes: &[String]) -> Result<DatasetManifest> {
    if classes.is_empty() {
        return Err(Error::Config("a class table is required to ingest a dataset".into()));
    }
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut entries = Vec::new();
    let mut kind: Option<SampleKind> = None;
    for subject_dir in sorted_children(root)? {
        if !subject_dir.is_dir() {
            return Err(Error::Dataset(format!("unexpected file {} at subject level", subject_dir.display())));
        }
        let subject = file_name(&subject_dir);
        for class_dir in sorted_children(&subject_dir)? {
            let class = file_name(&class_dir);
            let label = classes.iter().position(|c| *c == class).ok_or_else(|| {
                Error::Dataset(format!(
                    "label {class:?} in {} is not in the class table {classes:?}",
                    class_dir.display()
                ))
            })?;
            if !class_dir.is_dir() {
                return Err(Error::Dataset(format!("{} should be a class directory", class_dir.display())));
            }
            let samples = sorted_children(&class_dir)?;
            if samples.is_empty() {
                return Err(Error::Dataset(format!("empty class directory {}", class_dir.display())));
            }
            for sample in samples {
                let (this_kind, paths) = if sample.is_dir() {
                    let frames = sorted_children(&sample)?;
                    if frames.is_empty() {
                        return Err(Error::Dataset(format!("video sample {} has no frames", sample.display())));
                    }
                    if let Some(bad) = frames.iter().find(|f| !is_pnm(f)) {
                        return Err(Error::Dataset(format!("unknown file type {} (expected .pgm/.ppm)", bad.display())));
                    }
                    (SampleKind::Video, frames)
                } else if is_pnm(&sample) {
                    (SampleKind::Image, vec![sample])
                } else {
                    return Err(Error::Dataset(format!("unknown file type {} (expected .pgm/.ppm)", sample.display())));
                };
                match kind {
                    None => kind = Some(this_kind),
                    Some(k) if k != this_kind => {
                        return Err(Error::Dataset(format!(
                            "{} mixes image and video samples",
                            root.display()
                        )))
                    }
                    Some(_) => {}
                }
                entries.push(ManifestEntry { subject: subject.clone(), label, paths });
            }
        }
    }
    for (label, class) in classes.iter().enumerate() {
        if !entries.iter().any(|e| e.label == label) {
            return Err(Error::Dataset(format!("empty class {class:?}: no samples under {}", root.display())));
        }
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        kind: kind.expect("at least one entry"),
        classes: classes.to_vec(),
        entries,
    })
}

impl DatasetManifest {
    pub fn subjects(&self) -> Vec<&str> {
        let mut s: Vec<&str> = self.entries.iter().map(|e| e.subject.as_str()).collect();
        s.dedup();
        s
    }

    /// Decodes one entry; a video becomes its display-normalized dynamic image.
    pub fn load_image(&self, entry: &ManifestEntry) -> Result<Image> {
        match self.kind {
            SampleKind::Image => read_pnm(&entry.paths[0]),
            SampleKind::Video => {
                let frames = entry.paths.iter().map(|p| read_pnm(p)).collect::<Result<Vec<_>>>()?;
                let di = dynamic_image_from_frames(&frames).map_err(|e| match e {
                    Error::Dataset(msg) => Error::Dataset(format!("{}: {msg}", entry.paths[0].display())),
                    other => other,
                })?;
                Ok(normalize_for_display(&di.pixels))
            }
        }
    }

    /// Decodes every entry, optionally resizing to `size × size`.
    pub fn load(&self, size: Option<usize>) -> Result<Dataset> {
        let samples = self
            .entries
            .iter()
            .map(|entry| {
                let mut image = self.load_image(entry)?;
                if let Some(s) = size {
                    image = image.resize(s, s);
                }
                Ok(Sample { image: image.to_chw(), label: entry.label, subject: entry.subject.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, self.classes.clone())
    }
}
