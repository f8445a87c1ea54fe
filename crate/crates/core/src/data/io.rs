//! Manifest (JSON), raw little-endian f32 feature files and the class table.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ActionAnnotation, Dataset, Subset, UnitFeatureSequence, Video};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "utal-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub video_id: String,
    #[serde(rename = "T")]
    pub num_units: usize,
    pub d_feat: usize,
    /// Relative to the manifest directory.
    pub feature_file: String,
    #[serde(default = "default_subset")]
    pub subset: Subset,
    pub annotations: Vec<ActionAnnotation>,
}

fn default_subset() -> Subset {
    Subset::Train
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub num_classes: usize,
    pub d_feat: usize,
    pub class_names_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    pub videos: Vec<ManifestVideo>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.json`, `classes.txt` and one `.f32` file per video.
/// `config` is embedded verbatim in the manifest.
pub fn save_dataset(
    dataset: &Dataset,
    out_dir: &Path,
    config: Option<serde_json::Value>,
) -> Result<PathBuf> {
    let feat_dir = out_dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;

    let mut classes = dataset.class_names.join("\n");
    classes.push('\n');
    write_file(&out_dir.join("classes.txt"), classes.as_bytes())?;

    let mut videos = Vec::with_capacity(dataset.videos.len());
    for v in &dataset.videos {
        let rel = format!("features/{}.f32", v.id());
        let mut bytes = Vec::with_capacity(v.sequence.features.len() * 4);
        for x in v.sequence.features.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        write_file(&out_dir.join(&rel), &bytes)?;
        videos.push(ManifestVideo {
            video_id: v.id().to_string(),
            num_units: v.num_units(),
            d_feat: v.sequence.d_feat(),
            feature_file: rel,
            subset: v.subset,
            annotations: v.annotations.clone(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        num_classes: dataset.num_classes,
        d_feat: dataset.d_feat,
        class_names_file: "classes.txt".into(),
        config: config.or_else(|| dataset.generator.clone()),
        videos,
    };
    let path = out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    Ok(path)
}

/// Problems that make a dataset unusable; empty when valid.
pub fn validate_dataset(dataset: &Dataset) -> Vec<String> {
    let mut problems = Vec::new();
    if dataset.class_names.len() != dataset.num_classes {
        problems.push(format!(
            "class table has {} names for {} classes",
            dataset.class_names.len(),
            dataset.num_classes
        ));
    }
    for v in &dataset.videos {
        let t = v.num_units();
        if t == 0 {
            problems.push(format!("{}: no units", v.id()));
        }
        if v.sequence.d_feat() != dataset.d_feat {
            problems.push(format!(
                "{}: d_feat {} differs from dataset d_feat {}",
                v.id(),
                v.sequence.d_feat(),
                dataset.d_feat
            ));
        }
        if v.sequence.features.iter().any(|x| !x.is_finite()) {
            problems.push(format!("{}: non-finite feature value", v.id()));
        }
        for (i, a) in v.annotations.iter().enumerate() {
            if a.class_id >= dataset.num_classes {
                problems.push(format!(
                    "{}: annotation {i} class {} out of range",
                    v.id(),
                    a.class_id
                ));
            }
            if !(0.0 <= a.start && a.start < a.end && a.end <= t as f64) {
                problems.push(format!(
                    "{}: annotation {i} [{}, {}] not inside [0, {t}]",
                    v.id(),
                    a.start,
                    a.end
                ));
            }
        }
    }
    problems
}

/// Loads and validates a dataset from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            manifest_path,
            format!(
                "unsupported manifest {} v{}",
                manifest.format, manifest.version
            ),
        ));
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));

    let classes_path = root.join(&manifest.class_names_file);
    let class_names: Vec<String> = fs::read_to_string(&classes_path)
        .map_err(|e| Error::io(&classes_path, e))?
        .lines()
        .map(str::to_string)
        .collect();

    let mut videos = Vec::with_capacity(manifest.videos.len());
    for mv in &manifest.videos {
        let path = root.join(&mv.feature_file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = mv.num_units * mv.d_feat * 4;
        if bytes.len() != expected {
            return Err(Error::format(
                &path,
                format!(
                    "expected {expected} bytes for [{} × {}] f32, found {}",
                    mv.num_units,
                    mv.d_feat,
                    bytes.len()
                ),
            ));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let features = Array2::from_shape_vec((mv.num_units, mv.d_feat), values)
            .expect("length checked above");
        videos.push(Video {
            sequence: UnitFeatureSequence {
                video_id: mv.video_id.clone(),
                features,
            },
            annotations: mv.annotations.clone(),
            subset: mv.subset,
        });
    }
    let dataset = Dataset {
        num_classes: manifest.num_classes,
        d_feat: manifest.d_feat,
        class_names,
        videos,
        generator: manifest.config,
    };
    let problems = validate_dataset(&dataset);
    if !problems.is_empty() {
        return Err(Error::format(manifest_path, problems.join("; ")));
    }
    Ok(dataset)
}
