//! Videos, annotations, proposals and the synthetic benchmark.

mod io;
mod proposals;
mod synth;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use io::{load_dataset, save_dataset, validate_dataset, Manifest, ManifestVideo};
pub use proposals::{
    apply_offsets, build_training_set, compute_offsets, label_proposals, pool_k_parts,
    sliding_windows, tiou, LabeledProposal, ProposalConfig, ProposalLabel, Target, TrainingSet,
};
pub use synth::{generate_synthetic_dataset, SynthConfig};

/// Per-video matrix of unit features, `[T × d_feat]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFeatureSequence {
    pub video_id: String,
    pub features: Array2<f32>,
}

impl UnitFeatureSequence {
    pub fn num_units(&self) -> usize {
        self.features.nrows()
    }

    pub fn d_feat(&self) -> usize {
        self.features.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionAnnotation {
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
}

impl ActionAnnotation {
    pub fn interval(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

/// Candidate window in unit coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub start: f64,
    pub end: f64,
    pub scale_id: usize,
}

impl Proposal {
    pub fn new(start: f64, end: f64, scale_id: usize) -> Self {
        Proposal {
            start,
            end,
            scale_id,
        }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        !(self.len() > 0.0)
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub sequence: UnitFeatureSequence,
    pub annotations: Vec<ActionAnnotation>,
    pub subset: Subset,
}

impl Video {
    pub fn id(&self) -> &str {
        &self.sequence.video_id
    }

    pub fn num_units(&self) -> usize {
        self.sequence.num_units()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub d_feat: usize,
    pub class_names: Vec<String>,
    pub videos: Vec<Video>,
    /// Generator settings, echoed into the manifest when present.
    pub generator: Option<serde_json::Value>,
}

impl Dataset {
    pub fn subset(&self, subset: Subset) -> impl Iterator<Item = &Video> {
        self.videos.iter().filter(move |v| v.subset == subset)
    }

    /// Copy restricted to one subset.
    pub fn only(&self, subset: Subset) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            d_feat: self.d_feat,
            class_names: self.class_names.clone(),
            videos: self.subset(subset).cloned().collect(),
            generator: self.generator.clone(),
        }
    }

    pub fn num_instances(&self) -> usize {
        self.videos.iter().map(|v| v.annotations.len()).sum()
    }

    pub fn instances_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for a in self.videos.iter().flat_map(|v| &v.annotations) {
            counts[a.class_id] += 1;
        }
        counts
    }
}
