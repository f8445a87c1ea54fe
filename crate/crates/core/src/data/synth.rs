use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ActionAnnotation, Dataset, Subset, UnitFeatureSequence, Video};
use crate::error::{Error, Result};
use crate::numerics::{sample_std_normal, Rng};

/// Synthetic benchmark settings. Lengths are in units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub num_classes: usize,
    pub d_feat: usize,
    pub instances_min: usize,
    pub instances_max: usize,
    pub duration_min: usize,
    pub duration_max: usize,
    /// Std of the per-unit Gaussian feature noise.
    pub noise_level: f64,
    /// Scale of the onset-to-offset ramp added along a per-class direction.
    pub progress_amplitude: f64,
    /// Std of annotation boundary jitter, as a fraction of instance length.
    pub boundary_jitter: f64,
    /// Fraction of videos assigned to the test subset.
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 200,
            t_min: 64,
            t_max: 160,
            num_classes: 5,
            d_feat: 64,
            instances_min: 1,
            instances_max: 3,
            duration_min: 8,
            duration_max: 40,
            noise_level: 1.0,
            progress_amplitude: 1.0,
            boundary_jitter: 0.05,
            test_fraction: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: String| Err(Error::config(f, r));
        if self.num_videos == 0 {
            return bad("num_videos", "must be ≥ 1".into());
        }
        if self.num_classes < 2 {
            return bad(
                "num_classes",
                format!("must be ≥ 2, got {}", self.num_classes),
            );
        }
        if self.d_feat < 8 {
            return bad("d_feat", format!("must be ≥ 8, got {}", self.d_feat));
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            return bad(
                "t_min",
                format!("need 1 ≤ t_min ≤ t_max, got {}..{}", self.t_min, self.t_max),
            );
        }
        if self.instances_min > self.instances_max {
            return bad("instances_min", "exceeds instances_max".into());
        }
        if self.duration_min == 0 || self.duration_min > self.duration_max {
            return bad(
                "duration_min",
                format!(
                    "need 1 ≤ duration_min ≤ duration_max, got {}..{}",
                    self.duration_min, self.duration_max
                ),
            );
        }
        if self.duration_max + 2 > self.t_min {
            return bad(
                "duration_max",
                "must leave room inside the shortest video".into(),
            );
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(
                "noise_level",
                format!("must be ≥ 0, got {}", self.noise_level),
            );
        }
        if !(self.progress_amplitude >= 0.0 && self.progress_amplitude.is_finite()) {
            return bad(
                "progress_amplitude",
                format!("must be ≥ 0, got {}", self.progress_amplitude),
            );
        }
        if !(self.boundary_jitter >= 0.0 && self.boundary_jitter.is_finite()) {
            return bad(
                "boundary_jitter",
                format!("must be ≥ 0, got {}", self.boundary_jitter),
            );
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad("test_fraction", "must be in [0, 1)".into());
        }
        Ok(())
    }
}

/// Per-class direction with i.i.d. N(0, 1) components, one stream per key.
fn class_directions(cfg: &SynthConfig, root: &Rng, key: u64) -> Vec<Vec<f64>> {
    (0..cfg.num_classes)
        .map(|c| {
            let mut rng = root.derive(&[key, c as u64]);
            (0..cfg.d_feat)
                .map(|_| sample_std_normal(&mut rng))
                .collect()
        })
        .collect()
}

fn class_prototypes(cfg: &SynthConfig, root: &Rng) -> Vec<Vec<f64>> {
    class_directions(cfg, root, 0xC1A5)
}

fn class_progress(cfg: &SynthConfig, root: &Rng) -> Vec<Vec<f64>> {
    class_directions(cfg, root, 0x960C)
}

/// Ramp coefficient in [-1, 1] for unit `u` of an instance spanning [s, e).
fn progress_at(u: usize, s: usize, e: usize) -> f64 {
    2.0 * ((u - s) as f64 + 0.5) / (e - s) as f64 - 1.0
}

/// Lays out non-overlapping integer instances with random gaps.
fn plant_instances(cfg: &SynthConfig, t: usize, rng: &mut Rng) -> Vec<(usize, usize, usize)> {
    let n = rng.int_range(cfg.instances_min, cfg.instances_max);
    let mut durations: Vec<usize> = (0..n)
        .map(|_| rng.int_range(cfg.duration_min, cfg.duration_max))
        .collect();
    // at least one unit of background around every instance
    while !durations.is_empty() && durations.iter().sum::<usize>() + durations.len() + 1 > t {
        durations.pop();
    }
    let n = durations.len();
    let free = t - durations.iter().sum::<usize>() - (n + 1);
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.int_range(0, free)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(n);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (i, dur) in durations.into_iter().enumerate() {
        cursor += 1 + (cuts[i] - prev_cut);
        prev_cut = cuts[i];
        let class = rng.int_range(0, cfg.num_classes - 1);
        out.push((class, cursor, cursor + dur));
        cursor += dur;
    }
    out
}

/// Builds a seeded synthetic dataset.
///
/// Background units are pure noise. A unit of a planted instance is the
/// class prototype, plus a class direction scaled by its relative position
/// (-1 at onset, +1 at offset), plus noise. Annotations are the planted boundaries with
/// Gaussian jitter proportional to instance length.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let prototypes = class_prototypes(cfg, &root);
    let progress = class_progress(cfg, &root);
    let num_test = (cfg.num_videos as f64 * cfg.test_fraction).round() as usize;
    let first_test = cfg.num_videos - num_test;
    let mut videos = Vec::with_capacity(cfg.num_videos);
    for vi in 0..cfg.num_videos {
        let mut rng = root.derive(&[0x71DE0, vi as u64]);
        let t = rng.int_range(cfg.t_min, cfg.t_max);
        let instances = plant_instances(cfg, t, &mut rng);
        let mut features = Array2::<f32>::zeros((t, cfg.d_feat));
        let mut owner: Vec<Option<(usize, f64)>> = vec![None; t];
        for &(class, s, e) in &instances {
            for (u, slot) in owner.iter_mut().enumerate().take(e).skip(s) {
                *slot = Some((class, cfg.progress_amplitude * progress_at(u, s, e)));
            }
        }
        for (u, mut row) in features.rows_mut().into_iter().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let base = owner[u].map_or(0.0, |(c, r)| prototypes[c][j] + r * progress[c][j]);
                let noise = if cfg.noise_level > 0.0 {
                    cfg.noise_level * sample_std_normal(&mut rng)
                } else {
                    0.0
                };
                *v = (base + noise) as f32;
            }
        }
        let tf = t as f64;
        let annotations = instances
            .iter()
            .map(|&(class, s, e)| {
                let (s, e) = (s as f64, e as f64);
                let len = e - s;
                let mut start = s;
                let mut end = e;
                if cfg.boundary_jitter > 0.0 {
                    start += cfg.boundary_jitter * len * sample_std_normal(&mut rng);
                    end += cfg.boundary_jitter * len * sample_std_normal(&mut rng);
                }
                start = start.clamp(0.0, tf);
                end = end.clamp(0.0, tf);
                if end - start < 1.0 {
                    start = s;
                    end = e;
                }
                ActionAnnotation {
                    class_id: class,
                    start,
                    end,
                }
            })
            .collect();
        videos.push(Video {
            sequence: UnitFeatureSequence {
                video_id: format!("video_{vi:04}"),
                features,
            },
            annotations,
            subset: if vi >= first_test {
                Subset::Test
            } else {
                Subset::Train
            },
        });
    }
    Ok(Dataset {
        num_classes: cfg.num_classes,
        d_feat: cfg.d_feat,
        class_names: (0..cfg.num_classes)
            .map(|c| format!("action_{c:02}"))
            .collect(),
        videos,
        generator: Some(serde_json::json!({ "seed": seed, "synth": cfg })),
    })
}
