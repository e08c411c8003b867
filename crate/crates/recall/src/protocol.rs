//! Incremental experimental protocols: class schedules, disjoint and
//! overlapped training partitions, and per-step label masking.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{mask_to, ClassId, ClassSet, Dataset, BACKGROUND};

#[derive(Error, Debug)]
pub enum ProtocolError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("step {step} of the partition is empty (dataset too small for the schedule)")]
    EmptyStep { step: usize },
    #[error("partition builder expects a {expected:?} schedule")]
    SetupMismatch { expected: Setup },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setup {
    Disjoint,
    Overlapped,
}

impl std::fmt::Display for Setup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Setup::Disjoint => write!(f, "disjoint"),
            Setup::Overlapped => write!(f, "overlapped"),
        }
    }
}

/// How non-background classes are ordered before being dealt into steps.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassOrder {
    Ascending,
    Seeded(u64),
}

/// The class sets C_0..C_K of one incremental run. Steps are pairwise
/// disjoint, C_0 contains the background class, and the union of all steps is
/// the full universe.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct TaskSchedule {
    steps: Vec<ClassSet>,
    setup: Setup,
    class_order: Vec<ClassId>,
}

impl TaskSchedule {
    pub fn steps(&self) -> &[ClassSet] {
        &self.steps
    }

    pub fn step(&self, k: usize) -> &ClassSet {
        &self.steps[k]
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn setup(&self) -> Setup {
        self.setup
    }

    pub fn class_order(&self) -> &[ClassId] {
        &self.class_order
    }

    /// C_{0->k}: every class learned through step `k`, background included.
    pub fn coverage_through(&self, k: usize) -> ClassSet {
        let mut cover = ClassSet::empty();
        for step in &self.steps[..=k] {
            cover = cover.union(step);
        }
        cover
    }

    pub fn universe(&self) -> ClassSet {
        self.coverage_through(self.num_steps() - 1)
    }
}

/// Deal `num_classes` foreground classes into steps of the given sizes.
/// C_0 additionally contains the background class.
pub fn make_schedule(
    num_classes: usize,
    step_sizes: &[usize],
    order: ClassOrder,
    setup: Setup,
) -> Result<TaskSchedule, ProtocolError> {
    if step_sizes.is_empty() {
        return Err(ProtocolError::InvalidSchedule("no steps".into()));
    }
    if step_sizes.iter().any(|s| *s == 0) {
        return Err(ProtocolError::InvalidSchedule(
            "every step must add at least one class".into(),
        ));
    }
    let total: usize = step_sizes.iter().sum();
    if total != num_classes {
        return Err(ProtocolError::InvalidSchedule(format!(
            "step sizes sum to {total} but the universe has {num_classes} classes"
        )));
    }
    let mut ordered: Vec<ClassId> = (1..=num_classes as u8).map(ClassId).collect();
    if let ClassOrder::Seeded(seed) = order {
        let mut rng = crate::core::rng_from(seed);
        use rand::Rng;
        for i in (1..ordered.len()).rev() {
            ordered.swap(i, rng.gen_range(0..=i));
        }
    }
    let mut steps = Vec::with_capacity(step_sizes.len());
    let mut cursor = 0usize;
    for (k, size) in step_sizes.iter().enumerate() {
        let mut classes: Vec<ClassId> = ordered[cursor..cursor + size].to_vec();
        if k == 0 {
            classes.push(BACKGROUND);
        }
        steps.push(ClassSet::new(classes));
        cursor += size;
    }
    Ok(TaskSchedule {
        steps,
        setup,
        class_order: ordered,
    })
}

/// The per-step training sets T_0..T_K, labels already masked per the setup.
#[derive(Clone, Debug)]
pub struct TaskPartition {
    pub per_step: Vec<Dataset>,
    /// Index of each per-step sample in the source dataset (image identity).
    pub source_indices: Vec<Vec<usize>>,
}

impl TaskPartition {
    pub fn num_steps(&self) -> usize {
        self.per_step.len()
    }
}

fn masked_subset(
    dataset: &Dataset,
    indices: &[usize],
    keep: &ClassSet,
) -> Result<Dataset, crate::core::CoreError> {
    let mut samples = Vec::with_capacity(indices.len());
    for &i in indices {
        let src = &dataset.samples[i];
        let masked = mask_to(&src.labels, keep, BACKGROUND);
        samples.push(src.with_labels(masked)?);
    }
    Ok(Dataset {
        samples,
        class_universe: dataset.class_universe.clone(),
        split_tag: dataset.split_tag,
    })
}

/// Disjoint setup: T_0 takes every image with at least one pixel of a
/// foreground class of C_0; later steps take the not-yet-assigned images that
/// contain a pixel of C_k. Each image lands in at most one step (earliest
/// eligible step wins), and labels are masked to C_k plus background.
pub fn build_disjoint(
    dataset: &Dataset,
    schedule: &TaskSchedule,
) -> Result<TaskPartition, ProtocolError> {
    if schedule.setup() != Setup::Disjoint {
        return Err(ProtocolError::SetupMismatch {
            expected: Setup::Disjoint,
        });
    }
    let mut assigned = vec![false; dataset.len()];
    let mut per_step = Vec::with_capacity(schedule.num_steps());
    let mut source_indices = Vec::with_capacity(schedule.num_steps());
    for (k, step_classes) in schedule.steps().iter().enumerate() {
        let eligible = step_classes.foreground();
        let indices: Vec<usize> = dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(i, s)| !assigned[*i] && !s.present_classes().intersection(&eligible).is_empty())
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            return Err(ProtocolError::EmptyStep { step: k });
        }
        for &i in &indices {
            assigned[i] = true;
        }
        let keep = step_classes.with(BACKGROUND);
        let ds = masked_subset(dataset, &indices, &keep)
            .map_err(|e| ProtocolError::InvalidSchedule(e.to_string()))?;
        per_step.push(ds);
        source_indices.push(indices);
    }
    Ok(TaskPartition {
        per_step,
        source_indices,
    })
}

/// Overlapped setup: T_0 takes only images whose every pixel is a C_0 label;
/// each later step takes all images containing a pixel of C_k, so an image may
/// appear in several steps with different maskings.
pub fn build_overlapped(
    dataset: &Dataset,
    schedule: &TaskSchedule,
) -> Result<TaskPartition, ProtocolError> {
    if schedule.setup() != Setup::Overlapped {
        return Err(ProtocolError::SetupMismatch {
            expected: Setup::Overlapped,
        });
    }
    let mut per_step = Vec::with_capacity(schedule.num_steps());
    let mut source_indices = Vec::with_capacity(schedule.num_steps());
    for (k, step_classes) in schedule.steps().iter().enumerate() {
        let indices: Vec<usize> = if k == 0 {
            dataset
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.present_classes().is_subset_of(step_classes))
                .map(|(i, _)| i)
                .collect()
        } else {
            dataset
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| !s.present_classes().intersection(step_classes).is_empty())
                .map(|(i, _)| i)
                .collect()
        };
        if indices.is_empty() {
            return Err(ProtocolError::EmptyStep { step: k });
        }
        let keep = step_classes.with(BACKGROUND);
        let ds = masked_subset(dataset, &indices, &keep)
            .map_err(|e| ProtocolError::InvalidSchedule(e.to_string()))?;
        per_step.push(ds);
        source_indices.push(indices);
    }
    Ok(TaskPartition {
        per_step,
        source_indices,
    })
}

/// Dispatch on the schedule's setup.
pub fn build_partition(
    dataset: &Dataset,
    schedule: &TaskSchedule,
) -> Result<TaskPartition, ProtocolError> {
    match schedule.setup() {
        Setup::Disjoint => build_disjoint(dataset, schedule),
        Setup::Overlapped => build_overlapped(dataset, schedule),
    }
}

#[derive(Serialize, Deserialize)]
struct PartitionManifest {
    setup: String,
    steps: Vec<PartitionStepManifest>,
}

#[derive(Serialize, Deserialize)]
struct PartitionStepManifest {
    classes: Vec<u8>,
    samples: Vec<String>,
}

/// Persist per-step sample-name lists next to a dataset fixture directory.
/// Names follow the fixture convention (`train0000`, ...).
pub fn save_partition_manifest(
    path: &Path,
    schedule: &TaskSchedule,
    partition: &TaskPartition,
) -> std::io::Result<()> {
    let steps = schedule
        .steps()
        .iter()
        .zip(&partition.source_indices)
        .map(|(classes, indices)| PartitionStepManifest {
            classes: classes.iter().map(|c| c.0).collect(),
            samples: indices.iter().map(|i| format!("train{i:04}")).collect(),
        })
        .collect();
    let manifest = PartitionManifest {
        setup: schedule.setup().to_string(),
        steps,
    };
    std::fs::write(path, serde_json::to_string_pretty(&manifest).expect("serializable"))
}
