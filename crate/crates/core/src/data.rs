//! Labelled image datasets and their on-disk layout.
//!
//! A dataset directory holds `dataset.json` and, per split, a raw
//! little-endian f32 input file (samples x C x H x W) and a little-endian u32
//! label file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "prunesearch-dataset";
const DATASET_VERSION: u32 = 1;
const INDEX: &str = "dataset.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    inputs: Vec<f32>,
    labels: Vec<u32>,
    sample_shape: [usize; 3],
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f32>,
        labels: Vec<u32>,
        sample_shape: [usize; 3],
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 {
            return Err(Error::Dataset("empty sample shape".into()));
        }
        if inputs.len() != per * labels.len() {
            return Err(Error::Dataset(format!(
                "{} input values do not match {} labels of {per} values each",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            sample_shape,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.sample_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// The first `count` samples as a new dataset.
    pub fn head(&self, count: usize, split: Split) -> Self {
        let count = count.min(self.len());
        Self {
            inputs: self.inputs[..count * self.sample_len()].to_vec(),
            labels: self.labels[..count].to_vec(),
            sample_shape: self.sample_shape,
            num_classes: self.num_classes,
            split,
        }
    }

    /// Classes present, ascending.
    pub fn classes_present(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..self.num_classes).filter(|&c| seen[c]).collect()
    }
}

/// Train and test splits; validation is the leading fraction of test.
#[derive(Debug, Clone)]
pub struct DataBundle {
    train: Dataset,
    test: Dataset,
    validation: Dataset,
}

impl DataBundle {
    pub fn new(train: Dataset, test: Dataset, validation_fraction: f64) -> Result<Self> {
        if train.sample_shape != test.sample_shape || train.num_classes != test.num_classes {
            return Err(Error::Dataset("train and test splits disagree on shape".into()));
        }
        if !(0.0..=1.0).contains(&validation_fraction) {
            return Err(Error::Dataset(format!(
                "validation fraction {validation_fraction} outside [0, 1]"
            )));
        }
        let count = ((test.len() as f64) * validation_fraction).round() as usize;
        let validation = test.head(count.max(1), Split::Validation);
        Ok(Self {
            train,
            test,
            validation,
        })
    }

    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.train.sample_shape
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    format: String,
    version: u32,
    num_classes: usize,
    sample_shape: [usize; 3],
    train: SplitFiles,
    test: SplitFiles,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFiles {
    inputs: String,
    labels: String,
    count: usize,
}

fn read_split(dir: &Path, files: &SplitFiles, index: &Index, split: Split) -> Result<Dataset> {
    let ipath = dir.join(&files.inputs);
    let lpath = dir.join(&files.labels);
    let ib = fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let lb = fs::read(&lpath).map_err(|e| Error::io(&lpath, e))?;
    if ib.len() % 4 != 0 || lb.len() % 4 != 0 {
        return Err(Error::Dataset("split file length not a multiple of 4".into()));
    }
    let inputs: Vec<f32> = ib
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let labels: Vec<u32> = lb
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if labels.len() != files.count {
        return Err(Error::Dataset(format!(
            "{:?} split declares {} samples, label file holds {}",
            split,
            files.count,
            labels.len()
        )));
    }
    if let Some(i) = inputs.iter().position(|v| !v.is_finite()) {
        return Err(Error::Dataset(format!("non-finite input value at {i}")));
    }
    Dataset::new(inputs, labels, index.sample_shape, index.num_classes, split)
}

pub fn load_dataset(dir: impl AsRef<Path>, validation_fraction: f64) -> Result<DataBundle> {
    let dir = dir.as_ref();
    let path = dir.join(INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: Index =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if index.format != DATASET_FORMAT {
        return Err(Error::Dataset(format!("unexpected format tag `{}`", index.format)));
    }
    if index.version != DATASET_VERSION {
        return Err(Error::Version {
            found: index.version,
            supported: DATASET_VERSION,
        });
    }
    let train = read_split(dir, &index.train, &index, Split::Train)?;
    let test = read_split(dir, &index.test, &index, Split::Test)?;
    DataBundle::new(train, test, validation_fraction)
}

pub fn save_dataset(train: &Dataset, test: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    for (prefix, d) in [("train", train), ("test", test)] {
        write(
            &format!("{prefix}_inputs.bin"),
            d.inputs.iter().flat_map(|v| v.to_le_bytes()).collect(),
        )?;
        write(
            &format!("{prefix}_labels.bin"),
            d.labels.iter().flat_map(|v| v.to_le_bytes()).collect(),
        )?;
    }
    let index = Index {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        num_classes: train.num_classes,
        sample_shape: train.sample_shape,
        train: SplitFiles {
            inputs: "train_inputs.bin".into(),
            labels: "train_labels.bin".into(),
            count: train.len(),
        },
        test: SplitFiles {
            inputs: "test_inputs.bin".into(),
            labels: "test_labels.bin".into(),
            count: test.len(),
        },
    };
    write(
        INDEX,
        serde_json::to_string_pretty(&index).expect("index serializes").into_bytes(),
    )
}
