//! Dataset manifests and the in-memory test/train split a run works on.
//!
//! A manifest is a small JSON file next to its tensors:
//!
//! ```json
//! {
//!   "name": "synthetic-4",
//!   "classes": ["class0", "class1", "class2", "class3"],
//!   "template": "a photo of a {}",
//!   "tensor_file": "test_images.csmt",
//!   "labels_file": "test_labels.csmt",
//!   "train_tensor_file": "train_images.csmt",
//!   "train_labels_file": "train_labels.csmt"
//! }
//! ```
//!
//! Images are an `N x D` container (f32 or f64), labels an `N` container of
//! u32. The two `train_*` entries are optional and only needed by few-shot
//! methods.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{Tensor, TensorData};
use crate::error::{Error, Result};
use crate::toymodel::{synth_dataset, SynthDataset};
use crate::vlmhead::render_prompt;

use super::config::SynthConfig;

pub const DEFAULT_TEMPLATE: &str = "a photo of a {}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub classes: Vec<String>,
    pub template: String,
    pub tensor_file: PathBuf,
    pub labels_file: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_tensor_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_labels_file: Option<PathBuf>,
}

/// Test images plus optional few-shot training images, with class names.
#[derive(Debug, Clone, PartialEq)]
pub struct Data {
    pub name: String,
    pub class_names: Vec<String>,
    pub template: String,
    pub test: SynthDataset,
    pub train: Option<SynthDataset>,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn read_split(images: &Path, labels: &Path, num_classes: usize) -> Result<SynthDataset> {
    let x = Tensor::read(images)?;
    let [n, d] = x.dims() else {
        return Err(format_err(images, format!("expected 2 dimensions, found {}", x.dims().len())));
    };
    let (n, d) = (*n as usize, *d as usize);
    let y = Tensor::read(labels)?;
    y.expect_dims(&[n as u32], "labels")?;
    let TensorData::U32(raw) = y.data() else {
        return Err(format_err(labels, "labels must be u32"));
    };
    let labels_vec: Vec<usize> = raw.iter().map(|&l| l as usize).collect();
    if let Some(pos) = labels_vec.iter().position(|&l| l >= num_classes) {
        return Err(format_err(
            labels,
            format!("label {} at row {pos} exceeds {num_classes} classes", labels_vec[pos]),
        ));
    }
    let images_vec = x.to_f64();
    if images_vec.iter().any(|v| !v.is_finite()) {
        return Err(format_err(images, "non-finite pixel"));
    }
    Ok(SynthDataset {
        images: images_vec,
        labels: labels_vec,
        class_means: Vec::new(),
        num_classes,
        input_dim: d,
        seed: 0,
    })
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        let m: Manifest = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| format_err(path, format!("at `{}`: {}", e.path(), e.inner())))?;
        if m.classes.len() < 2 {
            return Err(format_err(path, "at least two classes are required"));
        }
        render_prompt(&m.template, &m.classes[0]).map_err(|e| format_err(path, e.to_string()))?;
        if m.train_tensor_file.is_some() != m.train_labels_file.is_some() {
            return Err(format_err(path, "train_tensor_file and train_labels_file come as a pair"));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Reads every tensor, resolving relative paths against `base`.
    pub fn load(&self, base: &Path) -> Result<Data> {
        let k = self.classes.len();
        let test = read_split(&base.join(&self.tensor_file), &base.join(&self.labels_file), k)?;
        let train = match (&self.train_tensor_file, &self.train_labels_file) {
            (Some(x), Some(y)) => {
                let train = read_split(&base.join(x), &base.join(y), k)?;
                if train.input_dim != test.input_dim {
                    return Err(format_err(
                        &base.join(x),
                        format!("train rows have {} values, test rows {}", train.input_dim, test.input_dim),
                    ));
                }
                Some(train)
            }
            _ => None,
        };
        Ok(Data {
            name: self.name.clone(),
            class_names: self.classes.clone(),
            template: self.template.clone(),
            test,
            train,
        })
    }
}

pub fn unnamed_classes(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

/// Generates the synthetic benchmark split into train and test halves.
pub fn synthetic(cfg: &SynthConfig) -> Result<Data> {
    let all = synth_dataset(
        cfg.num_classes,
        cfg.input_dim,
        cfg.train_per_class + cfg.test_per_class,
        cfg.separation,
        cfg.seed,
    )?;
    let (train, test) = all.split_per_class(cfg.train_per_class)?;
    Ok(Data {
        name: format!("synthetic-{}", cfg.num_classes),
        class_names: unnamed_classes(cfg.num_classes),
        template: DEFAULT_TEMPLATE.to_owned(),
        test,
        train: (cfg.train_per_class > 0).then_some(train),
    })
}

fn write_split(dir: &Path, stem: &str, data: &SynthDataset) -> Result<(PathBuf, PathBuf)> {
    let images = PathBuf::from(format!("{stem}_images.csmt"));
    let labels = PathBuf::from(format!("{stem}_labels.csmt"));
    Tensor::f32_from_f64(vec![data.len() as u32, data.input_dim as u32], &data.images)?.write(&dir.join(&images))?;
    Tensor::u32(vec![data.len() as u32], data.labels.iter().map(|&l| l as u32).collect())?
        .write(&dir.join(&labels))?;
    Ok((images, labels))
}

/// Writes `data` as a manifest plus containers into `dir` and returns the
/// manifest path.
pub fn write_dataset(dir: &Path, data: &Data) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (tensor_file, labels_file) = write_split(dir, "test", &data.test)?;
    let (train_tensor_file, train_labels_file) = match &data.train {
        Some(train) => {
            let (x, y) = write_split(dir, "train", train)?;
            (Some(x), Some(y))
        }
        None => (None, None),
    };
    let manifest = Manifest {
        name: data.name.clone(),
        classes: data.class_names.clone(),
        template: data.template.clone(),
        tensor_file,
        labels_file,
        train_tensor_file,
        train_labels_file,
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

/// Loads a manifest file, resolving its tensors next to it.
pub fn load_manifest(path: &Path) -> Result<Data> {
    let m = Manifest::read(path)?;
    m.load(path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn written_datasets_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            train_per_class: 2,
            test_per_class: 3,
            ..SynthConfig::default()
        };
        let data = synthetic(&cfg).unwrap();
        let path = write_dataset(dir.path(), &data).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.test.labels, data.test.labels);
        assert_eq!(back.test.images, data.test.images);
        assert_eq!(back.train.unwrap().len(), 8);
        assert_eq!(back.class_names, data.class_names);
    }

    #[test]
    fn bad_manifests_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, r#"{"name":"x","classes":["a","b"],"template":"no slot","tensor_file":"t","labels_file":"l"}"#)
            .unwrap();
        assert!(Manifest::read(&path).is_err());
        std::fs::write(&path, r#"{"name":"x","classes":["a","b"],"template":"{}","tensor_file":7,"labels_file":"l"}"#)
            .unwrap();
        let err = Manifest::read(&path).unwrap_err().to_string();
        assert!(err.contains("tensor_file"), "{err}");
    }
}
