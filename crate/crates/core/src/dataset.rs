//! Problem-input batches with train/validation/test splits, and the plain
//! `key = value` manifest format that accompanies saved tensors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use crate::family::{FamilyError, ProblemFamily};
use crate::tensor::Tensor;
use crate::tensor_io::{load_tensors, save_tensors, take_tensor};

/// Ordered `key = value` lines; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Result<&str, FamilyError> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| FamilyError::Manifest(format!("missing key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, FamilyError> {
        let raw = self.get_str(key)?;
        raw.parse()
            .map_err(|_| FamilyError::Manifest(format!("key `{key}`: cannot parse `{raw}`")))
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, FamilyError> {
        let mut m = Manifest::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FamilyError::Manifest(format!("line {}: expected `key = value`", i + 1)))?;
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<(), FamilyError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, FamilyError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Contiguous index ranges of the three splits, in train, valid, test order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    /// 10:1:1 split; validation and test each get `count / 12` rows.
    pub fn ten_one_one(count: usize) -> Self {
        let held = count / 12;
        let train = count - 2 * held;
        Splits { train: 0..train, valid: train..train + held, test: train + held..count }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSet {
    pub x: Tensor,
    /// Optimal partial variables, one row per instance.
    pub labels: Option<Tensor>,
    pub splits: Splits,
    pub seed: u64,
}

impl InstanceSet {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn rows(&self, r: &Range<usize>) -> Tensor {
        self.x.select_rows(&r.clone().collect::<Vec<_>>())
    }

    pub fn train_x(&self) -> Tensor {
        self.rows(&self.splits.train)
    }

    pub fn valid_x(&self) -> Tensor {
        self.rows(&self.splits.valid)
    }

    pub fn test_x(&self) -> Tensor {
        self.rows(&self.splits.test)
    }

    pub fn save(&self, dir: &Path) -> Result<(), FamilyError> {
        std::fs::create_dir_all(dir)?;
        let mut m = Manifest::default();
        m.set("format", "instances 1");
        m.set("seed", self.seed);
        m.set("count", self.len());
        m.set("d", self.x.cols());
        m.set("train", self.splits.train.len());
        m.set("valid", self.splits.valid.len());
        m.set("test", self.splits.test.len());
        m.set("labels", self.labels.is_some());
        m.write(&dir.join("instances.manifest"))?;
        let mut entries = vec![("x", &self.x)];
        if let Some(l) = &self.labels {
            entries.push(("labels", l));
        }
        save_tensors(&dir.join("instances.tensors"), &entries)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, FamilyError> {
        let m = Manifest::read(&dir.join("instances.manifest"))?;
        if m.get_str("format")? != "instances 1" {
            return Err(FamilyError::Manifest(format!("unsupported format `{}`", m.get_str("format")?)));
        }
        let (count, d): (usize, usize) = (m.get("count")?, m.get("d")?);
        let (train, valid, test): (usize, usize, usize) = (m.get("train")?, m.get("valid")?, m.get("test")?);
        if train + valid + test != count {
            return Err(FamilyError::Manifest(format!("split sizes do not add up to {count}")));
        }
        let mut t = load_tensors(&dir.join("instances.tensors"))?;
        let x = take_tensor(&mut t, "x", Some(&[count, d]))?;
        let labels = if m.get::<bool>("labels")? {
            let l = take_tensor(&mut t, "labels", None)?;
            if l.rows() != count {
                return Err(FamilyError::Manifest(format!("labels have {} rows for {count} instances", l.rows())));
            }
            Some(l)
        } else {
            None
        };
        Ok(InstanceSet {
            x,
            labels,
            splits: Splits { train: 0..train, valid: train..train + valid, test: train + valid..count },
            seed: m.get("seed")?,
        })
    }
}

/// Draw `count` inputs from the family and split them 10:1:1.
pub fn sample_instances(family: &dyn ProblemFamily, count: usize, seed: u64) -> InstanceSet {
    InstanceSet { x: family.sample_inputs(count, seed), labels: None, splits: Splits::ten_one_one(count), seed }
}
