//! Binary label vectors and the probability-to-label decision rules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Presence (1) or absence (0) of each class for one image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn zeros(classes: usize) -> Self {
        LabelVector(vec![0; classes])
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Validation(format!("label entries must be 0 or 1, got {b}")));
        }
        Ok(LabelVector(bits))
    }

    pub fn from_indices(classes: usize, indices: &[usize]) -> Result<Self> {
        let mut v = Self::zeros(classes);
        for &i in indices {
            if i >= classes {
                return Err(Error::Validation(format!(
                    "label index {i} out of range for {classes} classes"
                )));
            }
            v.0[i] = 1;
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> bool {
        self.0[class] == 1
    }

    pub fn set(&mut self, class: usize) {
        self.0[class] = 1;
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    /// Column indices of the present classes, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }
}

/// Converts per-class probabilities into a binary prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecisionRule {
    /// Class is predicted iff its probability is at least the threshold.
    Threshold(f64),
    /// Exactly the `k` most probable classes; ties go to the lower class index.
    TopK(usize),
}

impl Default for DecisionRule {
    fn default() -> Self {
        DecisionRule::Threshold(0.5)
    }
}

impl DecisionRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DecisionRule::Threshold(t) if !(0.0..=1.0).contains(&t) => Err(Error::config(format!(
                "threshold must lie in [0, 1], got {t}"
            ))),
            DecisionRule::TopK(0) => Err(Error::config("top-k needs k >= 1")),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, probabilities: &[f64]) -> Result<LabelVector> {
        self.validate()?;
        let mut labels = LabelVector::zeros(probabilities.len());
        match *self {
            DecisionRule::Threshold(t) => {
                for (j, &p) in probabilities.iter().enumerate() {
                    if p >= t {
                        labels.set(j);
                    }
                }
            }
            DecisionRule::TopK(k) => {
                if k > probabilities.len() {
                    return Err(Error::config(format!(
                        "top-{k} requested but only {} classes exist",
                        probabilities.len()
                    )));
                }
                for j in rank_descending(probabilities).into_iter().take(k) {
                    labels.set(j);
                }
            }
        }
        Ok(labels)
    }
}

/// Indices sorted by descending value; equal values keep ascending index order.
pub(crate) fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

impl fmt::Display for DecisionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecisionRule::Threshold(t) => write!(f, "threshold:{t}"),
            DecisionRule::TopK(k) => write!(f, "topk:{k}"),
        }
    }
}

impl FromStr for DecisionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("decision rule must be threshold:<t> or topk:<k>, got {s:?}"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let rule = match kind.trim() {
            "threshold" => DecisionRule::Threshold(value.trim().parse().map_err(|_| bad())?),
            "topk" => DecisionRule::TopK(value.trim().parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        rule.validate()?;
        Ok(rule)
    }
}

impl Serialize for DecisionRule {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DecisionRule {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
