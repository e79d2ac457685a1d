//! Shared domain types: the label space, per-sample records, feature maps,
//! and the per-step loss breakdown.

use serde::{Deserialize, Serialize};

use crate::autodiff::Arr;
use crate::error::{Error, Result};

/// The source label space: an ordered set of known class names plus a
/// reserved sentinel id for "unknown" used only at evaluation time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    known: Vec<String>,
}

impl LabelSpace {
    /// Class ids are assigned in the given order. At least two classes are
    /// required and names must be unique.
    pub fn new<S: AsRef<str>>(class_names: &[S]) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::config(format!(
                "label space needs at least 2 known classes, got {}",
                class_names.len()
            )));
        }
        let known: Vec<String> = class_names.iter().map(|s| s.as_ref().to_string()).collect();
        for (i, name) in known.iter().enumerate() {
            if known[..i].contains(name) {
                return Err(Error::config(format!("duplicate class name {:?}", name)));
            }
        }
        Ok(Self { known })
    }

    pub fn num_known(&self) -> usize {
        self.known.len()
    }

    /// Sentinel id for the collapsed unknown class: one past the known ids.
    pub fn unknown_token(&self) -> usize {
        self.known.len()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.known.iter().position(|n| n == name)
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.known.get(id).map(|s| s.as_str())
    }

    pub fn known_classes(&self) -> &[String] {
        &self.known
    }
}

/// One dataset sample. Images are 3xHxW in [0,1] before normalization.
/// `label` is a known class id, or the unknown sentinel for evaluation-only
/// samples. The optional mask (HxW, 1 = foreground) and cached edge map are
/// filled in by the content augmentations.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub id: String,
    pub image: Arr,
    pub label: usize,
    pub class_name: String,
    pub domain: String,
    pub mask: Option<Arr>,
    pub edge: Option<Arr>,
}

impl SampleRecord {
    pub fn validate_shapes(&self) -> Result<()> {
        if self.image.ndim() != 3 || self.image.shape()[0] != 3 {
            return Err(Error::shape(format!(
                "sample {} image must be 3xHxW, got {:?}",
                self.id,
                self.image.shape()
            )));
        }
        if let Some(mask) = &self.mask {
            if mask.shape() != &self.image.shape()[1..] {
                return Err(Error::shape(format!(
                    "sample {} mask {:?} does not match image {:?}",
                    self.id,
                    mask.shape(),
                    self.image.shape()
                )));
            }
        }
        Ok(())
    }
}

/// A batch of intermediate features (BxCxHxW) tagged with the encoder stage
/// that produced it.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Arr,
    pub stage_tag: String,
}

impl FeatureMap {
    pub fn new(data: Arr, stage_tag: impl Into<String>) -> Result<Self> {
        if data.ndim() != 4 {
            return Err(Error::shape(format!(
                "feature map must be BxCxHxW, got {:?}",
                data.shape()
            )));
        }
        let s = data.shape();
        if s[0] == 0 || s[1] == 0 || s[2] * s[3] == 0 {
            return Err(Error::shape(format!("degenerate feature map {:?}", s)));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("feature map contains non-finite entries"));
        }
        Ok(Self {
            data,
            stage_tag: stage_tag.into(),
        })
    }
}

/// Scalar loss components of one training step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd: f64,
    pub eova: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Check the weighted-sum identity total = ce + l1*eova + l2*kd.
    pub fn satisfies_identity(&self, lambda1: f64, lambda2: f64) -> bool {
        let expect = self.ce + lambda1 * self.eova + lambda2 * self.kd;
        let scale = expect.abs().max(self.total.abs()).max(1.0);
        (self.total - expect).abs() <= 1e-6 * scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_ids_follow_insertion_order() {
        let ls = LabelSpace::new(&["dog", "elephant", "giraffe", "guitar"]).unwrap();
        assert_eq!(ls.num_known(), 4);
        assert_eq!(ls.unknown_token(), 4);
        assert_eq!(ls.id_of("dog"), Some(0));
        assert_eq!(ls.id_of("guitar"), Some(3));
        assert_eq!(ls.name_of(2), Some("giraffe"));
        assert_eq!(ls.id_of("horse"), None);
    }

    #[test]
    fn label_space_rejects_degenerate_inputs() {
        assert!(LabelSpace::new(&["a"]).is_err(), "single class must be rejected");
        assert!(LabelSpace::new(&["a", "b", "a"]).is_err(), "duplicates must be rejected");
        let ls = LabelSpace::new(&["a", "b"]).unwrap();
        assert_eq!((ls.id_of("a"), ls.id_of("b")), (Some(0), Some(1)));
        assert_eq!(ls.unknown_token(), 2);
    }

    #[test]
    fn label_ids_are_a_bijection() {
        let ls = LabelSpace::new(&["w", "x", "y", "z"]).unwrap();
        for id in 0..ls.num_known() {
            let name = ls.name_of(id).unwrap();
            assert_eq!(ls.id_of(name), Some(id));
        }
    }

    #[test]
    fn loss_breakdown_identity() {
        let lb = LossBreakdown {
            ce: 1.0,
            kd: 3.0,
            eova: 2.0,
            total: 5.0,
        };
        assert!(lb.satisfies_identity(0.5, 1.0));
        assert!(!lb.satisfies_identity(1.0, 1.0));
    }

    #[test]
    fn label_space_serde_round_trip() {
        let ls = LabelSpace::new(&["circle", "square"]).unwrap();
        let json = serde_json::to_string(&ls).unwrap();
        let back: LabelSpace = serde_json::from_str(&json).unwrap();
        assert_eq!(ls, back);
    }
}
