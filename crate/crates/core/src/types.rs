use serde::{Deserialize, Serialize};

/// Class assignment of an example. Open-class examples carry no closed-set id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Known(usize),
    Open,
}

impl Label {
    pub fn known(self) -> Option<usize> {
        match self {
            Label::Known(c) => Some(c),
            Label::Open => None,
        }
    }

    pub fn is_open(self) -> bool {
        matches!(self, Label::Open)
    }
}

/// A single input with its label. Inputs are flat `f64` tensors; the backbone
/// spec decides how they are interpreted (vector or C×H×W image).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub input: Vec<f64>,
    pub label: Label,
}

impl LabeledExample {
    pub fn new(id: impl Into<String>, input: Vec<f64>, label: Label) -> Self {
        Self {
            id: id.into(),
            input,
            label,
        }
    }
}

/// Shot regime of a closed class, determined solely by its training count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShotCategory {
    Many,
    Medium,
    Few,
}

impl ShotCategory {
    pub fn name(self) -> &'static str {
        match self {
            ShotCategory::Many => "many",
            ShotCategory::Medium => "medium",
            ShotCategory::Few => "few",
        }
    }
}
