use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which regularization strength a parameter segment receives. `Feature`
/// covers the residual-extracting front of the network, `Head` the
/// compacting/classifying back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaGroup {
    Feature,
    Head,
}

impl fmt::Display for LambdaGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaGroup::Feature => f.write_str("feature"),
            LambdaGroup::Head => f.write_str("head"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub group: LambdaGroup,
}

/// Flat trainable parameters plus the named segment table describing them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ParamVector<T> {
    values: Vec<T>,
    segments: Vec<Segment>,
}

impl<T: Scalar> ParamVector<T> {
    /// Segments must tile `[0, values.len())` in order with unique names.
    pub fn new(values: Vec<T>, segments: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        let mut names = HashSet::new();
        for s in &segments {
            if s.offset != next {
                return Err(Error::Layout(format!(
                    "segment `{}` starts at {} but previous segment ends at {next}",
                    s.name, s.offset
                )));
            }
            if !names.insert(s.name.as_str()) {
                return Err(Error::Layout(format!("duplicate segment name `{}`", s.name)));
            }
            next += s.len;
        }
        if next != values.len() {
            return Err(Error::Layout(format!(
                "segments cover {next} values but the vector holds {}",
                values.len()
            )));
        }
        Ok(Self { values, segments })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment_values(&self, name: &str) -> Option<&[T]> {
        self.segment(name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    /// Lambda group of every coordinate, in layout order.
    pub fn groups(&self) -> Vec<LambdaGroup> {
        let mut out = Vec::with_capacity(self.values.len());
        for s in &self.segments {
            out.extend(std::iter::repeat_n(s.group, s.len));
        }
        out
    }

    /// Same segment table, new values.
    pub fn with_values(&self, values: Vec<T>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::Layout(format!(
                "expected {} values, got {}",
                self.values.len(),
                values.len()
            )));
        }
        Ok(Self {
            values,
            segments: self.segments.clone(),
        })
    }

    pub fn same_layout(&self, other: &ParamVector<T>) -> bool {
        self.segments == other.segments
    }
}

/// Derivative vector laid out like a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GradVector<T>(pub Vec<T>);

impl<T: Scalar> GradVector<T> {
    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_abs(&self) -> T {
        self.0.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}
