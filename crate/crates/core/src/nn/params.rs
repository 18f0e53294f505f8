//! Flat parameter storage with named segments.
//!
//! A model declares its tensors once in a [`Layout`]; the values live in one
//! contiguous buffer in declaration order. Gradients, optimizer state,
//! checkpoints and fingerprints all reuse that single ordering.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Handle to one segment of a layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegId(usize);

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> SegId {
        let seg = Segment {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
        };
        self.total += seg.len();
        self.segments.push(seg);
        SegId(self.segments.len() - 1)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, id: SegId) -> &Segment {
        &self.segments[id.0]
    }

    pub fn range(&self, id: SegId) -> std::ops::Range<usize> {
        self.segments[id.0].range()
    }

    pub fn find(&self, name: &str) -> Option<SegId> {
        self.segments.iter().position(|s| s.name == name).map(SegId)
    }
}

/// How a segment is initialized.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<S> {
    layout: Arc<Layout>,
    data: Vec<S>,
}

impl<S: Scalar> Params<S> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![S::zero(); layout.total()];
        Self { layout, data }
    }

    pub fn from_vec(layout: Arc<Layout>, data: Vec<S>) -> Result<Self> {
        if data.len() != layout.total() {
            return Err(Error::shape(layout.total(), data.len()));
        }
        Ok(Self { layout, data })
    }

    /// Initializes every segment with the rule returned by `rule`, drawing in
    /// declaration order from `rng`.
    pub fn init<R: Rng>(layout: Arc<Layout>, rng: &mut R, rule: impl Fn(&Segment) -> Init) -> Self {
        let mut p = Self::zeros(layout.clone());
        for seg in layout.segments() {
            let slot = &mut p.data[seg.range()];
            match rule(seg) {
                Init::Zeros => {}
                Init::Ones => slot.iter_mut().for_each(|v| *v = S::one()),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("valid std");
                    for v in slot.iter_mut() {
                        *v = S::of(dist.sample(rng));
                    }
                }
            }
        }
        p
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn get(&self, id: SegId) -> &[S] {
        &self.data[self.layout.range(id)]
    }

    pub fn get_mut(&mut self, id: SegId) -> &mut [S] {
        let r = self.layout.range(id);
        &mut self.data[r]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<T: Scalar>(&self) -> Params<T> {
        Params {
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| T::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian 32-bit float blob in declaration order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(layout: Arc<Layout>, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != layout.total() * 4 {
            return Err(Error::shape(format!("{} bytes", layout.total() * 4), format!("{} bytes", bytes.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| S::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Ok(Self { layout, data })
    }

    /// Content digest of the layout and the f32 weight blob.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for seg in self.layout.segments() {
            h.update(seg.name.as_bytes());
            for d in &seg.shape {
                h.update((*d as u64).to_le_bytes());
            }
        }
        h.update(self.to_le_bytes());
        hex::encode(h.finalize())
    }
}

/// Gradient buffer sharing a parameter layout.
pub fn zeros_like<S: Scalar>(p: &Params<S>) -> Vec<S> {
    vec![S::zero(); p.len()]
}
