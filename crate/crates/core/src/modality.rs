//! Modalities and modality subsets.

use serde::{Deserialize, Serialize};

/// Raw input dimensions per modality: image features, clinical variables,
/// text embeddings.
pub const RAW_DIMS: [usize; 3] = [512, 17, 768];

/// Shared encoded dimension d.
pub const ENCODED_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
    C,
}

pub const ALL_MODALITIES: [Modality; 3] = [Modality::A, Modality::B, Modality::C];

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::A => 0,
            Modality::B => 1,
            Modality::C => 2,
        }
    }

    pub fn from_index(i: usize) -> Modality {
        ALL_MODALITIES[i]
    }

    pub fn raw_dim(self) -> usize {
        RAW_DIMS[self.index()]
    }

    pub fn letter(self) -> char {
        match self {
            Modality::A => 'A',
            Modality::B => 'B',
            Modality::C => 'C',
        }
    }
}

/// Non-empty subset of {A,B,C} as a 3-bit mask, bit i = modality i.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalitySet(pub u8);

impl ModalitySet {
    pub fn empty() -> Self {
        ModalitySet(0)
    }

    pub fn single(m: Modality) -> Self {
        ModalitySet(1 << m.index())
    }

    pub fn with(self, m: Modality) -> Self {
        ModalitySet(self.0 | (1 << m.index()))
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Members in the fixed A < B < C order.
    pub fn members(self) -> Vec<Modality> {
        ALL_MODALITIES
            .iter()
            .copied()
            .filter(|m| self.contains(*m))
            .collect()
    }

    pub fn label(self) -> String {
        self.members().iter().map(|m| m.letter()).collect()
    }
}
