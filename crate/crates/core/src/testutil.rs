//! Shared helpers for unit tests.

use rand::Rng;

use crate::modality::Modality;
use crate::models::FeatureProvider;
use crate::rng::substream;

pub struct RawFeatures {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl RawFeatures {
    pub fn random(seed: u64) -> Self {
        let mut rng = substream(seed, "raw-features");
        RawFeatures {
            a: (0..512).map(|_| rng.gen::<f64>() - 0.5).collect(),
            b: (0..17).map(|_| rng.gen::<f64>() - 0.5).collect(),
            c: (0..768).map(|_| rng.gen::<f64>() - 0.5).collect(),
        }
    }
}

impl FeatureProvider for RawFeatures {
    fn raw(&self, m: Modality) -> &[f64] {
        match m {
            Modality::A => &self.a,
            Modality::B => &self.b,
            Modality::C => &self.c,
        }
    }
}

/// A provider that counts raw-feature accesses per modality, for the
/// lazy-encoding probes.
pub struct CountingFeatures {
    pub inner: RawFeatures,
    pub counts: std::cell::RefCell<[usize; 3]>,
}

impl CountingFeatures {
    pub fn new(seed: u64) -> Self {
        CountingFeatures {
            inner: RawFeatures::random(seed),
            counts: std::cell::RefCell::new([0; 3]),
        }
    }
}

impl FeatureProvider for CountingFeatures {
    fn raw(&self, m: Modality) -> &[f64] {
        self.counts.borrow_mut()[m.index()] += 1;
        self.inner.raw(m)
    }
}
