//! Prototype classifier: one mean embedding per class, cosine scoring.

use std::collections::BTreeMap;

use crate::tensor::{cosine_similarity, Tensor};
use crate::{LgspError, Result};

pub type ClassId = usize;

/// Class-mean prototypes in registration order.
#[derive(Debug, Clone, Default)]
pub struct PrototypeBank {
    prototypes: BTreeMap<ClassId, Tensor>,
}

impl PrototypeBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.prototypes.keys().cloned().collect()
    }

    pub fn contains(&self, class: ClassId) -> bool {
        self.prototypes.contains_key(&class)
    }

    pub fn prototype(&self, class: ClassId) -> Option<&Tensor> {
        self.prototypes.get(&class)
    }

    pub fn prototype_mut(&mut self, class: ClassId) -> Option<&mut Tensor> {
        self.prototypes.get_mut(&class)
    }

    /// Inserts or overwrites a prototype (used by post-training refits and
    /// checkpoint loading).
    pub fn set_prototype(&mut self, class: ClassId, prototype: Tensor) {
        self.prototypes.insert(class, prototype);
    }

    /// Mutable iteration in ascending class order.
    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&ClassId, &mut Tensor)> {
        self.prototypes.iter_mut()
    }

    /// Fits mean prototypes for the classes present in `features`. Classes
    /// already in the bank must not reappear; their prototypes stay intact.
    pub fn fit_prototypes(&mut self, features: &[(Tensor, ClassId)]) -> Result<()> {
        if features.is_empty() {
            return Err(LgspError::EmptyInput("prototype fitting set".into()));
        }
        let mut sums: BTreeMap<ClassId, (Tensor, usize)> = BTreeMap::new();
        for (f, class) in features {
            if self.prototypes.contains_key(class) {
                return Err(LgspError::Protocol(format!(
                    "class {class} already has a prototype"
                )));
            }
            match sums.get_mut(class) {
                Some((acc, count)) => {
                    *acc = acc.add(f)?;
                    *count += 1;
                }
                None => {
                    sums.insert(*class, (f.clone(), 1));
                }
            }
        }
        for (class, (sum, count)) in sums {
            self.prototypes
                .insert(class, sum.scale(1.0 / count as f64));
        }
        Ok(())
    }

    /// Cosine scores against every prototype, in ascending class-id order.
    pub fn scores(&self, feature: &[f64]) -> Result<Vec<(ClassId, f64)>> {
        if self.prototypes.is_empty() {
            return Err(LgspError::EmptyInput("prototype bank".into()));
        }
        self.prototypes
            .iter()
            .map(|(&c, p)| Ok((c, cosine_similarity(feature, p.data())?)))
            .collect()
    }

    /// Predicted class (ties break to the lowest id) plus the full score
    /// vector for breakdown analyses.
    pub fn classify(&self, feature: &[f64]) -> Result<(ClassId, Vec<(ClassId, f64)>)> {
        let scores = self.scores(feature)?;
        let mut best = scores[0];
        for &(c, s) in &scores[1..] {
            if s > best.1 {
                best = (c, s);
            }
        }
        Ok((best.0, scores))
    }

    /// Flattened prototype matrix [n_classes, d] with its class order; used
    /// to expose prototypes as one trainable tensor.
    pub fn as_matrix(&self) -> Result<(Vec<ClassId>, Tensor)> {
        if self.prototypes.is_empty() {
            return Err(LgspError::EmptyInput("prototype bank".into()));
        }
        let classes: Vec<ClassId> = self.prototypes.keys().cloned().collect();
        let d = self.prototypes[&classes[0]].numel();
        let mut data = Vec::with_capacity(classes.len() * d);
        for c in &classes {
            data.extend_from_slice(self.prototypes[c].data());
        }
        Ok((classes.clone(), Tensor::new(vec![classes.len(), d], data)?))
    }

    /// Writes back a [n_classes, d] matrix produced by [`Self::as_matrix`].
    pub fn load_matrix(&mut self, classes: &[ClassId], matrix: &Tensor) -> Result<()> {
        let d = matrix.shape()[1];
        for (i, c) in classes.iter().enumerate() {
            let row = Tensor::new(
                vec![d],
                matrix.data()[i * d..(i + 1) * d].to_vec(),
            )?;
            self.prototypes.insert(*c, row);
        }
        Ok(())
    }
}
