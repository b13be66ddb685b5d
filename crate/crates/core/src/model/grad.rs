use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;

use super::{BlockParam, Model, ParamId, Scalar};

/// Parameters that receive gradients in a backward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainableSet(BTreeSet<ParamId>);

impl TrainableSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn only(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Self(ids.into_iter().collect())
    }

    pub fn insert(&mut self, id: ParamId) {
        self.0.insert(id);
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.0.contains(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.0.iter().copied()
    }

    pub fn intersection(&self, other: &TrainableSet) -> Vec<ParamId> {
        self.0.intersection(&other.0).copied().collect()
    }

    /// Every parameter of the given blocks.
    pub fn blocks(layers: impl IntoIterator<Item = usize>) -> Self {
        Self(
            layers
                .into_iter()
                .flat_map(|i| BlockParam::ALL.into_iter().map(move |p| ParamId::Block(i, p)))
                .collect(),
        )
    }

    /// Every adapter matrix currently attached to `model`.
    pub fn adapters<F: Scalar>(model: &Model<F>) -> Self {
        Self(
            model
                .param_ids()
                .into_iter()
                .filter(|id| matches!(id, ParamId::Lora(..)))
                .collect(),
        )
    }

    /// Lowest block index whose backward pass is required, or `None` when the
    /// set only touches the final norm and head.
    pub(crate) fn deepest_layer(&self, n_layers: usize) -> Option<usize> {
        let mut deepest = None;
        for id in &self.0 {
            let layer = match id {
                ParamId::EmbedOriginal | ParamId::EmbedExtension | ParamId::Position => Some(0),
                ParamId::Block(i, _) | ParamId::Lora(i, _, _) => Some(*i),
                _ => None,
            };
            if let Some(l) = layer.filter(|_| n_layers > 0) {
                deepest = Some(deepest.map_or(l, |d: usize| d.min(l)));
            }
        }
        deepest
    }

    pub(crate) fn needs_input(&self) -> bool {
        self.0
            .iter()
            .any(|id| matches!(id, ParamId::EmbedOriginal | ParamId::EmbedExtension | ParamId::Position))
    }
}

impl FromIterator<ParamId> for TrainableSet {
    fn from_iter<T: IntoIterator<Item = ParamId>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Gradients keyed by parameter; only trainable parameters appear.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F>(BTreeMap<ParamId, Array2<F>>);

impl<F> Default for Gradients<F> {
    fn default() -> Self {
        Self(BTreeMap::new())
    }
}

impl<F> FromIterator<(ParamId, Array2<F>)> for Gradients<F> {
    fn from_iter<I: IntoIterator<Item = (ParamId, Array2<F>)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: ParamId) -> Option<&Array2<F>> {
        self.0.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.0.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.0.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<F>)> {
        self.0.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Array2<F> {
        self.0.entry(id).or_insert_with(|| Array2::zeros(shape))
    }

    pub(crate) fn insert(&mut self, id: ParamId, g: Array2<F>) {
        self.0.insert(id, g);
    }

    /// Element-wise sum; used for gradient accumulation.
    pub fn accumulate(&mut self, other: &Gradients<F>) {
        for (id, g) in &other.0 {
            match self.0.get_mut(id) {
                Some(acc) => *acc += g,
                None => {
                    self.0.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for g in self.0.values_mut() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn max_abs(&self) -> F {
        self.0
            .values()
            .flat_map(|g| g.iter())
            .fold(F::zero(), |m, &x| m.max(x.abs()))
    }
}
