use std::collections::BTreeMap;

use crate::synth::PartLabel;
use crate::tensor::Tensor;

/// What the Reference branch produced for one reference.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    /// Full token sequence `[n_l, token_dim]` entering each attention layer.
    /// Empty in semantic-only mode.
    pub layers: Vec<Tensor<f32>>,
    /// Strictly increasing indices of the tokens that survive the reference mask, per layer.
    pub kept: Vec<Vec<usize>>,
    /// `[semantic_token_count, semantic_dim]`.
    pub semantic: Tensor<f32>,
}

/// Reference features and semantic tokens, built once per request and read
/// by every region-focused attention layer. Immutable after construction.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureCache {
    pub(crate) entries: BTreeMap<PartLabel, CacheEntry>,
    pub(crate) text: Option<Tensor<f32>>,
}

impl FeatureCache {
    /// No references and no prompt: the unconditional input.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Whether this cache conditions on nothing at all.
    pub fn is_unconditional(&self) -> bool {
        self.entries.is_empty() && self.text.is_none()
    }

    /// Labels in canonical order.
    pub fn labels(&self) -> Vec<PartLabel> {
        self.entries.keys().copied().collect()
    }

    pub fn entry(&self, label: PartLabel) -> Option<&CacheEntry> {
        self.entries.get(&label)
    }

    pub fn entries(&self) -> impl Iterator<Item = (PartLabel, &CacheEntry)> {
        self.entries.iter().map(|(&l, e)| (l, e))
    }

    /// Prompt tokens, when a prompt was given and prompts are enabled.
    pub fn text(&self) -> Option<&Tensor<f32>> {
        self.text.as_ref()
    }

    /// All references' semantic tokens stacked in canonical order.
    pub fn image_tokens(&self) -> Option<Tensor<f32>> {
        let first = self.entries.values().next()?;
        let cols = first.semantic.cols();
        let data: Vec<f32> = self.entries.values().flat_map(|e| e.semantic.data().iter().copied()).collect();
        Some(Tensor::new([data.len() / cols, cols], data))
    }

    /// Copy without the prompt.
    pub fn without_text(&self) -> Self {
        FeatureCache { entries: self.entries.clone(), text: None }
    }
}
