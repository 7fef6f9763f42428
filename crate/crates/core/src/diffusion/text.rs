use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

pub const TEXT_TABLE: &str = "text.table";

/// Toy prompt encoder: lowercase whitespace tokens, learned per-token rows,
/// mean pooling. Row 0 is the learned null embedding that the empty prompt
/// (and any prompt without known tokens) maps to.
#[derive(Clone, Debug)]
pub struct TextEmbedder {
    vocab: BTreeMap<String, usize>,
    dim: usize,
    pub store: ParamStore,
    table: ParamId,
}

pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(str::to_lowercase).collect()
}

impl TextEmbedder {
    /// Vocabulary from every token in `prompts`, sorted.
    pub fn from_prompts<'a>(
        prompts: impl IntoIterator<Item = &'a str>,
        dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut words: Vec<String> = prompts.into_iter().flat_map(tokenize).collect();
        words.sort();
        words.dedup();
        Self::with_vocab(&words, dim, rng)
    }

    pub fn with_vocab(words: &[String], dim: usize, rng: &mut Rng) -> Self {
        let vocab: BTreeMap<String, usize> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i + 1))
            .collect();
        let mut store = ParamStore::new();
        let table = store.add(TEXT_TABLE, Tensor::randn([vocab.len() + 1, dim], rng));
        Self {
            vocab,
            dim,
            store,
            table,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Vocabulary in row order (row i + 1 embeds word i).
    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<(&String, &usize)> = self.vocab.iter().collect();
        w.sort_by_key(|(_, &i)| i);
        w.into_iter().map(|(s, _)| s.clone()).collect()
    }

    /// Mixing weights over table rows for one prompt.
    pub fn pooling_row(&self, prompt: &str) -> Vec<f32> {
        let mut row = vec![0.0f32; self.vocab.len() + 1];
        let ids: Vec<usize> = tokenize(prompt)
            .iter()
            .filter_map(|t| self.vocab.get(t).copied())
            .collect();
        if ids.is_empty() {
            row[0] = 1.0;
        } else {
            let w = 1.0 / ids.len() as f32;
            for i in ids {
                row[i] += w;
            }
        }
        row
    }

    /// [batch, dim] prompt embeddings.
    pub fn encode(&self, tape: &Tape, prompts: &[String]) -> Result<Var> {
        if prompts.is_empty() {
            return Err(Error::InvalidArgument("no prompts to encode".into()));
        }
        let rows: Vec<f32> = prompts.iter().flat_map(|p| self.pooling_row(p)).collect();
        let pool = tape.constant(Tensor::new([prompts.len(), self.vocab.len() + 1], rows)?);
        let table = tape.param(&self.store, self.table);
        tape.matmul(&pool, &table)
    }

    pub fn null_row(&self) -> Vec<f32> {
        self.store.get(self.table).value.data()[..self.dim].to_vec()
    }
}
