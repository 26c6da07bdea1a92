use ndarray::{s, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{randn, Block, BlockCache, Head, HeadCache, Linear, Matrix};
use crate::error::{Error, Result};

/// Lower-cased alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// FNV-1a bucket of a token. Stable across platforms and runs.
pub fn token_bucket(token: &str, vocab_size: usize) -> usize {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in token.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    (hash % vocab_size as u64) as usize
}

/// Image tower: linear stem, residual blocks, normalized projection head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoder {
    pub stem: Linear,
    pub blocks: Vec<Block>,
    pub head: Head,
}

pub struct VisualCache {
    input: Matrix,
    blocks: Vec<BlockCache>,
    head: HeadCache,
}

impl VisualEncoder {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        input_dim: usize,
        width: usize,
        hidden: usize,
        depth: usize,
        embed_dim: usize,
    ) -> Self {
        let stem = Linear::new(rng, input_dim, width, 1.0);
        let blocks = (0..depth).map(|_| Block::new(rng, width, hidden)).collect();
        let head = Head::new(rng, width, embed_dim);
        Self { stem, blocks, head }
    }

    pub fn input_dim(&self) -> usize {
        self.stem.input_dim()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "visual input has {} columns, stem expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x);
        for block in &self.blocks {
            h = block.forward(&h);
        }
        Ok(self.head.forward(&h))
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, VisualCache)> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward_cached(&h);
            caches.push(cache);
            h = next;
        }
        let (z, head) = self.head.forward_cached(&h);
        Ok((
            z,
            VisualCache {
                input: x.clone(),
                blocks: caches,
                head,
            },
        ))
    }

    /// Backpropagates `dz` down to block `lowest` (the stem is reached only
    /// when `lowest == 0`). Gradients below `lowest` are left untouched.
    pub fn backward(&self, cache: &VisualCache, dz: &Matrix, lowest: usize, grad: &mut VisualEncoder) {
        let mut dh = self.head.backward(&cache.head, dz, &mut grad.head);
        for b in (lowest..self.blocks.len()).rev() {
            dh = self.blocks[b].backward(&cache.blocks[b], &dh, &mut grad.blocks[b]);
        }
        if lowest == 0 {
            self.stem.backward(&cache.input, &dh, &mut grad.stem);
        }
    }
}

/// Text tower: hashed bag-of-words embedding (mean pooled), residual blocks,
/// normalized projection head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
    pub head: Head,
}

pub struct TextCache {
    tokens: Vec<Vec<usize>>,
    blocks: Vec<BlockCache>,
    head: HeadCache,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        vocab_size: usize,
        width: usize,
        hidden: usize,
        depth: usize,
        embed_dim: usize,
    ) -> Self {
        let embedding = randn(rng, vocab_size, width, 1.0);
        let blocks = (0..depth).map(|_| Block::new(rng, width, hidden)).collect();
        let head = Head::new(rng, width, embed_dim);
        Self {
            embedding,
            blocks,
            head,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    fn token_ids<S: AsRef<str>>(&self, prompts: &[S]) -> Result<Vec<Vec<usize>>> {
        if prompts.is_empty() {
            return Err(Error::arg("empty prompt list"));
        }
        prompts
            .iter()
            .map(|p| {
                let ids: Vec<usize> = tokenize(p.as_ref())
                    .iter()
                    .map(|t| token_bucket(t, self.vocab_size()))
                    .collect();
                if ids.is_empty() {
                    Err(Error::arg(format!("prompt {:?} has no tokens", p.as_ref())))
                } else {
                    Ok(ids)
                }
            })
            .collect()
    }

    fn pool(&self, tokens: &[Vec<usize>]) -> Matrix {
        let width = self.embedding.ncols();
        let mut h = Matrix::zeros((tokens.len(), width));
        for (mut row, ids) in h.rows_mut().into_iter().zip(tokens) {
            for &id in ids {
                row += &self.embedding.row(id);
            }
            row /= ids.len() as f64;
        }
        h
    }

    pub fn forward<S: AsRef<str>>(&self, prompts: &[S]) -> Result<Matrix> {
        let tokens = self.token_ids(prompts)?;
        let mut h = self.pool(&tokens);
        for block in &self.blocks {
            h = block.forward(&h);
        }
        Ok(self.head.forward(&h))
    }

    pub fn forward_cached<S: AsRef<str>>(&self, prompts: &[S]) -> Result<(Matrix, TextCache)> {
        let tokens = self.token_ids(prompts)?;
        let mut h = self.pool(&tokens);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward_cached(&h);
            caches.push(cache);
            h = next;
        }
        let (z, head) = self.head.forward_cached(&h);
        Ok((
            z,
            TextCache {
                tokens,
                blocks: caches,
                head,
            },
        ))
    }

    pub fn backward(&self, cache: &TextCache, dz: &Matrix, lowest: usize, grad: &mut TextEncoder) {
        let mut dh = self.head.backward(&cache.head, dz, &mut grad.head);
        for b in (lowest..self.blocks.len()).rev() {
            dh = self.blocks[b].backward(&cache.blocks[b], &dh, &mut grad.blocks[b]);
        }
        if lowest == 0 {
            for (ids, drow) in cache.tokens.iter().zip(dh.axis_iter(Axis(0))) {
                let scale = 1.0 / ids.len() as f64;
                for &id in ids {
                    let mut target = grad.embedding.slice_mut(s![id, ..]);
                    target.scaled_add(scale, &drow);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_and_lowercases() {
        assert_eq!(
            tokenize("A photo of a Hot-Dog."),
            vec!["a", "photo", "of", "a", "hot", "dog"]
        );
        assert!(tokenize("  ,; ").is_empty());
    }

    #[test]
    fn bucket_is_stable() {
        assert_eq!(token_bucket("dog", 4096), token_bucket("dog", 4096));
        assert!(token_bucket("lemon", 17) < 17);
    }
}
