use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Seed for the UNK row so every run starts from the same vector.
const UNK_SEED: u64 = 0x554e4b;
const UNK_INIT_RANGE: f64 = 0.1;

/// Token index plus embedding matrix. Row 0 is PAD (zeros), row 1 is UNK.
#[derive(Clone, Debug)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    embeddings: Tensor,
}

impl Vocab {
    /// Reads a GloVe text file of `token v1 … vD` lines.
    pub fn load_glove(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        Self::load_glove_filtered(path, dim, None)
    }

    /// Like [`Vocab::load_glove`], keeping only tokens in `keep`.
    pub fn load_glove_filtered(path: impl AsRef<Path>, dim: usize, keep: Option<&HashSet<String>>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        Self::parse_glove(reader, dim, &path.display().to_string(), keep)
    }

    pub fn parse_glove(
        reader: impl BufRead,
        dim: usize,
        source_name: &str,
        keep: Option<&HashSet<String>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let mut tokens = Vec::new();
        let mut values = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::parse(source_name, Some(lineno + 1), e.to_string()))?;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let row: Vec<&str> = fields.collect();
            if row.len() != dim {
                return Err(Error::parse(
                    source_name,
                    Some(lineno + 1),
                    format!("expected {dim} values after token {token:?}, found {}", row.len()),
                ));
            }
            if keep.is_some_and(|k| !k.contains(token)) || seen.contains(token) {
                continue;
            }
            for v in row {
                let x: f64 = v.parse().map_err(|_| {
                    Error::parse(source_name, Some(lineno + 1), format!("invalid number {v:?}"))
                })?;
                if !x.is_finite() {
                    return Err(Error::parse(source_name, Some(lineno + 1), format!("non-finite value {v:?}")));
                }
                values.push(x);
            }
            seen.insert(token.to_string());
            tokens.push(token.to_string());
        }
        Ok(Self::assemble(tokens, values, dim))
    }

    /// Vocabulary over `tokens` with uniform(±0.1) vectors from `seed`; used
    /// when no pretrained file is available.
    pub fn random(tokens: impl IntoIterator<Item = String>, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let tokens: Vec<String> = tokens
            .into_iter()
            .filter(|t| t != PAD_TOKEN && t != UNK_TOKEN && seen.insert(t.clone()))
            .collect();
        let values = Tensor::uniform(&[tokens.len().max(1), dim], UNK_INIT_RANGE, &mut rng).into_data();
        let values = values[..tokens.len() * dim].to_vec();
        Self::assemble(tokens, values, dim)
    }

    fn assemble(file_tokens: Vec<String>, file_values: Vec<f64>, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(UNK_SEED);
        let unk = Tensor::uniform(&[dim], UNK_INIT_RANGE, &mut rng);
        let mut data = vec![0.0; dim];
        data.extend_from_slice(unk.data());
        data.extend(file_values);
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(file_tokens);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let embeddings = Tensor::new(vec![tokens.len(), dim], data).expect("rows match tokens");
        Vocab {
            index,
            tokens,
            embeddings,
        }
    }

    /// Rebuilds a vocabulary from stored parts (checkpoints).
    pub fn from_parts(tokens: Vec<String>, embeddings: Tensor) -> Result<Self> {
        let (rows, _) = embeddings.dims2("vocab")?;
        if rows != tokens.len() || tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Data(format!(
                "vocabulary of {} tokens does not fit a {rows}-row embedding matrix with PAD/UNK first",
                tokens.len()
            )));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Vocab {
            index,
            tokens,
            embeddings,
        })
    }

    /// Index of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.last_dim()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }
}
