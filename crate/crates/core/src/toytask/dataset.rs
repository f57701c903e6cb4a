use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradstore::{SampleId, Split};
use crate::seed;

/// Special token prepended to every sequence.
pub const CLS_TOKEN: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenDataset {
    pub name: String,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

/// Parameters of the synthetic token-classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub name: String,
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Probability that a content token is drawn from the label's own token
    /// pool rather than the whole vocabulary. 0 makes classes indistinguishable.
    pub class_token_bias: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub sizes: SplitSizes,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            name: "synthetic".into(),
            vocab_size: 50,
            num_classes: 2,
            class_token_bias: 0.3,
            min_len: 8,
            max_len: 16,
            sizes: SplitSizes {
                train: 1000,
                validation: 200,
                test: 200,
            },
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        // CLS plus at least one content token per class.
        if self.vocab_size <= self.num_classes {
            return Err(Error::invalid(format!(
                "vocab_size {} must exceed num_classes {}",
                self.vocab_size, self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.class_token_bias) {
            return Err(Error::invalid("class_token_bias must lie in [0, 1]"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid("need 1 <= min_len <= max_len"));
        }
        let s = self.sizes;
        if s.train == 0 || s.validation == 0 || s.test == 0 {
            return Err(Error::invalid("split sizes must be positive"));
        }
        Ok(())
    }
}

/// Content token `t` (1-based) belongs to class `(t - 1) % num_classes`.
pub fn token_class(token: u32, num_classes: usize) -> Option<usize> {
    (token != CLS_TOKEN).then(|| (token as usize - 1) % num_classes)
}

/// Builds a deterministic synthetic dataset. Ids are unique across splits:
/// train first, then validation, then test.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<TokenDataset> {
    spec.validate()?;
    let mut rng = seed::rng(seed, "dataset");
    let content: Vec<u32> = (1..spec.vocab_size as u32).collect();
    let pools: Vec<Vec<u32>> = (0..spec.num_classes)
        .map(|c| {
            content
                .iter()
                .copied()
                .filter(|&t| token_class(t, spec.num_classes) == Some(c))
                .collect()
        })
        .collect();

    let mut next_id: SampleId = 0;
    let mut draw_split = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let label = rng.random_range(0..spec.num_classes);
                let len = rng.random_range(spec.min_len..=spec.max_len);
                let mut tokens = Vec::with_capacity(len + 1);
                tokens.push(CLS_TOKEN);
                for _ in 0..len {
                    let pool = if rng.random_bool(spec.class_token_bias) {
                        &pools[label]
                    } else {
                        &content
                    };
                    tokens.push(pool[rng.random_range(0..pool.len())]);
                }
                let id = next_id;
                next_id += 1;
                Sample { id, tokens, label }
            })
            .collect()
    };
    let train = draw_split(spec.sizes.train, &mut rng);
    let validation = draw_split(spec.sizes.validation, &mut rng);
    let test = draw_split(spec.sizes.test, &mut rng);
    Ok(TokenDataset {
        name: spec.name.clone(),
        vocab_size: spec.vocab_size,
        num_classes: spec.num_classes,
        train,
        validation,
        test,
    })
}

impl TokenDataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    /// Sorted union of tokens over every split; the compressed embedding rows.
    pub fn present_tokens(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = [&self.train, &self.validation, &self.test]
            .into_iter()
            .flat_map(|s| s.iter().flat_map(|x| x.tokens.iter().copied()))
            .collect();
        set.into_iter().collect()
    }

    pub fn validate(&self) -> Result<()> {
        for s in self.train.iter().chain(&self.validation).chain(&self.test) {
            if s.tokens.is_empty() {
                return Err(Error::invalid(format!("sample {} has no tokens", s.id)));
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: self.vocab_size,
                });
            }
            if s.label >= self.num_classes {
                return Err(Error::invalid(format!("sample {} label {} out of range", s.id, s.label)));
            }
        }
        Ok(())
    }

    /// Copy of this dataset whose training split excludes `removed`.
    pub fn without_train(&self, removed: &BTreeSet<SampleId>) -> TokenDataset {
        TokenDataset {
            train: self.train.iter().filter(|s| !removed.contains(&s.id)).cloned().collect(),
            ..self.clone()
        }
    }
}

#[derive(Serialize)]
struct RecordRef<'a> {
    id: SampleId,
    split: Split,
    tokens: &'a [u32],
    label: usize,
}

#[derive(Deserialize)]
struct Record {
    id: SampleId,
    split: Split,
    tokens: Vec<u32>,
    label: usize,
}

/// One JSON object per line: `{"id", "split", "tokens", "label"}`.
pub fn write_jsonl(dataset: &TokenDataset, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for split in [Split::Train, Split::Validation, Split::Test] {
        for s in dataset.split(split) {
            let rec = RecordRef {
                id: s.id,
                split,
                tokens: &s.tokens,
                label: s.label,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path, name: &str, vocab_size: usize, num_classes: usize) -> Result<TokenDataset> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut ds = TokenDataset {
        name: name.to_string(),
        vocab_size,
        num_classes,
        train: vec![],
        validation: vec![],
        test: vec![],
    };
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let sample = Sample {
            id: rec.id,
            tokens: rec.tokens,
            label: rec.label,
        };
        match rec.split {
            Split::Train => ds.train.push(sample),
            Split::Validation => ds.validation.push(sample),
            Split::Test => ds.test.push(sample),
        }
    }
    ds.validate()?;
    Ok(ds)
}

/// Ground truth of injected label flips.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseMask {
    pub flipped: BTreeSet<SampleId>,
    pub original_labels: BTreeMap<SampleId, usize>,
}

impl NoiseMask {
    pub fn len(&self) -> usize {
        self.flipped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flipped.is_empty()
    }

    pub fn contains(&self, id: SampleId) -> bool {
        self.flipped.contains(&id)
    }

    /// Undoes the flips on a dataset's training split.
    pub fn restore(&self, dataset: &TokenDataset) -> TokenDataset {
        let mut clean = dataset.clone();
        for s in &mut clean.train {
            if let Some(&orig) = self.original_labels.get(&s.id) {
                s.label = orig;
            }
        }
        clean
    }
}

/// Flips exactly `round(rate * N_train)` training labels, each to a class
/// drawn uniformly from the other classes.
pub fn inject_label_noise(dataset: &TokenDataset, rate: f64, seed: u64) -> Result<(TokenDataset, NoiseMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("noise rate {rate} outside [0, 1)")));
    }
    let n = dataset.train.len();
    let count = (rate * n as f64).round() as usize;
    let mut rng = seed::rng(seed, "noise");
    let mut picked = index::sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();

    let mut noisy = dataset.clone();
    let mut mask = NoiseMask::default();
    for i in picked {
        let sample = &mut noisy.train[i];
        let original = sample.label;
        let shift = rng.random_range(1..dataset.num_classes);
        sample.label = (original + shift) % dataset.num_classes;
        mask.flipped.insert(sample.id);
        mask.original_labels.insert(sample.id, original);
    }
    Ok((noisy, mask))
}
