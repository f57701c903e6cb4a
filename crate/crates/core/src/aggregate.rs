//! Collapsing an influence tensor into one score per training sample.
//!
//! `Mean` averages over every validation sample. `Rank` and `Vote` only use
//! the validation samples the selected checkpoint predicts correctly and
//! depend on each (validation, group) slice through its ordering alone.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradstore::{GroupId, SampleId};
use crate::influence::InfluenceTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Aggregation {
    Mean,
    Rank,
    Vote,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Mean, Aggregation::Rank, Aggregation::Vote];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "Mean",
            Aggregation::Rank => "Rank",
            Aggregation::Vote => "Vote",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Aggregation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown aggregation {s:?}")))
    }
}

/// A single group, or every group of the tensor (`all`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GroupSelection {
    All,
    Single(GroupId),
}

impl GroupSelection {
    pub fn resolve(&self, tensor: &InfluenceTensor) -> Result<Vec<usize>> {
        match self {
            GroupSelection::All => Ok((0..tensor.num_groups()).collect()),
            GroupSelection::Single(g) => Ok(vec![tensor.group_index(g)?]),
        }
    }

    /// Groups whose gradients are needed to evaluate this selection.
    pub fn groups<'a>(&'a self, all: &'a [GroupId]) -> Vec<GroupId> {
        match self {
            GroupSelection::All => all.to_vec(),
            GroupSelection::Single(g) => vec![g.clone()],
        }
    }
}

impl fmt::Display for GroupSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupSelection::All => f.write_str("all"),
            GroupSelection::Single(g) => write!(f, "{g}"),
        }
    }
}

impl FromStr for GroupSelection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            Ok(GroupSelection::All)
        } else {
            Ok(GroupSelection::Single(GroupId::new(s)?))
        }
    }
}

impl TryFrom<String> for GroupSelection {
    type Error = Error;
    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<GroupSelection> for String {
    fn from(value: GroupSelection) -> Self {
        value.to_string()
    }
}

/// `true` for validation samples predicted correctly at the checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationMask(pub Vec<bool>);

impl ValidationMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

pub fn correct_prediction_mask(predictions: &[usize], labels: &[usize]) -> Result<ValidationMask> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    Ok(ValidationMask(predictions.iter().zip(labels).map(|(p, l)| p == l).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub method: String,
    pub aggregation: String,
    pub groups: String,
    pub scores: BTreeMap<SampleId, f64>,
}

impl ScoreTable {
    pub fn new(
        method: impl Into<String>,
        aggregation: impl Into<String>,
        groups: impl Into<String>,
        scores: BTreeMap<SampleId, f64>,
    ) -> Result<Self> {
        if scores.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score table".into()));
        }
        Ok(ScoreTable {
            method: method.into(),
            aggregation: aggregation.into(),
            groups: groups.into(),
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Ids sorted by ascending score, ties by ascending id.
    pub fn ascending(&self) -> Vec<SampleId> {
        let mut ids: Vec<(SampleId, f64)> = self.scores.iter().map(|(&k, &v)| (k, v)).collect();
        ids.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        ids.into_iter().map(|(id, _)| id).collect()
    }

    /// CSV with columns `sample_id, score, method, aggregation, groups`.
    pub fn write_csv<W: Write>(&self, writer: &mut csv::Writer<W>) -> Result<()> {
        for (id, score) in &self.scores {
            writer.serialize(CsvRow {
                sample_id: *id,
                score: *score,
                method: &self.method,
                aggregation: &self.aggregation,
                groups: &self.groups,
            })?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Vec<ScoreTable>> {
        let mut tables: Vec<ScoreTable> = Vec::new();
        let mut rdr = csv::Reader::from_reader(reader);
        for row in rdr.deserialize() {
            let row: OwnedCsvRow = row?;
            let same = tables
                .last()
                .is_some_and(|t| t.method == row.method && t.aggregation == row.aggregation && t.groups == row.groups);
            if !same {
                tables.push(ScoreTable::new(row.method, row.aggregation, row.groups, BTreeMap::new())?);
            }
            if !row.score.is_finite() {
                return Err(Error::NonFinite(format!("score of sample {}", row.sample_id)));
            }
            let table = tables.last_mut().expect("just pushed");
            if table.scores.insert(row.sample_id, row.score).is_some() {
                return Err(Error::Format(format!("duplicate sample {} in score table", row.sample_id)));
            }
        }
        Ok(tables)
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    sample_id: SampleId,
    score: f64,
    method: &'a str,
    aggregation: &'a str,
    groups: &'a str,
}

#[derive(Deserialize)]
struct OwnedCsvRow {
    sample_id: SampleId,
    score: f64,
    method: String,
    aggregation: String,
    groups: String,
}

/// For each entry, the number of entries strictly smaller than it.
pub fn strict_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    let mut run_start = 0;
    for pos in 0..order.len() {
        if pos > 0 && values[order[pos]] != values[order[pos - 1]] {
            run_start = pos;
        }
        ranks[order[pos]] = run_start;
    }
    ranks
}

fn table(tensor: &InfluenceTensor, aggregation: Aggregation, groups: &GroupSelection, scores: Vec<f64>) -> Result<ScoreTable> {
    ScoreTable::new(
        tensor.method.name(),
        aggregation.name(),
        groups.to_string(),
        tensor.train_samples.iter().copied().zip(scores).collect(),
    )
}

/// Average over all validation samples of the summed per-group influence.
pub fn aggregate_mean(tensor: &InfluenceTensor, groups: &GroupSelection) -> Result<ScoreTable> {
    let gs = groups.resolve(tensor)?;
    let k = tensor.num_validation();
    if k == 0 {
        return Err(Error::Empty("validation set".into()));
    }
    let scores = (0..tensor.num_train())
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..k {
                for &g in &gs {
                    acc += tensor.get(i, j, g);
                }
            }
            acc / k as f64
        })
        .collect();
    table(tensor, Aggregation::Mean, groups, scores)
}

fn check_mask(tensor: &InfluenceTensor, mask: &ValidationMask) -> Result<()> {
    if mask.len() != tensor.num_validation() {
        return Err(Error::DimensionMismatch {
            expected: tensor.num_validation(),
            actual: mask.len(),
        });
    }
    if mask.count() == 0 {
        return Err(Error::Empty("no correctly predicted validation samples".into()));
    }
    Ok(())
}

/// Calls `f(train_index, rank)` for every masked (validation, group) slice.
fn for_each_rank(tensor: &InfluenceTensor, gs: &[usize], mask: &ValidationMask, mut f: impl FnMut(usize, usize)) {
    for (j, _) in mask.0.iter().enumerate().filter(|(_, &m)| m) {
        for &g in gs {
            for (i, r) in strict_ranks(&tensor.slice(j, g)).into_iter().enumerate() {
                f(i, r);
            }
        }
    }
}

/// Sum of per-slice strict ranks over masked validation samples and groups.
pub fn aggregate_rank(tensor: &InfluenceTensor, groups: &GroupSelection, mask: &ValidationMask) -> Result<ScoreTable> {
    check_mask(tensor, mask)?;
    let gs = groups.resolve(tensor)?;
    let mut scores = vec![0.0; tensor.num_train()];
    for_each_rank(tensor, &gs, mask, |i, r| scores[i] += r as f64);
    table(tensor, Aggregation::Rank, groups, scores)
}

/// Each masked slice hands `k` votes to its least influential sample,
/// `k - 1` to the next, and so on; the score is minus the votes received.
pub fn aggregate_vote(
    tensor: &InfluenceTensor,
    groups: &GroupSelection,
    mask: &ValidationMask,
    k: usize,
) -> Result<ScoreTable> {
    if k == 0 {
        return Err(Error::invalid("vote k must be at least 1"));
    }
    check_mask(tensor, mask)?;
    let gs = groups.resolve(tensor)?;
    let mut scores = vec![0.0; tensor.num_train()];
    for_each_rank(tensor, &gs, mask, |i, r| scores[i] -= k.saturating_sub(r) as f64);
    table(tensor, Aggregation::Vote, groups, scores)
}

/// Dispatches on `aggregation`; `mask` and `vote_k` are ignored where unused.
pub fn aggregate(
    tensor: &InfluenceTensor,
    aggregation: Aggregation,
    groups: &GroupSelection,
    mask: &ValidationMask,
    vote_k: usize,
) -> Result<ScoreTable> {
    match aggregation {
        Aggregation::Mean => aggregate_mean(tensor, groups),
        Aggregation::Rank => aggregate_rank(tensor, groups, mask),
        Aggregation::Vote => aggregate_vote(tensor, groups, mask, vote_k),
    }
}
