use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{regions_from_labels, LabeledExample, VocabPartition};
use crate::error::{Error, Result};

/// Episodes of pattern→label demonstrations followed by one query pattern.
/// Both the patterns and the label assignment are redrawn per episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IclSpec {
    pub n_classes: usize,
    pub n_shots: usize,
    pub pattern_len: usize,
    pub seq_len: usize,
    pub partition: VocabPartition,
    pub n_examples: usize,
    pub seed: u64,
}

impl Default for IclSpec {
    fn default() -> Self {
        IclSpec {
            n_classes: 8,
            n_shots: 16,
            pattern_len: 2,
            seq_len: 64,
            partition: VocabPartition::for_vocab(64).expect("64 is partitionable"),
            n_examples: 1000,
            seed: 0,
        }
    }
}

impl IclSpec {
    pub fn example_len(&self) -> usize {
        1 + self.n_shots * (self.pattern_len + 1) + 2 + self.pattern_len + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        if self.n_classes == 0 || self.n_shots == 0 || self.pattern_len == 0 {
            return Err(Error::Config("n_classes, n_shots and pattern_len must be positive".into()));
        }
        if self.n_classes > self.partition.values.len() {
            return Err(Error::Config(format!(
                "{} classes exceed the {} label symbols",
                self.n_classes,
                self.partition.values.len()
            )));
        }
        let patterns = (self.partition.keys.len() as f64).powi(self.pattern_len as i32);
        if self.n_classes as f64 > patterns {
            return Err(Error::Config("not enough distinct patterns for n_classes".into()));
        }
        if self.example_len() > self.seq_len {
            return Err(Error::Config(format!(
                "{} shots need {} tokens but seq_len is {}",
                self.n_shots,
                self.example_len(),
                self.seq_len
            )));
        }
        Ok(())
    }
}

fn generate_one(spec: &IclSpec, rng: &mut ChaCha8Rng) -> LabeledExample {
    let p = &spec.partition;
    let mut patterns: Vec<Vec<usize>> = Vec::with_capacity(spec.n_classes);
    while patterns.len() < spec.n_classes {
        let pat: Vec<usize> = (0..spec.pattern_len).map(|_| rng.random_range(p.keys.clone())).collect();
        if !patterns.contains(&pat) {
            patterns.push(pat);
        }
    }
    let mut labels: Vec<usize> = p.values.clone().collect();
    labels.shuffle(rng);
    labels.truncate(spec.n_classes);

    let mut shots: Vec<usize> = Vec::with_capacity(spec.n_shots);
    if spec.n_shots >= spec.n_classes {
        shots.extend(0..spec.n_classes);
        shots.shuffle(rng);
    }
    while shots.len() < spec.n_shots {
        shots.push(rng.random_range(0..spec.n_classes));
    }
    let query_class = shots[rng.random_range(0..shots.len())];

    let mut tokens = vec![p.bos];
    let mut names = vec!["bos"];
    for &c in &shots {
        let name = if c == query_class { "needle" } else { "context" };
        tokens.extend(&patterns[c]);
        tokens.push(labels[c]);
        names.extend(std::iter::repeat_n(name, spec.pattern_len + 1));
    }
    tokens.extend([p.sep, p.query]);
    tokens.extend(&patterns[query_class]);
    names.extend(std::iter::repeat_n("query", spec.pattern_len + 2));
    tokens.push(labels[query_class]);
    names.push("answer");
    let loss_mask = names.iter().map(|&n| n == "answer").collect();
    LabeledExample {
        tokens,
        loss_mask,
        answer: vec![labels[query_class]],
        regions: regions_from_labels(&names),
    }
}

pub fn gen_icl_classification(spec: &IclSpec) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_examples).map(|_| generate_one(spec, &mut rng)).collect())
}

/// The label of the first demonstration whose pattern equals the query's.
pub fn parse_icl_answer(tokens: &[usize], partition: &VocabPartition, pattern_len: usize) -> Result<Vec<usize>> {
    let sep = tokens
        .iter()
        .position(|&t| t == partition.sep)
        .ok_or_else(|| Error::Input("no separator token".into()))?;
    let query = tokens
        .get(sep + 2..sep + 2 + pattern_len)
        .ok_or_else(|| Error::Input("truncated query".into()))?;
    tokens[1..sep]
        .chunks_exact(pattern_len + 1)
        .find(|shot| &shot[..pattern_len] == query)
        .map(|shot| vec![shot[pattern_len]])
        .ok_or_else(|| Error::Input("query pattern has no demonstration".into()))
}
