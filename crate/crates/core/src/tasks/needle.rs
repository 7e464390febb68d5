use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{regions_from_labels, LabeledExample, VocabPartition};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NeedleMode {
    SingleKey,
    /// The queried key plus `distractors` keys that share all but its last symbol.
    MultiKey { distractors: usize },
    /// The queried key appears `values` times; every value must be returned in order.
    MultiValue { values: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeedleSpec {
    pub seq_len: usize,
    pub n_pairs: usize,
    pub n_queries: usize,
    pub key_len: usize,
    pub mode: NeedleMode,
    pub partition: VocabPartition,
    pub n_examples: usize,
    pub seed: u64,
}

impl Default for NeedleSpec {
    fn default() -> Self {
        NeedleSpec {
            seq_len: 64,
            n_pairs: 4,
            n_queries: 1,
            key_len: 1,
            mode: NeedleMode::SingleKey,
            partition: VocabPartition::for_vocab(64).expect("64 is partitionable"),
            n_examples: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PairRole {
    Target,
    Distractor,
    Other,
}

struct Pair {
    key: Vec<usize>,
    value: usize,
    role: PairRole,
}

impl NeedleSpec {
    fn pairs_per_query(&self) -> usize {
        match self.mode {
            NeedleMode::SingleKey => 1,
            NeedleMode::MultiKey { distractors } => 1 + distractors,
            NeedleMode::MultiValue { values } => values,
        }
    }

    fn answers_per_query(&self) -> usize {
        match self.mode {
            NeedleMode::MultiValue { values } => values,
            _ => 1,
        }
    }

    /// Number of filler tokens each example will contain.
    pub fn filler_len(&self) -> Result<usize> {
        let used = 1
            + self.n_pairs * (self.key_len + 1)
            + 1
            + self.n_queries * (1 + self.key_len + self.answers_per_query());
        self.seq_len.checked_sub(used).ok_or_else(|| {
            Error::Config(format!(
                "{} pairs and {} queries need {used} tokens but seq_len is {}",
                self.n_pairs, self.n_queries, self.seq_len
            ))
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        if self.key_len == 0 || self.n_queries == 0 {
            return Err(Error::Config("key_len and n_queries must be positive".into()));
        }
        let n_keys = self.partition.keys.len();
        let n_values = self.partition.values.len();
        match self.mode {
            NeedleMode::MultiKey { distractors } => {
                if self.key_len < 2 {
                    return Err(Error::Config("multi-key needles need key_len >= 2".into()));
                }
                if distractors + 1 > n_keys {
                    return Err(Error::Config(format!(
                        "{distractors} distractors need more than {n_keys} key symbols"
                    )));
                }
                let prefixes = (n_keys as f64).powi(self.key_len as i32 - 1);
                if self.n_queries as f64 > prefixes {
                    return Err(Error::Config("not enough distinct key prefixes".into()));
                }
            }
            NeedleMode::MultiValue { values } => {
                if values == 0 || values > n_values {
                    return Err(Error::Config(format!(
                        "multi-value count {values} must be in 1..={n_values}"
                    )));
                }
            }
            NeedleMode::SingleKey => {}
        }
        let required = self.n_queries * self.pairs_per_query();
        if self.n_pairs < required {
            return Err(Error::Config(format!(
                "n_pairs {} is below the {required} pairs the queries need",
                self.n_pairs
            )));
        }
        let distinct_keys = self.n_pairs - match self.mode {
            NeedleMode::MultiValue { values } => self.n_queries * (values - 1),
            _ => 0,
        };
        if distinct_keys as f64 > (n_keys as f64).powi(self.key_len as i32) {
            return Err(Error::Config("not enough distinct keys for n_pairs".into()));
        }
        let filler = self.filler_len()?;
        if filler > 0 && self.partition.filler.is_empty() {
            return Err(Error::Config("filler needed but the filler range is empty".into()));
        }
        Ok(())
    }
}

fn random_key(rng: &mut ChaCha8Rng, spec: &NeedleSpec) -> Vec<usize> {
    (0..spec.key_len).map(|_| rng.random_range(spec.partition.keys.clone())).collect()
}

fn generate_one(spec: &NeedleSpec, rng: &mut ChaCha8Rng) -> LabeledExample {
    let p = &spec.partition;
    let mut pairs: Vec<Pair> = Vec::with_capacity(spec.n_pairs);
    let mut used_keys: Vec<Vec<usize>> = Vec::new();
    let mut targets: Vec<Vec<usize>> = Vec::new();

    for _ in 0..spec.n_queries {
        let key = loop {
            let k = random_key(rng, spec);
            let prefix_clash = matches!(spec.mode, NeedleMode::MultiKey { .. })
                && targets.iter().any(|t| t[..spec.key_len - 1] == k[..spec.key_len - 1]);
            if !used_keys.contains(&k) && !prefix_clash {
                break k;
            }
        };
        match spec.mode {
            NeedleMode::SingleKey => {
                let value = rng.random_range(p.values.clone());
                pairs.push(Pair { key: key.clone(), value, role: PairRole::Target });
                used_keys.push(key.clone());
            }
            NeedleMode::MultiKey { distractors } => {
                let value = rng.random_range(p.values.clone());
                pairs.push(Pair { key: key.clone(), value, role: PairRole::Target });
                used_keys.push(key.clone());
                let last = key[spec.key_len - 1];
                let mut others: Vec<usize> = p.keys.clone().filter(|&s| s != last).collect();
                others.shuffle(rng);
                for s in others.into_iter().take(distractors) {
                    let mut dk = key.clone();
                    dk[spec.key_len - 1] = s;
                    let value = rng.random_range(p.values.clone());
                    used_keys.push(dk.clone());
                    pairs.push(Pair { key: dk, value, role: PairRole::Distractor });
                }
            }
            NeedleMode::MultiValue { values } => {
                let mut pool: Vec<usize> = p.values.clone().collect();
                pool.shuffle(rng);
                for value in pool.into_iter().take(values) {
                    pairs.push(Pair { key: key.clone(), value, role: PairRole::Target });
                }
                used_keys.push(key.clone());
            }
        }
        targets.push(key);
    }
    while pairs.len() < spec.n_pairs {
        let key = random_key(rng, spec);
        if used_keys.contains(&key) {
            continue;
        }
        let value = rng.random_range(p.values.clone());
        used_keys.push(key.clone());
        pairs.push(Pair { key, value, role: PairRole::Other });
    }
    pairs.shuffle(rng);

    let filler = spec.filler_len().expect("validated");
    let mut gaps = vec![0usize; pairs.len() + 1];
    for _ in 0..filler {
        let slot = rng.random_range(0..gaps.len());
        gaps[slot] += 1;
    }

    let mut tokens = vec![p.bos];
    let mut labels = vec!["bos"];
    let mut push_filler = |n: usize, tokens: &mut Vec<usize>, labels: &mut Vec<&'static str>| {
        for _ in 0..n {
            tokens.push(rng.random_range(p.filler.clone()));
            labels.push("context");
        }
    };
    for (i, pair) in pairs.iter().enumerate() {
        push_filler(gaps[i], &mut tokens, &mut labels);
        let label = if pair.role == PairRole::Target { "needle" } else { "context" };
        for &k in &pair.key {
            tokens.push(k);
            labels.push(label);
        }
        tokens.push(pair.value);
        labels.push(label);
    }
    push_filler(gaps[pairs.len()], &mut tokens, &mut labels);
    tokens.push(p.sep);
    labels.push("query");

    let mut answer = Vec::new();
    for key in &targets {
        tokens.push(p.query);
        labels.push("query");
        for &k in key {
            tokens.push(k);
            labels.push("query");
        }
        for pair in pairs.iter().filter(|pr| pr.role == PairRole::Target && &pr.key == key) {
            tokens.push(pair.value);
            labels.push("answer");
            answer.push(pair.value);
        }
    }
    let loss_mask = labels.iter().map(|&l| l == "answer").collect();
    LabeledExample { tokens, loss_mask, answer, regions: regions_from_labels(&labels) }
}

/// Deterministic needle-in-a-haystack examples.
///
/// Layout: `BOS, context (filler with key→value pairs), SEP, then per query
/// QUERY key answer...`.
pub fn gen_needle(spec: &NeedleSpec) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.n_examples).map(|_| generate_one(spec, &mut rng)).collect())
}

/// Recovers the expected answer from the token sequence alone: every query
/// key is looked up among the context pairs, in order of appearance.
pub fn parse_needle_answer(tokens: &[usize], partition: &VocabPartition, key_len: usize) -> Result<Vec<usize>> {
    let sep = tokens
        .iter()
        .position(|&t| t == partition.sep)
        .ok_or_else(|| Error::Input("no separator token".into()))?;
    let context = &tokens[1..sep];
    let mut pairs: Vec<(&[usize], usize)> = Vec::new();
    let mut i = 0;
    while i + key_len < context.len() {
        let key = &context[i..i + key_len];
        if key.iter().all(|&t| partition.is_key(t)) && partition.is_value(context[i + key_len]) {
            pairs.push((key, context[i + key_len]));
            i += key_len + 1;
        } else {
            i += 1;
        }
    }
    let mut answer = Vec::new();
    let mut pos = sep + 1;
    while pos < tokens.len() {
        if tokens[pos] != partition.query || pos + key_len >= tokens.len() {
            return Err(Error::Input(format!("malformed query at position {pos}")));
        }
        let key = &tokens[pos + 1..pos + 1 + key_len];
        let values: Vec<usize> = pairs.iter().filter(|(k, _)| *k == key).map(|&(_, v)| v).collect();
        if values.is_empty() {
            return Err(Error::Input(format!("query key {key:?} is not in the context")));
        }
        pos += 1 + key_len + values.len();
        answer.extend(values);
    }
    Ok(answer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::check_partition;

    fn spec(mode: NeedleMode, key_len: usize, n_pairs: usize) -> NeedleSpec {
        NeedleSpec { mode, key_len, n_pairs, n_examples: 50, seed: 7, ..NeedleSpec::default() }
    }

    #[test]
    fn single_pair_without_filler_answers_the_only_value() {
        let s = NeedleSpec { seq_len: 7, n_pairs: 1, n_examples: 10, ..NeedleSpec::default() };
        assert_eq!(s.filler_len().unwrap(), 0);
        for ex in gen_needle(&s).unwrap() {
            assert_eq!(ex.tokens.len(), 7);
            assert_eq!(ex.answer, vec![ex.tokens[2]]);
            assert_eq!(ex.tokens[1], ex.tokens[5]);
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let s = spec(NeedleMode::MultiKey { distractors: 2 }, 2, 6);
        assert_eq!(gen_needle(&s).unwrap(), gen_needle(&s).unwrap());
        let other = NeedleSpec { seed: 8, ..s.clone() };
        assert_ne!(gen_needle(&s).unwrap(), gen_needle(&other).unwrap());
    }

    #[test]
    fn multi_value_answers_are_all_in_context() {
        let s = spec(NeedleMode::MultiValue { values: 3 }, 1, 5);
        for ex in gen_needle(&s).unwrap() {
            assert_eq!(ex.answer.len(), 3);
            let sep = ex.tokens.iter().position(|&t| t == s.partition.sep).unwrap();
            let key = ex.tokens[sep + 2];
            for v in &ex.answer {
                let found = (1..sep - 1).any(|i| ex.tokens[i] == key && ex.tokens[i + 1] == *v);
                assert!(found, "value {v} not paired with key {key} in context");
            }
        }
    }

    #[test]
    fn every_mode_reparses_to_its_answer() {
        let cases = [
            spec(NeedleMode::SingleKey, 1, 4),
            spec(NeedleMode::SingleKey, 2, 4),
            spec(NeedleMode::MultiKey { distractors: 3 }, 2, 6),
            spec(NeedleMode::MultiValue { values: 2 }, 1, 4),
            NeedleSpec { n_queries: 2, ..spec(NeedleMode::SingleKey, 1, 4) },
        ];
        for s in cases {
            for ex in gen_needle(&s).unwrap() {
                ex.validate().unwrap();
                check_partition(&ex.regions, ex.tokens.len()).unwrap();
                assert_eq!(ex.tokens.len(), s.seq_len);
                assert_eq!(parse_needle_answer(&ex.tokens, &s.partition, s.key_len).unwrap(), ex.answer);
            }
        }
    }

    #[test]
    fn multi_key_distractors_differ_only_in_last_symbol() {
        let s = spec(NeedleMode::MultiKey { distractors: 3 }, 3, 4);
        for ex in gen_needle(&s).unwrap() {
            let sep = ex.tokens.iter().position(|&t| t == s.partition.sep).unwrap();
            let key = &ex.tokens[sep + 2..sep + 5];
            let near = (1..sep - 3)
                .filter(|&i| ex.tokens[i..i + 2] == key[..2] && ex.tokens[i + 2] != key[2])
                .filter(|&i| s.partition.is_key(ex.tokens[i + 2]))
                .count();
            assert!(near >= 3);
        }
    }

    #[test]
    fn needle_region_holds_the_target_pair() {
        let s = spec(NeedleMode::SingleKey, 1, 4);
        for ex in gen_needle(&s).unwrap() {
            let needle = ex.region("needle").unwrap();
            assert_eq!(needle.len(), 2);
            let (a, _) = needle.spans[0];
            assert_eq!(ex.tokens[a + 1], ex.answer[0]);
        }
    }

    #[test]
    fn infeasible_specs_are_config_errors() {
        let too_long = NeedleSpec { seq_len: 10, n_pairs: 8, ..NeedleSpec::default() };
        assert!(matches!(gen_needle(&too_long), Err(Error::Config(_))));
        let short_key = spec(NeedleMode::MultiKey { distractors: 1 }, 1, 4);
        assert!(matches!(gen_needle(&short_key), Err(Error::Config(_))));
        let few_pairs = spec(NeedleMode::MultiValue { values: 3 }, 1, 2);
        assert!(matches!(gen_needle(&few_pairs), Err(Error::Config(_))));
    }
}
