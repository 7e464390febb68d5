use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{parse_icl_answer, parse_needle_answer, LabeledExample, VocabPartition};
use crate::error::{Error, Result};
use crate::model::ToyModel;

/// Anything that can name the most likely token at given positions,
/// conditioning only on the tokens before each position.
pub trait Predictor {
    fn predict(&self, tokens: &[usize], positions: &[usize]) -> Result<Vec<usize>>;
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Predictor for ToyModel {
    fn predict(&self, tokens: &[usize], positions: &[usize]) -> Result<Vec<usize>> {
        let Some(&last) = positions.iter().max() else {
            return Ok(Vec::new());
        };
        if positions.contains(&0) {
            return Err(Error::Input("position 0 has no context to predict from".into()));
        }
        let logits = self.logits(&tokens[..last])?;
        Ok(positions.iter().map(|&p| argmax(logits.row(p - 1))).collect())
    }
}

/// Answers by re-parsing the example, as a perfect model would.
#[derive(Clone, Debug)]
pub enum LookupOracle {
    Needle { partition: VocabPartition, key_len: usize },
    Icl { partition: VocabPartition, pattern_len: usize },
}

impl Predictor for LookupOracle {
    fn predict(&self, tokens: &[usize], positions: &[usize]) -> Result<Vec<usize>> {
        let answer = match self {
            LookupOracle::Needle { partition, key_len } => parse_needle_answer(tokens, partition, *key_len)?,
            LookupOracle::Icl { partition, pattern_len } => parse_icl_answer(tokens, partition, *pattern_len)?,
        };
        if answer.len() != positions.len() {
            return Err(Error::Input(format!(
                "oracle found {} answers for {} positions",
                answer.len(),
                positions.len()
            )));
        }
        Ok(answer)
    }
}

/// Argmax of i.i.d. random logits, i.e. a uniformly random token.
pub struct UniformRandomPredictor {
    vocab_size: usize,
    rng: RefCell<ChaCha8Rng>,
}

impl UniformRandomPredictor {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        UniformRandomPredictor { vocab_size, rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)) }
    }
}

impl Predictor for UniformRandomPredictor {
    fn predict(&self, _tokens: &[usize], positions: &[usize]) -> Result<Vec<usize>> {
        let mut rng = self.rng.borrow_mut();
        Ok(positions.iter().map(|_| rng.random_range(0..self.vocab_size)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub index: usize,
    pub expected: Vec<usize>,
    pub predicted: Vec<usize>,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub correct: usize,
    pub evaluated: usize,
    /// Examples skipped because their answer span is empty.
    pub skipped_empty: usize,
    pub records: Vec<ExampleRecord>,
}

/// Exact-match accuracy over each example's full answer span, decoded by
/// per-slot argmax with the true prefix fed in.
pub fn evaluate_accuracy<P: Predictor + ?Sized>(predictor: &P, dataset: &[LabeledExample]) -> Result<AccuracyReport> {
    if dataset.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let mut records = Vec::with_capacity(dataset.len());
    let mut skipped_empty = 0;
    for (index, ex) in dataset.iter().enumerate() {
        let positions = ex.answer_positions();
        if positions.is_empty() {
            skipped_empty += 1;
            continue;
        }
        let predicted = predictor.predict(&ex.tokens, &positions)?;
        let correct = predicted == ex.answer;
        records.push(ExampleRecord { index, expected: ex.answer.clone(), predicted, correct });
    }
    let evaluated = records.len();
    let correct = records.iter().filter(|r| r.correct).count();
    let accuracy = if evaluated == 0 { 0.0 } else { correct as f64 / evaluated as f64 };
    Ok(AccuracyReport { accuracy, correct, evaluated, skipped_empty, records })
}
