//! Synthetic retrieval and in-context classification datasets.

mod eval;
mod icl;
mod needle;

use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use eval::{
    evaluate_accuracy, AccuracyReport, ExampleRecord, LookupOracle, Predictor, UniformRandomPredictor,
};
pub use icl::{gen_icl_classification, parse_icl_answer, IclSpec};
pub use needle::{gen_needle, parse_needle_answer, NeedleMode, NeedleSpec};

/// Disjoint token-id ranges used by the generators.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabPartition {
    pub bos: usize,
    pub sep: usize,
    pub query: usize,
    pub keys: Range<usize>,
    pub values: Range<usize>,
    pub filler: Range<usize>,
}

impl VocabPartition {
    /// Three special ids, then the rest split evenly into keys, values and filler.
    pub fn for_vocab(vocab_size: usize) -> Result<Self> {
        if vocab_size < 6 {
            return Err(Error::Config(format!("vocab size {vocab_size} too small to partition")));
        }
        let rest = vocab_size - 3;
        let k = rest.div_ceil(3);
        let v = (rest - k).div_ceil(2);
        Ok(VocabPartition {
            bos: 0,
            sep: 1,
            query: 2,
            keys: 3..3 + k,
            values: 3 + k..3 + k + v,
            filler: 3 + k + v..vocab_size,
        })
    }

    pub fn vocab_size(&self) -> usize {
        [self.bos + 1, self.sep + 1, self.query + 1, self.keys.end, self.values.end, self.filler.end]
            .into_iter()
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let specials = [self.bos, self.sep, self.query];
        let ranges = [&self.keys, &self.values, &self.filler];
        for (i, a) in specials.iter().enumerate() {
            if specials[i + 1..].contains(a) || ranges.iter().any(|r| r.contains(a)) {
                return Err(Error::Config(format!("special token {a} is not unique")));
            }
        }
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                if a.start < b.end && b.start < a.end {
                    return Err(Error::Config(format!("ranges {a:?} and {b:?} overlap")));
                }
            }
        }
        if self.keys.is_empty() || self.values.is_empty() {
            return Err(Error::Config("key and value ranges must be non-empty".into()));
        }
        Ok(())
    }

    pub fn is_key(&self, t: usize) -> bool {
        self.keys.contains(&t)
    }

    pub fn is_value(&self, t: usize) -> bool {
        self.values.contains(&t)
    }
}

/// A named set of half-open spans.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub spans: Vec<(usize, usize)>,
}

impl Region {
    pub fn len(&self) -> usize {
        self.spans.iter().map(|(a, b)| b - a).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, pos: usize) -> bool {
        self.spans.iter().any(|&(a, b)| (a..b).contains(&pos))
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.spans.iter().flat_map(|&(a, b)| a..b)
    }
}

pub const REGION_NAMES: [&str; 5] = ["bos", "context", "needle", "query", "answer"];

/// Builds regions from a per-position label, merging adjacent positions.
pub(crate) fn regions_from_labels(labels: &[&'static str]) -> Vec<Region> {
    REGION_NAMES
        .iter()
        .map(|&name| {
            let mut spans: Vec<(usize, usize)> = Vec::new();
            for (i, &l) in labels.iter().enumerate() {
                if l != name {
                    continue;
                }
                match spans.last_mut() {
                    Some(last) if last.1 == i => last.1 = i + 1,
                    _ => spans.push((i, i + 1)),
                }
            }
            Region { name: name.to_string(), spans }
        })
        .collect()
}

/// Checks that regions cover `0..len` exactly once.
pub fn check_partition(regions: &[Region], len: usize) -> Result<()> {
    let mut seen = vec![false; len];
    for r in regions {
        for (a, b) in &r.spans {
            if a >= b || *b > len {
                return Err(Error::Annotation(format!(
                    "region {} has invalid span {a}..{b} for length {len}",
                    r.name
                )));
            }
            for s in &mut seen[*a..*b] {
                if *s {
                    return Err(Error::Annotation(format!("region {} overlaps another region", r.name)));
                }
                *s = true;
            }
        }
    }
    if let Some(gap) = seen.iter().position(|s| !s) {
        return Err(Error::Annotation(format!("position {gap} is not covered by any region")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub answer: Vec<usize>,
    pub regions: Vec<Region>,
}

impl LabeledExample {
    pub fn answer_positions(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| self.loss_mask[i]).collect()
    }

    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    /// Next-token view: `(inputs, targets, mask)` where `targets[i]` is the
    /// token following `inputs[i]`.
    pub fn shifted(&self) -> (&[usize], &[usize], &[bool]) {
        let n = self.tokens.len();
        (&self.tokens[..n - 1], &self.tokens[1..], &self.loss_mask[1..])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n < 2 || self.loss_mask.len() != n {
            return Err(Error::Input("example needs at least two tokens and one mask flag per token".into()));
        }
        if self.loss_mask[0] {
            return Err(Error::Input("the first token cannot be an answer".into()));
        }
        let answer: Vec<usize> = self.answer_positions().iter().map(|&i| self.tokens[i]).collect();
        if answer != self.answer {
            return Err(Error::Input("answer does not match the masked positions".into()));
        }
        check_partition(&self.regions, n)?;
        match self.region("answer") {
            Some(r) if r.positions().eq(self.answer_positions()) => Ok(()),
            _ => Err(Error::Annotation("answer region differs from the loss mask".into())),
        }
    }
}

pub fn write_jsonl(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<LabeledExample>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: LabeledExample = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("line {}: {e}", i + 1)))?;
        ex.validate()?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_partition_is_disjoint_and_covers_vocab() {
        let p = VocabPartition::for_vocab(64).unwrap();
        p.validate().unwrap();
        assert_eq!(p.vocab_size(), 64);
        assert_eq!(p.keys.len() + p.values.len() + p.filler.len(), 61);
    }

    #[test]
    fn overlapping_partition_is_rejected() {
        let mut p = VocabPartition::for_vocab(64).unwrap();
        p.values.start -= 1;
        assert!(p.validate().is_err());
        let mut p = VocabPartition::for_vocab(64).unwrap();
        p.sep = p.keys.start;
        assert!(p.validate().is_err());
    }

    #[test]
    fn partition_check_catches_gaps_and_overlaps() {
        let r = |name: &str, spans: Vec<(usize, usize)>| Region { name: name.into(), spans };
        assert!(check_partition(&[r("a", vec![(0, 2)]), r("b", vec![(2, 4)])], 4).is_ok());
        assert!(check_partition(&[r("a", vec![(0, 2)]), r("b", vec![(3, 4)])], 4).is_err());
        assert!(check_partition(&[r("a", vec![(0, 3)]), r("b", vec![(2, 4)])], 4).is_err());
    }

    #[test]
    fn labels_merge_into_spans() {
        let regions = regions_from_labels(&["bos", "context", "needle", "context", "query", "answer"]);
        let ctx = regions.iter().find(|r| r.name == "context").unwrap();
        assert_eq!(ctx.spans, vec![(1, 2), (3, 4)]);
        check_partition(&regions, 6).unwrap();
    }

    #[test]
    fn jsonl_roundtrip() {
        let spec = NeedleSpec { n_examples: 5, ..NeedleSpec::default() };
        let data = gen_needle(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&path, &data).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), data);
    }
}
