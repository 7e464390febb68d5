//! Attention-mass measurement: how much of each attention row lands on each
//! named region, per token of that region, for the main map, the
//! λ-scaled denoiser map, and their difference.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttnTrace;
use crate::error::{Error, Result};
use crate::model::ToyModel;
use crate::tasks::{check_partition, LabeledExample, Region};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Main,
    Denoiser,
    Effective,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Main, Component::Denoiser, Component::Effective];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Main => "main",
            Component::Denoiser => "denoiser",
            Component::Effective => "effective",
        }
    }
}

/// Which attention rows are averaged. Rows are the positions whose output
/// predicts a token, so the row for an answer token at `p` is `p - 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryRows {
    /// The row predicting the final answer token.
    #[default]
    Last,
    /// Every row predicting an answer token.
    AllAnswer,
    /// Every row.
    All,
}

impl QueryRows {
    pub fn resolve(self, regions: &[Region], seq_len: usize) -> Result<Vec<usize>> {
        let answer: Vec<usize> = regions
            .iter()
            .filter(|r| r.name == "answer")
            .flat_map(|r| r.positions())
            .collect();
        let rows: Vec<usize> = match self {
            QueryRows::All => (0..seq_len).collect(),
            QueryRows::Last => answer.iter().max().map(|&p| vec![p.saturating_sub(1)]).unwrap_or_default(),
            QueryRows::AllAnswer => {
                let mut rows: Vec<usize> = answer.iter().map(|p| p.saturating_sub(1)).collect();
                rows.sort_unstable();
                rows
            }
        };
        if rows.is_empty() {
            return Err(Error::Annotation("no query rows: the answer region is empty".into()));
        }
        Ok(rows)
    }
}

/// One (layer, head, region, component) cell. `layer`/`head` of `None`
/// mark means over that axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassCell {
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub region: String,
    pub component: Component,
    /// Region total divided by the region's token count.
    pub mass: f64,
    /// Region total before normalization.
    pub total: f64,
    pub tokens: f64,
}

impl MassCell {
    fn key(&self) -> (Option<usize>, Option<usize>, String, Component) {
        (self.layer, self.head, self.region.clone(), self.component)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnMassReport {
    pub model: String,
    pub query_rows: QueryRows,
    /// λ per layer; 0 for layers without a denoiser.
    pub lambda: Vec<f64>,
    pub regions: Vec<String>,
    pub n_probes: usize,
    pub aggregation: Vec<String>,
    pub cells: Vec<MassCell>,
}

fn component_map(trace: &AttnTrace, head: usize, c: Component) -> impl Fn(usize, usize) -> f64 + '_ {
    let lambda = trace.lambda_used;
    let a1 = &trace.a1[head];
    let a2 = trace.a2.get(head);
    move |i, j| {
        let main = a1.get(i, j);
        let den = a2.map_or(0.0, |a| lambda * a.get(i, j));
        match c {
            Component::Main => main,
            Component::Denoiser => den,
            Component::Effective => main - den,
        }
    }
}

/// Per-head, per-region masses for one forward's traces.
pub fn attention_mass(
    traces: &[AttnTrace],
    regions: &[Region],
    query_rows: QueryRows,
    model: &str,
) -> Result<AttnMassReport> {
    let first = traces
        .first()
        .and_then(|t| t.a1.first())
        .ok_or_else(|| Error::Input("no attention traces".into()))?;
    let seq_len = first.rows();
    check_partition(regions, seq_len)?;
    let rows = query_rows.resolve(regions, seq_len)?;
    if rows.iter().any(|&r| r >= seq_len) {
        return Err(Error::Annotation("query row beyond the traced sequence".into()));
    }
    let inv_rows = 1.0 / rows.len() as f64;
    let mut cells = Vec::new();
    for (layer, trace) in traces.iter().enumerate() {
        for head in 0..trace.a1.len() {
            for region in regions {
                for c in Component::ALL {
                    let m = component_map(trace, head, c);
                    let total: f64 = rows
                        .iter()
                        .map(|&i| region.positions().map(|j| m(i, j)).sum::<f64>())
                        .sum::<f64>()
                        * inv_rows;
                    let tokens = region.len() as f64;
                    cells.push(MassCell {
                        layer: Some(layer),
                        head: Some(head),
                        region: region.name.clone(),
                        component: c,
                        mass: if tokens > 0.0 { total / tokens } else { 0.0 },
                        total,
                        tokens,
                    });
                }
            }
        }
    }
    Ok(AttnMassReport {
        model: model.to_string(),
        query_rows,
        lambda: traces.iter().map(|t| if t.a2.is_empty() { 0.0 } else { t.lambda_used }).collect(),
        regions: regions.iter().map(|r| r.name.clone()).collect(),
        n_probes: 1,
        aggregation: vec!["per_head".into()],
        cells,
    })
}

/// Runs the model on one example and measures its attention.
pub fn probe_report(model: &ToyModel, example: &LabeledExample, query_rows: QueryRows, id: &str) -> Result<AttnMassReport> {
    let out = model.forward(&example.tokens, true)?;
    attention_mass(&out.traces, &example.regions, query_rows, id)
}

/// Cell-wise mean over probes with the same schema.
pub fn average_reports(reports: &[AttnMassReport]) -> Result<AttnMassReport> {
    let first = reports.first().ok_or_else(|| Error::Input("no reports to average".into()))?;
    let mut out = first.clone();
    for r in &reports[1..] {
        if r.cells.len() != first.cells.len() || r.regions != first.regions || r.lambda.len() != first.lambda.len() {
            return Err(Error::Comparison("reports have different schemas".into()));
        }
        for (acc, c) in out.cells.iter_mut().zip(&r.cells) {
            if acc.key() != c.key() {
                return Err(Error::Comparison("reports have different cell layouts".into()));
            }
            acc.mass += c.mass;
            acc.total += c.total;
            acc.tokens += c.tokens;
        }
        for (a, b) in out.lambda.iter_mut().zip(&r.lambda) {
            *a += b;
        }
    }
    let n = reports.len() as f64;
    for c in &mut out.cells {
        c.mass /= n;
        c.total /= n;
        c.tokens /= n;
    }
    out.lambda.iter_mut().for_each(|l| *l /= n);
    out.n_probes = reports.iter().map(|r| r.n_probes).sum();
    Ok(out)
}

impl AttnMassReport {
    /// Appends means over heads for each layer and over all layers and heads.
    pub fn with_means(mut self) -> Self {
        let per_head: Vec<MassCell> = self.cells.iter().filter(|c| c.head.is_some()).cloned().collect();
        let mut groups: BTreeMap<(Option<usize>, String, Component), Vec<&MassCell>> = BTreeMap::new();
        for c in &per_head {
            groups.entry((c.layer, c.region.clone(), c.component)).or_default().push(c);
            groups.entry((None, c.region.clone(), c.component)).or_default().push(c);
        }
        for ((layer, region, component), members) in groups {
            let n = members.len() as f64;
            self.cells.push(MassCell {
                layer,
                head: None,
                region,
                component,
                mass: members.iter().map(|c| c.mass).sum::<f64>() / n,
                total: members.iter().map(|c| c.total).sum::<f64>() / n,
                tokens: members.iter().map(|c| c.tokens).sum::<f64>() / n,
            });
        }
        self.aggregation = vec!["per_head".into(), "mean_over_heads".into(), "mean_over_layers_and_heads".into()];
        self
    }

    pub fn cell(&self, layer: Option<usize>, head: Option<usize>, region: &str, component: Component) -> Option<&MassCell> {
        self.cells
            .iter()
            .find(|c| c.layer == layer && c.head == head && c.region == region && c.component == component)
    }

    /// Largest violation of the conservation law: token-weighted masses sum
    /// to 1 (main), λ (denoiser) and 1 − λ (effective) per layer and head.
    pub fn conservation_error(&self) -> f64 {
        let mut sums: BTreeMap<(Option<usize>, Option<usize>, Component), f64> = BTreeMap::new();
        for c in &self.cells {
            *sums.entry((c.layer, c.head, c.component)).or_default() += c.mass * c.tokens;
        }
        let mean_lambda = self.lambda.iter().sum::<f64>() / self.lambda.len().max(1) as f64;
        sums.into_iter()
            .map(|((layer, _, comp), s)| {
                let lambda = layer.map_or(mean_lambda, |l| self.lambda[l]);
                let want = match comp {
                    Component::Main => 1.0,
                    Component::Denoiser => lambda,
                    Component::Effective => 1.0 - lambda,
                };
                (s - want).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> Result<String> {
        let axis = |v: Option<usize>| v.map_or("mean".to_string(), |x| x.to_string());
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Input(format!("csv: {e}"));
        w.write_record(["model", "layer", "head", "region", "component", "mass", "tokens"])
            .map_err(csv_err)?;
        for c in &self.cells {
            w.write_record([
                self.model.clone(),
                axis(c.layer),
                axis(c.head),
                c.region.clone(),
                c.component.as_str().to_string(),
                format!("{:e}", c.mass),
                c.tokens.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<stem>.csv` and a `<stem>.json` sidecar with metadata and
    /// the unnormalized totals.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDelta {
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub region: String,
    pub component: Component,
    pub before: f64,
    pub after: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportComparison {
    pub before: String,
    pub after: String,
    pub cells: Vec<CellDelta>,
    /// Mean over layers and heads of the mass change on BOS, per component.
    pub bos_delta: BTreeMap<Component, f64>,
    /// Same for the needle region.
    pub needle_delta: BTreeMap<Component, f64>,
}

fn mean_delta(cells: &[CellDelta], region: &str, c: Component) -> f64 {
    let hits: Vec<f64> = cells
        .iter()
        .filter(|d| d.head.is_some() && d.region == region && d.component == c)
        .map(|d| d.delta)
        .collect();
    if hits.is_empty() {
        0.0
    } else {
        hits.iter().sum::<f64>() / hits.len() as f64
    }
}

/// Cell-wise `b - a` for two reports with the same schema.
pub fn compare_reports(a: &AttnMassReport, b: &AttnMassReport) -> Result<ReportComparison> {
    if a.regions != b.regions || a.cells.len() != b.cells.len() || a.lambda.len() != b.lambda.len() {
        return Err(Error::Comparison("reports have different region or layer schemas".into()));
    }
    let mut cells = Vec::with_capacity(a.cells.len());
    for (x, y) in a.cells.iter().zip(&b.cells) {
        if x.key() != y.key() {
            return Err(Error::Comparison(format!(
                "cell mismatch: {:?} vs {:?}",
                x.key(),
                y.key()
            )));
        }
        cells.push(CellDelta {
            layer: x.layer,
            head: x.head,
            region: x.region.clone(),
            component: x.component,
            before: x.mass,
            after: y.mass,
            delta: y.mass - x.mass,
        });
    }
    let summary = |region: &str| Component::ALL.iter().map(|&c| (c, mean_delta(&cells, region, c))).collect();
    Ok(ReportComparison {
        before: a.model.clone(),
        after: b.model.clone(),
        bos_delta: summary("bos"),
        needle_delta: summary("needle"),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{masked_row_softmax, CausalMask, Tensor2D};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn region(name: &str, spans: &[(usize, usize)]) -> Region {
        Region { name: name.into(), spans: spans.to_vec() }
    }

    fn uniform(n: usize) -> Tensor2D {
        masked_row_softmax(&Tensor2D::zeros(n, n), CausalMask::new(n)).unwrap()
    }

    fn random_map(n: usize, rng: &mut ChaCha8Rng) -> Tensor2D {
        let data = (0..n * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        masked_row_softmax(&Tensor2D::from_vec(n, n, data).unwrap(), CausalMask::new(n)).unwrap()
    }

    fn trace(a1: Tensor2D, a2: Tensor2D, lambda: f64) -> AttnTrace {
        AttnTrace { a1: vec![a1], a2: vec![a2], lambda_used: lambda, group_norm_rms: Vec::new() }
    }

    fn six_regions() -> Vec<Region> {
        vec![
            region("bos", &[(0, 1)]),
            region("context", &[(1, 3)]),
            region("needle", &[(3, 5)]),
            region("query", &[(5, 6)]),
            region("answer", &[(6, 7)]),
        ]
    }

    #[test]
    fn uniform_prefix_inside_one_region() {
        // The final answer sits at 4, so the query row is 3 and its causal
        // prefix 0..=3 is exactly the "early" region.
        let regions = vec![region("early", &[(0, 4)]), region("answer", &[(4, 5)])];
        assert_eq!(QueryRows::Last.resolve(&regions, 5).unwrap(), vec![3]);
        let r = attention_mass(&[trace(uniform(5), uniform(5), 0.1)], &regions, QueryRows::Last, "m").unwrap();
        let early = r.cell(Some(0), Some(0), "early", Component::Main).unwrap();
        assert!((early.mass - 1.0 / 4.0).abs() < 1e-15);
        assert_eq!(r.cell(Some(0), Some(0), "answer", Component::Main).unwrap().mass, 0.0);
    }

    #[test]
    fn zero_lambda_gives_zero_denoiser() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = trace(random_map(7, &mut rng), random_map(7, &mut rng), 0.0);
        let r = attention_mass(&[t], &six_regions(), QueryRows::All, "m").unwrap();
        for c in &r.cells {
            if c.component == Component::Denoiser {
                assert_eq!(c.mass, 0.0);
            }
        }
        for name in ["bos", "context", "needle", "query", "answer"] {
            let main = r.cell(Some(0), Some(0), name, Component::Main).unwrap().mass;
            let eff = r.cell(Some(0), Some(0), name, Component::Effective).unwrap().mass;
            assert_eq!(main, eff);
        }
    }

    #[test]
    fn random_trace_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a1, a2) = (random_map(6, &mut rng), random_map(6, &mut rng));
        let regions = vec![region("a", &[(0, 2), (4, 5)]), region("answer", &[(2, 4), (5, 6)])];
        let t = trace(a1.clone(), a2.clone(), 0.3);
        let r = attention_mass(&[t], &regions, QueryRows::AllAnswer, "m").unwrap();
        let rows = [1usize, 2, 4];
        let direct = |m: &dyn Fn(usize, usize) -> f64| {
            rows.iter().map(|&i| m(i, 0) + m(i, 1) + m(i, 4)).sum::<f64>() / 3.0 / 3.0
        };
        let want_main = direct(&|i, j| a1.get(i, j));
        let want_den = direct(&|i, j| 0.3 * a2.get(i, j));
        let got = |c| r.cell(Some(0), Some(0), "a", c).unwrap().mass;
        assert!((got(Component::Main) - want_main).abs() < 1e-15);
        assert!((got(Component::Denoiser) - want_den).abs() < 1e-15);
        assert!((got(Component::Effective) - (want_main - want_den)).abs() < 1e-15);
    }

    #[test]
    fn bad_regions_are_annotation_errors() {
        let t = trace(uniform(4), uniform(4), 0.1);
        let overlapping = vec![region("a", &[(0, 3)]), region("answer", &[(2, 4)])];
        let gap = vec![region("a", &[(0, 2)]), region("answer", &[(3, 4)])];
        for regions in [overlapping, gap] {
            let err = attention_mass(&[t.clone()], &regions, QueryRows::Last, "m").unwrap_err();
            assert!(matches!(err, Error::Annotation(_)));
        }
    }

    #[test]
    fn self_comparison_is_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = trace(random_map(7, &mut rng), random_map(7, &mut rng), 0.1);
        let r = attention_mass(&[t], &six_regions(), QueryRows::Last, "m").unwrap().with_means();
        let cmp = compare_reports(&r, &r).unwrap();
        assert!(cmp.cells.iter().all(|c| c.delta == 0.0));
        assert!(cmp.bos_delta.values().all(|&d| d == 0.0));
    }

    #[test]
    fn lambda_scaling_is_linear_in_denoiser_deltas() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a1, a2) = (random_map(7, &mut rng), random_map(7, &mut rng));
        let r0 = attention_mass(&[trace(a1.clone(), a2.clone(), 0.0)], &six_regions(), QueryRows::Last, "m").unwrap();
        let r1 = attention_mass(&[trace(a1, a2.clone(), 0.1)], &six_regions(), QueryRows::Last, "m").unwrap();
        let cmp = compare_reports(&r0, &r1).unwrap();
        for d in cmp.cells.iter().filter(|d| d.component == Component::Denoiser) {
            let reg = six_regions().into_iter().find(|r| r.name == d.region).unwrap();
            let mean_a2 = reg.positions().map(|j| a2.get(5, j)).sum::<f64>() / reg.len() as f64;
            assert!((d.delta - 0.1 * mean_a2).abs() < 1e-15);
        }
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let t = trace(uniform(7), uniform(7), 0.1);
        let a = attention_mass(&[t.clone()], &six_regions(), QueryRows::Last, "a").unwrap();
        let other = vec![region("bos", &[(0, 1)]), region("x", &[(1, 6)]), region("answer", &[(6, 7)])];
        let b = attention_mass(&[t], &other, QueryRows::Last, "b").unwrap();
        assert!(matches!(compare_reports(&a, &b), Err(Error::Comparison(_))));
    }

    #[test]
    fn csv_has_the_fixed_header() {
        let t = trace(uniform(7), uniform(7), 0.1);
        let r = attention_mass(&[t], &six_regions(), QueryRows::Last, "base").unwrap().with_means();
        let csv = r.to_csv().unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "model,layer,head,region,component,mass,tokens");
        assert_eq!(lines.count(), r.cells.len());
        assert!(csv.contains("base,mean,mean,bos,main,"));
    }

    proptest! {
        #[test]
        fn conservation_and_effective_identity(seed in 0u64..500, lambda in 0.0f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = trace(random_map(7, &mut rng), random_map(7, &mut rng), lambda);
            for rows in [QueryRows::Last, QueryRows::AllAnswer, QueryRows::All] {
                let r = attention_mass(&[t.clone()], &six_regions(), rows, "m").unwrap().with_means();
                prop_assert!(r.conservation_error() < 1e-12);
                for c in r.cells.iter().filter(|c| c.component == Component::Main) {
                    let den = r.cell(c.layer, c.head, &c.region, Component::Denoiser).unwrap().mass;
                    let eff = r.cell(c.layer, c.head, &c.region, Component::Effective).unwrap().mass;
                    prop_assert!((eff - (c.mass - den)).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn splitting_a_region_reaggregates_exactly(seed in 0u64..500, cut in 2usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = trace(random_map(7, &mut rng), random_map(7, &mut rng), 0.2);
            let mut split = six_regions();
            split[1] = region("context", &[(1, cut)]);
            split.push(region("context_b", &[(cut, 3)]));
            let whole = attention_mass(&[t.clone()], &six_regions(), QueryRows::All, "m").unwrap();
            let parts = attention_mass(&[t.clone()], &split, QueryRows::All, "m").unwrap();
            for c in Component::ALL {
                let a = parts.cell(Some(0), Some(0), "context", c).unwrap();
                let b = parts.cell(Some(0), Some(0), "context_b", c).unwrap();
                let merged = (a.mass * a.tokens + b.mass * b.tokens) / (a.tokens + b.tokens);
                let w = whole.cell(Some(0), Some(0), "context", c).unwrap().mass;
                prop_assert!((merged - w).abs() < 1e-14);
            }
            let mut reordered = six_regions();
            reordered.reverse();
            let r = attention_mass(&[t], &reordered, QueryRows::All, "m").unwrap();
            for cell in &whole.cells {
                let other = r.cell(cell.layer, cell.head, &cell.region, cell.component).unwrap();
                prop_assert_eq!(other.mass, cell.mass);
            }
        }
    }
}
