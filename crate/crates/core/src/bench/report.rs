use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use super::Variant;
use crate::reward::SummaryBook;
use crate::world::{Split, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub variant: Variant,
    pub split: Split,
    pub seed: u64,
    pub accuracy: f64,
    pub tie_rate: f64,
    pub n_pairs: usize,
    /// Parameters evaluated, identical across splits of one run.
    pub params_digest: String,
}

/// Mean and sample standard deviation of accuracy over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub variant: Variant,
    pub split: Split,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

pub fn aggregate(rows: &[ReportRow]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(Variant, Split), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.variant, r.split)).or_default().push(r.accuracy);
    }
    groups
        .into_iter()
        .map(|((variant, split), xs)| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let std = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Aggregate {
                variant,
                split,
                mean,
                std,
                seeds: xs.len(),
            }
        })
        .collect()
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("variant,split,seed,accuracy,tie_rate,n_pairs,params_digest\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{},{}",
            r.variant,
            r.split.as_str(),
            r.seed,
            r.accuracy,
            r.tie_rate,
            r.n_pairs,
            r.params_digest
        );
    }
    out
}

/// One row per variant, one `mean ± std` column per split, in percent.
pub fn report_markdown(aggs: &[Aggregate]) -> String {
    let mut splits: Vec<Split> = aggs.iter().map(|a| a.split).collect();
    splits.sort();
    splits.dedup();
    let mut variants: Vec<Variant> = aggs.iter().map(|a| a.variant).collect();
    variants.sort();
    variants.dedup();
    let mut out = String::from("| variant |");
    for s in &splits {
        let _ = write!(out, " {} |", s.as_str());
    }
    out.push_str("\n|---|");
    out.push_str(&"---:|".repeat(splits.len()));
    out.push('\n');
    for v in variants {
        let _ = write!(out, "| {v} |");
        for s in &splits {
            match aggs.iter().find(|a| a.variant == v && a.split == *s) {
                Some(a) => {
                    let _ = write!(out, " {:.1} ± {:.1} |", 100.0 * a.mean, 100.0 * a.std);
                }
                None => out.push_str(" |"),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    seed: u64,
    split: &'a str,
    user_id: u64,
    z: &'a [usize],
    text: String,
}

/// One JSON object per user: ids and rendering of the greedy summary.
pub fn summaries_jsonl(vocab: &Vocabulary, seed: u64, split: Split, book: &SummaryBook) -> String {
    let mut out = String::new();
    for (&user_id, z) in book {
        let line = SummaryLine {
            seed,
            split: split.as_str(),
            user_id,
            z,
            text: vocab.detokenize(z),
        };
        out.push_str(&serde_json::to_string(&line).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: Variant, split: Split, seed: u64, accuracy: f64) -> ReportRow {
        ReportRow {
            variant,
            split,
            seed,
            accuracy,
            tie_rate: 0.0,
            n_pairs: 200,
            params_digest: String::new(),
        }
    }

    #[test]
    fn aggregates_match_recomputation() {
        let rows = vec![
            row(Variant::Btl, Split::TestSeen, 0, 0.45),
            row(Variant::Btl, Split::TestSeen, 1, 0.5),
            row(Variant::Btl, Split::TestSeen, 2, 0.58),
            row(Variant::Oracle, Split::TestOod, 0, 1.0),
        ];
        let aggs = aggregate(&rows);
        let btl = &aggs[0];
        assert!((btl.mean - 1.53 / 3.0).abs() < 1e-12);
        let var = [0.45f64, 0.5, 0.58].iter().map(|x| (x - 0.51).powi(2)).sum::<f64>() / 2.0;
        assert!((btl.std - var.sqrt()).abs() < 1e-9);
        assert_eq!(aggs[1].std, 0.0);
        let md = report_markdown(&aggs);
        assert!(md.contains("| btl | 51.0 ± 6.6 |"), "{md}");
        assert!(md.contains("| oracle | | 100.0 ± 0.0 |"), "{md}");
    }
}
