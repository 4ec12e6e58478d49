//! Corpus metrics: BLEU, terminology success rate, edit rate and exact
//! match, plus a per-task evaluation report.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Example, Task};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermPair {
    pub source_term: Vec<usize>,
    pub target_term: Vec<usize>,
}

impl TermPair {
    pub fn new(source_term: Vec<usize>, target_term: Vec<usize>) -> Result<Self> {
        if source_term.is_empty() || target_term.is_empty() {
            return Err(Error::arg("term pairs need non-empty sides"));
        }
        Ok(TermPair { source_term, target_term })
    }
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and hypothesis n-gram total for one pair.
pub fn ngram_stats(hyp: &[usize], reference: &[usize], n: usize) -> (usize, usize) {
    let r = ngram_counts(reference, n);
    let h = ngram_counts(hyp, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Corpus BLEU in `[0, 100]` with a single reference per hypothesis.
///
/// Unsmoothed by default: any zero precision gives 0. With `smooth`, n > 1
/// precisions use add-one counts.
pub fn bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>], max_n: usize, smooth: bool) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::arg("BLEU of an empty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::arg(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    if max_n == 0 {
        return Err(Error::arg("max_n must be positive"));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let (m, t) = ngram_stats(h, rf, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let (m, t) = if smooth && n > 0 { (matched[n] + 1, total[n] + 1) } else { (matched[n], total[n]) };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

/// Whether `needle` occurs as a contiguous run in `hay`.
pub fn contains_run(hay: &[usize], needle: &[usize]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Satisfied pairs and pair count for one hypothesis.
pub fn tsr_counts(hyp: &[usize], terms: &[TermPair]) -> (usize, usize) {
    (terms.iter().filter(|p| contains_run(hyp, &p.target_term)).count(), terms.len())
}

/// Fraction of term pairs whose target term appears contiguously in `hyp`.
pub fn tsr(hyp: &[usize], terms: &[TermPair]) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::arg("TSR needs at least one term pair"));
    }
    let (ok, n) = tsr_counts(hyp, terms);
    Ok(ok as f64 / n as f64)
}

/// Token-level Levenshtein distance with unit costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance to the post-edited reference divided by its length
/// (translation edit rate without block shifts).
pub fn hter(hyp: &[usize], post_edited: &[usize]) -> Result<f64> {
    if post_edited.is_empty() {
        return Err(Error::arg("HTER against an empty reference"));
    }
    Ok(edit_distance(hyp, post_edited) as f64 / post_edited.len() as f64)
}

/// Fraction of exact sequence matches.
pub fn seq_accuracy(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::arg(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    if hyps.is_empty() {
        return Err(Error::arg("accuracy of an empty corpus"));
    }
    Ok(hyps.iter().zip(refs).filter(|(h, r)| h == r).count() as f64 / hyps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bleu,
    Tsr,
    Hter,
    Acc,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Bleu, Metric::Tsr, Metric::Hter, Metric::Acc];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu => "bleu",
            Metric::Tsr => "tsr",
            Metric::Hter => "hter",
            Metric::Acc => "acc",
        }
    }

    /// Parses a comma-separated list such as `bleu,acc`.
    pub fn parse_list(s: &str) -> Result<Vec<Metric>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                Metric::ALL
                    .into_iter()
                    .find(|m| m.name() == p)
                    .ok_or_else(|| Error::arg(format!("unknown metric {p:?}")))
            })
            .collect()
    }
}

fn term_pairs(ex: &Example) -> Vec<TermPair> {
    ex.meta.terms.iter().map(|(s, t)| TermPair { source_term: s.clone(), target_term: t.clone() }).collect()
}

/// Per-task scores. TSR is reported only for tasks carrying term pairs and
/// HTER is corpus-level (total edits over total reference length).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: BTreeMap<String, BTreeMap<String, f64>>,
    pub counts: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn get(&self, task: &str, metric: Metric) -> Option<f64> {
        self.tasks.get(task).and_then(|m| m.get(metric.name())).copied()
    }
}

/// Scores `predictions` (one per example, without EOS) per task and over
/// everything (task `"all"`).
pub fn evaluate(examples: &[Example], predictions: &[Vec<usize>], metrics: &[Metric]) -> Result<EvalReport> {
    if examples.len() != predictions.len() {
        return Err(Error::arg(format!("{} examples but {} predictions", examples.len(), predictions.len())));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        groups.entry(e.task.name().to_string()).or_default().push(i);
        groups.entry("all".to_string()).or_default().push(i);
    }
    let mut report = EvalReport::default();
    for (task, idx) in groups {
        let hyps: Vec<Vec<usize>> = idx.iter().map(|&i| predictions[i].clone()).collect();
        let refs: Vec<Vec<usize>> = idx.iter().map(|&i| examples[i].target.clone()).collect();
        let mut scores = BTreeMap::new();
        for &m in metrics {
            let v = match m {
                Metric::Bleu => Some(bleu(&hyps, &refs, 4, false)?),
                Metric::Acc => Some(seq_accuracy(&hyps, &refs)?),
                Metric::Hter => {
                    let edits: usize = hyps.iter().zip(&refs).map(|(h, r)| edit_distance(h, r)).sum();
                    let len: usize = refs.iter().map(Vec::len).sum();
                    (len > 0).then(|| edits as f64 / len as f64)
                }
                Metric::Tsr => {
                    let (ok, n) = idx.iter().fold((0, 0), |(a, b), &i| {
                        let (x, y) = tsr_counts(&predictions[i], &term_pairs(&examples[i]));
                        (a + x, b + y)
                    });
                    (n > 0).then(|| ok as f64 / n as f64)
                }
            };
            if let Some(v) = v {
                scores.insert(m.name().to_string(), v);
            }
        }
        report.counts.insert(task.clone(), idx.len());
        report.tasks.insert(task, scores);
    }
    Ok(report)
}

/// One CSV row per example: `index,task,exact,edit_rate,tsr`.
pub fn per_example_csv(examples: &[Example], predictions: &[Vec<usize>]) -> String {
    let mut out = String::from("index,task,exact,edit_rate,tsr\n");
    for (i, (e, p)) in examples.iter().zip(predictions).enumerate() {
        let er = hter(p, &e.target).map(|v| format!("{v:.6}")).unwrap_or_default();
        let terms = term_pairs(e);
        let t = tsr(p, &terms).map(|v| format!("{v:.6}")).unwrap_or_default();
        let _ = writeln!(out, "{i},{},{},{er},{t}", e.task.name(), u8::from(p == &e.target));
    }
    out
}

/// Convenience for ablations: per-task sequence accuracy.
pub fn accuracy_by_task(examples: &[Example], predictions: &[Vec<usize>]) -> Result<BTreeMap<Task, f64>> {
    let mut out = BTreeMap::new();
    for task in Task::ALL {
        let idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].task == task).collect();
        if idx.is_empty() {
            continue;
        }
        let hyps: Vec<Vec<usize>> = idx.iter().map(|&i| predictions[i].clone()).collect();
        let refs: Vec<Vec<usize>> = idx.iter().map(|&i| examples[i].target.clone()).collect();
        out.insert(task, seq_accuracy(&hyps, &refs)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_examples() {
        let a = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9]];
        assert!((bleu(&a, &a, 4, false).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 5]], 4, false).unwrap(), 0.0);
        let half = bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 4, 1, 2, 3, 4]], 4, false).unwrap();
        assert!((half - 100.0 * (-1f64).exp()).abs() < 1e-9);
        assert!(bleu(&[vec![1, 2, 3, 4]], &[vec![1, 2, 3, 5]], 4, true).unwrap() > 0.0);
        assert!(matches!(bleu(&[], &[], 4, false), Err(Error::Argument(_))));
    }

    #[test]
    fn tsr_examples() {
        let pairs = vec![TermPair::new(vec![1], vec![7, 8]).unwrap(), TermPair::new(vec![2], vec![9]).unwrap()];
        assert_eq!(tsr(&[7, 8, 9], &pairs).unwrap(), 1.0);
        assert_eq!(tsr(&[7, 8, 3], &pairs).unwrap(), 0.5);
        assert_eq!(tsr(&[7, 5, 8], &pairs[..1]).unwrap(), 0.0);
        assert!(tsr(&[1], &[]).is_err());
        assert!(TermPair::new(vec![], vec![1]).is_err());
    }

    #[test]
    fn hter_and_accuracy_examples() {
        assert_eq!(hter(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap(), 0.0);
        assert_eq!(hter(&[1, 2, 0, 4], &[1, 2, 3, 4]).unwrap(), 0.25);
        assert_eq!(hter(&[], &[1, 2, 3, 4]).unwrap(), 1.0);
        assert!(hter(&[1], &[]).is_err());
        let r = vec![vec![1], vec![2], vec![3], vec![4]];
        let mut h = r.clone();
        assert_eq!(seq_accuracy(&h, &r).unwrap(), 1.0);
        h[3] = vec![5];
        assert_eq!(seq_accuracy(&h, &r).unwrap(), 0.75);
        assert_eq!(seq_accuracy(&[vec![9]], &[vec![1]]).unwrap(), 0.0);
    }

    #[test]
    fn metric_list_parsing() {
        assert_eq!(Metric::parse_list("bleu, acc").unwrap(), vec![Metric::Bleu, Metric::Acc]);
        assert!(Metric::parse_list("comet").is_err());
    }
}
