//! Recognition and understanding metrics: word error rate with a
//! deterministic alignment, relative error-rate change, intent error rate,
//! and token-level slot F1.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Alignment counts from one reference/hypothesis pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl WerBreakdown {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn wer(&self) -> f64 {
        self.edits() as f64 / self.ref_len as f64
    }

    pub fn accumulate(&mut self, other: &WerBreakdown) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.ref_len += other.ref_len;
    }

    pub fn zero() -> Self {
        WerBreakdown { substitutions: 0, insertions: 0, deletions: 0, ref_len: 0 }
    }
}

/// Levenshtein alignment with unit costs. The backtrace prefers
/// match > substitution > deletion > insertion, which both fixes the
/// breakdown deterministically and favors substitutions over
/// insertion+deletion pairs among equal-cost alignments.
pub fn wer(reference: &[impl AsRef<str>], hypothesis: &[impl AsRef<str>]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(Error::Domain("wer with an empty reference".into()));
    }
    let m = reference.len();
    let n = hypothesis.len();
    let mut cost = vec![0usize; (m + 1) * (n + 1)];
    let idx = |i: usize, j: usize| i * (n + 1) + j;
    for i in 0..=m {
        cost[idx(i, 0)] = i;
    }
    for j in 0..=n {
        cost[idx(0, j)] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = cost[idx(i - 1, j - 1)] + if same { 0 } else { 1 };
            let del = cost[idx(i - 1, j)] + 1;
            let ins = cost[idx(i, j - 1)] + 1;
            cost[idx(i, j)] = diag.min(del).min(ins);
        }
    }

    let mut breakdown = WerBreakdown { substitutions: 0, insertions: 0, deletions: 0, ref_len: m };
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let c = cost[idx(i, j)];
        if i > 0 && j > 0 && reference[i - 1].as_ref() == hypothesis[j - 1].as_ref()
            && c == cost[idx(i - 1, j - 1)]
        {
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && c == cost[idx(i - 1, j - 1)] + 1 {
            breakdown.substitutions += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && c == cost[idx(i - 1, j)] + 1 {
            breakdown.deletions += 1;
            i -= 1;
        } else {
            breakdown.insertions += 1;
            j -= 1;
        }
    }
    Ok(breakdown)
}

/// Pooled word error rate over many utterances: total edits over total
/// reference length.
pub fn corpus_wer<R, H>(pairs: &[(Vec<R>, Vec<H>)]) -> Result<WerBreakdown>
where
    R: AsRef<str>,
    H: AsRef<str>,
{
    if pairs.is_empty() {
        return Err(Error::Domain("corpus_wer over no utterances".into()));
    }
    let mut total = WerBreakdown::zero();
    for (r, h) in pairs {
        total.accumulate(&wer(r, h)?);
    }
    Ok(total)
}

/// Relative WER change against a baseline; negative means improvement.
pub fn werr(baseline_wer: f64, candidate_wer: f64) -> Result<f64> {
    if !(baseline_wer > 0.0) || !baseline_wer.is_finite() || !candidate_wer.is_finite() {
        return Err(Error::Domain(format!(
            "werr needs a positive baseline, got {baseline_wer} (candidate {candidate_wer})"
        )));
    }
    Ok((candidate_wer - baseline_wer) / baseline_wer)
}

/// Fraction of utterances whose predicted intent differs from gold.
pub fn intent_error_rate(gold: &[usize], predicted: &[usize]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Domain("intent_error_rate over no utterances".into()));
    }
    if gold.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "{} gold intents vs {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    let wrong = gold.iter().zip(predicted).filter(|(g, p)| g != p).count();
    Ok(wrong as f64 / gold.len() as f64)
}

/// Token-level micro-averaged F1 over slot labels, excluding the background
/// label `other_id` from both precision and recall. Zero when no positives
/// are predicted or present.
pub fn slot_f1(gold: &[Vec<usize>], predicted: &[Vec<usize>], other_id: usize) -> Result<f64> {
    if gold.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "{} gold sequences vs {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    let mut true_pos = 0usize;
    let mut false_pos = 0usize;
    let mut false_neg = 0usize;
    for (g_seq, p_seq) in gold.iter().zip(predicted) {
        if g_seq.len() != p_seq.len() {
            return Err(Error::Alignment(format!(
                "gold sequence of {} tokens vs prediction of {}",
                g_seq.len(),
                p_seq.len()
            )));
        }
        for (&g, &p) in g_seq.iter().zip(p_seq) {
            let gold_positive = g != other_id;
            let pred_positive = p != other_id;
            if pred_positive && g == p {
                true_pos += 1;
            } else {
                if pred_positive {
                    false_pos += 1;
                }
                if gold_positive {
                    false_neg += 1;
                }
            }
        }
    }
    let precision = if true_pos + false_pos == 0 {
        0.0
    } else {
        true_pos as f64 / (true_pos + false_pos) as f64
    };
    let recall = if true_pos + false_neg == 0 {
        0.0
    } else {
        true_pos as f64 / (true_pos + false_neg) as f64
    };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// One corpus row of an evaluation report. Raw values are kept alongside the
/// baseline-normalized ones so a report can serve as the baseline for a
/// later run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub corpus: String,
    pub ppl: f64,
    pub ppl_norm: f64,
    pub wer: Option<f64>,
    pub werr: Option<f64>,
    pub intent_error: f64,
    pub er_norm: f64,
    pub slot_f1: f64,
    pub f1_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

const REPORT_HEADER: &str = "corpus\tppl\tppl_norm\twer\twerr\tintent_er\ter_norm\tslot_f1\tf1_norm";

fn opt_cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "-".to_string(),
    }
}

fn parse_cell(s: &str, line: usize) -> Result<Option<f64>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::Parse { line, message: format!("bad number {s:?}: {e}") })
}

impl Report {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.corpus,
                r.ppl,
                r.ppl_norm,
                opt_cell(r.wer),
                opt_cell(r.werr),
                r.intent_error,
                r.er_norm,
                r.slot_f1,
                r.f1_norm
            );
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Report> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header == REPORT_HEADER => {}
            other => {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected report header, got {:?}", other.map(|(_, l)| l)),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != 9 {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("expected 9 columns, got {}", cells.len()),
                });
            }
            let req = |s: &str| -> Result<f64> {
                parse_cell(s, lineno)?.ok_or_else(|| Error::Parse {
                    line: lineno,
                    message: "unexpected empty cell".into(),
                })
            };
            rows.push(ReportRow {
                corpus: cells[0].to_string(),
                ppl: req(cells[1])?,
                ppl_norm: req(cells[2])?,
                wer: parse_cell(cells[3], lineno)?,
                werr: parse_cell(cells[4], lineno)?,
                intent_error: req(cells[5])?,
                er_norm: req(cells[6])?,
                slot_f1: req(cells[7])?,
                f1_norm: req(cells[8])?,
            });
        }
        Ok(Report { rows })
    }

    pub fn row(&self, corpus: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.corpus == corpus)
    }
}
