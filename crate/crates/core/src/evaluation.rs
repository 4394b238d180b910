//! Retrieval ranks, recall@n and median rank; WER and corpus BLEU.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECALL_CUTOFFS: [usize; 3] = [1, 5, 10];

/// 1-based rank of each query's target column, counting only strictly closer
/// columns (tied columns share the best rank).
pub fn rank_targets(distances: &Tensor, targets: &[usize]) -> Result<Vec<usize>> {
    if distances.rows() != targets.len() {
        return Err(Error::shape(format!("{} queries but {} targets", distances.rows(), targets.len())));
    }
    let cols = distances.cols();
    targets
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            if t >= cols {
                return Err(Error::IndexOutOfRange { index: t, size: cols });
            }
            let row = distances.row(q);
            Ok(1 + row.iter().filter(|&&d| d < row[t]).count())
        })
        .collect()
}

pub fn recall_at_n(ranks: &[usize], n: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::invalid("recall over an empty rank list"));
    }
    if n == 0 {
        return Err(Error::invalid("recall cutoff must be at least 1"));
    }
    Ok(ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64)
}

pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::invalid("median of an empty rank list"));
    }
    let mut s = ranks.to_vec();
    s.sort_unstable();
    let m = s.len() / 2;
    Ok(if s.len() % 2 == 1 { s[m] as f64 } else { (s[m - 1] + s[m]) as f64 / 2.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
    pub queries: usize,
    pub gallery: usize,
}

impl RetrievalReport {
    pub fn from_ranks(ranks: &[usize], gallery: usize) -> Result<Self> {
        Ok(Self {
            r1: recall_at_n(ranks, 1)?,
            r5: recall_at_n(ranks, 5)?,
            r10: recall_at_n(ranks, 10)?,
            medr: median_rank(ranks)?,
            queries: ranks.len(),
            gallery,
        })
    }

    pub fn from_distances(distances: &Tensor, targets: &[usize]) -> Result<Self> {
        Self::from_ranks(&rank_targets(distances, targets)?, distances.cols())
    }

    pub fn recall(&self, n: usize) -> Option<f64> {
        match n {
            1 => Some(self.r1),
            5 => Some(self.r5),
            10 => Some(self.r10),
            _ => None,
        }
    }

    /// Ordering used for model selection: R@10, then R@5, R@1, then lower Medr.
    pub fn selection_key(&self) -> (f64, f64, f64, f64) {
        (self.r10, self.r5, self.r1, -self.medr)
    }

    pub fn mean(reports: &[RetrievalReport]) -> Result<RetrievalReport> {
        let n = reports.len();
        if n == 0 {
            return Err(Error::invalid("mean of no reports"));
        }
        let avg = |f: fn(&RetrievalReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
        Ok(RetrievalReport {
            r1: avg(|r| r.r1),
            r5: avg(|r| r.r5),
            r10: avg(|r| r.r10),
            medr: avg(|r| r.medr),
            queries: reports[0].queries,
            gallery: reports[0].gallery,
        })
    }
}

/// Cosine-distance matrix between row-normalized query and gallery embeddings.
pub fn cosine_distances(queries: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    if queries.cols() != gallery.cols() {
        return Err(Error::shape(format!("embedding dims {} vs {}", queries.cols(), gallery.cols())));
    }
    let (u, i, e) = (queries.rows(), gallery.rows(), queries.cols());
    let mut d = vec![0.0; u * i];
    crate::tensor::gemm(u, e, i, queries.data(), false, gallery.data(), true, &mut d, 0.0);
    d.iter_mut().for_each(|s| *s = 1.0 - *s);
    Tensor::matrix(u, i, d)
}

// ------------------------------------------------------------------ text

/// Lowercase, strip punctuation, split on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation() && !c.is_ascii_control()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
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

/// Word error rate. Not clamped: heavy insertion can push it above 1.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("WER with an empty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus WER: total edits over total reference words, on normalized text.
pub fn corpus_wer(references: &[&str], hypotheses: &[&str]) -> Result<f64> {
    if references.len() != hypotheses.len() || references.is_empty() {
        return Err(Error::invalid(format!("{} references vs {} hypotheses", references.len(), hypotheses.len())));
    }
    let (mut edits, mut words) = (0, 0);
    for (r, h) in references.iter().zip(hypotheses) {
        let (r, h) = (normalize_words(r), normalize_words(h));
        edits += edit_distance(&r, &h);
        words += r.len();
    }
    if words == 0 {
        return Err(Error::invalid("WER with empty references"));
    }
    Ok(edits as f64 / words as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BleuTokens {
    Words,
    Chars,
}

impl BleuTokens {
    pub fn split(self, text: &str) -> Vec<String> {
        match self {
            BleuTokens::Words => text.split_whitespace().map(str::to_string).collect(),
            BleuTokens::Chars => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 with one reference per hypothesis, no smoothing.
pub fn bleu(references: &[Vec<String>], hypotheses: &[Vec<String>]) -> Result<f64> {
    if references.len() != hypotheses.len() || references.is_empty() {
        return Err(Error::invalid(format!("{} references vs {} hypotheses", references.len(), hypotheses.len())));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut ref_len, mut hyp_len) = (0, 0);
    for (r, h) in references.iter().zip(hypotheses) {
        ref_len += r.len();
        hyp_len += h.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matched[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(bp * log_p.exp())
}

pub fn bleu_text(references: &[&str], hypotheses: &[&str], tokens: BleuTokens) -> Result<f64> {
    let r: Vec<Vec<String>> = references.iter().map(|t| tokens.split(t)).collect();
    let h: Vec<Vec<String>> = hypotheses.iter().map(|t| tokens.split(t)).collect();
    bleu(&r, &h)
}

// --------------------------------------------------------------- reports

/// Render rows as an aligned text table.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells.zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &mut header.iter().copied());
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    let _ = writeln!(out, "{}", rule.join("  "));
    for r in rows {
        line(&mut out, &mut r.iter().map(String::as_str));
    }
    out
}

pub fn retrieval_table(rows: &[(String, RetrievalReport)]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, r)| {
            vec![name.clone(), format!("{:.3}", r.r1), format!("{:.3}", r.r5), format!("{:.3}", r.r10), format!("{:.1}", r.medr)]
        })
        .collect();
    format_table(&["model", "R@1", "R@5", "R@10", "Medr"], &body)
}

/// Score formatting shared by every report path. Values are printed as-is,
/// so error rates above 1 stay visible.
pub fn format_score(v: f64) -> String {
    format!("{v:.3}")
}
