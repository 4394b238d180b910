//! Text-downsampling sweeps and result reporting.
//!
//! A sweep trains every `(strategy, fraction, seed)` cell, collects one
//! long-format result row per successful cell, and records failing cells
//! without stopping. Reports average rows that share a strategy and fraction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, TextKind};
use crate::error::{Error, Result};
use crate::evaluation::{format_score, format_table};
use crate::training::{compute_features, train_prepared, Prepared, RunOutcome, Strategy, TrainRunConfig};

/// Geometric ladder `1, 1/3, 1/9, …` with `n` rungs.
pub fn third_ladder(n: usize) -> Vec<f64> {
    (0..n).map(|k| 3f64.powi(-(k as i32))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub fractions: Vec<f64>,
    pub strategies: Vec<Strategy>,
    /// Seeds per cell, counted up from the base config's seed.
    pub seeds: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            fractions: third_ladder(6),
            strategies: vec![Strategy::PipeInd, Strategy::PipeSeq, Strategy::MtlTranscribe, Strategy::MtlMatch],
            seeds: 3,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.fractions.is_empty() || self.strategies.is_empty() || self.seeds == 0 {
            return bad("a sweep needs at least one fraction, strategy and seed".into());
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return bad(format!("sweep fraction {f} outside (0, 1]"));
        }
        if self.fractions.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!("sweep fractions must be strictly decreasing: {:?}", self.fractions));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.fractions.len() * self.strategies.len() * self.seeds
    }
}

/// One trained-and-evaluated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: Strategy,
    pub fraction: f64,
    pub seed: u64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
    pub gallery: usize,
    /// Validation WER of the run's ASR component, if any; not clamped.
    pub wer: Option<f64>,
    pub bleu: Option<f64>,
    pub nlu_texts: Option<usize>,
    pub seconds: f64,
}

impl ResultRow {
    pub fn from_outcome(out: &RunOutcome) -> Self {
        let text = |k: TextKind| out.text_metric.filter(|m| m.kind == k).map(|m| m.value);
        let r = &out.retrieval;
        Self {
            strategy: out.config.strategy,
            fraction: out.config.text_fraction,
            seed: out.config.seed,
            r1: r.r1,
            r5: r.r5,
            r10: r.r10,
            medr: r.medr,
            gallery: r.gallery,
            wer: text(TextKind::Transcription),
            bleu: text(TextKind::Translation),
            nlu_texts: out.nlu_train_texts,
            seconds: out.seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub strategy: Strategy,
    pub fraction: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
}

/// Progress events, one per finished cell.
pub enum CellEvent<'a> {
    Done(&'a ResultRow),
    Failed(&'a CellFailure),
}

/// Run every cell of the sweep over `ds`, starting from `base`. MFCCs are
/// computed once and shared; a failing cell is recorded and skipped.
pub fn run_sweep(spec: &SweepSpec, base: &TrainRunConfig, ds: &Dataset, mut progress: impl FnMut(CellEvent)) -> Result<SweepOutcome> {
    spec.validate()?;
    let features = compute_features(ds, base)?;
    let mut out = SweepOutcome::default();
    for &strategy in &spec.strategies {
        for &fraction in &spec.fractions {
            for k in 0..spec.seeds as u64 {
                let cfg = TrainRunConfig { strategy, text_fraction: fraction, seed: base.seed.wrapping_add(k), ..base.clone() };
                let run = Prepared::with_features(ds, features.clone(), &cfg).and_then(|p| train_prepared(&cfg, &p));
                match run {
                    Ok(o) => {
                        out.rows.push(ResultRow::from_outcome(&o));
                        progress(CellEvent::Done(out.rows.last().unwrap()));
                    }
                    Err(e) => {
                        out.failures.push(CellFailure { strategy, fraction, seed: cfg.seed, error: e.to_string() });
                        progress(CellEvent::Failed(out.failures.last().unwrap()));
                    }
                }
            }
        }
    }
    Ok(out)
}

// ------------------------------------------------------------------ CSV

const RESULT_HEADER: [&str; 12] =
    ["strategy", "fraction", "seed", "r1", "r5", "r10", "medr", "gallery", "wer", "bleu", "nlu_texts", "seconds"];

fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn results_csv(rows: &[ResultRow]) -> Result<String> {
    to_csv(rows, &RESULT_HEADER)
}

pub fn failures_csv(rows: &[CellFailure]) -> Result<String> {
    to_csv(rows, &["strategy", "fraction", "seed", "error"])
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.iter().ne(RESULT_HEADER) {
        return Err(Error::invalid(format!("unexpected results header `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_results_csv(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: 0, message: e.to_string() })
}

// -------------------------------------------------------------- reports

/// Mean over the seeds of one `(strategy, fraction)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub fraction: f64,
    pub seeds: Vec<u64>,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
    pub wer: Option<f64>,
    pub bleu: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Group rows by strategy and fraction (first-appearance order) and average.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<(Strategy, f64, Vec<&ResultRow>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|(s, f, _)| *s == r.strategy && f.to_bits() == r.fraction.to_bits()) {
            Some(g) => g.2.push(r),
            None => groups.push((r.strategy, r.fraction, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(strategy, fraction, g)| {
            let avg = |f: fn(&ResultRow) -> f64| mean(g.iter().map(|r| f(r))).expect("groups are non-empty");
            SummaryRow {
                strategy,
                fraction,
                seeds: g.iter().map(|r| r.seed).collect(),
                r1: avg(|r| r.r1),
                r5: avg(|r| r.r5),
                r10: avg(|r| r.r10),
                medr: avg(|r| r.medr),
                wer: mean(g.iter().filter_map(|r| r.wer)),
                bleu: mean(g.iter().filter_map(|r| r.bleu)),
            }
        })
        .collect()
}

/// Aligned text table of summary rows. Scores are printed unclamped.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), format_score);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.strategy.to_string(),
                format!("{:.4}", r.fraction),
                r.seeds.len().to_string(),
                format_score(r.r1),
                format_score(r.r5),
                format_score(r.r10),
                format!("{:.1}", r.medr),
                opt(r.wer),
                opt(r.bleu),
            ]
        })
        .collect();
    format_table(&["strategy", "fraction", "seeds", "R@1", "R@5", "R@10", "Medr", "WER", "BLEU"], &body)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub strategy: Strategy,
    pub fraction: f64,
    pub mean_r10: f64,
}

/// Text fraction against mean R@10, one series per strategy.
pub fn plot_points(rows: &[SummaryRow]) -> Vec<PlotPoint> {
    rows.iter().map(|r| PlotPoint { strategy: r.strategy, fraction: r.fraction, mean_r10: r.r10 }).collect()
}

pub fn plot_csv(points: &[PlotPoint]) -> Result<String> {
    to_csv(points, &["strategy", "fraction", "mean_r10"])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_toy_dataset, SplitSpec};
    use crate::encoders::EncoderConfig;

    fn row(strategy: Strategy, fraction: f64, seed: u64, r10: f64, wer: Option<f64>) -> ResultRow {
        ResultRow {
            strategy,
            fraction,
            seed,
            r1: r10 / 2.0,
            r5: r10,
            r10,
            medr: 2.0,
            gallery: 10,
            wer,
            bleu: None,
            nlu_texts: None,
            seconds: 0.5,
        }
    }

    #[test]
    fn ladder_and_validation() {
        let l = third_ladder(4);
        assert_eq!(l[0], 1.0);
        assert!((l[3] - 1.0 / 27.0).abs() < 1e-15);
        assert!(SweepSpec::default().validate().is_ok());
        assert_eq!(SweepSpec::default().fractions.len(), 6);
        for fractions in [vec![], vec![1.0, 1.0], vec![0.5, 1.0], vec![1.0, 0.0], vec![1.5]] {
            assert!(SweepSpec { fractions, ..SweepSpec::default() }.validate().is_err());
        }
        assert!(SweepSpec { seeds: 0, ..SweepSpec::default() }.validate().is_err());
    }

    #[test]
    fn seeds_collapse_to_their_mean() {
        let rows: Vec<_> = [0.40, 0.42, 0.44].iter().enumerate().map(|(k, &r)| row(Strategy::PipeSeq, 1.0, k as u64, r, Some(0.1))).collect();
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert!((s[0].r10 - 0.42).abs() < 1e-12);
        assert_eq!(s[0].seeds, vec![0, 1, 2]);
        assert_eq!(s[0].bleu, None);
        let table = summary_table(&s);
        assert_eq!(table.lines().count(), 3);
        assert!(table.contains("0.420"));
    }

    #[test]
    fn groups_keep_order_and_separate_fractions() {
        let rows = vec![
            row(Strategy::MtlMatch, 1.0, 0, 0.5, None),
            row(Strategy::PipeSeq, 1.0, 0, 0.6, Some(0.2)),
            row(Strategy::MtlMatch, 1.0 / 3.0, 0, 0.4, None),
            row(Strategy::MtlMatch, 1.0, 1, 0.7, None),
        ];
        let s = summarize(&rows);
        let keys: Vec<_> = s.iter().map(|r| (r.strategy, r.fraction, r.seeds.len())).collect();
        assert_eq!(keys, vec![(Strategy::MtlMatch, 1.0, 2), (Strategy::PipeSeq, 1.0, 1), (Strategy::MtlMatch, 1.0 / 3.0, 1)]);
        assert_eq!(plot_points(&s)[0].mean_r10, 0.6);
    }

    #[test]
    fn empty_results_give_a_header_only_table() {
        let table = summary_table(&summarize(&[]));
        assert_eq!(table.lines().count(), 2);
        assert!(table.starts_with("strategy"));
        assert_eq!(results_csv(&[]).unwrap().trim(), RESULT_HEADER.join(","));
        assert!(parse_results_csv(&results_csv(&[]).unwrap()).unwrap().is_empty());
        assert_eq!(plot_csv(&[]).unwrap().trim(), "strategy,fraction,mean_r10");
    }

    #[test]
    fn results_csv_round_trip_and_malformed_input() {
        let rows = vec![row(Strategy::PipeInd, 1.0 / 9.0, 4, 0.3, Some(1.25)), row(Strategy::TextImage, 1.0, 0, 0.9, None)];
        let text = results_csv(&rows).unwrap();
        assert_eq!(parse_results_csv(&text).unwrap(), rows);
        assert!(parse_results_csv("a,b\n1,2\n").is_err());
        let broken = text.replacen("pipe-ind", "no-such-strategy", 1);
        assert!(parse_results_csv(&broken).is_err());
    }

    #[test]
    fn error_rates_above_one_are_printed_as_is() {
        let s = summarize(&[row(Strategy::PipeSeq, 1.0, 0, 0.2, Some(1.034))]);
        assert!(summary_table(&s).contains("1.034"));
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let mut ds = synth_toy_dataset(6, 2, 6, 3);
        for r in &mut ds.records {
            r.translation = None;
        }
        let base = TrainRunConfig {
            epochs: 1,
            asr_epochs: Some(1),
            batch_size: 4,
            beam_width: 2,
            encoder: EncoderConfig {
                conv_channels: 4,
                speech_hidden: 8,
                speech_layers: 1,
                char_embed: 4,
                text_hidden: 8,
                text_layers: 1,
                asr_hidden: 8,
                asr_layers: 1,
                decoder_hidden: 8,
                decoder_embed: 4,
                mtl_asr_hidden: 8,
                mtl_asr_layers: (1, 1, 1),
                ..EncoderConfig::toy()
            },
            split: Some(SplitSpec { n_val_images: 2, n_test_images: 0, seed: 0 }),
            ..TrainRunConfig::toy(Strategy::SpeechImage)
        };
        let spec = SweepSpec { fractions: vec![1.0, 0.5], strategies: vec![Strategy::PipeInd, Strategy::MtlTranslate], seeds: 2 };
        let mut events = 0;
        let out = run_sweep(&spec, &base, &ds, |_| events += 1).unwrap();
        assert_eq!(events, spec.cells());
        assert_eq!(out.rows.len(), 4);
        assert_eq!(out.failures.len(), 4);
        assert!(out.failures.iter().all(|f| f.strategy == Strategy::MtlTranslate));
        let order: Vec<_> = out.rows.iter().map(|r| (r.fraction, r.seed)).collect();
        assert_eq!(order, vec![(1.0, 0), (1.0, 1), (0.5, 0), (0.5, 1)]);
        assert!(out.rows.iter().all(|r| r.wer.is_some() && r.nlu_texts.is_some()));
        assert_eq!(failures_csv(&out.failures).unwrap().lines().count(), 5);
    }
}
