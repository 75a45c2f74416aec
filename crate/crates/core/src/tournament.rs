//! Pairwise comparison harness: judges, order-swap averaging, win/loss/tie
//! tallies and the `(W − L) / T` score over exit-by-exit matrices.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{detokenize, prompt_ids, tokenize, InstructionRecord, EOS_ID};
use crate::error::{Error, Result};
use crate::inference::{greedy_decode, resolve_heads, HeadChoice};
use crate::model::{run_sequence, ExitSet, HeadSource, Parameters, PerExitHeads};
use crate::par;
use crate::tensor::Scalar;

pub const MATRIX_SCHEMA_VERSION: u32 = 1;

/// Outcome of one judged comparison. `WinA` means the response presented
/// first won.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    WinA,
    WinB,
    Tie,
}

pub trait Judge: Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, item: &InstructionRecord, first: &str, second: &str) -> Result<Verdict>;
}

/// `(W − L) / T`.
pub fn pandalm_score(wins: f64, losses: f64, total: f64) -> Result<f64> {
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(format!("total must be positive, got {total}")));
    }
    if wins < 0.0 || losses < 0.0 || wins + losses > total {
        return Err(Error::InvalidArgument(format!(
            "W={wins}, L={losses} inconsistent with T={total}"
        )));
    }
    Ok((wins - losses) / total)
}

/// Rounds half away from zero at three decimals.
pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Fractional outcome of one instruction after both presentation orders.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub wins_a: f64,
    pub wins_b: f64,
    pub ties: f64,
}

/// Raw verdicts for one instruction: `a_first` judged (a, b), `b_first` judged (b, a).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictPair {
    pub a_first: Verdict,
    pub b_first: Verdict,
}

impl VerdictPair {
    pub fn tally(&self) -> Tally {
        let mut t = Tally::default();
        match self.a_first {
            Verdict::WinA => t.wins_a += 0.5,
            Verdict::WinB => t.wins_b += 0.5,
            Verdict::Tie => t.ties += 0.5,
        }
        match self.b_first {
            Verdict::WinA => t.wins_b += 0.5,
            Verdict::WinB => t.wins_a += 0.5,
            Verdict::Tie => t.ties += 0.5,
        }
        t
    }
}

fn judge_both_orders(
    judge: &dyn Judge,
    item: &InstructionRecord,
    index: usize,
    a: &str,
    b: &str,
) -> Result<VerdictPair> {
    let wrap = |e: Error| Error::Evaluation {
        index,
        message: format!("judge {}: {e}", judge.name()),
    };
    Ok(VerdictPair {
        a_first: judge.evaluate(item, a, b).map_err(wrap)?,
        b_first: judge.evaluate(item, b, a).map_err(wrap)?,
    })
}

/// Judges `(a, b)` and `(b, a)`; each verdict contributes 0.5 to the tally it
/// names, mapped back to a/b.
pub fn judge_pair_order_averaged(
    judge: &dyn Judge,
    item: &InstructionRecord,
    index: usize,
    resp_a: &str,
    resp_b: &str,
) -> Result<Tally> {
    Ok(judge_both_orders(judge, item, index, resp_a, resp_b)?.tally())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TournamentCell {
    pub wins: f64,
    pub losses: f64,
    pub ties: f64,
    pub total: usize,
    pub score: f64,
}

impl TournamentCell {
    pub fn new(wins: f64, losses: f64, ties: f64) -> Result<Self> {
        let total = wins + losses + ties;
        if [wins, losses, ties]
            .iter()
            .any(|&x| x < 0.0 || (2.0 * x).fract() != 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "tallies must be non-negative multiples of 0.5: {wins}/{losses}/{ties}"
            )));
        }
        if total.fract() != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "W+L+ties = {total} is not a whole count"
            )));
        }
        Ok(Self {
            wins,
            losses,
            ties,
            total: total as usize,
            score: pandalm_score(wins, losses, total)?,
        })
    }

    pub fn from_tallies(tallies: impl IntoIterator<Item = Tally>) -> Result<Self> {
        let (mut w, mut l, mut t) = (0.0, 0.0, 0.0);
        for x in tallies {
            w += x.wins_a;
            l += x.wins_b;
            t += x.ties;
        }
        Self::new(w, l, t)
    }
}

/// Log of every verdict behind one cell, enough to re-derive its tallies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLog {
    pub row: String,
    pub col: String,
    pub verdicts: Vec<VerdictPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TournamentMatrix {
    pub schema_version: u32,
    pub judge: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// `cells[i][j]` scores row contestant `i` against column contestant `j`.
    pub cells: Vec<Vec<TournamentCell>>,
    #[serde(default)]
    pub logs: Vec<CellLog>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl TournamentMatrix {
    pub fn scores(&self) -> Vec<Vec<f64>> {
        self.cells.iter().map(|r| r.iter().map(|c| c.score).collect()).collect()
    }

    /// Scores rounded to three decimals, `row` header then one column per label.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("row");
        for c in &self.col_labels {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.cells) {
            out.push_str(label);
            for c in row {
                let _ = write!(out, ",{}", round3(c.score));
            }
            out.push('\n');
        }
        out
    }

    /// `(row, col, wins, losses, ties)` triples, the same layout [`ingest_tallies`] reads.
    pub fn tallies_csv(&self) -> String {
        let mut out = String::from("row_exit,col_exit,wins,losses,ties\n");
        for (r, row) in self.row_labels.iter().zip(&self.cells) {
            for (c, cell) in self.col_labels.iter().zip(row) {
                let _ = writeln!(out, "{r},{c},{:.1},{:.1},{:.1}", cell.wins, cell.losses, cell.ties);
            }
        }
        out
    }
}

#[derive(Debug, Deserialize)]
struct TallyRow {
    row_exit: String,
    col_exit: String,
    wins: f64,
    losses: f64,
    ties: f64,
}

fn label_order(labels: BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = labels.into_iter().collect();
    v.sort_by(|a, b| match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    });
    v
}

/// Rebuilds a matrix from recorded `(row, col, W, L, ties)` triples.
pub fn ingest_tallies(csv_text: &str) -> Result<TournamentMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let mut cells: BTreeMap<(String, String), TournamentCell> = BTreeMap::new();
    for (i, rec) in reader.deserialize::<TallyRow>().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let cell = TournamentCell::new(rec.wins, rec.losses, rec.ties).map_err(|e| Error::Schema {
            line,
            message: e.to_string(),
        })?;
        if cells
            .insert((rec.row_exit.clone(), rec.col_exit.clone()), cell)
            .is_some()
        {
            return Err(Error::Schema {
                line,
                message: format!("duplicate cell ({}, {})", rec.row_exit, rec.col_exit),
            });
        }
    }
    let rows = label_order(cells.keys().map(|k| k.0.clone()).collect());
    let cols = label_order(cells.keys().map(|k| k.1.clone()).collect());
    let mut grid = Vec::with_capacity(rows.len());
    for r in &rows {
        let mut row = Vec::with_capacity(cols.len());
        for c in &cols {
            let cell = cells.get(&(r.clone(), c.clone())).ok_or_else(|| Error::Schema {
                line: 0,
                message: format!("missing cell ({r}, {c})"),
            })?;
            row.push(*cell);
        }
        grid.push(row);
    }
    Ok(TournamentMatrix {
        schema_version: MATRIX_SCHEMA_VERSION,
        judge: "ingested".into(),
        row_labels: rows,
        col_labels: cols,
        cells: grid,
        logs: Vec::new(),
        seed: None,
    })
}

/// One model exit taking part in a tournament.
#[derive(Debug, Clone, Copy)]
pub struct Contestant<'a, T> {
    pub model: &'a str,
    pub params: &'a Parameters<T>,
    pub exits: &'a ExitSet,
    pub heads: Option<&'a PerExitHeads<T>>,
    pub head_choice: HeadChoice,
    pub exit: usize,
}

impl<T> Contestant<'_, T> {
    pub fn label(&self) -> String {
        let suffix = match self.head_choice {
            HeadChoice::Shared => "",
            HeadChoice::Adapted => "+heads",
        };
        format!("{}:{}{suffix}", self.model, self.exit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSettings {
    pub max_new_tokens: usize,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self { max_new_tokens: 256 }
    }
}

/// Greedy response of `c` to `item`, without the terminating EOS.
pub fn respond<T: Scalar>(
    c: &Contestant<'_, T>,
    item: &InstructionRecord,
    settings: &GenerationSettings,
) -> Result<String> {
    let source = resolve_heads(c.exits, c.heads, c.exit, c.head_choice)?;
    let ctx = prompt_ids(item);
    if ctx.len() > c.params.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: ctx.len(),
            max: c.params.config.max_seq_len,
        });
    }
    let mut ids = greedy_decode(c.params, source, c.exit, &ctx, settings.max_new_tokens, true)?;
    if ids.last() == Some(&EOS_ID) {
        ids.pop();
    }
    Ok(detokenize(&ids))
}

/// Plays every row contestant against every column contestant on all
/// instructions. Responses are generated once per distinct contestant.
pub fn run_tournament<T: Scalar>(
    rows: &[Contestant<'_, T>],
    cols: &[Contestant<'_, T>],
    instructions: &[InstructionRecord],
    judge: &dyn Judge,
    settings: &GenerationSettings,
) -> Result<TournamentMatrix> {
    if instructions.is_empty() {
        return Err(Error::InvalidArgument(
            "tournament needs at least one instruction".into(),
        ));
    }
    if settings.max_new_tokens < 1 {
        return Err(Error::InvalidArgument("max_new_tokens must be >= 1".into()));
    }
    let mut unique: Vec<&Contestant<'_, T>> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for c in rows.iter().chain(cols) {
        resolve_heads(c.exits, c.heads, c.exit, c.head_choice)?;
        index.entry(c.label()).or_insert_with(|| {
            unique.push(c);
            unique.len() - 1
        });
    }
    let jobs: Vec<(usize, usize)> = (0..unique.len())
        .flat_map(|c| (0..instructions.len()).map(move |i| (c, i)))
        .collect();
    let generated = par::map_ordered(&jobs, |&(c, i)| {
        respond(unique[c], &instructions[i], settings).map_err(|e| Error::Evaluation {
            index: i,
            message: format!("generation for {}: {e}", unique[c].label()),
        })
    });
    let mut responses: Vec<Vec<String>> = vec![Vec::with_capacity(instructions.len()); unique.len()];
    for (&(c, _), r) in jobs.iter().zip(generated) {
        responses[c].push(r?);
    }

    let mut cells = Vec::with_capacity(rows.len());
    let mut logs = Vec::new();
    for r in rows {
        let ra = &responses[index[&r.label()]];
        let mut row = Vec::with_capacity(cols.len());
        for c in cols {
            let cb = &responses[index[&c.label()]];
            let ids: Vec<usize> = (0..instructions.len()).collect();
            let verdicts = par::map_ordered(&ids, |&i| judge_both_orders(judge, &instructions[i], i, &ra[i], &cb[i]))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            row.push(TournamentCell::from_tallies(verdicts.iter().map(VerdictPair::tally))?);
            logs.push(CellLog {
                row: r.label(),
                col: c.label(),
                verdicts,
            });
        }
        cells.push(row);
    }
    Ok(TournamentMatrix {
        schema_version: MATRIX_SCHEMA_VERSION,
        judge: judge.name().to_string(),
        row_labels: rows.iter().map(Contestant::label).collect(),
        col_labels: cols.iter().map(Contestant::label).collect(),
        cells,
        logs,
        seed: None,
    })
}

fn bag(text: &str) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for w in text.split_whitespace() {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Multiset F1 between whitespace tokens; two empty texts score 1.
pub fn token_f1(candidate: &str, gold: &str) -> f64 {
    let (c, g) = (bag(candidate), bag(gold));
    let (nc, ng): (usize, usize) = (c.values().sum(), g.values().sum());
    if nc == 0 && ng == 0 {
        return 1.0;
    }
    if nc == 0 || ng == 0 {
        return 0.0;
    }
    let common: usize = c.iter().map(|(w, n)| (*n).min(*g.get(w).unwrap_or(&0))).sum();
    if common == 0 {
        return 0.0;
    }
    let (p, r) = (common as f64 / nc as f64, common as f64 / ng as f64);
    2.0 * p * r / (p + r)
}

/// Prefers the response with higher token F1 against the gold output.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapJudge {
    pub epsilon: f64,
}

impl Default for OverlapJudge {
    fn default() -> Self {
        Self { epsilon: 0.01 }
    }
}

fn verdict_from_margin(first: f64, second: f64, epsilon: f64) -> Verdict {
    if (first - second).abs() < epsilon {
        Verdict::Tie
    } else if first > second {
        Verdict::WinA
    } else {
        Verdict::WinB
    }
}

impl Judge for OverlapJudge {
    fn name(&self) -> &str {
        "overlap"
    }

    fn evaluate(&self, item: &InstructionRecord, first: &str, second: &str) -> Result<Verdict> {
        if first == second {
            return Ok(Verdict::Tie);
        }
        Ok(verdict_from_margin(
            token_f1(first, &item.output),
            token_f1(second, &item.output),
            self.epsilon,
        ))
    }
}

/// Prefers the response with the higher mean log-probability per token
/// (response bytes plus EOS) under a frozen scorer given the rendered prompt.
#[derive(Debug, Clone)]
pub struct LoglikJudge<T> {
    pub scorer: Parameters<T>,
    pub epsilon: f64,
}

impl<T: Scalar> LoglikJudge<T> {
    pub fn new(scorer: Parameters<T>) -> Self {
        Self { scorer, epsilon: 0.02 }
    }

    /// Mean log-probability of `response` + EOS at the scorer's last block.
    /// Responses longer than the context are scored on the prefix that fits.
    pub fn mean_logprob(&self, item: &InstructionRecord, response: &str) -> Result<f64> {
        let cfg = &self.scorer.config;
        let mut seq = prompt_ids(item);
        let prompt_len = seq.len();
        seq.extend(tokenize(response));
        seq.push(EOS_ID);
        let keep = seq.len().min(cfg.max_seq_len + 1);
        if keep <= prompt_len {
            return Err(Error::SequenceTooLong {
                len: prompt_len,
                max: cfg.max_seq_len,
            });
        }
        seq.truncate(keep);
        let run = run_sequence(
            &self.scorer,
            &seq[..keep - 1],
            &[cfg.n_blocks],
            HeadSource::Shared,
            false,
        )?;
        let logits = &run.exits[0].logits;
        let v = cfg.vocab_size;
        let mut total = 0.0;
        for t in prompt_len - 1..keep - 1 {
            let row: Vec<f64> = logits[t * v..(t + 1) * v]
                .iter()
                .map(|x| x.to_f64().unwrap_or(f64::NAN))
                .collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += row[seq[t + 1] as usize] - lse;
        }
        let mean = total / (keep - prompt_len) as f64;
        if !mean.is_finite() {
            return Err(Error::NumericFailure(
                "scorer produced a non-finite log-likelihood".into(),
            ));
        }
        Ok(mean)
    }
}

impl<T: Scalar> Judge for LoglikJudge<T> {
    fn name(&self) -> &str {
        "loglik"
    }

    fn evaluate(&self, item: &InstructionRecord, first: &str, second: &str) -> Result<Verdict> {
        if first == second {
            return Ok(Verdict::Tie);
        }
        Ok(verdict_from_margin(
            self.mean_logprob(item, first)?,
            self.mean_logprob(item, second)?,
            self.epsilon,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    Overlap,
    Loglik,
}

/// Tie thresholds for the built-in judges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeConfig {
    pub overlap_epsilon: f64,
    pub loglik_epsilon: f64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            overlap_epsilon: 0.01,
            loglik_epsilon: 0.02,
        }
    }
}

/// Builds a built-in judge; the log-likelihood judge needs a scorer model.
pub fn builtin_judge(kind: JudgeKind, scorer: Option<Parameters<f32>>, cfg: &JudgeConfig) -> Result<Box<dyn Judge>> {
    match kind {
        JudgeKind::Overlap => Ok(Box::new(OverlapJudge {
            epsilon: cfg.overlap_epsilon,
        })),
        JudgeKind::Loglik => {
            let scorer = scorer.ok_or_else(|| Error::Config("the loglik judge needs a scorer checkpoint".into()))?;
            Ok(Box::new(LoglikJudge {
                scorer,
                epsilon: cfg.loglik_epsilon,
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    struct Fixed(Verdict);
    impl Judge for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn evaluate(&self, _: &InstructionRecord, _: &str, _: &str) -> Result<Verdict> {
            Ok(self.0)
        }
    }

    struct PrefersA;
    impl Judge for PrefersA {
        fn name(&self) -> &str {
            "prefers-a"
        }
        fn evaluate(&self, _: &InstructionRecord, first: &str, second: &str) -> Result<Verdict> {
            Ok(if first.starts_with('a') {
                Verdict::WinA
            } else if second.starts_with('a') {
                Verdict::WinB
            } else {
                Verdict::Tie
            })
        }
    }

    fn item(gold: &str) -> InstructionRecord {
        InstructionRecord {
            instruction: "Say it.".into(),
            input: String::new(),
            output: gold.into(),
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(round3(pandalm_score(147.0, 23.0, 170.0).unwrap()), 0.729);
        assert_eq!(round3(pandalm_score(146.5, 23.5, 170.0).unwrap()), 0.724);
        assert_eq!(pandalm_score(40.0, 40.0, 170.0).unwrap(), 0.0);
        assert!(pandalm_score(1.0, 1.0, 0.0).is_err());
        assert!(pandalm_score(100.0, 80.0, 170.0).is_err());
    }

    #[test]
    fn order_averaging_examples() {
        let it = item("x");
        let t = judge_pair_order_averaged(&PrefersA, &it, 0, "a", "b").unwrap();
        assert_eq!((t.wins_a, t.wins_b, t.ties), (1.0, 0.0, 0.0));
        let t = judge_pair_order_averaged(&Fixed(Verdict::WinA), &it, 0, "a", "b").unwrap();
        assert_eq!((t.wins_a, t.wins_b, t.ties), (0.5, 0.5, 0.0));
        let t = judge_pair_order_averaged(&Fixed(Verdict::Tie), &it, 0, "a", "b").unwrap();
        assert_eq!((t.wins_a, t.wins_b, t.ties), (0.0, 0.0, 1.0));
    }

    #[test]
    fn overlap_judge_examples() {
        let j = OverlapJudge::default();
        let it = item("the cat sat");
        assert_eq!(j.evaluate(&it, "dog", "dog").unwrap(), Verdict::Tie);
        assert_eq!(j.evaluate(&it, "the cat sat", "blue sky").unwrap(), Verdict::WinA);
        assert_eq!(j.evaluate(&it, "blue sky", "the cat sat").unwrap(), Verdict::WinB);
        assert_eq!(token_f1("", ""), 1.0);
        assert!((token_f1("the cat", "the cat sat") - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cell_rejects_quarter_counts() {
        assert!(TournamentCell::new(1.25, 0.0, 0.75).is_err());
        let c = TournamentCell::new(2.5, 1.5, 1.0).unwrap();
        assert_eq!(c.total, 5);
        assert!((c.score - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ingest_round_trip() {
        let text = "row_exit,col_exit,wins,losses,ties\n2,2,1.5,0.5,0\n2,4,0,2,0\n4,2,2,0,0\n4,4,1,1,0\n";
        let m = ingest_tallies(text).unwrap();
        assert_eq!(m.row_labels, vec!["2", "4"]);
        assert_eq!(m.cells[0][1].score, -1.0);
        assert_eq!(ingest_tallies(&m.tallies_csv()).unwrap().cells, m.cells);
        assert!(m.scores_csv().starts_with("row,2,4\n2,0.5,-1\n"));
        assert!(matches!(
            ingest_tallies("row_exit,col_exit,wins,losses,ties\n2,2,x,0,0\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn loglik_judge_is_order_insensitive() {
        let cfg = ModelConfig {
            vocab_size: 258,
            max_seq_len: 200,
            ..ModelConfig::tiny()
        };
        let j = LoglikJudge::new(Parameters::<f64>::init(&cfg, 1).unwrap());
        let it = item("");
        let (a, b) = ("yes", "no way");
        let v1 = j.evaluate(&it, a, b).unwrap();
        let v2 = j.evaluate(&it, b, a).unwrap();
        let swapped = match v2 {
            Verdict::WinA => Verdict::WinB,
            Verdict::WinB => Verdict::WinA,
            Verdict::Tie => Verdict::Tie,
        };
        assert_eq!(v1, swapped);
        assert_eq!(j.evaluate(&it, a, a).unwrap(), Verdict::Tie);
    }

    #[test]
    fn loglik_needs_scorer() {
        assert!(matches!(
            builtin_judge(JudgeKind::Loglik, None, &JudgeConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
