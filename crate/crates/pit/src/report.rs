//! Evaluation reports: `key = value` text, one entry per line, floats in
//! shortest round-trip form.
//!
//! ```text
//! # pit-report 1
//! eval_set = test | train
//! distance = concat | sum_per_branch
//! num_queries = <n>
//! num_valid_queries = <n>
//! map = <f64>
//! rank1 = <f64>   (also rank5, rank10, rank20)
//! cmc = <f64> <f64> ...            full curve, k = 1..gallery size
//! ranking.<query video id> = <gallery video ids, nearest first>
//! trials = <n>                     only with repeated trials
//! trial.<i>.map = <f64>            and trial.<i>.rank1 .. rank20
//! config.<key> = <value>           resolved model config
//! ```
//!
//! With repeated trials the top-level `map`, `rank*` and `cmc` are the
//! trial means and the per-query rankings are omitted.

use std::fmt::Write as _;

use pit_core::retrieval::{RetrievalReport, TrialsReport, REPORT_RANKS};

pub const REPORT_HEADER: &str = "# pit-report 1";

fn floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

/// Summary lines shared by reports and the metrics logged in checkpoints.
pub fn summary(eval_set: &str, report: &RetrievalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "eval_set = {eval_set}");
    let _ = writeln!(s, "num_queries = {}", report.num_queries);
    let _ = writeln!(s, "num_valid_queries = {}", report.num_valid_queries);
    let _ = writeln!(s, "map = {:?}", report.map);
    for k in REPORT_RANKS {
        let _ = writeln!(s, "rank{k} = {:?}", report.rank(k));
    }
    let _ = writeln!(s, "cmc = {}", floats(&report.cmc));
    s
}

pub fn render(eval_set: &str, distance: &str, report: &RetrievalReport, config: &str) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    let _ = writeln!(s, "distance = {distance}");
    s.push_str(&summary(eval_set, report));
    for q in &report.queries {
        let ids: Vec<String> = q.ranked_video_ids.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "ranking.{} = {}", q.query.video_id, ids.join(" "));
    }
    push_config(&mut s, config);
    s
}

pub fn render_trials(eval_set: &str, distance: &str, trials: &TrialsReport, config: &str) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    let _ = writeln!(s, "eval_set = {eval_set}");
    let _ = writeln!(s, "distance = {distance}");
    let _ = writeln!(s, "map = {:?}", trials.map);
    for k in REPORT_RANKS {
        let _ = writeln!(s, "rank{k} = {:?}", trials.rank(k));
    }
    let _ = writeln!(s, "cmc = {}", floats(&trials.cmc));
    let _ = writeln!(s, "trials = {}", trials.trials.len());
    for (i, t) in trials.trials.iter().enumerate() {
        let _ = writeln!(s, "trial.{i}.num_valid_queries = {}", t.num_valid_queries);
        let _ = writeln!(s, "trial.{i}.map = {:?}", t.map);
        for k in REPORT_RANKS {
            let _ = writeln!(s, "trial.{i}.rank{k} = {:?}", t.rank(k));
        }
    }
    push_config(&mut s, config);
    s
}

fn push_config(s: &mut String, config: &str) {
    for line in config.lines() {
        let _ = writeln!(s, "config.{line}");
    }
}

/// Value of `key` in a `key = value` text.
pub fn lookup<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim())
    })
}
