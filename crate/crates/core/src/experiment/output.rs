use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use super::config::{Ranker, IDENTITY_PAIR};
use super::pipeline::{Experiment, Rq1Table, Suite, TransferTable, HIGH, LOW};

pub const PLOT_HEADER: &str = "ranker,pair,query_language,condition,metric,value,seed";

/// One per-seed value behind a plotted bar.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub ranker: String,
    pub pair: String,
    pub query_language: String,
    /// `orig` for the untrained encoder, `ours:<train pair>` for a fine-tuned one.
    pub condition: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

/// Long-format CSV of `rows`; a header-only file when `rows` is empty.
pub fn emit_plot_data(rows: &[PlotRow]) -> String {
    let mut out = String::from(PLOT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{}",
            r.ranker, r.pair, r.query_language, r.condition, r.metric, r.value, r.seed
        );
    }
    out
}

fn with_provenance(provenance: &[String], body: String) -> Vec<u8> {
    let mut out = String::new();
    for line in provenance {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str(&body);
    out.into_bytes()
}

fn rq1_csv(t: &Rq1Table) -> String {
    let mut out = String::from("ranker,pair,query_language,metric,value\n");
    for r in &t.rows {
        let _ = writeln!(out, "{},{},{},{},{:.6}", r.ranker, r.pair, r.query_language, r.metric, r.value);
    }
    out
}

fn rq1_tests_csv(t: &Rq1Table) -> String {
    let mut out = String::from("ranker,pair,metric,mean_high,mean_low,mean_delta,positive,negative,ties,p_value\n");
    for r in &t.tests {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{},{},{},{:.6e}",
            r.ranker,
            r.pair,
            r.metric,
            r.mean_high,
            r.mean_low,
            r.mean_delta,
            r.test.positive,
            r.test.negative,
            r.test.ties,
            r.test.p_value
        );
    }
    out
}

fn transfer_csv(t: &TransferTable) -> String {
    let mut out = String::from("ranker,train_pair,pair,query_language,condition,metric,value\n");
    for r in &t.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.6}",
            r.ranker, r.train_pair, r.pair, r.query_language, r.condition, r.metric, r.value
        );
    }
    out
}

fn comparison_csv(t: &TransferTable) -> String {
    let mut out = String::from(
        "ranker,train_pair,pair,query_language,metric,mean_orig,mean_ours,mean_delta,relative_change,seeds_improved,seeds,positive,negative,ties,p_value\n",
    );
    for c in &t.comparisons {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{:.6e}",
            c.ranker,
            c.train_pair,
            c.pair,
            c.query_language,
            c.metric,
            c.mean_orig,
            c.mean_ours,
            c.mean_delta,
            c.relative_change,
            c.seeds_improved(),
            c.seed_deltas.len(),
            c.test.positive,
            c.test.negative,
            c.test.ties,
            c.test.p_value
        );
    }
    out
}

/// Tables, significance tests and plot data for every stage present in `suite`.
pub(crate) fn table_files(suite: &Suite, provenance: &[String]) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut put = |path: String, body: String| {
        files.insert(PathBuf::from(path), with_provenance(provenance, body));
    };
    if let Some(t) = &suite.rq1 {
        put("tables/rq1.csv".into(), rq1_csv(t));
        put("tables/rq1_tests.csv".into(), rq1_tests_csv(t));
        put("plots/rq1.csv".into(), emit_plot_data(&t.plot));
    }
    for t in [&suite.rq2, &suite.rq3, &suite.rq4].into_iter().flatten() {
        put(format!("tables/{}.csv", t.name), transfer_csv(t));
        put(format!("tables/{}_comparison.csv", t.name), comparison_csv(t));
        put(format!("plots/{}.csv", t.name), emit_plot_data(&t.plot));
    }
    // plot files keep a bare header, so their provenance lives alongside
    if files.keys().any(|p| p.starts_with("plots")) {
        files.insert(PathBuf::from("plots/PROVENANCE.txt"), with_provenance(provenance, String::new()));
    }
    files
}

fn fmt_p(p: f64) -> String {
    if p < 1e-4 {
        format!("{p:.1e}")
    } else {
        format!("{p:.4}")
    }
}

fn transfer_section(out: &mut String, exp: &Experiment, t: &TransferTable, title: &str) {
    let metric = exp.config().report_metric;
    let _ = writeln!(out, "## {title}\n");
    let _ = writeln!(
        out,
        "| ranker | trained on | evaluated on | queries | Orig. | Ours | delta | rel. | seeds improved | p |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|---|");
    for c in t.comparisons.iter().filter(|c| c.metric == metric) {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {:.4} | {:.4} | {:+.4} | {:+.1}% | {}/{} | {} |",
            c.ranker,
            c.train_pair,
            c.pair,
            c.query_language,
            c.mean_orig,
            c.mean_ours,
            c.mean_delta,
            100.0 * c.relative_change,
            c.seeds_improved(),
            c.seed_deltas.len(),
            fmt_p(c.test.p_value)
        );
    }
    out.push('\n');
}

/// Markdown summary of the report metric for every stage in `suite`.
pub fn render_report(exp: &Experiment, suite: &Suite) -> String {
    let cfg = exp.config();
    let metric = cfg.report_metric;
    let mut out = String::from("# Experiment report\n\n");
    let _ = writeln!(out, "Report metric: `{metric}`. Values are means over seeds.\n");
    for line in exp.provenance() {
        let _ = writeln!(out, "- {line}");
    }
    out.push('\n');
    if let Some(t) = &suite.rq1 {
        let _ = writeln!(out, "## RQ1: robustness to variety shift (untrained encoders)\n");
        let _ = writeln!(out, "| ranker | pair | {HIGH} | {LOW} | delta | p |");
        let _ = writeln!(out, "|---|---|---|---|---|---|");
        for r in t.tests.iter().filter(|r| r.metric == metric) {
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} | {:.4} | {:+.4} | {} |",
                r.ranker,
                r.pair,
                r.mean_high,
                r.mean_low,
                r.mean_delta,
                fmt_p(r.test.p_value)
            );
        }
        out.push('\n');
    }
    if let Some(t) = &suite.rq2 {
        transfer_section(&mut out, exp, t, "RQ2: fine-tuning on the training pair");
    }
    if let Some(t) = &suite.rq3 {
        transfer_section(&mut out, exp, t, "RQ3: zero-shot transfer to unseen siblings");
    }
    if let Some(t) = &suite.rq4 {
        transfer_section(&mut out, exp, t, "RQ4: transfer across families");
        if cfg.identity_control {
            let _ = writeln!(out, "Identity control (`{IDENTITY_PAIR}`): high and low values match for every ranker.\n");
        }
    }
    let rankers: Vec<&str> = cfg.rankers.iter().map(|r: &Ranker| r.as_str()).collect();
    let _ = writeln!(out, "Rankers: {}.", rankers.join(", "));
    out
}
