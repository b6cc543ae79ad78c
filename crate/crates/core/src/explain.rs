//! Maps selected feature points back to source snippets and renders reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Detector;
use crate::rpam::Prediction;
use crate::scalar::Scalar;

pub const DEFAULT_DEPTH: usize = 25;

/// One distinct source span reached by a selected feature point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    /// Byte offsets into the source.
    pub start: usize,
    pub end: usize,
    pub text: String,
    /// Largest activation among the feature points on this span.
    pub value: f64,
    /// Feature-matrix cell that holds `value`.
    pub row: usize,
    pub slot: usize,
    pub height: usize,
    pub height_index: usize,
    /// Kernel index within its height.
    pub kernel: usize,
    /// Token index range of the window.
    pub token_start: usize,
    pub token_end: usize,
}

impl Snippet {
    pub fn span(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordCount {
    pub token: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetReport {
    pub source: String,
    pub prediction: Prediction,
    /// Ranked by value, then by position.
    pub snippets: Vec<Snippet>,
    /// Non-punctuation tokens inside the reported snippets, most frequent first.
    pub frequencies: Vec<WordCount>,
}

/// Ranks the windows behind every selected feature point of `source`.
///
/// Identical spans are merged, keeping the largest activation; at most
/// `depth` snippets are kept.
pub fn attribute<T: Scalar>(detector: &Detector<T>, source: &str, depth: usize) -> Result<SnippetReport> {
    let (tokens, ids) = detector.encode_source(source)?;
    let pass = detector.model.forward(&ids)?;
    let matrix = &pass.matrix;
    let toks = tokens.tokens();

    let mut best: HashMap<(usize, usize), Snippet> = HashMap::new();
    for row in 0..matrix.rows() {
        let (height_index, kernel) = matrix.kernel_of(row);
        for slot in 0..matrix.top_p() {
            let Some(window) = matrix.window(row, slot) else {
                continue;
            };
            let value = matrix.values()[[row, slot]].to_f64_lossy();
            let start = toks[window.start].span.start;
            let end = toks[window.end - 1].span.end;
            let candidate = Snippet {
                start,
                end,
                text: source[start..end].to_string(),
                value,
                row,
                slot,
                height: matrix.height_of(row),
                height_index,
                kernel,
                token_start: window.start,
                token_end: window.end,
            };
            match best.get(&(start, end)) {
                Some(existing) if existing.value >= value => {}
                _ => {
                    best.insert((start, end), candidate);
                }
            }
        }
    }
    let mut snippets: Vec<Snippet> = best.into_values().collect();
    snippets.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
            .then(a.row.cmp(&b.row))
    });
    snippets.truncate(depth);

    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &snippets {
        for t in &toks[s.token_start..s.token_end] {
            if !t.is_punctuation() {
                *tally.entry(t.text.as_str()).or_default() += 1;
            }
        }
    }
    let mut frequencies: Vec<WordCount> = tally
        .into_iter()
        .map(|(token, count)| WordCount {
            token: token.to_string(),
            count,
        })
        .collect();
    frequencies.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.token.cmp(&b.token)));

    Ok(SnippetReport {
        source: source.to_string(),
        prediction: Prediction::new(pass.probability.to_f64_lossy(), detector.config().threshold),
        snippets,
        frequencies,
    })
}

/// Union of all snippet spans as sorted, disjoint, non-touching ranges.
pub fn highlight_regions(report: &SnippetReport) -> Vec<Range<usize>> {
    let mut spans: Vec<Range<usize>> = report.snippets.iter().map(Snippet::span).collect();
    spans.sort_by_key(|r| (r.start, r.end));
    let mut merged: Vec<Range<usize>> = Vec::new();
    for s in spans {
        match merged.last_mut() {
            Some(last) if s.start <= last.end => last.end = last.end.max(s.end),
            _ => merged.push(s),
        }
    }
    merged
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Html,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "html" => Ok(ReportFormat::Html),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

fn escape_cell(s: &str) -> String {
    escape_html(&s.split_whitespace().collect::<Vec<_>>().join(" ")).replace('|', "\\|")
}

fn highlighted_source(report: &SnippetReport) -> String {
    let mut out = String::from("<pre>");
    let mut pos = 0;
    for r in highlight_regions(report) {
        out.push_str(&escape_html(&report.source[pos..r.start]));
        out.push_str("<mark>");
        out.push_str(&escape_html(&report.source[r.clone()]));
        out.push_str("</mark>");
        pos = r.end;
    }
    out.push_str(&escape_html(&report.source[pos..]));
    out.push_str("</pre>\n");
    out
}

/// Source listing with highlighted snippets, the snippet ranking and the
/// word-frequency table.
pub fn render_report(report: &SnippetReport, format: ReportFormat) -> String {
    let p = &report.prediction;
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            out.push_str("# Attribution report\n\n");
            let _ = writeln!(
                out,
                "Probability {:.6}, decision {} at threshold {}.\n",
                p.probability, p.decision, p.threshold
            );
            out.push_str("## Source\n\n");
            out.push_str(&highlighted_source(report));
            out.push_str("\n## Snippets\n\n| rank | value | height | row | bytes | text |\n|---|---|---|---|---|---|\n");
            for (i, s) in report.snippets.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "| {} | {:.6} | {} | {} | {}..{} | `{}` |",
                    i + 1,
                    s.value,
                    s.height,
                    s.row,
                    s.start,
                    s.end,
                    escape_cell(&s.text).replace('`', "'")
                );
            }
            out.push_str("\n## Word frequencies\n\n| token | count |\n|---|---|\n");
            for w in &report.frequencies {
                let _ = writeln!(out, "| {} | {} |", escape_cell(&w.token), w.count);
            }
        }
        ReportFormat::Html => {
            out.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Attribution report</title>\n");
            out.push_str("<style>mark { background: #ffd54f; } td, th { padding: 2px 8px; text-align: left; }</style>\n</head>\n<body>\n");
            out.push_str("<h1>Attribution report</h1>\n");
            let _ = writeln!(
                out,
                "<p>Probability {:.6}, decision {} at threshold {}.</p>",
                p.probability, p.decision, p.threshold
            );
            out.push_str("<h2>Source</h2>\n");
            out.push_str(&highlighted_source(report));
            out.push_str("<h2>Snippets</h2>\n<table>\n<tr><th>rank</th><th>value</th><th>height</th><th>row</th><th>bytes</th><th>text</th></tr>\n");
            for (i, s) in report.snippets.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "<tr><td>{}</td><td>{:.6}</td><td>{}</td><td>{}</td><td>{}..{}</td><td><code>{}</code></td></tr>",
                    i + 1,
                    s.value,
                    s.height,
                    s.row,
                    s.start,
                    s.end,
                    escape_html(&s.text)
                );
            }
            out.push_str("</table>\n<h2>Word frequencies</h2>\n<table>\n<tr><th>token</th><th>count</th></tr>\n");
            for w in &report.frequencies {
                let _ = writeln!(out, "<tr><td>{}</td><td>{}</td></tr>", escape_html(&w.token), w.count);
            }
            out.push_str("</table>\n</body>\n</html>\n");
        }
    }
    out
}
