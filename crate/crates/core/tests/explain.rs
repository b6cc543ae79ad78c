use afpnet::explain::{attribute, highlight_regions, render_report, ReportFormat, Snippet, SnippetReport};
use afpnet::lexer::{is_punctuation, vocab_from_sequences, tokenize};
use afpnet::{Afpnet, Detector, ModelConfig, Prediction};
use proptest::prelude::*;

fn detector(sources: &[&str], heights: Vec<usize>, seed: u64) -> Detector<f64> {
    let seqs: Vec<_> = sources.iter().map(|s| tokenize(s).unwrap()).collect();
    let vocab = vocab_from_sequences(seqs.iter(), 1).unwrap();
    let config = ModelConfig {
        embed_dim: 6,
        heights,
        kernels_per_height: 3,
        top_p: 2,
        blocks: 1,
        heads: 1,
        ..Default::default()
    };
    Detector::new(Afpnet::init(config, vocab.len(), seed).unwrap(), vocab).unwrap()
}

const SRC: &str = "contract Bank {\n  function pay() public {\n    msg.sender.call.value(x)(\"\");\n    balances[msg.sender] = 0;\n  }\n}\n";

#[test]
fn single_window_is_the_only_snippet() {
    let d = detector(&["alpha beta"], vec![2], 0);
    let report = attribute(&d, "alpha   beta", 25).unwrap();
    assert_eq!(report.snippets.len(), 1);
    assert_eq!(report.snippets[0].span(), 0..12);
    assert_eq!(report.snippets[0].text, "alpha   beta");
}

#[test]
fn activations_are_feature_matrix_cells() {
    let d = detector(&[SRC], vec![2, 3], 4);
    let report = attribute(&d, SRC, 1000).unwrap();
    let (_, ids) = d.encode_source(SRC).unwrap();
    let m = d.model.feature_matrix(&ids).unwrap();
    assert!(!report.snippets.is_empty());
    for s in &report.snippets {
        assert_eq!(s.value, m.values()[[s.row, s.slot]]);
        assert_eq!(m.window(s.row, s.slot), Some(s.token_start..s.token_end));
        assert_eq!(&SRC[s.span()], s.text);
    }
    let mut spans: Vec<_> = report.snippets.iter().map(|s| (s.start, s.end)).collect();
    spans.sort();
    spans.dedup();
    assert_eq!(spans.len(), report.snippets.len());
    for w in report.snippets.windows(2) {
        assert!(w[0].value >= w[1].value);
    }
}

#[test]
fn depth_limits_and_frequencies_skip_punctuation() {
    let d = detector(&[SRC], vec![2, 3], 4);
    let report = attribute(&d, SRC, 3).unwrap();
    assert!(report.snippets.len() <= 3);
    assert!(!report.frequencies.is_empty());
    assert!(report.frequencies.iter().all(|w| !is_punctuation(&w.token)));
    for w in report.frequencies.windows(2) {
        assert!(w[0].count >= w[1].count);
    }
}

#[test]
fn reports_are_deterministic() {
    let d = detector(&[SRC], vec![2, 3], 8);
    let a = attribute(&d, SRC, 25).unwrap();
    let b = attribute(&d.clone(), SRC, 25).unwrap();
    assert_eq!(a, b);
    for f in [ReportFormat::Markdown, ReportFormat::Html] {
        assert_eq!(render_report(&a, f), render_report(&b, f));
    }
}

fn snippet(start: usize, end: usize, source: &str, value: f64) -> Snippet {
    Snippet {
        start,
        end,
        text: source[start..end].to_string(),
        value,
        row: 0,
        slot: 0,
        height: 2,
        height_index: 0,
        kernel: 0,
        token_start: 0,
        token_end: 2,
    }
}

#[test]
fn overlapping_spans_merge_into_one_highlight() {
    let source = "aaa bbb ccc ddd";
    let report = SnippetReport {
        source: source.into(),
        prediction: Prediction::new(0.7, 0.5),
        snippets: vec![snippet(0, 7, source, 2.0), snippet(4, 11, source, 1.0)],
        frequencies: vec![],
    };
    assert_eq!(highlight_regions(&report), vec![0..11]);
    let html = render_report(&report, ReportFormat::Html);
    assert_eq!(html.matches("<mark>").count(), 1);
    assert!(html.contains("<mark>aaa bbb ccc</mark> ddd"));
    let md = render_report(&report, ReportFormat::Markdown);
    assert!(md.contains("`aaa bbb`") && md.contains("`bbb ccc`"));
}

#[test]
fn empty_report_still_lists_source() {
    let report = SnippetReport {
        source: "x < y && z".into(),
        prediction: Prediction::new(0.1, 0.5),
        snippets: vec![],
        frequencies: vec![],
    };
    for f in [ReportFormat::Markdown, ReportFormat::Html] {
        let doc = render_report(&report, f);
        assert!(doc.contains("x &lt; y &amp;&amp; z"));
        assert!(!doc.contains("<mark>"));
    }
}

proptest! {
    #[test]
    fn highlights_stay_inside_the_source(
        words in prop::collection::vec(prop::sample::select(vec!["a", "b", "=", ";", "x", "é", "call", "(", ")"]), 2..30),
        seed in 0u64..50,
    ) {
        let source = words.join(" ");
        let d = detector(&[&source], vec![2, 3], seed);
        let report = attribute(&d, &source, 25).unwrap();
        let regions = highlight_regions(&report);
        for r in &regions {
            prop_assert!(r.start < r.end && r.end <= source.len());
            prop_assert!(source.is_char_boundary(r.start) && source.is_char_boundary(r.end));
        }
        for w in regions.windows(2) {
            prop_assert!(w[0].end < w[1].start);
        }
        let html = render_report(&report, ReportFormat::Html);
        prop_assert_eq!(html.matches("<mark>").count(), regions.len());
    }
}
