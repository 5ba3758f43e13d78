use std::path::Path;

use viva_core::guard::ClarificationPatterns;

fn labelled() -> Vec<(bool, String)> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/clarification_phrases.tsv");
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (label, text) = l.split_once('\t').expect("label<TAB>utterance");
            match label {
                "clarify" => (true, text.to_string()),
                "answer" => (false, text.to_string()),
                other => panic!("unknown label {other}"),
            }
        })
        .collect()
}

fn misclassified(patterns: &ClarificationPatterns) -> Vec<String> {
    labelled()
        .into_iter()
        .filter(|(want, text)| patterns.is_clarification_request(text) != *want)
        .map(|(want, text)| format!("{text:?} should be {}", if want { "clarify" } else { "answer" }))
        .collect()
}

#[test]
fn shipped_pattern_file_classifies_labelled_phrases() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../clarification_patterns.txt");
    let patterns = ClarificationPatterns::load(&path).unwrap();
    assert_eq!(misclassified(&patterns), Vec::<String>::new());
}

#[test]
fn built_in_default_matches_shipped_file() {
    assert_eq!(misclassified(&ClarificationPatterns::default()), Vec::<String>::new());
}

#[test]
fn labelled_set_covers_both_classes() {
    let all = labelled();
    let positives = all.iter().filter(|(l, _)| *l).count();
    assert!(positives >= 15 && all.len() - positives >= 10);
}
