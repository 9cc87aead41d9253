//! Desk-scale scoring utilities: answer extraction and exact-match accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact-match mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Trimmed, case-insensitive string equality.
    String,
    /// Extracted numbers equal within 1e-6.
    Numeric,
    /// First standalone A–E letter in the prediction equals the gold letter.
    OptionLetter,
}

/// Which extracted number counts as the answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NumberConvention {
    /// Chain-of-thought answers end with the result.
    #[default]
    Last,
    First,
}

/// Accuracy summary over a scored set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub n_items: usize,
    pub n_correct: usize,
    pub accuracy: f64,
}

/// Extract the last decimal number from `text` (optional sign, optional
/// fraction, thousands separators ignored), or `None` if the text has no
/// number. Never panics.
pub fn extract_number(text: &str) -> Option<f64> {
    extract_number_with(text, NumberConvention::Last)
}

/// [`extract_number`] with an explicit first/last convention.
pub fn extract_number_with(text: &str, convention: NumberConvention) -> Option<f64> {
    let bytes = text.as_bytes();
    let mut found: Option<f64> = None;
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        let mut j = i;
        if bytes[j] == b'+' || bytes[j] == b'-' {
            j += 1;
        }
        if j >= bytes.len() || !bytes[j].is_ascii_digit() {
            i = start + 1;
            continue;
        }
        // A sign glued to the previous word ("x-3") is a separator, not a sign.
        let signed = j > start;
        if signed && start > 0 && bytes[start - 1].is_ascii_alphanumeric() {
            i = start + 1;
            continue;
        }
        let mut digits = String::new();
        if signed && bytes[start] == b'-' {
            digits.push('-');
        }
        while j < bytes.len() && bytes[j].is_ascii_digit() {
            digits.push(bytes[j] as char);
            j += 1;
        }
        // Thousands separators: a comma followed by exactly three digits.
        loop {
            if j < bytes.len() && bytes[j] == b','
                && j + 3 < bytes.len() + 1
                && bytes.get(j + 1).is_some_and(|b| b.is_ascii_digit())
                && bytes.get(j + 2).is_some_and(|b| b.is_ascii_digit())
                && bytes.get(j + 3).is_some_and(|b| b.is_ascii_digit())
                && !bytes.get(j + 4).is_some_and(|b| b.is_ascii_digit())
            {
                digits.push(bytes[j + 1] as char);
                digits.push(bytes[j + 2] as char);
                digits.push(bytes[j + 3] as char);
                j += 4;
            } else {
                break;
            }
        }
        if j < bytes.len() && bytes[j] == b'.' && bytes.get(j + 1).is_some_and(|b| b.is_ascii_digit()) {
            digits.push('.');
            j += 1;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                digits.push(bytes[j] as char);
                j += 1;
            }
        }
        if let Ok(v) = digits.parse::<f64>() {
            match convention {
                NumberConvention::First => return Some(v),
                NumberConvention::Last => found = Some(v),
            }
        }
        i = j;
    }
    found
}

/// First standalone A–E letter (not adjacent to other alphanumerics),
/// case-insensitive.
fn first_option_letter(text: &str) -> Option<char> {
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        let upper = b.to_ascii_uppercase();
        if !(b'A'..=b'E').contains(&upper) {
            continue;
        }
        let prev_ok = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
        let next_ok = i + 1 >= bytes.len() || !bytes[i + 1].is_ascii_alphanumeric();
        if prev_ok && next_ok {
            return Some(upper as char);
        }
    }
    None
}

/// Pairwise exact match under `mode` (last-number convention).
pub fn exact_match(prediction: &str, gold: &str, mode: MatchMode) -> bool {
    exact_match_with(prediction, gold, mode, NumberConvention::Last)
}

/// [`exact_match`] with an explicit first/last number convention.
pub fn exact_match_with(
    prediction: &str,
    gold: &str,
    mode: MatchMode,
    convention: NumberConvention,
) -> bool {
    match mode {
        MatchMode::String => prediction.trim().eq_ignore_ascii_case(gold.trim()),
        MatchMode::Numeric => match (
            extract_number_with(prediction, convention),
            extract_number_with(gold, convention),
        ) {
            (Some(p), Some(g)) => (p - g).abs() <= 1e-6,
            _ => false,
        },
        MatchMode::OptionLetter => match (first_option_letter(prediction), first_option_letter(gold)) {
            (Some(p), Some(g)) => p == g,
            _ => false,
        },
    }
}

/// Score predictions against golds; accuracy is `n_correct / n_items`.
pub fn score_set(predictions: &[String], golds: &[String], mode: MatchMode) -> Result<ScoredSet> {
    score_set_with(predictions, golds, mode, NumberConvention::Last)
}

/// [`score_set`] with an explicit first/last number convention.
pub fn score_set_with(
    predictions: &[String],
    golds: &[String],
    mode: MatchMode,
    convention: NumberConvention,
) -> Result<ScoredSet> {
    if predictions.len() != golds.len() {
        return Err(Error::Input {
            message: format!(
                "prediction/gold length mismatch: {} vs {}",
                predictions.len(),
                golds.len()
            ),
        });
    }
    if predictions.is_empty() {
        return Err(Error::Input {
            message: "score_set needs at least one item".to_string(),
        });
    }
    let n_correct = predictions
        .iter()
        .zip(golds.iter())
        .filter(|(p, g)| exact_match_with(p, g, mode, convention))
        .count();
    Ok(ScoredSet {
        n_items: predictions.len(),
        n_correct,
        accuracy: n_correct as f64 / predictions.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_trailing_number() {
        assert_eq!(extract_number("the answer is 42."), Some(42.0));
    }

    #[test]
    fn no_digits_is_none() {
        assert_eq!(extract_number("no digits here"), None);
        assert_eq!(extract_number(""), None);
    }

    #[test]
    fn last_match_rule() {
        // Verified against a reference regex run: last number wins.
        assert_eq!(extract_number("first 3, then 4.5"), Some(4.5));
        assert_eq!(
            extract_number_with("first 3, then 4.5", NumberConvention::First),
            Some(3.0)
        );
    }

    #[test]
    fn thousands_separators_ignored() {
        assert_eq!(extract_number("total: 1,234,567.5 units"), Some(1234567.5));
        // A comma not followed by exactly three digits is a list separator.
        assert_eq!(extract_number("pick 12,34"), Some(34.0));
    }

    #[test]
    fn signs_and_fractions() {
        assert_eq!(extract_number("delta was -3.25"), Some(-3.25));
        assert_eq!(extract_number("gain +7"), Some(7.0));
        // Hyphen glued to a word is a separator, not a sign.
        assert_eq!(extract_number("x-3"), Some(3.0));
    }

    #[test]
    fn option_letter_cases() {
        assert!(exact_match("  B) because...", "B", MatchMode::OptionLetter));
        // First standalone letter wins: C here, so gold D fails.
        assert!(!exact_match("C is wrong, pick D", "D", MatchMode::OptionLetter));
        assert!(exact_match("answer: (d)", "D", MatchMode::OptionLetter));
        assert!(!exact_match("Cat or Dog", "C", MatchMode::OptionLetter));
    }

    #[test]
    fn numeric_mode_tolerance() {
        assert!(exact_match("answer: 7.0", "7", MatchMode::Numeric));
        assert!(!exact_match("answer: 7.1", "7", MatchMode::Numeric));
        assert!(!exact_match("no number", "7", MatchMode::Numeric));
    }

    #[test]
    fn string_mode_trims_and_ignores_case() {
        assert!(exact_match("  Paris \n", "paris", MatchMode::String));
    }

    #[test]
    fn score_set_accuracy() {
        let preds: Vec<String> = ["1", "2", "3", "5"].iter().map(|s| s.to_string()).collect();
        let golds: Vec<String> = ["1", "2", "3", "4"].iter().map(|s| s.to_string()).collect();
        let scored = score_set(&preds, &golds, MatchMode::Numeric).unwrap();
        assert_eq!(scored.n_correct, 3);
        assert!((scored.accuracy - 0.75).abs() < 1e-15);
        let all = score_set(&golds, &golds, MatchMode::Numeric).unwrap();
        assert!((all.accuracy - 1.0).abs() < 1e-15);
        let none = score_set(&preds[3..], &golds[3..], MatchMode::Numeric).unwrap();
        assert_eq!(none.accuracy, 0.0);
    }

    #[test]
    fn score_set_length_mismatch() {
        let a = vec!["1".to_string()];
        let b = vec!["1".to_string(), "2".to_string()];
        assert!(matches!(
            score_set(&a, &b, MatchMode::String),
            Err(Error::Input { .. })
        ));
    }
}
