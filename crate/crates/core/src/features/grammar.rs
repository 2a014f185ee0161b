//! Grammar checking behind a pluggable interface.

use super::tokenize;
use crate::error::{Error, Result};

/// Anything that can count grammatical errors in a text.
pub trait GrammarChecker {
    fn count_errors(&self, text: &str) -> Result<usize>;
}

/// Deterministic rule set: a sentence starting with a lowercase letter, a word
/// immediately repeated, and each unbalanced bracket pair or quote kind.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeuristicChecker;

impl GrammarChecker for HeuristicChecker {
    fn count_errors(&self, text: &str) -> Result<usize> {
        let mut errors = 0;

        for sentence in tokenize::sentences(text) {
            let first = sentence.chars().find(|c| c.is_alphanumeric());
            if first.is_some_and(|c| c.is_lowercase()) {
                errors += 1;
            }
        }

        let words = tokenize::words(text);
        errors += words
            .windows(2)
            .filter(|w| w[0].to_lowercase() == w[1].to_lowercase())
            .count();

        for (open, close) in [('(', ')'), ('[', ']'), ('{', '}')] {
            let opens = text.chars().filter(|&c| c == open).count();
            let closes = text.chars().filter(|&c| c == close).count();
            if opens != closes {
                errors += 1;
            }
        }
        if text.chars().filter(|&c| c == '"').count() % 2 == 1 {
            errors += 1;
        }
        let curly_open = text.chars().filter(|&c| c == '“').count();
        let curly_close = text.chars().filter(|&c| c == '”').count();
        if curly_open != curly_close {
            errors += 1;
        }
        Ok(errors)
    }
}

/// Errors per 100 words; a text without words has rate 0.
pub fn grammar_error_rate(text: &str, checker: &dyn GrammarChecker) -> Result<f64> {
    let errors = checker
        .count_errors(text)
        .map_err(|e| match e {
            Error::Grammar(m) => Error::Grammar(m),
            other => Error::Grammar(other.to_string()),
        })?;
    let words = tokenize::words(text).len();
    Ok(100.0 * errors as f64 / words.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Failing;
    impl GrammarChecker for Failing {
        fn count_errors(&self, _: &str) -> Result<usize> {
            Err(Error::Grammar("service unavailable".into()))
        }
    }

    #[test]
    fn clean_sentence() {
        assert_eq!(grammar_error_rate("The cat sat.", &HeuristicChecker).unwrap(), 0.0);
    }

    #[test]
    fn lowercase_start_and_doubled_word() {
        assert_eq!(
            grammar_error_rate("the the cat sat.", &HeuristicChecker).unwrap(),
            50.0
        );
    }

    #[test]
    fn empty_text_is_zero() {
        assert_eq!(grammar_error_rate("", &HeuristicChecker).unwrap(), 0.0);
    }

    #[test]
    fn unbalanced_brackets_and_quotes() {
        assert_eq!(HeuristicChecker.count_errors("He said (yes.").unwrap(), 1);
        assert_eq!(HeuristicChecker.count_errors("He said \"yes.").unwrap(), 1);
        assert_eq!(HeuristicChecker.count_errors("He said \"yes\" (ok).").unwrap(), 0);
    }

    #[test]
    fn checker_failure_carries_message() {
        let err = grammar_error_rate("Text.", &Failing).unwrap_err();
        assert!(err.to_string().contains("service unavailable"));
    }
}
