//! Word-level tokenization shared by the static embedding backend and the
//! SVM featurizer.

/// Splits on whitespace and punctuation. Punctuation characters are dropped,
/// apostrophes inside a word are kept (`don't` stays one token).
pub fn word_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let bytes_len = text.len();
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        let inner_apostrophe = c == '\''
            && start.is_some()
            && iter.peek().is_some_and(|(_, n)| n.is_alphanumeric());
        if c.is_alphanumeric() || inner_apostrophe {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..bytes_len]);
    }
    out
}

/// Lowercased [`word_tokens`].
pub fn lower_tokens(text: &str) -> Vec<String> {
    word_tokens(text).into_iter().map(str::to_lowercase).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_punctuation() {
        assert_eq!(word_tokens("Hello, world!"), vec!["Hello", "world"]);
        assert_eq!(word_tokens("don't stop"), vec!["don't", "stop"]);
        assert_eq!(word_tokens("'quoted'"), vec!["quoted"]);
        assert!(word_tokens("  ... ").is_empty());
    }

    #[test]
    fn lowercases() {
        assert_eq!(lower_tokens("Good GOOD day"), vec!["good", "good", "day"]);
    }
}
