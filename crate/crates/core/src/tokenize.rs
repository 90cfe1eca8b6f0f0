//! Whitespace tokenization shared by the chunker and the analytics module.
//!
//! A token is a maximal run of non-whitespace characters. Spans are byte
//! offsets into the original text, half-open, so `&text[start..end]` is the
//! token itself.

/// Half-open byte span `(start, end)` of a token in its source text.
pub type Span = (usize, usize);

/// Byte spans of all whitespace-delimited tokens, in document order.
pub fn token_spans(text: &str) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = None;
    for (idx, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, idx));
            }
        } else if start.is_none() {
            start = Some(idx);
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Number of whitespace-delimited tokens without collecting spans.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Lower-cased terms for frequency statistics: whitespace tokens with
/// leading and trailing non-alphanumeric characters stripped. Tokens that
/// are pure punctuation vanish.
pub fn terms(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|tok| tok.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|tok| !tok.is_empty())
        .map(|tok| tok.to_lowercase())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_cover_exact_tokens() {
        let text = "  alpha\tbeta \n gamma";
        let spans = token_spans(text);
        let toks: Vec<&str> = spans.iter().map(|&(s, e)| &text[s..e]).collect();
        assert_eq!(toks, vec!["alpha", "beta", "gamma"]);
    }

    #[test]
    fn count_matches_spans() {
        for text in ["", "   ", "one", "one two  three\n", "a b c d e"] {
            assert_eq!(token_count(text), token_spans(text).len());
        }
    }

    #[test]
    fn spans_handle_multibyte_chars() {
        let text = "caesium Cs⁺ perovskite";
        let spans = token_spans(text);
        assert_eq!(spans.len(), 3);
        assert_eq!(&text[spans[1].0..spans[1].1], "Cs⁺");
    }

    #[test]
    fn terms_strip_punctuation_and_case() {
        let got = terms("The PCE reached 25.3%, (stable) -- twice!");
        assert_eq!(got, vec!["the", "pce", "reached", "25.3", "stable", "twice"]);
    }
}
