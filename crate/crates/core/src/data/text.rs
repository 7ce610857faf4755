/// Lowercases and splits on whitespace; every non-alphanumeric character
/// becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn closes(tok: &str) -> bool {
    matches!(tok, "." | "," | ";" | ":" | "!" | "?" | ")")
}

/// Joins tokens with single spaces, attaching closing punctuation to the
/// preceding word and `(` to the following one.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue_next = true;
    for tok in tokens {
        let tok = tok.as_ref();
        if !glue_next && !closes(tok) {
            out.push(' ');
        }
        out.push_str(tok);
        glue_next = tok == "(";
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(tokenize("left lung shadow."), vec!["left", "lung", "shadow", "."]);
        assert_eq!(tokenize("Heart, (normal)  size"), vec!["heart", ",", "(", "normal", ")", "size"]);
        assert!(tokenize("").is_empty());
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn round_trip_normalises_whitespace() {
        let s = "the film shows low exposure.  no focal abnormality (none) is seen.";
        assert_eq!(detokenize(&tokenize(s)), "the film shows low exposure. no focal abnormality (none) is seen.");
    }
}
