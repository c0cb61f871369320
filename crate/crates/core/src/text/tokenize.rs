/// A token with its half-open character range in the source text.
///
/// Offsets count Unicode scalar values, matching SQuAD's `answer_start`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercases, splits on whitespace and emits every non-alphanumeric
/// character as a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text).into_iter().map(|t| t.text).collect()
}

pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut word_start = 0;

    let flush = |word: &mut String, start: usize, end: usize, tokens: &mut Vec<Token>| {
        if !word.is_empty() {
            tokens.push(Token {
                text: std::mem::take(word),
                start,
                end,
            });
        }
    };

    for (pos, ch) in text.chars().enumerate() {
        if ch.is_whitespace() {
            flush(&mut word, word_start, pos, &mut tokens);
            continue;
        }
        // Lowercasing can expand one char into several (e.g. 'İ'); classify
        // each produced char so re-tokenizing the output is stable.
        for lc in ch.to_lowercase() {
            if lc.is_alphanumeric() {
                if word.is_empty() {
                    word_start = pos;
                }
                word.push(lc);
            } else {
                flush(&mut word, word_start, pos, &mut tokens);
                tokens.push(Token {
                    text: lc.to_string(),
                    start: pos,
                    end: pos + 1,
                });
            }
        }
    }
    flush(&mut word, word_start, text.chars().count(), &mut tokens);
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn detaches_punctuation() {
        assert_eq!(tokenize("Nikola Tesla (Serbian"), ["nikola", "tesla", "(", "serbian"]);
        assert_eq!(tokenize("1856–7 January, 1943."), ["1856", "–", "7", "january", ",", "1943", "."]);
    }

    #[test]
    fn empty_input() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \n\t").is_empty());
    }

    #[test]
    fn offsets_are_character_ranges() {
        let text = "Тесла (born 1856)";
        let toks = tokenize_with_offsets(text);
        let chars: Vec<char> = text.chars().collect();
        for t in &toks {
            let orig: String = chars[t.start..t.end].iter().collect();
            assert_eq!(orig.to_lowercase(), t.text);
        }
        assert_eq!(toks[0].text, "тесла");
        assert_eq!((toks[3].start, toks[3].end), (12, 16));
    }

    proptest! {
        #[test]
        fn idempotent_on_rejoined_output(s in "\\PC{0,40}") {
            let once = tokenize(&s);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }
    }
}
