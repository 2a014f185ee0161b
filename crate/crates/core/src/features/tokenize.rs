//! Word and sentence segmentation shared by every text feature.

fn is_joiner(c: char) -> bool {
    matches!(c, '\'' | '’' | '-')
}

/// Words are maximal alphanumeric runs, allowing apostrophes and hyphens
/// strictly between two alphanumeric characters.
pub fn words(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, &(pos, c)) in chars.iter().enumerate() {
        let inside = c.is_alphanumeric()
            || (is_joiner(c)
                && start.is_some()
                && chars.get(i + 1).is_some_and(|(_, n)| n.is_alphanumeric()));
        match (inside, start) {
            (true, None) => start = Some(pos),
            (false, Some(s)) => {
                out.push(&text[s..pos]);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

/// Sentences end at `.`, `!` or `?` followed by whitespace or end of text.
/// Segments without any word are dropped.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((pos, c)) = iter.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = iter.peek().is_none_or(|(_, n)| n.is_whitespace());
            if at_boundary {
                let end = pos + c.len_utf8();
                push_sentence(&mut out, &text[start..end]);
                start = end;
            }
        }
    }
    push_sentence(&mut out, &text[start..]);
    out
}

fn push_sentence<'a>(out: &mut Vec<&'a str>, segment: &'a str) {
    let trimmed = segment.trim();
    if !words(trimmed).is_empty() {
        out.push(trimmed);
    }
}

/// Vowel-group syllable estimate. `None` for a word without characters.
pub fn count_syllables(word: &str) -> Option<usize> {
    if word.is_empty() {
        return None;
    }
    let lower = word.to_lowercase();
    let is_vowel = |c: char| matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y');
    let mut groups = 0;
    let mut prev_vowel = false;
    for c in lower.chars() {
        let v = is_vowel(c);
        if v && !prev_vowel {
            groups += 1;
        }
        prev_vowel = v;
    }
    if lower.ends_with('e') && groups > 1 {
        groups -= 1;
    }
    Some(groups.max(1))
}

/// Letters and digits inside a word, excluding joiners.
pub fn letter_count(word: &str) -> usize {
    word.chars().filter(|c| c.is_alphanumeric()).count()
}
