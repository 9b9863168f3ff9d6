/// Expands a leading single-letter speaker tag: `w:`/`f:` become `woman:`
/// and `m:` becomes `man:` (case-insensitive). Anything else is returned
/// unchanged, which makes the function idempotent.
pub fn speaker_normalize(utterance: &str) -> String {
    let mut chars = utterance.chars();
    let (Some(tag), Some(':')) = (chars.next(), chars.next()) else {
        return utterance.to_string();
    };
    let full = match tag.to_ascii_lowercase() {
        'w' | 'f' => "woman",
        'm' => "man",
        _ => return utterance.to_string(),
    };
    format!("{full}{}", &utterance[tag.len_utf8()..])
}

/// Lowercases, splits on whitespace and emits every punctuation character
/// as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if c.is_ascii_punctuation() {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            } else {
                current.extend(c.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}
