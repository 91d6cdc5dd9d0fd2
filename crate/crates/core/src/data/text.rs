//! Line normalization: lowercasing, ASCII punctuation splitting and
//! whitespace collapsing.

/// Characters split off as standalone tokens.
pub const PUNCTUATION: &str = ".,;:!?\"()[]{}";

/// Lowercases `line`, surrounds punctuation with spaces and collapses runs of
/// whitespace to single spaces.
pub fn normalize(line: &str) -> String {
    let mut spaced = String::with_capacity(line.len() + 8);
    for c in line.chars().flat_map(char::to_lowercase) {
        if PUNCTUATION.contains(c) {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    spaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Word tokens of the normalized line.
pub fn tokenize(line: &str) -> Vec<String> {
    normalize(line).split(' ').filter(|w| !w.is_empty()).map(String::from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize("  Hello,   World!  "), "hello , world !");
        assert_eq!(normalize(""), "");
        assert_eq!(tokenize("A (b) c."), vec!["a", "(", "b", ")", "c", "."]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let once = normalize("The CAT: sat, (mostly).");
        assert_eq!(normalize(&once), once);
    }
}
