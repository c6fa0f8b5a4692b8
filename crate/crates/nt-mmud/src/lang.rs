//! Closed word inventory shared by the generator, the loader and the
//! tokenizer. Every surface form in the corpus is built from these lists,
//! which is what keeps the vocabulary small and the token table stable.

/// Special token ids are fixed: PAD=0, BOS=1, EOS=2, OBJ-1..8 = 3..=10,
/// GEN=11. Word ids start right after.
pub const SPECIALS: [&str; 12] = [
    "<pad>", "<bos>", "<eos>", "<obj-1>", "<obj-2>", "<obj-3>", "<obj-4>", "<obj-5>", "<obj-6>",
    "<obj-7>", "<obj-8>", "<gen>",
];

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SHAPES: [&str; 3] = ["square", "circle", "bar"];
/// Modifier words: small/large apply to squares and circles, wide/tall to bars.
pub const MODS: [&str; 4] = ["small", "large", "wide", "tall"];
pub const NUMBERS: [&str; 4] = ["one", "two", "three", "four"];

pub const GLUE: [&str; 29] = [
    "a",
    "scene",
    "with",
    "object",
    "objects",
    "and",
    "the",
    "is",
    "it",
    "of",
    "which",
    "what",
    "shape",
    "color",
    "same",
    "as",
    "left",
    "right",
    "above",
    "below",
    "leftmost",
    "rightmost",
    "topmost",
    "bottommost",
    "largest",
    "smallest",
    "segment",
    "describe",
    "generate",
];

pub const PROMPT_SEGMENT: &str = "segment";
pub const PROMPT_DESCRIBE: &str = "describe the scene";
pub const PROMPT_GENERATE: &str = "generate";

/// Full ordered token table: specials first, then the curated words.
pub fn vocabulary() -> Vec<String> {
    let mut v: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    for list in [&COLORS[..], &SHAPES[..], &MODS[..], &NUMBERS[..], &GLUE[..]] {
        v.extend(list.iter().map(|s| s.to_string()));
    }
    v
}

pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// The marker word for the 1-based object index i.
pub fn obj_marker(i: usize) -> String {
    format!("<obj-{i}>")
}

/// Parses "<obj-i>" back to i; None for any other token.
pub fn parse_obj_marker(tok: &str) -> Option<usize> {
    let inner = tok.strip_prefix("<obj-")?.strip_suffix('>')?;
    inner.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_small_and_duplicate_free() {
        let v = vocabulary();
        assert!(v.len() < 120, "vocabulary ballooned to {}", v.len());
        let mut seen = std::collections::BTreeSet::new();
        for t in &v {
            assert!(seen.insert(t.clone()), "duplicate token {t}");
        }
        assert_eq!(v[0], "<pad>");
        assert_eq!(v[1], "<bos>");
        assert_eq!(v[2], "<eos>");
        assert_eq!(v[3], "<obj-1>");
        assert_eq!(v[11], "<gen>");
    }

    #[test]
    fn obj_marker_round_trip() {
        for i in 1..=8 {
            assert_eq!(parse_obj_marker(&obj_marker(i)), Some(i));
        }
        assert_eq!(parse_obj_marker("circle"), None);
        assert_eq!(parse_obj_marker("<gen>"), None);
    }
}
