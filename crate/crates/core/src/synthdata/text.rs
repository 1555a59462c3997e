//! Caption templates, the fixed word vocabulary and attribute-phrase matching.

use std::collections::HashMap;

use super::shapes::{BackStyle, Color, HeightTier, ShapeClass, ShapeSpec};

pub const MAX_TOKENS: usize = 24;
pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const NUM_TEMPLATES: usize = 7;

const NUMBER_WORDS: [&str; 7] = ["zero", "one", "two", "three", "four", "five", "six"];
const GLUE_WORDS: [&str; 12] = [
    "a", "with", "and", "in", "simple", "support", "this", "legs", "backrest", "top", "seat", "frame",
];

/// Every word any template can emit, in a fixed order.
pub fn lexicon() -> Vec<&'static str> {
    let mut w: Vec<&'static str> = GLUE_WORDS.to_vec();
    w.extend(NUMBER_WORDS[2..].iter());
    w.extend(Color::ALL.iter().map(|c| c.name()));
    w.extend(ShapeClass::ALL.iter().map(|c| c.name()));
    w.extend(HeightTier::ALL.iter().map(|h| h.name()));
    w.extend(["no", "low", "high"]);
    w
}

pub fn legs_phrase(n: u8) -> String {
    format!("{} legs", NUMBER_WORDS[n as usize])
}

pub fn back_phrase(b: BackStyle) -> String {
    format!("{} backrest", b.name())
}

pub fn leg_color_phrase(c: Color) -> String {
    format!("{} legs", c.name())
}

/// Every attribute phrase the templates can produce, in a fixed order.
pub fn attribute_lexicon() -> Vec<String> {
    let mut v: Vec<String> = Color::ALL.iter().map(|c| c.name().to_string()).collect();
    v.extend(ShapeClass::ALL.iter().map(|c| c.name().to_string()));
    v.extend((2..=6).map(legs_phrase));
    v.extend(BackStyle::ALL.iter().map(|&b| back_phrase(b)));
    v.extend(HeightTier::ALL.iter().map(|h| h.name().to_string()));
    v.extend(Color::ALL.iter().map(|&c| leg_color_phrase(c)));
    v
}

/// A caption and the attribute phrases it mentions, in order of appearance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    pub template: usize,
    pub text: String,
    pub attributes: Vec<String>,
}

/// Template `variant_seed % NUM_TEMPLATES`. Templates 1, 3, 4 and 5 omit some
/// attributes to imitate rough descriptions.
pub fn generate_caption(spec: &ShapeSpec, variant_seed: u64) -> Caption {
    let template = (variant_seed % NUM_TEMPLATES as u64) as usize;
    let cls = spec.class.name().to_string();
    let c1 = spec.primary.name().to_string();
    let h = spec.height.name().to_string();
    let legs = legs_phrase(spec.leg_count);
    let leg_color = leg_color_phrase(spec.secondary);
    let back = spec.class.has_back().then(|| back_phrase(spec.back));
    let (text, attributes) = match template {
        0 => {
            let mut t = format!("a {c1} {cls} with {legs}");
            let mut a = vec![c1, cls, legs];
            if let Some(b) = back {
                if spec.back == BackStyle::None {
                    t.push_str(&format!(" and {b}"));
                } else {
                    t.push_str(&format!(" and a {b}"));
                }
                a.push(b);
            }
            (t, a)
        }
        1 => (format!("a {h} {cls} in {c1}"), vec![h, cls, c1]),
        2 => (
            format!("a {cls} with a {c1} {} and {leg_color}", spec.class.part_word()),
            vec![cls, c1, leg_color],
        ),
        3 => (format!("a {h} {c1} {cls}"), vec![h, c1, cls]),
        4 => (format!("{cls}, {legs}, {h}"), vec![cls, legs, h]),
        5 => (format!("a simple {h} {cls}"), vec![h, cls]),
        _ => {
            let mut t = format!("{leg_color} support this {c1} {cls}");
            let mut a = vec![leg_color, c1, cls];
            if let Some(b) = back {
                if spec.back == BackStyle::None {
                    t.push_str(&format!(" with {b}"));
                } else {
                    t.push_str(&format!(" with a {b}"));
                }
                a.push(b);
            }
            (t, a)
        }
    };
    Caption {
        template,
        text,
        attributes,
    }
}

/// Lowercases, turns punctuation into spaces and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Fixed word vocabulary: `<pad>`, `<unk>`, then the template lexicon.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        let mut words = vec!["<pad>".to_string(), "<unk>".to_string()];
        words.extend(lexicon().into_iter().map(str::to_string));
        Self::from_words(words)
    }
}

impl Tokenizer {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Exactly `MAX_TOKENS` ids, truncated or padded with `PAD`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = normalize_words(text)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .take(MAX_TOKENS)
            .collect();
        ids.resize(MAX_TOKENS, PAD);
        ids
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD)
            .map(|&i| self.words.get(i).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Number of non-pad tokens; pads only ever trail.
pub fn token_len(ids: &[usize]) -> usize {
    ids.iter().position(|&i| i == PAD).unwrap_or(ids.len())
}

/// Whole-word phrase matcher. At each position the longest phrase wins and
/// consumes its words, so "four legs" and "red legs" shadow shorter phrases.
#[derive(Clone, Debug)]
pub struct PhraseMatcher {
    phrases: Vec<(Vec<String>, usize)>,
}

impl PhraseMatcher {
    pub fn new<S: AsRef<str>>(phrases: &[S]) -> Self {
        let mut p: Vec<(Vec<String>, usize)> = phrases
            .iter()
            .enumerate()
            .map(|(i, s)| (normalize_words(s.as_ref()), i))
            .filter(|(w, _)| !w.is_empty())
            .collect();
        p.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        Self { phrases: p }
    }

    /// Indices of matched phrases, deduplicated, in order of first occurrence.
    pub fn find(&self, text: &str) -> Vec<usize> {
        let words = normalize_words(text);
        let mut out = Vec::new();
        let mut i = 0;
        while i < words.len() {
            let hit = self
                .phrases
                .iter()
                .find(|(p, _)| words.len() - i >= p.len() && words[i..i + p.len()] == p[..]);
            match hit {
                Some((p, idx)) => {
                    if !out.contains(idx) {
                        out.push(*idx);
                    }
                    i += p.len();
                }
                None => i += 1,
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chair() -> ShapeSpec {
        ShapeSpec {
            class: ShapeClass::Chair,
            leg_count: 4,
            height: HeightTier::Medium,
            back: BackStyle::High,
            primary: Color::Red,
            secondary: Color::Brown,
            seed: 0,
        }
    }

    #[test]
    fn template_zero_red_chair() {
        let c = generate_caption(&chair(), 0);
        assert_eq!(c.text, "a red chair with four legs and a high backrest");
        assert_eq!(c.attributes, ["red", "chair", "four legs", "high backrest"]);
    }

    #[test]
    fn colourless_template_has_no_colour_attribute() {
        let c = generate_caption(&chair(), 4);
        let colours: Vec<&str> = Color::ALL.iter().map(|c| c.name()).collect();
        assert!(c.attributes.iter().all(|a| !colours.contains(&a.as_str())));
    }

    #[test]
    fn attributes_are_substrings_and_match_the_matcher() {
        let lex = attribute_lexicon();
        let m = PhraseMatcher::new(&lex);
        for class in ShapeClass::ALL {
            for back in BackStyle::ALL {
                let mut s = chair();
                s.class = class;
                s.back = if class.has_back() { back } else { BackStyle::None };
                for v in 0..NUM_TEMPLATES as u64 {
                    let c = generate_caption(&s, v);
                    for a in &c.attributes {
                        assert!(c.text.contains(a.as_str()), "{a} in {}", c.text);
                    }
                    let found: Vec<&str> = m.find(&c.text).iter().map(|&i| lex[i].as_str()).collect();
                    assert_eq!(found, c.attributes, "{}", c.text);
                }
            }
        }
    }

    #[test]
    fn different_variants_share_the_class() {
        let s = chair();
        let a = generate_caption(&s, 1);
        let b = generate_caption(&s, 2);
        assert_ne!(a.text, b.text);
        assert!(a.attributes.contains(&"chair".to_string()));
        assert!(b.attributes.contains(&"chair".to_string()));
    }

    #[test]
    fn tokenize_known_and_unknown_words() {
        let t = Tokenizer::default();
        let ids = t.encode("a red chair");
        assert_eq!(ids.len(), MAX_TOKENS);
        assert_eq!(&ids[3..], &[PAD; MAX_TOKENS - 3]);
        assert_eq!(t.decode(&ids), "a red chair");
        assert_eq!(t.encode("purple")[0], UNK);
        assert_eq!(token_len(&ids), 3);
    }

    #[test]
    fn every_template_word_is_in_vocabulary() {
        let t = Tokenizer::default();
        for v in 0..NUM_TEMPLATES as u64 {
            for class in ShapeClass::ALL {
                let mut s = chair();
                s.class = class;
                if !class.has_back() {
                    s.back = BackStyle::None;
                }
                let c = generate_caption(&s, v);
                assert!(!t.encode(&c.text).contains(&UNK), "{}", c.text);
            }
        }
    }

    #[test]
    fn matcher_requires_contiguous_whole_words() {
        let m = PhraseMatcher::new(&["four legs", "legs", "red"]);
        assert_eq!(m.find("four red legs"), vec![2, 1]);
        assert_eq!(m.find("four legs"), vec![0]);
        assert_eq!(m.find("reddish legs"), vec![1]);
    }
}
