//! Deciding whether a patched generation reproduces a target string.

use unicode_normalization::char::is_combining_mark;

pub trait MatchRule: Send + Sync {
    fn matches(&self, generation: &str, target: &str) -> bool;
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || is_combining_mark(c)
}

fn fold(s: &str, case_sensitive: bool) -> std::borrow::Cow<'_, str> {
    if case_sensitive {
        s.into()
    } else {
        s.to_lowercase().into()
    }
}

/// Target occurs with no word character directly before or after it.
#[derive(Debug, Clone, Copy)]
pub struct WordBoundary {
    pub case_sensitive: bool,
}

impl Default for WordBoundary {
    fn default() -> Self {
        WordBoundary { case_sensitive: true }
    }
}

impl MatchRule for WordBoundary {
    fn matches(&self, generation: &str, target: &str) -> bool {
        if target.is_empty() {
            return false;
        }
        let hay = fold(generation, self.case_sensitive);
        let needle = fold(target, self.case_sensitive);
        hay.match_indices(needle.as_ref()).any(|(start, m)| {
            let before = hay[..start].chars().next_back();
            let after = hay[start + m.len()..].chars().next();
            !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
        })
    }
}

/// Plain substring occurrence; used for sub-lexical affixes.
#[derive(Debug, Clone, Copy)]
pub struct Substring {
    pub case_sensitive: bool,
}

impl Default for Substring {
    fn default() -> Self {
        Substring { case_sensitive: true }
    }
}

impl MatchRule for Substring {
    fn matches(&self, generation: &str, target: &str) -> bool {
        !target.is_empty()
            && fold(generation, self.case_sensitive).contains(fold(target, self.case_sensitive).as_ref())
    }
}
