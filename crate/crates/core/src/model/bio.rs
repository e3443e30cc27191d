//! BIO tag set and span decoding.

use std::fmt;
use std::str::FromStr;

use crate::error::{FedError, Result};

/// Single-entity-type BIO label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    O = 0,
    B = 1,
    I = 2,
}

impl Tag {
    pub const ALL: [Tag; 3] = [Tag::O, Tag::B, Tag::I];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(idx: usize) -> Option<Tag> {
        Tag::ALL.get(idx).copied()
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tag::O => "O",
            Tag::B => "B",
            Tag::I => "I",
        };
        f.write_str(s)
    }
}

impl FromStr for Tag {
    type Err = String;

    /// Accepts bare `O`/`B`/`I` and typed forms such as `B-Disease`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "O" => return Ok(Tag::O),
            "B" => return Ok(Tag::B),
            "I" => return Ok(Tag::I),
            _ => {}
        }
        match s.split_once('-') {
            Some(("B", t)) if !t.is_empty() => Ok(Tag::B),
            Some(("I", t)) if !t.is_empty() => Ok(Tag::I),
            _ => Err(format!("unknown tag `{s}`")),
        }
    }
}

/// A tokenized sentence with one BIO tag per token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
}

impl TaggedSentence {
    /// Builds a sentence, applying the repair rule to the tags.
    pub fn new(tokens: Vec<String>, mut tags: Vec<Tag>) -> Result<Self> {
        if tokens.len() != tags.len() {
            return Err(FedError::Config(format!(
                "sentence has {} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        repair_tags(&mut tags);
        Ok(Self { tokens, tags })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Promotes every `I` that starts a sentence or follows `O` to `B`.
pub fn repair_tags(tags: &mut [Tag]) {
    let mut prev = Tag::O;
    for tag in tags.iter_mut() {
        if *tag == Tag::I && prev == Tag::O {
            *tag = Tag::B;
        }
        prev = *tag;
    }
}

/// Decodes entity spans as inclusive `(start, end)` token offsets, ordered and
/// non-overlapping. The repair rule is applied first so every input decodes.
pub fn decode_entities(tags: &[Tag]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    let mut prev = Tag::O;
    for (i, &tag) in tags.iter().enumerate() {
        let tag = if tag == Tag::I && prev == Tag::O {
            Tag::B
        } else {
            tag
        };
        match tag {
            Tag::B => {
                if let Some(start) = open.take() {
                    spans.push((start, i - 1));
                }
                open = Some(i);
            }
            Tag::I => {}
            Tag::O => {
                if let Some(start) = open.take() {
                    spans.push((start, i - 1));
                }
            }
        }
        prev = tag;
    }
    if let Some(start) = open {
        spans.push((start, tags.len() - 1));
    }
    spans
}
