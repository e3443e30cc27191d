use std::fmt::Write as _;
use std::path::Path;

use crate::error::{FedError, Result};
use crate::model::{decode_entities, Tag, TaggedSentence};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaggedCorpus {
    pub sentences: Vec<TaggedSentence>,
    pub source: String,
}

impl TaggedCorpus {
    pub fn new(sentences: Vec<TaggedSentence>, source: impl Into<String>) -> Self {
        Self {
            sentences,
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn stats(&self) -> CorpusStats {
        let mut stats = CorpusStats {
            sentences: self.sentences.len() as u64,
            ..CorpusStats::default()
        };
        for s in &self.sentences {
            stats.tokens += s.len() as u64;
            stats.entities += decode_entities(&s.tags).len() as u64;
            stats.entity_tokens += s.tags.iter().filter(|t| **t != Tag::O).count() as u64;
        }
        stats
    }

    /// Serializes back to the two-column format, one blank line after each
    /// sentence.
    pub fn to_conll(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            for (tok, tag) in s.tokens.iter().zip(&s.tags) {
                let _ = writeln!(out, "{tok} {tag}");
            }
            out.push('\n');
        }
        out
    }
}

/// Summary counts for a corpus, stored as `key=value` lines.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub sentences: u64,
    pub tokens: u64,
    pub entities: u64,
    pub entity_tokens: u64,
}

impl CorpusStats {
    pub fn to_kv(&self) -> String {
        format!(
            "sentences={}\ntokens={}\nentities={}\nentity_tokens={}\n",
            self.sentences, self.tokens, self.entities, self.entity_tokens
        )
    }

    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut stats = CorpusStats::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| FedError::Parse {
                path: "<stats>".into(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected key=value, got `{line}`")))?;
            let v: u64 = v
                .parse()
                .map_err(|_| parse_err(format!("`{v}` is not an integer")))?;
            match k {
                "sentences" => stats.sentences = v,
                "tokens" => stats.tokens = v,
                "entities" => stats.entities = v,
                "entity_tokens" => stats.entity_tokens = v,
                other => return Err(parse_err(format!("unknown key `{other}`"))),
            }
        }
        Ok(stats)
    }
}

/// Parses CoNLL two-column text: `token<ws>tag` per line, blank line between
/// sentences. Tags may be bare (`B`) or typed (`B-Disease`).
pub fn parse_conll(text: &str, source: &str) -> Result<TaggedCorpus> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<Tag>| -> Result<()> {
        if !tokens.is_empty() {
            sentences.push(TaggedSentence::new(
                std::mem::take(tokens),
                std::mem::take(tags),
            )?);
        }
        Ok(())
    };

    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush(&mut tokens, &mut tags)?;
            continue;
        }
        let err = |msg: String| FedError::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        if cols.len() != 2 {
            return Err(err(format!("expected 2 columns, found {}", cols.len())));
        }
        let tag: Tag = cols[1].parse().map_err(err)?;
        tokens.push(cols[0].to_string());
        tags.push(tag);
    }
    flush(&mut tokens, &mut tags)?;
    Ok(TaggedCorpus::new(sentences, source))
}

pub fn load_conll(path: impl AsRef<Path>) -> Result<TaggedCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
    parse_conll(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sentences() {
        let c = parse_conll("a B\nb I\n\nc O\n", "mem").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.sentences[0].len(), 2);
        assert_eq!(c.sentences[1].len(), 1);
        assert_eq!(c.sentences[0].tags, vec![Tag::B, Tag::I]);
    }

    #[test]
    fn empty_file() {
        assert!(parse_conll("", "mem").unwrap().is_empty());
        assert!(parse_conll("\n\n  \n", "mem").unwrap().is_empty());
    }

    #[test]
    fn wrong_column_count_reports_line() {
        let err = parse_conll("a B\nb c I\n", "f.conll").unwrap_err();
        match err {
            FedError::Parse { line, path, .. } => {
                assert_eq!(line, 2);
                assert_eq!(path, "f.conll");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_tag_is_error() {
        let err = parse_conll("a B\nb X\n", "mem").unwrap_err();
        assert!(matches!(err, FedError::Parse { line: 2, .. }));
    }

    #[test]
    fn typed_tags_normalized_and_repaired() {
        let c = parse_conll("x I-Disease\ny I-Disease\nz O\n", "mem").unwrap();
        assert_eq!(c.sentences[0].tags, vec![Tag::B, Tag::I, Tag::O]);
    }

    #[test]
    fn conll_text_round_trip() {
        let c = parse_conll("a B\nb I\n\nc O\n", "mem").unwrap();
        let again = parse_conll(&c.to_conll(), "mem").unwrap();
        assert_eq!(c.sentences, again.sentences);
    }

    #[test]
    fn stats_kv_round_trip() {
        let s = CorpusStats {
            sentences: 3,
            tokens: 10,
            entities: 2,
            entity_tokens: 4,
        };
        assert_eq!(CorpusStats::parse_kv(&s.to_kv()).unwrap(), s);
    }
}
