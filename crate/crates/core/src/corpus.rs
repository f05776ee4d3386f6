//! Datasets in the three-file split layout and the BIO/span label split.
//!
//! A split directory holds `seq.in` (space-separated tokens), `seq.out`
//! (one typed BIO tag per token) and `label` (one intent per line), all with
//! the same number of lines. Typed tags such as `B-round_trip` are split into
//! a plain BIO sequence plus a list of typed spans, so slot boundaries and
//! slot types can be predicted separately.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SEQ_IN: &str = "seq.in";
pub const SEQ_OUT: &str = "seq.out";
pub const LABEL: &str = "label";
pub const DESCRIPTIONS: &str = "descriptions.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bio {
    O,
    B,
    I,
}

impl Bio {
    /// Class order used by the tagger's output distribution.
    pub const ALL: [Bio; 3] = [Bio::O, Bio::B, Bio::I];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Bio> {
        Bio::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Bio::O => "O",
            Bio::B => "B",
            Bio::I => "I",
        }
    }
}

impl fmt::Display for Bio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A slot entity covering words `start..=end` (1-based, inclusive).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span<L = usize> {
    pub start: usize,
    pub end: usize,
    pub label: L,
}

impl<L> Span<L> {
    pub fn new(start: usize, end: usize, label: L) -> Self {
        Self { start, end, label }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// How ill-formed `I-` tags in gold data are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TagMode {
    #[default]
    Strict,
    /// A dangling or type-switching `I-x` opens a new span, as if it were `B-x`.
    Lenient,
}

/// Splits `O`, `B-x` or `I-x` into its BIO part and type.
pub fn parse_tag(tag: &str) -> Result<(Bio, Option<&str>)> {
    if tag == "O" {
        return Ok((Bio::O, None));
    }
    let (bio, kind) = match tag.split_once('-') {
        Some(("B", kind)) => (Bio::B, kind),
        Some(("I", kind)) => (Bio::I, kind),
        _ => return Err(Error::MalformedTag(tag.to_string())),
    };
    if kind.is_empty() {
        return Err(Error::MalformedTag(tag.to_string()));
    }
    Ok((bio, Some(kind)))
}

/// Strict split of typed tags into plain BIO tags and typed spans.
pub fn reformulate<S: AsRef<str>>(tags: &[S]) -> Result<(Vec<Bio>, Vec<Span<String>>)> {
    reformulate_with(tags, TagMode::Strict)
}

pub fn reformulate_with<S: AsRef<str>>(
    tags: &[S],
    mode: TagMode,
) -> Result<(Vec<Bio>, Vec<Span<String>>)> {
    let mut bio = Vec::with_capacity(tags.len());
    let mut spans: Vec<Span<String>> = Vec::new();
    // Type of the span that the next I- tag may continue.
    let mut open: Option<&str> = None;

    for (i, tag) in tags.iter().enumerate() {
        let pos = i + 1;
        let (tag_bio, kind) = parse_tag(tag.as_ref())?;
        match (tag_bio, kind) {
            (Bio::O, _) => {
                bio.push(Bio::O);
                open = None;
            }
            (Bio::B, Some(kind)) => {
                bio.push(Bio::B);
                spans.push(Span::new(pos, pos, kind.to_string()));
                open = Some(kind);
            }
            (Bio::I, Some(kind)) => match open {
                Some(cur) if cur == kind => {
                    bio.push(Bio::I);
                    spans.last_mut().expect("open span").end = pos;
                }
                _ if mode == TagMode::Lenient => {
                    bio.push(Bio::B);
                    spans.push(Span::new(pos, pos, kind.to_string()));
                    open = Some(kind);
                }
                Some(_) => return Err(Error::TypeSwitch(pos)),
                None => return Err(Error::DanglingI(pos)),
            },
            _ => unreachable!("parse_tag attaches a type to B and I"),
        }
    }
    Ok((bio, spans))
}

/// Checks the span-list invariants: sorted, non-overlapping, within `1..=n`.
pub fn validate_spans<L>(spans: &[Span<L>], n: usize) -> Result<()> {
    let mut prev_end = 0;
    for span in spans {
        if span.start == 0 || span.start > span.end || span.end > n {
            return Err(Error::OutOfRange);
        }
        if span.start <= prev_end {
            return Err(Error::OverlapError);
        }
        prev_end = span.end;
    }
    Ok(())
}

/// Plain BIO tags for a span list over `n` words.
pub fn spans_to_bio<L>(spans: &[Span<L>], n: usize) -> Result<Vec<Bio>> {
    let mut ordered: Vec<(usize, usize)> = spans.iter().map(|s| (s.start, s.end)).collect();
    ordered.sort_unstable();
    let mut bio = vec![Bio::O; n];
    let mut prev_end = 0;
    for (start, end) in ordered {
        if start == 0 || start > end || end > n {
            return Err(Error::OutOfRange);
        }
        if start <= prev_end {
            return Err(Error::OverlapError);
        }
        bio[start - 1] = Bio::B;
        for tag in &mut bio[start..end] {
            *tag = Bio::I;
        }
        prev_end = end;
    }
    Ok(bio)
}

/// Typed tags (`B-x`, `I-x`, `O`) for a span list, the inverse of [`reformulate`].
pub fn typed_tags<L, F>(spans: &[Span<L>], n: usize, name: F) -> Result<Vec<String>>
where
    F: Fn(&L) -> String,
{
    validate_spans(spans, n)?;
    let mut tags = vec!["O".to_string(); n];
    for span in spans {
        let kind = name(&span.label);
        tags[span.start - 1] = format!("B-{kind}");
        for tag in &mut tags[span.start..span.end] {
            *tag = format!("I-{kind}");
        }
    }
    Ok(tags)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub id: usize,
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotAnnotation {
    pub bio: Vec<Bio>,
    /// Spans typed by slot-type id.
    pub spans: Vec<Span>,
}

/// Intent-class id (0-based index into [`LabelVocab::intents`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IntentLabel(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub utterance: Utterance,
    pub slots: SlotAnnotation,
    pub intent: IntentLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn guess(dir: &Path, has_vocab: bool) -> Split {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        match name.as_str() {
            "train" => Split::Train,
            "dev" | "valid" | "validation" => Split::Dev,
            "test" => Split::Test,
            _ if has_vocab => Split::Dev,
            _ => Split::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Intent and slot-type inventories in first-occurrence order, plus
/// natural-language descriptions for every label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelVocab {
    intents: Vec<String>,
    slot_types: Vec<String>,
    descriptions: BTreeMap<String, String>,
}

/// `round_trip` → `round trip`.
pub fn default_description(name: &str) -> String {
    name.replace(['_', '.'], " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl LabelVocab {
    pub fn new(intents: Vec<String>, slot_types: Vec<String>) -> Result<Self> {
        for list in [&intents, &slot_types] {
            let mut seen = std::collections::HashSet::new();
            for name in list {
                if name.is_empty() || name.chars().any(char::is_whitespace) {
                    return Err(Error::InvalidVocab(format!("bad label name `{name}`")));
                }
                if !seen.insert(name) {
                    return Err(Error::InvalidVocab(format!("duplicate label `{name}`")));
                }
            }
        }
        Ok(Self {
            intents,
            slot_types,
            descriptions: BTreeMap::new(),
        })
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }

    pub fn slot_types(&self) -> &[String] {
        &self.slot_types
    }

    pub fn intent_id(&self, name: &str) -> Option<usize> {
        self.intents.iter().position(|n| n == name)
    }

    pub fn slot_type_id(&self, name: &str) -> Option<usize> {
        self.slot_types.iter().position(|n| n == name)
    }

    fn intern_intent(&mut self, name: &str) -> usize {
        self.intent_id(name).unwrap_or_else(|| {
            self.intents.push(name.to_string());
            self.intents.len() - 1
        })
    }

    fn intern_slot_type(&mut self, name: &str) -> usize {
        self.slot_type_id(name).unwrap_or_else(|| {
            self.slot_types.push(name.to_string());
            self.slot_types.len() - 1
        })
    }

    /// The override if one was set, otherwise the name with `_` and `.`
    /// turned into spaces.
    pub fn description(&self, name: &str) -> String {
        self.descriptions
            .get(name)
            .cloned()
            .unwrap_or_else(|| default_description(name))
    }

    pub fn set_description(&mut self, name: &str, description: &str) -> Result<()> {
        let description = description.trim();
        if description.is_empty() {
            return Err(Error::EmptyDescription);
        }
        if description.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidVocab(format!(
                "description of `{name}` contains a tab or newline"
            )));
        }
        self.descriptions
            .insert(name.to_string(), description.to_string());
        Ok(())
    }

    /// Explicit overrides only, sorted by label name.
    pub fn description_overrides(&self) -> &BTreeMap<String, String> {
        &self.descriptions
    }

    /// Reads `label<TAB>description` lines. Blank lines and `#` comments are
    /// skipped.
    pub fn load_descriptions(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, desc) = line.split_once('\t').ok_or_else(|| {
                Error::InvalidVocab(format!("{}:{}: expected label<TAB>description", path.display(), i + 1))
            })?;
            self.set_description(name.trim(), desc)?;
        }
        Ok(())
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Loads one split directory.
///
/// Without `vocab` (training split) the vocabulary is built from the data in
/// first-occurrence order and `descriptions.tsv`, when present in `dir`, is
/// applied. With `vocab`, every label must already be known.
pub fn load_split(
    dir: &Path,
    vocab: Option<&LabelVocab>,
    mode: TagMode,
) -> Result<(Dataset, LabelVocab)> {
    let seq_in = read_lines(&dir.join(SEQ_IN))?;
    let seq_out = read_lines(&dir.join(SEQ_OUT))?;
    let labels = read_lines(&dir.join(LABEL))?;
    for (what, lines) in [(SEQ_OUT, &seq_out), (LABEL, &labels)] {
        if lines.len() != seq_in.len() {
            return Err(Error::LineCountMismatch {
                what: dir.join(what).display().to_string(),
                expected: seq_in.len(),
                found: lines.len(),
            });
        }
    }

    let frozen = vocab.is_some();
    let mut vocab = vocab.cloned().unwrap_or_default();
    let mut samples = Vec::with_capacity(seq_in.len());

    for (i, ((text, tags), label)) in seq_in.iter().zip(&seq_out).zip(&labels).enumerate() {
        let line = i + 1;
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        let tags: Vec<&str> = tags.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::EmptyUtterance(line));
        }
        if tokens.len() != tags.len() {
            return Err(Error::LengthMismatch(line));
        }
        let (bio, raw_spans) = reformulate_with(&tags, mode)?;

        let label = label.trim();
        let intent = if frozen {
            vocab
                .intent_id(label)
                .ok_or_else(|| Error::UnknownLabel(label.to_string()))?
        } else {
            if label.is_empty() {
                return Err(Error::InvalidVocab(format!("line {line}: empty intent label")));
            }
            vocab.intern_intent(label)
        };

        let spans = raw_spans
            .into_iter()
            .map(|s| {
                let id = if frozen {
                    vocab
                        .slot_type_id(&s.label)
                        .ok_or_else(|| Error::UnknownLabel(s.label.clone()))?
                } else {
                    vocab.intern_slot_type(&s.label)
                };
                Ok(Span::new(s.start, s.end, id))
            })
            .collect::<Result<Vec<_>>>()?;

        samples.push(Sample {
            utterance: Utterance { id: i, tokens },
            slots: SlotAnnotation { bio, spans },
            intent: IntentLabel(intent),
        });
    }

    if !frozen {
        let desc = dir.join(DESCRIPTIONS);
        if desc.exists() {
            vocab.load_descriptions(&desc)?;
        }
    }

    Ok((
        Dataset {
            split: Split::guess(dir, frozen),
            samples,
        },
        vocab,
    ))
}
