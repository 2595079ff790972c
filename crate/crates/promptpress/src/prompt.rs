//! Structured prompt data model: parsing, sentence splitting, and token
//! length accounting.
//!
//! A structured prompt has three components: an instruction, an ordered list
//! of demonstrations, and a question. Token counting is always delegated to
//! the active scoring backend's tokenizer so that every length in the system
//! is measured in the same units the scorer sees.

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, PplBackend};

/// Which component of a structured prompt a piece of text belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Instruction,
    Demonstrations,
    Question,
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Component::Instruction => write!(f, "instruction"),
            Component::Demonstrations => write!(f, "demonstrations"),
            Component::Question => write!(f, "question"),
        }
    }
}

/// A prompt split into instruction, demonstrations, and question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredPrompt {
    #[serde(default)]
    pub instruction: String,
    #[serde(default)]
    pub demonstrations: Vec<String>,
    pub question: String,
}

impl StructuredPrompt {
    /// Wraps a plain text blob as a prompt with only a question component.
    pub fn from_plain_text(text: impl Into<String>) -> Self {
        StructuredPrompt {
            instruction: String::new(),
            demonstrations: Vec::new(),
            question: text.into(),
        }
    }
}

/// Kind of selectable text unit used by the coarse compression stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Demonstration,
    Sentence,
}

/// One selectable unit of text (a whole demonstration or a sentence).
///
/// `separator` holds the whitespace that followed the unit in the source
/// text; concatenating `text` + `separator` over all units reproduces the
/// source exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextUnit {
    pub text: String,
    pub index: usize,
    pub kind: UnitKind,
    #[serde(default)]
    pub separator: String,
}

/// Tokens of one prompt component under the active backend tokenizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedComponent {
    pub component: Component,
    pub tokens: Vec<String>,
}

impl TokenizedComponent {
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

/// Per-component token lengths of a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentLengths {
    pub instruction: usize,
    pub demonstrations: usize,
    pub question: usize,
}

impl ComponentLengths {
    /// Total prompt length; always the exact sum of the three components.
    pub fn total(&self) -> usize {
        self.instruction + self.demonstrations + self.question
    }
}

/// Error raised when a structured-prompt document cannot be parsed.
#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("malformed JSON at line {line} column {column} (byte {offset}): {message}")]
    Json {
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },
    #[error("document does not match the structured-prompt schema: {0}")]
    Schema(String),
}

/// Parses a structured-prompt JSON document.
///
/// The document must be a JSON object with a string `question` field;
/// `instruction` (string) and `demonstrations` (array of strings) default to
/// empty when absent. Unknown fields are ignored.
pub fn parse_prompt(document: &str) -> Result<StructuredPrompt, ParseError> {
    match serde_json::from_str::<StructuredPrompt>(document) {
        Ok(prompt) => Ok(prompt),
        Err(err) => {
            if err.is_syntax() || err.is_eof() {
                let offset = byte_offset(document, err.line(), err.column());
                Err(ParseError::Json {
                    line: err.line(),
                    column: err.column(),
                    offset,
                    message: err.to_string(),
                })
            } else {
                Err(ParseError::Schema(err.to_string()))
            }
        }
    }
}

/// Serializes a prompt back to the external JSON format.
pub fn serialize_prompt(prompt: &StructuredPrompt) -> String {
    serde_json::to_string(prompt).expect("prompt serialization cannot fail")
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut remaining_lines = line - 1;
    let mut offset = 0;
    for (idx, byte) in text.bytes().enumerate() {
        if remaining_lines == 0 {
            break;
        }
        if byte == b'\n' {
            remaining_lines -= 1;
            offset = idx + 1;
        }
    }
    offset + column.saturating_sub(1)
}

/// Splits text into sentence units.
///
/// A sentence ends after `.`, `!`, or `?` when the next character is
/// whitespace or end of input, or at a bare newline. The whitespace run after
/// a terminator is recorded as the unit's `separator`, so concatenating
/// `text` + `separator` over all units reproduces the input byte-for-byte. A
/// trailing fragment with no terminator becomes one final unit.
pub fn split_sentences(text: &str) -> Vec<TextUnit> {
    let mut units: Vec<TextUnit> = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut start = 0;
    let mut i = 0;

    let push_unit = |text_range: String, separator: String, units: &mut Vec<TextUnit>| {
        let index = units.len();
        units.push(TextUnit {
            text: text_range,
            index,
            kind: UnitKind::Sentence,
            separator,
        });
    };

    while i < chars.len() {
        let c = chars[i];
        let at_terminator = matches!(c, '.' | '!' | '?')
            && chars.get(i + 1).is_none_or(|next| next.is_whitespace());
        let at_newline = c == '\n';

        if at_terminator || at_newline {
            // The newline itself belongs to the separator, a terminator stays
            // in the unit text.
            let text_end = if at_terminator { i + 1 } else { i };
            let mut sep_end = text_end;
            while sep_end < chars.len() && chars[sep_end].is_whitespace() {
                sep_end += 1;
            }
            let unit_text: String = chars[start..text_end].iter().collect();
            let separator: String = chars[text_end..sep_end].iter().collect();
            if unit_text.trim().is_empty() {
                // No sentence content yet: fold the whitespace into the
                // previous unit's separator, or let it lead the next unit.
                if let Some(prev) = units.last_mut() {
                    prev.separator.push_str(&unit_text);
                    prev.separator.push_str(&separator);
                    start = sep_end;
                }
                i = sep_end;
                continue;
            }
            push_unit(unit_text, separator, &mut units);
            start = sep_end;
            i = sep_end;
        } else {
            i += 1;
        }
    }

    if start < chars.len() {
        let tail: String = chars[start..].iter().collect();
        push_unit(tail, String::new(), &mut units);
    }

    units
}

/// Computes per-component token lengths under the backend tokenizer.
///
/// The demonstrations length is the sum of per-demonstration counts, and the
/// returned lengths always satisfy `total = instruction + demonstrations +
/// question`.
pub fn token_lengths(
    prompt: &StructuredPrompt,
    backend: &dyn PplBackend,
) -> Result<ComponentLengths, BackendError> {
    let instruction = backend.tokenize(&prompt.instruction)?.len();
    let mut demonstrations = 0;
    for demo in &prompt.demonstrations {
        demonstrations += backend.tokenize(demo)?.len();
    }
    let question = backend.tokenize(&prompt.question)?.len();
    Ok(ComponentLengths {
        instruction,
        demonstrations,
        question,
    })
}
