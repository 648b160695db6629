//! Forgery-concept bank: the words that name synthetic-image characteristics,
//! one per fake-class prompt, plus the word used for the pristine class.
//!
//! Banks persist to a small line-oriented text file:
//!
//! ```text
//! real_word=real
//! query=what are the characters of deepfake images?
//! # comment lines are ignored
//! fake
//! blurred
//! ```

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};

/// Query sent to the language model when retrieving forgery concepts.
pub const DEFAULT_QUERY: &str = "what are the characters of deepfake images?";

/// Concepts shipped with the crate, in order.
pub const DEFAULT_FAKE_CONCEPTS: [&str; 5] = [
    "fake",
    "blurred",
    "unnatural",
    "inconsistent",
    "unrealistic",
];

pub const DEFAULT_REAL_WORD: &str = "real";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConceptSource {
    Default,
    File,
    Llm,
}

/// A single lowercase word or short phrase.
///
/// Equality and hashing consider only the text; provenance is metadata and is
/// not persisted in the bank file.
#[derive(Debug, Clone)]
pub struct Concept {
    text: String,
    pub source: ConceptSource,
    /// Unix seconds at which an LLM-sourced concept was retrieved.
    pub retrieved_at: Option<u64>,
}

impl Concept {
    pub fn new(text: &str, source: ConceptSource) -> Result<Self> {
        let text = canonical_text(text);
        if text.is_empty() {
            return Err(Error::Validation("concept text is empty".into()));
        }
        if text.starts_with('#') {
            return Err(Error::Validation(format!(
                "concept `{text}` may not start with `#`"
            )));
        }
        Ok(Self {
            text,
            source,
            retrieved_at: None,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

impl PartialEq for Concept {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
    }
}

impl Eq for Concept {}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Lowercase, trim and collapse internal whitespace.
fn canonical_text(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptBank {
    fake_concepts: Vec<Concept>,
    real_word: Concept,
    query: Option<String>,
}

impl ConceptBank {
    /// Builds a bank, enforcing non-emptiness, uniqueness and that the real
    /// word is not also a fake concept.
    pub fn new(
        fake_concepts: Vec<Concept>,
        real_word: Concept,
        query: Option<String>,
    ) -> Result<Self> {
        if fake_concepts.is_empty() {
            return Err(Error::Validation(
                "concept bank has no fake concepts".into(),
            ));
        }
        let mut seen = HashSet::new();
        for c in &fake_concepts {
            if !seen.insert(c.text()) {
                return Err(Error::Validation(format!(
                    "duplicate concept `{}`",
                    c.text()
                )));
            }
        }
        if seen.contains(real_word.text()) {
            return Err(Error::Validation(format!(
                "real word `{}` also appears as a fake concept",
                real_word.text()
            )));
        }
        let query = query
            .map(|q| q.trim().to_string())
            .filter(|q| !q.is_empty());
        if query.as_deref().is_some_and(|q| q.contains('\n')) {
            return Err(Error::Validation("query may not span lines".into()));
        }
        Ok(Self {
            fake_concepts,
            real_word,
            query,
        })
    }

    pub fn fake_concepts(&self) -> &[Concept] {
        &self.fake_concepts
    }

    pub fn real_word(&self) -> &Concept {
        &self.real_word
    }

    pub fn query(&self) -> Option<&str> {
        self.query.as_deref()
    }

    /// Returns a new bank with `extra` appended, skipping concepts already
    /// present (or equal to the real word). `self` is left untouched.
    pub fn merged(&self, extra: &[Concept]) -> Self {
        let mut out = self.clone();
        for c in extra {
            if c != &out.real_word && !out.fake_concepts.contains(c) {
                out.fake_concepts.push(c.clone());
            }
        }
        out
    }

    /// Serializes to the bank file format with `\n` line endings.
    pub fn to_file_string(&self) -> String {
        let mut s = format!(
            "real_word={}\nquery={}\n",
            self.real_word,
            self.query().unwrap_or("")
        );
        for c in &self.fake_concepts {
            s.push_str(c.text());
            s.push('\n');
        }
        s
    }

    pub fn parse(content: &str) -> Result<Self> {
        let mut lines = content.lines().map(|l| l.trim_end_matches('\r'));
        let real = lines
            .next()
            .and_then(|l| l.strip_prefix("real_word="))
            .ok_or_else(|| Error::Validation("bank file must start with `real_word=`".into()))?;
        let query = lines
            .next()
            .and_then(|l| l.strip_prefix("query="))
            .ok_or_else(|| Error::Validation("second bank line must be `query=`".into()))?;
        let mut fake = Vec::new();
        for line in lines {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            fake.push(Concept::new(trimmed, ConceptSource::File)?);
        }
        Self::new(
            fake,
            Concept::new(real, ConceptSource::File)?,
            Some(query.to_string()),
        )
    }
}

pub fn default_bank() -> ConceptBank {
    let fake = DEFAULT_FAKE_CONCEPTS
        .iter()
        .map(|t| Concept::new(t, ConceptSource::Default).expect("static concept"))
        .collect();
    let real = Concept::new(DEFAULT_REAL_WORD, ConceptSource::Default).expect("static concept");
    ConceptBank::new(fake, real, Some(DEFAULT_QUERY.to_string())).expect("default bank is valid")
}

pub fn load_bank(path: &Path) -> Result<ConceptBank> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ConceptBank::parse(&content)
}

pub fn save_bank(bank: &ConceptBank, path: &Path) -> Result<()> {
    std::fs::write(path, bank.to_file_string()).map_err(|e| Error::io(path, e))
}

/// External language-model contract: one request string in, one response string out.
pub trait LlmClient {
    fn complete(&self, request: &str) -> std::result::Result<String, String>;
}

/// Runs an external program, feeding the request on stdin and reading the
/// response from stdout. Any LLM front-end that speaks stdin/stdout fits.
#[derive(Debug, Clone)]
pub struct CommandClient {
    pub program: String,
    pub args: Vec<String>,
    pub timeout: Duration,
}

impl CommandClient {
    pub fn new(command_line: &str, timeout: Duration) -> Result<Self> {
        let mut parts = command_line.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::Validation("empty LLM command".into()))?;
        Ok(Self {
            program,
            args: parts.collect(),
            timeout,
        })
    }
}

impl LlmClient for CommandClient {
    fn complete(&self, request: &str) -> std::result::Result<String, String> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("failed to start `{}`: {e}", self.program))?;

        if let Some(mut stdin) = child.stdin.take() {
            stdin
                .write_all(request.as_bytes())
                .map_err(|e| format!("failed to write request: {e}"))?;
        }
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut buf = String::new();
            stdout.read_to_string(&mut buf).map(|_| buf)
        });

        let start = Instant::now();
        loop {
            match child.try_wait().map_err(|e| e.to_string())? {
                Some(status) if status.success() => break,
                Some(status) => return Err(format!("LLM command exited with {status}")),
                None if start.elapsed() > self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(format!("LLM command timed out after {:?}", self.timeout));
                }
                None => std::thread::sleep(Duration::from_millis(10)),
            }
        }
        reader
            .join()
            .map_err(|_| "reader thread panicked".to_string())?
            .map_err(|e| format!("failed to read response: {e}"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Retrieval {
    pub concepts: Vec<Concept>,
    pub diagnostics: Vec<String>,
}

/// Asks `client` for forgery concepts and parses the free-text answer.
///
/// Transport failures are errors; an answer with no usable words yields an
/// empty list and a diagnostic.
pub fn retrieve_concepts(client: &dyn LlmClient, query: &str) -> Result<Retrieval> {
    let response = client.complete(query).map_err(Error::Retrieval)?;
    let retrieved_at = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .ok();
    let mut out = parse_concepts(&response);
    for c in &mut out.concepts {
        c.retrieved_at = retrieved_at;
    }
    Ok(out)
}

/// Splits a response on commas, semicolons and newlines, strips list markers
/// and surrounding punctuation, lowercases and deduplicates.
pub fn parse_concepts(response: &str) -> Retrieval {
    let mut out = Retrieval::default();
    let mut seen = HashSet::new();
    for piece in response.split([',', ';', '\n']) {
        let cleaned = strip_list_marker(piece.trim())
            .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
        let Ok(concept) = Concept::new(cleaned, ConceptSource::Llm) else {
            continue;
        };
        if seen.insert(concept.text().to_string()) {
            out.concepts.push(concept);
        }
    }
    if out.concepts.is_empty() {
        out.diagnostics.push(format!(
            "no concepts could be parsed from response {response:?}"
        ));
    }
    out
}

fn strip_list_marker(s: &str) -> &str {
    let s = s.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = s.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &s[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim_start();
        }
    }
    s
}
