//! Subtask datasets, text preprocessing and the reference tokenizer.
//!
//! Data files are comma-separated with a header row:
//!
//! | subtask | data columns                              | answers columns          |
//! |---------|-------------------------------------------|--------------------------|
//! | A       | `id, sent0, sent1`                        | `id, nonsense_index`     |
//! | B       | `id, FalseSent, OptionA, OptionB, OptionC`| `id, gold (0-2 or A-C)`  |
//! | C       | `id, FalseSent`                           | `id, ref1[, ref2, ref3]` |
//!
//! Answers files may omit the header; a first row whose id column reads `id`
//! is treated as one. Fields containing commas are quoted, embedded quotes
//! doubled.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::Markers;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subtask {
    A,
    B,
    C,
}

impl Subtask {
    /// Number of answer classes for the selection subtasks.
    pub fn num_choices(self) -> Option<usize> {
        match self {
            Subtask::A => Some(2),
            Subtask::B => Some(3),
            Subtask::C => None,
        }
    }
}

impl fmt::Display for Subtask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Subtask::A => "A",
            Subtask::B => "B",
            Subtask::C => "C",
        };
        f.write_str(s)
    }
}

impl FromStr for Subtask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Subtask::A),
            "B" => Ok(Subtask::B),
            "C" => Ok(Subtask::C),
            other => Err(Error::InvalidArgument(format!("unknown subtask {other:?}"))),
        }
    }
}

/// A validation example: two similarly worded statements, one of which does
/// not make sense.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementPair {
    pub id: String,
    pub sent0: String,
    pub sent1: String,
    pub nonsense_index: Option<usize>,
}

impl StatementPair {
    pub fn new(id: impl Into<String>, sent0: &str, sent1: &str, nonsense_index: Option<usize>) -> Result<Self> {
        let sent0 = sent0.trim();
        let sent1 = sent1.trim();
        if sent0.is_empty() || sent1.is_empty() {
            return Err(Error::EmptyInput("statement"));
        }
        if let Some(k) = nonsense_index {
            if k > 1 {
                return Err(Error::InvalidArgument(format!("nonsense_index {k} not in {{0,1}}")));
            }
        }
        Ok(Self {
            id: id.into(),
            sent0: sent0.to_owned(),
            sent1: sent1.to_owned(),
            nonsense_index,
        })
    }

    pub fn statements(&self) -> [&str; 2] {
        [&self.sent0, &self.sent1]
    }

    /// The same pair with the statements (and label) exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            id: self.id.clone(),
            sent0: self.sent1.clone(),
            sent1: self.sent0.clone(),
            nonsense_index: self.nonsense_index.map(|k| 1 - k),
        }
    }
}

/// An explanation example: a nonsense statement and three candidate reasons.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationItem {
    pub id: String,
    pub false_statement: String,
    pub options: [String; 3],
    pub gold_index: Option<usize>,
}

impl ExplanationItem {
    pub fn new(
        id: impl Into<String>,
        false_statement: &str,
        options: [&str; 3],
        gold_index: Option<usize>,
    ) -> Result<Self> {
        let false_statement = false_statement.trim();
        if false_statement.is_empty() {
            return Err(Error::EmptyInput("false statement"));
        }
        if options.iter().any(|o| o.trim().is_empty()) {
            return Err(Error::EmptyInput("explanation option"));
        }
        if let Some(k) = gold_index {
            if k > 2 {
                return Err(Error::InvalidArgument(format!("gold_index {k} not in {{0,1,2}}")));
            }
        }
        Ok(Self {
            id: id.into(),
            false_statement: false_statement.to_owned(),
            options: options.map(|o| o.trim().to_owned()),
            gold_index,
        })
    }
}

/// A generation example: a nonsense statement and its reference reasons
/// (empty for unlabeled data).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationItem {
    pub id: String,
    pub false_statement: String,
    pub references: Vec<String>,
}

impl GenerationItem {
    pub fn new(id: impl Into<String>, false_statement: &str, references: Vec<String>) -> Result<Self> {
        let false_statement = false_statement.trim();
        if false_statement.is_empty() {
            return Err(Error::EmptyInput("false statement"));
        }
        if references.iter().any(|r| r.trim().is_empty()) {
            return Err(Error::EmptyInput("reference"));
        }
        Ok(Self {
            id: id.into(),
            false_statement: false_statement.to_owned(),
            references,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dataset {
    A(Vec<StatementPair>),
    B(Vec<ExplanationItem>),
    C(Vec<GenerationItem>),
}

impl Dataset {
    pub fn subtask(&self) -> Subtask {
        match self {
            Dataset::A(_) => Subtask::A,
            Dataset::B(_) => Subtask::B,
            Dataset::C(_) => Subtask::C,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::A(v) => v.len(),
            Dataset::B(v) => v.len(),
            Dataset::C(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<&str> {
        match self {
            Dataset::A(v) => v.iter().map(|x| x.id.as_str()).collect(),
            Dataset::B(v) => v.iter().map(|x| x.id.as_str()).collect(),
            Dataset::C(v) => v.iter().map(|x| x.id.as_str()).collect(),
        }
    }
}

/// A token list, optionally carrying begin/end markers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<String>,
    has_specials: bool,
}

impl TokenSequence {
    /// An unwrapped sequence.
    pub fn plain(tokens: Vec<String>) -> Self {
        Self {
            tokens,
            has_specials: false,
        }
    }

    /// A sequence whose boundary markers are already attached. Checks the
    /// first and last tokens against `markers`.
    pub fn with_specials(tokens: Vec<String>, markers: &Markers) -> Result<Self> {
        if tokens.len() < 3 {
            return Err(Error::Sequence(format!(
                "wrapped sequence needs at least 3 tokens, got {}",
                tokens.len()
            )));
        }
        if tokens[0] != markers.begin || tokens[tokens.len() - 1] != markers.end {
            return Err(Error::Sequence("missing begin/end markers".into()));
        }
        Ok(Self {
            tokens,
            has_specials: true,
        })
    }

    /// Like [`with_specials`](Self::with_specials) for a sequence whose
    /// `position` already holds the mask token, which may sit on a boundary.
    pub fn with_specials_masked(tokens: Vec<String>, position: usize, markers: &Markers) -> Result<Self> {
        let last = tokens.len().saturating_sub(1);
        let boundary_ok = |i: usize, marker: &str| {
            tokens
                .get(i)
                .is_some_and(|t| t == marker || (i == position && *t == markers.mask))
        };
        if tokens.len() < 3 {
            return Self::with_specials(tokens, markers);
        }
        if !boundary_ok(0, &markers.begin) || !boundary_ok(last, &markers.end) {
            return Err(Error::Sequence("missing begin/end markers".into()));
        }
        Ok(Self {
            tokens,
            has_specials: true,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }

    pub fn has_specials(&self) -> bool {
        self.has_specials
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens between the boundary markers, or all tokens when unwrapped.
    pub fn interior(&self) -> &[String] {
        if self.has_specials {
            &self.tokens[1..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    /// Copy of this sequence with one position replaced.
    pub(crate) fn replaced(&self, position: usize, token: &str) -> Self {
        let mut tokens = self.tokens.clone();
        tokens[position] = token.to_owned();
        Self {
            tokens,
            has_specials: self.has_specials,
        }
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

/// Appends a period unless the text already ends in `.`, `!` or `?`.
/// Trailing whitespace is dropped first.
pub fn ensure_terminal_period(text: &str) -> Result<String> {
    let trimmed = text.trim_end();
    if trimmed.trim_start().is_empty() {
        return Err(Error::EmptyInput("text"));
    }
    if trimmed.ends_with(['.', '!', '?']) {
        Ok(trimmed.to_owned())
    } else {
        Ok(format!("{trimmed}."))
    }
}

/// Lowercases, splits punctuation into standalone tokens and splits on
/// whitespace. Any character that is neither alphanumeric nor whitespace
/// counts as punctuation.
pub fn tokenize_reference(text: &str) -> Result<Vec<String>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("text"));
    }
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_lowercase().collect());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    Ok(tokens)
}

/// Attaches the begin and end markers. Rejects an empty list and a list that
/// is already wrapped.
pub fn wrap_special(tokens: Vec<String>, markers: &Markers) -> Result<TokenSequence> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token list"));
    }
    if tokens.len() >= 2 && tokens[0] == markers.begin && tokens[tokens.len() - 1] == markers.end {
        return Err(Error::Sequence("sequence is already wrapped".into()));
    }
    let mut wrapped = Vec::with_capacity(tokens.len() + 2);
    wrapped.push(markers.begin.clone());
    wrapped.extend(tokens);
    wrapped.push(markers.end.clone());
    Ok(TokenSequence {
        tokens: wrapped,
        has_specials: true,
    })
}

/// Period-normalize, tokenize and wrap a statement.
pub fn prepare_statement(text: &str, markers: &Markers) -> Result<TokenSequence> {
    let text = ensure_terminal_period(text)?;
    wrap_special(tokenize_reference(&text)?, markers)
}

// ---------------------------------------------------------------------------
// File IO

fn open_reader(path: &Path, has_headers: bool) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(has_headers)
        .flexible(true)
        .trim(csv::Trim::None)
        .from_reader(file))
}

fn parse_err(path: &Path, record: &csv::StringRecord, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line: record.position().map(|p| p.line()).unwrap_or(0),
        message: message.into(),
    }
}

fn read_rows(path: &Path, has_headers: bool) -> Result<Vec<csv::StringRecord>> {
    let mut reader = open_reader(path, has_headers)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| match e.position() {
            Some(pos) => Error::Parse {
                path: path.to_owned(),
                line: pos.line(),
                message: e.to_string(),
            },
            None => Error::Csv(e),
        })?;
        // Blank trailing lines come through as a single empty field.
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        rows.push(record);
    }
    Ok(rows)
}

/// Rows of an answers-style file, skipping an optional `id` header row.
fn read_answer_rows(path: &Path) -> Result<Vec<csv::StringRecord>> {
    let mut rows = read_rows(path, false)?;
    if rows
        .first()
        .is_some_and(|r| r.get(0).is_some_and(|f| f.trim().eq_ignore_ascii_case("id")))
    {
        rows.remove(0);
    }
    Ok(rows)
}

fn check_unique<'a>(path: &Path, ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId {
                path: path.to_owned(),
                id: id.to_owned(),
            });
        }
    }
    Ok(())
}

/// Parses a label that is either a zero-based index or a letter `A`, `B`, `C`.
pub fn parse_label(field: &str, num_choices: usize) -> Option<usize> {
    let field = field.trim();
    let index = match field.parse::<usize>() {
        Ok(k) => k,
        Err(_) => {
            let mut chars = field.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_alphabetic() => (c.to_ascii_uppercase() as u8 - b'A') as usize,
                _ => return None,
            }
        }
    };
    (index < num_choices).then_some(index)
}

/// Reads an `id, label` file in file order.
pub fn load_labels(path: &Path, num_choices: usize) -> Result<Vec<(String, usize)>> {
    let rows = read_answer_rows(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in &rows {
        if row.len() != 2 {
            return Err(parse_err(path, row, format!("expected 2 columns, found {}", row.len())));
        }
        let label = parse_label(&row[1], num_choices)
            .ok_or_else(|| parse_err(path, row, format!("label {:?} not in 0..{num_choices}", &row[1])))?;
        out.push((row[0].trim().to_owned(), label));
    }
    check_unique(path, out.iter().map(|(id, _)| id.as_str()))?;
    Ok(out)
}

/// Reads an `id, ref1[, ref2, ref3]` file in file order. Empty trailing
/// reference fields are ignored.
pub fn load_references(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let rows = read_answer_rows(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in &rows {
        if !(2..=4).contains(&row.len()) {
            return Err(parse_err(
                path,
                row,
                format!("expected 2 to 4 columns, found {}", row.len()),
            ));
        }
        let refs: Vec<String> = row
            .iter()
            .skip(1)
            .map(str::trim)
            .filter(|r| !r.is_empty())
            .map(str::to_owned)
            .collect();
        if refs.is_empty() {
            return Err(parse_err(path, row, "no non-empty reference"));
        }
        out.push((row[0].trim().to_owned(), refs));
    }
    check_unique(path, out.iter().map(|(id, _)| id.as_str()))?;
    Ok(out)
}

/// Reads an `id, text` two-column file such as a generation candidates file.
pub fn load_texts(path: &Path) -> Result<Vec<(String, String)>> {
    let rows = read_answer_rows(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in &rows {
        if row.len() != 2 {
            return Err(parse_err(path, row, format!("expected 2 columns, found {}", row.len())));
        }
        out.push((row[0].trim().to_owned(), row[1].to_owned()));
    }
    check_unique(path, out.iter().map(|(id, _)| id.as_str()))?;
    Ok(out)
}

/// Matches answer rows to data ids, failing on ids present on only one side.
fn attach<T: Clone>(data_ids: &[&str], answers: Vec<(String, T)>) -> Result<Vec<T>> {
    let known: HashSet<&str> = data_ids.iter().copied().collect();
    let unknown: Vec<String> = answers
        .iter()
        .filter(|(id, _)| !known.contains(id.as_str()))
        .map(|(id, _)| id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownAnswerIds(unknown));
    }
    let by_id: HashMap<String, T> = answers.into_iter().collect();
    let missing: Vec<String> = data_ids
        .iter()
        .filter(|id| !by_id.contains_key(**id))
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingAnswers(missing));
    }
    Ok(data_ids.iter().map(|id| by_id[*id].clone()).collect())
}

/// Loads a subtask dataset, attaching gold labels when an answers file is given.
pub fn load_dataset(kind: Subtask, data_path: &Path, answers_path: Option<&Path>) -> Result<Dataset> {
    let rows = read_rows(data_path, true)?;
    let expected = match kind {
        Subtask::A => 3,
        Subtask::B => 5,
        Subtask::C => 2,
    };
    for row in &rows {
        if row.len() != expected {
            return Err(parse_err(
                data_path,
                row,
                format!("expected {expected} columns, found {}", row.len()),
            ));
        }
    }
    check_unique(data_path, rows.iter().map(|r| r[0].trim()))?;
    let ids: Vec<&str> = rows.iter().map(|r| r[0].trim()).collect();

    let dataset = match kind {
        Subtask::A => {
            let labels = match answers_path {
                Some(p) => attach(&ids, load_labels(p, 2)?)?.into_iter().map(Some).collect(),
                None => vec![None; rows.len()],
            };
            let items = rows
                .iter()
                .zip(labels)
                .map(|(row, label)| {
                    StatementPair::new(row[0].trim(), &row[1], &row[2], label)
                        .map_err(|e| parse_err(data_path, row, e.to_string()))
                })
                .collect::<Result<_>>()?;
            Dataset::A(items)
        }
        Subtask::B => {
            let labels = match answers_path {
                Some(p) => attach(&ids, load_labels(p, 3)?)?.into_iter().map(Some).collect(),
                None => vec![None; rows.len()],
            };
            let items = rows
                .iter()
                .zip(labels)
                .map(|(row, label)| {
                    ExplanationItem::new(row[0].trim(), &row[1], [&row[2], &row[3], &row[4]], label)
                        .map_err(|e| parse_err(data_path, row, e.to_string()))
                })
                .collect::<Result<_>>()?;
            Dataset::B(items)
        }
        Subtask::C => {
            let refs = match answers_path {
                Some(p) => attach(&ids, load_references(p)?)?,
                None => vec![Vec::new(); rows.len()],
            };
            let items = rows
                .iter()
                .zip(refs)
                .map(|(row, refs)| {
                    GenerationItem::new(row[0].trim(), &row[1], refs)
                        .map_err(|e| parse_err(data_path, row, e.to_string()))
                })
                .collect::<Result<_>>()?;
            Dataset::C(items)
        }
    };
    Ok(dataset)
}

fn create_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    Ok(csv::WriterBuilder::new().flexible(true).from_writer(file))
}

/// Writes a dataset in the layout [`load_dataset`] reads. The answers file is
/// written only when `answers_path` is given, and then every example must be
/// labeled.
pub fn write_dataset(dataset: &Dataset, data_path: &Path, answers_path: Option<&Path>) -> Result<()> {
    let mut data = create_writer(data_path)?;
    let mut answers = answers_path.map(create_writer).transpose()?;
    let unlabeled = |id: &str| Error::InvalidArgument(format!("example {id} has no label"));
    match dataset {
        Dataset::A(items) => {
            data.write_record(["id", "sent0", "sent1"])?;
            for x in items {
                data.write_record([&x.id, &x.sent0, &x.sent1])?;
                if let Some(w) = answers.as_mut() {
                    let label = x.nonsense_index.ok_or_else(|| unlabeled(&x.id))?;
                    w.write_record([x.id.clone(), label.to_string()])?;
                }
            }
        }
        Dataset::B(items) => {
            data.write_record(["id", "FalseSent", "OptionA", "OptionB", "OptionC"])?;
            for x in items {
                data.write_record([&x.id, &x.false_statement, &x.options[0], &x.options[1], &x.options[2]])?;
                if let Some(w) = answers.as_mut() {
                    let label = x.gold_index.ok_or_else(|| unlabeled(&x.id))?;
                    w.write_record([x.id.clone(), label.to_string()])?;
                }
            }
        }
        Dataset::C(items) => {
            data.write_record(["id", "FalseSent"])?;
            for x in items {
                data.write_record([&x.id, &x.false_statement])?;
                if let Some(w) = answers.as_mut() {
                    if x.references.is_empty() {
                        return Err(unlabeled(&x.id));
                    }
                    let mut row = vec![x.id.as_str()];
                    row.extend(x.references.iter().map(String::as_str));
                    w.write_record(row)?;
                }
            }
        }
    }
    data.flush().map_err(|e| Error::io("flushing data file", e))?;
    if let Some(mut w) = answers {
        w.flush().map_err(|e| Error::io("flushing answers file", e))?;
    }
    Ok(())
}
