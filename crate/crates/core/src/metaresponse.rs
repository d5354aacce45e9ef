//! Task prompts and the three-part meta-response.
//!
//! A meta-response carries the extraction tuples in a `<UIE>` section,
//! followed by zero or more `<Module>` / `<Instruction>` pairs that ask a
//! grounding backend to segment, track, or cut out a mention:
//!
//! ```text
//! <UIE>
//! (Trump, person)
//! (Merkel<concept>, person)
//! <Module>
//! Image Segmenter
//! <Instruction>
//! Segmentation: 'Merkel'
//! ```
//!
//! The grammar is documented in `docs/meta-response.md`. Parsing is lenient
//! about tuple syntax (quotes, trailing commas, blank lines) and reports
//! malformed tuples as warnings; only a missing `<UIE>` section or an
//! `<Instruction>` with no `<Module>` before it is fatal.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::model::{
    normalize_mention, Annotation, EntityMention, EventArgument, EventRecord, GroundingModality,
    GroundingRef, MentionGroundings, Modality, PredictionSet, RelationTriple, Task,
};

pub const CONCEPT_TOKEN: &str = "<concept>";

const UIE_TAG: &str = "<UIE>";
const MODULE_TAG: &str = "<Module>";
const INSTRUCTION_TAG: &str = "<Instruction>";
const CLOSE_TAGS: [&str; 3] = ["</UIE>", "</Module>", "</Instruction>"];

const NER_INSTRUCTION: &str = "Please recognize all entity words and categorize them by pre-defined labels in the given text, and outline them in the given image or video or audio correspondingly. The output format should be \"(entity1, label1)(entity2, label2)\".";
const RE_INSTRUCTION: &str = "Please extract all relations between named entities, and outline them in the given image or video or audio correspondingly. The output format should be \"(subject entity, relation, object entity)\".";
const EE_INSTRUCTION: &str = "Extract all the possible events in the video, and track the argument mentions correspondingly. Each event associated with an event type must have a trigger verb. If possible, please give detailed arguments for each event.";
const EE_FORMAT: &str =
    "The output format should be \"(trigger, event type, role1: argument1, role2: argument2)\".";
const CONCEPT_SENTENCE: &str = "If an entity possibly has a counterpart in the given image or video or audio, please generate a token \"<concept>\" after the entity word, for subsequent cross-modal grounding.";

const NER_LABEL_PREFIX: &str = "Candidate category labels: ";
const RE_LABEL_PREFIX: &str = "Candidate relation labels: ";
const EE_LABEL_PREFIX: &str = "Candidate event types: ";
const EE_ROLE_PREFIX: &str = "Candidate event argument types: ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub task: Task,
    /// Entity types, relation labels, or event types, depending on the task.
    pub label_schema: Vec<String>,
    /// Argument roles; only used for event extraction.
    #[serde(default)]
    pub argument_roles: Vec<String>,
    pub modalities_present: BTreeSet<Modality>,
}

fn check_labels(what: &str, labels: &[String]) -> Result<()> {
    for label in labels {
        if label.is_empty() || label.trim() != label || label.contains(',') || label.contains('\n')
        {
            return Err(Error::invalid(format!(
                "{what} `{label}` must be non-empty, unpadded, and free of commas and newlines"
            )));
        }
    }
    Ok(())
}

impl PromptSpec {
    pub fn validate(&self) -> Result<()> {
        if self.label_schema.is_empty() {
            return Err(Error::invalid("label schema must be non-empty"));
        }
        if self.modalities_present.is_empty() {
            return Err(Error::invalid("at least one modality must be present"));
        }
        check_labels("label", &self.label_schema)?;
        check_labels("argument role", &self.argument_roles)?;
        Ok(())
    }
}

fn label_prefix(task: Task) -> &'static str {
    match task {
        Task::Ner => NER_LABEL_PREFIX,
        Task::Re => RE_LABEL_PREFIX,
        Task::Ee => EE_LABEL_PREFIX,
    }
}

pub fn build_prompt(spec: &PromptSpec) -> Result<String> {
    spec.validate()?;
    let mut lines: Vec<String> = Vec::new();
    match spec.task {
        Task::Ner => lines.push(NER_INSTRUCTION.to_string()),
        Task::Re => lines.push(RE_INSTRUCTION.to_string()),
        Task::Ee => {
            lines.push(EE_INSTRUCTION.to_string());
            lines.push(EE_FORMAT.to_string());
        }
    }
    if spec.modalities_present.iter().any(|m| *m != Modality::Text) {
        lines.push(CONCEPT_SENTENCE.to_string());
    }
    lines.push(format!(
        "{}{}",
        label_prefix(spec.task),
        spec.label_schema.join(", ")
    ));
    if spec.task == Task::Ee && !spec.argument_roles.is_empty() {
        lines.push(format!(
            "{EE_ROLE_PREFIX}{}",
            spec.argument_roles.join(", ")
        ));
    }
    let names: Vec<&str> = [
        (Modality::Text, "Text"),
        (Modality::Image, "Image"),
        (Modality::Video, "Video"),
        (Modality::Audio, "Audio"),
    ]
    .iter()
    .filter(|(m, _)| spec.modalities_present.contains(m))
    .map(|(_, n)| *n)
    .collect();
    lines.push(format!("Input {}:", names.join("/")));
    Ok(lines.join("\n"))
}

/// Recovers the candidate-label list from a prompt produced by
/// [`build_prompt`].
pub fn parse_label_line(prompt: &str, task: Task) -> Option<Vec<String>> {
    let prefix = label_prefix(task);
    prompt.lines().find_map(|line| {
        line.strip_prefix(prefix)
            .map(|rest| rest.split(", ").map(str::to_string).collect())
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no <UIE> section found (scanned {offset} bytes)")]
    MissingUie { offset: usize },
    #[error("<Instruction> at byte {offset} has no preceding <Module>")]
    InstructionWithoutModule { offset: usize },
    #[error("input is not valid UTF-8 at byte {offset}")]
    InvalidUtf8 { offset: usize },
}

impl ParseError {
    pub fn offset(&self) -> usize {
        match self {
            ParseError::MissingUie { offset }
            | ParseError::InstructionWithoutModule { offset }
            | ParseError::InvalidUtf8 { offset } => *offset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseWarning {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedEntity {
    pub surface: String,
    pub label: String,
    pub concept: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedMention {
    pub surface: String,
    pub concept: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedRelation {
    pub subject: ParsedMention,
    pub relation: String,
    pub object: ParsedMention,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedArgument {
    pub role: String,
    pub mention: String,
    pub concept: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedEvent {
    pub trigger: String,
    pub event_type: String,
    pub arguments: Vec<ParsedArgument>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UieRecords {
    Entities(Vec<ParsedEntity>),
    Relations(Vec<ParsedRelation>),
    Events(Vec<ParsedEvent>),
}

impl UieRecords {
    pub fn empty(task: Task) -> Self {
        match task {
            Task::Ner => UieRecords::Entities(Vec::new()),
            Task::Re => UieRecords::Relations(Vec::new()),
            Task::Ee => UieRecords::Events(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            UieRecords::Entities(v) => v.len(),
            UieRecords::Relations(v) => v.len(),
            UieRecords::Events(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCall {
    pub module: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub task: Task,
    pub uie_block: String,
    pub records: UieRecords,
    pub module_calls: Vec<ModuleCall>,
    pub warnings: Vec<ParseWarning>,
}

impl MetaResponse {
    /// Builds a response from already-structured parts; the raw block is the
    /// canonical rendering of the records.
    pub fn from_parts(task: Task, records: UieRecords, module_calls: Vec<ModuleCall>) -> Self {
        let mut meta = MetaResponse {
            task,
            uie_block: String::new(),
            records,
            module_calls,
            warnings: Vec::new(),
        };
        meta.uie_block = render_records(&meta.records);
        meta
    }

    /// Structural equality: same task, records, and module calls.
    pub fn same_structure(&self, other: &MetaResponse) -> bool {
        self.task == other.task
            && self.records == other.records
            && self.module_calls == other.module_calls
    }

    /// The canonical text form. Parsing it yields the same structure.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(UIE_TAG);
        out.push('\n');
        out.push_str(&render_records(&self.records));
        for call in &self.module_calls {
            let _ = writeln!(out, "{MODULE_TAG}\n{}", call.module);
            let _ = writeln!(out, "{INSTRUCTION_TAG}\n{}", call.instruction);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Uie,
    Module,
    Instruction,
    Close,
}

fn next_tag(text: &str, from: usize) -> Option<(usize, Tag, usize)> {
    let hay = &text[from..];
    let candidates = [
        (UIE_TAG, Tag::Uie),
        (MODULE_TAG, Tag::Module),
        (INSTRUCTION_TAG, Tag::Instruction),
        (CLOSE_TAGS[0], Tag::Close),
        (CLOSE_TAGS[1], Tag::Close),
        (CLOSE_TAGS[2], Tag::Close),
    ];
    candidates
        .iter()
        .filter_map(|(pat, tag)| hay.find(pat).map(|p| (from + p, *tag, pat.len())))
        .min_by_key(|(p, _, _)| *p)
}

/// Parses raw bytes, rejecting invalid UTF-8 with the offset of the first
/// bad byte.
pub fn parse_meta_response_bytes(
    bytes: &[u8],
    task: Task,
) -> std::result::Result<MetaResponse, ParseError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ParseError::InvalidUtf8 {
        offset: e.valid_up_to(),
    })?;
    parse_meta_response(text, task)
}

pub fn parse_meta_response(
    text: &str,
    task: Task,
) -> std::result::Result<MetaResponse, ParseError> {
    let mut uie_parts: Vec<(usize, &str)> = Vec::new();
    let mut calls = Vec::new();
    let mut warnings = Vec::new();
    let mut pending_module: Option<(usize, String)> = None;

    let mut cursor = 0usize;
    let mut current: Option<(Tag, usize, usize)> = None; // tag, tag offset, body start
    loop {
        let found = next_tag(text, cursor);
        let body_end = found.map_or(text.len(), |(p, _, _)| p);
        if let Some((tag, tag_at, body_start)) = current {
            let body = &text[body_start..body_end];
            match tag {
                Tag::Uie => uie_parts.push((body_start, body)),
                Tag::Module => {
                    if let Some((at, module)) = pending_module.take() {
                        warnings.push(ParseWarning {
                            offset: at,
                            message: format!("<Module> `{module}` has no <Instruction>"),
                        });
                        calls.push(ModuleCall {
                            module,
                            instruction: String::new(),
                        });
                    }
                    pending_module = Some((tag_at, body.trim().to_string()));
                }
                Tag::Instruction => match pending_module.take() {
                    Some((_, module)) => calls.push(ModuleCall {
                        module,
                        instruction: body.trim().to_string(),
                    }),
                    None => return Err(ParseError::InstructionWithoutModule { offset: tag_at }),
                },
                Tag::Close => {
                    if !body.trim().is_empty() {
                        warnings.push(ParseWarning {
                            offset: body_start,
                            message: "text outside any section ignored".to_string(),
                        });
                    }
                }
            }
        }
        match found {
            Some((p, tag, len)) => {
                current = Some((tag, p, p + len));
                cursor = p + len;
            }
            None => break,
        }
    }
    if let Some((at, module)) = pending_module.take() {
        warnings.push(ParseWarning {
            offset: at,
            message: format!("<Module> `{module}` has no <Instruction>"),
        });
        calls.push(ModuleCall {
            module,
            instruction: String::new(),
        });
    }
    if uie_parts.is_empty() {
        return Err(ParseError::MissingUie { offset: text.len() });
    }

    let mut uie_block = String::new();
    for (i, (_, part)) in uie_parts.iter().enumerate() {
        if i > 0 {
            uie_block.push('\n');
        }
        uie_block.push_str(part);
    }

    let mut records = UieRecords::empty(task);
    for (base, part) in &uie_parts {
        parse_block(part, *base, &mut records, &mut warnings);
    }
    warnings.sort_by_key(|w| w.offset);

    Ok(MetaResponse {
        task,
        uie_block,
        records,
        module_calls: calls,
        warnings,
    })
}

const QUOTE_PAIRS: [(char, char); 6] = [
    ('"', '"'),
    ('\'', '\''),
    ('\u{201C}', '\u{201D}'),
    ('\u{2018}', '\u{2019}'),
    ('\u{00AB}', '\u{00BB}'),
    ('`', '\''),
];

fn closing_quote(open: char) -> Option<char> {
    QUOTE_PAIRS
        .iter()
        .find(|(o, _)| *o == open)
        .map(|(_, c)| *c)
}

/// A field value as read from a tuple, before normalization.
struct Atom {
    text: String,
    concept: bool,
}

/// Cursor over one line of the UIE block.
struct LineScanner<'a> {
    line: &'a str,
    pos: usize,
}

impl<'a> LineScanner<'a> {
    fn new(line: &'a str) -> Self {
        Self { line, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.line[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.bump();
            } else {
                break;
            }
        }
    }

    fn eat_concept(&mut self) -> bool {
        if self.rest().starts_with(CONCEPT_TOKEN) {
            self.pos += CONCEPT_TOKEN.len();
            true
        } else {
            false
        }
    }

    /// Reads one field up to (not including) a stop character at paren depth
    /// zero, or to the end of the line when `stops` is empty.
    fn read_atom(&mut self, stops: &[char]) -> Atom {
        self.skip_ws();
        if let Some(open) = self.peek() {
            if let Some(close) = closing_quote(open) {
                if let Some(atom) = self.try_quoted(open, close, stops) {
                    return atom;
                }
            }
        }
        let start = self.pos;
        let mut depth = 0usize;
        while let Some(c) = self.peek() {
            if depth == 0 && stops.contains(&c) {
                break;
            }
            match c {
                '(' => depth += 1,
                ')' => depth = depth.saturating_sub(1),
                _ => {}
            }
            self.bump();
        }
        let raw = &self.line[start..self.pos];
        let concept = raw.contains(CONCEPT_TOKEN);
        Atom {
            text: raw.replace(CONCEPT_TOKEN, ""),
            concept,
        }
    }

    fn try_quoted(&mut self, open: char, close: char, stops: &[char]) -> Option<Atom> {
        let body_start = self.pos + open.len_utf8();
        let body = &self.line[body_start..];
        for (i, c) in body.char_indices() {
            if c != close {
                continue;
            }
            let after = &body[i + close.len_utf8()..];
            let trimmed = after.trim_start();
            let (concept, tail) = match trimmed.strip_prefix(CONCEPT_TOKEN) {
                Some(t) => (true, t.trim_start()),
                None => (false, trimmed),
            };
            let ends = match tail.chars().next() {
                None => true,
                Some(next) => stops.contains(&next),
            };
            if ends {
                let content = &body[..i];
                self.pos = self.line.len() - tail.len();
                return Some(Atom {
                    text: content.replace(CONCEPT_TOKEN, ""),
                    concept: concept || content.contains(CONCEPT_TOKEN),
                });
            }
        }
        None
    }
}

fn clean_field(atom: &Atom) -> Option<String> {
    let value = normalize_mention(&atom.text);
    if value.is_empty()
        || [UIE_TAG, MODULE_TAG, INSTRUCTION_TAG]
            .iter()
            .any(|t| value.contains(t))
    {
        return None;
    }
    Some(value)
}

enum FieldKind {
    Plain,
    RoleMention,
}

enum Field {
    Plain(Atom),
    RoleMention(Atom, Atom),
}

/// Reads a parenthesized tuple starting at '('. `kind_of(i)` picks the
/// grammar for field i. Returns None on a malformed tuple, leaving the
/// scanner at the end of the line.
fn read_tuple(
    sc: &mut LineScanner<'_>,
    kind_of: impl Fn(usize) -> FieldKind,
) -> Option<Vec<Field>> {
    debug_assert_eq!(sc.peek(), Some('('));
    sc.bump();
    let mut fields = Vec::new();
    loop {
        let field = match kind_of(fields.len()) {
            FieldKind::Plain => Field::Plain(sc.read_atom(&[',', ')'])),
            FieldKind::RoleMention => {
                let role = sc.read_atom(&[':', ',', ')']);
                if sc.peek() == Some(':') {
                    sc.bump();
                    let mention = sc.read_atom(&[',', ')']);
                    Field::RoleMention(role, mention)
                } else {
                    Field::Plain(role)
                }
            }
        };
        fields.push(field);
        match sc.bump() {
            Some(',') => continue,
            Some(')') => break,
            _ => {
                sc.pos = sc.line.len();
                return None;
            }
        }
    }
    // optional trailing comma: "(a, b,)"
    if let Some(Field::Plain(last)) = fields.last() {
        if fields.len() > 1 && normalize_mention(&last.text).is_empty() && !last.concept {
            fields.pop();
        }
    }
    Some(fields)
}

fn is_filler(text: &str) -> bool {
    let t = text.trim();
    t.is_empty()
        || t.chars().all(|c| {
            matches!(
                c,
                '.' | '\u{2026}' | '\u{22EF}' | ',' | ';' | '-' | '*' | '\u{2022}'
            )
        })
        || t == "$\\cdots$"
}

fn parse_block(
    block: &str,
    base: usize,
    records: &mut UieRecords,
    warnings: &mut Vec<ParseWarning>,
) {
    let mut line_start = 0usize;
    let mut current_event: Option<usize> = None;
    for line in block.split('\n') {
        let offset = base + line_start;
        line_start += line.len() + 1;
        match records {
            UieRecords::Entities(out) => parse_ner_line(line, offset, out, warnings),
            UieRecords::Relations(out) => parse_re_line(line, offset, out, warnings),
            UieRecords::Events(out) => {
                parse_ee_line(line, offset, out, &mut current_event, warnings)
            }
        }
    }
}

fn warn(warnings: &mut Vec<ParseWarning>, offset: usize, message: impl Into<String>) {
    warnings.push(ParseWarning {
        offset,
        message: message.into(),
    });
}

/// Skips text up to the next '(' on the line, warning if it is not filler.
fn skip_stray(sc: &mut LineScanner<'_>, offset: usize, warnings: &mut Vec<ParseWarning>) {
    let start = sc.pos;
    while let Some(c) = sc.peek() {
        if c == '(' {
            break;
        }
        sc.bump();
    }
    let stray = &sc.line[start..sc.pos];
    if !is_filler(stray) {
        warn(
            warnings,
            offset + start,
            format!("ignored text `{}`", stray.trim()),
        );
    }
}

fn parse_ner_line(
    line: &str,
    offset: usize,
    out: &mut Vec<ParsedEntity>,
    warnings: &mut Vec<ParseWarning>,
) {
    let mut sc = LineScanner::new(line);
    let mut last_from_line: Option<usize> = None;
    loop {
        sc.skip_ws();
        if sc.peek().is_none() {
            break;
        }
        if sc.eat_concept() {
            match last_from_line {
                Some(i) => out[i].concept = true,
                None => warn(
                    warnings,
                    offset + sc.pos,
                    "<concept> with no preceding tuple",
                ),
            }
            continue;
        }
        if sc.peek() != Some('(') {
            skip_stray(&mut sc, offset, warnings);
            continue;
        }
        let at = offset + sc.pos;
        let Some(fields) = read_tuple(&mut sc, |_| FieldKind::Plain) else {
            warn(warnings, at, "unterminated tuple");
            last_from_line = None;
            continue;
        };
        let atoms: Vec<Atom> = fields
            .into_iter()
            .map(|f| match f {
                Field::Plain(a) => a,
                Field::RoleMention(..) => unreachable!("plain grammar"),
            })
            .collect();
        if atoms.len() < 2 {
            warn(warnings, at, "entity tuple needs (surface, label)");
            last_from_line = None;
            continue;
        }
        let (label_atom, surface_atoms) = atoms.split_last().expect("len >= 2");
        let surface_raw: Vec<&str> = surface_atoms.iter().map(|a| a.text.as_str()).collect();
        let surface_atom = Atom {
            text: surface_raw.join(", "),
            concept: surface_atoms.iter().any(|a| a.concept),
        };
        match (clean_field(&surface_atom), clean_field(label_atom)) {
            (Some(surface), Some(label)) => {
                out.push(ParsedEntity {
                    surface,
                    label,
                    concept: surface_atom.concept || label_atom.concept,
                });
                last_from_line = Some(out.len() - 1);
            }
            _ => {
                warn(warnings, at, "entity tuple has an empty field");
                last_from_line = None;
            }
        }
    }
}

fn parse_re_line(
    line: &str,
    offset: usize,
    out: &mut Vec<ParsedRelation>,
    warnings: &mut Vec<ParseWarning>,
) {
    let mut sc = LineScanner::new(line);
    let mut last_from_line: Option<usize> = None;
    loop {
        sc.skip_ws();
        if sc.peek().is_none() {
            break;
        }
        if sc.eat_concept() {
            match last_from_line {
                Some(i) => {
                    out[i].subject.concept = true;
                    out[i].object.concept = true;
                }
                None => warn(
                    warnings,
                    offset + sc.pos,
                    "<concept> with no preceding tuple",
                ),
            }
            continue;
        }
        if sc.peek() != Some('(') {
            skip_stray(&mut sc, offset, warnings);
            continue;
        }
        let at = offset + sc.pos;
        let Some(fields) = read_tuple(&mut sc, |_| FieldKind::Plain) else {
            warn(warnings, at, "unterminated tuple");
            last_from_line = None;
            continue;
        };
        let atoms: Vec<Atom> = fields
            .into_iter()
            .map(|f| match f {
                Field::Plain(a) => a,
                Field::RoleMention(..) => unreachable!("plain grammar"),
            })
            .collect();
        if atoms.len() != 3 {
            warn(
                warnings,
                at,
                format!("relation tuple needs 3 fields, found {}", atoms.len()),
            );
            last_from_line = None;
            continue;
        }
        match (
            clean_field(&atoms[0]),
            clean_field(&atoms[1]),
            clean_field(&atoms[2]),
        ) {
            (Some(subject), Some(relation), Some(object)) => {
                let both = atoms[1].concept;
                out.push(ParsedRelation {
                    subject: ParsedMention {
                        surface: subject,
                        concept: atoms[0].concept || both,
                    },
                    relation,
                    object: ParsedMention {
                        surface: object,
                        concept: atoms[2].concept || both,
                    },
                });
                last_from_line = Some(out.len() - 1);
            }
            _ => {
                warn(warnings, at, "relation tuple has an empty field");
                last_from_line = None;
            }
        }
    }
}

fn parse_argument(role: &Atom, mention: &Atom) -> Option<ParsedArgument> {
    Some(ParsedArgument {
        role: clean_field(role)?,
        mention: clean_field(mention)?,
        concept: mention.concept || role.concept,
    })
}

fn parse_ee_line(
    line: &str,
    offset: usize,
    out: &mut Vec<ParsedEvent>,
    current: &mut Option<usize>,
    warnings: &mut Vec<ParseWarning>,
) {
    let trimmed = line.trim_start();
    let indent = line.len() - trimmed.len();
    if trimmed.trim().is_empty() {
        return;
    }

    // block header: "[Attack] trigger: fired"
    if trimmed.starts_with('[') {
        let mut sc = LineScanner::new(line);
        sc.pos = indent + 1;
        let event_type = sc.read_atom(&[']']);
        if sc.bump() != Some(']') {
            warn(warnings, offset + indent, "event header is missing `]`");
            *current = None;
            return;
        }
        sc.skip_ws();
        let rest = sc.rest();
        let keyword_len = "trigger".len();
        if rest.len() >= keyword_len && rest[..keyword_len].eq_ignore_ascii_case("trigger") {
            sc.pos += keyword_len;
            sc.skip_ws();
        }
        if sc.peek() == Some(':') {
            sc.bump();
        }
        let trigger = sc.read_atom(&[]);
        match (clean_field(&trigger), clean_field(&event_type)) {
            (Some(trigger), Some(event_type)) => {
                out.push(ParsedEvent {
                    trigger,
                    event_type,
                    arguments: Vec::new(),
                });
                *current = Some(out.len() - 1);
            }
            _ => {
                warn(
                    warnings,
                    offset + indent,
                    "event header needs a type and a trigger",
                );
                *current = None;
            }
        }
        return;
    }

    // argument line: "- Attacker: soldiers"
    if let Some(marker) = trimmed
        .chars()
        .next()
        .filter(|c| matches!(c, '-' | '*' | '\u{2022}'))
    {
        if trimmed[marker.len_utf8()..]
            .trim()
            .chars()
            .all(|c| c == '-')
        {
            // a rule like "---" is filler
            return;
        }
        let mut sc = LineScanner::new(line);
        sc.pos = indent + marker.len_utf8();
        let role = sc.read_atom(&[':']);
        if sc.bump() != Some(':') {
            warn(
                warnings,
                offset + indent,
                "argument line needs `role: mention`",
            );
            return;
        }
        let mention = sc.read_atom(&[]);
        match (parse_argument(&role, &mention), *current) {
            (Some(arg), Some(ev)) => out[ev].arguments.push(arg),
            (Some(_), None) => warn(
                warnings,
                offset + indent,
                "argument line outside an event block",
            ),
            (None, _) => warn(
                warnings,
                offset + indent,
                "argument line has an empty field",
            ),
        }
        return;
    }

    // flat tuples: "(fired, Attack, Attacker: soldiers, Target: crowd)"
    *current = None;
    let mut sc = LineScanner::new(line);
    loop {
        sc.skip_ws();
        if sc.peek().is_none() {
            break;
        }
        if sc.eat_concept() {
            warn(warnings, offset + sc.pos, "<concept> outside an argument");
            continue;
        }
        if sc.peek() != Some('(') {
            skip_stray(&mut sc, offset, warnings);
            continue;
        }
        let at = offset + sc.pos;
        let kind = |i: usize| {
            if i < 2 {
                FieldKind::Plain
            } else {
                FieldKind::RoleMention
            }
        };
        let Some(fields) = read_tuple(&mut sc, kind) else {
            warn(warnings, at, "unterminated tuple");
            continue;
        };
        if fields.len() < 2 {
            warn(warnings, at, "event tuple needs (trigger, type, ...)");
            continue;
        }
        let mut iter = fields.into_iter();
        let (Some(Field::Plain(trigger)), Some(Field::Plain(event_type))) =
            (iter.next(), iter.next())
        else {
            unreachable!("first two fields are plain");
        };
        let (Some(trigger), Some(event_type)) = (clean_field(&trigger), clean_field(&event_type))
        else {
            warn(warnings, at, "event tuple has an empty trigger or type");
            continue;
        };
        let mut arguments = Vec::new();
        let mut ok = true;
        for field in iter {
            match field {
                Field::RoleMention(role, mention) => match parse_argument(&role, &mention) {
                    Some(arg) => arguments.push(arg),
                    None => ok = false,
                },
                Field::Plain(_) => ok = false,
            }
        }
        if !ok {
            warn(
                warnings,
                at,
                "event tuple has a malformed `role: mention` field",
            );
            continue;
        }
        out.push(ParsedEvent {
            trigger,
            event_type,
            arguments,
        });
    }
}

/// Renders a field so that [`LineScanner::read_atom`] reads it back verbatim.
fn render_field(value: &str, extra_stop: Option<char>) -> String {
    let starts_with_quote = value
        .chars()
        .next()
        .is_some_and(|c| closing_quote(c).is_some());
    let needs_quote = starts_with_quote
        || value
            .chars()
            .any(|c| matches!(c, ',' | '(' | ')' | '[' | ']' | '\n') || Some(c) == extra_stop)
        || value.starts_with(['-', '*', '\u{2022}']);
    if !needs_quote {
        return value.to_string();
    }
    let (open, close) = QUOTE_PAIRS
        .iter()
        .take(5)
        .find(|(_, close)| !value.contains(*close))
        .copied()
        .unwrap_or(('"', '"'));
    format!("{open}{value}{close}")
}

fn concept_suffix(flag: bool) -> &'static str {
    if flag {
        CONCEPT_TOKEN
    } else {
        ""
    }
}

fn render_records(records: &UieRecords) -> String {
    let mut out = String::new();
    match records {
        UieRecords::Entities(items) => {
            for e in items {
                let _ = writeln!(
                    out,
                    "({}{}, {})",
                    render_field(&e.surface, None),
                    concept_suffix(e.concept),
                    render_field(&e.label, None)
                );
            }
        }
        UieRecords::Relations(items) => {
            for r in items {
                let _ = writeln!(
                    out,
                    "({}{}, {}, {}{})",
                    render_field(&r.subject.surface, None),
                    concept_suffix(r.subject.concept),
                    render_field(&r.relation, None),
                    render_field(&r.object.surface, None),
                    concept_suffix(r.object.concept)
                );
            }
        }
        UieRecords::Events(items) => {
            for ev in items {
                let _ = write!(
                    out,
                    "({}, {}",
                    render_field(&ev.trigger, None),
                    render_field(&ev.event_type, None)
                );
                for a in &ev.arguments {
                    let _ = write!(
                        out,
                        ", {}: {}{}",
                        render_field(&a.role, Some(':')),
                        render_field(&a.mention, None),
                        concept_suffix(a.concept)
                    );
                }
                out.push_str(")\n");
            }
        }
    }
    out
}

/// Quoted spans in an instruction, e.g. `Segmentation: 'A person'`.
pub fn quoted_spans(instruction: &str) -> Vec<String> {
    let mut spans = Vec::new();
    let mut rest = instruction;
    while let Some((start, open)) = rest
        .char_indices()
        .find(|(_, c)| closing_quote(*c).is_some())
    {
        let close = closing_quote(open).expect("filtered");
        let body = &rest[start + open.len_utf8()..];
        match body.find(close) {
            Some(end) => {
                let span = normalize_mention(&body[..end]);
                if !span.is_empty() {
                    spans.push(span);
                }
                rest = &body[end + close.len_utf8()..];
            }
            None => rest = body,
        }
    }
    spans
}

/// One grounding payload returned for a module call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub call_index: usize,
    pub payload: GroundingRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Entity(usize),
    Subject(usize),
    Object(usize),
    Argument(usize, usize),
}

fn slot_groundings(pred: &mut PredictionSet, slot: Slot) -> &mut MentionGroundings {
    match slot {
        Slot::Entity(i) => &mut pred.entities[i].groundings,
        Slot::Subject(i) => &mut pred.relations[i].subject.groundings,
        Slot::Object(i) => &mut pred.relations[i].object.groundings,
        Slot::Argument(e, a) => &mut pred.events[e].arguments[a].groundings,
    }
}

/// Turns parsed records into a prediction set and attaches grounding
/// results to mentions.
///
/// A result goes to the first mention whose surface is quoted in its call's
/// instruction; failing that, unclaimed results go in order to
/// `<concept>`-flagged mentions whose slot for that modality is still free.
/// Anything left over is kept at instance level.
pub fn link_groundings(
    instance_id: &str,
    meta: &MetaResponse,
    results: &[GroundingResult],
) -> Result<PredictionSet> {
    if let Some(bad) = results
        .iter()
        .find(|r| r.call_index >= meta.module_calls.len())
    {
        return Err(Error::invalid(format!(
            "grounding result refers to call {} but only {} calls exist",
            bad.call_index,
            meta.module_calls.len()
        )));
    }

    let mut pred = Annotation::empty(instance_id, meta.task);
    let mut slots: Vec<(Slot, String, bool)> = Vec::new();
    match &meta.records {
        UieRecords::Entities(items) => {
            for (i, e) in items.iter().enumerate() {
                pred.entities
                    .push(EntityMention::new(e.surface.clone(), e.label.clone())?);
                slots.push((Slot::Entity(i), e.surface.clone(), e.concept));
            }
        }
        UieRecords::Relations(items) => {
            for (i, r) in items.iter().enumerate() {
                pred.relations.push(RelationTriple {
                    subject: EntityMention::new(r.subject.surface.clone(), "")?,
                    relation: r.relation.clone(),
                    object: EntityMention::new(r.object.surface.clone(), "")?,
                });
                slots.push((
                    Slot::Subject(i),
                    r.subject.surface.clone(),
                    r.subject.concept,
                ));
                slots.push((Slot::Object(i), r.object.surface.clone(), r.object.concept));
            }
        }
        UieRecords::Events(items) => {
            for (e, ev) in items.iter().enumerate() {
                let mut args = Vec::with_capacity(ev.arguments.len());
                for (a, arg) in ev.arguments.iter().enumerate() {
                    args.push(EventArgument::new(arg.mention.clone(), arg.role.clone())?);
                    slots.push((Slot::Argument(e, a), arg.mention.clone(), arg.concept));
                }
                pred.events.push(EventRecord::new(
                    ev.trigger.clone(),
                    ev.event_type.clone(),
                    args,
                )?);
            }
        }
    }

    let mut claimed = vec![false; results.len()];
    for (ri, result) in results.iter().enumerate() {
        let modality = result.payload.modality();
        let quoted = quoted_spans(&meta.module_calls[result.call_index].instruction);
        'quotes: for q in &quoted {
            for (slot, surface, _) in &slots {
                if surface == q && !slot_groundings(&mut pred, *slot).has(modality) {
                    let _ = slot_groundings(&mut pred, *slot).attach(result.payload.clone());
                    claimed[ri] = true;
                    break 'quotes;
                }
            }
        }
    }

    for (ri, result) in results.iter().enumerate() {
        if claimed[ri] {
            continue;
        }
        let modality = result.payload.modality();
        let target = slots
            .iter()
            .filter(|(_, _, concept)| *concept)
            .map(|(slot, _, _)| *slot)
            .find(|slot| !slot_groundings(&mut pred, *slot).has(modality));
        match target {
            Some(slot) => {
                let _ = slot_groundings(&mut pred, slot).attach(result.payload.clone());
            }
            None => pred.instance_groundings.push(result.payload.clone()),
        }
    }
    Ok(pred)
}

/// Which backend kind a module name routes to by default.
pub fn default_module_route(module: &str) -> Option<GroundingModality> {
    match module {
        "Image Segmenter" => Some(GroundingModality::Image),
        "Video Tracker" => Some(GroundingModality::Video),
        "Audio Segmenter" => Some(GroundingModality::Audio),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AudioSegment, ImageMask};

    pub(crate) const BOX: &str = "<UIE>\n(Trump, person)\n(Merkel, person)\n\u{22EF}\n<Module>\nImage Segmenter\n<Instruction>\nSegmentation: 'A person'\n";

    fn spec(task: Task, labels: &[&str], mods: &[Modality]) -> PromptSpec {
        PromptSpec {
            task,
            label_schema: labels.iter().map(|s| s.to_string()).collect(),
            argument_roles: Vec::new(),
            modalities_present: mods.iter().copied().collect(),
        }
    }

    #[test]
    fn ner_prompt_with_image_mentions_concept() {
        let p = build_prompt(&spec(
            Task::Ner,
            &["person", "location"],
            &[Modality::Text, Modality::Image],
        ))
        .unwrap();
        assert!(p.contains("Please recognize all entity words"));
        assert!(p.contains("generate a token \"<concept>\""));
        assert!(p.contains("Candidate category labels: person, location"));
        assert!(p.ends_with("Input Text/Image:"));
    }

    #[test]
    fn re_prompt_text_only_omits_concept() {
        let p = build_prompt(&spec(Task::Re, &["peer"], &[Modality::Text])).unwrap();
        assert!(p.contains("Please extract all relations between named entities"));
        assert!(!p.contains("<concept>"));
    }

    #[test]
    fn ee_prompt_lists_roles() {
        let mut s = spec(Task::Ee, &["Attack", "Meet"], &[Modality::Video]);
        s.argument_roles = vec!["Agent".into(), "Target".into()];
        let p = build_prompt(&s).unwrap();
        assert!(p.contains("Extract all the possible events in the video"));
        assert!(p.contains("Candidate event types: Attack, Meet"));
        assert!(p.contains("Candidate event argument types: Agent, Target"));
        assert!(p.contains("<concept>"));
    }

    #[test]
    fn prompt_rejects_empty_schema() {
        assert!(matches!(
            build_prompt(&spec(Task::Ner, &[], &[Modality::Text])),
            Err(Error::InvalidArgument(_))
        ));
        assert!(build_prompt(&spec(Task::Ner, &["a"], &[])).is_err());
        assert!(build_prompt(&spec(Task::Ner, &["a, b"], &[Modality::Text])).is_err());
    }

    #[test]
    fn label_line_round_trips() {
        for task in Task::ALL {
            let labels = ["person", "part_of", "Start-position"];
            let p = build_prompt(&spec(task, &labels, &[Modality::Audio])).unwrap();
            assert_eq!(parse_label_line(&p, task).unwrap(), labels);
        }
    }

    #[test]
    fn parses_the_box() {
        let meta = parse_meta_response(BOX, Task::Ner).unwrap();
        let UieRecords::Entities(ents) = &meta.records else {
            panic!()
        };
        assert_eq!(ents.len(), 2);
        assert_eq!(ents[0].surface, "Trump");
        assert_eq!(ents[1].label, "person");
        assert!(!ents[0].concept);
        assert_eq!(
            meta.module_calls,
            vec![ModuleCall {
                module: "Image Segmenter".into(),
                instruction: "Segmentation: 'A person'".into()
            }]
        );
        assert!(meta.warnings.is_empty(), "{:?}", meta.warnings);
    }

    #[test]
    fn no_module_case() {
        let meta = parse_meta_response("<UIE>\n(Paris, location)\n", Task::Ner).unwrap();
        assert_eq!(meta.records.len(), 1);
        assert!(meta.module_calls.is_empty());
    }

    #[test]
    fn missing_uie_is_an_error() {
        let err = parse_meta_response("no structured content", Task::Ner).unwrap_err();
        assert_eq!(err, ParseError::MissingUie { offset: 21 });
    }

    #[test]
    fn instruction_without_module_is_an_error() {
        let text = "<UIE>\n(a, b)\n<Instruction>\nx";
        let err = parse_meta_response(text, Task::Ner).unwrap_err();
        assert_eq!(err, ParseError::InstructionWithoutModule { offset: 13 });
    }

    #[test]
    fn tolerant_tuple_grammar() {
        let text = "<UIE>\n\n(\u{201C}Washington, D.C.\u{201D}, location,)\n('Trump' <concept>, person)(Merkel, person) <concept>\n(broken, tuple\n(, person)\n";
        let meta = parse_meta_response(text, Task::Ner).unwrap();
        let UieRecords::Entities(ents) = &meta.records else {
            panic!()
        };
        let got: Vec<_> = ents
            .iter()
            .map(|e| (e.surface.as_str(), e.label.as_str(), e.concept))
            .collect();
        assert_eq!(
            got,
            vec![
                ("Washington, D.C.", "location", false),
                ("Trump", "person", true),
                ("Merkel", "person", true),
            ]
        );
        assert_eq!(meta.warnings.len(), 2, "{:?}", meta.warnings);
    }

    #[test]
    fn unquoted_commas_join_into_the_surface() {
        let meta = parse_meta_response("<UIE>(Washington, D.C., location)", Task::Ner).unwrap();
        let UieRecords::Entities(ents) = &meta.records else {
            panic!()
        };
        assert_eq!(ents[0].surface, "Washington, D.C.");
    }

    #[test]
    fn relation_tuples() {
        let text = "<UIE>\n(Trump<concept>, peer, Merkel)\n(a, b)\n";
        let meta = parse_meta_response(text, Task::Re).unwrap();
        let UieRecords::Relations(rels) = &meta.records else {
            panic!()
        };
        assert_eq!(rels.len(), 1);
        assert!(rels[0].subject.concept);
        assert!(!rels[0].object.concept);
        assert_eq!(meta.warnings.len(), 1);
    }

    #[test]
    fn event_block_and_flat_forms() {
        let text = "<UIE>\n[Attack] trigger: fired\n- Attacker: soldiers\n- Target: crowd <concept>\n(met, Meet, Entity: leaders, Place: \"Paris, France\")\n- Time: stray\n";
        let meta = parse_meta_response(text, Task::Ee).unwrap();
        let UieRecords::Events(evs) = &meta.records else {
            panic!()
        };
        assert_eq!(evs.len(), 2);
        assert_eq!(evs[0].event_type, "Attack");
        assert_eq!(evs[0].trigger, "fired");
        assert_eq!(evs[0].arguments.len(), 2);
        assert!(evs[0].arguments[1].concept);
        assert_eq!(evs[1].arguments[1].mention, "Paris, France");
        assert_eq!(meta.warnings.len(), 1, "{:?}", meta.warnings);
    }

    #[test]
    fn canonical_render_is_a_fixed_point() {
        for (text, task) in [
            (BOX, Task::Ner),
            ("<UIE>\n(\"a, b\"<concept>, x)(c (d), y)\n<Module>\nM\n<Instruction>\nline one\nline two\n", Task::Ner),
            ("<UIE>\n(s, r, 'o, p')\n", Task::Re),
            ("<UIE>\n[Attack] trigger: fired\n- Attacker: soldiers <concept>\n- \"Odd: role\": x\n", Task::Ee),
        ] {
            let first = parse_meta_response(text, task).unwrap();
            let rendered = first.render();
            let second = parse_meta_response(&rendered, task).unwrap();
            assert!(first.same_structure(&second), "{rendered}");
            assert_eq!(second.render(), rendered);
            assert!(second.warnings.is_empty(), "{:?}", second.warnings);
        }
    }

    #[test]
    fn quoted_span_extraction() {
        assert_eq!(quoted_spans("Segmentation: 'A person'"), vec!["A person"]);
        assert_eq!(quoted_spans("Segmentation: `A person'"), vec!["A person"]);
        assert_eq!(
            quoted_spans("track \u{201C}Merkel\u{201D} and \"Trump\""),
            vec!["Merkel", "Trump"]
        );
        assert!(quoted_spans("nothing quoted").is_empty());
    }

    fn mask(fg: u32) -> GroundingRef {
        GroundingRef::Image(ImageMask::new(2, 2, vec![4 - fg, fg]).unwrap())
    }

    #[test]
    fn link_positional() {
        let text = "<UIE>\n(Trump<concept>, person)\n(Merkel<concept>, person)\n<Module>\nImage Segmenter\n<Instruction>\nSegmentation: 'A person'\n<Module>\nImage Segmenter\n<Instruction>\nSegmentation: 'someone'\n";
        let meta = parse_meta_response(text, Task::Ner).unwrap();
        let results = [
            GroundingResult {
                call_index: 0,
                payload: mask(1),
            },
            GroundingResult {
                call_index: 1,
                payload: mask(2),
            },
        ];
        let pred = link_groundings("x", &meta, &results).unwrap();
        assert_eq!(
            pred.entities[0]
                .groundings
                .image
                .as_ref()
                .unwrap()
                .foreground(),
            1
        );
        assert_eq!(
            pred.entities[1]
                .groundings
                .image
                .as_ref()
                .unwrap()
                .foreground(),
            2
        );
        assert!(pred.instance_groundings.is_empty());
    }

    #[test]
    fn link_by_quoted_name() {
        let text = "<UIE>\n(Trump<concept>, person)\n(Merkel<concept>, person)\n<Module>\nImage Segmenter\n<Instruction>\nSegmentation: 'Merkel'\n";
        let meta = parse_meta_response(text, Task::Ner).unwrap();
        let results = [GroundingResult {
            call_index: 0,
            payload: mask(3),
        }];
        let pred = link_groundings("x", &meta, &results).unwrap();
        assert!(pred.entities[0].groundings.is_empty());
        assert_eq!(
            pred.entities[1]
                .groundings
                .image
                .as_ref()
                .unwrap()
                .foreground(),
            3
        );
    }

    #[test]
    fn link_unmatched_stays_instance_level() {
        let meta = parse_meta_response(BOX, Task::Ner).unwrap();
        let results = [GroundingResult {
            call_index: 0,
            payload: mask(1),
        }];
        let pred = link_groundings("x", &meta, &results).unwrap();
        assert_eq!(pred.entities.len(), 2);
        assert_eq!(pred.instance_groundings.len(), 1);
        assert_eq!(pred.image_masks().len(), 1);
    }

    #[test]
    fn link_empty_results_and_bad_index() {
        let meta = parse_meta_response(BOX, Task::Ner).unwrap();
        let pred = link_groundings("x", &meta, &[]).unwrap();
        assert!(pred.all_groundings().is_empty());
        assert_eq!(pred.entities.len(), 2);
        let bad = [GroundingResult {
            call_index: 1,
            payload: mask(1),
        }];
        assert!(matches!(
            link_groundings("x", &meta, &bad),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn link_keeps_one_grounding_per_modality() {
        let text = "<UIE>\n(Trump<concept>, person)\n<Module>\nAudio Segmenter\n<Instruction>\ncut 'Trump'\n<Module>\nAudio Segmenter\n<Instruction>\ncut 'Trump'\n";
        let meta = parse_meta_response(text, Task::Ner).unwrap();
        let seg = |a, b| GroundingRef::Audio(AudioSegment::new(a, b).unwrap());
        let results = [
            GroundingResult {
                call_index: 0,
                payload: seg(0.0, 1.0),
            },
            GroundingResult {
                call_index: 1,
                payload: seg(2.0, 3.0),
            },
            GroundingResult {
                call_index: 1,
                payload: mask(1),
            },
        ];
        let pred = link_groundings("x", &meta, &results).unwrap();
        assert_eq!(pred.entities[0].groundings.audio.unwrap().start(), 0.0);
        assert!(pred.entities[0].groundings.image.is_some());
        assert_eq!(pred.instance_groundings.len(), 1);
    }
}
