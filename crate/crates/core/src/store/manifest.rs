//! The manifest dialect: a closed, YAML-like text format.
//!
//! * UTF-8, two-space indentation, no tabs anywhere.
//! * Maps (`key: value`), lists (`- item`) and scalars (strings, integers,
//!   booleans). Empty collections are written `{}` and `[]`.
//! * `#` starts a comment. A trailing `# set: <param>` on a scalar line
//!   marks that scalar as a setter target.
//! * No anchors, tags, block scalars, flow collections or `---` streams.
//!
//! Serialization is canonical, so `parse(serialize(doc)) == doc`.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ManifestError {
    #[error("line {line}, column {column}: {message}")]
    Dialect { line: usize, column: usize, message: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
}

fn dialect<T>(line: usize, column: usize, message: impl Into<String>) -> Result<T, ManifestError> {
    Err(ManifestError::Dialect { line, column, message: message.into() })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ScalarValue {
    Str(String),
    Int(i64),
    Bool(bool),
}

impl ScalarValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            ScalarValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            ScalarValue::Int(n) => Some(*n),
            _ => None,
        }
    }

    /// String form regardless of type.
    pub fn render(&self) -> String {
        match self {
            ScalarValue::Str(s) => s.clone(),
            ScalarValue::Int(n) => n.to_string(),
            ScalarValue::Bool(b) => b.to_string(),
        }
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            ScalarValue::Str(s) => json!(s),
            ScalarValue::Int(n) => json!(n),
            ScalarValue::Bool(b) => json!(b),
        }
    }
}

impl From<&str> for ScalarValue {
    fn from(s: &str) -> Self {
        ScalarValue::Str(s.to_string())
    }
}

impl From<String> for ScalarValue {
    fn from(s: String) -> Self {
        ScalarValue::Str(s)
    }
}

impl From<i64> for ScalarValue {
    fn from(n: i64) -> Self {
        ScalarValue::Int(n)
    }
}

impl From<bool> for ScalarValue {
    fn from(b: bool) -> Self {
        ScalarValue::Bool(b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scalar {
    pub value: ScalarValue,
    pub setter: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Map(Vec<(String, Value)>),
    List(Vec<Value>),
    Scalar(Scalar),
}

impl Value {
    pub fn scalar(value: impl Into<ScalarValue>) -> Value {
        Value::Scalar(Scalar { value: value.into(), setter: None })
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        match self {
            Value::Map(entries) => entries.iter().find(|(k, _)| k == key).map(|(_, v)| v),
            _ => None,
        }
    }

    pub fn as_scalar(&self) -> Option<&ScalarValue> {
        match self {
            Value::Scalar(s) => Some(&s.value),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(items) => Some(items),
            _ => None,
        }
    }

    fn to_canonical_json(&self) -> serde_json::Value {
        match self {
            Value::Map(entries) => {
                let pairs: Vec<serde_json::Value> =
                    entries.iter().map(|(k, v)| json!([k, v.to_canonical_json()])).collect();
                json!({ "m": pairs })
            }
            Value::List(items) => json!({ "l": items.iter().map(Value::to_canonical_json).collect::<Vec<_>>() }),
            Value::Scalar(s) => json!({ "s": s.value.to_json(), "a": s.setter }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PathSegment {
    Key(String),
    Index(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FieldPath(pub Vec<PathSegment>);

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, seg) in self.0.iter().enumerate() {
            match seg {
                PathSegment::Key(k) if i == 0 => f.write_str(k)?,
                PathSegment::Key(k) => write!(f, ".{k}")?,
                PathSegment::Index(n) => write!(f, "[{n}]")?,
            }
        }
        Ok(())
    }
}

impl FromStr for FieldPath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut segments = Vec::new();
        for part in s.split('.') {
            let (key, mut rest) = match part.find('[') {
                Some(i) => (&part[..i], &part[i..]),
                None => (part, ""),
            };
            if key.is_empty() {
                return Err(format!("empty key in path {s:?}"));
            }
            segments.push(PathSegment::Key(key.to_string()));
            while let Some(inner) = rest.strip_prefix('[') {
                let end = inner.find(']').ok_or_else(|| format!("unclosed index in {s:?}"))?;
                let n = inner[..end].parse().map_err(|_| format!("bad index in {s:?}"))?;
                segments.push(PathSegment::Index(n));
                rest = &inner[end + 1..];
            }
            if !rest.is_empty() {
                return Err(format!("trailing characters in path {s:?}"));
            }
        }
        Ok(FieldPath(segments))
    }
}

impl serde::Serialize for FieldPath {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for FieldPath {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A parsed manifest. The root is always a map.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManifestDocument {
    pub root: Vec<(String, Value)>,
}

impl ManifestDocument {
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.root.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn kind(&self) -> Option<&str> {
        self.get("kind").and_then(Value::as_scalar).and_then(ScalarValue::as_str)
    }

    pub fn lookup(&self, path: &FieldPath) -> Option<&Value> {
        let mut segments = path.0.iter();
        let first = match segments.next()? {
            PathSegment::Key(k) => self.get(k)?,
            PathSegment::Index(_) => return None,
        };
        segments.try_fold(first, |node, seg| match (node, seg) {
            (Value::Map(_), PathSegment::Key(k)) => node.get(k),
            (Value::List(items), PathSegment::Index(i)) => items.get(*i),
            _ => None,
        })
    }

    pub fn lookup_mut(&mut self, path: &FieldPath) -> Option<&mut Value> {
        let mut segments = path.0.iter();
        let mut node = match segments.next()? {
            PathSegment::Key(k) => self.root.iter_mut().find(|(key, _)| key == k).map(|(_, v)| v)?,
            PathSegment::Index(_) => return None,
        };
        for seg in segments {
            node = match (node, seg) {
                (Value::Map(entries), PathSegment::Key(k)) => {
                    entries.iter_mut().find(|(key, _)| key == k).map(|(_, v)| v)?
                }
                (Value::List(items), PathSegment::Index(i)) => items.get_mut(*i)?,
                _ => return None,
            };
        }
        Some(node)
    }

    /// Every scalar with its path, in document order.
    pub fn scalars(&self) -> Vec<(FieldPath, &Scalar)> {
        fn walk<'a>(node: &'a Value, path: &mut Vec<PathSegment>, out: &mut Vec<(FieldPath, &'a Scalar)>) {
            match node {
                Value::Map(entries) => {
                    for (k, v) in entries {
                        path.push(PathSegment::Key(k.clone()));
                        walk(v, path, out);
                        path.pop();
                    }
                }
                Value::List(items) => {
                    for (i, v) in items.iter().enumerate() {
                        path.push(PathSegment::Index(i));
                        walk(v, path, out);
                        path.pop();
                    }
                }
                Value::Scalar(s) => out.push((FieldPath(path.clone()), s)),
            }
        }
        let mut out = Vec::new();
        let mut path = Vec::new();
        for (k, v) in &self.root {
            path.push(PathSegment::Key(k.clone()));
            walk(v, &mut path, &mut out);
            path.pop();
        }
        out
    }

    /// `(parameter, path)` for every annotated scalar, in document order.
    pub fn setters(&self) -> Vec<(String, FieldPath)> {
        self.scalars()
            .into_iter()
            .filter_map(|(path, s)| s.setter.clone().map(|p| (p, path)))
            .collect()
    }

    pub fn canonical_json(&self) -> serde_json::Value {
        Value::Map(self.root.clone()).to_canonical_json()
    }
}

pub fn is_valid_key(key: &str) -> bool {
    !key.is_empty()
        && !key.starts_with('-')
        && key.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '/'))
}

pub fn is_valid_param(param: &str) -> bool {
    crate::intent::is_identifier(param)
}

struct Line<'a> {
    no: usize,
    indent: usize,
    content: &'a str,
}

impl Line<'_> {
    fn is_list_item(&self) -> bool {
        self.content == "-" || self.content.starts_with("- ")
    }
}

pub fn parse_manifest(text: &str) -> Result<ManifestDocument, ManifestError> {
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        if let Some(col) = raw.find('\t') {
            return dialect(no, col + 1, "tab characters are not allowed");
        }
        let trimmed = raw.trim_start_matches(' ');
        let trimmed_end = trimmed.trim_end_matches(' ');
        if trimmed_end.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let indent = raw.len() - trimmed.len();
        if trimmed_end == "---" || trimmed_end == "..." {
            return dialect(no, indent + 1, "multi-document streams are not supported");
        }
        if indent % 2 != 0 {
            return dialect(no, 1, "indentation must be a multiple of two spaces");
        }
        lines.push(Line { no, indent, content: trimmed_end });
    }
    if lines.is_empty() {
        return Ok(ManifestDocument::default());
    }
    if lines[0].indent != 0 {
        return dialect(lines[0].no, 1, "document must start at column 1");
    }
    if lines[0].is_list_item() {
        return dialect(lines[0].no, 1, "document root must be a map");
    }
    let mut parser = Parser { lines, pos: 0 };
    let root = parser.parse_map(0)?;
    if let Some(line) = parser.lines.get(parser.pos) {
        return dialect(line.no, line.indent + 1, "unexpected indentation");
    }
    Ok(ManifestDocument { root })
}

struct Parser<'a> {
    lines: Vec<Line<'a>>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Line<'a>> {
        self.lines.get(self.pos)
    }

    fn parse_block(&mut self, indent: usize, parent_line: usize) -> Result<Value, ManifestError> {
        match self.peek() {
            Some(line) if line.indent == indent => {
                if line.is_list_item() {
                    Ok(Value::List(self.parse_list(indent)?))
                } else {
                    Ok(Value::Map(self.parse_map(indent)?))
                }
            }
            Some(line) if line.indent > indent => {
                dialect(line.no, line.indent + 1, format!("expected indentation of {indent} spaces"))
            }
            _ => dialect(parent_line, 1, "missing value (write {} or [] for empty collections)"),
        }
    }

    fn parse_map(&mut self, indent: usize) -> Result<Vec<(String, Value)>, ManifestError> {
        let mut entries: Vec<(String, Value)> = Vec::new();
        while let Some(line) = self.peek() {
            if line.indent < indent {
                break;
            }
            if line.indent > indent {
                return dialect(line.no, line.indent + 1, "unexpected indentation");
            }
            if line.is_list_item() {
                return dialect(line.no, indent + 1, "list item where a map entry was expected");
            }
            let (no, content) = (line.no, line.content);
            let (key, rest) = split_key(content)
                .ok_or_else(|| ManifestError::Dialect { line: no, column: indent + 1, message: "expected `key: value`".into() })?;
            if !is_valid_key(key) {
                return dialect(no, indent + 1, format!("invalid key {key:?}"));
            }
            if entries.iter().any(|(k, _)| k == key) {
                return Err(ManifestError::DuplicateKey { line: no, key: key.to_string() });
            }
            self.pos += 1;
            let value_col = indent + key.len() + 3;
            let value = match strip_comment_only(rest) {
                Some(comment) => {
                    if parse_annotation(comment).is_some() {
                        return dialect(no, value_col, "setter annotation on a collection");
                    }
                    self.parse_block(indent + 2, no)?
                }
                None => parse_inline(rest, no, value_col)?,
            };
            entries.push((key.to_string(), value));
        }
        Ok(entries)
    }

    fn parse_list(&mut self, indent: usize) -> Result<Vec<Value>, ManifestError> {
        let mut items = Vec::new();
        while let Some(line) = self.peek() {
            if line.indent < indent {
                break;
            }
            if line.indent > indent {
                return dialect(line.no, line.indent + 1, "unexpected indentation");
            }
            if !line.is_list_item() {
                return dialect(line.no, indent + 1, "map entry where a list item was expected");
            }
            let no = line.no;
            let rest = line.content[1..].trim_start_matches(' ');
            if let Some(comment) = strip_comment_only(rest) {
                if parse_annotation(comment).is_some() {
                    return dialect(no, indent + 3, "setter annotation on a collection");
                }
                self.pos += 1;
                items.push(self.parse_block(indent + 2, no)?);
            } else if rest.starts_with('"') || split_key(rest).is_none() {
                self.pos += 1;
                items.push(parse_inline(rest, no, indent + 3)?);
            } else {
                // `- key: value` opens a map whose first entry shares the dash line.
                self.lines[self.pos] = Line { no, indent: indent + 2, content: rest };
                items.push(Value::Map(self.parse_map(indent + 2)?));
            }
        }
        Ok(items)
    }
}

/// Splits `key: rest` / `key:`; `None` when the line has no key.
fn split_key(content: &str) -> Option<(&str, &str)> {
    if content.starts_with('"') {
        return None;
    }
    let bytes = content.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'#' if i > 0 && bytes[i - 1] == b' ' => return None,
            b':' if i + 1 == bytes.len() => return Some((&content[..i], "")),
            b':' if bytes[i + 1] == b' ' => return Some((&content[..i], &content[i + 2..])),
            _ => {}
        }
    }
    None
}

/// `Some(comment)` when `rest` holds nothing but an optional comment.
fn strip_comment_only(rest: &str) -> Option<&str> {
    let rest = rest.trim_start_matches(' ');
    if rest.is_empty() {
        Some("")
    } else {
        rest.strip_prefix('#')
    }
}

fn parse_annotation(comment: &str) -> Option<&str> {
    comment.trim().strip_prefix("set:").map(str::trim)
}

fn parse_inline(text: &str, line: usize, column: usize) -> Result<Value, ManifestError> {
    let text = text.trim_start_matches(' ');
    let (body, comment) = if let Some(quoted) = text.strip_prefix('"') {
        let (value, consumed) = parse_quoted(quoted, line, column)?;
        let tail = &quoted[consumed..];
        let tail_trimmed = tail.trim_start_matches(' ');
        let comment = if tail_trimmed.is_empty() {
            None
        } else if tail_trimmed.starts_with('#') && tail.len() != tail_trimmed.len() {
            Some(&tail_trimmed[1..])
        } else {
            return dialect(line, column + consumed + 1, "unexpected text after quoted string");
        };
        (ScalarValue::Str(value), comment)
    } else {
        let (raw, comment) = match text.find(" #") {
            Some(i) => (text[..i].trim_end_matches(' '), Some(&text[i + 2..])),
            None => (text, None),
        };
        if raw == "{}" || raw == "[]" {
            if comment.and_then(parse_annotation).is_some() {
                return dialect(line, column, "setter annotation on a collection");
            }
            return Ok(if raw == "{}" { Value::Map(Vec::new()) } else { Value::List(Vec::new()) });
        }
        (parse_bare(raw, line, column)?, comment)
    };
    let setter = match comment.and_then(parse_annotation) {
        Some(param) if is_valid_param(param) => Some(param.to_string()),
        Some(param) => return dialect(line, column, format!("invalid setter parameter {param:?}")),
        None => None,
    };
    Ok(Value::Scalar(Scalar { value: body, setter }))
}

fn parse_bare(raw: &str, line: usize, column: usize) -> Result<ScalarValue, ManifestError> {
    if raw.is_empty() {
        return dialect(line, column, "empty value");
    }
    if let Some(c) = raw.chars().next().filter(|c| "&*!|>'%@`{[]}\",".contains(*c)) {
        return dialect(line, column, format!("unsupported construct starting with {c:?}"));
    }
    if raw == "-" || raw.starts_with("- ") {
        return dialect(line, column, "nested list item on a value line");
    }
    if raw.contains(": ") || raw.ends_with(':') {
        return dialect(line, column, "ambiguous `: ` in unquoted value");
    }
    Ok(classify_bare(raw))
}

fn classify_bare(raw: &str) -> ScalarValue {
    match raw {
        "true" => return ScalarValue::Bool(true),
        "false" => return ScalarValue::Bool(false),
        _ => {}
    }
    let digits = raw.strip_prefix('-').unwrap_or(raw);
    let canonical_int = !digits.is_empty()
        && digits.bytes().all(|b| b.is_ascii_digit())
        && (digits == "0" || !digits.starts_with('0'))
        && raw != "-0";
    if canonical_int {
        if let Ok(n) = raw.parse::<i64>() {
            return ScalarValue::Int(n);
        }
    }
    ScalarValue::Str(raw.to_string())
}

/// Parses the body of a quoted string (after the opening quote). Returns
/// the value and the number of bytes consumed including the closing quote.
fn parse_quoted(s: &str, line: usize, column: usize) -> Result<(String, usize), ManifestError> {
    let mut out = String::new();
    let mut chars = s.char_indices();
    while let Some((i, c)) = chars.next() {
        match c {
            '"' => return Ok((out, i + 1)),
            '\\' => match chars.next() {
                Some((_, '"')) => out.push('"'),
                Some((_, '\\')) => out.push('\\'),
                Some((_, 'n')) => out.push('\n'),
                Some((_, 't')) => out.push('\t'),
                Some((_, 'r')) => out.push('\r'),
                Some((j, 'u')) => {
                    let rest = &s[j + 1..];
                    let body = rest
                        .strip_prefix('{')
                        .and_then(|r| r.find('}').map(|end| &r[..end]))
                        .ok_or_else(|| ManifestError::Dialect { line, column: column + j, message: "bad \\u escape".into() })?;
                    let ch = u32::from_str_radix(body, 16)
                        .ok()
                        .and_then(char::from_u32)
                        .ok_or_else(|| ManifestError::Dialect { line, column: column + j, message: "bad \\u escape".into() })?;
                    out.push(ch);
                    for _ in 0..body.len() + 2 {
                        chars.next();
                    }
                }
                _ => return dialect(line, column + i + 1, "unknown escape"),
            },
            c => out.push(c),
        }
    }
    dialect(line, column, "unterminated string")
}

fn needs_quotes(s: &str) -> bool {
    if s.is_empty() || s.starts_with(' ') || s.ends_with(' ') || s == "{}" || s == "[]" {
        return true;
    }
    if s.chars().any(|c| c.is_control() || c == '"' || c == '\\') {
        return true;
    }
    if s.contains(" #") || s.starts_with('#') {
        return true;
    }
    match parse_bare(s, 0, 0) {
        Ok(ScalarValue::Str(back)) => back != s,
        _ => true,
    }
}

fn write_scalar(out: &mut String, scalar: &Scalar) {
    match &scalar.value {
        ScalarValue::Str(s) if needs_quotes(s) => {
            out.push('"');
            for c in s.chars() {
                match c {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\t' => out.push_str("\\t"),
                    '\r' => out.push_str("\\r"),
                    c if c.is_control() => {
                        let _ = write!(out, "\\u{{{:x}}}", c as u32);
                    }
                    c => out.push(c),
                }
            }
            out.push('"');
        }
        other => out.push_str(&other.render()),
    }
    if let Some(param) = &scalar.setter {
        let _ = write!(out, " # set: {param}");
    }
}

fn write_map(out: &mut String, entries: &[(String, Value)], indent: usize) {
    for (key, value) in entries {
        out.push_str(&" ".repeat(indent));
        out.push_str(key);
        out.push(':');
        match value {
            Value::Scalar(s) => {
                out.push(' ');
                write_scalar(out, s);
                out.push('\n');
            }
            Value::Map(m) if m.is_empty() => out.push_str(" {}\n"),
            Value::List(l) if l.is_empty() => out.push_str(" []\n"),
            Value::Map(m) => {
                out.push('\n');
                write_map(out, m, indent + 2);
            }
            Value::List(l) => {
                out.push('\n');
                write_list(out, l, indent + 2);
            }
        }
    }
}

fn write_list(out: &mut String, items: &[Value], indent: usize) {
    let pad = " ".repeat(indent);
    for item in items {
        match item {
            Value::Scalar(s) => {
                let _ = write!(out, "{pad}- ");
                write_scalar(out, s);
                out.push('\n');
            }
            Value::Map(m) if m.is_empty() => {
                let _ = writeln!(out, "{pad}- {{}}");
            }
            Value::List(l) if l.is_empty() => {
                let _ = writeln!(out, "{pad}- []");
            }
            Value::Map(m) => {
                let mut nested = String::new();
                write_map(&mut nested, m, indent + 2);
                let _ = write!(out, "{pad}- ");
                out.push_str(&nested[indent + 2..]);
            }
            Value::List(l) => {
                let _ = writeln!(out, "{pad}-");
                write_list(out, l, indent + 2);
            }
        }
    }
}

pub fn serialize_manifest(doc: &ManifestDocument) -> String {
    let mut out = String::new();
    write_map(&mut out, &doc.root, 0);
    out
}

impl fmt::Display for ManifestDocument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_manifest(self))
    }
}

impl FromStr for ManifestDocument {
    type Err = ManifestError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_manifest(s)
    }
}
