//! Untyped configuration tree: YAML-subset parsing, dotted-path overrides and a
//! canonical block-style emitter.

use std::fmt::Write as _;

use indexmap::IndexMap;
use yaml_rust2::parser::{Event, Parser};
use yaml_rust2::scanner::{Marker, TScalarStyle};

use crate::error::{Error, Result};

pub type Map = IndexMap<String, Value>;

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    Seq(Vec<Value>),
    Map(Map),
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Str(_) => "string",
            Value::Seq(_) => "sequence",
            Value::Map(_) => "map",
        }
    }

    pub fn as_map(&self) -> Option<&Map> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    /// Interpret an unquoted scalar the way YAML core-schema resolution would.
    pub fn from_plain(s: &str) -> Value {
        match s {
            "" | "~" | "null" | "Null" | "NULL" => return Value::Null,
            "true" | "True" | "TRUE" => return Value::Bool(true),
            "false" | "False" | "FALSE" => return Value::Bool(false),
            ".inf" | "+.inf" | ".Inf" => return Value::Float(f64::INFINITY),
            "-.inf" | "-.Inf" => return Value::Float(f64::NEG_INFINITY),
            ".nan" | ".NaN" => return Value::Float(f64::NAN),
            _ => {}
        }
        if let Ok(i) = s.parse::<i64>() {
            return Value::Int(i);
        }
        let numeric = s.bytes().all(|b| b.is_ascii_digit() || b"+-.eE".contains(&b)) && s.bytes().any(|b| b.is_ascii_digit());
        match s.parse::<f64>() {
            Ok(f) if numeric => Value::Float(f),
            _ => Value::Str(s.to_string()),
        }
    }
}

fn parse_error(m: Marker, message: impl Into<String>) -> Error {
    Error::Parse {
        line: m.line(),
        column: m.col() + 1,
        message: message.into(),
    }
}

/// Parse one YAML document restricted to maps, sequences and scalars.
pub fn parse_yaml(text: &str) -> Result<Value> {
    let mut p = Parser::new_from_str(text);
    let mut next = move || -> Result<(Event, Marker)> {
        p.next_token().map_err(|e| parse_error(*e.marker(), e.info().to_string()))
    };
    let (ev, m) = next()?;
    if ev != Event::StreamStart {
        return Err(parse_error(m, "expected start of stream"));
    }
    let (ev, m) = next()?;
    let value = match ev {
        Event::StreamEnd => return Ok(Value::Map(Map::new())),
        Event::DocumentStart => {
            let (ev, m) = next()?;
            node(&mut next, ev, m)?
        }
        _ => return Err(parse_error(m, "expected a document")),
    };
    let (ev, m) = next()?;
    if ev != Event::DocumentEnd {
        return Err(parse_error(m, "expected end of document"));
    }
    match next()? {
        (Event::StreamEnd, _) => Ok(value),
        (_, m) => Err(parse_error(m, "multiple documents are not supported")),
    }
}

fn node(next: &mut impl FnMut() -> Result<(Event, Marker)>, ev: Event, m: Marker) -> Result<Value> {
    match ev {
        Event::Alias(_) => Err(parse_error(m, "aliases are not supported")),
        Event::Scalar(_, _, anchor, _) | Event::SequenceStart(anchor, _) | Event::MappingStart(anchor, _) if anchor != 0 => {
            Err(parse_error(m, "anchors are not supported"))
        }
        Event::Scalar(_, _, _, Some(_)) | Event::SequenceStart(_, Some(_)) | Event::MappingStart(_, Some(_)) => {
            Err(parse_error(m, "tags are not supported"))
        }
        Event::Scalar(s, TScalarStyle::Plain, ..) => Ok(Value::from_plain(&s)),
        Event::Scalar(s, ..) => Ok(Value::Str(s)),
        Event::SequenceStart(..) => {
            let mut items = Vec::new();
            loop {
                match next()? {
                    (Event::SequenceEnd, _) => return Ok(Value::Seq(items)),
                    (ev, m) => items.push(node(next, ev, m)?),
                }
            }
        }
        Event::MappingStart(..) => {
            let mut map = Map::new();
            loop {
                let (ev, km) = next()?;
                let key = match ev {
                    Event::MappingEnd => return Ok(Value::Map(map)),
                    Event::Scalar(s, _, 0, None) => s,
                    _ => return Err(parse_error(km, "mapping keys must be plain scalars")),
                };
                let (ev, vm) = next()?;
                let value = node(next, ev, vm)?;
                if map.insert(key.clone(), value).is_some() {
                    return Err(parse_error(km, format!("duplicate key '{key}'")));
                }
            }
        }
        other => Err(parse_error(m, format!("unexpected {other:?}"))),
    }
}

/// Apply `a.b.c=value`; the value text is parsed as a YAML flow node. Missing map
/// keys are created; sequence indices must exist.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not of the form key.path=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override '{assignment}' has an empty key segment")));
    }
    let value = match raw.trim() {
        "" => Value::Str(String::new()),
        t => parse_yaml(t).map_err(|e| e.context(format!("override '{path}'")))?,
    };
    let mut cur = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        cur = match cur {
            Value::Map(m) => {
                if last {
                    m.insert(seg.to_string(), value);
                    return Ok(());
                }
                m.entry(seg.to_string()).or_insert_with(|| Value::Map(Map::new()))
            }
            Value::Seq(items) => {
                let len = items.len();
                let slot = seg
                    .parse::<usize>()
                    .ok()
                    .and_then(|k| items.get_mut(k))
                    .ok_or_else(|| Error::Config(format!("override '{path}': index '{seg}' out of range for sequence of {len}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            other => {
                return Err(Error::Config(format!(
                    "override '{path}': '{}' is a {}, not a map",
                    segments[..i].join("."),
                    other.kind()
                )))
            }
        };
    }
    unreachable!("loop returns on the last segment")
}

/// Block-style YAML with keys in map order, round-tripping through [`parse_yaml`].
pub fn emit_yaml(value: &Value) -> String {
    let mut out = String::new();
    match value {
        Value::Map(m) if !m.is_empty() => emit_map(&mut out, m, 0),
        Value::Seq(s) if !s.is_empty() => emit_seq(&mut out, s, 0),
        v => {
            out.push_str(&scalar(v));
            out.push('\n');
        }
    }
    out
}

fn is_block(v: &Value) -> bool {
    matches!(v, Value::Map(m) if !m.is_empty()) || matches!(v, Value::Seq(s) if !s.is_empty())
}

fn emit_map(out: &mut String, m: &Map, indent: usize) {
    for (k, v) in m {
        let _ = write!(out, "{:indent$}{}:", "", quote(k));
        emit_child(out, v, indent);
    }
}

fn emit_seq(out: &mut String, s: &[Value], indent: usize) {
    for v in s {
        let _ = write!(out, "{:indent$}-", "");
        match v {
            Value::Map(m) if !m.is_empty() => {
                // first key on the dash line, the rest aligned under it
                let mut first = true;
                for (k, item) in m {
                    if first {
                        let _ = write!(out, " {}:", quote(k));
                        first = false;
                    } else {
                        let _ = write!(out, "{:w$}{}:", "", quote(k), w = indent + 2);
                    }
                    emit_child(out, item, indent + 2);
                }
            }
            _ => emit_child(out, v, indent),
        }
    }
}

fn emit_child(out: &mut String, v: &Value, indent: usize) {
    if is_block(v) {
        out.push('\n');
        match v {
            Value::Map(m) => emit_map(out, m, indent + 2),
            Value::Seq(s) => emit_seq(out, s, indent + 2),
            _ => unreachable!(),
        }
    } else {
        let _ = writeln!(out, " {}", scalar(v));
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::Null => "null".into(),
        Value::Bool(b) => b.to_string(),
        Value::Int(i) => i.to_string(),
        Value::Float(f) if f.is_nan() => ".nan".into(),
        Value::Float(f) if f.is_infinite() => if *f > 0.0 { ".inf" } else { "-.inf" }.into(),
        Value::Float(f) => {
            let s = format!("{f:?}");
            if s.contains(['.', 'e', 'E']) {
                s
            } else {
                format!("{s}.0")
            }
        }
        Value::Str(s) => quote(s),
        Value::Seq(_) => "[]".into(),
        Value::Map(_) => "{}".into(),
    }
}

/// Plain when it would read back as the same string, double-quoted otherwise.
fn quote(s: &str) -> String {
    let plain_safe = !s.is_empty()
        && Value::from_plain(s) == Value::Str(s.to_string())
        && s.chars().all(|c| c.is_ascii_alphanumeric() || "_-./+".contains(c))
        && !s.starts_with(['-', '.', '+']);
    if plain_safe {
        return s.to_string();
    }
    let mut q = String::with_capacity(s.len() + 2);
    q.push('"');
    for c in s.chars() {
        match c {
            '"' => q.push_str("\\\""),
            '\\' => q.push_str("\\\\"),
            '\n' => q.push_str("\\n"),
            '\t' => q.push_str("\\t"),
            c if c.is_control() => {
                let _ = write!(q, "\\u{:04x}", c as u32);
            }
            c => q.push(c),
        }
    }
    q.push('"');
    q
}
