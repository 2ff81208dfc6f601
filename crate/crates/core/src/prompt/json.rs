//! Lenient JSON reader for chat-model replies.
//!
//! Accepts strict JSON plus the deviations models produce in practice:
//! single-quoted strings, bare words (`Yes`, `No`, unquoted keys), trailing
//! commas, raw line breaks inside strings, and prose around the object.

use serde_json::{Map, Number, Value};
use thiserror::Error;

const MAX_DEPTH: usize = 128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractError {
    #[error("no JSON object found in reply")]
    NoObject,
    #[error("malformed JSON at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
}

/// Returns the first `{...}` block in `reply` that parses.
pub fn tolerant_json_extract(reply: &str) -> Result<Value, ExtractError> {
    let mut first_err = None;
    for (start, _) in reply.char_indices().filter(|&(_, c)| c == '{') {
        let mut p = Parser {
            src: &reply[start..],
            pos: 0,
            base: start,
            depth: 0,
        };
        match p.object() {
            Ok(v) => return Ok(v),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.unwrap_or(ExtractError::NoObject))
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    base: usize,
    depth: usize,
}

impl Parser<'_> {
    fn err(&self, message: impl Into<String>) -> ExtractError {
        ExtractError::Syntax {
            offset: self.base + self.pos,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
    }

    fn expect(&mut self, want: char) -> Result<(), ExtractError> {
        match self.bump() {
            Some(c) if c == want => Ok(()),
            Some(c) => Err(self.err(format!("expected {want:?}, found {c:?}"))),
            None => Err(self.err(format!("expected {want:?}, found end of input"))),
        }
    }

    fn enter(&mut self) -> Result<(), ExtractError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.err("nesting too deep"));
        }
        Ok(())
    }

    fn value(&mut self) -> Result<Value, ExtractError> {
        self.skip_ws();
        match self.peek() {
            Some('{') => self.object(),
            Some('[') => self.array(),
            Some(q @ ('"' | '\'')) => self.string(q).map(Value::String),
            Some(c) if c == '-' || c.is_ascii_digit() => self.number(),
            Some(c) if c.is_alphabetic() || c == '_' => Ok(self.bare_word()),
            Some(c) => Err(self.err(format!("unexpected {c:?}"))),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn object(&mut self) -> Result<Value, ExtractError> {
        self.enter()?;
        self.expect('{')?;
        let mut map = Map::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some('}') => {
                    self.bump();
                    break;
                }
                None => return Err(self.err("unterminated object")),
                _ => {}
            }
            let key = self.key()?;
            self.skip_ws();
            self.expect(':')?;
            let value = self.value()?;
            map.insert(key, value);
            self.skip_ws();
            match self.bump() {
                Some(',') => continue,
                Some('}') => break,
                Some(c) => return Err(self.err(format!("expected ',' or '}}', found {c:?}"))),
                None => return Err(self.err("unterminated object")),
            }
        }
        self.depth -= 1;
        Ok(Value::Object(map))
    }

    fn key(&mut self) -> Result<String, ExtractError> {
        match self.peek() {
            Some(q @ ('"' | '\'')) => self.string(q),
            _ => {
                let rest = &self.src[self.pos..];
                let end = rest
                    .find([':', ',', '{', '}', '[', ']', '"', '\''])
                    .unwrap_or(rest.len());
                let key = rest[..end].trim();
                if key.is_empty() || !rest[end..].starts_with(':') {
                    return Err(self.err("expected object key"));
                }
                self.pos += end;
                Ok(key.to_string())
            }
        }
    }

    fn array(&mut self) -> Result<Value, ExtractError> {
        self.enter()?;
        self.expect('[')?;
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some(']') => {
                    self.bump();
                    break;
                }
                None => return Err(self.err("unterminated array")),
                _ => {}
            }
            items.push(self.value()?);
            self.skip_ws();
            match self.bump() {
                Some(',') => continue,
                Some(']') => break,
                Some(c) => return Err(self.err(format!("expected ',' or ']', found {c:?}"))),
                None => return Err(self.err("unterminated array")),
            }
        }
        self.depth -= 1;
        Ok(Value::Array(items))
    }

    /// A quote only closes the string when what follows could continue the
    /// surrounding structure, so `'the door's handle'` stays one string.
    fn closes_string(&self) -> bool {
        let rest = self.src[self.pos..].trim_start();
        rest.is_empty() || rest.starts_with([',', '}', ']', ':'])
    }

    fn string(&mut self, quote: char) -> Result<String, ExtractError> {
        self.expect(quote)?;
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return Err(self.err("unterminated string")),
                Some('\\') => match self.bump() {
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some('r') => out.push('\r'),
                    Some('b') => out.push('\u{8}'),
                    Some('f') => out.push('\u{c}'),
                    Some('u') => out.push(self.unicode_escape()?),
                    Some(c) => out.push(c),
                    None => return Err(self.err("unterminated escape")),
                },
                Some(c) if c == quote && self.closes_string() => return Ok(out),
                Some(c) => out.push(c),
            }
        }
    }

    fn hex4(&mut self) -> Result<u32, ExtractError> {
        let digits = self
            .src
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.err("short \\u escape"))?;
        let v = u32::from_str_radix(digits, 16).map_err(|_| self.err("bad \\u escape"))?;
        self.pos += 4;
        Ok(v)
    }

    fn unicode_escape(&mut self) -> Result<char, ExtractError> {
        let hi = self.hex4()?;
        if (0xD800..0xDC00).contains(&hi) && self.src[self.pos..].starts_with("\\u") {
            let save = self.pos;
            self.pos += 2;
            let lo = self.hex4()?;
            if (0xDC00..0xE000).contains(&lo) {
                let c = 0x10000 + ((hi - 0xD800) << 10) + (lo - 0xDC00);
                return Ok(char::from_u32(c).unwrap_or('\u{FFFD}'));
            }
            self.pos = save;
        }
        Ok(char::from_u32(hi).unwrap_or('\u{FFFD}'))
    }

    fn number(&mut self) -> Result<Value, ExtractError> {
        let rest = &self.src[self.pos..];
        let end = rest
            .find(|c: char| !(c.is_ascii_digit() || matches!(c, '-' | '+' | '.' | 'e' | 'E')))
            .unwrap_or(rest.len());
        let text = &rest[..end];
        let integral = !text.contains(['.', 'e', 'E']);
        let number = if integral {
            text.parse::<i64>()
                .map(Number::from)
                .or_else(|_| text.parse::<u64>().map(Number::from))
                .ok()
                .or_else(|| text.parse::<f64>().ok().and_then(Number::from_f64))
        } else {
            text.parse::<f64>().ok().and_then(Number::from_f64)
        };
        let number = number.ok_or_else(|| self.err(format!("bad number {text:?}")))?;
        self.pos += end;
        Ok(Value::Number(number))
    }

    fn bare_word(&mut self) -> Value {
        let rest = &self.src[self.pos..];
        let end = rest
            .find(|c: char| !(c.is_alphanumeric() || c == '_'))
            .unwrap_or(rest.len());
        let word = &rest[..end];
        self.pos += end;
        match word {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            "null" => Value::Null,
            other => Value::String(other.to_string()),
        }
    }
}
