//! Tokenizer shared by the line-oriented file formats: whitespace separated
//! fields, `key=value` pairs, double-quoted values with `\"` and `\\`
//! escapes, and `#` comments.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    /// 1-based character column where the token starts.
    pub column: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexError {
    pub column: usize,
    pub message: String,
}

impl fmt::Display for LexError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "column {}: {}", self.column, self.message)
    }
}

/// Splits one line into tokens. A `#` at the start of a token begins a
/// comment that runs to the end of the line.
pub fn tokenize(line: &str) -> Result<Vec<Token>, LexError> {
    let mut tokens = Vec::new();
    let mut chars = line.chars().enumerate().peekable();
    while let Some(&(i, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
            continue;
        }
        if c == '#' {
            break;
        }
        let column = i + 1;
        let mut text = String::new();
        while let Some(&(j, c)) = chars.peek() {
            if c.is_whitespace() {
                break;
            }
            chars.next();
            if c != '"' {
                text.push(c);
                continue;
            }
            let mut closed = false;
            while let Some((_, q)) = chars.next() {
                match q {
                    '"' => {
                        closed = true;
                        break;
                    }
                    '\\' => match chars.next() {
                        Some((_, e @ ('"' | '\\'))) => text.push(e),
                        Some((k, e)) => {
                            return Err(LexError {
                                column: k + 1,
                                message: format!("invalid escape \\{e}"),
                            })
                        }
                        None => break,
                    },
                    other => text.push(other),
                }
            }
            if !closed {
                return Err(LexError {
                    column: j + 1,
                    message: "unterminated quoted string".into(),
                });
            }
        }
        tokens.push(Token { column, text });
    }
    Ok(tokens)
}

/// Splits `key=value` at the first `=`.
pub fn split_pair(token: &str) -> Option<(&str, &str)> {
    token.split_once('=')
}

/// Quotes `value` if it would not survive [`tokenize`] as a single bare token.
pub fn quote(value: &str) -> String {
    let needs = value.is_empty()
        || value
            .chars()
            .any(|c| c.is_whitespace() || c == '"' || c == '\\' || c == '#');
    if !needs {
        return value.to_string();
    }
    let mut out = String::with_capacity(value.len() + 2);
    out.push('"');
    for c in value.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

/// One `kind key=value ...` line of a state file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub kind: String,
    pub fields: BTreeMap<String, String>,
}

impl Record {
    /// `None` for blank and comment-only lines.
    pub fn parse(line: &str) -> Result<Option<Record>, String> {
        let tokens = tokenize(line).map_err(|e| e.to_string())?;
        let Some((head, rest)) = tokens.split_first() else {
            return Ok(None);
        };
        let mut fields = BTreeMap::new();
        for tok in rest {
            let (k, v) = split_pair(&tok.text).ok_or_else(|| format!("expected key=value, found {:?}", tok.text))?;
            if fields.insert(k.to_string(), v.to_string()).is_some() {
                return Err(format!("field {k:?} given twice"));
            }
        }
        Ok(Some(Record {
            kind: head.text.clone(),
            fields,
        }))
    }

    pub fn opt(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    pub fn get(&self, key: &str) -> Result<&str, String> {
        self.opt(key)
            .ok_or_else(|| format!("{} record is missing {key:?}", self.kind))
    }

    pub fn parse_field<T: FromStr>(&self, key: &str) -> Result<T, String> {
        let v = self.get(key)?;
        v.parse().map_err(|_| format!("invalid {key} {v:?}"))
    }

    /// `-` stands for an absent optional value.
    pub fn opt_field<T: FromStr>(&self, key: &str) -> Result<Option<T>, String> {
        match self.opt(key) {
            None | Some("-") => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| format!("invalid {key} {v:?}")),
        }
    }
}

/// Formats a record line (without the newline); values are quoted as needed.
pub fn format_record(kind: &str, fields: &[(&str, String)]) -> String {
    let mut out = kind.to_string();
    for (k, v) in fields {
        out.push(' ');
        out.push_str(k);
        out.push('=');
        out.push_str(&quote(v));
    }
    out
}
