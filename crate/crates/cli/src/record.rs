//! Line-delimited `key=value` metric records.
//!
//! Reals print with six decimals so that records from reproducible runs
//! compare equal as text.

use std::fmt;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    fields: Vec<(String, String)>,
}

fn quote(v: &str) -> String {
    if !v.is_empty() && v.chars().all(|c| !c.is_whitespace() && c != '"' && c != '=') {
        v.to_string()
    } else {
        format!("\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\""))
    }
}

impl Record {
    pub fn new(kind: &str) -> Self {
        Self {
            fields: vec![("kind".into(), kind.into())],
        }
    }

    pub fn text(mut self, key: &str, v: impl fmt::Display) -> Self {
        self.fields.push((key.into(), v.to_string()));
        self
    }

    pub fn real(mut self, key: &str, v: f64) -> Self {
        self.fields.push((key.into(), format!("{v:.6}")));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn kind(&self) -> &str {
        self.get("kind").unwrap_or_default()
    }

    /// Parses a record line. Quoted values may contain spaces.
    pub fn parse(line: &str) -> Option<Self> {
        let mut fields = Vec::new();
        let mut rest = line.trim();
        while !rest.is_empty() {
            let eq = rest.find('=')?;
            let key = rest[..eq].to_string();
            rest = &rest[eq + 1..];
            let value = if let Some(body) = rest.strip_prefix('"') {
                let mut out = String::new();
                let mut chars = body.char_indices();
                let mut end = None;
                while let Some((i, c)) = chars.next() {
                    match c {
                        '\\' => out.push(chars.next()?.1),
                        '"' => {
                            end = Some(i + 1);
                            break;
                        }
                        c => out.push(c),
                    }
                }
                rest = &body[end?..];
                out
            } else {
                let stop = rest.find(' ').unwrap_or(rest.len());
                let v = rest[..stop].to_string();
                rest = &rest[stop..];
                v
            };
            fields.push((key, value));
            rest = rest.trim_start();
        }
        Some(Self { fields })
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.fields.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{k}={}", quote(v))?;
        }
        Ok(())
    }
}

/// The one-line error record printed on failure.
pub fn error_record(code: &str, err: &anyhow::Error) -> Record {
    let msg = format!("{err:#}").replace('\n', " ");
    Record::new("error").text("code", code).text("message", msg)
}
