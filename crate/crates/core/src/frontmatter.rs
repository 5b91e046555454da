//! `---`-delimited `key: value` headers used by persona and corpus files.

use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrontMatter {
    pub fields: BTreeMap<String, String>,
    pub body: String,
}

impl FrontMatter {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }
}

/// Splits a document into its header fields and body. Returns `None` when the
/// text does not open with a `---` line or the header is never closed.
pub fn parse(text: &str) -> Option<FrontMatter> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut lines = text.split_inclusive('\n');
    if lines.next()?.trim_end() != "---" {
        return None;
    }
    let mut fields = BTreeMap::new();
    let mut consumed = text.len() - lines.clone().map(str::len).sum::<usize>();
    for line in lines.by_ref() {
        consumed += line.len();
        let trimmed = line.trim_end();
        if trimmed == "---" {
            return Some(FrontMatter {
                fields,
                body: text[consumed..].trim().to_string(),
            });
        }
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let (k, v) = trimmed.split_once(':')?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    None
}
