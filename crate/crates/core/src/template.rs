//! `{placeholder}` instruction templates.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template is missing required placeholder {{{0}}}")]
    MissingPlaceholder(String),
    #[error("template uses unknown placeholder {{{0}}}")]
    UnknownPlaceholder(String),
    #[error("no value supplied for placeholder {{{0}}}")]
    MissingValue(String),
}

/// An instruction with named slots. A slot is `{name}` where `name` is
/// lowercase ASCII letters or underscores; any other braces are literal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    text: String,
}

fn placeholders(text: &str) -> Vec<(usize, usize, &str)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                out.push((i, j + 1, &text[i + 1..j]));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

impl Template {
    /// Checks that every `required` slot appears and that no slot outside
    /// `allowed` is used.
    pub fn new(text: impl Into<String>, required: &[&str], allowed: &[&str]) -> Result<Self, TemplateError> {
        let text = text.into();
        let found = placeholders(&text);
        for r in required {
            if !found.iter().any(|(_, _, n)| n == r) {
                return Err(TemplateError::MissingPlaceholder(r.to_string()));
            }
        }
        if let Some((_, _, n)) = found.iter().find(|(_, _, n)| !allowed.contains(n)) {
            return Err(TemplateError::UnknownPlaceholder(n.to_string()));
        }
        Ok(Self { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.text.len());
        let mut last = 0;
        for (start, end, name) in placeholders(&self.text) {
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::MissingValue(name.to_string()))?;
            out.push_str(&self.text[last..start]);
            out.push_str(value);
            last = end;
        }
        out.push_str(&self.text[last..]);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_slots() {
        let t = Template::new("{head} and {tail} {head}", &["head", "tail"], &["head", "tail"]).unwrap();
        assert_eq!(t.render(&[("head", "a"), ("tail", "b")]).unwrap(), "a and b a");
    }

    #[test]
    fn literal_braces_survive() {
        let t = Template::new("{x y} {} {head}", &["head"], &["head"]).unwrap();
        assert_eq!(t.render(&[("head", "h")]).unwrap(), "{x y} {} h");
    }

    #[test]
    fn missing_and_unknown() {
        assert_eq!(
            Template::new("{head}", &["head", "tail"], &["head", "tail"]).unwrap_err(),
            TemplateError::MissingPlaceholder("tail".into())
        );
        assert_eq!(
            Template::new("{head} {drug}", &["head"], &["head"]).unwrap_err(),
            TemplateError::UnknownPlaceholder("drug".into())
        );
    }
}
