//! Prompt templates: plain text assets with `{{name}}` placeholders.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use super::ProviderError;

const BUILTIN: &[(&str, &str)] = &[
    (
        "discovery.annotate",
        include_str!("../../templates/discovery.annotate.txt"),
    ),
    (
        "discovery.aggregate",
        include_str!("../../templates/discovery.aggregate.txt"),
    ),
    (
        "discovery.subskills",
        include_str!("../../templates/discovery.subskills.txt"),
    ),
    ("engine.math", include_str!("../../templates/engine.math.txt")),
    (
        "engine.vqa-description",
        include_str!("../../templates/engine.vqa-description.txt"),
    ),
    (
        "engine.vqa-questions",
        include_str!("../../templates/engine.vqa-questions.txt"),
    ),
    (
        "engine.code-problem",
        include_str!("../../templates/engine.code-problem.txt"),
    ),
    (
        "engine.code-solution",
        include_str!("../../templates/engine.code-solution.txt"),
    ),
    (
        "policy.open-ended",
        include_str!("../../templates/policy.open-ended.txt"),
    ),
    (
        "policy.skill-list",
        include_str!("../../templates/policy.skill-list.txt"),
    ),
];

#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: BTreeMap<String, String>,
}

impl Default for TemplateStore {
    fn default() -> Self {
        TemplateStore {
            templates: BUILTIN
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl TemplateStore {
    /// Built-ins overlaid with every `<id>.txt` in `dir`. Domain-specific
    /// variants are named `<id>.<domain>.txt`.
    pub fn with_overrides(dir: &Path) -> Result<Self, ProviderError> {
        let mut store = TemplateStore::default();
        let entries =
            std::fs::read_dir(dir).map_err(|e| ProviderError::Template(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| ProviderError::Template(e.to_string()))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let text = std::fs::read_to_string(&path)
                .map_err(|e| ProviderError::Template(format!("{}: {e}", path.display())))?;
            store.templates.insert(id, text);
        }
        Ok(store)
    }

    pub fn insert(&mut self, id: impl Into<String>, text: impl Into<String>) {
        self.templates.insert(id.into(), text.into());
    }

    pub fn contains(&self, id: &str) -> bool {
        self.templates.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.templates.get(id).map(String::as_str)
    }

    /// `base.domain` when such a template exists, else `base`.
    pub fn resolve(&self, base: &str, domain: &str) -> String {
        let specific = format!("{base}.{domain}");
        if self.contains(&specific) {
            specific
        } else {
            base.to_string()
        }
    }

    pub fn render(&self, id: &str, vars: &BTreeMap<String, Value>) -> Result<String, ProviderError> {
        let text = self
            .get(id)
            .ok_or_else(|| ProviderError::UnknownTemplate(id.to_string()))?;
        render(text, vars).map_err(|name| ProviderError::MissingVariable {
            template: id.to_string(),
            name,
        })
    }
}

/// Substitute `{{name}}`. Strings are inserted verbatim, other values as
/// compact JSON. Returns the first unknown placeholder name on failure.
pub fn render(text: &str, vars: &BTreeMap<String, Value>) -> Result<String, String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            return Ok(out);
        };
        let name = after[..end].trim();
        match vars.get(name) {
            Some(Value::String(s)) => out.push_str(s),
            Some(v) => out.push_str(&v.to_string()),
            None => return Err(name.to_string()),
        }
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn substitutes_strings_and_json() {
        let vars: BTreeMap<String, Value> = [("a".to_string(), json!("x")), ("b".to_string(), json!([1, 2]))]
            .into_iter()
            .collect();
        assert_eq!(render("{{a}}-{{ b }}!", &vars).unwrap(), "x-[1,2]!");
        assert_eq!(render("{{c}}", &vars).unwrap_err(), "c");
    }

    #[test]
    fn builtins_present() {
        let s = TemplateStore::default();
        assert!(s.contains("discovery.annotate"));
        assert_eq!(s.resolve("engine.math", "math"), "engine.math");
    }

    #[test]
    fn overrides_from_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("engine.math.math.txt"), "custom {{skill}}").unwrap();
        let s = TemplateStore::with_overrides(dir.path()).unwrap();
        assert_eq!(s.resolve("engine.math", "math"), "engine.math.math");
    }
}
