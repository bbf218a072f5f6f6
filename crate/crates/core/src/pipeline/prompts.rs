use std::collections::BTreeMap;
use std::path::Path;

use super::PipelineError;

const BUILTIN: &[(&str, &str)] = &[
    ("caption", include_str!("../../templates/caption.txt")),
    ("reasoning", include_str!("../../templates/reasoning.txt")),
    ("meta", include_str!("../../templates/meta.txt")),
    ("meta_reminder", include_str!("../../templates/meta_reminder.txt")),
    ("validation", include_str!("../../templates/validation.txt")),
];

/// Placeholders substituted by [`Template::render`].
pub const PLACEHOLDERS: &[&str] = &[
    "question",
    "answer",
    "caption",
    "reasoning",
    "level",
    "variant",
    "variant_answer",
];

/// A prompt split into an optional system part and a user part.
///
/// On disk the two parts are separated by a line holding only `---`; a file
/// without that line is a user prompt only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub system: Option<String>,
    pub user: String,
}

impl Template {
    pub fn parse(text: &str) -> Self {
        let text = text.replace("\r\n", "\n");
        let mut system = Vec::new();
        let mut lines = text.lines();
        let mut found = false;
        for line in lines.by_ref() {
            if line.trim_end() == "---" {
                found = true;
                break;
            }
            system.push(line);
        }
        if !found {
            return Template {
                system: None,
                user: text.trim().to_string(),
            };
        }
        let user = lines.collect::<Vec<_>>().join("\n");
        let system = system.join("\n");
        Template {
            system: Some(system.trim().to_string()).filter(|s| !s.is_empty()),
            user: user.trim().to_string(),
        }
    }

    pub fn render(&self, vars: &BTreeMap<&str, &str>) -> Template {
        let fill = |s: &str| {
            let mut out = s.to_string();
            for (k, v) in vars {
                out = out.replace(&format!("{{{k}}}"), v);
            }
            out
        };
        Template {
            system: self.system.as_deref().map(fill),
            user: fill(&self.user),
        }
    }
}

/// Built-in templates, optionally overridden by `<id>.txt` files in a directory.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, Template>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet {
            templates: BUILTIN
                .iter()
                .map(|(id, text)| (id.to_string(), Template::parse(text)))
                .collect(),
        }
    }

    pub fn with_overrides(dir: &Path) -> Result<Self, PipelineError> {
        let mut set = Self::builtin();
        let entries = std::fs::read_dir(dir).map_err(|e| PipelineError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        for entry in entries {
            let path = entry
                .map_err(|e| PipelineError::Io {
                    path: dir.to_path_buf(),
                    source: e,
                })?
                .path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::Io {
                path: path.clone(),
                source: e,
            })?;
            set.templates.insert(id.to_string(), Template::parse(&text));
        }
        Ok(set)
    }

    pub fn get(&self, id: &str) -> Result<&Template, PipelineError> {
        self.templates
            .get(id)
            .ok_or_else(|| PipelineError::Config(format!("unknown prompt template `{id}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_with_system_part() {
        let set = TemplateSet::builtin();
        for (id, _) in BUILTIN {
            let t = set.get(id).unwrap();
            assert!(!t.user.is_empty(), "{id}");
        }
        assert!(set.get("caption").unwrap().system.is_some());
        assert!(set.get("nope").is_err());
    }

    #[test]
    fn render_substitutes_known_placeholders_only() {
        let t = Template::parse("sys {question}\n---\nQ: {question} A: {answer} {\"word\": {other}}");
        let vars = BTreeMap::from([("question", "is it"), ("answer", "yes")]);
        let r = t.render(&vars);
        assert_eq!(r.system.as_deref(), Some("sys is it"));
        assert_eq!(r.user, "Q: is it A: yes {\"word\": {other}}");
    }

    #[test]
    fn no_separator_means_user_only() {
        let t = Template::parse("just ask {question}\n");
        assert_eq!(t.system, None);
        assert_eq!(t.user, "just ask {question}");
    }

    #[test]
    fn directory_overrides_builtin() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("caption.txt"), "describe {question}").unwrap();
        std::fs::write(dir.path().join("notes.md"), "ignored").unwrap();
        let set = TemplateSet::with_overrides(dir.path()).unwrap();
        assert_eq!(set.get("caption").unwrap().user, "describe {question}");
        assert!(set.get("meta").is_ok());
    }
}
