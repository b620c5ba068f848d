//! Prompt templates with `{{key}}` placeholders.

use std::fs;

use crate::{GatewayConfig, GatewayError, Result};

const BUNDLED: [(&str, &str); 7] = [
    ("hypothesis_system", include_str!("../prompts/hypothesis_system.txt")),
    ("hypothesis_user", include_str!("../prompts/hypothesis_user.txt")),
    ("implement_system", include_str!("../prompts/implement_system.txt")),
    ("implement_user", include_str!("../prompts/implement_user.txt")),
    ("schedule_system", include_str!("../prompts/schedule_system.txt")),
    ("schedule_user", include_str!("../prompts/schedule_user.txt")),
    ("reformat", include_str!("../prompts/reformat.txt")),
];

#[derive(Debug, Clone)]
pub struct Prompts {
    templates: Vec<(&'static str, String)>,
}

impl Prompts {
    pub fn bundled() -> Self {
        Self {
            templates: BUNDLED.iter().map(|(k, v)| (*k, v.to_string())).collect(),
        }
    }

    /// Bundled templates, each replaced by `<prompt_dir>/<name>.txt` when present.
    pub fn load(cfg: &GatewayConfig) -> Result<Self> {
        let mut p = Self::bundled();
        if let Some(dir) = &cfg.prompt_dir {
            for (name, text) in p.templates.iter_mut() {
                let path = dir.join(format!("{name}.txt"));
                if path.exists() {
                    *text = fs::read_to_string(&path)
                        .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
                }
            }
        }
        Ok(p)
    }

    pub fn render(&self, name: &str, vars: &[(&str, String)]) -> String {
        let template = self
            .templates
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("no prompt template {name}"));
        let mut out = template.to_string();
        for (k, v) in vars {
            out = out.replace(&format!("{{{{{k}}}}}"), v);
        }
        out
    }
}
