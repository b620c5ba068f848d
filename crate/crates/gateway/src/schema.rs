//! Reply shapes. Every check returns a message suitable for the reformat prompt.

use alphaloop::bandit::Action;
use alphaloop::costeer::TaskKind;
use alphaloop::dsl::parse;
use alphaloop::research::{parse_model_artifact, Hypothesis, TaskSpec};
use serde_json::Value;

fn string_field<'a>(v: &'a Value, key: &str) -> Result<&'a str, String> {
    match v.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(format!("\"{key}\" must be a string")),
        None => Err(format!("missing \"{key}\" key")),
    }
}

pub fn action_field(v: &Value) -> Result<Action, String> {
    match string_field(v, "action")?.trim().to_ascii_lowercase().as_str() {
        "factor" => Ok(Action::Factor),
        "model" => Ok(Action::Model),
        other => Err(format!("\"action\" must be \"factor\" or \"model\", got {other:?}")),
    }
}

/// Model formulations may arrive as an object or as a JSON string.
fn formulation_text(v: &Value) -> Option<String> {
    match v.get("formulation") {
        Some(Value::String(s)) => Some(s.clone()),
        Some(o @ Value::Object(_)) => Some(o.to_string()),
        _ => None,
    }
}

/// Hypothesis reply for round `loop_index`, which must target `expected`.
/// Factor formulations must parse.
pub fn hypothesis(v: &Value, expected: Action, loop_index: usize) -> Result<Hypothesis, String> {
    let action = action_field(v)?;
    if action != expected {
        return Err(format!("asked for a {expected} hypothesis, got {action}"));
    }
    let statement = string_field(v, "statement")?.to_string();
    let rationale = v.get("rationale").and_then(Value::as_str).unwrap_or_default().to_string();
    let Some(tasks) = v.get("tasks").and_then(Value::as_array) else {
        return Err("missing \"tasks\" array".into());
    };
    let mut specs = Vec::with_capacity(tasks.len());
    for (k, t) in tasks.iter().enumerate() {
        let name = string_field(t, "name").map_err(|e| format!("task {k}: {e}"))?.trim().to_string();
        let description = string_field(t, "description").map_err(|e| format!("task {k}: {e}"))?.to_string();
        if name.is_empty() {
            return Err(format!("task {k}: empty name"));
        }
        let formulation = formulation_text(t);
        if let Some(f) = &formulation {
            match action {
                Action::Factor => {
                    parse(f).map_err(|e| format!("task {name}: formula does not parse: {e}"))?;
                }
                Action::Model => {
                    parse_model_artifact(f).map_err(|e| format!("task {name}: {e}"))?;
                }
            }
        }
        specs.push(TaskSpec {
            name,
            description,
            formulation,
        });
    }
    let h = Hypothesis {
        id: loop_index,
        action,
        statement,
        rationale,
        tasks: specs,
        family: v.get("family").and_then(Value::as_str).map(str::to_string),
        level: v.get("level").and_then(Value::as_u64).map(|l| l as usize),
    };
    h.validate().map_err(|e| e.to_string())?;
    Ok(h)
}

/// Artifact text from an implementer reply. Factor formulas must parse;
/// model specs must validate and are returned as canonical JSON.
pub fn artifact(v: &Value, kind: TaskKind) -> Result<String, String> {
    let Some(text) = formulation_text(v) else {
        return Err("missing \"formulation\" key".into());
    };
    match kind {
        TaskKind::Factor => {
            parse(&text).map_err(|e| format!("formula does not parse: {e}"))?;
            Ok(text.trim().to_string())
        }
        TaskKind::Model => {
            let spec = parse_model_artifact(&text)?;
            Ok(serde_json::to_string(&spec).expect("spec serializes"))
        }
    }
}
