use serde_json::{Map, Value};

use super::{Decision, MarkRegistry, PromptError};

/// Byte ranges of balanced `{...}` spans in order of their opening brace.
/// Braces inside JSON strings are ignored.
fn balanced_objects(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    for start in (0..bytes.len()).filter(|&i| bytes[i] == b'{') {
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(start) {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        spans.push(&text[start..=i]);
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    spans
}

fn json_objects(reply: &str) -> impl Iterator<Item = Map<String, Value>> + '_ {
    let whole = serde_json::from_str::<Value>(reply.trim()).ok();
    whole
        .into_iter()
        .chain(balanced_objects(reply).into_iter().filter_map(|s| serde_json::from_str(s).ok()))
        .filter_map(|v| match v {
            Value::Object(m) => Some(m),
            _ => None,
        })
}

fn excerpt(reply: &str) -> String {
    reply.chars().take(120).collect()
}

fn check_mark(id: i64, registry: &MarkRegistry) -> Result<u32, PromptError> {
    u32::try_from(id)
        .ok()
        .filter(|m| registry.contains(*m))
        .ok_or(PromptError::UnknownMark { mark_id: id, count: registry.len() })
}

/// Extracts the first JSON object carrying `id`, `class` and `is_target`
/// and checks the id against the annotated marks.
pub fn parse_decision(reply: &str, registry: &MarkRegistry) -> Result<Decision, PromptError> {
    for obj in json_objects(reply) {
        let (Some(id), Some(class), Some(is_target)) = (
            obj.get("id").and_then(Value::as_i64),
            obj.get("class").and_then(Value::as_str),
            obj.get("is_target").and_then(Value::as_bool),
        ) else {
            continue;
        };
        let mark_id = check_mark(id, registry)?;
        return Ok(Decision {
            mark_id,
            class_name: class.to_string(),
            is_target,
            rationale: obj.get("rationale").and_then(Value::as_str).unwrap_or_default().to_string(),
        });
    }
    Err(PromptError::NoDecision { excerpt: excerpt(reply) })
}

/// Mark id from an identification reply (`{"id": n}`).
pub fn parse_identification(reply: &str, registry: &MarkRegistry) -> Result<u32, PromptError> {
    for obj in json_objects(reply) {
        if let Some(id) = obj.get("id").and_then(Value::as_i64) {
            return check_mark(id, registry);
        }
    }
    Err(PromptError::NoDecision { excerpt: excerpt(reply) })
}
