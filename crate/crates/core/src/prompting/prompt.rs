use std::fmt::Write;

use super::{Decision, MarkRegistry};

const SETUP: &str = "\
You plan picks for a robot arm with a two-finger gripper that empties a storage bin. \
The image shows the bin from above, and a numbered label sits on each item.";

const OBJECTIVE: &str = "\
Pick the item the user asks for. An item can be lifted only when nothing rests on it.";

const REASONING: &str = "\
Check which items rest on the requested item. If some do, check what rests on those in turn.";

const ACTIONS: &str = "\
When nothing rests on the requested item, answer with that item. Otherwise answer with an \
item that rests on it, directly or through other items, and has nothing resting on itself.";

const RESPONSE_FORMAT: &str = "\
Reply with exactly one JSON object and nothing else:
{\"id\": <mark number>, \"class\": \"<object class name>\", \"is_target\": <true or false>, \"rationale\": \"<one sentence>\"}";

fn mark_list(registry: &MarkRegistry) -> String {
    registry.mark_ids().map(|m| m.to_string()).collect::<Vec<_>>().join(", ")
}

fn quoted(text: &str) -> String {
    serde_json::to_string(text).expect("string serializes")
}

/// Grasp-reasoning prompt: context blocks, then the instruction, the reply
/// contract and a digest of earlier decisions in this episode.
pub fn build_reason_prompt(instruction: &str, registry: &MarkRegistry, history: &[Decision]) -> String {
    let mut p = String::new();
    for (title, body) in [("Setup", SETUP), ("Objective", OBJECTIVE), ("Reasoning", REASONING), ("Actions", ACTIONS)] {
        let _ = write!(p, "## {title}\n{body}\n\n");
    }
    let _ = write!(p, "## Marks\nAnnotated marks: {}\n\n", mark_list(registry));
    let _ = write!(p, "## Instruction\n{}\n\n", quoted(instruction));
    let _ = write!(p, "## Response format\n{RESPONSE_FORMAT}\n");
    if !history.is_empty() {
        p.push_str(
            "\n## History\nEarlier decisions in this episode, oldest first (mark numbers refer to earlier images):\n",
        );
        for (i, d) in history.iter().enumerate() {
            let _ = writeln!(
                p,
                "{}. mark {} ({}), target: {}",
                i + 1,
                d.mark_id,
                d.class_name,
                if d.is_target { "yes" } else { "no" }
            );
        }
    }
    p
}

/// Identification-only prompt: which mark is the described object.
pub fn build_identify_prompt(instruction: &str, registry: &MarkRegistry) -> String {
    let mut p = String::new();
    let _ = write!(
        p,
        "## Task\nThe image is a top-down view of a bin. Every object carries a numbered mark. \
         Which mark is the object described below?\n\n"
    );
    let _ = write!(p, "## Marks\nAnnotated marks: {}\n\n", mark_list(registry));
    let _ = write!(p, "## Description\n{}\n\n", quoted(instruction));
    p.push_str("## Response format\nReply with exactly one JSON object and nothing else:\n{\"id\": <mark number>}\n");
    p
}
