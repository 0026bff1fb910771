//! Line-delimited JSON trajectory records: one task per line.
//!
//! ```json
//! {"task": {"env_id": "...", "tools": ["..."],
//!           "scaffold": {"name": "...", "system_prompt": "..."},
//!           "instruction": "...", "verifier_id": "..."},
//!  "vocab_size": 64,
//!  "calls": [{"call_id": "t0", "tokens": [3, 1, 4],
//!             "origins": [0, 0, 1], "logprobs": [null, null, -0.25],
//!             "turns": [{"start": 2, "end": 3, "role": "Assistant"}]}],
//!  "rewards": [1.0]}
//! ```
//!
//! `origins` marks prompt (0) versus generated (1) tokens; `logprobs` holds
//! the rollout log-probability exactly where `origins` is 1. `vocab_size` is
//! optional and defaults to one past the largest token id in the record.
//! Optional per-call `train_logprobs` / `teacher_logprobs` carry the second
//! policy's values when the producer already has them; `parent_hint` is
//! advisory scaffold metadata and never affects merging.
//!
//! In strict mode unknown fields reject the record; otherwise they are
//! collected as warnings. Parse errors carry 1-based line numbers.

use crate::trajectory::{LinearCall, Role, RolloutGroup, TaskSpec, TokenEvent, TurnSpan};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown field {field:?} (strict mode)")]
    UnknownField { line: usize, field: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Raw wire form of one call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CallRecord {
    pub call_id: String,
    pub tokens: Vec<u32>,
    pub origins: Vec<u8>,
    pub logprobs: Vec<Option<f64>>,
    pub turns: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_hint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_logprobs: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_logprobs: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TurnRecord {
    pub start: usize,
    pub end: usize,
    pub role: Role,
}

/// Raw wire form of one task line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: TaskSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<u32>,
    pub calls: Vec<CallRecord>,
    pub rewards: Vec<f64>,
}

/// A parsed task with validated calls, ready for tree building.
#[derive(Debug, Clone)]
pub struct ParsedTask {
    pub line: usize,
    pub record: TaskRecord,
    pub group: RolloutGroup,
    /// Aligned with `group.trajectories`.
    pub train_logprobs: Vec<Option<Vec<Option<f64>>>>,
    pub teacher_logprobs: Vec<Option<Vec<Option<f64>>>>,
}

/// Output of a parse run: tasks plus any lenient-mode warnings.
#[derive(Debug, Default)]
pub struct ParseOutcome {
    pub tasks: Vec<ParsedTask>,
    pub warnings: Vec<String>,
}

const TASK_FIELDS: &[&str] = &["task", "vocab_size", "calls", "rewards"];
const CALL_FIELDS: &[&str] = &[
    "call_id",
    "tokens",
    "origins",
    "logprobs",
    "turns",
    "parent_hint",
    "train_logprobs",
    "teacher_logprobs",
];

fn check_fields(
    value: &Value,
    known: &[&str],
    line: usize,
    strict: bool,
    context: &str,
    warnings: &mut Vec<String>,
) -> Result<(), RecordError> {
    if let Value::Object(map) = value {
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                if strict {
                    return Err(RecordError::UnknownField {
                        line,
                        field: format!("{context}{key}"),
                    });
                }
                warnings.push(format!("line {line}: ignoring unknown field {context}{key}"));
            }
        }
    }
    Ok(())
}

fn strip_unknown(value: &mut Value, known: &[&str]) {
    if let Value::Object(map) = value {
        map.retain(|k, _| known.contains(&k.as_str()));
    }
}

/// Parse one record line into a validated task.
pub fn parse_task_line(
    text: &str,
    line: usize,
    strict: bool,
    warnings: &mut Vec<String>,
) -> Result<ParsedTask, RecordError> {
    let mut value: Value = serde_json::from_str(text)
        .map_err(|e| RecordError::Parse { line, message: e.to_string() })?;
    check_fields(&value, TASK_FIELDS, line, strict, "", warnings)?;
    if let Some(calls) = value.get("calls").and_then(Value::as_array) {
        for call in calls {
            check_fields(call, CALL_FIELDS, line, strict, "calls.", warnings)?;
        }
    }
    // Lenient mode drops unknown keys before typed deserialization.
    strip_unknown(&mut value, TASK_FIELDS);
    if let Some(calls) = value.get_mut("calls").and_then(Value::as_array_mut) {
        for call in calls {
            strip_unknown(call, CALL_FIELDS);
        }
    }
    let record: TaskRecord = serde_json::from_value(value)
        .map_err(|e| RecordError::Parse { line, message: e.to_string() })?;

    record.task.validate().map_err(|e| RecordError::Invalid { line, message: e.to_string() })?;
    if record.calls.is_empty() {
        return Err(RecordError::Invalid { line, message: "record has no calls".into() });
    }
    if record.calls.len() != record.rewards.len() {
        return Err(RecordError::Invalid {
            line,
            message: format!(
                "{} calls but {} rewards; each trajectory needs its own reward slot",
                record.calls.len(),
                record.rewards.len()
            ),
        });
    }

    let vocab_size = match record.vocab_size {
        Some(v) => v,
        None => record
            .calls
            .iter()
            .flat_map(|c| c.tokens.iter().copied())
            .max()
            .map(|m| m + 1)
            .unwrap_or(1),
    };

    let mut trajectories = Vec::with_capacity(record.calls.len());
    let mut train_logprobs = Vec::with_capacity(record.calls.len());
    let mut teacher_logprobs = Vec::with_capacity(record.calls.len());
    for call in &record.calls {
        let n = call.tokens.len();
        if call.origins.len() != n || call.logprobs.len() != n {
            return Err(RecordError::Invalid {
                line,
                message: format!(
                    "call {}: tokens/origins/logprobs lengths differ ({n}/{}/{})",
                    call.call_id,
                    call.origins.len(),
                    call.logprobs.len()
                ),
            });
        }
        let mut tokens = Vec::with_capacity(n);
        for i in 0..n {
            let event = match call.origins[i] {
                0 => {
                    if call.logprobs[i].is_some() {
                        return Err(RecordError::Invalid {
                            line,
                            message: format!(
                                "call {}: prompt token {i} carries a logprob",
                                call.call_id
                            ),
                        });
                    }
                    TokenEvent::prompt(call.tokens[i])
                }
                1 => match call.logprobs[i] {
                    Some(lp) => TokenEvent::generated(call.tokens[i], lp),
                    None => {
                        return Err(RecordError::Invalid {
                            line,
                            message: format!(
                                "call {}: generated token {i} lacks a logprob",
                                call.call_id
                            ),
                        })
                    }
                },
                other => {
                    return Err(RecordError::Invalid {
                        line,
                        message: format!(
                            "call {}: origin {other} at token {i} is not 0 or 1",
                            call.call_id
                        ),
                    })
                }
            };
            tokens.push(event);
        }
        let turns: Vec<TurnSpan> =
            call.turns.iter().map(|t| TurnSpan::new(t.start, t.end, t.role)).collect();
        let mut linear = LinearCall::new(call.call_id.clone(), vocab_size, tokens, turns)
            .map_err(|e| RecordError::Invalid { line, message: e.to_string() })?;
        if let Some(hint) = &call.parent_hint {
            linear = linear.with_parent_hint(hint.clone());
        }
        for (name, extra) in [
            ("train_logprobs", &call.train_logprobs),
            ("teacher_logprobs", &call.teacher_logprobs),
        ] {
            if let Some(values) = extra {
                if values.len() != n {
                    return Err(RecordError::Invalid {
                        line,
                        message: format!(
                            "call {}: {name} has {} entries for {n} tokens",
                            call.call_id,
                            values.len()
                        ),
                    });
                }
            }
        }
        train_logprobs.push(call.train_logprobs.clone());
        teacher_logprobs.push(call.teacher_logprobs.clone());
        trajectories.push(linear);
    }

    let group =
        RolloutGroup { task: record.task.clone(), trajectories, rewards: record.rewards.clone() };
    Ok(ParsedTask { line, record, group, train_logprobs, teacher_logprobs })
}

/// Parse a whole record stream.
pub fn parse_records<R: BufRead>(reader: R, strict: bool) -> Result<ParseOutcome, RecordError> {
    let mut outcome = ParseOutcome::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let task = parse_task_line(&text, line_no, strict, &mut outcome.warnings)?;
        outcome.tasks.push(task);
    }
    Ok(outcome)
}

/// Serialize one task record as a single JSON line.
pub fn write_task_line<W: Write>(writer: &mut W, record: &TaskRecord) -> Result<(), RecordError> {
    let json = serde_json::to_string(record)
        .map_err(|e| RecordError::Invalid { line: 0, message: e.to_string() })?;
    writeln!(writer, "{json}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::ScaffoldSpec;

    fn sample_line() -> String {
        r#"{"task":{"env_id":"e","tools":["bash"],"scaffold":{"name":"s","system_prompt":"p"},"instruction":"do","verifier_id":"v"},"vocab_size":8,"calls":[{"call_id":"c0","tokens":[3,1,4],"origins":[0,0,1],"logprobs":[null,null,-0.25],"turns":[{"start":2,"end":3,"role":"Assistant"}]}],"rewards":[1.0]}"#
            .to_string()
    }

    #[test]
    fn parses_valid_line() {
        let mut warnings = Vec::new();
        let task = parse_task_line(&sample_line(), 1, true, &mut warnings).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(task.group.trajectories.len(), 1);
        assert_eq!(task.group.trajectories[0].tokens.len(), 3);
        assert_eq!(task.group.rewards, vec![1.0]);
    }

    #[test]
    fn unknown_field_rejected_in_strict_mode() {
        let line = sample_line().replace("\"rewards\"", "\"mystery\":1,\"rewards\"");
        let mut warnings = Vec::new();
        let err = parse_task_line(&line, 3, true, &mut warnings).unwrap_err();
        assert!(matches!(err, RecordError::UnknownField { line: 3, .. }));
        // Lenient mode keeps the record and warns.
        let task = parse_task_line(&line, 3, false, &mut warnings);
        assert!(task.is_ok());
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("mystery"));
    }

    #[test]
    fn malformed_json_names_line() {
        let reader =
            std::io::Cursor::new(format!("{}\n{}\nnot json\n", sample_line(), sample_line()));
        let err = parse_records(reader, true).unwrap_err();
        match err {
            RecordError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn reward_count_must_match_calls() {
        let line = sample_line().replace("[1.0]", "[1.0,0.5]");
        let mut warnings = Vec::new();
        let err = parse_task_line(&line, 1, true, &mut warnings).unwrap_err();
        assert!(matches!(err, RecordError::Invalid { .. }));
    }

    #[test]
    fn prompt_token_with_logprob_rejected() {
        let line = sample_line().replace("[null,null,-0.25]", "[-0.5,null,-0.25]");
        let mut warnings = Vec::new();
        assert!(parse_task_line(&line, 1, true, &mut warnings).is_err());
    }

    #[test]
    fn vocab_size_defaults_to_max_token_plus_one() {
        let line = sample_line().replace("\"vocab_size\":8,", "");
        let mut warnings = Vec::new();
        let task = parse_task_line(&line, 1, true, &mut warnings).unwrap();
        assert_eq!(task.group.trajectories[0].vocab_size, 5);
    }

    #[test]
    fn roundtrip_write_then_parse() {
        let record = TaskRecord {
            task: TaskSpec {
                env_id: "e".into(),
                tools: vec!["bash".into()],
                scaffold: ScaffoldSpec { name: "s".into(), system_prompt: "p".into() },
                instruction: "do".into(),
                verifier_id: "v".into(),
            },
            vocab_size: Some(8),
            calls: vec![CallRecord {
                call_id: "c0".into(),
                tokens: vec![3, 1, 4],
                origins: vec![0, 0, 1],
                logprobs: vec![None, None, Some(-0.25)],
                turns: vec![TurnRecord { start: 2, end: 3, role: Role::Assistant }],
                parent_hint: None,
                train_logprobs: Some(vec![None, None, Some(-0.3)]),
                teacher_logprobs: None,
            }],
            rewards: vec![1.0],
        };
        let mut buf = Vec::new();
        write_task_line(&mut buf, &record).unwrap();
        let outcome = parse_records(std::io::Cursor::new(buf), true).unwrap();
        assert_eq!(outcome.tasks.len(), 1);
        let t = &outcome.tasks[0];
        assert_eq!(t.train_logprobs[0].as_ref().unwrap()[2], Some(-0.3));
    }
}
