//! Task specifications and suite loading.

use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::toolsim::Modality;

const TASK_TYPES: &str = include_str!("../../data/task_types.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RequiredModality {
    Image,
    Video,
    /// At least one image and one video.
    Mixed,
}

impl RequiredModality {
    pub fn includes(self, m: Modality) -> bool {
        match self {
            RequiredModality::Image => m == Modality::Image,
            RequiredModality::Video => m == Modality::Video,
            RequiredModality::Mixed => m.is_visual(),
        }
    }

    pub fn has_video(self) -> bool {
        self != RequiredModality::Image
    }
}

impl fmt::Display for RequiredModality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

fn default_max_steps() -> u32 {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub task_type: String,
    pub query: String,
    pub required_modality: RequiredModality,
    /// Images for Image and Mixed tasks, videos for Video tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_storyboards: Option<u32>,
    #[serde(default)]
    pub consistency: bool,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
}

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("task `{task}`: {reason}")]
    Invalid { task: String, reason: String },
    #[error("line {line}: {reason}")]
    Suite { line: usize, reason: String },
    #[error("cannot read suite: {0}")]
    Io(String),
}

#[derive(Deserialize)]
struct TaskTypes {
    video: Vec<String>,
    image: Vec<String>,
}

fn task_types() -> &'static TaskTypes {
    static TYPES: OnceLock<TaskTypes> = OnceLock::new();
    TYPES.get_or_init(|| serde_json::from_str(TASK_TYPES).expect("shipped task types are valid"))
}

/// The 42 recognized task type names, video types first.
pub fn known_task_types() -> impl Iterator<Item = &'static str> {
    let t = task_types();
    t.video.iter().chain(t.image.iter()).map(String::as_str)
}

impl TaskSpec {
    /// Checks the spec, reporting the first violated invariant.
    pub fn validate(&self) -> Result<(), TaskError> {
        let fail = |reason: &str| {
            Err(TaskError::Invalid {
                task: self.task_id.clone(),
                reason: reason.to_string(),
            })
        };
        if self.task_id.trim().is_empty() {
            return fail("task_id is empty");
        }
        if !known_task_types().any(|t| t.eq_ignore_ascii_case(self.task_type.trim())) {
            return fail(&format!("unknown task_type `{}`", self.task_type));
        }
        if self.required_count.is_none() && self.required_duration_s.is_none() && self.required_storyboards.is_none() {
            return fail("at least one of required_count, required_duration_s, required_storyboards must be set");
        }
        if self.required_count == Some(0) {
            return fail("required_count must be at least 1");
        }
        if self.required_storyboards == Some(0) {
            return fail("required_storyboards must be at least 1");
        }
        if let Some(d) = self.required_duration_s {
            if !(d.is_finite() && d > 0.0) {
                return fail("required_duration_s must be positive");
            }
        }
        if !self.required_modality.has_video()
            && (self.required_duration_s.is_some() || self.required_storyboards.is_some())
        {
            return fail("duration and storyboard requirements need a video modality");
        }
        if self.max_steps < 1 {
            return fail("max_steps must be at least 1");
        }
        Ok(())
    }
}

/// Parses a JSONL suite; blank lines and `#` comments are skipped.
pub fn parse_suite(text: &str) -> Result<Vec<TaskSpec>, TaskError> {
    let mut out: Vec<TaskSpec> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let spec: TaskSpec = serde_json::from_str(trimmed).map_err(|e| TaskError::Suite {
            line: line_no,
            reason: e.to_string(),
        })?;
        spec.validate().map_err(|e| TaskError::Suite {
            line: line_no,
            reason: e.to_string(),
        })?;
        if out.iter().any(|t| t.task_id == spec.task_id) {
            return Err(TaskError::Suite {
                line: line_no,
                reason: format!("duplicate task_id `{}`", spec.task_id),
            });
        }
        out.push(spec);
    }
    Ok(out)
}

pub fn load_suite(path: &Path) -> Result<Vec<TaskSpec>, TaskError> {
    let text = std::fs::read_to_string(path).map_err(|e| TaskError::Io(format!("{}: {e}", path.display())))?;
    parse_suite(&text)
}

const DEFAULT_SUITE: &str = include_str!("../../data/suites/default_suite.jsonl");

/// The shipped 24-task suite.
pub fn default_suite() -> Vec<TaskSpec> {
    parse_suite(DEFAULT_SUITE).expect("shipped suite is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        TaskSpec {
            task_id: "t1".into(),
            task_type: "Marketing posters".into(),
            query: "a poster".into(),
            required_modality: RequiredModality::Image,
            required_count: Some(1),
            required_duration_s: None,
            required_storyboards: None,
            consistency: false,
            max_steps: 50,
        }
    }

    #[test]
    fn forty_two_types() {
        assert_eq!(known_task_types().count(), 42);
    }

    #[test]
    fn validation_names_the_violation() {
        spec().validate().unwrap();
        let mut s = spec();
        s.required_count = None;
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("at least one"), "{err}");

        let mut s = spec();
        s.required_duration_s = Some(5.0);
        assert!(s.validate().unwrap_err().to_string().contains("video"));

        let mut s = spec();
        s.max_steps = 0;
        assert!(s.validate().unwrap_err().to_string().contains("max_steps"));

        let mut s = spec();
        s.task_type = "Cooking".into();
        assert!(s.validate().unwrap_err().to_string().contains("task_type"));
    }

    #[test]
    fn suite_parsing() {
        let line = serde_json::to_string(&spec()).unwrap();
        let text = format!("# comment\n{line}\n\n");
        assert_eq!(parse_suite(&text).unwrap().len(), 1);
        let dup = format!("{line}\n{line}\n");
        assert!(matches!(parse_suite(&dup), Err(TaskError::Suite { line: 2, .. })));
        let no_steps =
            r#"{"task_id":"a","task_type":"Movies","query":"q","required_modality":"Video","required_count":1}"#;
        assert_eq!(parse_suite(no_steps).unwrap()[0].max_steps, 50);
    }

    #[test]
    fn default_suite_has_24_valid_tasks() {
        let suite = default_suite();
        assert_eq!(suite.len(), 24);
        assert!(suite
            .iter()
            .any(|t| t.consistency && t.required_count == Some(1) && t.required_modality == RequiredModality::Image));
        assert!(suite.iter().any(|t| t.required_modality == RequiredModality::Mixed));
    }
}
