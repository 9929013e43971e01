//! Progress lines on stderr, plain or one JSON object per line.

use serde_json::{json, Value};

#[derive(Clone, Copy, Debug)]
pub struct Reporter {
    pub json: bool,
    pub quiet: bool,
}

impl Reporter {
    pub fn event(&self, stage: &str, message: &str, fields: Value) {
        if self.quiet {
            return;
        }
        if self.json {
            let mut line = json!({ "stage": stage, "message": message });
            if let (Some(obj), Value::Object(extra)) = (line.as_object_mut(), fields) {
                obj.extend(extra);
            }
            eprintln!("{line}");
        } else if fields.as_object().is_some_and(|o| !o.is_empty()) {
            eprintln!("[{stage}] {message} {fields}");
        } else {
            eprintln!("[{stage}] {message}");
        }
    }

    pub fn info(&self, stage: &str, message: &str) {
        self.event(stage, message, Value::Null);
    }
}
