//! Line-delimited dataset files: a `#meta {json}` line, then one JSON
//! object per example.

use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{CorpusError, Dataset, Example, Lang, Metadata, TaskFamily};

pub const META_PREFIX: &str = "#meta ";
const FIELDS: [&str; 6] = ["instruction", "input", "output", "language", "task_family", "template_id"];

pub fn to_jsonl(ds: &Dataset) -> String {
    let mut s = String::new();
    s.push_str(META_PREFIX);
    s.push_str(&serde_json::to_string(&ds.metadata).expect("metadata serializes"));
    s.push('\n');
    for e in &ds.examples {
        s.push_str(&serde_json::to_string(e).expect("example serializes"));
        s.push('\n');
    }
    s
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    fs::write(path, to_jsonl(ds))?;
    Ok(())
}

fn parse_example(line: &str, n: usize) -> Result<Example, CorpusError> {
    let v: Value = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
        line: n,
        message: e.to_string(),
    })?;
    let obj = v.as_object().ok_or_else(|| CorpusError::Malformed {
        line: n,
        message: "expected a JSON object".into(),
    })?;
    for f in FIELDS {
        if !obj.contains_key(f) {
            return Err(CorpusError::MissingField {
                line: n,
                field: f.into(),
            });
        }
    }
    let text = |f: &str| -> Result<String, CorpusError> {
        obj[f].as_str().map(str::to_string).ok_or_else(|| CorpusError::Malformed {
            line: n,
            message: format!("field `{f}` must be a string"),
        })
    };
    let tag = text("language")?;
    let language: Lang = tag
        .parse()
        .map_err(|_| CorpusError::UnknownLanguage { line: n, tag: tag.clone() })?;
    let task_family: TaskFamily = text("task_family")?
        .parse()
        .map_err(|m: String| CorpusError::Malformed { line: n, message: m })?;
    let template_id = obj["template_id"].as_u64().ok_or_else(|| CorpusError::Malformed {
        line: n,
        message: "field `template_id` must be a non-negative integer".into(),
    })?;
    Ok(Example {
        instruction: text("instruction")?,
        input: text("input")?,
        output: text("output")?,
        language,
        task_family,
        template_id,
    })
}

pub fn from_jsonl(text: &str) -> Result<Dataset, CorpusError> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or(CorpusError::Malformed {
        line: 1,
        message: "empty file".into(),
    })?;
    let meta_json = first.strip_prefix(META_PREFIX).ok_or(CorpusError::Malformed {
        line: 1,
        message: format!("first line must start with `{META_PREFIX}`"),
    })?;
    let metadata: Metadata = serde_json::from_str(meta_json).map_err(|e| CorpusError::Malformed {
        line: 1,
        message: e.to_string(),
    })?;
    let mut examples = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        let e = parse_example(line, n)?;
        if !metadata.languages.contains(&e.language) {
            return Err(CorpusError::UnknownLanguage {
                line: n,
                tag: e.language.to_string(),
            });
        }
        examples.push(e);
    }
    let ds = Dataset {
        id: metadata.id.clone(),
        examples,
        metadata,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, CorpusError> {
    from_jsonl(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds() -> Dataset {
        let e = Example {
            instruction: "copy".into(),
            input: "a b .".into(),
            output: "a b".into(),
            language: Lang(0),
            task_family: TaskFamily::Copy,
            template_id: 3,
        };
        Dataset::new("d", vec![e.clone(), Example { template_id: 4, ..e }], 1)
    }

    #[test]
    fn round_trip() {
        let d = ds();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        save_dataset(&d, &p).unwrap();
        assert_eq!(load_dataset(&p).unwrap(), d);
    }

    #[test]
    fn missing_field_names_line_and_field() {
        let text = to_jsonl(&ds()).replace(",\"output\":\"a b\"", "");
        let first_only = {
            let mut ls: Vec<String> = to_jsonl(&ds()).lines().map(String::from).collect();
            ls[2] = text.lines().nth(2).unwrap().to_string();
            ls.join("\n")
        };
        match from_jsonl(&first_only) {
            Err(CorpusError::MissingField { line, field }) => {
                assert_eq!((line, field.as_str()), (3, "output"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn histogram_mismatch_is_integrity_error() {
        let text = to_jsonl(&ds());
        let truncated: Vec<&str> = text.lines().take(2).collect();
        assert!(matches!(
            from_jsonl(&truncated.join("\n")),
            Err(CorpusError::Integrity { .. })
        ));
    }

    #[test]
    fn undeclared_language_rejected() {
        let text = to_jsonl(&ds()).replacen("\"language\":\"L0\"", "\"language\":\"L7\"", 1);
        assert!(matches!(from_jsonl(&text), Err(CorpusError::UnknownLanguage { line: 2, .. })));
        let text = to_jsonl(&ds()).replacen("\"language\":\"L0\"", "\"language\":\"xx\"", 1);
        assert!(matches!(from_jsonl(&text), Err(CorpusError::UnknownLanguage { line: 2, .. })));
    }

    #[test]
    fn bad_json_reports_line() {
        let mut text = to_jsonl(&ds());
        text.push_str("{not json\n");
        assert!(matches!(from_jsonl(&text), Err(CorpusError::Malformed { line: 4, .. })));
    }
}
