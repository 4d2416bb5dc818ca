//! Metadata annotation and the quality admission gate.

use serde_json::Value;
use thiserror::Error;

use crate::audit::AuditRecord;
use crate::corpus::detect_language;
use crate::gateway::{Gateway, GatewayError, ModelRequest, SamplingParams};
use crate::model::{
    qa_violations, solution_violations, Ability, Language, MetadataRecord, Sample,
    UnannotatedSample, ADMISSION_QUALITY, SCORE_MAX, SCORE_MIN,
};
use crate::template::{TemplateName, TemplateSet};

pub const MAX_TASK_DEPTH: usize = 3;

/// Canonical level-1 task labels.
pub const TASK_DOMAINS: [&str; 6] = [
    "Knowledge QA",
    "NLP",
    "Analysis & Interpretation",
    "Math",
    "Compliance & Security",
    "Text Generation",
];

const ALIASES: &[(&str, &str)] = &[
    ("knowledge q&a", "Knowledge QA"),
    ("knowledge question answering", "Knowledge QA"),
    ("natural language processing", "NLP"),
    ("analysis and interpretation", "Analysis & Interpretation"),
    ("analysis", "Analysis & Interpretation"),
    ("mathematics", "Math"),
    ("compliance and security", "Compliance & Security"),
    ("compliance", "Compliance & Security"),
    ("text creation", "Text Generation"),
];

/// The canonical spelling of a level-1 label, accepting case and a few
/// common variants.
pub fn canonical_domain(label: &str) -> Option<&'static str> {
    let key = label.trim().to_lowercase();
    TASK_DOMAINS
        .into_iter()
        .find(|d| d.to_lowercase() == key)
        .or_else(|| ALIASES.iter().find(|(a, _)| *a == key).map(|(_, d)| *d))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotateError {
    #[error("malformed annotation: {0}")]
    MalformedAnnotation(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

fn malformed(msg: impl Into<String>) -> AnnotateError {
    AnnotateError::MalformedAnnotation(msg.into())
}

fn score(obj: &serde_json::Map<String, Value>, key: &str) -> Result<u8, AnnotateError> {
    let v = obj.get(key).ok_or_else(|| malformed(format!("missing `{key}`")))?;
    let n = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .ok_or_else(|| malformed(format!("`{key}` is not a number")))?;
    if n.fract() != 0.0 || n < f64::from(SCORE_MIN) || n > f64::from(SCORE_MAX) {
        return Err(malformed(format!(
            "`{key}` must be an integer in [{SCORE_MIN}, {SCORE_MAX}], got {n}"
        )));
    }
    Ok(n as u8)
}

fn text_field(obj: &serde_json::Map<String, Value>, key: &str) -> Result<String, AnnotateError> {
    match obj.get(key) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        _ => Err(malformed(format!("`{key}` must be a non-empty string"))),
    }
}

/// Split a task hierarchy given as a list or as an arrow-separated string.
pub fn parse_task_path(v: &Value) -> Result<Vec<String>, AnnotateError> {
    let labels: Vec<String> = match v {
        Value::Array(items) => items
            .iter()
            .map(|i| {
                i.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| malformed("task labels must be strings"))
            })
            .collect::<Result<_, _>>()?,
        Value::String(s) => {
            let unified = s.replace("->", "→").replace('>', "→");
            if unified.trim().is_empty() {
                Vec::new()
            } else {
                unified.split('→').map(str::to_string).collect()
            }
        }
        _ => return Err(malformed("`task` must be a list or a string")),
    };
    let labels: Vec<String> = labels.iter().map(|l| l.trim().to_string()).collect();
    if labels.is_empty() {
        return Err(malformed("empty task path"));
    }
    if labels.len() > MAX_TASK_DEPTH {
        return Err(malformed(format!(
            "task path deeper than {MAX_TASK_DEPTH}: {}",
            labels.len()
        )));
    }
    if labels.iter().any(String::is_empty) {
        return Err(malformed("empty task label"));
    }
    let mut labels = labels;
    labels[0] = canonical_domain(&labels[0])
        .ok_or_else(|| malformed(format!("unknown level-1 task `{}`", labels[0])))?
        .to_string();
    Ok(labels)
}

/// Parse an annotator reply. The JSON object may be wrapped in prose or a
/// code fence; everything from the first `{` to the last `}` is parsed.
pub fn parse_annotation(text: &str) -> Result<MetadataRecord, AnnotateError> {
    let (start, end) = match (text.find('{'), text.rfind('}')) {
        (Some(s), Some(e)) if s < e => (s, e),
        _ => return Err(malformed("no JSON object in reply")),
    };
    let v: Value =
        serde_json::from_str(&text[start..=end]).map_err(|e| malformed(e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| malformed("reply is not an object"))?;

    let ability_text = text_field(obj, "ability")?;
    let ability = Ability::parse(&ability_text)
        .ok_or_else(|| malformed(format!("unknown ability `{ability_text}`")))?;
    let lang_text = text_field(obj, "language")?;
    let language = Language::from_code(&lang_text)
        .ok_or_else(|| malformed(format!("unknown language `{lang_text}`")))?;
    let task = obj.get("task").ok_or_else(|| malformed("missing `task`"))?;
    let record = MetadataRecord {
        content: text_field(obj, "content")?,
        ability,
        complexity: score(obj, "complexity")?,
        quality: score(obj, "quality")?,
        language,
        task_path: parse_task_path(task)?,
    };
    debug_assert!(record.violations().is_empty());
    Ok(record)
}

/// Ask the annotator backend for all six metadata dimensions.
pub async fn annotate(
    sample: &UnannotatedSample,
    backend: &Gateway,
    templates: &TemplateSet,
) -> Result<MetadataRecord, AnnotateError> {
    if !qa_violations(&sample.qa).is_empty() || !solution_violations(&sample.solution).is_empty() {
        return Err(AnnotateError::Precondition(format!(
            "sample {} does not validate",
            sample.qa.id
        )));
    }
    let trace = sample.solution.trace.rendered();
    let prompt = templates
        .render(
            TemplateName::Annotate,
            &[
                ("question", &sample.qa.question),
                ("trace", &trace),
                ("answer", &sample.solution.final_answer),
            ],
        )
        .map_err(|e| AnnotateError::Precondition(e.to_string()))?;
    let req = ModelRequest::new(prompt).sampling(SamplingParams {
        temperature: 0.0,
        ..SamplingParams::default()
    });
    let resp = backend.complete(&req).await?;
    parse_annotation(&resp.answer_text)
}

/// Audit record when the script-based detector disagrees with the
/// annotated language.
pub fn language_flag(sample: &UnannotatedSample, record: &MetadataRecord) -> Option<AuditRecord> {
    let detected = detect_language(&sample.qa.question);
    (detected != record.language).then(|| {
        AuditRecord::new(
            "annotate",
            &sample.qa.id,
            "language_disagreement",
            format!("annotated {}, detected {}", record.language, detected),
        )
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gate {
    pub admitted: Vec<Sample>,
    pub excluded: Vec<Sample>,
}

/// Admit samples with quality at or above the admission threshold.
pub fn quality_gate(samples: Vec<Sample>) -> Gate {
    let (admitted, excluded) = samples
        .into_iter()
        .partition(|s| s.metadata.quality >= ADMISSION_QUALITY);
    Gate { admitted, excluded }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::gateway::scripted::ScriptedBackend;
    use crate::gateway::BackendConfig;
    use crate::model::{fixtures, validate_sample};
    use proptest::prelude::*;
    use serde_json::json;

    const GOOD: &str = r#"Here you go:
```json
{"content": "stock", "ability": "reasoning", "complexity": 6, "quality": 9,
 "language": "en", "task": "Knowledge QA → Concept Explanation"}
```"#;

    fn gw(text: &str) -> Gateway {
        Gateway::new(Arc::new(ScriptedBackend::fixed(text)), BackendConfig::default()).unwrap()
    }

    fn unannotated() -> UnannotatedSample {
        let s = fixtures::sample("fin:1", 9);
        UnannotatedSample {
            qa: s.qa,
            solution: s.solution,
        }
    }

    #[tokio::test]
    async fn fixture_with_six_fields() {
        let rec = annotate(&unannotated(), &gw(GOOD), &TemplateSet::builtin()).await.unwrap();
        assert_eq!(rec, fixtures::metadata(9));
    }

    #[tokio::test]
    async fn out_of_range_and_empty_task_are_malformed() {
        let t = TemplateSet::builtin();
        let bad = GOOD.replace("\"complexity\": 6", "\"complexity\": 11");
        assert!(matches!(
            annotate(&unannotated(), &gw(&bad), &t).await,
            Err(AnnotateError::MalformedAnnotation(_))
        ));
        let bad = GOOD.replace("\"Knowledge QA → Concept Explanation\"", "[]");
        assert!(matches!(
            annotate(&unannotated(), &gw(&bad), &t).await,
            Err(AnnotateError::MalformedAnnotation(_))
        ));
    }

    #[test]
    fn task_path_forms() {
        assert_eq!(
            parse_task_path(&json!("Text Creation → Marketing Copy Generation")).unwrap(),
            ["Text Generation", "Marketing Copy Generation"]
        );
        assert_eq!(parse_task_path(&json!("math -> bonds")).unwrap(), ["Math", "bonds"]);
        assert_eq!(parse_task_path(&json!(["NLP"])).unwrap(), ["NLP"]);
        assert!(parse_task_path(&json!("NLP > a > b > c")).is_err());
        assert!(parse_task_path(&json!("Cooking")).is_err());
        assert!(parse_task_path(&json!("NLP →  ")).is_err());
        assert!(parse_task_path(&json!("")).is_err());
    }

    #[test]
    fn scores_must_be_integral() {
        assert_eq!(parse_annotation(&GOOD.replace(": 9,", ": \"9\",")).unwrap().quality, 9);
        assert!(parse_annotation(&GOOD.replace(": 9,", ": 8.5,")).is_err());
        assert!(parse_annotation(&GOOD.replace(": 9,", ": 0,")).is_err());
        assert!(parse_annotation("no json").is_err());
    }

    #[test]
    fn language_cross_check() {
        let s = unannotated();
        let mut rec = fixtures::metadata(9);
        assert!(language_flag(&s, &rec).is_none());
        rec.language = Language::Zh;
        assert!(language_flag(&s, &rec).is_some());
    }

    #[test]
    fn gate_boundary() {
        let g = quality_gate(vec![fixtures::sample("a", 8), fixtures::sample("b", 7)]);
        assert_eq!(g.admitted.len(), 1);
        assert_eq!(g.admitted[0].qa.id, "a");
        assert_eq!(g.excluded[0].qa.id, "b");
    }

    #[test]
    fn gate_hand_count() {
        let qualities = [9, 7, 8, 10, 3, 8, 6, 9, 9, 1, 8, 7, 10, 5, 8, 2, 9, 7, 8, 4];
        let samples: Vec<_> = qualities
            .iter()
            .enumerate()
            .map(|(i, &q)| fixtures::sample(&format!("s:{i}"), q))
            .collect();
        let g = quality_gate(samples);
        assert_eq!((g.admitted.len(), g.excluded.len()), (11, 9));
    }

    proptest! {
        #[test]
        fn gate_is_an_exact_partition(qs in prop::collection::vec(1u8..=10, 0..60)) {
            let samples: Vec<_> = qs.iter().enumerate().map(|(i, &q)| fixtures::sample(&format!("s:{i}"), q)).collect();
            let g = quality_gate(samples.clone());
            prop_assert_eq!(g.admitted.len() + g.excluded.len(), samples.len());
            prop_assert!(g.admitted.iter().all(|s| s.metadata.quality >= 8 && validate_sample(s).is_ok()));
            prop_assert!(g.excluded.iter().all(|s| s.metadata.quality < 8));
            let expected = qs.iter().filter(|&&q| q >= 8).count();
            prop_assert_eq!(g.admitted.len(), expected);
        }
    }
}
