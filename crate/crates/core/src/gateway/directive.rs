//! CoT length control, realized purely as prompt text.

use serde::{Deserialize, Serialize};

/// Phrase appended to the instruction for medium-length reasoning.
pub const CONCISE_PHRASE: &str = "Be concise";

/// Number of simplified exemplars prepended for short reasoning.
pub const SHORT_EXEMPLAR_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthDirective {
    #[default]
    Long,
    Medium,
    Short,
}

/// Render the user prompt for a directive. `None` if SHORT is requested with
/// fewer than [`SHORT_EXEMPLAR_COUNT`] exemplars available.
pub fn apply(user: &str, directive: LengthDirective, exemplars: &[String]) -> Option<String> {
    match directive {
        LengthDirective::Long => Some(user.to_string()),
        LengthDirective::Medium => Some(format!("{user}\n\n{CONCISE_PHRASE}.")),
        LengthDirective::Short => {
            if exemplars.len() < SHORT_EXEMPLAR_COUNT {
                return None;
            }
            let mut out = String::from("Examples of concise solutions:\n\n");
            for ex in &exemplars[..SHORT_EXEMPLAR_COUNT] {
                out.push_str(ex);
                out.push_str("\n\n");
            }
            out.push_str("Now solve the next problem in the same concise style.\n\n");
            out.push_str(user);
            Some(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("EX{i}")).collect()
    }

    #[test]
    fn long_is_untouched() {
        assert_eq!(apply("Q", LengthDirective::Long, &[]).unwrap(), "Q");
    }

    #[test]
    fn medium_appends_phrase() {
        let p = apply("Q", LengthDirective::Medium, &[]).unwrap();
        assert!(p.starts_with("Q"));
        assert!(p.trim_end().ends_with("Be concise."));
    }

    #[test]
    fn short_prepends_three_exemplars() {
        let p = apply("Q", LengthDirective::Short, &ex(5)).unwrap();
        assert!(p.contains("EX0") && p.contains("EX1") && p.contains("EX2"));
        assert!(!p.contains("EX3"));
        assert!(p.ends_with("Q"));
        assert!(p.find("EX2").unwrap() < p.find("Q").unwrap());
        assert!(apply("Q", LengthDirective::Short, &ex(2)).is_none());
    }
}
