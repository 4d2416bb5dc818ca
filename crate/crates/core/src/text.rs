//! Small text utilities shared across stages.

/// Trim and collapse every internal run of whitespace to a single space.
pub fn normalize_whitespace(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Key used for question identity: lowercased, whitespace-normalized.
pub fn question_key(s: &str) -> String {
    normalize_whitespace(&s.to_lowercase())
}

/// Default length function: Unicode scalar count.
pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2A6DF
        | 0x3040..=0x30FF
        | 0xAC00..=0xD7AF)
}

/// Fraction of alphanumeric characters that are CJK ideographs/kana/hangul.
pub fn cjk_ratio(s: &str) -> f64 {
    let mut letters = 0usize;
    let mut cjk = 0usize;
    for c in s.chars() {
        if is_cjk(c) {
            cjk += 1;
            letters += 1;
        } else if c.is_alphanumeric() {
            letters += 1;
        }
    }
    if letters == 0 {
        0.0
    } else {
        cjk as f64 / letters as f64
    }
}

/// Threshold above which text is treated as CJK for tokenization and
/// language detection.
pub const CJK_RATIO_THRESHOLD: f64 = 0.3;

pub fn is_mostly_cjk(s: &str) -> bool {
    cjk_ratio(s) >= CJK_RATIO_THRESHOLD
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_runs_and_edges() {
        assert_eq!(normalize_whitespace("  a \t b\n\nc  "), "a b c");
        assert_eq!(normalize_whitespace(" \n "), "");
    }

    #[test]
    fn question_key_ignores_case_and_spacing() {
        assert_eq!(question_key("What  is\nEBITDA?"), question_key("what is ebitda?"));
    }

    #[test]
    fn cjk_detection() {
        assert!(is_mostly_cjk("什么是市盈率？"));
        assert!(!is_mostly_cjk("What is the P/E ratio?"));
        assert!(is_mostly_cjk("计算 EBITDA 的方法是什么"));
        assert_eq!(cjk_ratio("123 !!"), 0.0);
    }
}
