/// Sorted, de-duplicated binary feature names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureVector {
    pub features: Vec<String>,
}

impl FeatureVector {
    pub fn contains(&self, f: &str) -> bool {
        self.features.binary_search_by(|x| x.as_str().cmp(f)).is_ok()
    }
}

/// Length buckets 1..=5, then 6 for anything longer.
pub fn length_bucket(chars: usize) -> usize {
    chars.clamp(1, 6)
}

fn word_features(out: &mut Vec<String>, offset: i32, word: &str) {
    let lower = word.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    for c in &chars {
        out.push(format!("{offset}:{c}"));
    }
    let padded: Vec<char> = std::iter::once('^').chain(chars.iter().copied()).chain(['$']).collect();
    for n in 2..=4 {
        for w in padded.windows(n) {
            out.push(format!("{offset}:{}", w.iter().collect::<String>()));
        }
    }
    out.push(format!("{offset}:len={}", length_bucket(chars.len())));
    if chars.iter().any(|c| c.is_ascii_digit()) {
        out.push(format!("{offset}:digit"));
    }
    if chars.iter().any(|c| !c.is_alphanumeric()) {
        out.push(format!("{offset}:special"));
    }
}

/// Features of the previous, current and next word, each prefixed by its
/// offset; positions outside the query contribute a BOS/EOS dummy.
pub fn extract_features(words: &[&str], position: usize) -> FeatureVector {
    assert!(position < words.len(), "position {position} outside query of {}", words.len());
    let mut out = vec!["bias".to_string()];
    for offset in [-1i32, 0, 1] {
        let i = position as i64 + offset as i64;
        if i < 0 {
            out.push(format!("{offset}:<BOS>"));
        } else if i as usize >= words.len() {
            out.push(format!("{offset}:<EOS>"));
        } else {
            word_features(&mut out, offset, words[i as usize]);
        }
    }
    out.sort();
    out.dedup();
    FeatureVector { features: out }
}
