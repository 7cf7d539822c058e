use regex::Regex;

use super::TelemetryError;
use crate::ThreadClass;

/// QEMU names vCPU threads `CPU <n>/KVM`.
pub const DEFAULT_VCPU_PATTERN: &str = r"CPU \d+/KVM";

/// Name-based vCPU/emulator classifier. The pattern is anchored at both ends.
#[derive(Debug, Clone)]
pub struct ThreadClassifier {
    pattern: Regex,
    source: String,
}

impl ThreadClassifier {
    pub fn new(pattern: &str) -> Result<Self, TelemetryError> {
        let anchored = format!("^(?:{pattern})$");
        let regex = Regex::new(&anchored)
            .map_err(|e| TelemetryError::InvalidPattern(format!("{pattern}: {e}")))?;
        Ok(ThreadClassifier {
            pattern: regex,
            source: pattern.to_string(),
        })
    }

    pub fn pattern(&self) -> &str {
        &self.source
    }

    pub fn classify(&self, name: &str) -> ThreadClass {
        classify_thread(name, self)
    }
}

impl Default for ThreadClassifier {
    fn default() -> Self {
        ThreadClassifier::new(DEFAULT_VCPU_PATTERN).expect("default pattern compiles")
    }
}

/// vCPU when the (newline-trimmed) name matches, emulator otherwise.
pub fn classify_thread(name: &str, classifier: &ThreadClassifier) -> ThreadClass {
    let name = name.trim_end_matches(['\n', '\r']);
    if classifier.pattern.is_match(name) {
        ThreadClass::Vcpu
    } else {
        ThreadClass::Emulator
    }
}
