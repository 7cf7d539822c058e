//! Kernel cpulist text (`0-2,5,7-9`), as used by `cpuset.cpus` and
//! `/sys/devices/system/cpu/online`.

use thiserror::Error;

use crate::{CoreId, CoreSet};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CpulistError {
    #[error("empty cpuset")]
    EmptyCpuset,
    #[error("malformed cpulist {0:?}")]
    Malformed(String),
}

/// Formats a core set as canonical cpulist text: ascending, maximal ranges,
/// comma separated.
pub fn format_cpulist(cores: &CoreSet) -> Result<String, CpulistError> {
    if cores.is_empty() {
        return Err(CpulistError::EmptyCpuset);
    }
    let mut parts = Vec::new();
    let mut iter = cores.iter().copied();
    let mut start = iter.next().unwrap();
    let mut end = start;
    for c in iter {
        if c == end + 1 {
            end = c;
            continue;
        }
        parts.push(range_text(start, end));
        start = c;
        end = c;
    }
    parts.push(range_text(start, end));
    Ok(parts.join(","))
}

fn range_text(start: CoreId, end: CoreId) -> String {
    if start == end {
        start.to_string()
    } else {
        format!("{start}-{end}")
    }
}

/// Parses cpulist text. Whitespace around the text and around each element is
/// ignored; an empty string yields an empty set.
pub fn parse_cpulist(text: &str) -> Result<CoreSet, CpulistError> {
    let mut out = CoreSet::new();
    let text = text.trim();
    if text.is_empty() {
        return Ok(out);
    }
    let bad = || CpulistError::Malformed(text.to_string());
    for part in text.split(',') {
        let part = part.trim();
        match part.split_once('-') {
            Some((a, b)) => {
                let a: CoreId = a.trim().parse().map_err(|_| bad())?;
                let b: CoreId = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => {
                out.insert(part.parse().map_err(|_| bad())?);
            }
        }
    }
    Ok(out)
}
