//! Line-oriented `key = value` files with `[section]` headers.
//!
//! Used for both the controller configuration and simulator scenarios.
//! Comments start with `#` or `;` at the beginning of a line. Keys may repeat
//! within a section; consumers decide whether that is meaningful.

use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::controller::ControllerConfig;
use crate::cpulist::parse_cpulist;
use crate::telemetry::{DiscoveryConfig, ThreadClassifier, DEFAULT_MARKER, DEFAULT_RING_CAPACITY};
use crate::CoreSet;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: [{section}] {key}: {msg}")]
    Value {
        line: usize,
        section: String,
        key: String,
        msg: String,
    },
    #[error("[{section}]: {msg}")]
    Missing { section: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    /// Header text between the brackets, whitespace-normalized.
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    /// First word of the header (`vm` for `[vm web]`).
    pub fn kind(&self) -> &str {
        self.name.split_whitespace().next().unwrap_or("")
    }

    /// Rest of the header after the first word.
    pub fn label(&self) -> &str {
        self.name[self.kind().len()..].trim()
    }

    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().rev().find(|e| e.key == key)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse::<T>().map(Some).map_err(|err| self.value_error(e, err.to_string())),
        }
    }

    pub fn value_error(&self, e: &Entry, msg: impl Into<String>) -> ConfigError {
        ConfigError::Value {
            line: e.line,
            section: self.name.clone(),
            key: e.key.clone(),
            msg: msg.into(),
        }
    }

    /// Rejects keys outside `known`.
    pub fn check_keys(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.entries.iter().find(|e| !known.contains(&e.key.as_str())) {
            Some(e) => Err(self.value_error(e, format!("unknown key (expected one of {})", known.join(", ")))),
            None => Ok(()),
        }
    }
}

/// A parsed file. Entries before the first header land in a section named "".
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut sections = vec![Section {
            name: String::new(),
            line: 0,
            entries: Vec::new(),
        }];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') || t.starts_with(';') {
                continue;
            }
            if let Some(rest) = t.strip_prefix('[') {
                let Some(inner) = rest.strip_suffix(']') else {
                    return Err(ConfigError::Syntax {
                        line,
                        msg: format!("unterminated section header {t:?}"),
                    });
                };
                let name = inner.split_whitespace().collect::<Vec<_>>().join(" ");
                if name.is_empty() {
                    return Err(ConfigError::Syntax {
                        line,
                        msg: "empty section name".into(),
                    });
                }
                sections.push(Section {
                    name,
                    line,
                    entries: Vec::new(),
                });
                continue;
            }
            let Some((k, v)) = t.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("expected `key = value`, got {t:?}"),
                });
            };
            let key = k.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    msg: "empty key".into(),
                });
            }
            sections.last_mut().expect("root section").entries.push(Entry {
                key: key.to_string(),
                value: v.trim().to_string(),
                line,
            });
        }
        Ok(Document { sections })
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn root(&self) -> &Section {
        &self.sections[0]
    }
}

/// Which actuator the daemon uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Cgroup,
    Affinity,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cgroup" => Ok(BackendKind::Cgroup),
            "affinity" => Ok(BackendKind::Affinity),
            _ => Err(format!("unknown backend {s:?} (cgroup or affinity)")),
        }
    }
}

/// Complete daemon configuration with defaults for every key.
#[derive(Debug, Clone)]
pub struct AppConfig {
    pub controller: ControllerConfig,
    pub discovery: DiscoveryConfig,
    pub procroot: PathBuf,
    pub cgroup_root: PathBuf,
    pub slice_template: String,
    pub backend: BackendKind,
    /// Small cores; when absent the daemon requires `--small`.
    pub small_cores: Option<CoreSet>,
    pub decision_log: Option<PathBuf>,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            controller: ControllerConfig::default(),
            discovery: DiscoveryConfig::default(),
            procroot: PathBuf::from("/proc"),
            cgroup_root: PathBuf::from("/sys/fs/cgroup"),
            slice_template: crate::actuator::DEFAULT_SLICE_TEMPLATE.to_string(),
            backend: BackendKind::Cgroup,
            small_cores: None,
            decision_log: None,
        }
    }
}

impl AppConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let doc = Document::parse(text)?;
        let mut cfg = AppConfig::default();
        for s in &doc.sections {
            match s.name.as_str() {
                "" => {
                    if let Some(e) = s.entries.first() {
                        return Err(ConfigError::Syntax {
                            line: e.line,
                            msg: "entry outside any section".into(),
                        });
                    }
                }
                "controller" => {
                    s.check_keys(&[
                        "l1",
                        "l1_scale",
                        "measure_window",
                        "oscillation_limit",
                        "tick_period",
                        "stable_window",
                        "stable_warmup",
                    ])?;
                    let c = &mut cfg.controller;
                    if let Some(e) = s.get("l1") {
                        c.l1 = match e.value.as_str() {
                            "adaptive" => None,
                            v => Some(v.parse().map_err(|err: std::num::ParseFloatError| s.value_error(e, err.to_string()))?),
                        };
                    }
                    set(&mut c.l1_scale, s.parse("l1_scale")?);
                    set(&mut c.measure_window, s.parse("measure_window")?);
                    set(&mut c.oscillation_limit, s.parse("oscillation_limit")?);
                    set(&mut c.tick_period, s.parse("tick_period")?);
                    set(&mut c.stable_window, s.parse("stable_window")?);
                    set(&mut c.stable_warmup, s.parse("stable_warmup")?);
                }
                "thresholds" => {
                    s.check_keys(&["delay", "delay_floor", "util", "util_floor"])?;
                    let t = &mut cfg.controller.thresholds;
                    set(&mut t.delay_threshold, s.parse("delay")?);
                    set(&mut t.delay_floor, s.parse("delay_floor")?);
                    set(&mut t.util_threshold, s.parse("util")?);
                    set(&mut t.util_floor, s.parse("util_floor")?);
                }
                "telemetry" => {
                    s.check_keys(&["procroot", "marker", "allow", "vcpu_pattern", "ring_capacity"])?;
                    set(&mut cfg.procroot, s.get("procroot").map(|e| PathBuf::from(&e.value)));
                    set(&mut cfg.discovery.marker, s.get("marker").map(|e| e.value.clone()));
                    if let Some(e) = s.get("allow") {
                        cfg.discovery.allow = e
                            .value
                            .split(',')
                            .map(str::trim)
                            .filter(|v| !v.is_empty())
                            .map(String::from)
                            .collect();
                    }
                    if let Some(e) = s.get("vcpu_pattern") {
                        cfg.discovery.classifier =
                            ThreadClassifier::new(&e.value).map_err(|err| s.value_error(e, err.to_string()))?;
                    }
                    set(&mut cfg.discovery.ring_capacity, s.parse("ring_capacity")?);
                }
                "topology" => {
                    s.check_keys(&["small"])?;
                    if let Some(e) = s.get("small") {
                        cfg.small_cores =
                            Some(parse_cpulist(&e.value).map_err(|err| s.value_error(e, err.to_string()))?);
                    }
                }
                "actuator" => {
                    s.check_keys(&["backend", "cgroup_root", "slice_template"])?;
                    set(&mut cfg.backend, s.parse("backend")?);
                    set(&mut cfg.cgroup_root, s.get("cgroup_root").map(|e| PathBuf::from(&e.value)));
                    set(&mut cfg.slice_template, s.get("slice_template").map(|e| e.value.clone()));
                }
                "log" => {
                    s.check_keys(&["decisions"])?;
                    cfg.decision_log = s.get("decisions").map(|e| PathBuf::from(&e.value));
                }
                other => {
                    return Err(ConfigError::Syntax {
                        line: s.line,
                        msg: format!("unknown section [{other}]"),
                    })
                }
            }
        }
        cfg.controller.validate().map_err(|e| ConfigError::Missing {
            section: "controller".into(),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// The documented defaults, as a config file.
pub fn default_config_text() -> String {
    let c = ControllerConfig::default();
    let t = &c.thresholds;
    format!(
        "[controller]\n\
         # fixed slope in ns/s per core, or `adaptive`\n\
         l1 = adaptive\n\
         l1_scale = {}\n\
         measure_window = {}\n\
         oscillation_limit = {}\n\
         tick_period = {}\n\
         stable_window = {}\n\
         stable_warmup = {}\n\
         \n\
         [thresholds]\n\
         delay = {}\n\
         delay_floor = {}\n\
         util = {}\n\
         util_floor = {}\n\
         \n\
         [telemetry]\n\
         procroot = /proc\n\
         marker = {DEFAULT_MARKER}\n\
         allow =\n\
         vcpu_pattern = {}\n\
         ring_capacity = {DEFAULT_RING_CAPACITY}\n\
         \n\
         [topology]\n\
         small = 0-3\n\
         \n\
         [actuator]\n\
         backend = cgroup\n\
         cgroup_root = /sys/fs/cgroup\n\
         slice_template = {}\n",
        c.l1_scale,
        c.measure_window,
        c.oscillation_limit,
        c.tick_period,
        c.stable_window,
        c.stable_warmup,
        t.delay_threshold,
        t.delay_floor,
        t.util_threshold,
        t.util_floor,
        crate::telemetry::DEFAULT_VCPU_PATTERN,
        crate::actuator::DEFAULT_SLICE_TEMPLATE,
    )
}
