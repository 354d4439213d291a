//! Structured text reports: `key = value` lines grouped in `[section]` blocks,
//! plus a list of named pass/fail assertions.

use std::fmt::{self, Display, Write as _};

use crate::stats::Estimate;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportSection {
    pub name: String,
    pub entries: Vec<(String, String)>,
}

impl ReportSection {
    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.entries.push((key.to_string(), value.to_string()));
        self
    }

    /// Writes `key` and `key_se`.
    pub fn estimate(&mut self, key: &str, e: Estimate) -> &mut Self {
        self.put(key, e.mean);
        self.put(&format!("{key}_se"), e.std_err)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioReport {
    pub scenario: String,
    pub sections: Vec<ReportSection>,
    pub assertions: Vec<Assertion>,
}

impl ScenarioReport {
    pub fn new(scenario: &str) -> Self {
        Self {
            scenario: scenario.to_string(),
            ..Self::default()
        }
    }

    /// The section called `name`, created on first use.
    pub fn section(&mut self, name: &str) -> &mut ReportSection {
        if let Some(i) = self.sections.iter().position(|s| s.name == name) {
            return &mut self.sections[i];
        }
        self.sections.push(ReportSection {
            name: name.to_string(),
            entries: Vec::new(),
        });
        self.sections.last_mut().expect("just pushed")
    }

    pub fn find(&self, name: &str) -> Option<&ReportSection> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.assertions.push(Assertion {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        });
    }

    pub fn assertion(&self, name: &str) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.name == name)
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    /// Appends the sections and assertions of `other`, prefixing their names.
    pub fn absorb(&mut self, prefix: &str, other: ScenarioReport) {
        for mut s in other.sections {
            s.name = format!("{prefix}.{}", s.name);
            self.sections.push(s);
        }
        for mut a in other.assertions {
            a.name = format!("{prefix}.{}", a.name);
            self.assertions.push(a);
        }
    }
}

impl Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        writeln!(out, "scenario = {}", self.scenario)?;
        writeln!(out, "passed = {}", self.passed())?;
        writeln!(out, "\n[assertions]")?;
        for a in &self.assertions {
            let verdict = if a.passed { "pass" } else { "FAIL" };
            writeln!(out, "{} = {verdict}: {}", a.name, a.detail)?;
        }
        for s in &self.sections {
            writeln!(out, "\n[{}]", s.name)?;
            for (k, v) in &s.entries {
                writeln!(out, "{k} = {v}")?;
            }
        }
        f.write_str(&out)
    }
}
