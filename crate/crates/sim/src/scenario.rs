//! Scenario files: personas, misbehavior, fault schedule and prices.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gwaudit_core::billing::ModelPrice;
use gwaudit_core::{Error, Result};

use crate::persona::{roster, LogNormal, Persona};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    /// Persona that actually answers.
    pub target: String,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub max_context_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BillingMisbehavior {
    pub markup_factor: f64,
    pub suppress_cache: bool,
    pub token_overreport_factor: f64,
}

impl Default for BillingMisbehavior {
    fn default() -> Self {
        BillingMisbehavior {
            markup_factor: 1.0,
            suppress_cache: false,
            token_overreport_factor: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FingerprintBehavior {
    /// Fingerprint changes every this many conversation turns.
    pub churn_period_turns: Option<u32>,
    /// Never send a fingerprint.
    pub omit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondaryLatency {
    pub mode: LogNormal,
    /// Probability of drawing from the secondary mode.
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MisbehaviorConfig {
    pub substitution: Option<Substitution>,
    pub truncation: Option<Truncation>,
    pub billing: BillingMisbehavior,
    pub fingerprint: FingerprintBehavior,
    pub latency: Option<SecondaryLatency>,
}

/// One scripted reply consumed in request order before normal service.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Fault {
    pub status: Option<u16>,
    /// Hold the request until the client gives up.
    pub timeout: bool,
    pub delay_ms: u64,
}

impl Fault {
    pub fn status(status: u16) -> Self {
        Fault {
            status: Some(status),
            ..Fault::default()
        }
    }

    pub fn timeout() -> Self {
        Fault {
            timeout: true,
            ..Fault::default()
        }
    }

    /// A normal reply after an extra delay.
    pub fn ok_after(delay_ms: u64) -> Self {
        Fault {
            delay_ms,
            ..Fault::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    /// Required bearer key; any non-empty key is accepted when unset.
    pub api_key: Option<String>,
    /// Probe suite whose reference answers personas know.
    pub suite: Option<PathBuf>,
    pub cache_supported: bool,
    /// Multiplies every simulated latency.
    pub latency_scale: f64,
    pub ledger: Option<PathBuf>,
    pub personas: Vec<Persona>,
    pub misbehavior: MisbehaviorConfig,
    pub faults: Vec<Fault>,
    pub prices: Vec<ModelPrice>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "sim".into(),
            seed: 0,
            api_key: None,
            suite: None,
            cache_supported: true,
            latency_scale: 1.0,
            ledger: None,
            personas: roster().into_iter().take(6).collect(),
            misbehavior: MisbehaviorConfig::default(),
            faults: Vec::new(),
            prices: Vec::new(),
        }
    }
}

impl Scenario {
    /// Well-behaved gateway serving the first six roster personas.
    pub fn clean(name: &str, seed: u64) -> Self {
        Scenario {
            name: name.into(),
            seed,
            ..Scenario::default()
        }
    }

    pub fn persona(&self, name: &str) -> Option<&Persona> {
        self.personas.iter().find(|p| p.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| {
            Err(Error::InvalidArgument(format!(
                "scenario {}: {m}",
                self.name
            )))
        };
        if self.personas.is_empty() {
            return bad("no personas".into());
        }
        for (i, p) in self.personas.iter().enumerate() {
            p.validate().map_err(Error::InvalidArgument)?;
            for q in &self.personas[i + 1..] {
                if p.name == q.name {
                    return bad(format!("duplicate persona {}", p.name));
                }
                if p.differing_parameters(q) < 2 {
                    return bad(format!(
                        "personas {} and {} differ in fewer than two parameters",
                        p.name, q.name
                    ));
                }
            }
        }
        let m = &self.misbehavior;
        if let Some(s) = &m.substitution {
            if !(0.0..=1.0).contains(&s.probability) {
                return bad("substitution probability outside [0, 1]".into());
            }
            if self.persona(&s.target).is_none() {
                return bad(format!("unknown substitution target {}", s.target));
            }
        }
        if m.billing.markup_factor < 1.0 || m.billing.token_overreport_factor < 1.0 {
            return bad("markup and overreport factors must be >= 1".into());
        }
        if m.fingerprint.churn_period_turns == Some(0) {
            return bad("churn period must be >= 1".into());
        }
        if let Some(l) = &m.latency {
            if !(0.0..=1.0).contains(&l.weight) {
                return bad("latency mixture weight outside [0, 1]".into());
            }
        }
        if !(self.latency_scale >= 0.0) {
            return bad("latency_scale must be >= 0".into());
        }
        Ok(())
    }

    /// Parses a TOML scenario; relative paths resolve against its directory.
    /// Without a `personas` list the first six roster personas are served.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut s: Scenario = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut s.suite, &mut s.ledger].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_toml() {
        let text = r#"
            name = "markup"
            seed = 3
            [[personas]]
            name = "a"
            seed = 1
            accuracy = { math = 0.9, gpqa = 0.8, factual = 0.7, geo = 0.6 }
            depth = [2, 4]
            step_length_mean = 40.0
            step_length_spread = 5.0
            latex_prob = 0.1
            numeric_prob = 0.2
            parse_failure_prob = 0.0
            length_multiplier = 1.0
            latency = { mu = -1.0, sigma = 0.2 }
            [misbehavior.billing]
            markup_factor = 1.628
            [misbehavior.fingerprint]
            churn_period_turns = 5
            [[faults]]
            status = 429
            [[faults]]
            timeout = true
            [[prices]]
            gateway = "*"
            model = "a"
            p_in = "2.50"
            p_cached = "1.25"
            p_out = "10.00"
            supports_cache_pricing = true
        "#;
        let s: Scenario = toml::from_str(text).unwrap();
        s.validate().unwrap();
        assert_eq!(s.misbehavior.billing.markup_factor, 1.628);
        assert_eq!(s.faults, vec![Fault::status(429), Fault::timeout()]);
        assert_eq!(s.prices[0].p_in.to_string(), "2.50");
        assert!(s.cache_supported);
    }

    #[test]
    fn rejects_bad_settings() {
        let mut s = Scenario::clean("x", 0);
        s.validate().unwrap();
        s.misbehavior.billing.markup_factor = 0.9;
        assert!(s.validate().is_err());
        let mut s = Scenario::clean("x", 0);
        s.misbehavior.substitution = Some(Substitution {
            target: "nobody".into(),
            probability: 1.0,
        });
        assert!(s.validate().is_err());
        let mut s = Scenario::clean("x", 0);
        let mut twin = s.personas[0].clone();
        twin.name = "twin".into();
        twin.seed += 1;
        s.personas.push(twin);
        assert!(s.validate().is_err());
    }
}
