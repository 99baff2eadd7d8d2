//! Run configuration (TOML).

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use gwaudit_core::client::{Backoff, GatewayProfile, RequestParams};
use gwaudit_core::identifier::{BackfillMode, TrainingConfig, DEFAULT_DELTA, DEFAULT_Q};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Repetitions {
    /// Elite-probe repetitions per model during an audit.
    pub single_turn: u32,
    /// Repetitions per probe when collecting the baseline corpus.
    pub baseline: u32,
    /// Conversation runs per model.
    pub conversation: u32,
}

impl Default for Repetitions {
    fn default() -> Self {
        Repetitions {
            single_turn: 5,
            baseline: 12,
            conversation: 5,
        }
    }
}

/// Retry and pacing settings, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestConfig {
    pub temperature: f64,
    pub attempt_timeout_secs: f64,
    pub total_timeout_secs: f64,
    pub max_retries: u32,
    pub repetition_spacing_secs: f64,
    pub backoff_base_secs: f64,
    pub backoff_cap_secs: f64,
}

impl Default for RequestConfig {
    fn default() -> Self {
        RequestConfig {
            temperature: 0.7,
            attempt_timeout_secs: 300.0,
            total_timeout_secs: 900.0,
            max_retries: 15,
            repetition_spacing_secs: 7200.0,
            backoff_base_secs: 1.0,
            backoff_cap_secs: 60.0,
        }
    }
}

impl RequestConfig {
    pub fn params(&self, seed: u64, workload: &str) -> RequestParams {
        let mut p = RequestParams::new("");
        p.temperature = self.temperature;
        p.attempt_timeout = Duration::from_secs_f64(self.attempt_timeout_secs);
        p.total_timeout = Duration::from_secs_f64(self.total_timeout_secs);
        p.max_retries = self.max_retries;
        p.repetition_spacing = Duration::from_secs_f64(self.repetition_spacing_secs);
        p.backoff = Backoff {
            base: Duration::from_secs_f64(self.backoff_base_secs),
            cap: Duration::from_secs_f64(self.backoff_cap_secs),
            seed,
            ..Backoff::default()
        };
        p.workload = Some(workload.to_string());
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EliteConfig {
    pub q: usize,
    pub delta: f64,
    pub backfill: BackfillMode,
}

impl Default for EliteConfig {
    fn default() -> Self {
        EliteConfig {
            q: DEFAULT_Q,
            delta: DEFAULT_DELTA,
            backfill: BackfillMode::default(),
        }
    }
}

/// Anomaly thresholds applied by the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlagThresholds {
    /// Flag when the claimed-model share falls below this.
    pub min_claim_fraction: f64,
    /// Flag when the billing gap exceeds this many percent.
    pub max_gap_percent: f64,
    /// Flag when more distinct fingerprints than this appear.
    pub max_fingerprints: usize,
    /// Flag when any category's latency CV reaches this.
    pub max_cv: f64,
    /// Flag when fewer than this share of completed runs pass turn 24 or 25.
    pub min_memory_pass_rate: f64,
    /// Relative tolerance for reported against locally counted tokens.
    pub token_tolerance: f64,
}

impl Default for FlagThresholds {
    fn default() -> Self {
        FlagThresholds {
            min_claim_fraction: 0.80,
            max_gap_percent: 5.0,
            max_fingerprints: 1,
            max_cv: 1.0,
            min_memory_pass_rate: 0.6,
            token_tolerance: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewaySpec {
    #[serde(flatten)]
    pub profile: GatewayProfile,
    /// Serve this gateway from an in-process simulator scenario instead of
    /// `base_url`.
    #[serde(default)]
    pub scenario: Option<PathBuf>,
    /// Charges transcribed from the gateway console.
    #[serde(default)]
    pub ledger: Option<PathBuf>,
}

impl GatewaySpec {
    pub fn name(&self) -> &str {
        &self.profile.name
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Drives dataset splits, training and backoff jitter.
    pub seed: u64,
    pub suite: PathBuf,
    pub output_dir: PathBuf,
    /// Gateway whose responses form the training corpus and cache baseline.
    pub baseline: Option<String>,
    /// Public price list (JSON).
    pub pricing: Option<PathBuf>,
    pub repetitions: Repetitions,
    pub request: RequestConfig,
    pub training: TrainingConfig,
    pub elite: EliteConfig,
    pub thresholds: FlagThresholds,
    pub gateways: Vec<GatewaySpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            suite: PathBuf::new(),
            output_dir: PathBuf::from("out"),
            baseline: None,
            pricing: None,
            repetitions: Repetitions::default(),
            request: RequestConfig::default(),
            training: TrainingConfig::default(),
            elite: EliteConfig::default(),
            thresholds: FlagThresholds::default(),
            gateways: Vec::new(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub suite: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub reps: Option<u32>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() && !p.as_os_str().is_empty() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        resolve(base, &mut cfg.suite);
        resolve(base, &mut cfg.output_dir);
        for p in cfg.pricing.iter_mut() {
            resolve(base, p);
        }
        for g in &mut cfg.gateways {
            for p in g.scenario.iter_mut().chain(g.ledger.iter_mut()) {
                resolve(base, p);
            }
        }
        Ok(cfg)
    }

    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = &o.suite {
            self.suite = s.clone();
        }
        if let Some(d) = &o.out {
            self.output_dir = d.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(k) = o.reps {
            self.repetitions.single_turn = k;
            self.repetitions.baseline = k;
        }
        self.training.seed = self.seed;
    }

    pub fn gateway(&self, name: &str) -> Option<&GatewaySpec> {
        self.gateways.iter().find(|g| g.name() == name)
    }

    pub fn is_baseline(&self, name: &str) -> bool {
        self.baseline.as_deref() == Some(name)
    }

    /// Checks references and creates the output directory.
    pub fn validate(&self) -> Result<()> {
        if self.gateways.is_empty() {
            bail!("no gateways configured");
        }
        let mut names = HashSet::new();
        for g in &self.gateways {
            g.profile.validate().map_err(anyhow::Error::msg)?;
            if !names.insert(g.name()) {
                bail!("duplicate gateway {:?}", g.name());
            }
            if let Some(s) = &g.scenario {
                if !s.is_file() {
                    bail!("gateway {:?}: scenario {} not found", g.name(), s.display());
                }
            }
        }
        if let Some(b) = &self.baseline {
            if self.gateway(b).is_none() {
                bail!("baseline gateway {b:?} is not configured");
            }
        }
        if !self.suite.is_file() {
            bail!("probe suite {} not found", self.suite.display());
        }
        if let Some(p) = &self.pricing {
            if !p.is_file() {
                bail!("pricing file {} not found", p.display());
            }
        }
        for k in [
            self.repetitions.single_turn,
            self.repetitions.baseline,
            self.repetitions.conversation,
        ] {
            if k == 0 {
                bail!("repetitions must be >= 1");
            }
        }
        self.training.validate()?;
        std::fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("creating {}", self.output_dir.display()))?;
        let probe = self.output_dir.join(".write-test");
        std::fs::write(&probe, b"").with_context(|| {
            format!(
                "output directory {} is not writable",
                self.output_dir.display()
            )
        })?;
        std::fs::remove_file(probe)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = r#"
        seed = 4
        suite = "probes.json"
        output_dir = "runs/a"
        baseline = "official"

        [repetitions]
        conversation = 3

        [thresholds]
        max_gap_percent = 2.5

        [training.tree]
        rounds = 50

        [[gateways]]
        name = "official"
        base_url = "https://api.example.com"
        auth_env_var = "OFFICIAL_KEY"
        models = ["m1", "m2"]

        [[gateways]]
        name = "relay"
        base_url = "sim"
        auth_env_var = "RELAY_KEY"
        models = ["m1"]
        max_concurrency = 2
        scenario = "scenarios/relay.toml"
    "#;

    #[test]
    fn parses_and_resolves() {
        let cfg = RunConfig::parse(TEXT, Path::new("/etc/audit")).unwrap();
        assert_eq!(cfg.suite, PathBuf::from("/etc/audit/probes.json"));
        assert_eq!(cfg.output_dir, PathBuf::from("/etc/audit/runs/a"));
        assert_eq!(cfg.repetitions.conversation, 3);
        assert_eq!(cfg.repetitions.single_turn, 5);
        assert_eq!(cfg.repetitions.baseline, 12);
        assert_eq!(cfg.thresholds.max_gap_percent, 2.5);
        assert_eq!(cfg.thresholds.min_claim_fraction, 0.80);
        assert_eq!(cfg.training.tree.rounds, 50);
        assert_eq!(cfg.training.tree.max_depth, 6);
        assert_eq!(cfg.gateways[0].profile.max_concurrency, 4);
        assert_eq!(
            cfg.gateways[1].scenario.as_deref(),
            Some(Path::new("/etc/audit/scenarios/relay.toml"))
        );
        assert!(cfg.is_baseline("official"));
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::parse(TEXT, Path::new("/x")).unwrap();
        cfg.apply(&Overrides {
            seed: Some(9),
            reps: Some(2),
            ..Overrides::default()
        });
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.training.seed, 9);
        assert_eq!(cfg.repetitions.baseline, 2);
        assert_eq!(cfg.repetitions.conversation, 3);
    }

    #[test]
    fn validate_catches_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::parse(TEXT, dir.path()).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("scenario"), "{err}");
        cfg.gateways.pop();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("probe suite"), "{err}");
        std::fs::write(dir.path().join("probes.json"), "[]").unwrap();
        cfg.validate().unwrap();
        assert!(dir.path().join("runs/a").is_dir());
        cfg.baseline = Some("nobody".into());
        assert!(cfg.validate().is_err());
    }
}
