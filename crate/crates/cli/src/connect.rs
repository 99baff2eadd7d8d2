//! Opening configured gateways, real or simulated.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};

use gwaudit_core::billing::Ledger;
use gwaudit_core::client::{GatewayClient, KeySource, VirtualClock};
use gwaudit_core::probe::load_suite;
use gwaudit_sim::{MockGateway, Scenario};

use crate::config::GatewaySpec;

pub struct Connection {
    pub spec: GatewaySpec,
    pub client: GatewayClient,
    /// Present for simulator-backed gateways.
    pub sim: Option<Arc<MockGateway>>,
}

impl Connection {
    /// Simulated gateways run in process on virtual time under the
    /// configured gateway name; the client is handed the scenario's key so no
    /// environment variable is needed.
    pub fn open(spec: &GatewaySpec) -> Result<Self> {
        let Some(path) = &spec.scenario else {
            return Ok(Connection {
                spec: spec.clone(),
                client: GatewayClient::http(),
                sim: None,
            });
        };
        let clock = Arc::new(VirtualClock::new());
        let context = || {
            format!(
                "gateway {}: loading scenario {}",
                spec.name(),
                path.display()
            )
        };
        let mut scenario = Scenario::load(path).with_context(context)?;
        scenario.name = spec.name().to_string();
        let suite = scenario
            .suite
            .as_ref()
            .map(load_suite)
            .transpose()
            .with_context(context)?;
        let gw = Arc::new(
            MockGateway::new(scenario, suite.as_ref(), clock.clone()).with_context(context)?,
        );
        let key = gw
            .scenario()
            .api_key
            .clone()
            .unwrap_or_else(|| "sim-key".into());
        let client = GatewayClient::new(
            gw.clone(),
            clock,
            KeySource::fixed(&spec.profile.auth_env_var, &key),
        );
        Ok(Connection {
            spec: spec.clone(),
            client,
            sim: Some(gw),
        })
    }
}

/// File names inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Layout { dir: dir.into() }
    }

    pub fn records(&self) -> PathBuf {
        self.dir.join("records.jsonl")
    }

    pub fn signatures(&self) -> PathBuf {
        self.dir.join("signatures.csv")
    }

    pub fn classifiers(&self) -> PathBuf {
        self.dir.join("classifiers")
    }

    pub fn train_summary(&self) -> PathBuf {
        self.dir.join("train_summary.csv")
    }

    pub fn audit_records(&self) -> PathBuf {
        self.dir.join("audit_records.jsonl")
    }

    pub fn transcripts(&self) -> PathBuf {
        self.dir.join("transcripts.jsonl")
    }

    /// Ledger written for a simulated gateway.
    pub fn sim_ledger(&self, gateway: &str) -> PathBuf {
        self.dir.join("ledgers").join(format!("{gateway}.json"))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// A gateway's charges: the configured ledger, else the one recorded from
/// its simulator.
pub fn load_ledger(spec: &GatewaySpec, layout: &Layout) -> Result<Option<Ledger>> {
    let path = spec
        .ledger
        .clone()
        .unwrap_or_else(|| layout.sim_ledger(spec.name()));
    if !Path::new(&path).is_file() {
        return Ok(None);
    }
    Ok(Some(Ledger::load(&path)?))
}
