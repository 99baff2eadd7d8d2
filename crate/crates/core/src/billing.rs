//! Expected-versus-actual cost reconciliation.
//!
//! All currency arithmetic is exact decimal. Rates are published in USD per
//! one million tokens; rounding happens only when a value is presented.

use std::path::Path;

use rust_decimal::prelude::ToPrimitive;
use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PER_MILLION: i64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub gateway: String,
    pub model: String,
    /// USD per 1M uncached input tokens.
    pub p_in: Decimal,
    /// USD per 1M cached input tokens.
    pub p_cached: Decimal,
    /// USD per 1M output tokens.
    pub p_out: Decimal,
    pub supports_cache_pricing: bool,
}

impl ModelPrice {
    fn validate(&self) -> Result<()> {
        if self.p_in.is_sign_negative()
            || self.p_cached.is_sign_negative()
            || self.p_out.is_sign_negative()
        {
            return Err(Error::InvalidArgument(format!(
                "negative rate for {}/{}",
                self.gateway, self.model
            )));
        }
        if self.supports_cache_pricing && self.p_cached > self.p_in {
            return Err(Error::InvalidArgument(format!(
                "cached rate above input rate for {}/{}",
                self.gateway, self.model
            )));
        }
        Ok(())
    }
}

/// Rates keyed by gateway and model. A `"*"` gateway entry applies to any
/// gateway without a specific entry for that model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PricingTable {
    pub prices: Vec<ModelPrice>,
}

impl PricingTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let table: PricingTable = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        for p in &table.prices {
            p.validate()?;
        }
        Ok(table)
    }

    pub fn lookup(&self, gateway: &str, model: &str) -> Option<&ModelPrice> {
        self.prices
            .iter()
            .find(|p| p.gateway == gateway && p.model == model)
            .or_else(|| {
                self.prices
                    .iter()
                    .find(|p| p.gateway == "*" && p.model == model)
            })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageAggregate {
    pub n_in: i64,
    pub n_cached: i64,
    pub n_out: i64,
}

impl UsageAggregate {
    pub fn new(n_in: i64, n_cached: i64, n_out: i64) -> Self {
        UsageAggregate {
            n_in,
            n_cached,
            n_out,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_in < 0 || self.n_cached < 0 || self.n_out < 0 {
            return Err(Error::InvalidArgument("negative token count".into()));
        }
        if self.n_cached > self.n_in {
            return Err(Error::InvalidArgument(
                "cached tokens exceed input tokens".into(),
            ));
        }
        Ok(())
    }
}

impl std::ops::Add for UsageAggregate {
    type Output = UsageAggregate;

    fn add(self, o: UsageAggregate) -> UsageAggregate {
        UsageAggregate::new(
            self.n_in + o.n_in,
            self.n_cached + o.n_cached,
            self.n_out + o.n_out,
        )
    }
}

impl std::iter::Sum for UsageAggregate {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(UsageAggregate::default(), |a, b| a + b)
    }
}

/// `(n_in - n_cached)·p_in + n_cached·p_cached + n_out·p_out`, with cached
/// tokens billed as ordinary input when the gateway has no cache pricing.
pub fn expected_cost(usage: &UsageAggregate, price: &ModelPrice) -> Result<Decimal> {
    usage.validate()?;
    let cached = if price.supports_cache_pricing {
        usage.n_cached
    } else {
        0
    };
    let uncached = Decimal::from(usage.n_in - cached);
    let micro = uncached * price.p_in
        + Decimal::from(cached) * price.p_cached
        + Decimal::from(usage.n_out) * price.p_out;
    Ok(micro / Decimal::from(PER_MILLION))
}

/// Signed percentage gap `(actual - expected) / expected × 100`.
pub fn billing_gap(actual: Decimal, expected: Decimal) -> Result<Decimal> {
    if expected.is_sign_negative() || actual.is_sign_negative() {
        return Err(Error::InvalidArgument("negative cost".into()));
    }
    if expected.is_zero() {
        return if actual.is_zero() {
            Ok(Decimal::ZERO)
        } else {
            Err(Error::InvalidArgument(
                "undefined gap, nonzero charge against zero expected cost".into(),
            ))
        };
    }
    Ok((actual - expected) / expected * Decimal::ONE_HUNDRED)
}

pub fn round_cents(x: Decimal) -> Decimal {
    x.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero)
}

pub fn round_tenth(x: Decimal) -> Decimal {
    x.round_dp_with_strategy(1, RoundingStrategy::MidpointAwayFromZero)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GapStatus {
    Defined(Decimal),
    UndefinedNonzeroCharge,
    /// No actual charge was supplied for this workload.
    NoLedger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BillingReport {
    pub usage: UsageAggregate,
    pub c_expected: Decimal,
    pub c_actual: Option<Decimal>,
    pub gap: GapStatus,
}

impl BillingReport {
    pub fn new(usage: UsageAggregate, c_expected: Decimal, c_actual: Option<Decimal>) -> Self {
        let gap = match c_actual {
            None => GapStatus::NoLedger,
            Some(a) => match billing_gap(a, c_expected) {
                Ok(g) => GapStatus::Defined(g),
                Err(_) => GapStatus::UndefinedNonzeroCharge,
            },
        };
        BillingReport {
            usage,
            c_expected,
            c_actual,
            gap,
        }
    }

    pub fn gap_percent(&self) -> Option<f64> {
        match &self.gap {
            GapStatus::Defined(g) => g.to_f64(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub gateway: String,
    pub model: String,
    /// Workload tag, e.g. `conversation`.
    pub workload: String,
    pub charge_usd: Decimal,
    #[serde(default)]
    pub requests: u64,
}

/// Actual charges per workload, transcribed from a console or emitted by the
/// simulator.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub entries: Vec<LedgerEntry>,
}

impl Ledger {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn total(&self, gateway: &str, model: &str, workload: &str) -> Option<Decimal> {
        let mut hits = self
            .entries
            .iter()
            .filter(|e| e.gateway == gateway && e.model == model && e.workload == workload)
            .peekable();
        hits.peek()?;
        Some(hits.map(|e| e.charge_usd).sum())
    }
}

/// Comparison of locally recounted tokens against gateway-reported usage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenConformance {
    pub local: UsageAggregate,
    pub reported: UsageAggregate,
    pub prompt_rel_diff: f64,
    pub completion_rel_diff: f64,
    pub tolerance: f64,
    pub conformant: bool,
}

fn rel_diff(reported: i64, local: i64) -> f64 {
    if local == 0 {
        return if reported == 0 { 0.0 } else { f64::INFINITY };
    }
    (reported - local) as f64 / local as f64
}

pub fn token_conformance(
    local: UsageAggregate,
    reported: UsageAggregate,
    tolerance: f64,
) -> TokenConformance {
    let prompt_rel_diff = rel_diff(reported.n_in, local.n_in);
    let completion_rel_diff = rel_diff(reported.n_out, local.n_out);
    TokenConformance {
        local,
        reported,
        prompt_rel_diff,
        completion_rel_diff,
        tolerance,
        conformant: prompt_rel_diff.abs() <= tolerance && completion_rel_diff.abs() <= tolerance,
    }
}
