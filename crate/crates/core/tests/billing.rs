use std::str::FromStr;

use proptest::prelude::*;
use rust_decimal::Decimal;

use gwaudit_core::billing::{
    billing_gap, expected_cost, round_cents, round_tenth, ModelPrice, UsageAggregate,
};

fn price(p_in: Decimal, p_cached: Decimal, p_out: Decimal) -> ModelPrice {
    ModelPrice {
        gateway: "*".into(),
        model: "m".into(),
        p_in,
        p_cached,
        p_out,
        supports_cache_pricing: true,
    }
}

fn cents(c: i64) -> Decimal {
    Decimal::new(c, 2)
}

fn usage() -> impl Strategy<Value = UsageAggregate> {
    (0i64..5_000_000, 0i64..5_000_000).prop_flat_map(|(n_in, n_out)| {
        (0..=n_in).prop_map(move |n_cached| UsageAggregate::new(n_in, n_cached, n_out))
    })
}

fn rates() -> impl Strategy<Value = ModelPrice> {
    (0i64..10_000, 0i64..10_000).prop_flat_map(|(p_in, p_out)| {
        (0..=p_in).prop_map(move |p_cached| price(cents(p_in), cents(p_cached), cents(p_out)))
    })
}

#[test]
fn baseline_row_of_the_public_price_list() {
    let usage = UsageAggregate::new(139_025, 67_705, 201_060);
    let p = price(cents(250), cents(125), cents(1000));
    let cost = expected_cost(&usage, &p).unwrap();
    assert_eq!(cost, Decimal::from_str("2.27353125").unwrap());
    assert_eq!(round_cents(cost), cents(227));
}

#[test]
fn relay_gaps() {
    let gap = billing_gap(cents(1109), cents(681)).unwrap();
    assert_eq!(round_tenth(gap), Decimal::from_str("62.8").unwrap());
    let gap = billing_gap(cents(653), cents(607)).unwrap();
    assert_eq!(round_tenth(gap), Decimal::from_str("7.6").unwrap());
    let gap = billing_gap(cents(500), cents(1000)).unwrap();
    assert_eq!(gap, Decimal::from(-50));
}

#[test]
fn cached_tokens_cannot_exceed_input() {
    let p = price(cents(100), cents(50), cents(100));
    assert!(expected_cost(&UsageAggregate::new(10, 11, 0), &p).is_err());
    assert!(expected_cost(&UsageAggregate::new(-1, 0, 0), &p).is_err());
}

proptest! {
    #[test]
    fn additive_in_usage(a in usage(), b in usage(), p in rates()) {
        let whole = expected_cost(&(a + b), &p).unwrap();
        prop_assert_eq!(whole, expected_cost(&a, &p).unwrap() + expected_cost(&b, &p).unwrap());
    }

    #[test]
    fn homogeneous_in_usage(u in usage(), k in 0i64..50, p in rates()) {
        let scaled = UsageAggregate::new(u.n_in * k, u.n_cached * k, u.n_out * k);
        prop_assert_eq!(expected_cost(&scaled, &p).unwrap(), expected_cost(&u, &p).unwrap() * Decimal::from(k));
    }

    #[test]
    fn linear_in_rates(u in usage(), a in rates(), b in rates(), k in 0i64..20) {
        let sum = price(a.p_in + b.p_in, a.p_cached + b.p_cached, a.p_out + b.p_out);
        prop_assert_eq!(
            expected_cost(&u, &sum).unwrap(),
            expected_cost(&u, &a).unwrap() + expected_cost(&u, &b).unwrap()
        );
        let k = Decimal::from(k);
        let scaled = price(a.p_in * k, a.p_cached * k, a.p_out * k);
        prop_assert_eq!(expected_cost(&u, &scaled).unwrap(), expected_cost(&u, &a).unwrap() * k);
    }

    #[test]
    fn equal_costs_have_no_gap(c in 1i64..10_000_000, k in 1i64..1000) {
        let x = cents(c) * Decimal::from(k);
        prop_assert_eq!(billing_gap(x, x).unwrap(), Decimal::ZERO);
    }

    #[test]
    fn full_price_cache_collapses_the_discount(u in usage(), p in rates()) {
        let collapsed = price(p.p_in, p.p_in, p.p_out);
        let no_cache = ModelPrice { supports_cache_pricing: false, ..p.clone() };
        prop_assert_eq!(expected_cost(&u, &collapsed).unwrap(), expected_cost(&u, &no_cache).unwrap());
    }
}
