//! Known tableaux used as regression data: classical RK4, Nyström's
//! fifth-order method, the Cooper–Verner eighth-order method, and the
//! published coefficient listings of the constructed order-6 and order-8
//! methods (baseline and tuned).

use std::collections::BTreeMap;

use rug::Float;

use crate::numerics::{parse_decimal, DenseMatrix};
use crate::tableau::{ButcherTableau, TableauError};

const REFERENCE_ORDER6: &str = include_str!("../../../fixtures/reference_order6.txt");
const REFERENCE_ORDER8: &str = include_str!("../../../fixtures/reference_order8.txt");
const REFERENCE_ORDER8_TUNED: &str = include_str!("../../../fixtures/reference_order8_tuned.txt");

fn q(s: &str, prec: u32) -> Float {
    parse_decimal(s, prec).expect("fixture literal")
}

fn from_rows(c: &[&str], b: &[&str], rows: &[&[&str]], order: usize, prec: u32) -> ButcherTableau {
    let s = c.len();
    let mut a = DenseMatrix::zeros(s, s, prec);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            a.set(i + 1, j, q(v, prec));
        }
    }
    ButcherTableau::new(
        c.iter().map(|v| q(v, prec)).collect(),
        b.iter().map(|v| q(v, prec)).collect(),
        a,
        None,
        Some(order),
    )
    .expect("fixture is explicit")
}

/// Classical fourth-order Runge–Kutta.
pub fn rk4(prec: u32) -> ButcherTableau {
    from_rows(
        &["0", "1/2", "1/2", "1"],
        &["1/6", "1/3", "1/3", "1/6"],
        &[&["1/2"], &["0", "1/2"], &["0", "0", "1"]],
        4,
        prec,
    )
}

/// Nyström's six-stage fifth-order method.
pub fn nystrom5(prec: u32) -> ButcherTableau {
    from_rows(
        &["0", "1/3", "2/5", "1", "2/3", "4/5"],
        &["23/192", "0", "125/192", "0", "-27/64", "125/192"],
        &[
            &["1/3"],
            &["4/25", "6/25"],
            &["1/4", "-3", "15/4"],
            &["2/27", "10/9", "-50/81", "8/81"],
            &["2/25", "12/25", "2/15", "8/75", "0"],
        ],
        5,
        prec,
    )
}

/// Cooper–Verner eleven-stage eighth-order method, with `√21` rounded to
/// the working precision.
pub fn cooper_verner8(prec: u32) -> ButcherTableau {
    let r21 = Float::with_val(prec, 21).sqrt();
    // (a + b√21)/d
    let v = |a: i64, b: i64, d: i64| -> Float {
        (Float::with_val(prec, a) + Float::with_val(prec, &r21 * b)) / Float::with_val(prec, d)
    };
    let z = || Float::new(prec);
    let rows: Vec<Vec<Float>> = vec![
        vec![],
        vec![v(1, 0, 2)],
        vec![v(1, 0, 4), v(1, 0, 4)],
        vec![v(1, 0, 7), v(-7, -3, 98), v(21, 5, 49)],
        vec![v(11, 1, 84), z(), v(18, 4, 63), v(21, -1, 252)],
        vec![v(5, 1, 48), z(), v(9, 1, 36), v(-231, 14, 360), v(63, -7, 80)],
        vec![v(10, -1, 42), z(), v(-432, 92, 315), v(633, -145, 90), v(-504, 115, 70), v(63, -13, 35)],
        vec![v(1, 0, 14), z(), z(), z(), v(14, -3, 126), v(13, -3, 63), v(1, 0, 9)],
        vec![v(1, 0, 32), z(), z(), z(), v(91, -21, 576), v(11, 0, 72), v(-385, -75, 1152), v(63, 13, 128)],
        vec![
            v(1, 0, 14),
            z(),
            z(),
            z(),
            v(1, 0, 9),
            v(-733, -147, 2205),
            v(515, 111, 504),
            v(-51, -11, 56),
            v(132, 28, 245),
        ],
        vec![
            z(),
            z(),
            z(),
            z(),
            v(-42, 7, 18),
            v(-18, 28, 45),
            v(-273, -53, 72),
            v(301, 53, 72),
            v(28, -28, 45),
            v(49, -7, 18),
        ],
    ];
    let c = vec![
        z(),
        v(1, 0, 2),
        v(1, 0, 2),
        v(7, 1, 14),
        v(7, 1, 14),
        v(1, 0, 2),
        v(7, -1, 14),
        v(7, -1, 14),
        v(1, 0, 2),
        v(7, 1, 14),
        v(1, 0, 1),
    ];
    let mut b = vec![z(); 11];
    b[0] = v(1, 0, 20);
    b[7] = v(49, 0, 180);
    b[8] = v(16, 0, 45);
    b[9] = v(49, 0, 180);
    b[10] = v(1, 0, 20);
    let mut a = DenseMatrix::zeros(11, 11, prec);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, x) in row.into_iter().enumerate() {
            a.set(i, j, x);
        }
    }
    ButcherTableau::new(c, b, a, None, Some(8)).expect("fixture is explicit")
}

/// Parses a `key [key …] value` listing into a tableau. Keys are `cI`,
/// `bI` or `aI,J` (or `aIJ` for single-digit indices); unlisted entries
/// are zero.
pub fn parse_listing(text: &str, prec: u32) -> Result<ButcherTableau, TableauError> {
    let bad = |msg: String| TableauError::Malformed(msg);
    let mut order = None;
    let mut stages = None;
    let mut entries: BTreeMap<(char, usize, usize), Float> = BTreeMap::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (value, keys) = fields.split_last().ok_or_else(|| bad(line.to_string()))?;
        match keys {
            ["order"] => order = Some(value.parse().map_err(|_| bad(line.to_string()))?),
            ["stages"] => stages = Some(value.parse::<usize>().map_err(|_| bad(line.to_string()))?),
            _ => {
                let x = parse_decimal(value, prec)?;
                for key in keys {
                    entries.insert(parse_key(key).ok_or_else(|| bad(format!("bad key {key}")))?, x.clone());
                }
            }
        }
    }
    let s = stages.ok_or_else(|| bad("missing stages line".into()))?;
    let mut c = vec![Float::new(prec); s];
    let mut b = vec![Float::new(prec); s];
    let mut a = DenseMatrix::zeros(s, s, prec);
    for ((kind, i, j), x) in entries {
        if i == 0 || i > s || j > s {
            return Err(bad(format!("index {kind}{i},{j} out of range")));
        }
        match kind {
            'c' => c[i - 1] = x,
            'b' => b[i - 1] = x,
            _ => a.set(i - 1, j - 1, x),
        }
    }
    ButcherTableau::new(c, b, a, None, order)
}

fn parse_key(key: &str) -> Option<(char, usize, usize)> {
    let kind = key.chars().next()?;
    let rest = &key[1..];
    match kind {
        'b' | 'c' => Some((kind, rest.parse().ok()?, 0)),
        'a' => {
            if let Some((i, j)) = rest.split_once(',') {
                Some(('a', i.parse().ok()?, j.parse().ok()?))
            } else if rest.len() == 2 {
                Some(('a', rest[..1].parse().ok()?, rest[1..].parse().ok()?))
            } else {
                None
            }
        }
        _ => None,
    }
}

/// Published coefficients of the constructed order-6 method.
pub fn reference_order6(prec: u32) -> ButcherTableau {
    parse_listing(REFERENCE_ORDER6, prec).expect("bundled listing")
}

/// Published coefficients of the constructed order-8 method with default
/// free parameters.
pub fn reference_order8(prec: u32) -> ButcherTableau {
    parse_listing(REFERENCE_ORDER8, prec).expect("bundled listing")
}

/// Published coefficients of the order-8 method after parameter tuning.
pub fn reference_order8_tuned(prec: u32) -> ButcherTableau {
    parse_listing(REFERENCE_ORDER8_TUNED, prec).expect("bundled listing")
}

/// Every bundled tableau by name, as shipped in `fixtures/*.json`.
pub fn all(prec: u32) -> Vec<(&'static str, ButcherTableau)> {
    vec![
        ("rk4", rk4(prec)),
        ("nystrom5", nystrom5(prec)),
        ("cooper_verner8", cooper_verner8(prec)),
        ("reference_order6", reference_order6(prec)),
        ("reference_order8", reference_order8(prec)),
        ("reference_order8_tuned", reference_order8_tuned(prec)),
    ]
}

/// Precision of the shipped JSON file; the tuned listing carries about 36
/// significant digits, so it ships at 128 bits.
pub fn native_precision(name: &str) -> u32 {
    match name {
        "reference_order8_tuned" => 128,
        _ => crate::DEFAULT_PRECISION,
    }
}

/// Looks up a bundled tableau by name.
pub fn by_name(name: &str, prec: u32) -> Option<ButcherTableau> {
    all(prec).into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
}
