//! Security-economics calculator: collusion payoff, honest fee income,
//! break-even fee fraction, bounty floor, and double-spend catch-up
//! probability. Share formulas are exact rationals; probabilities are f64.

use num_bigint::BigInt;
use num_rational::Ratio;
use num_traits::{One, Signed, ToPrimitive, Zero};

#[derive(Debug, Clone, PartialEq)]
pub struct EconParams {
    /// Maximum single-transaction share of a block's amount limit.
    pub e: Ratio<BigInt>,
    /// Maximum total amount per block, in minor units.
    pub ta: BigInt,
    /// Transaction fee fraction.
    pub f: Ratio<BigInt>,
    /// Finalization depth (descendants required).
    pub r: u64,
    /// Average signers per block.
    pub s_bar: Ratio<BigInt>,
    /// Attacker-controlled signer share.
    pub q: f64,
    /// Blocks the attacker starts behind.
    pub z: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid economics parameter: {0}")]
pub struct EconError(pub &'static str);

impl EconParams {
    pub fn validate(&self) -> Result<(), EconError> {
        if self.e <= Ratio::zero() || self.e >= Ratio::one() {
            return Err(EconError("e must satisfy 0 < e < 1"));
        }
        if self.f < Ratio::zero() || self.f > Ratio::one() {
            return Err(EconError("f must satisfy 0 <= f <= 1"));
        }
        if self.r == 0 {
            return Err(EconError("R must be at least 1"));
        }
        if self.s_bar <= Ratio::zero() {
            return Err(EconError("S_bar must be positive"));
        }
        if self.ta.is_negative() {
            return Err(EconError("TA must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.q) {
            return Err(EconError("q must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// What one colluding signer stands to gain from a forged block:
/// (e·TA − e·f·TA) / (R·S_bar).
pub fn colluder_share(p: &EconParams) -> Ratio<BigInt> {
    let ta = Ratio::from_integer(p.ta.clone());
    let gain = &p.e * &ta - &p.e * &p.f * &ta;
    gain / (Ratio::from_integer(BigInt::from(p.r)) * &p.s_bar)
}

/// Fee income per block for an honest signer: f·TA / S_bar.
pub fn honest_fee_share(p: &EconParams) -> Ratio<BigInt> {
    &p.f * Ratio::from_integer(p.ta.clone()) / &p.s_bar
}

/// The fee fraction at which honest income matches the collusion payoff:
/// f' = e / (R + e). Fees at or above it make honesty the better trade.
pub fn min_fee_fraction(e: &Ratio<BigInt>, r: u64) -> Ratio<BigInt> {
    e / (Ratio::from_integer(BigInt::from(r)) + e)
}

/// Floor for the misbehavior bounty: (1 − f)·e·TA / (R·S_bar). Equals the
/// collusion payoff, so any bounty above it out-bids the crime.
pub fn min_bounty_penalty(p: &EconParams) -> Ratio<BigInt> {
    let ta = Ratio::from_integer(p.ta.clone());
    (Ratio::one() - &p.f) * &p.e * ta
        / (Ratio::from_integer(BigInt::from(p.r)) * &p.s_bar)
}

/// Probability that an attacker holding share `q` of block production,
/// starting `z` blocks behind, ever catches up: the gambler's-ruin race,
/// 1 when q ≥ 1−q, else (q/(1−q))^z.
pub fn catchup_probability(q: f64, z: u32) -> f64 {
    assert!((0.0..=1.0).contains(&q), "q must lie in [0, 1]");
    if z == 0 {
        return 1.0;
    }
    let p = 1.0 - q;
    if q >= p {
        return 1.0;
    }
    (q / p).powi(z as i32)
}

/// Variant that weights the attacker's hidden head start by a Poisson
/// distribution with mean z·q/p before running the race; the treatment in
/// the original double-spend analysis.
pub fn catchup_probability_poisson(q: f64, z: u32) -> f64 {
    assert!((0.0..=1.0).contains(&q), "q must lie in [0, 1]");
    if z == 0 {
        return 1.0;
    }
    let p = 1.0 - q;
    if q >= p {
        return 1.0;
    }
    let lambda = z as f64 * q / p;
    let mut sum = 0.0;
    // poisson_k tracks λ^k e^{−λ} / k! iteratively
    let mut poisson_k = (-lambda).exp();
    for k in 0..=z {
        let caught = (q / p).powi((z - k) as i32);
        sum += poisson_k * (1.0 - caught);
        poisson_k *= lambda / (k as f64 + 1.0);
    }
    1.0 - sum
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Monte-Carlo estimate of the catch-up probability by direct random-walk
/// simulation. A trial succeeds when the attacker's deficit reaches zero
/// and is abandoned once the deficit grows so large that the residual
/// success probability drops below 1e-6 (negligible next to sampling
/// noise at feasible trial counts).
pub fn monte_carlo_catchup(q: f64, z: u32, trials: u64, seed: u64) -> f64 {
    assert!(q > 0.0 && q < 0.5, "walk must have an honest drift");
    if z == 0 {
        return 1.0;
    }
    let p = 1.0 - q;
    let abandon = (1e-6f64.ln() / (q / p).ln()).ceil() as i64;
    let abandon = abandon.max(z as i64 + 1);
    // attacker wins a step with probability q: compare a uniform u64 draw
    // against q scaled to the full 64-bit range
    let threshold = (q * 2f64.powi(64)) as u64;
    let mut state = splitmix64(seed ^ 0x6a09e667f3bcc908);
    if state == 0 {
        state = 0x243f6a8885a308d3;
    }
    let mut successes: u64 = 0;
    for _ in 0..trials {
        let mut deficit = z as i64;
        loop {
            // xorshift64* keeps the inner loop branch-light
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let draw = state.wrapping_mul(0x2545f4914f6cdd1d);
            deficit += if draw < threshold { -1 } else { 1 };
            if deficit == 0 {
                successes += 1;
                break;
            }
            if deficit >= abandon {
                break;
            }
        }
    }
    successes as f64 / trials as f64
}

/// Parses a decimal literal ("0.015", "12", "-3.5") into an exact ratio.
pub fn decimal_to_ratio(s: &str) -> Option<Ratio<BigInt>> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    let (sign, rest) = match s.strip_prefix('-') {
        Some(r) => (-1, r),
        None => (1, s.strip_prefix('+').unwrap_or(s)),
    };
    let (int_part, frac_part) = match rest.split_once('.') {
        Some((i, f)) => (i, f),
        None => (rest, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().all(|c| c.is_ascii_digit())
        || !frac_part.chars().all(|c| c.is_ascii_digit())
    {
        return None;
    }
    let digits = format!("{int_part}{frac_part}");
    let numer: BigInt = digits.parse().ok()?;
    let denom = BigInt::from(10u32).pow(frac_part.len() as u32);
    Some(Ratio::new(numer * BigInt::from(sign), denom))
}

/// Renders a ratio as a decimal string with up to `max_places` fractional
/// digits, trimming trailing zeros; exact values print exactly.
pub fn ratio_to_decimal(r: &Ratio<BigInt>, max_places: u32) -> String {
    let sign = if r.is_negative() { "-" } else { "" };
    let abs = r.abs();
    let int = abs.trunc().to_integer();
    let mut frac = abs.fract();
    let mut digits = String::new();
    for _ in 0..max_places {
        if frac.is_zero() {
            break;
        }
        frac *= BigInt::from(10);
        let d = frac.trunc().to_integer();
        digits.push_str(&d.to_string());
        frac = frac.fract();
    }
    while digits.ends_with('0') {
        digits.pop();
    }
    if digits.is_empty() {
        format!("{sign}{int}")
    } else {
        format!("{sign}{int}.{digits}")
    }
}

pub fn ratio_to_f64(r: &Ratio<BigInt>) -> f64 {
    r.numer().to_f64().unwrap_or(f64::NAN) / r.denom().to_f64().unwrap_or(f64::NAN)
}
