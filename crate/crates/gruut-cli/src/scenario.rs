//! Scenario files: flat `key = value` lines under `[section]` headers.
//!
//! Sections are `[sim]`, `[econ]`, and `[chains]`; a bare `name = ...`
//! may appear before the first header. Unknown keys and sections are
//! hard errors with the offending line number, because a silently
//! ignored typo means the run no longer measures what the file says.
//! Missing keys fall back to the library defaults, so a scenario only
//! states what it changes.
//!
//! ```text
//! name = table2
//!
//! [sim]
//! seed = 1
//! seeds = 1,2,3,4,5
//! block_sizes = 30150,76650,144900,345600
//! legacy_open_competition = true
//! ```

use gruut::econ::{decimal_to_ratio, EconParams};
use gruut::netsim::SimConfig;
use num_bigint::BigInt;
use num_rational::Ratio;

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub sim: SimConfig,
    /// Seeds to sweep. Defaults to the single `[sim]` seed.
    pub seeds: Vec<u64>,
    /// Block sizes to sweep. Defaults to the single `[sim]` target size.
    pub block_sizes: Vec<u64>,
    pub econ: Option<EconParams>,
    pub chains: Option<ChainsSpec>,
}

#[derive(Debug, Clone)]
pub struct ChainsSpec {
    pub n_chains: u64,
    pub per_chain_tps: Ratio<BigInt>,
}

#[derive(Debug)]
pub struct ParseError {
    /// 1-based source line, or 0 for whole-file problems.
    pub line: usize,
    pub msg: String,
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.msg)
        } else {
            write!(f, "line {}: {}", self.line, self.msg)
        }
    }
}

impl std::error::Error for ParseError {}

fn err(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError { line, msg: msg.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ParseError> {
    v.parse::<T>().map_err(|_| err(line, format!("`{key}` expects a number, got `{v}`")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, ParseError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(line, format!("`{key}` expects true or false, got `{v}`"))),
    }
}

fn parse_u64_list(line: usize, key: &str, v: &str) -> Result<Vec<u64>, ParseError> {
    let items: Result<Vec<u64>, _> = v.split(',').map(|s| s.trim().parse::<u64>()).collect();
    match items {
        Ok(list) if !list.is_empty() => Ok(list),
        _ => Err(err(line, format!("`{key}` expects a comma-separated list of integers"))),
    }
}

/// `num/den` pair of integers, e.g. `1/2`.
fn parse_fraction(line: usize, key: &str, v: &str) -> Result<(u64, u64), ParseError> {
    let mut it = v.splitn(2, '/');
    let bad = || err(line, format!("`{key}` expects num/den, got `{v}`"));
    let num = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
    let den = it.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
    Ok((num, den))
}

/// Exact rational from a decimal literal (`0.01`) or a fraction (`1/101`).
pub fn parse_ratio(line: usize, key: &str, v: &str) -> Result<Ratio<BigInt>, ParseError> {
    if v.contains('/') {
        let (n, d) = parse_fraction(line, key, v)?;
        if d == 0 {
            return Err(err(line, format!("`{key}` has a zero denominator")));
        }
        return Ok(Ratio::new(BigInt::from(n), BigInt::from(d)));
    }
    decimal_to_ratio(v).ok_or_else(|| err(line, format!("`{key}` expects a decimal, got `{v}`")))
}

/// Economics defaults: the bounty-analysis worked example (10% cap on a
/// 10,000-unit block, 1% fee, depth 10, 10 signers, 30% attacker six
/// behind). Scenario keys override individual fields.
pub fn econ_defaults() -> EconParams {
    EconParams {
        e: Ratio::new(BigInt::from(1), BigInt::from(10)),
        ta: BigInt::from(10_000),
        f: Ratio::new(BigInt::from(1), BigInt::from(100)),
        r: 10,
        s_bar: Ratio::from_integer(BigInt::from(10)),
        q: 0.3,
        z: 5,
    }
}

pub fn parse(text: &str) -> Result<Scenario, ParseError> {
    let mut name = String::new();
    let mut sim = SimConfig::desk_default(1);
    let mut seeds: Option<Vec<u64>> = None;
    let mut block_sizes: Option<Vec<u64>> = None;
    let mut econ: Option<EconParams> = None;
    let mut chains_n: Option<u64> = None;
    let mut chains_tps: Option<Ratio<BigInt>> = None;
    let mut section = String::new();

    for (idx, raw) in text.lines().enumerate() {
        let ln = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let Some(sec) = rest.strip_suffix(']') else {
                return Err(err(ln, format!("malformed section header `{line}`")));
            };
            match sec {
                "sim" | "econ" | "chains" => section = sec.to_string(),
                _ => return Err(err(ln, format!("unknown section `[{sec}]`"))),
            }
            if section == "econ" && econ.is_none() {
                econ = Some(econ_defaults());
            }
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(err(ln, format!("expected `key = value`, got `{line}`")));
        };
        let (k, v) = (k.trim(), v.trim());
        match section.as_str() {
            "" => match k {
                "name" => name = v.to_string(),
                _ => return Err(err(ln, format!("unknown key `{k}` before any section"))),
            },
            "sim" => match k {
                "seed" => sim.seed = parse_num(ln, k, v)?,
                "seeds" => seeds = Some(parse_u64_list(ln, k, v)?),
                "block_sizes" => block_sizes = Some(parse_u64_list(ln, k, v)?),
                "n_mergers" => sim.n_mergers = parse_num(ln, k, v)?,
                "n_signers" => sim.n_signers = parse_num(ln, k, v)?,
                "n_full" => sim.n_full = parse_num(ln, k, v)?,
                "degree_full" => sim.degree_full = parse_num(ln, k, v)?,
                "degree_signer" => sim.degree_signer = parse_num(ln, k, v)?,
                "degree_merger" => sim.degree_merger = parse_num(ln, k, v)?,
                "bw_down_signer_full" => sim.bw_down_signer_full = parse_num(ln, k, v)?,
                "bw_up_signer_full" => sim.bw_up_signer_full = parse_num(ln, k, v)?,
                "bw_merger" => sim.bw_merger = parse_num(ln, k, v)?,
                "base_latency" => sim.base_latency = parse_num(ln, k, v)?,
                "target_block_size" => sim.target_block_size = parse_num(ln, k, v)?,
                "avg_tx_size" => sim.avg_tx_size = parse_num(ln, k, v)?,
                "s_initial" => sim.s_initial = parse_num(ln, k, v)?,
                "m" => sim.m = parse_num(ln, k, v)?,
                "r" => sim.r = parse_num(ln, k, v)?,
                "t" => sim.t = parse_num(ln, k, v)?,
                "alpha" => sim.alpha = parse_fraction(ln, k, v)?,
                "k_delay" => sim.k_delay = parse_num(ln, k, v)?,
                "target_interval" => sim.target_interval = parse_num(ln, k, v)?,
                "duration" => sim.duration = parse_num(ln, k, v)?,
                "legacy_open_competition" => {
                    sim.legacy_open_competition = parse_bool(ln, k, v)?
                }
                "difficulty_window" => sim.difficulty_window = parse_num(ln, k, v)?,
                "rank_slot_ms" => sim.rank_slot_ms = parse_num(ln, k, v)?,
                "legacy_stagger_ms" => sim.legacy_stagger_ms = parse_num(ln, k, v)?,
                "batch_flush_ms" => sim.batch_flush_ms = parse_num(ln, k, v)?,
                "sign_cost_ms" => sim.sign_cost_ms = parse_num(ln, k, v)?,
                "signer_timeout_ms" => sim.signer_timeout_ms = parse_num(ln, k, v)?,
                "evidence_timeout_ms" => sim.evidence_timeout_ms = parse_num(ln, k, v)?,
                "max_substitutions" => sim.max_substitutions = parse_num(ln, k, v)?,
                "tx_rate_per_ms" => {
                    sim.tx_rate_per_ms = if v == "auto" {
                        None
                    } else {
                        Some(parse_num::<f64>(ln, k, v)?)
                    }
                }
                "n_accounts" => sim.n_accounts = parse_num(ln, k, v)?,
                _ => return Err(err(ln, format!("unknown key `{k}` in [sim]"))),
            },
            "econ" => {
                let p = econ.as_mut().expect("[econ] section initializes defaults");
                match k {
                    "e" => p.e = parse_ratio(ln, k, v)?,
                    "ta" => {
                        p.ta = BigInt::from(parse_num::<u64>(ln, k, v)?);
                    }
                    "f" => p.f = parse_ratio(ln, k, v)?,
                    "r" => p.r = parse_num(ln, k, v)?,
                    "s_bar" => p.s_bar = parse_ratio(ln, k, v)?,
                    "q" => p.q = parse_num(ln, k, v)?,
                    "z" => p.z = parse_num(ln, k, v)?,
                    _ => return Err(err(ln, format!("unknown key `{k}` in [econ]"))),
                }
            }
            "chains" => match k {
                "n_chains" => chains_n = Some(parse_num(ln, k, v)?),
                "per_chain_tps" => chains_tps = Some(parse_ratio(ln, k, v)?),
                _ => return Err(err(ln, format!("unknown key `{k}` in [chains]"))),
            },
            _ => unreachable!("section names are validated at the header"),
        }
    }

    sim.validate().map_err(|e| err(0, e.to_string()))?;
    if let Some(p) = &econ {
        p.validate().map_err(|e| err(0, e.to_string()))?;
    }
    let chains = match (chains_n, chains_tps) {
        (Some(n), Some(tps)) => Some(ChainsSpec { n_chains: n, per_chain_tps: tps }),
        (None, None) => None,
        _ => {
            return Err(err(0, "[chains] needs both n_chains and per_chain_tps"));
        }
    };
    let seeds = seeds.unwrap_or_else(|| vec![sim.seed]);
    let block_sizes = block_sizes.unwrap_or_else(|| vec![sim.target_block_size]);
    Ok(Scenario { name, sim, seeds, block_sizes, econ, chains })
}
