//! `gruut`: run network simulations and parameter sweeps, evaluate the
//! collusion economics, audit group selection over exported chains, and
//! extrapolate multi-chain throughput.
//!
//! Exit codes: 0 success, 1 audit mismatch, 2 bad config or parameters,
//! 3 simulation failure. All randomness flows from scenario seeds; no
//! command reads the wall clock, so identical inputs give byte-identical
//! outputs.

use clap::{Args, Parser, Subcommand};
use gruut_cli::{chainio, scenario};
use gruut::consensus::block_quality;
use gruut::econ::{
    catchup_probability, colluder_share, honest_fee_share, min_bounty_penalty, min_fee_fraction,
    ratio_to_decimal, EconParams,
};
use gruut::netsim::{expected_merger_group, run as run_sim, SimConfig, SimError, SimOutput,
    METRICS_CSV_HEADER};
use gruut::selection::select_signer_group;
use gruut::{BlockTree, Metric};
use num_bigint::BigInt;
use num_rational::Ratio;
use num_traits::Zero;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Parser)]
#[command(
    name = "gruut",
    version,
    about = "Population-consensus toolkit: simulation sweeps, security economics, chain audits"
)]
struct Cli {
    #[command(flatten)]
    globals: Globals,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Globals {
    /// Scenario file: `key = value` lines under [sim]/[econ]/[chains]
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Write the primary output here instead of stdout
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Comma-separated seed list overriding the scenario sweep
    #[arg(long, global = true, value_delimiter = ',', value_name = "N,N,...")]
    seeds: Vec<u64>,
    /// Let every merger race for every block instead of gating by group
    #[arg(long, global = true)]
    legacy_open_competition: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the simulation sweep from a scenario: one CSV row per (block size, seed)
    Simulate {
        /// Write the canonical chain of the run (single-job sweeps only)
        #[arg(long, value_name = "PATH")]
        export_chain: Option<PathBuf>,
        /// Write the node registry CSV of the run (single-job sweeps only)
        #[arg(long, value_name = "PATH")]
        export_registry: Option<PathBuf>,
    },
    /// Collusion payoff, break-even fee fraction, bounty floor, catch-up odds
    Econ(EconArgs),
    /// Recompute group selection over an exported chain and flag divergence
    TraceSelection(TraceArgs),
    /// Aggregate throughput of independent parallel chains, exact arithmetic
    MultichainExtrapolate {
        /// Per-chain transactions per second (decimal or num/den)
        #[arg(long, value_name = "TPS")]
        tps: Option<String>,
        /// Number of chains
        #[arg(long, value_name = "N")]
        chains: Option<u64>,
    },
}

#[derive(Args)]
struct EconArgs {
    /// Single-transaction share cap of a block's amount limit (exact decimal)
    #[arg(long)]
    e: Option<String>,
    /// Total amount limit per block
    #[arg(long)]
    ta: Option<u64>,
    /// Fee fraction (exact decimal)
    #[arg(long)]
    f: Option<String>,
    /// Confirmation depth in descendants
    #[arg(long)]
    r: Option<u64>,
    /// Mean signers per block (exact decimal)
    #[arg(long)]
    s_bar: Option<String>,
    /// Attacker share of signing power, for catch-up odds
    #[arg(long)]
    q: Option<f64>,
    /// Blocks the attacker starts behind, for catch-up odds
    #[arg(long)]
    z: Option<u32>,
    /// Sweep the fee fraction: exact decimals start:end:step
    #[arg(long, value_name = "START:END:STEP")]
    sweep_f: Option<String>,
    /// Emit the double-spend catch-up probability instead of the fee table
    #[arg(long)]
    catchup: bool,
}

#[derive(Args)]
struct TraceArgs {
    /// Chain export produced by `simulate --export-chain`
    #[arg(long, value_name = "PATH")]
    chain: PathBuf,
    /// Registry CSV produced by `simulate --export-registry`
    #[arg(long, value_name = "PATH")]
    registry: PathBuf,
    /// Audit a single height with full slot detail
    #[arg(long, value_name = "H")]
    height: Option<u64>,
    /// Audit every height (the default when --height is absent)
    #[arg(long)]
    all: bool,
    /// ID-space metric: hamming, euclidean, or manhattan
    #[arg(long, default_value = "hamming")]
    metric: String,
}

struct Failure {
    code: i32,
    msg: String,
}

fn bad_input(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

fn main() {
    let cli = Cli::parse();
    if let Err(f) = dispatch(cli) {
        eprintln!("gruut: {}", f.msg);
        std::process::exit(f.code);
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Simulate { ref export_chain, ref export_registry } => {
            cmd_simulate(&cli.globals, export_chain.clone(), export_registry.clone())
        }
        Cmd::Econ(ref args) => cmd_econ(&cli.globals, args),
        Cmd::TraceSelection(ref args) => cmd_trace_selection(&cli.globals, args),
        Cmd::MultichainExtrapolate { ref tps, ref chains } => {
            cmd_multichain(&cli.globals, tps.clone(), *chains)
        }
    }
}

fn load_scenario(g: &Globals) -> Result<scenario::Scenario, Failure> {
    let Some(path) = &g.config else {
        return Err(bad_input("this command needs --config <scenario file>"));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| bad_input(format!("{}: {e}", path.display())))?;
    scenario::parse(&text).map_err(|e| bad_input(format!("{}: {e}", path.display())))
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, content)
            .map_err(|e| bad_input(format!("{}: {e}", p.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

// ---- simulate ----

fn sweep_threads(n_jobs: usize) -> usize {
    let cap = std::env::var("GRUUT_SIM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    cap.min(n_jobs).max(1)
}

struct JobResult {
    csv_row: String,
    replay_digest: String,
    /// Full simulator output, retained only for single-job export runs;
    /// sweep rows reduce to CSV immediately to keep memory flat.
    output: Option<SimOutput>,
}

fn run_jobs(
    base: &SimConfig,
    jobs: &[(u64, u64)],
    keep_outputs: bool,
) -> Result<Vec<JobResult>, Failure> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<JobResult, SimError>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..sweep_threads(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let (block_size, seed) = jobs[i];
                let mut cfg = base.clone();
                cfg.target_block_size = block_size;
                cfg.seed = seed;
                let res = run_sim(&cfg).map(|out| JobResult {
                    csv_row: out.metrics.csv_row(block_size, seed),
                    replay_digest: out.replay_digest.clone(),
                    output: keep_outputs.then_some(out),
                });
                *slots[i].lock().unwrap() = Some(res);
            });
        }
    });
    let mut results = Vec::with_capacity(jobs.len());
    for (slot, &(block_size, seed)) in slots.into_iter().zip(jobs) {
        match slot.into_inner().unwrap() {
            Some(Ok(r)) => results.push(r),
            Some(Err(e @ SimError::InvalidConfig(_))) => {
                return Err(bad_input(format!("block_size={block_size} seed={seed}: {e}")));
            }
            Some(Err(e)) => {
                return Err(Failure {
                    code: 3,
                    msg: format!("simulation block_size={block_size} seed={seed} failed: {e}"),
                });
            }
            None => unreachable!("every job slot is filled before the scope ends"),
        }
    }
    Ok(results)
}

fn cmd_simulate(
    g: &Globals,
    export_chain: Option<PathBuf>,
    export_registry: Option<PathBuf>,
) -> Result<(), Failure> {
    let scn = load_scenario(g)?;
    let mut base = scn.sim.clone();
    if g.legacy_open_competition {
        base.legacy_open_competition = true;
    }
    let seeds = if g.seeds.is_empty() { scn.seeds.clone() } else { g.seeds.clone() };
    let mut jobs: Vec<(u64, u64)> = Vec::new();
    for &size in &scn.block_sizes {
        for &seed in &seeds {
            jobs.push((size, seed));
        }
    }
    jobs.sort_unstable();
    jobs.dedup();
    if !scn.name.is_empty() {
        eprintln!("scenario {}: {} job(s)", scn.name, jobs.len());
    }
    if (export_chain.is_some() || export_registry.is_some()) && jobs.len() != 1 {
        return Err(bad_input(
            "--export-chain/--export-registry need a sweep with exactly one block size and seed",
        ));
    }

    let exporting = export_chain.is_some() || export_registry.is_some();
    let results = run_jobs(&base, &jobs, exporting)?;

    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    for r in &results {
        csv.push_str(&r.csv_row);
        csv.push('\n');
    }
    emit(&g.out, &csv)?;
    if g.out.is_some() {
        for (&(size, seed), r) in jobs.iter().zip(&results) {
            println!("replay block_size={size} seed={seed} digest={}", r.replay_digest);
        }
    }

    if let Some(path) = export_chain {
        let o = results[0].output.as_ref().expect("export runs keep their output");
        let export = chainio::ChainExport {
            t: base.t,
            m: base.m,
            r: base.r,
            alpha: base.alpha,
            blocks: o.canonical.iter().map(|b| (**b).clone()).collect(),
        };
        chainio::write_chain(&path, &export)
            .map_err(|e| bad_input(format!("{}: {e}", path.display())))?;
    }
    if let Some(path) = export_registry {
        let o = results[0].output.as_ref().expect("export runs keep their output");
        chainio::write_registry(&path, &o.merger_roster, &o.signer_roster)
            .map_err(|e| bad_input(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

// ---- econ ----

const ECON_CSV_HEADER: &str = "e,f,R,S_bar,TA,colluder_share,honest_share,f_prime,bounty_min";

fn flag_ratio(name: &str, v: &Option<String>) -> Result<Option<Ratio<BigInt>>, Failure> {
    match v {
        None => Ok(None),
        Some(s) => scenario::parse_ratio(0, name, s)
            .map(Some)
            .map_err(|e| bad_input(e.to_string())),
    }
}

fn econ_params(g: &Globals, args: &EconArgs) -> Result<EconParams, Failure> {
    let mut p = match &g.config {
        Some(_) => load_scenario(g)?.econ.unwrap_or_else(scenario::econ_defaults),
        None => scenario::econ_defaults(),
    };
    if let Some(e) = flag_ratio("e", &args.e)? {
        p.e = e;
    }
    if let Some(ta) = args.ta {
        p.ta = BigInt::from(ta);
    }
    if let Some(f) = flag_ratio("f", &args.f)? {
        p.f = f;
    }
    if let Some(r) = args.r {
        p.r = r;
    }
    if let Some(s_bar) = flag_ratio("s_bar", &args.s_bar)? {
        p.s_bar = s_bar;
    }
    if let Some(q) = args.q {
        p.q = q;
    }
    if let Some(z) = args.z {
        p.z = z;
    }
    p.validate().map_err(|e| bad_input(e.to_string()))?;
    Ok(p)
}

/// `start:end:step` as exact rationals, inclusive of `end`.
fn sweep_values(spec: &str) -> Result<Vec<Ratio<BigInt>>, Failure> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(bad_input("--sweep-f expects start:end:step"));
    }
    let start = scenario::parse_ratio(0, "sweep start", parts[0])
        .map_err(|e| bad_input(e.to_string()))?;
    let end =
        scenario::parse_ratio(0, "sweep end", parts[1]).map_err(|e| bad_input(e.to_string()))?;
    let step =
        scenario::parse_ratio(0, "sweep step", parts[2]).map_err(|e| bad_input(e.to_string()))?;
    if step <= Ratio::zero() || end < start {
        return Err(bad_input("--sweep-f needs step > 0 and end >= start"));
    }
    let mut vals = Vec::new();
    let mut cur = start;
    while cur <= end {
        vals.push(cur.clone());
        cur += &step;
        if vals.len() > 100_000 {
            return Err(bad_input("--sweep-f produces more than 100000 rows"));
        }
    }
    Ok(vals)
}

fn cmd_econ(g: &Globals, args: &EconArgs) -> Result<(), Failure> {
    let params = econ_params(g, args)?;

    if args.catchup {
        let p = catchup_probability(params.q, params.z);
        let csv = format!("q,z,catchup_probability\n{},{},{:.9}\n", params.q, params.z, p);
        return emit(&g.out, &csv);
    }

    let fee_values = match &args.sweep_f {
        Some(spec) => sweep_values(spec)?,
        None => vec![params.f.clone()],
    };
    let mut csv = String::from(ECON_CSV_HEADER);
    csv.push('\n');
    for f in fee_values {
        let mut p = params.clone();
        p.f = f;
        p.validate().map_err(|e| bad_input(e.to_string()))?;
        let row = [
            ratio_to_decimal(&p.e, 9),
            ratio_to_decimal(&p.f, 9),
            p.r.to_string(),
            ratio_to_decimal(&p.s_bar, 9),
            p.ta.to_string(),
            ratio_to_decimal(&colluder_share(&p), 9),
            ratio_to_decimal(&honest_fee_share(&p), 9),
            ratio_to_decimal(&min_fee_fraction(&p.e, p.r), 9),
            ratio_to_decimal(&min_bounty_penalty(&p), 9),
        ];
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    emit(&g.out, &csv)
}

// ---- trace-selection ----

fn short(d: &[u8; 32]) -> String {
    hex::encode(&d[..6])
}

fn cmd_trace_selection(g: &Globals, args: &TraceArgs) -> Result<(), Failure> {
    let export = chainio::read_chain(&args.chain).map_err(bad_input)?;
    let (merger_roster, signer_roster) =
        chainio::read_registry(&args.registry).map_err(bad_input)?;
    let metric = Metric::parse(&args.metric)
        .ok_or_else(|| bad_input(format!("unknown metric `{}`", args.metric)))?;
    if export.alpha.1 == 0 {
        return Err(bad_input("chain export has a zero alpha denominator"));
    }
    let blocks = &export.blocks;
    if blocks[0].height != 0 {
        return Err(bad_input("chain export must start at the genesis block"));
    }
    let alpha = Ratio::new(BigInt::from(export.alpha.0), BigInt::from(export.alpha.1));
    let mut tree = BlockTree::new(std::sync::Arc::new(blocks[0].clone()), export.r, alpha, None);
    for b in &blocks[1..] {
        tree.insert(std::sync::Arc::new(b.clone()))
            .map_err(|e| bad_input(format!("height {} does not link: {e:?}", b.height)))?;
    }
    let tip = blocks.last().expect("read_chain rejects empty files").height;
    let heights: Vec<u64> = match args.height {
        Some(h) => {
            if h == 0 || h > tip {
                return Err(bad_input(format!("height {h} out of range 1..={tip}")));
            }
            vec![h]
        }
        None => (1..=tip).collect(),
    };
    let detailed = args.height.is_some();

    let mut report = String::new();
    let mut mismatches = 0u64;
    for h in heights {
        let block = &blocks[h as usize];
        let parent = &blocks[h as usize - 1];
        let mut faults: Vec<String> = Vec::new();

        let eligible_signers = signer_roster.eligible_at(h);
        let signer_sel = select_signer_group(
            &parent.tx_digest,
            block.required_signers,
            &eligible_signers,
            metric,
        );
        match &signer_sel {
            Err(e) => faults.push(format!("signer selection impossible: {e}")),
            Ok(sel) => {
                if sel.chosen.len() != block.signer_sigs.len() {
                    faults.push(format!(
                        "signer count: block carries {}, selection yields {}",
                        block.signer_sigs.len(),
                        sel.chosen.len()
                    ));
                } else {
                    for (i, (chosen, sig)) in
                        sel.chosen.iter().zip(&block.signer_sigs).enumerate()
                    {
                        if chosen != &sig.signer {
                            faults.push(format!(
                                "signer slot {}: stored {} expected {}",
                                i + 1,
                                short(&sig.signer),
                                short(chosen)
                            ));
                        } else if sel.distances[i] != sig.distance {
                            faults.push(format!(
                                "signer slot {}: stored distance {} expected {}",
                                i + 1,
                                sig.distance,
                                sel.distances[i]
                            ));
                        }
                    }
                }
            }
        }

        let merger_group =
            expected_merger_group(&tree, &block.prev_hash, export.t, export.m, &merger_roster);
        match &merger_group {
            None => faults.push("merger selection impossible".into()),
            Some(group) => match group.chosen.iter().position(|c| c == &block.merger) {
                None => faults.push(format!(
                    "producer {} not in the merger group",
                    short(&block.merger)
                )),
                Some(idx) => {
                    if group.distances[idx] != block.merger_distance {
                        faults.push(format!(
                            "producer distance: stored {} expected {}",
                            block.merger_distance, group.distances[idx]
                        ));
                    }
                }
            },
        }

        let quality = ratio_to_decimal(&block_quality(block, metric), 9);
        if detailed {
            report.push_str(&format!("height {h}, block {}\n", short(&block.digest())));
            if let Some(group) = &merger_group {
                report.push_str("  merger group:\n");
                for i in 0..group.chosen.len() {
                    report.push_str(&format!(
                        "    slot {}: target {} -> {} distance {}\n",
                        i + 1,
                        short(&group.targets[i]),
                        short(&group.chosen[i]),
                        group.distances[i]
                    ));
                }
            }
            report.push_str(&format!(
                "  producer {} distance {}\n",
                short(&block.merger),
                block.merger_distance
            ));
            if let Ok(sel) = &signer_sel {
                report.push_str("  signer group:\n");
                for i in 0..sel.chosen.len() {
                    report.push_str(&format!(
                        "    slot {}: target {} -> {} distance {}\n",
                        i + 1,
                        short(&sel.targets[i]),
                        short(&sel.chosen[i]),
                        sel.distances[i]
                    ));
                }
            }
            report.push_str(&format!("  signer-set quality {quality}\n"));
        }
        if faults.is_empty() {
            if !detailed {
                report.push_str(&format!(
                    "height {h}: ok producer={} quality={quality}\n",
                    short(&block.merger)
                ));
            } else {
                report.push_str("  verdict: ok\n");
            }
        } else {
            mismatches += 1;
            for f in &faults {
                report.push_str(&format!("height {h}: MISMATCH {f}\n"));
            }
        }
    }
    report.push_str(&format!(
        "audited {} height(s), {} mismatch(es)\n",
        if detailed { 1 } else { tip },
        mismatches
    ));
    emit(&g.out, &report)?;
    if mismatches > 0 {
        return Err(Failure {
            code: 1,
            msg: format!("{mismatches} height(s) diverge from recomputed selection"),
        });
    }
    Ok(())
}

// ---- multichain-extrapolate ----

fn cmd_multichain(
    g: &Globals,
    tps: Option<String>,
    chains: Option<u64>,
) -> Result<(), Failure> {
    let spec = match &g.config {
        Some(_) => load_scenario(g)?.chains,
        None => None,
    };
    let per_chain = match (flag_ratio("tps", &tps)?, &spec) {
        (Some(v), _) => v,
        (None, Some(c)) => c.per_chain_tps.clone(),
        (None, None) => return Err(bad_input("needs --tps (or a [chains] scenario section)")),
    };
    let n_chains = match (chains, &spec) {
        (Some(n), _) => n,
        (None, Some(c)) => c.n_chains,
        (None, None) => return Err(bad_input("needs --chains (or a [chains] scenario section)")),
    };
    if per_chain <= Ratio::zero() {
        return Err(bad_input("per-chain TPS must be positive"));
    }
    if n_chains == 0 {
        return Err(bad_input("chain count must be positive"));
    }
    let agg = gruut::multichain::aggregate_tps(&per_chain, n_chains);
    let csv = format!(
        "per_chain_tps,n_chains,aggregate_tps\n{},{},{}\n",
        ratio_to_decimal(&per_chain, 9),
        n_chains,
        ratio_to_decimal(&agg, 9)
    );
    emit(&g.out, &csv)
}
