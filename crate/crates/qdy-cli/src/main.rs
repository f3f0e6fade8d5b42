//! `qdy`: bounded verification of quantum protocols against a quantum
//! Dolev-Yao intruder.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qdy_core::explorer::{self, ExplorationBounds, ExploreError, Strategy, ThreatRuleSet, Verdict};
use qdy_core::models::{self, Preset};
use qdy_core::oracle;
use qdy_core::protocol::{self, ChannelAssumptions, ProtocolSpec};
use qdy_core::restrictions;

const EXIT_RESOURCE: u8 = 3;
const EXIT_INPUT: u8 = 4;
const EXIT_ORACLE: u8 = 5;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "qdy", version, about = "Bounded verifier for quantum protocols with a quantum Dolev-Yao intruder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Explore a model and report Exhausted, Attack or Inconclusive.
    Verify(VerifyArgs),
    /// Run every threat preset against every combination of authentic channels.
    Matrix(MatrixArgs),
    /// List the built-in models.
    ListModels,
    /// Default guess caps and the exact tail probability for `n` qubits.
    Budget {
        #[arg(long)]
        n: usize,
    },
    /// Numerical checks of the symbolic quantum semantics.
    Oracle {
        #[arg(value_enum, default_value_t = OracleCmd::Validate)]
        which: OracleCmd,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum OracleCmd {
    Validate,
    Bell,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
    Dot,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum View {
    Alice,
    Bob,
}

impl View {
    fn role(self) -> &'static str {
        match self {
            View::Alice => "Alice",
            View::Bob => "Bob",
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Search {
    Bfs,
    Dfs,
}

#[derive(clap::Args, Debug)]
struct BoundArgs {
    #[arg(long, default_value_t = ExplorationBounds::default().max_depth)]
    max_depth: usize,
    #[arg(long, default_value_t = ExplorationBounds::default().max_states)]
    max_states: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, value_enum, default_value_t = Search::Bfs)]
    search: Search,
}

impl BoundArgs {
    fn bounds(&self) -> ExplorationBounds {
        ExplorationBounds {
            max_depth: self.max_depth,
            max_states: self.max_states,
            workers: self.workers.max(1),
            strategy: match self.search {
                Search::Bfs => Strategy::BreadthFirst,
                Search::Dfs => Strategy::DepthFirst,
            },
            ..ExplorationBounds::default()
        }
    }
}

#[derive(clap::Args, Debug)]
struct VerifyArgs {
    /// Built-in model name (see `list-models`).
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    model: Option<String>,
    /// Scenario document in JSON.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Threat preset: passive, forge, epr, guess or full.
    #[arg(long)]
    threat: Option<String>,
    /// Authentic channels, comma separated: done, bases, matchingBases, verif.
    #[arg(long, default_value = "")]
    auth: String,
    /// Bob measures before Alice reveals her bases.
    #[arg(long)]
    order: bool,
    /// Whose key must stay secret.
    #[arg(long, value_enum, default_value_t = View::Bob)]
    view: View,
    #[command(flatten)]
    bounds: BoundArgs,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(clap::Args, Debug)]
struct MatrixArgs {
    #[arg(long, default_value = "qkd-2q")]
    model: String,
    #[arg(long)]
    order: bool,
    #[arg(long, value_enum, default_value_t = View::Bob)]
    view: View,
    #[command(flatten)]
    bounds: BoundArgs,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }
}

macro_rules! out {
    ($($t:tt)*) => { emit(format_args!($($t)*)) };
}

macro_rules! outln {
    () => { emit(format_args!("\n")) };
    ($($t:tt)*) => { emit(format_args!("{}\n", format_args!($($t)*))) };
}

/// Writes to stdout; a closed reader (`qdy ... | head`) ends the process quietly.
fn emit(args: std::fmt::Arguments<'_>) {
    use std::io::Write;
    if let Err(e) = std::io::stdout().write_fmt(args) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        panic!("writing to stdout: {e}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QDY_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    log::debug!("{cli:?}");
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("qdy: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::Verify(args) => verify(args),
        Command::Matrix(args) => matrix(args),
        Command::ListModels => {
            for (name, about) in models::MODELS {
                outln!("{name:<8} {about}");
            }
            Ok(0)
        }
        Command::Budget { n } => budget(n),
        Command::Oracle { which } => run_oracle(which),
    }
}

fn load_spec(args: &VerifyArgs) -> Result<ProtocolSpec, Failure> {
    let channels = ChannelAssumptions::from_auth_list(&args.auth).map_err(|e| Failure::new(EXIT_USAGE, e))?;
    let channels = ChannelAssumptions {
        order: args.order,
        ..channels
    };
    match (&args.model, &args.scenario) {
        (Some(name), None) => {
            models::by_name(name, channels, args.view.role()).map_err(|e| Failure::new(EXIT_USAGE, e))
        }
        (None, Some(path)) => {
            if channels != ChannelAssumptions::default() {
                return Err(Failure::new(
                    EXIT_USAGE,
                    "--auth and --order come from the scenario file when --scenario is given",
                ));
            }
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", path.display())))?;
            let spec = protocol::parse_scenario(&text)
                .map_err(|e| Failure::new(EXIT_INPUT, format!("{}: {e}", path.display())))?;
            Ok(models::with_view(spec, args.view.role()))
        }
        _ => Err(Failure::new(EXIT_USAGE, "exactly one of --model or --scenario is required")),
    }
}

fn verify(args: VerifyArgs) -> Result<u8, Failure> {
    let spec = load_spec(&args)?;
    let threat_name = args
        .threat
        .clone()
        .or_else(|| spec.threat_model.clone())
        .unwrap_or_else(|| "full".to_string());
    let rules = models::threat_preset(&threat_name).map_err(|e| Failure::new(EXIT_USAGE, e))?;
    let ex = explorer::Explorer::new(&spec, &rules, args.bounds.bounds()).map_err(|e| Failure::new(EXIT_INPUT, e))?;
    let verdict = match ex.explore() {
        Ok(v) => v,
        Err(ExploreError::ResourceExhausted { max_states, stats }) => {
            if args.format == Format::Json {
                let v = serde_json::json!({
                    "schemaVersion": explorer::JSON_SCHEMA_VERSION,
                    "model": spec.name,
                    "verdict": "ResourceExhausted",
                    "maxStates": max_states,
                    "stats": stats,
                });
                outln!("{}", serde_json::to_string_pretty(&v).expect("serializable report"));
            }
            return Err(Failure::new(
                EXIT_RESOURCE,
                format!("state cap of {max_states} reached after {} states; raise --max-states", stats.states_explored),
            ));
        }
        Err(e) => return Err(Failure::new(EXIT_INPUT, e)),
    };
    match args.format {
        Format::Text => out!("{}", text_report(&spec, ex.rules(), &threat_name, &verdict)),
        Format::Json => {
            let v = explorer::verdict_json(&spec, ex.rules(), &verdict);
            outln!("{}", serde_json::to_string_pretty(&v).expect("serializable report"));
        }
        Format::Dot => match &verdict {
            Verdict::Attack(a) => out!("{}", explorer::trace_dot(&a.trace)),
            other => eprintln!("no attack trace to draw: verdict {}", other.name()),
        },
    }
    Ok(verdict.exit_code() as u8)
}

fn text_report(spec: &ProtocolSpec, rules: &ThreatRuleSet, threat: &str, verdict: &Verdict) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "model:    {}", spec.name);
    let _ = writeln!(out, "threat:   {threat} {rules}");
    if spec.kind == protocol::ProtocolKind::Qkd {
        let _ = writeln!(out, "channels: {}", spec.channels);
    }
    let _ = writeln!(out, "property: {}", spec.property);
    match verdict {
        Verdict::Attack(a) => {
            let tags: Vec<String> = a.classification.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(out, "verdict:  Attack [{}]", tags.join(", "));
            let _ = writeln!(out, "violation: {}", a.violation);
            let _ = writeln!(out, "trace:");
            let _ = write!(out, "{}", a.trace);
        }
        Verdict::Exhausted { .. } => {
            let _ = writeln!(out, "verdict:  Exhausted");
        }
        Verdict::Inconclusive { reasons, .. } => {
            let _ = writeln!(out, "verdict:  Inconclusive");
            for r in reasons {
                let _ = writeln!(out, "  {r}");
            }
        }
    }
    let s = verdict.stats();
    let _ = writeln!(
        out,
        "states explored: {}, dedup hits: {}, transitions: {}, max depth: {}, wall time: {} ms",
        s.states_explored, s.dedup_hits, s.transitions, s.max_depth_reached, s.wall_ms
    );
    out
}

const AUTH_FLAGS: [&str; 4] = ["done", "bases", "matchingBases", "verif"];

fn matrix(args: MatrixArgs) -> Result<u8, Failure> {
    let probe = models::by_name(&args.model, ChannelAssumptions::default(), args.view.role())
        .map_err(|e| Failure::new(EXIT_USAGE, e))?;
    let combos: Vec<Vec<&str>> = if probe.kind == protocol::ProtocolKind::Qkd {
        (0..16u32)
            .map(|mask| {
                AUTH_FLAGS
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, f)| *f)
                    .collect()
            })
            .collect()
    } else {
        vec![vec![]]
    };
    let presets = [Preset::Passive, Preset::Forge, Preset::Epr, Preset::Guess, Preset::Full];
    let mut rows = Vec::new();
    for auth in &combos {
        let mut channels = ChannelAssumptions::from_auth_list(&auth.join(",")).map_err(|e| Failure::new(EXIT_USAGE, e))?;
        channels.order = args.order;
        let spec = models::by_name(&args.model, channels, args.view.role()).map_err(|e| Failure::new(EXIT_USAGE, e))?;
        let mut cells = Vec::new();
        for p in presets {
            let cell = match explorer::explore(&spec, &p.rules(), args.bounds.bounds()) {
                Ok(Verdict::Attack(a)) => {
                    let tags: Vec<String> = a.classification.iter().map(|t| t.to_string()).collect();
                    if tags.is_empty() {
                        "Attack".to_string()
                    } else {
                        format!("Attack({})", tags.join("+"))
                    }
                }
                Ok(v) => v.name().to_string(),
                Err(ExploreError::ResourceExhausted { .. }) => "StateCap".to_string(),
                Err(e) => return Err(Failure::new(EXIT_INPUT, e)),
            };
            cells.push((p, cell));
        }
        rows.push((channels, cells));
    }
    match args.format {
        Format::Json => {
            let v: Vec<serde_json::Value> = rows
                .iter()
                .map(|(c, cells)| {
                    let results: serde_json::Map<String, serde_json::Value> =
                        cells.iter().map(|(p, v)| (p.name().to_string(), v.clone().into())).collect();
                    serde_json::json!({ "channels": c.to_string(), "results": results })
                })
                .collect();
            let doc = serde_json::json!({
                "schemaVersion": explorer::JSON_SCHEMA_VERSION,
                "model": args.model,
                "view": args.view.role(),
                "rows": v,
            });
            outln!("{}", serde_json::to_string_pretty(&doc).expect("serializable report"));
        }
        _ => {
            out!("{:<42}", "channels");
            for p in presets {
                out!(" {:<18}", p.name());
            }
            outln!();
            for (c, cells) in &rows {
                out!("{:<42}", c.to_string());
                for (_, v) in cells {
                    out!(" {v:<18}");
                }
                outln!();
            }
        }
    }
    Ok(0)
}

fn budget(n: usize) -> Result<u8, Failure> {
    let (half, group) = restrictions::default_budgets(n).map_err(|e| Failure::new(EXIT_USAGE, e))?;
    outln!("n = {n}");
    outln!("guess cap per bitstring and role: {half}");
    outln!("guess cap per same-value group: {group}");
    match restrictions::exact_tail_probability(n, n / 2) {
        Ok(p) => outln!(
            "P[at least {} of {n} guesses correct] = {p} ({:.6})",
            n / 2,
            *p.numer() as f64 / *p.denom() as f64
        ),
        Err(e) => outln!("exact tail unavailable: {e}"),
    }
    Ok(0)
}

fn run_oracle(which: OracleCmd) -> Result<u8, Failure> {
    match which {
        OracleCmd::Validate => {
            let report = oracle::validate_symbolic_semantics().map_err(|e| Failure::new(EXIT_ORACLE, e))?;
            out!("{report}");
            Ok(if report.passed() { 0 } else { EXIT_ORACLE })
        }
        OracleCmd::Bell => {
            let mut ok = true;
            for (input, name, expected) in oracle::bell_mappings() {
                let got = oracle::bell_circuit(input);
                let want = oracle::StateVector::real(&expected).map_err(|e| Failure::new(EXIT_ORACLE, e))?;
                let pass = got.approx_eq(&want, oracle::TOLERANCE);
                ok &= pass;
                outln!(
                    "|{:02b}> -> {name:<4} {}  {got}",
                    input,
                    if pass { "ok" } else { "MISMATCH" }
                );
            }
            Ok(if ok { 0 } else { EXIT_ORACLE })
        }
    }
}
