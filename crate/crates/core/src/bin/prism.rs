use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use prism_core::bench::{self, BenchConfig, BenchReport};
use prism_core::client::Client;
use prism_core::config::Config;
use prism_core::federation::LinkState;
use prism_core::gateway::AdminCommand;
use prism_core::ids::{AsnId, CircleId, RoleId, UserId};
use prism_core::privilege::PrivilegeAssignment;
use prism_core::scenario::Scenario;

#[derive(Parser)]
#[command(name = "prism", version, about = "Federated social-mesh server and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an ASN instance.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `listen` from the config file.
        #[arg(long)]
        listen: Option<SocketAddr>,
    },
    /// Send an administrative command to a running instance.
    Admin {
        #[arg(long, env = "PRISM_URL", default_value = "http://127.0.0.1:8080")]
        url: String,
        #[arg(long, env = "PRISM_USER")]
        user: UserId,
        #[arg(long, env = "PRISM_PASSWORD")]
        password: String,
        #[command(subcommand)]
        command: AdminCmd,
    },
    /// Scenario files.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCmd,
    },
    /// Run a benchmark and write `<name>.csv` and `<name>.txt` into `--out`.
    Bench {
        which: Which,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        /// Bench config; defaults to the built-in one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    Run { file: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Chain,
    Rules,
    Fanout,
    Capacity,
}

#[derive(Subcommand)]
enum AdminCmd {
    RegisterUser {
        local: String,
        password: String,
        #[arg(long)]
        display_name: Option<String>,
    },
    SetPassword {
        user: UserId,
        password: String,
    },
    Follow {
        target: UserId,
        #[arg(long)]
        unfollow: bool,
    },
    CreateSubdomain {
        name: String,
        #[arg(long)]
        parent: Option<CircleId>,
        #[arg(long)]
        admin: Option<UserId>,
    },
    CreatePublicGroup {
        name: String,
        #[arg(long)]
        parent: Option<CircleId>,
        /// Policy file.
        #[arg(long)]
        policies: Option<PathBuf>,
    },
    CreatePrivateGroup {
        name: String,
        #[arg(long)]
        parent: Option<CircleId>,
    },
    AddMember {
        circle: CircleId,
        user: UserId,
    },
    RemoveMember {
        circle: CircleId,
        user: UserId,
    },
    SetPolicies {
        circle: CircleId,
        file: PathBuf,
    },
    AddBoss {
        circle: CircleId,
        user: UserId,
    },
    CreateRole {
        name: String,
        #[arg(long)]
        parent: Option<RoleId>,
    },
    SetRoleParent {
        role: RoleId,
        #[arg(long)]
        parent: Option<RoleId>,
    },
    AssignRole {
        user: UserId,
        role: RoleId,
    },
    UnassignRole {
        user: UserId,
        role: RoleId,
    },
    /// e.g. `prism admin privilege "grant create-role to role:A/staff"`
    Privilege {
        assignment: PrivilegeAssignment,
        #[arg(long)]
        clear: bool,
    },
    Pair {
        asn: AsnId,
        endpoint: String,
        secret: String,
    },
    SetLinkState {
        asn: AsnId,
        state: LinkArg,
    },
    /// Any command as JSON, e.g. `{"command": "add-boss", ...}`.
    Raw {
        json: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkArg {
    Active,
    Suspended,
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

impl AdminCmd {
    fn into_command(self) -> Result<AdminCommand, String> {
        use AdminCmd as C;
        Ok(match self {
            C::RegisterUser { local, password, display_name } => {
                AdminCommand::RegisterUser { user: local, password, display_name }
            }
            C::SetPassword { user, password } => AdminCommand::SetPassword { user, password },
            C::Follow { target, unfollow } => AdminCommand::Follow { target, following: !unfollow },
            C::CreateSubdomain { name, parent, admin } => AdminCommand::CreateSubdomain { name, parent, admin },
            C::CreatePublicGroup { name, parent, policies } => AdminCommand::CreatePublicGroup {
                name,
                parent,
                policies: policies.map(|p| read(&p)).transpose()?.unwrap_or_default(),
            },
            C::CreatePrivateGroup { name, parent } => AdminCommand::CreatePrivateGroup { name, parent },
            C::AddMember { circle, user } => AdminCommand::AddMember { circle, user },
            C::RemoveMember { circle, user } => AdminCommand::RemoveMember { circle, user },
            C::SetPolicies { circle, file } => AdminCommand::SetPolicies { circle, policies: read(&file)? },
            C::AddBoss { circle, user } => AdminCommand::AddBoss { circle, user },
            C::CreateRole { name, parent } => AdminCommand::CreateRole { name, parent, privileges: Default::default() },
            C::SetRoleParent { role, parent } => AdminCommand::SetRoleParent { role, parent },
            C::AssignRole { user, role } => AdminCommand::AssignRole { user, role },
            C::UnassignRole { user, role } => AdminCommand::UnassignRole { user, role },
            C::Privilege { assignment, clear } => AdminCommand::Privilege { assignment, clear },
            C::Pair { asn, endpoint, secret } => AdminCommand::Pair { asn, endpoint, secret },
            C::SetLinkState { asn, state } => AdminCommand::SetLinkState {
                asn,
                state: match state {
                    LinkArg::Active => LinkState::Active,
                    LinkArg::Suspended => LinkState::Suspended,
                },
            },
            C::Raw { json } => serde_json::from_str(&json).map_err(|e| format!("invalid command json: {e}"))?,
        })
    }
}

fn init_logging(default: &str) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn serve(config: &Path, listen: Option<SocketAddr>) -> Result<(), String> {
    let mut cfg = Config::load(config).map_err(|e| e.to_string())?;
    if let Some(l) = listen {
        cfg.listen = l;
    }
    let gw = cfg.open().map_err(|e| e.to_string())?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(prism_core::gateway::http::serve(gw.clone(), cfg.listen)).map_err(|e| e.to_string())?;
    gw.flush();
    Ok(())
}

fn admin(url: &str, user: &UserId, password: &str, cmd: AdminCmd) -> Result<(), String> {
    let cmd = cmd.into_command()?;
    let mut client = Client::new(url).map_err(|e| e.to_string())?;
    client.login(user, password).map_err(|e| e.to_string())?;
    let out = client.admin(&cmd).map_err(|e| e.to_string())?;
    println!("{}", serde_json::to_string_pretty(&out).unwrap_or_default());
    Ok(())
}

fn scenario(file: &Path) -> Result<(), String> {
    let s = Scenario::load(file).map_err(|e| e.to_string())?;
    let report = s.run().map_err(|e| e.to_string())?;
    for f in &report.failures {
        println!("FAIL {f}");
    }
    println!("{} steps, {} failures", report.steps, report.failures.len());
    if report.passed() {
        Ok(())
    } else {
        Err("scenario failed".into())
    }
}

fn emit(report: &BenchReport, out: &Path) -> Result<(), String> {
    report.write_to(out).map_err(|e| format!("{}: {e}", out.display()))?;
    print!("{}", report.summary());
    Ok(())
}

fn run_bench(which: Which, out: &Path, config: Option<&Path>) -> Result<(), String> {
    let cfg = match config {
        Some(p) => BenchConfig::from_toml(&read(p)?).map_err(|e| e.to_string())?,
        None => BenchConfig::default(),
    };
    match which {
        Which::Chain => {
            let r = bench::run_chain_bench(&cfg);
            emit(&r, out)?;
        }
        Which::Rules => {
            let r = bench::run_rules_bench(&cfg);
            emit(&r, out)?;
        }
        Which::Fanout => {
            let mut delivered = BTreeMap::new();
            for &w in &cfg.fanout.widths {
                let mut report = BenchReport::new(format!("fanout-w{w}"), "asns");
                for &n in &cfg.fanout.asns {
                    let run = bench::run_fanout_bench(&cfg, n, w, cfg.fanout.reps);
                    delivered.entry(n).or_insert_with(Vec::new).push(run.delivered);
                    report.points.push(run.point);
                }
                emit(&report, out)?;
            }
            for (n, sets) in delivered {
                let same = sets.windows(2).all(|p| p[0] == p[1]);
                println!("asns {n}: delivered sets identical across widths: {same}");
            }
        }
        Which::Capacity => {
            let r =
                bench::run_capacity_bench(&cfg, &cfg.capacity.clients, Duration::from_millis(cfg.capacity.duration_ms));
            emit(&r, out)?;
            if r.total_errors() > 0 {
                return Err(format!("{} failed operations", r.total_errors()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve { config, listen } => {
            init_logging("info");
            serve(&config, listen)
        }
        Command::Admin { url, user, password, command } => {
            init_logging("warn");
            admin(&url, &user, &password, command)
        }
        Command::Scenario { command: ScenarioCmd::Run { file } } => {
            init_logging("warn");
            scenario(&file)
        }
        Command::Bench { which, out, config } => {
            init_logging("warn");
            run_bench(which, &out, config.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
