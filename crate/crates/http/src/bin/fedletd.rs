use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use comverse_core::fedctl::JoinPolicy;
use comverse_core::fedlet::{Fedlet, FedletConfig};
use comverse_core::identity::{FedId, KeyPair, PublicKey, SecretSeed};
use comverse_core::sim::{node_key, SimConfig, Simulation};
use comverse_core::transport::{Address, KeyDirectory};
use comverse_http::{FedletServer, HttpTransport, SimGateway};
use tracing_subscriber::EnvFilter;

/// Fedlet daemon.
#[derive(Parser, Debug)]
#[command(name = "fedletd", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Serve one fedlet over HTTP.
    Serve(Serve),
    /// Serve the fedlets of a simulated network under /n/{node}/.
    Sim(SimArgs),
}

#[derive(Args, Debug)]
struct Serve {
    #[arg(long)]
    fed_id: String,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 7400)]
    port: u16,
    /// Hex secret seed; created if missing.
    #[arg(long)]
    key: PathBuf,
    /// Signed directory of peer keys and addresses.
    #[arg(long, requires = "authority")]
    directory: Option<PathBuf>,
    /// Hex public key the directory must be signed with.
    #[arg(long)]
    authority: Option<String>,
    /// Ledger and store are loaded from here and saved on shutdown.
    #[arg(long)]
    state: Option<PathBuf>,
    /// Host a community under this fedlet's id.
    #[arg(long)]
    host_community: bool,
    /// Member ids admitted without review.
    #[arg(long, value_delimiter = ',')]
    allow: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    deny: Vec<String>,
    #[arg(long, default_value_t = 250)]
    tick_ms: u64,
}

#[derive(Args, Debug)]
struct SimArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 7400)]
    port: u16,
    /// Community node name.
    #[arg(long)]
    community: String,
    /// Other node names.
    #[arg(long, value_delimiter = ',')]
    nodes: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    allow: Vec<String>,
    /// Write each node's hex key seed here, one `<node>.key` per node.
    #[arg(long)]
    key_dir: Option<PathBuf>,
}

fn ids(list: &[String]) -> Result<BTreeSet<FedId>> {
    list.iter().map(|s| FedId::new(s.as_str()).map_err(Into::into)).collect()
}

fn load_or_create_key(path: &Path) -> Result<KeyPair> {
    if path.exists() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let seed = SecretSeed::from_hex(text.trim()).context("key file must hold a hex seed")?;
        return Ok(KeyPair::from_seed(seed));
    }
    let key = KeyPair::generate(&mut rand::rng());
    fs::write(path, key.secret_seed().to_hex()).with_context(|| format!("writing {}", path.display()))?;
    Ok(key)
}

async fn serve(args: Serve) -> Result<()> {
    let id = FedId::new(args.fed_id.as_str())?;
    let key = load_or_create_key(&args.key)?;
    let directory = match (&args.directory, &args.authority) {
        (Some(path), Some(auth)) => {
            let trusted = PublicKey::from_hex(auth).context("authority must be a hex public key")?;
            KeyDirectory::load_signed(path, &trusted)?
        }
        _ => KeyDirectory::default(),
    };
    let address = Address::new(args.host.as_str(), Some(args.port), id.clone())?;
    let mut fedlet = Fedlet::new(address.clone(), key, directory.shared(), FedletConfig::default())?;
    if let Some(state) = &args.state {
        fedlet.load(state)?;
    }
    if args.host_community && fedlet.fedctl().hosted().is_none() {
        let policy = JoinPolicy {
            allow: ids(&args.allow)?,
            deny: ids(&args.deny)?,
        };
        fedlet.host_community(id.as_str(), policy);
    }
    let server = FedletServer::new(fedlet, HttpTransport::default());
    server.spawn_ticker(Duration::from_millis(args.tick_ms.max(1)));
    let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await?;
    tracing::info!("fedlet {address} listening");
    axum::serve(listener, server.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    if let Some(state) = &args.state {
        server.lock().save(state)?;
    }
    Ok(())
}

async fn sim(args: SimArgs) -> Result<()> {
    if args.nodes.contains(&args.community) {
        bail!("{} is both the community and a member", args.community);
    }
    let mut sim = Simulation::new(SimConfig::new(args.seed));
    let community = FedId::new(args.community.as_str())?;
    let allow = ids(&args.allow)?.into_iter().map(|n| n.member_of(&community)).collect();
    sim.add_community(&args.community, JoinPolicy { allow, deny: BTreeSet::new() })?;
    for n in &args.nodes {
        sim.add_node(n)?;
    }
    if let Some(dir) = &args.key_dir {
        fs::create_dir_all(dir)?;
        for n in std::iter::once(&args.community).chain(&args.nodes) {
            fs::write(dir.join(format!("{n}.key")), node_key(args.seed, n).secret_seed().to_hex())?;
        }
    }
    let gateway = SimGateway::new(sim, 30_000);
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", args.port)).await?;
    tracing::info!("simulated fedlets on 127.0.0.1:{}/n/<node>/", args.port);
    axum::serve(listener, gateway.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().cmd {
        Cmd::Serve(a) => serve(a).await,
        Cmd::Sim(a) => sim(a).await,
    }
}
