//! `comctl`: operator commands against one fedlet's HTTP API.
//!
//! Reads are plain GETs. Commands that change state are `control`
//! envelopes signed with the fedlet's own key and POSTed to the matching
//! route. Exit codes: 0 ok, 2 usage, 3 unreachable, 4 not found or denied,
//! 5 invalid, 1 anything else.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use comverse_core::fedlet::{ApiError, ApiRequest, ErrorClass};
use comverse_core::identity::{FedId, KeyPair, SecretSeed};
use comverse_core::transport::{Address, Envelope, MsgType, Outgoing};
use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Parser, Debug)]
#[command(name = "comctl", version, about = "Manage a fedlet's community memberships")]
pub struct Cli {
    /// Fedlet base URL, e.g. http://127.0.0.1:7400
    #[arg(long, env = "COMVERSE_FEDLET", global = true)]
    pub fedlet: Option<String>,
    /// File holding the fedlet's hex key seed.
    #[arg(long, env = "COMVERSE_KEY", global = true)]
    pub key: Option<PathBuf>,
    /// Config file; defaults to comverse/comctl.toml under the user config dir.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print structured documents instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// List community memberships.
    List,
    /// Ask to join a community.
    Join {
        community: String,
        /// Seconds to wait for the community's answer.
        #[arg(long)]
        wait: Option<u64>,
    },
    /// Leave a community.
    Leave { community: String },
    /// Share data with a community; no data pauses sharing.
    Share {
        community: String,
        /// Comma-separated data references.
        #[arg(value_delimiter = ',')]
        data: Vec<String>,
        /// Revoke sharing, or with data, withdraw just those references.
        #[arg(long)]
        revoke: bool,
        /// Let the community see these only as aggregates.
        #[arg(long)]
        aggregate_only: bool,
    },
    /// Pending join requests of the hosted community.
    Requests,
    Approve { member: String },
    Deny { member: String },
    /// Members of the hosted community.
    Members,
    /// Refused data accesses.
    Incidents,
    Status,
}

#[derive(Debug, Error)]
pub enum CtlError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot reach {url}: {message}")]
    Connection { url: String, message: String },
    #[error("{0}")]
    Api(ApiError),
    #[error("{0}")]
    Internal(String),
}

impl CtlError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CtlError::Usage(_) => ErrorClass::Usage,
            CtlError::Connection { .. } => ErrorClass::Connection,
            CtlError::Api(e) => e.class,
            CtlError::Internal(_) => ErrorClass::Internal,
        }
    }

    pub fn exit_code(&self) -> i32 {
        exit_code(self.class())
    }

    fn to_json(&self) -> Value {
        ApiError::new(self.class(), self.message()).to_json()
    }

    fn message(&self) -> String {
        match self {
            CtlError::Api(e) => e.message.clone(),
            other => other.to_string(),
        }
    }
}

pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Usage => 2,
        ErrorClass::Connection | ErrorClass::DeliveryFailure => 3,
        ErrorClass::NotFound | ErrorClass::Denied | ErrorClass::Auth | ErrorClass::AlreadyMember => 4,
        ErrorClass::InvalidArgument | ErrorClass::Validation => 5,
        ErrorClass::Internal => 1,
    }
}

#[derive(Debug, Default, Deserialize)]
struct ConfigFile {
    fedlet: Option<String>,
    key: Option<PathBuf>,
}

fn default_config_path() -> Option<PathBuf> {
    dirs::config_dir().map(|d| d.join("comverse").join("comctl.toml"))
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile, CtlError> {
    let (path, explicit) = match path {
        Some(p) => (p.to_path_buf(), true),
        None => match default_config_path() {
            Some(p) => (p, false),
            None => return Ok(ConfigFile::default()),
        },
    };
    match fs::read_to_string(&path) {
        Ok(text) => toml::from_str(&text).map_err(|e| CtlError::Usage(format!("{}: {e}", path.display()))),
        Err(_) if !explicit => Ok(ConfigFile::default()),
        Err(e) => Err(CtlError::Usage(format!("{}: {e}", path.display()))),
    }
}

fn fed_id(s: &str) -> Result<FedId, CtlError> {
    FedId::new(s).map_err(|e| CtlError::Api(ApiError::new(ErrorClass::InvalidArgument, e.to_string())))
}

struct Client {
    base: String,
    http: reqwest::blocking::Client,
}

impl Client {
    fn new(base: &str) -> Result<Client, CtlError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| CtlError::Internal(e.to_string()))?;
        Ok(Client {
            base: base.trim_end_matches('/').to_string(),
            http,
        })
    }

    fn finish(&self, url: String, sent: reqwest::Result<reqwest::blocking::Response>) -> Result<Value, CtlError> {
        let resp = sent.map_err(|e| CtlError::Connection {
            url: url.clone(),
            message: e.to_string(),
        })?;
        let ok = resp.status().is_success();
        let status = resp.status();
        let body: Value = resp
            .json()
            .map_err(|e| CtlError::Internal(format!("{url} answered {status} with a non-JSON body: {e}")))?;
        if ok {
            return Ok(body);
        }
        Err(match ApiError::from_json(&body) {
            Some(e) => CtlError::Api(e),
            None => CtlError::Internal(format!("{url} answered {status}: {body}")),
        })
    }

    fn get(&self, path: &str) -> Result<Value, CtlError> {
        let url = format!("{}{path}", self.base);
        let sent = self.http.get(&url).send();
        self.finish(url, sent)
    }

    fn post(&self, path: &str, env: &Envelope) -> Result<Value, CtlError> {
        let url = format!("{}{path}", self.base);
        let sent = self.http.post(&url).json(env).send();
        self.finish(url, sent)
    }

    /// Sign `req` as the fedlet itself and POST it to `path`.
    fn control(&self, key: &KeyPair, path: &str, req: &ApiRequest) -> Result<Value, CtlError> {
        let status = self.get("/status")?;
        let host: FedId = serde_json::from_value(status["host_id"].clone())
            .map_err(|e| CtlError::Internal(format!("status has no host id: {e}")))?;
        let address: Address = serde_json::from_value(status["address"].clone())
            .map_err(|e| CtlError::Internal(format!("status has no address: {e}")))?;
        let seq = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        let env = Envelope::seal(Outgoing::json(host, address, MsgType::Control, req), seq, key);
        self.post(path, &env)
    }
}

fn load_key(path: Option<&Path>) -> Result<KeyPair, CtlError> {
    let path = path.ok_or_else(|| CtlError::Usage("this command needs --key, COMVERSE_KEY or key in the config".into()))?;
    let text = fs::read_to_string(path).map_err(|e| CtlError::Usage(format!("{}: {e}", path.display())))?;
    let seed = SecretSeed::from_hex(text.trim()).map_err(|e| CtlError::Usage(format!("{}: {e}", path.display())))?;
    Ok(KeyPair::from_seed(seed))
}

fn text(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn acl_summary(acl: &Value) -> String {
    let rules: Vec<String> = acl
        .as_array()
        .map(|a| {
            a.iter()
                .map(|r| format!("{}:{}", text(&r["pattern"]), text(&r["permission"])))
                .collect()
        })
        .unwrap_or_default();
    if rules.is_empty() {
        "-".into()
    } else {
        rules.join(",")
    }
}

fn table(headers: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<String>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers.iter().map(|h| h.to_string()).collect());
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn render(cmd: &Command, v: &Value) -> String {
    let rows = |v: &Value| v.as_array().cloned().unwrap_or_default();
    match cmd {
        Command::List => {
            if rows(v).is_empty() {
                return "no community memberships\n".into();
            }
            let r = rows(v)
                .iter()
                .map(|c| {
                    vec![
                        text(&c["community_id"]),
                        text(&c["status"]),
                        text(&c["member_fed_id"]),
                        acl_summary(&c["acl"]),
                    ]
                })
                .collect();
            table(&["COMMUNITY", "STATUS", "MEMBER ID", "SHARED"], r)
        }
        Command::Requests => {
            if rows(v).is_empty() {
                return "no pending requests\n".into();
            }
            let r = rows(v)
                .iter()
                .map(|q| vec![text(&q["member_id"]), text(&q["name"]), text(&q["address"])])
                .collect();
            table(&["MEMBER", "NAME", "ADDRESS"], r)
        }
        Command::Members => {
            if rows(v).is_empty() {
                return "no members\n".into();
            }
            let r = rows(v)
                .iter()
                .map(|m| vec![text(&m["member_id"]), text(&m["status"]), text(&m["token_expires_at"])])
                .collect();
            table(&["MEMBER", "STATUS", "TOKEN EXPIRES"], r)
        }
        Command::Incidents => {
            if rows(v).is_empty() {
                return "no incidents\n".into();
            }
            let r = rows(v)
                .iter()
                .map(|i| vec![text(&i["at"]), text(&i["principal"]), text(&i["data_ref"]), text(&i["reason"])])
                .collect();
            table(&["AT", "PRINCIPAL", "DATA", "REASON"], r)
        }
        Command::Status => {
            let hosting = v["hosting"]["community_id"].as_str().unwrap_or("-").to_string();
            let m = &v["members"];
            format!(
                "host:         {}\naddress:      {}\nhosting:      {hosting}\nmembers:      {} active, {} stale, {} pending, {} left\ncommunities:  {}\nrequests:     {}\nincidents:    {}\ndropped:      {}\n",
                text(&v["host_id"]),
                text(&v["address"]),
                m["active"],
                m["stale"],
                m["pending"],
                m["left"],
                v["communities"],
                v["queued_requests"],
                v["incidents"],
                v["dropped_envelopes"],
            )
        }
        Command::Join { community, .. } | Command::Leave { community } => {
            format!("{community}: {}\n", text(&v["status"]))
        }
        Command::Share { community, .. } => format!(
            "{community}: sharing {} [{}]\n",
            text(&v["share_status"]),
            acl_summary(&v["acl"])
        ),
        Command::Approve { member } | Command::Deny { member } => format!("{member}: {}\n", text(&v["status"])),
    }
}

fn wait_for_answer(client: &Client, community: &str, secs: u64) -> Result<Value, CtlError> {
    let deadline = Instant::now() + Duration::from_secs(secs);
    loop {
        let list = client.get("/communities")?;
        let row = list
            .as_array()
            .and_then(|rows| rows.iter().find(|r| r["community_id"] == community))
            .cloned()
            .unwrap_or(Value::Null);
        match row["status"].as_str() {
            Some("denied") => {
                return Err(CtlError::Api(ApiError::new(
                    ErrorClass::Denied,
                    format!("{community} denied the join request"),
                )))
            }
            Some("pending") | None if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(200)),
            _ => return Ok(row),
        }
    }
}

fn execute(cli: &Cli) -> Result<Value, CtlError> {
    let config = read_config(cli.config.as_deref())?;
    let base = cli
        .fedlet
        .clone()
        .or(config.fedlet)
        .ok_or_else(|| CtlError::Usage("no fedlet given: use --fedlet, COMVERSE_FEDLET or the config file".into()))?;
    let key_path = cli.key.clone().or(config.key);
    let client = Client::new(&base)?;
    let key = || load_key(key_path.as_deref());
    match &cli.command {
        Command::List => client.get("/communities"),
        Command::Requests => client.get("/requests"),
        Command::Members => client.get("/members"),
        Command::Incidents => client.get("/incidents"),
        Command::Status => client.get("/status"),
        Command::Join { community, wait } => {
            let req = ApiRequest::Join {
                community: fed_id(community)?,
            };
            let sent = client.control(&key()?, "/join", &req)?;
            match wait {
                Some(secs) => wait_for_answer(&client, community, *secs),
                None => Ok(sent),
            }
        }
        Command::Leave { community } => {
            let req = ApiRequest::Leave {
                community: fed_id(community)?,
            };
            client.control(&key()?, "/leave", &req)
        }
        Command::Share {
            community,
            data,
            revoke,
            aggregate_only,
        } => {
            if *revoke && *aggregate_only {
                return Err(CtlError::Usage("--revoke and --aggregate-only do not combine".into()));
            }
            let req = ApiRequest::Share {
                community: fed_id(community)?,
                data: data.iter().filter(|d| !d.is_empty()).cloned().collect(),
                revoke: *revoke,
                aggregate_only: *aggregate_only,
            };
            client.control(&key()?, "/share", &req)
        }
        Command::Approve { member } => {
            let id = fed_id(member)?;
            client.control(&key()?, &format!("/requests/{id}/approve"), &ApiRequest::Approve { member: id.clone() })
        }
        Command::Deny { member } => {
            let id = fed_id(member)?;
            client.control(&key()?, &format!("/requests/{id}/deny"), &ApiRequest::Deny { member: id.clone() })
        }
    }
}

/// Run one command line; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return 2;
            }
            let _ = write!(out, "{e}");
            return 0;
        }
    };
    match execute(&cli) {
        Ok(v) => {
            let body = if cli.json {
                serde_json::to_string_pretty(&v).expect("json values print") + "\n"
            } else {
                render(&cli.command, &v)
            };
            let _ = out.write_all(body.as_bytes());
            0
        }
        Err(e) => {
            if cli.json {
                let _ = writeln!(out, "{}", serde_json::to_string_pretty(&e.to_json()).expect("json values print"));
            }
            let _ = writeln!(err, "comctl: {}: {}", e.class(), e.message());
            e.exit_code()
        }
    }
}
