//! The `gate` command line. Apart from `serve` and `toy-upstream`, every
//! verb is a client of the admin API.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use gate_core::model::{AuthMethod, RoleId, UserId, WorkflowId};
use gate_core::store::AuditRecord;
use reqwest::header::{AUTHORIZATION, CONTENT_TYPE};
use reqwest::Method;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tracing_subscriber::EnvFilter;

use crate::admin::{
    ErrorBody, PromoteRequest, RecordingStart, RecordingView, RoleDto, StepView, TokenDto,
    UpstreamDto, UserInput, UserView, PREFIX,
};
use crate::config::GatewayConfig;
use crate::toy::ToyApp;

#[derive(Debug, Parser)]
#[command(
    name = "gate",
    version,
    about = "Workflow-enforcing reverse-proxy gateway"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Remote {
    /// Gateway base URL.
    #[arg(
        long,
        env = "GATE_URL",
        default_value = "http://127.0.0.1:8080",
        global = true
    )]
    pub url: String,
    /// Admin bearer token.
    #[arg(long, env = "GATE_ADMIN_TOKEN", hide_env_values = true, global = true)]
    pub token: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the gateway (and the embedded identity provider if enabled).
    Serve {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Run the demonstration upstream application.
    ToyUpstream {
        #[arg(long, default_value = "127.0.0.1:9000")]
        listen: SocketAddr,
        /// Origin used in absolute links; defaults to http://<listen>.
        #[arg(long)]
        origin: Option<String>,
        /// Accepted login as `name=password`; repeatable.
        #[arg(long = "user", value_parser = parse_pair)]
        users: Vec<(String, String)>,
    },
    /// Record workflows by example.
    Record {
        #[command(flatten)]
        remote: Remote,
        #[command(subcommand)]
        action: RecordCmd,
    },
    /// Manage users.
    User {
        #[command(flatten)]
        remote: Remote,
        #[command(subcommand)]
        action: UserCmd,
    },
    /// Manage roles.
    Role {
        #[command(flatten)]
        remote: Remote,
        #[command(subcommand)]
        action: RoleCmd,
    },
    /// Write the policy database as XML.
    Export {
        #[command(flatten)]
        remote: Remote,
        /// Output file; standard output if omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Replace the policy database with an XML document.
    Import {
        #[command(flatten)]
        remote: Remote,
        file: PathBuf,
    },
    /// Read the audit log.
    Audit {
        #[command(flatten)]
        remote: Remote,
        #[command(subcommand)]
        action: AuditCmd,
    },
}

#[derive(Debug, Subcommand)]
pub enum RecordCmd {
    Start {
        #[arg(long)]
        name: String,
        /// User whose requests are captured.
        #[arg(long)]
        trainer: String,
    },
    Stop {
        id: u64,
    },
    Promote {
        id: u64,
        #[arg(long)]
        role: String,
        #[arg(long)]
        workflow_id: Option<String>,
        #[arg(long)]
        name: Option<String>,
    },
    List,
    Steps {
        id: u64,
    },
}

#[derive(Debug, Subcommand)]
#[allow(clippy::large_enum_variant)]
pub enum UserCmd {
    Add {
        #[arg(long)]
        id: String,
        #[arg(long, env = "GATE_USER_PASSWORD", hide_env_values = true)]
        password: String,
        #[arg(long = "role", required = true)]
        roles: Vec<String>,
        #[arg(long)]
        federated_name: Option<String>,
        #[arg(long)]
        idp: Option<String>,
        #[arg(long, requires = "usercode")]
        firmcode: Option<String>,
        #[arg(long, requires = "firmcode")]
        usercode: Option<String>,
        #[arg(long, requires = "upstream_secret")]
        upstream_user: Option<String>,
        #[arg(long, requires = "upstream_user")]
        upstream_secret: Option<String>,
    },
    List,
}

#[derive(Debug, Subcommand)]
pub enum RoleCmd {
    Add {
        #[arg(long)]
        id: String,
        #[arg(long)]
        name: Option<String>,
        #[arg(long = "workflow")]
        workflows: Vec<String>,
        /// Required sign-on method: password or token; repeatable.
        #[arg(long = "auth", value_parser = parse_method, required = true)]
        auth: Vec<AuthMethod>,
    },
    List,
}

#[derive(Debug, Subcommand)]
pub enum AuditCmd {
    /// Print the newest records.
    Tail {
        #[arg(short = 'n', long, default_value_t = 20)]
        lines: usize,
        #[arg(long)]
        user: Option<String>,
        #[arg(long)]
        decision: Option<String>,
    },
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .ok_or_else(|| format!("expected name=password, got `{s}`"))
}

fn parse_method(s: &str) -> Result<AuthMethod, String> {
    AuthMethod::parse(s).ok_or_else(|| format!("unknown method `{s}`"))
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match rt.block_on(run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub async fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Serve { config } => crate::serve(GatewayConfig::load(&config)?).await,
        Command::ToyUpstream {
            listen,
            origin,
            users,
        } => {
            let origin = origin.unwrap_or_else(|| format!("http://{listen}"));
            let app = ToyApp::new(&origin, users);
            let l = tokio::net::TcpListener::bind(listen).await?;
            tracing::info!(addr = %listen, "toy upstream listening");
            axum::serve(l, crate::toy::router(app)).await?;
            Ok(())
        }
        Command::Record { remote, action } => record(&Client::new(remote)?, action).await,
        Command::User { remote, action } => user(&Client::new(remote)?, action).await,
        Command::Role { remote, action } => role(&Client::new(remote)?, action).await,
        Command::Export { remote, out } => {
            let xml = Client::new(remote)?
                .raw(Method::GET, "/export", None)
                .await?;
            match out {
                Some(p) => {
                    std::fs::write(&p, xml).with_context(|| format!("writing {}", p.display()))?
                }
                None => print!("{}", String::from_utf8_lossy(&xml)),
            }
            Ok(())
        }
        Command::Import { remote, file } => {
            let xml =
                std::fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            Client::new(remote)?
                .raw(Method::POST, "/import", Some(xml))
                .await?;
            println!("imported {}", file.display());
            Ok(())
        }
        Command::Audit {
            remote,
            action:
                AuditCmd::Tail {
                    lines,
                    user,
                    decision,
                },
        } => {
            let mut q = vec![("limit", lines.to_string())];
            q.extend(user.map(|u| ("user", u)));
            q.extend(decision.map(|d| ("decision", d)));
            let query = url::form_urlencoded::Serializer::new(String::new())
                .extend_pairs(q)
                .finish();
            let records: Vec<AuditRecord> =
                Client::new(remote)?.get(&format!("/audit?{query}")).await?;
            for r in records {
                println!("{}", audit_line(&r));
            }
            Ok(())
        }
    }
}

pub fn audit_line(r: &AuditRecord) -> String {
    format!(
        "{:>6} {} {:<15} {:<8} {:<8} {} {}",
        r.seq,
        r.at,
        r.decision.as_str(),
        r.user,
        r.session_prefix,
        r.page,
        r.reason
    )
}

async fn record(c: &Client, action: RecordCmd) -> anyhow::Result<()> {
    match action {
        RecordCmd::Start { name, trainer } => {
            let r: RecordingView = c
                .send(
                    Method::POST,
                    "/recordings",
                    &RecordingStart {
                        name,
                        trainer: UserId::new(trainer),
                    },
                )
                .await?;
            println!("recording {} started for {}", r.id, r.trainer);
        }
        RecordCmd::Stop { id } => {
            let r: RecordingView = c
                .send(Method::POST, &format!("/recordings/{id}/stop"), &())
                .await?;
            println!("recording {} stopped with {} steps", r.id, r.step_count);
        }
        RecordCmd::Promote {
            id,
            role,
            workflow_id,
            name,
        } => {
            let wf: serde_json::Value = c
                .send(
                    Method::POST,
                    &format!("/recordings/{id}/promote"),
                    &PromoteRequest {
                        role: RoleId::new(role),
                        workflow_id: workflow_id.map(WorkflowId::new),
                        name,
                    },
                )
                .await?;
            println!("workflow {} created", wf["id"].as_str().unwrap_or("?"));
        }
        RecordCmd::List => {
            let rs: Vec<RecordingView> = c.get("/recordings").await?;
            for r in rs {
                println!(
                    "{}\t{:?}\t{}\t{} steps\t{}",
                    r.id, r.state, r.trainer, r.step_count, r.name
                );
            }
        }
        RecordCmd::Steps { id } => {
            let steps: Vec<StepView> = c.get(&format!("/recordings/{id}/steps")).await?;
            for s in steps {
                let params: Vec<String> = s
                    .step
                    .params
                    .iter()
                    .map(|(k, v)| format!("{k}={}", v.join("|")))
                    .collect();
                println!("{}\t{}\t{}", s.index, s.step.page, params.join("&"));
            }
        }
    }
    Ok(())
}

async fn user(c: &Client, action: UserCmd) -> anyhow::Result<()> {
    match action {
        UserCmd::Add {
            id,
            password,
            roles,
            federated_name,
            idp,
            firmcode,
            usercode,
            upstream_user,
            upstream_secret,
        } => {
            let input = UserInput {
                id: UserId::new(id),
                federated_name,
                idp,
                password,
                roles: roles.into_iter().map(RoleId::new).collect(),
                token: firmcode
                    .zip(usercode)
                    .map(|(firmcode, usercode)| TokenDto { firmcode, usercode }),
                upstream: upstream_user
                    .zip(upstream_secret)
                    .map(|(username, secret)| UpstreamDto { username, secret }),
            };
            let u: UserView = c.send(Method::POST, "/users", &input).await?;
            println!("user {} created", u.id);
        }
        UserCmd::List => {
            let us: Vec<UserView> = c.get("/users").await?;
            for u in us {
                let roles: Vec<&str> = u.roles.iter().map(|r| r.as_str()).collect();
                println!(
                    "{}\t{}\t{}\t{}{}",
                    u.id,
                    u.federated_name,
                    roles.join(","),
                    if u.has_token { "token" } else { "-" },
                    u.upstream_username
                        .map(|n| format!("\tupstream={n}"))
                        .unwrap_or_default()
                );
            }
        }
    }
    Ok(())
}

async fn role(c: &Client, action: RoleCmd) -> anyhow::Result<()> {
    match action {
        RoleCmd::Add {
            id,
            name,
            workflows,
            auth,
        } => {
            let dto = RoleDto {
                id: RoleId::new(id),
                name,
                workflows: workflows.into_iter().map(WorkflowId::new).collect(),
                auth: auth.into_iter().collect(),
            };
            let r: RoleDto = c.send(Method::POST, "/roles", &dto).await?;
            println!("role {} created", r.id);
        }
        RoleCmd::List => {
            let rs: Vec<RoleDto> = c.get("/roles").await?;
            for r in rs {
                let wfs: Vec<&str> = r.workflows.iter().map(|w| w.as_str()).collect();
                let auth: Vec<&str> = r.auth.iter().map(|a| a.as_str()).collect();
                println!("{}\t{}\t{}", r.id, auth.join(","), wfs.join(","));
            }
        }
    }
    Ok(())
}

/// Thin admin-API client.
pub struct Client {
    base: String,
    token: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(remote: Remote) -> anyhow::Result<Self> {
        let Some(token) = remote.token.filter(|t| !t.is_empty()) else {
            bail!("no admin token: pass --token or set GATE_ADMIN_TOKEN");
        };
        Ok(Client {
            base: format!("{}{PREFIX}", remote.url.trim_end_matches('/')),
            token,
            http: reqwest::Client::new(),
        })
    }

    pub async fn raw(
        &self,
        method: Method,
        path: &str,
        body: Option<Vec<u8>>,
    ) -> anyhow::Result<Vec<u8>> {
        let mut req = self
            .http
            .request(method, format!("{}{path}", self.base))
            .header(AUTHORIZATION, format!("Bearer {}", self.token));
        if let Some(b) = body {
            req = req.header(CONTENT_TYPE, "application/json").body(b);
        }
        let resp = req
            .send()
            .await
            .with_context(|| format!("contacting {}", self.base))?;
        let status = resp.status();
        let bytes = resp.bytes().await?.to_vec();
        if !status.is_success() {
            match serde_json::from_slice::<ErrorBody>(&bytes) {
                Ok(e) => bail!("{} ({status}): {}", e.error, e.message),
                Err(_) => bail!("{status}: {}", String::from_utf8_lossy(&bytes)),
            }
        }
        Ok(bytes)
    }

    pub async fn get<T: DeserializeOwned>(&self, path: &str) -> anyhow::Result<T> {
        let bytes = self.raw(Method::GET, path, None).await?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub async fn send<B: Serialize, T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: &B,
    ) -> anyhow::Result<T> {
        let bytes = self
            .raw(method, path, Some(serde_json::to_vec(body)?))
            .await?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
