//! The `pqtt` command suite.

mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use log::info;

pub use config::{from_env, parse_config_file, CliConfig, ConfigError, DEFAULT_CERT_DIR, ENV_PREFIX, KEYS};

use crate::bench::{bench_certgen, render_report, BenchConfig};
use crate::broker::{Broker, BrokerConfig, BrokerIdentity};
use crate::client::{ClientConfig, ClientError, Credentials};
use crate::clock::{Clock, SystemClock};
use crate::devices::{
    run_publisher, run_subscriber, PublisherConfig, SensorEventSource, SimulatedPir,
    SubscriberConfig,
};
use crate::pki::{
    export_secret_key, generate_keypair, import_secret_key, issue_certificate, read_certificate,
    registry, self_signed_ca, verify_certificate, write_certificate, CertificateRequest, PkiError,
    Role, CA_VALIDITY_SECS, DEVICE_VALIDITY_SECS, MAX_SUBJECT_LEN,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, configuration or missing inputs.
    Usage(String),
    /// The operation itself failed.
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "pqtt", version, about = "Post-quantum signed MQTT: CA tooling, broker, devices, benchmark")]
struct Cli {
    /// KEY=VALUE configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Certificate authority operations.
    #[command(subcommand)]
    Ca(CaCommand),
    /// Broker node.
    #[command(subcommand)]
    Broker(BrokerCommand),
    /// Motion-sensing publisher node.
    #[command(subcommand)]
    Publisher(PublisherCommand),
    /// Logging subscriber node.
    #[command(subcommand)]
    Subscriber(SubscriberCommand),
    /// Benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Subcommand, Debug)]
enum CaCommand {
    /// Create a self-signed CA in the certificate directory.
    Init(CaInitArgs),
    /// Issue a device or broker certificate signed by the CA.
    Issue(CaIssueArgs),
}

#[derive(Subcommand, Debug)]
enum BrokerCommand {
    /// Run the broker until interrupted.
    Run(BrokerArgs),
}

#[derive(Subcommand, Debug)]
enum PublisherCommand {
    /// Run the publisher until interrupted.
    Run(PublisherArgs),
}

#[derive(Subcommand, Debug)]
enum SubscriberCommand {
    /// Run the subscriber until interrupted.
    Run(SubscriberArgs),
}

#[derive(Subcommand, Debug)]
enum BenchCommand {
    /// Time key generation plus certificate issuance per scheme.
    Certgen(BenchArgs),
}

#[derive(Args, Debug)]
struct CaInitArgs {
    #[arg(long)]
    cert_dir: Option<String>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long, default_value = "pqtt-ca")]
    subject: String,
    /// Replace an existing CA.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct CaIssueArgs {
    #[arg(long)]
    cert_dir: Option<String>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    subject: String,
    /// broker, publisher or subscriber.
    #[arg(long)]
    role: String,
    /// Replace an existing certificate for the subject.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct BrokerArgs {
    #[arg(long)]
    cert_dir: Option<String>,
    #[arg(long)]
    broker_port: Option<String>,
    #[arg(long, default_value = "0.0.0.0")]
    bind: String,
    /// true or false.
    #[arg(long)]
    verify_at_broker: Option<String>,
    /// Subject of the broker certificate.
    #[arg(long, default_value = "broker")]
    subject: String,
    /// Stop after this many seconds.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args, Debug)]
struct ClientArgs {
    #[arg(long)]
    cert_dir: Option<String>,
    #[arg(long)]
    broker_host: Option<String>,
    #[arg(long)]
    broker_port: Option<String>,
    #[arg(long)]
    client_id: Option<String>,
    /// Certificate subject; defaults to the client id.
    #[arg(long)]
    subject: Option<String>,
    #[arg(long, default_value_t = 30)]
    keepalive: u16,
    /// Stop after this many seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    motion_topic: Option<String>,
}

#[derive(Args, Debug)]
struct PublisherArgs {
    #[command(flatten)]
    client: ClientArgs,
    #[arg(long)]
    heartbeat_secs: Option<String>,
    /// Comma-separated trigger offsets in milliseconds.
    #[arg(long, value_delimiter = ',', value_name = "MS,...")]
    simulate_schedule: Option<Vec<u64>>,
    /// Seed for the simulated sensor.
    #[arg(long)]
    seed: Option<u64>,
    /// Mean seconds between simulated triggers.
    #[arg(long, default_value_t = 10.0)]
    mean_interval_secs: f64,
}

#[derive(Args, Debug)]
struct SubscriberArgs {
    #[command(flatten)]
    client: ClientArgs,
    #[arg(long)]
    log_path: Option<String>,
    /// Do not echo events to standard output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 25)]
    iterations: usize,
    #[arg(long, value_delimiter = ',', default_value = "falcon-1024,rsa-2048")]
    schemes: Vec<String>,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
}

fn flag(map: &mut BTreeMap<String, String>, key: &str, value: &Option<String>) {
    if let Some(v) = value {
        map.insert(key.to_owned(), v.clone());
    }
}

fn load_config<I>(file: Option<&Path>, env: I, flags: BTreeMap<String, String>) -> Result<CliConfig, Failure>
where
    I: IntoIterator<Item = (String, String)>,
{
    let file_values = match file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            parse_config_file(&text, &path.display().to_string())?
        }
        None => BTreeMap::new(),
    };
    Ok(CliConfig::merge(file_values, from_env(env)?, flags)?)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<A, E>(args: A, env: E) -> i32
where
    A: IntoIterator<Item = OsString>,
    E: IntoIterator<Item = (String, String)>,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli, env) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("pqtt: {f}");
            f.exit_code()
        }
    }
}

fn dispatch<E: IntoIterator<Item = (String, String)>>(cli: Cli, env: E) -> CmdResult {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Ca(CaCommand::Init(a)) => {
            let mut flags = BTreeMap::new();
            flag(&mut flags, "CERT_DIR", &a.cert_dir);
            flag(&mut flags, "SCHEME", &a.scheme);
            let cfg = load_config(file, env, flags)?;
            ca_init(&cfg.cert_dir(), &cfg.scheme(), &a.subject, a.force)
        }
        Command::Ca(CaCommand::Issue(a)) => {
            let mut flags = BTreeMap::new();
            flag(&mut flags, "CERT_DIR", &a.cert_dir);
            flag(&mut flags, "SCHEME", &a.scheme);
            let cfg = load_config(file, env, flags)?;
            ca_issue(&cfg.cert_dir(), &a.subject, &a.role, &cfg.scheme(), a.force)
        }
        Command::Broker(BrokerCommand::Run(a)) => {
            let mut flags = BTreeMap::new();
            flag(&mut flags, "CERT_DIR", &a.cert_dir);
            flag(&mut flags, "BROKER_PORT", &a.broker_port);
            flag(&mut flags, "VERIFY_AT_BROKER", &a.verify_at_broker);
            let cfg = load_config(file, env, flags)?;
            broker_run(&cfg, &a)
        }
        Command::Publisher(PublisherCommand::Run(a)) => {
            let mut flags = client_flags(&a.client);
            flag(&mut flags, "HEARTBEAT_SECS", &a.heartbeat_secs);
            let cfg = load_config(file, env, flags)?;
            publisher_run(&cfg, &a)
        }
        Command::Subscriber(SubscriberCommand::Run(a)) => {
            let mut flags = client_flags(&a.client);
            flag(&mut flags, "LOG_PATH", &a.log_path);
            let cfg = load_config(file, env, flags)?;
            subscriber_run(&cfg, &a)
        }
        Command::Bench(BenchCommand::Certgen(a)) => {
            load_config(file, env, BTreeMap::new())?;
            bench_run(&a)
        }
    }
}

fn client_flags(a: &ClientArgs) -> BTreeMap<String, String> {
    let mut flags = BTreeMap::new();
    flag(&mut flags, "CERT_DIR", &a.cert_dir);
    flag(&mut flags, "BROKER_HOST", &a.broker_host);
    flag(&mut flags, "BROKER_PORT", &a.broker_port);
    flag(&mut flags, "CLIENT_ID", &a.client_id);
    flag(&mut flags, "MOTION_TOPIC", &a.motion_topic);
    flags
}

fn now_secs() -> u64 {
    SystemClock.now_secs()
}

fn check_subject(subject: &str) -> CmdResult {
    let ok = !subject.is_empty()
        && subject.len() <= MAX_SUBJECT_LEN
        && subject != "ca"
        && !subject.starts_with('.')
        && subject
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "invalid subject {subject:?}: use 1-{MAX_SUBJECT_LEN} characters from [A-Za-z0-9._-]"
        )))
    }
}

fn scheme_check(name: &str) -> CmdResult {
    registry()
        .by_name(name)
        .map(|_| ())
        .map_err(|_| {
            let known: Vec<_> = registry().descriptors().map(|d| d.name).collect();
            Failure::Usage(format!("unknown scheme {name:?}; available: {}", known.join(", ")))
        })
}

fn pki_runtime(e: PkiError) -> Failure {
    Failure::Runtime(e.to_string())
}

fn pki_input(e: PkiError) -> Failure {
    Failure::Usage(e.to_string())
}

fn ca_init(dir: &Path, scheme: &str, subject: &str, force: bool) -> CmdResult {
    scheme_check(scheme)?;
    check_subject(subject)?;
    let cert_path = dir.join("ca.cert");
    let key_path = dir.join("ca.key");
    if !force && (cert_path.exists() || key_path.exists()) {
        return Err(Failure::Usage(format!(
            "CA already exists in {} (use --force to replace)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    let kp = generate_keypair(scheme, None).map_err(pki_runtime)?;
    let nb = now_secs();
    let ca = self_signed_ca(&kp, subject, nb, nb + CA_VALIDITY_SECS, rand::random::<u64>() >> 1)
        .map_err(pki_runtime)?;
    export_secret_key(&kp, &key_path).map_err(pki_runtime)?;
    write_certificate(&ca, &cert_path).map_err(pki_runtime)?;
    println!("created CA {subject} ({scheme}) in {}", dir.display());
    Ok(())
}

fn ca_issue(dir: &Path, subject: &str, role: &str, scheme: &str, force: bool) -> CmdResult {
    scheme_check(scheme)?;
    check_subject(subject)?;
    let role: Role = role.parse().map_err(|_| {
        Failure::Usage(format!("unknown role {role:?}; use broker, publisher or subscriber"))
    })?;
    if role == Role::Ca {
        return Err(Failure::Usage(
            "only single-level hierarchies are supported: issue broker, publisher or subscriber".into(),
        ));
    }
    let ca_cert = read_certificate(&dir.join("ca.cert")).map_err(pki_input)?;
    let ca_kp = import_secret_key(&dir.join("ca.key")).map_err(pki_input)?;
    if !ca_kp.matches(&ca_cert) {
        return Err(Failure::Usage("ca.key does not match ca.cert".into()));
    }
    let cert_path = dir.join(format!("{subject}.cert"));
    let key_path = dir.join(format!("{subject}.key"));
    if !force && (cert_path.exists() || key_path.exists()) {
        return Err(Failure::Usage(format!(
            "{} already exists (use --force to replace)",
            cert_path.display()
        )));
    }
    let kp = generate_keypair(scheme, None).map_err(pki_runtime)?;
    let nb = now_secs();
    let not_after = (nb + DEVICE_VALIDITY_SECS).min(ca_cert.not_after);
    let cert = issue_certificate(
        &ca_kp,
        &ca_cert,
        &CertificateRequest {
            subject,
            role,
            scheme: kp.scheme(),
            public_key: kp.public_key(),
            not_before: nb,
            not_after,
            serial: rand::random::<u64>() >> 1,
        },
    )
    .map_err(pki_runtime)?;
    export_secret_key(&kp, &key_path).map_err(pki_runtime)?;
    write_certificate(&cert, &cert_path).map_err(pki_runtime)?;
    println!("issued {role} certificate {subject} ({scheme}) in {}", dir.display());
    Ok(())
}

/// Stop flag set by Ctrl-C or after `duration` seconds.
fn stop_signal(duration: Option<f64>) -> Result<Arc<AtomicBool>, Failure> {
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    ctrlc::set_handler(move || s.store(true, Ordering::SeqCst))
        .map_err(|e| Failure::Runtime(format!("installing interrupt handler: {e}")))?;
    if let Some(secs) = duration {
        if !(secs.is_finite() && secs >= 0.0) {
            return Err(Failure::Usage(format!("invalid --duration {secs}")));
        }
        let s = stop.clone();
        let until = Instant::now() + Duration::from_secs_f64(secs);
        thread::spawn(move || {
            while Instant::now() < until && !s.load(Ordering::SeqCst) {
                thread::sleep(Duration::from_millis(20));
            }
            s.store(true, Ordering::SeqCst);
        });
    }
    Ok(stop)
}

fn broker_run(cfg: &CliConfig, a: &BrokerArgs) -> CmdResult {
    let dir = cfg.cert_dir();
    let trust_root = read_certificate(&dir.join("ca.cert")).map_err(pki_input)?;
    let certificate = read_certificate(&dir.join(format!("{}.cert", a.subject))).map_err(pki_input)?;
    let keypair = import_secret_key(&dir.join(format!("{}.key", a.subject))).map_err(pki_input)?;
    if !keypair.matches(&certificate) {
        return Err(Failure::Usage(format!("{}.key does not match {}.cert", a.subject, a.subject)));
    }
    verify_certificate(&certificate, &trust_root, now_secs())
        .map_err(|e| Failure::Usage(format!("broker certificate: {e}")))?;
    if certificate.role != Role::Broker {
        return Err(Failure::Usage(format!(
            "{}.cert has role {}, expected broker",
            a.subject, certificate.role
        )));
    }
    let scheme_name = registry()
        .get(certificate.scheme)
        .map(|p| p.descriptor().name)
        .unwrap_or("unknown");
    let config = BrokerConfig {
        bind_host: a.bind.clone(),
        port: cfg.broker_port()?,
        verify_at_broker: cfg.verify_at_broker()?,
        ..BrokerConfig::default()
    };
    let stop = stop_signal(a.duration)?;
    let broker = Broker::start(
        config.clone(),
        trust_root,
        Some(BrokerIdentity { certificate, keypair }),
        Arc::new(SystemClock),
    )
    .map_err(|e| {
        if e.kind() == ErrorKind::AddrInUse {
            Failure::Runtime(format!("port {} is in use", config.port))
        } else {
            Failure::Runtime(format!("cannot listen on {}:{}: {e}", config.bind_host, config.port))
        }
    })?;
    info!(
        "listening on {} scheme={scheme_name} verify_at_broker={}",
        broker.local_addr(),
        config.verify_at_broker
    );
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(50));
    }
    let counters = broker.counters();
    broker.shutdown();
    println!(
        "forwarded={} dropped={} accepted={} refused={}",
        counters.forwarded, counters.dropped, counters.connections_accepted, counters.connections_refused
    );
    Ok(())
}

fn client_setup(cfg: &CliConfig, a: &ClientArgs, default_id: &str) -> Result<(ClientConfig, Credentials), Failure> {
    let client_id = cfg.client_id().unwrap_or_else(|| default_id.to_owned());
    let subject = a.subject.clone().unwrap_or_else(|| client_id.clone());
    check_subject(&subject)?;
    let mut config = ClientConfig::from_cert_dir(
        &cfg.broker_host(),
        cfg.broker_port()?,
        &client_id,
        &cfg.cert_dir(),
        &subject,
    );
    config.keep_alive = a.keepalive;
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let creds = Credentials::load(&config).map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((config, creds))
}

fn client_failure(e: ClientError) -> Failure {
    match e {
        ClientError::Config(_) | ClientError::Credentials(_) | ClientError::Topic(_) => {
            Failure::Usage(e.to_string())
        }
        other => Failure::Runtime(other.to_string()),
    }
}

fn publisher_run(cfg: &CliConfig, a: &PublisherArgs) -> CmdResult {
    let (client, creds) = client_setup(cfg, &a.client, "pub-01")?;
    let mut config = PublisherConfig::new(client);
    config.motion_topic = cfg.motion_topic();
    config.heartbeat_interval = Duration::from_secs_f64(cfg.heartbeat_secs()?);
    let mut source: Box<dyn SensorEventSource> = match (&a.simulate_schedule, a.seed) {
        (Some(schedule), _) => Box::new(SimulatedPir::from_schedule_ms(schedule)),
        (None, seed) => {
            if !(a.mean_interval_secs.is_finite() && a.mean_interval_secs > 0.0) {
                return Err(Failure::Usage("--mean-interval-secs must be positive".into()));
            }
            Box::new(SimulatedPir::random(
                seed.unwrap_or_else(rand::random),
                Duration::from_secs_f64(a.mean_interval_secs),
                None,
            ))
        }
    };
    let stop = stop_signal(a.client.duration)?;
    let report = run_publisher(&config, creds, source.as_mut(), Arc::new(SystemClock), None, &stop)
        .map_err(client_failure)?;
    println!(
        "events_published={} heartbeats_published={} delivery_failures={}",
        report.events_published, report.heartbeats_published, report.delivery_failures
    );
    Ok(())
}

fn subscriber_run(cfg: &CliConfig, a: &SubscriberArgs) -> CmdResult {
    let (client, creds) = client_setup(cfg, &a.client, "sub-01")?;
    let mut config = SubscriberConfig::new(client);
    config.motion_topic = cfg.motion_topic();
    config.log_path = cfg.log_path();
    config.echo_stdout = !a.quiet;
    let stop = stop_signal(a.client.duration)?;
    let report = run_subscriber(&config, creds, Arc::new(SystemClock), &stop).map_err(client_failure)?;
    println!(
        "received={} rejected={} log={}",
        report.received,
        report.rejected,
        report.log_path.display()
    );
    Ok(())
}

fn bench_run(a: &BenchArgs) -> CmdResult {
    for s in &a.schemes {
        scheme_check(s)?;
    }
    if a.iterations == 0 {
        return Err(Failure::Usage("--iterations must be at least 1".into()));
    }
    let config = BenchConfig {
        schemes: a.schemes.clone(),
        iterations: a.iterations,
        output: a.out.clone(),
        warmup: a.warmup,
    };
    let (records, summary) = bench_certgen(&config).map_err(|e| Failure::Runtime(e.to_string()))?;
    print!("{}", render_report(&summary));
    info!("wrote {} rows to {}", records.len(), config.output.display());
    Ok(())
}
