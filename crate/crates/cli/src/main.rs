use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use serde_json::{json, Value};

use ssibridge_core::clock::{Clock, ManualClock};
use ssibridge_core::credential::SdJwtVc;
use ssibridge_core::digest::Digest;
use ssibridge_core::enclave::{measure_workload, new_platform, FederationContext, VerificationPolicy, WorkloadDescriptor};
use ssibridge_core::federation::http::{serve_http, AdminCommand, HttpFederationClient};
use ssibridge_core::federation::mock::{serve_mock_federation, FederationTopology, QEAA_PROVIDER_ID};
use ssibridge_core::federation::TrustBundle;
use ssibridge_core::issuer::issue_demo;
use ssibridge_core::keys::{Jwk, KeyDirectory};
use ssibridge_core::ledger::{new_chain, Chain, EventFilter};
use ssibridge_core::proof::TRANSCRIPT_BACKEND;
use ssibridge_core::scenario::{run_scenario, ScenarioConfig, SCENARIO_START};
use ssibridge_core::service::{
    attest_service, serve_service, service_workload, ServiceConfig, VerificationService, NONCE_LEN,
    SERVICE_WORKLOAD_VERSION,
};
use ssibridge_core::wallet::{
    relying_party_verify, EnclaveContext, PresentationPackage, RpOptions, RpVerdict, SimItWallet, SsiWallet,
    WalletState, DEFAULT_VALIDITY_WINDOW_S,
};

const DEFAULT_FED: &str = "http://127.0.0.1:8750";
const ENTITIES_FILE: &str = "entities.json";
const TRUST_FILE: &str = "trust-bundle.json";

#[derive(Parser)]
#[command(name = "ssibridge", about = "Attested SD-JWT-VC re-issuance with ledger-anchored proofs")]
struct Cli {
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    /// Simulated current time, unix seconds.
    #[arg(long, global = true, default_value_t = SCENARIO_START)]
    now: u64,
    #[arg(long, global = true, env = "SSIBRIDGE_KEYDIR")]
    keydir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mock federation.
    #[command(subcommand)]
    Fed(FedCmd),
    #[command(subcommand)]
    Issuer(IssuerCmd),
    /// Simulated IT-Wallet.
    #[command(subcommand)]
    Itwallet(ItWalletCmd),
    /// Holder SSI wallet.
    #[command(subcommand)]
    Wallet(WalletCmd),
    #[command(subcommand)]
    Chain(ChainCmd),
    /// Verification service.
    #[command(subcommand)]
    Svc(SvcCmd),
    /// Relying party.
    #[command(subcommand)]
    Rp(RpCmd),
    #[command(subcommand)]
    Scenario(ScenarioCmd),
}

#[derive(Args, Clone)]
struct FedUrl {
    #[arg(long = "fed", env = "SSIBRIDGE_FED", default_value = DEFAULT_FED)]
    url: String,
}

#[derive(Subcommand)]
enum FedCmd {
    /// Serve a federation in the foreground.
    Up {
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "127.0.0.1:8750")]
        bind: String,
    },
    Outage {
        entity: String,
        #[command(flatten)]
        fed: FedUrl,
    },
    Restore {
        entity: String,
        #[command(flatten)]
        fed: FedUrl,
    },
    /// Revoke a trust mark, by mark id or holder name.
    Revoke {
        mark: String,
        #[command(flatten)]
        fed: FedUrl,
    },
    Rotate {
        entity: String,
        #[command(flatten)]
        fed: FedUrl,
    },
}

#[derive(Subcommand)]
enum IssuerCmd {
    /// Issue the demo credential with a federation member's key.
    Issue {
        #[arg(long, default_value = QEAA_PROVIDER_ID)]
        issuer: String,
        #[arg(long, default_value = "did:example:holder")]
        holder: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also store into this IT-Wallet file.
        #[arg(long)]
        itwallet: Option<PathBuf>,
        #[arg(long, default_value = "health-card")]
        id: String,
    },
}

#[derive(Subcommand)]
enum ItWalletCmd {
    Login {
        #[arg(long)]
        itwallet: PathBuf,
    },
    Export {
        #[arg(long)]
        itwallet: PathBuf,
        #[arg(long, default_value = "health-card")]
        id: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct WalletFile {
    #[arg(long, default_value = "wallet.json")]
    wallet: PathBuf,
    #[arg(long, default_value = "did:example:holder")]
    holder: String,
}

#[derive(Args, Clone)]
struct PlatformArgs {
    /// Seed of the simulated attestation platform.
    #[arg(long, default_value_t = 7)]
    platform_seed: u64,
}

#[derive(Subcommand)]
enum WalletCmd {
    Import {
        #[command(flatten)]
        w: WalletFile,
        #[arg(long)]
        cred: PathBuf,
    },
    /// Preflight, attested run, and attested credential issuance.
    Attest {
        #[command(flatten)]
        w: WalletFile,
        #[arg(long)]
        cred: PathBuf,
        #[command(flatten)]
        fed: FedUrl,
        /// Trust bundle; defaults to the one `fed up` wrote to the key directory.
        #[arg(long)]
        trust: Option<PathBuf>,
        #[command(flatten)]
        platform: PlatformArgs,
        #[arg(long)]
        window: Option<u64>,
        /// Attested credential file; defaults to `<cred>.attested.jwt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Publish {
        #[command(flatten)]
        w: WalletFile,
        #[arg(long)]
        cred_id: Option<String>,
        #[arg(long)]
        chain: PathBuf,
        #[arg(long, default_value = TRANSCRIPT_BACKEND)]
        backend: String,
        #[command(flatten)]
        platform: PlatformArgs,
    },
    Present {
        #[command(flatten)]
        w: WalletFile,
        #[arg(long)]
        cred_id: Option<String>,
        /// Comma-separated claim names; all when omitted.
        #[arg(long, value_delimiter = ',')]
        claims: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ChainCmd {
    Show {
        #[arg(long)]
        chain: PathBuf,
    },
    Events {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        credential_digest: Option<String>,
    },
    /// Replay and check a persisted chain.
    Load {
        #[arg(long)]
        chain: PathBuf,
    },
}

#[derive(Args, Clone)]
struct SvcTarget {
    #[arg(long, default_value = "http://127.0.0.1:8760")]
    url: String,
    /// Provider public key file.
    #[arg(long)]
    provider_key: PathBuf,
    /// Expected service measurement, obtained independently of the service.
    #[arg(long)]
    measurement: String,
    /// Trusted platform root fingerprint; defaults to the simulated platform's.
    #[arg(long)]
    root: Option<String>,
    #[command(flatten)]
    platform: PlatformArgs,
}

#[derive(Subcommand)]
enum SvcCmd {
    Serve {
        #[command(flatten)]
        fed: FedUrl,
        #[arg(long)]
        trust: Option<PathBuf>,
        #[arg(long)]
        chain: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8760")]
        bind: String,
        #[command(flatten)]
        platform: PlatformArgs,
        #[arg(long, default_value = "provider")]
        provider_key_id: String,
        /// Service workload version.
        #[arg(long, default_value = SERVICE_WORKLOAD_VERSION)]
        workload_version: String,
        #[arg(long, default_value_t = DEFAULT_VALIDITY_WINDOW_S)]
        window: u64,
    },
    Attest {
        #[command(flatten)]
        t: SvcTarget,
    },
    Verify {
        #[command(flatten)]
        t: SvcTarget,
        #[arg(long)]
        cred: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RpCmd {
    Verify {
        #[arg(long)]
        package: PathBuf,
        #[arg(long)]
        chain: PathBuf,
        /// Trusted platform root fingerprints; defaults to the simulated platform's.
        #[arg(long, value_delimiter = ',')]
        root: Option<Vec<String>>,
        /// Expected verifier measurement; defaults to the standard workload's.
        #[arg(long)]
        measurement: Option<String>,
        #[command(flatten)]
        platform: PlatformArgs,
        #[arg(long)]
        allow_offchain_only: bool,
    },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Run fig3, fig4, fig5 or outage.
    Run {
        name: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        ledger: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_VALIDITY_WINDOW_S)]
        window: u64,
        #[arg(long, default_value = TRANSCRIPT_BACKEND)]
        backend: String,
    },
}

/// A failure reported as `{"error": {...}}`.
#[derive(Debug)]
struct CliError {
    code: String,
    message: String,
    detail: Option<Value>,
}

impl CliError {
    fn new(code: &str, message: impl ToString) -> Self {
        Self {
            code: code.into(),
            message: message.to_string(),
            detail: None,
        }
    }

    fn with_detail(mut self, detail: impl Serialize) -> Self {
        self.detail = serde_json::to_value(detail).ok();
        self
    }
}

macro_rules! impl_from {
    ($($t:ty => $code:expr),* $(,)?) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new($code, e)
            }
        }
    )*};
}

impl_from!(
    std::io::Error => "Io",
    serde_json::Error => "InvalidJson",
    ssibridge_core::keys::KeyError => "KeyError",
    ssibridge_core::credential::CredentialError => "CredentialError",
    ssibridge_core::attested::AttestedError => "AttestedError",
    ssibridge_core::ledger::LedgerError => "LedgerError",
    ssibridge_core::federation::FetchError => "FederationUnreachable",
    ssibridge_core::federation::mock::MockError => "FederationError",
    ssibridge_core::digest::DigestParseError => "InvalidDigest",
);

impl From<ssibridge_core::wallet::WalletError> for CliError {
    fn from(e: ssibridge_core::wallet::WalletError) -> Self {
        let err = CliError::new(e.code(), &e);
        match e {
            ssibridge_core::wallet::WalletError::PreflightFailed { verdict, .. } => err.with_detail(verdict),
            _ => err,
        }
    }
}

impl From<ssibridge_core::service::ServiceError> for CliError {
    fn from(e: ssibridge_core::service::ServiceError) -> Self {
        let err = CliError::new(&e.code(), &e);
        match e {
            ssibridge_core::service::ServiceError::AttestationFailed(r) => err.with_detail(json!({"reason": r})),
            ssibridge_core::service::ServiceError::Server(b) => err.with_detail(b),
            _ => err,
        }
    }
}

impl From<ssibridge_core::scenario::ScenarioError> for CliError {
    fn from(e: ssibridge_core::scenario::ScenarioError) -> Self {
        match e {
            ssibridge_core::scenario::ScenarioError::Wallet(w) => w.into(),
            ssibridge_core::scenario::ScenarioError::Service(s) => s.into(),
            other => CliError::new("ScenarioError", other),
        }
    }
}

type Res<T = ()> = Result<T, CliError>;

struct Ctx {
    json: bool,
    clock: ManualClock,
    keys: KeyDirectory,
}

impl Ctx {
    fn emit(&self, value: Value, text: impl FnOnce() -> String) {
        if self.json {
            println!("{value}");
        } else {
            println!("{}", text());
        }
    }
}

fn default_keydir() -> PathBuf {
    std::env::var_os("HOME")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
        .join(".ssibridge")
        .join("keys")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        json: cli.json,
        clock: ManualClock::new(cli.now),
        keys: KeyDirectory::new(cli.keydir.unwrap_or_else(default_keydir)),
    };
    match run(&ctx, cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut body = json!({"code": e.code, "message": e.message});
            if let Some(d) = e.detail {
                body["detail"] = d;
            }
            println!("{}", json!({ "error": body }));
            ExitCode::FAILURE
        }
    }
}

fn run(ctx: &Ctx, cmd: Command) -> Res {
    match cmd {
        Command::Fed(c) => fed(ctx, c),
        Command::Issuer(c) => issuer(ctx, c),
        Command::Itwallet(c) => itwallet(ctx, c),
        Command::Wallet(c) => wallet(ctx, c),
        Command::Chain(c) => chain(ctx, c),
        Command::Svc(c) => svc(ctx, c),
        Command::Rp(c) => rp(ctx, c),
        Command::Scenario(c) => scenario(ctx, c),
    }
}

fn read_string(path: &Path) -> Res<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::new("Io", format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Res<T> {
    Ok(serde_json::from_str(&read_string(path)?)?)
}

fn write_json(path: &Path, v: &impl Serialize) -> Res {
    std::fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn sync_keys(ctx: &Ctx, fed: &ssibridge_core::federation::mock::FederationHandle) -> Res {
    let mut map = BTreeMap::new();
    for id in fed.entity_ids() {
        let key = fed.entity_key(&id)?;
        ctx.keys.store(&key)?;
        map.insert(id, key.key_id);
    }
    write_json(&ctx.keys.root().join(ENTITIES_FILE), &map)?;
    write_json(&ctx.keys.root().join(TRUST_FILE), &fed.trust_bundle())
}

fn fed(ctx: &Ctx, c: FedCmd) -> Res {
    let admin = |url: &str, action: &str, target: String| -> Res {
        let v = HttpFederationClient::new(url).admin(
            action,
            &AdminCommand {
                target: target.clone(),
                other: None,
                latency_ms: None,
            },
        )?;
        ctx.emit(json!({"action": action, "target": target, "result": v}), || {
            format!("{action} {target}: ok")
        });
        Ok(())
    };
    match c {
        FedCmd::Up { topology, seed, bind } => {
            let topo = match topology {
                Some(p) => FederationTopology::from_json(&std::fs::read(p)?)?,
                None => FederationTopology::default_four(),
            };
            let handle = serve_mock_federation(&topo, seed)?;
            sync_keys(ctx, &handle)?;
            let server = serve_http(handle.clone(), &bind)?;
            ctx.emit(
                json!({"base_url": server.base_url(), "entities": handle.entity_ids(), "keydir": ctx.keys.root()}),
                || format!("federation listening on {}", server.base_url()),
            );
            // Key rotations happen through the admin API; keep the key
            // directory current so issuers sign with live keys.
            loop {
                std::thread::sleep(Duration::from_millis(200));
                sync_keys(ctx, &handle)?;
            }
        }
        FedCmd::Outage { entity, fed } => admin(&fed.url, "outage", entity),
        FedCmd::Restore { entity, fed } => admin(&fed.url, "restore", entity),
        FedCmd::Revoke { mark, fed } => admin(&fed.url, "revoke", mark),
        FedCmd::Rotate { entity, fed } => admin(&fed.url, "rotate", entity),
    }
}

fn issuer_key(ctx: &Ctx, issuer: &str) -> Res<Jwk> {
    let map: BTreeMap<String, String> = read_json(&ctx.keys.root().join(ENTITIES_FILE))
        .map_err(|e| CliError::new("KeyError", format!("no federation keys; run `fed up` first ({})", e.message)))?;
    let kid = map
        .get(issuer)
        .or_else(|| map.iter().find(|(id, _)| id.contains(issuer)).map(|(_, k)| k))
        .ok_or_else(|| CliError::new("UnknownEntity", issuer))?;
    Ok(ctx.keys.load(kid)?)
}

fn issuer(ctx: &Ctx, c: IssuerCmd) -> Res {
    let IssuerCmd::Issue {
        issuer,
        holder,
        seed,
        out,
        itwallet,
        id,
    } = c;
    let key = issuer_key(ctx, &issuer)?;
    let issuer_id = read_json::<BTreeMap<String, String>>(&ctx.keys.root().join(ENTITIES_FILE))?
        .into_iter()
        .find(|(_, k)| *k == key.key_id)
        .map(|(id, _)| id)
        .unwrap_or(issuer);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let cred = issue_demo(&key, &issuer_id, &holder, &ctx.clock, &mut rng)?;
    if let Some(p) = &out {
        std::fs::write(p, cred.compact_form())?;
    }
    if let Some(p) = &itwallet {
        let mut it: SimItWallet = if p.exists() { read_json(p)? } else { SimItWallet::new(&holder) };
        it.store(&id, &cred);
        write_json(p, &it)?;
    }
    ctx.emit(
        json!({"credential_digest": cred.digest(), "issuer": issuer_id, "compact": cred.compact_form()}),
        || match &out {
            Some(p) => format!("issued {} to {}", cred.digest(), p.display()),
            None => cred.compact_form(),
        },
    );
    Ok(())
}

fn itwallet(ctx: &Ctx, c: ItWalletCmd) -> Res {
    match c {
        ItWalletCmd::Login { itwallet } => {
            let mut it: SimItWallet = read_json(&itwallet)?;
            it.login();
            write_json(&itwallet, &it)?;
            ctx.emit(json!({"authenticated": true}), || "eID session established".into());
        }
        ItWalletCmd::Export { itwallet, id, out } => {
            let it: SimItWallet = read_json(&itwallet)?;
            let cred = it.export_credential(&id)?;
            std::fs::write(&out, cred.compact_form())?;
            ctx.emit(json!({"credential_digest": cred.digest(), "out": out}), || {
                format!("exported {id} to {}", out.display())
            });
        }
    }
    Ok(())
}

fn load_wallet(ctx: &Ctx, w: &WalletFile) -> Res<SsiWallet> {
    if w.wallet.exists() {
        let state: WalletState = read_json(&w.wallet)?;
        let key = ctx.keys.load(&state.key_id)?;
        return Ok(SsiWallet::from_state(state, key)?);
    }
    let kid = format!("wallet-{}", &Digest::of(w.holder.as_bytes()).to_hex()[..12]);
    let key = match ctx.keys.load(&kid) {
        Ok(k) => k,
        Err(_) => {
            let k = Jwk::es256(kid, &mut rand::thread_rng());
            ctx.keys.store(&k)?;
            k
        }
    };
    Ok(SsiWallet::new(key, &w.holder))
}

fn save_wallet(w: &WalletFile, wallet: &SsiWallet) -> Res {
    write_json(&w.wallet, &wallet.to_state())
}

fn pick_cred_id(state: &WalletState, given: Option<String>) -> Res<String> {
    if let Some(id) = given {
        return Ok(id);
    }
    let mut ids = state.attested.keys();
    match (ids.next(), ids.next()) {
        (Some(id), None) => Ok(id.clone()),
        _ => Err(CliError::new("UnknownCredential", "pass --cred-id")),
    }
}

fn load_trust(ctx: &Ctx, trust: Option<PathBuf>) -> Res<TrustBundle> {
    read_json(&trust.unwrap_or_else(|| ctx.keys.root().join(TRUST_FILE)))
}

fn verifier_workload() -> WorkloadDescriptor {
    WorkloadDescriptor::credential_verifier(VerificationPolicy::default())
}

fn load_or_new_chain(ctx: &Ctx, path: &Path) -> Res<Chain> {
    if path.exists() {
        Ok(Chain::load(path)?)
    } else {
        Ok(new_chain(ctx.clock.now()))
    }
}

fn wallet(ctx: &Ctx, c: WalletCmd) -> Res {
    match c {
        WalletCmd::Import { w, cred } => {
            let mut wallet = load_wallet(ctx, &w)?;
            let id = wallet.import(SdJwtVc::parse(&read_string(&cred)?)?);
            save_wallet(&w, &wallet)?;
            ctx.emit(json!({"cred_id": id}), || format!("imported as {id}"));
        }
        WalletCmd::Attest {
            w,
            cred,
            fed,
            trust,
            platform,
            window,
            out,
        } => {
            let mut wallet = load_wallet(ctx, &w)?;
            if let Some(s) = window {
                wallet = wallet.with_window(s);
            }
            let out = out.unwrap_or_else(|| cred.with_extension("attested.jwt"));
            let cred = SdJwtVc::parse(&read_string(&cred)?)?;
            let trust = load_trust(ctx, trust)?;
            let client = HttpFederationClient::new(&fed.url);
            let platform = new_platform(platform.platform_seed);
            let workload = verifier_workload();
            let attested = wallet.create_attested_credential(
                &cred,
                &FederationContext {
                    fetcher: &client,
                    transport: &client,
                    trust: &trust,
                },
                &EnclaveContext {
                    platform: &platform,
                    workload: &workload,
                },
                &ctx.clock,
            )?;
            save_wallet(&w, &wallet)?;
            std::fs::write(&out, attested.compact())?;
            let claims = attested.claims();
            ctx.emit(
                json!({
                    "cred_id": ssibridge_core::wallet::credential_id(&cred),
                    "outcome": claims.verification_result.outcome,
                    "verified_at": claims.verified_at,
                    "attested_jwt_vc": attested.compact(),
                    "out": out,
                }),
                || format!("attested, outcome {}, written to {}", claims.verification_result.outcome, out.display()),
            );
        }
        WalletCmd::Publish {
            w,
            cred_id,
            chain,
            backend,
            platform,
        } => {
            let mut wallet = load_wallet(ctx, &w)?;
            let id = pick_cred_id(&wallet.to_state(), cred_id)?;
            let attested = wallet
                .attested(&id)
                .cloned()
                .ok_or_else(|| CliError::new("UnknownCredential", &id))?;
            let mut ch = load_or_new_chain(ctx, &chain)?;
            let root = new_platform(platform.platform_seed).root_fingerprint();
            let measurement = measure_workload(&verifier_workload());
            let existing = ch
                .contracts()
                .find(|k| k.backend_id == backend && k.trusted_roots.contains(&root) && k.expected_measurement == measurement)
                .map(|k| k.address.clone());
            let contract = match existing {
                Some(a) => a,
                None => ch.deploy_verifier(&backend, vec![root], measurement)?.address,
            };
            let r = wallet.publish_proof(&attested, &mut ch, &contract)?;
            ch.save(&chain)?;
            save_wallet(&w, &wallet)?;
            ctx.emit(json!({"event_ref": r, "contract": contract}), || {
                format!("published in block {} (tx {})", r.block_number, r.tx_digest)
            });
        }
        WalletCmd::Present { w, cred_id, claims, out } => {
            let wallet = load_wallet(ctx, &w)?;
            let id = pick_cred_id(&wallet.to_state(), cred_id)?;
            let selected: BTreeSet<String> = match claims {
                Some(c) => c.into_iter().collect(),
                None => wallet
                    .imported(&id)
                    .map(|c| c.disclosable_names())
                    .ok_or_else(|| CliError::new("UnknownCredential", &id))?,
            };
            let pkg = wallet.present(&id, &selected)?;
            write_json(&out, &pkg)?;
            ctx.emit(json!({"package": out, "disclosed": selected}), || {
                format!("package written to {}", out.display())
            });
        }
    }
    Ok(())
}

fn chain(ctx: &Ctx, c: ChainCmd) -> Res {
    match c {
        ChainCmd::Show { chain } => {
            let ch = Chain::load(&chain)?;
            let contracts: Vec<_> = ch.contracts().cloned().collect();
            let events = ch.get_events(&EventFilter::default()).len();
            ctx.emit(
                json!({"height": ch.height(), "head": ch.head().digest, "contracts": contracts, "events": events}),
                || format!("height {} head {} contracts {} events {events}", ch.height(), ch.head().digest, contracts.len()),
            );
        }
        ChainCmd::Events { chain, credential_digest } => {
            let ch = Chain::load(&chain)?;
            let filter = EventFilter {
                credential_digest: credential_digest.as_deref().map(Digest::from_hex).transpose()?,
                ..Default::default()
            };
            let events = ch.get_events(&filter);
            ctx.emit(serde_json::to_value(&events)?, || {
                events
                    .iter()
                    .map(|e| format!("block {} {} credential {} outcome {}", e.block_number, e.event, e.credential_digest, e.outcome))
                    .collect::<Vec<_>>()
                    .join("\n")
            });
        }
        ChainCmd::Load { chain } => {
            let ch = Chain::load(&chain)?;
            let indexed = ch.live_index().len();
            ctx.emit(json!({"ok": true, "height": ch.height(), "indexed_events": indexed}), || {
                format!("chain intact, height {}, {indexed} indexed events", ch.height())
            });
        }
    }
    Ok(())
}

fn parse_digest(s: &str) -> Res<Digest> {
    Ok(Digest::from_hex(s)?)
}

fn svc(ctx: &Ctx, c: SvcCmd) -> Res {
    match c {
        SvcCmd::Serve {
            fed,
            trust,
            chain,
            bind,
            platform,
            provider_key_id,
            workload_version,
            window,
        } => {
            let provider_key = match ctx.keys.load(&provider_key_id) {
                Ok(k) => k,
                Err(_) => {
                    let k = Jwk::es256(&provider_key_id, &mut rand::thread_rng());
                    ctx.keys.store(&k)?;
                    k
                }
            };
            let platform = Arc::new(new_platform(platform.platform_seed));
            let verifier = verifier_workload();
            let measurement = measure_workload(&verifier);
            let mut ch = load_or_new_chain(ctx, &chain)?;
            let root = platform.root_fingerprint();
            let existing = ch
                .contracts()
                .find(|k| k.backend_id == TRANSCRIPT_BACKEND && k.trusted_roots.contains(&root) && k.expected_measurement == measurement)
                .map(|k| k.address.clone());
            let contract = match existing {
                Some(a) => a,
                None => ch.deploy_verifier(TRANSCRIPT_BACKEND, vec![root], measurement)?.address,
            };
            ch.save(&chain)?;
            let service = Arc::new(VerificationService::new(ServiceConfig {
                platform,
                service_workload: service_workload(&workload_version, verifier.policy.clone()),
                verifier_workload: verifier,
                provider_key: provider_key.clone(),
                federation: Arc::new(HttpFederationClient::new(&fed.url)),
                trust: load_trust(ctx, trust)?,
                chain: Arc::new(RwLock::new(ch)),
                contract,
                clock: Arc::new(ManualClock::new(ctx.clock.now())),
                validity_window_s: window,
                ledger_path: Some(chain),
            }));
            let server = serve_service(Arc::clone(&service), &bind)?;
            let pub_path = ctx.keys.root().join(format!("{provider_key_id}.pub.json"));
            write_json(&pub_path, &provider_key.to_public())?;
            let d = service.descriptor();
            ctx.emit(
                json!({"descriptor": d, "provider_key_file": pub_path}),
                || {
                    format!(
                        "service on {} measurement {} provider key {}",
                        d.base_endpoint,
                        d.expected_measurement,
                        pub_path.display()
                    )
                },
            );
            server.join();
        }
        SvcCmd::Attest { t } => {
            let handle = attest_target(&t)?;
            ctx.emit(json!({"attested": true, "attestation": handle.attestation()}), || {
                format!("service {} attested", handle.base_url())
            });
        }
        SvcCmd::Verify { t, cred, out } => {
            let handle = attest_target(&t)?;
            let cred = SdJwtVc::parse(&read_string(&cred)?)?;
            let resp = handle.request_verification(&cred)?;
            if let Some(p) = &out {
                std::fs::write(p, &resp.attested_jwt_vc)?;
            }
            ctx.emit(serde_json::to_value(&resp)?, || {
                format!(
                    "outcome {} event in block {}",
                    resp.verdict.outcome, resp.event_ref.block_number
                )
            });
        }
    }
    Ok(())
}

fn attest_target(t: &SvcTarget) -> Res<ssibridge_core::service::ServiceHandle> {
    let provider: Jwk = read_json(&t.provider_key)?;
    let root = match &t.root {
        Some(r) => parse_digest(r)?,
        None => new_platform(t.platform.platform_seed).root_fingerprint(),
    };
    let mut nonce = [0u8; NONCE_LEN];
    rand::thread_rng().fill_bytes(&mut nonce);
    Ok(attest_service(&t.url, &provider, &parse_digest(&t.measurement)?, &root, &nonce)?)
}

fn rp(ctx: &Ctx, c: RpCmd) -> Res {
    let RpCmd::Verify {
        package,
        chain,
        root,
        measurement,
        platform,
        allow_offchain_only,
    } = c;
    let pkg: PresentationPackage = read_json(&package)?;
    let ch = Chain::load(&chain)?;
    let roots = match root {
        Some(rs) => rs.iter().map(|r| parse_digest(r)).collect::<Res<Vec<_>>>()?,
        None => vec![new_platform(platform.platform_seed).root_fingerprint()],
    };
    let measurement = match measurement {
        Some(m) => parse_digest(&m)?,
        None => measure_workload(&verifier_workload()),
    };
    let verdict = relying_party_verify(
        &pkg,
        &ch,
        &roots,
        &measurement,
        &ctx.clock,
        RpOptions { allow_offchain_only },
    );
    match &verdict {
        RpVerdict::Accept { disclosed, holder, .. } => {
            ctx.emit(serde_json::to_value(&verdict)?, || {
                format!(
                    "accept: holder {holder}, disclosed {}",
                    disclosed.iter().cloned().collect::<Vec<_>>().join(",")
                )
            });
            Ok(())
        }
        RpVerdict::Reject { reason, detail } => {
            Err(CliError::new("Rejected", format!("{reason:?}: {detail}")).with_detail(&verdict))
        }
    }
}

fn scenario(ctx: &Ctx, c: ScenarioCmd) -> Res {
    let ScenarioCmd::Run {
        name,
        seed,
        topology,
        ledger,
        window,
        backend,
    } = c;
    let cfg = ScenarioConfig {
        topology: match topology {
            Some(p) => FederationTopology::from_json(&std::fs::read(p)?)?,
            None => FederationTopology::default_four(),
        },
        seed,
        validity_window_s: window,
        backend_id: backend,
        ledger_path: ledger,
    };
    let report = run_scenario(&name, &cfg)?;
    ctx.emit(serde_json::to_value(&report)?, || {
        let mut lines: Vec<String> = report
            .checks
            .iter()
            .map(|c| format!("[{}] {}: {}", if c.pass { "pass" } else { "FAIL" }, c.name, c.detail))
            .collect();
        lines.push(format!("{} seed {}: {}", report.scenario, report.seed, if report.passed() { "pass" } else { "FAIL" }));
        lines.join("\n")
    });
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::new("ScenarioFailed", &name).with_detail(&report.checks))
    }
}

