//! Single sign-on between one identity provider and the gateway.
//!
//! The identity provider authenticates a user and issues an assertion, a
//! MAC-signed statement addressed to one service provider. The gateway
//! verifies the assertion, rejects replays and opens a session.
//!
//! Wire form of an assertion: the fields issuer, subject, audience, methods
//! (sorted, comma-joined), issued_at, expires_at (decimal) and nonce (hex),
//! each as UTF-8 preceded by its byte length as a big-endian `u32`, followed
//! by the 32-byte HMAC-SHA256 of everything before it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Mutex;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::credentials::{constant_time_eq, PasswordHash};
use crate::model::{required_auth_methods, AuthMethod, Policy, UserId};
use crate::store::IdentityDb;

pub const KEY_LEN: usize = 32;
pub const MAC_LEN: usize = 32;
pub const NONCE_LEN: usize = 16;
const FIELD_COUNT: usize = 7;

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FederationError {
    #[error("unknown service provider `{0}`")]
    UnknownServiceProvider(String),
    #[error("service provider `{0}` is already in the circle")]
    DuplicateServiceProvider(String),
    #[error("an assertion needs at least one authentication method")]
    NoMethods,
    #[error("assertion lifetime must be positive")]
    BadLifetime,
}

#[derive(Clone, PartialEq, Eq)]
pub struct SpEntry {
    pub key: [u8; KEY_LEN],
    pub return_url: String,
}

impl std::fmt::Debug for SpEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpEntry")
            .field("key", &"<redacted>")
            .field("return_url", &self.return_url)
            .finish()
    }
}

/// The identity provider and the service providers it has agreed keys with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CircleOfTrust {
    pub idp_id: String,
    pub sps: BTreeMap<String, SpEntry>,
}

impl CircleOfTrust {
    pub fn new(idp_id: &str) -> Self {
        CircleOfTrust {
            idp_id: idp_id.to_string(),
            sps: BTreeMap::new(),
        }
    }

    pub fn add_sp(
        &mut self,
        sp_id: &str,
        key: [u8; KEY_LEN],
        return_url: &str,
    ) -> Result<(), FederationError> {
        if self.sps.contains_key(sp_id) {
            return Err(FederationError::DuplicateServiceProvider(sp_id.to_string()));
        }
        self.sps.insert(
            sp_id.to_string(),
            SpEntry {
                key,
                return_url: return_url.to_string(),
            },
        );
        Ok(())
    }

    pub fn sp(&self, sp_id: &str) -> Result<&SpEntry, FederationError> {
        self.sps
            .get(sp_id)
            .ok_or_else(|| FederationError::UnknownServiceProvider(sp_id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assertion {
    pub issuer: String,
    pub subject: String,
    pub audience: String,
    pub methods: BTreeSet<AuthMethod>,
    pub issued_at: i64,
    pub expires_at: i64,
    pub nonce: [u8; NONCE_LEN],
    pub signature: [u8; MAC_LEN],
}

impl Assertion {
    fn fields(&self) -> [String; FIELD_COUNT] {
        [
            self.issuer.clone(),
            self.subject.clone(),
            self.audience.clone(),
            self.methods
                .iter()
                .map(|m| m.as_str())
                .collect::<Vec<_>>()
                .join(","),
            self.issued_at.to_string(),
            self.expires_at.to_string(),
            hex::encode(self.nonce),
        ]
    }

    /// The signed part of the wire form.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for f in self.fields() {
            out.extend_from_slice(&(f.len() as u32).to_be_bytes());
            out.extend_from_slice(f.as_bytes());
        }
        out
    }

    pub fn sign(&mut self, key: &[u8; KEY_LEN]) {
        self.signature = mac(key, &self.canonical_bytes());
    }

    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = self.canonical_bytes();
        out.extend_from_slice(&self.signature);
        out
    }

    /// URL-safe base64 of the wire form, as carried in redirects.
    pub fn encode(&self) -> String {
        URL_SAFE_NO_PAD.encode(self.to_wire())
    }

    /// Parses the wire form without checking the signature.
    pub fn parse_wire(bytes: &[u8]) -> Result<Assertion, VerifyError> {
        let malformed = |m: &str| VerifyError::Malformed(m.to_string());
        if bytes.len() < MAC_LEN {
            return Err(malformed("too short"));
        }
        let (body, sig) = bytes.split_at(bytes.len() - MAC_LEN);
        let mut fields = Vec::with_capacity(FIELD_COUNT);
        let mut rest = body;
        while !rest.is_empty() {
            if rest.len() < 4 {
                return Err(malformed("truncated length prefix"));
            }
            let len = u32::from_be_bytes(rest[..4].try_into().expect("four bytes")) as usize;
            let field = rest
                .get(4..4 + len)
                .ok_or_else(|| malformed("field overruns input"))?;
            fields.push(std::str::from_utf8(field).map_err(|_| malformed("field is not UTF-8"))?);
            rest = &rest[4 + len..];
        }
        let [issuer, subject, audience, methods, issued_at, expires_at, nonce]: [&str;
            FIELD_COUNT] = fields
            .try_into()
            .map_err(|_| malformed("wrong number of fields"))?;
        let methods = if methods.is_empty() {
            BTreeSet::new()
        } else {
            methods
                .split(',')
                .map(|m| AuthMethod::parse(m).ok_or_else(|| malformed("unknown method")))
                .collect::<Result<_, _>>()?
        };
        let int = |s: &str| s.parse::<i64>().map_err(|_| malformed("bad timestamp"));
        let nonce: [u8; NONCE_LEN] = hex::decode(nonce)
            .ok()
            .and_then(|n| n.try_into().ok())
            .ok_or_else(|| malformed("bad nonce"))?;
        let a = Assertion {
            issuer: issuer.to_string(),
            subject: subject.to_string(),
            audience: audience.to_string(),
            methods,
            issued_at: int(issued_at)?,
            expires_at: int(expires_at)?,
            nonce,
            signature: sig.try_into().expect("MAC_LEN bytes"),
        };
        // only the exact canonical encoding is accepted
        if a.canonical_bytes() != body {
            return Err(malformed("non-canonical encoding"));
        }
        Ok(a)
    }
}

fn mac(key: &[u8; KEY_LEN], data: &[u8]) -> [u8; MAC_LEN] {
    let mut m = HmacSha256::new_from_slice(key).expect("HMAC takes any key length");
    m.update(data);
    m.finalize().into_bytes().into()
}

pub fn issue_assertion(
    cot: &CircleOfTrust,
    subject: &str,
    sp_id: &str,
    methods: &BTreeSet<AuthMethod>,
    now: i64,
    ttl: i64,
) -> Result<Assertion, FederationError> {
    let sp = cot.sp(sp_id)?;
    if methods.is_empty() {
        return Err(FederationError::NoMethods);
    }
    if ttl <= 0 {
        return Err(FederationError::BadLifetime);
    }
    let mut a = Assertion {
        issuer: cot.idp_id.clone(),
        subject: subject.to_string(),
        audience: sp_id.to_string(),
        methods: methods.clone(),
        issued_at: now,
        expires_at: now.saturating_add(ttl),
        nonce: rand::random(),
        signature: [0; MAC_LEN],
    };
    a.sign(&sp.key);
    Ok(a)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VerifyError {
    #[error("malformed assertion: {0}")]
    Malformed(String),
    #[error("bad signature")]
    BadSignature,
    #[error("assertion issued by `{0}`")]
    WrongIssuer(String),
    #[error("assertion addressed to `{0}`")]
    WrongAudience(String),
    #[error("assertion not yet valid")]
    NotYetValid,
    #[error("assertion expired")]
    Expired,
    #[error("assertion already used")]
    Replayed,
}

impl VerifyError {
    pub fn kind(&self) -> &'static str {
        match self {
            VerifyError::Malformed(_) => "Malformed",
            VerifyError::BadSignature => "BadSignature",
            VerifyError::WrongIssuer(_) => "WrongIssuer",
            VerifyError::WrongAudience(_) => "WrongAudience",
            VerifyError::NotYetValid => "NotYetValid",
            VerifyError::Expired => "Expired",
            VerifyError::Replayed => "Replayed",
        }
    }
}

/// Nonces of accepted assertions, each kept until its assertion expires.
#[derive(Debug, Default)]
pub struct ReplayCache {
    seen: Mutex<HashMap<[u8; NONCE_LEN], i64>>,
}

impl ReplayCache {
    /// Records the nonce; false if it is already present and unexpired.
    pub fn check_and_insert(&self, nonce: [u8; NONCE_LEN], expires_at: i64, now: i64) -> bool {
        let mut seen = self.seen.lock().expect("replay cache");
        seen.retain(|_, exp| *exp > now);
        if seen.contains_key(&nonce) {
            return false;
        }
        seen.insert(nonce, expires_at);
        true
    }

    pub fn len(&self) -> usize {
        self.seen.lock().expect("replay cache").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verified {
    pub subject: String,
    pub methods: BTreeSet<AuthMethod>,
    pub issued_at: i64,
    pub expires_at: i64,
}

/// The gateway's side of the circle: its own id, the identity provider it
/// trusts and their shared key.
#[derive(Debug)]
pub struct SpVerifier {
    pub sp_id: String,
    pub idp_id: String,
    key: [u8; KEY_LEN],
    replay: ReplayCache,
}

impl SpVerifier {
    pub fn new(sp_id: &str, idp_id: &str, key: [u8; KEY_LEN]) -> Self {
        SpVerifier {
            sp_id: sp_id.to_string(),
            idp_id: idp_id.to_string(),
            key,
            replay: ReplayCache::default(),
        }
    }

    /// Checks the MAC over the raw bytes first, then audience, validity
    /// window `issued_at <= now < expires_at`, and finally replay.
    pub fn verify(&self, wire: &[u8], now: i64) -> Result<Verified, VerifyError> {
        if wire.len() < MAC_LEN {
            return Err(VerifyError::Malformed("too short".into()));
        }
        let (body, sig) = wire.split_at(wire.len() - MAC_LEN);
        if !constant_time_eq(&mac(&self.key, body), sig) {
            return Err(VerifyError::BadSignature);
        }
        let a = Assertion::parse_wire(wire)?;
        if a.issuer != self.idp_id {
            return Err(VerifyError::WrongIssuer(a.issuer));
        }
        if a.audience != self.sp_id {
            return Err(VerifyError::WrongAudience(a.audience));
        }
        if now < a.issued_at {
            return Err(VerifyError::NotYetValid);
        }
        if now >= a.expires_at {
            return Err(VerifyError::Expired);
        }
        if a.methods.is_empty() {
            return Err(VerifyError::Malformed("no methods".into()));
        }
        if !self.replay.check_and_insert(a.nonce, a.expires_at, now) {
            return Err(VerifyError::Replayed);
        }
        Ok(Verified {
            subject: a.subject,
            methods: a.methods,
            issued_at: a.issued_at,
            expires_at: a.expires_at,
        })
    }

    /// [`SpVerifier::verify`] on the base64 form used in URLs.
    pub fn verify_encoded(&self, encoded: &str, now: i64) -> Result<Verified, VerifyError> {
        let wire = URL_SAFE_NO_PAD
            .decode(encoded.trim_end_matches('='))
            .map_err(|_| VerifyError::Malformed("not base64".into()))?;
        self.verify(&wire, now)
    }
}

// ------------------------------------------------------------ identity side

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("authentication failed")]
pub struct AuthFailure;

/// Password is mandatory; the token adds `Token` when the proof matches the
/// user's binding. Unknown users and wrong passwords fail identically.
pub fn authenticate(
    idb: &IdentityDb,
    federated_name: &str,
    password: &str,
    token_proof: Option<(&str, &str)>,
) -> Result<(UserId, BTreeSet<AuthMethod>), AuthFailure> {
    let Some(record) = idb.by_federated_name(federated_name) else {
        // spend the same work as a real check
        let _ = dummy_hash().verify(password);
        return Err(AuthFailure);
    };
    if !record.password.verify(password) {
        return Err(AuthFailure);
    }
    let mut methods = BTreeSet::from([AuthMethod::Password]);
    if let (Some((firm, user)), Some(binding)) = (token_proof, &record.token) {
        let firm_ok = constant_time_eq(firm.as_bytes(), binding.firm_code.as_bytes());
        let user_ok = constant_time_eq(user.as_bytes(), binding.user_code.as_bytes());
        if firm_ok & user_ok {
            methods.insert(AuthMethod::Token);
        }
    }
    Ok((record.user_id, methods))
}

fn dummy_hash() -> &'static PasswordHash {
    static DUMMY: std::sync::OnceLock<PasswordHash> = std::sync::OnceLock::new();
    DUMMY.get_or_init(|| PasswordHash::with_salt("", vec![0; 16]))
}

// ---------------------------------------------------------- gateway side

#[derive(Debug, Clone, PartialEq, Eq)]
struct Pending {
    target: String,
    expires_at: i64,
}

/// Single-use tokens remembering where an unauthenticated request wanted to
/// go while the user is away at the identity provider.
#[derive(Debug)]
pub struct ResumeTable {
    pending: Mutex<HashMap<String, Pending>>,
    ttl: i64,
}

impl ResumeTable {
    pub fn new(ttl: i64) -> Self {
        ResumeTable {
            pending: Mutex::new(HashMap::new()),
            ttl,
        }
    }

    pub fn begin(&self, target: &str, now: i64) -> String {
        let mut pending = self.pending.lock().expect("resume table");
        pending.retain(|_, p| p.expires_at > now);
        loop {
            let token = hex::encode(rand::random::<[u8; 16]>());
            if !pending.contains_key(&token) {
                pending.insert(
                    token.clone(),
                    Pending {
                        target: target.to_string(),
                        expires_at: now.saturating_add(self.ttl),
                    },
                );
                return token;
            }
        }
    }

    /// Consumes the token and returns the remembered target.
    pub fn take(&self, token: &str, now: i64) -> Option<String> {
        let mut pending = self.pending.lock().expect("resume table");
        let p = pending.remove(token)?;
        (p.expires_at > now).then_some(p.target)
    }

    pub fn len(&self) -> usize {
        self.pending.lock().expect("resume table").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SsoError {
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("unknown or expired resume token")]
    UnknownResumeToken,
    #[error("no account for subject `{0}`")]
    UnknownSubject(String),
    #[error("roles require {required:?}, assertion carries {presented:?}")]
    InsufficientAuthMethods {
        required: BTreeSet<AuthMethod>,
        presented: BTreeSet<AuthMethod>,
    },
}

impl SsoError {
    pub fn kind(&self) -> &'static str {
        match self {
            SsoError::Verify(v) => v.kind(),
            SsoError::UnknownResumeToken => "UnknownResumeToken",
            SsoError::UnknownSubject(_) => "UnknownSubject",
            SsoError::InsufficientAuthMethods { .. } => "InsufficientAuthMethods",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsoOutcome {
    pub user: UserId,
    pub methods: BTreeSet<AuthMethod>,
    pub issued_at: i64,
    pub target: String,
}

/// Verifies the assertion, resolves its subject to an account, checks the
/// account's roles are satisfied by the presented methods and consumes
/// the resume token.
pub fn complete_sso(
    verifier: &SpVerifier,
    resume: &ResumeTable,
    policy: &Policy,
    encoded_assertion: &str,
    resume_token: &str,
    now: i64,
) -> Result<SsoOutcome, SsoError> {
    let v = verifier.verify_encoded(encoded_assertion, now)?;
    let target = resume
        .take(resume_token, now)
        .ok_or(SsoError::UnknownResumeToken)?;
    let account = policy
        .account_by_federated_name(&v.subject)
        .ok_or_else(|| SsoError::UnknownSubject(v.subject.clone()))?;
    let required = required_auth_methods(account, policy)
        .map_err(|_| SsoError::UnknownSubject(v.subject.clone()))?;
    if !required.is_subset(&v.methods) {
        return Err(SsoError::InsufficientAuthMethods {
            required,
            presented: v.methods,
        });
    }
    Ok(SsoOutcome {
        user: account.id.clone(),
        methods: v.methods,
        issued_at: v.issued_at,
        target,
    })
}
