//! Two-stage pseudonymous registration.
//!
//! An identification authority maps real identities to pseudonym IDs; a
//! separate network registry maps pseudonym IDs to network IDs. Neither
//! store alone can link a real identity to on-chain activity; joining the
//! two stores on the pseudonym ID reconstructs the full mapping.
//!
//! Both stores are single-writer (enforced by `&mut self`); reads may be
//! shared freely.

use crate::crypto::{Digest, KeyPair, SignatureScheme, ZERO_DIGEST};
use crate::selection::{Roster, RosterEntry};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdentityError {
    #[error("real identity already registered")]
    DuplicateRealId,
    #[error("certificate does not verify")]
    InvalidCertificate,
    #[error("pseudonym already registered")]
    DuplicatePseudonym,
    #[error("possession proof failed")]
    AuthenticationFailed,
    #[error("unknown network id")]
    UnknownNetworkId,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct SnapshotError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum NodeRole {
    Merger,
    Signer,
    Full,
}

impl NodeRole {
    pub fn name(self) -> &'static str {
        match self {
            NodeRole::Merger => "merger",
            NodeRole::Signer => "signer",
            NodeRole::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<NodeRole> {
        match s {
            "merger" => Some(NodeRole::Merger),
            "signer" => Some(NodeRole::Signer),
            "full" => Some(NodeRole::Full),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject_id: String,
    pub subject_key: Vec<u8>,
    pub issuer: String,
    pub issuer_signature: Vec<u8>,
}

impl Certificate {
    fn message(subject_id: &str, subject_key: &[u8], issuer: &str) -> Vec<u8> {
        let mut e = crate::crypto::Enc::new();
        e.str(subject_id);
        e.bytes(subject_key);
        e.str(issuer);
        e.finish()
    }

    pub fn issue(
        scheme: &dyn SignatureScheme,
        issuer: &str,
        issuer_key: &KeyPair,
        subject_id: String,
        subject_key: Vec<u8>,
    ) -> Certificate {
        let msg = Self::message(&subject_id, &subject_key, issuer);
        Certificate {
            subject_id,
            subject_key,
            issuer: issuer.to_string(),
            issuer_signature: scheme.sign(&issuer_key.private, &msg),
        }
    }

    pub fn verify(&self, scheme: &dyn SignatureScheme, issuer_public: &[u8]) -> bool {
        let msg = Self::message(&self.subject_id, &self.subject_key, &self.issuer);
        scheme.verify(issuer_public, &msg, &self.issuer_signature)
    }
}

#[derive(Debug, Clone)]
pub struct AuthorityRecord {
    pub pseudonym_id: Digest,
    pub certificate: Certificate,
}

pub const AUTHORITY_NAME: &str = "identity-authority";
pub const REGISTRY_NAME: &str = "network-registry";
pub const SNAPSHOT_HEADER: &str = "#gruut-registry v1";

/// The identification authority. Holds (real_id, pseudonym_id, certificate)
/// tuples and nothing else.
pub struct IdentityAuthority {
    scheme: Arc<dyn SignatureScheme>,
    key: KeyPair,
    records: BTreeMap<String, AuthorityRecord>,
    pseudonyms: BTreeSet<Digest>,
    rng: ChaCha8Rng,
}

impl IdentityAuthority {
    pub fn new(scheme: Arc<dyn SignatureScheme>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let key = scheme.generate(&mut rng);
        IdentityAuthority { scheme, key, records: BTreeMap::new(), pseudonyms: BTreeSet::new(), rng }
    }

    pub fn public_key(&self) -> &[u8] {
        &self.key.public
    }

    fn fresh_digest(rng: &mut ChaCha8Rng, used: &BTreeSet<Digest>) -> Digest {
        loop {
            let mut d = ZERO_DIGEST;
            rng.fill_bytes(&mut d);
            if !used.contains(&d) {
                return d;
            }
        }
    }

    /// Issues a pseudonym ID and a certificate over (pseudonym, pub_i).
    pub fn register_identity(
        &mut self,
        real_id: &str,
        pub_i: &[u8],
    ) -> Result<(Digest, Certificate), IdentityError> {
        if self.records.contains_key(real_id) {
            return Err(IdentityError::DuplicateRealId);
        }
        let pid = Self::fresh_digest(&mut self.rng, &self.pseudonyms);
        let cert = Certificate::issue(
            self.scheme.as_ref(),
            AUTHORITY_NAME,
            &self.key,
            hex::encode(pid),
            pub_i.to_vec(),
        );
        self.pseudonyms.insert(pid);
        self.records.insert(
            real_id.to_string(),
            AuthorityRecord { pseudonym_id: pid, certificate: cert.clone() },
        );
        Ok((pid, cert))
    }

    pub fn lookup(&self, real_id: &str) -> Option<&AuthorityRecord> {
        self.records.get(real_id)
    }

    pub fn records(&self) -> impl Iterator<Item = (&String, &AuthorityRecord)> {
        self.records.iter()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn save(&self) -> String {
        let mut out = String::new();
        out.push_str(SNAPSHOT_HEADER);
        out.push('\n');
        let _ = writeln!(
            out,
            "K\t{}\t{}\t{}",
            AUTHORITY_NAME,
            hex::encode(&self.key.public),
            hex::encode(&self.key.private)
        );
        for (real_id, rec) in &self.records {
            let _ = writeln!(
                out,
                "A\t{}\t{}\t{}",
                hex::encode(real_id.as_bytes()),
                hex::encode(rec.pseudonym_id),
                cert_fields(&rec.certificate)
            );
        }
        out
    }

    pub fn load(scheme: Arc<dyn SignatureScheme>, text: &str, seed: u64) -> Result<Self, SnapshotError> {
        let mut lines = Snapshot::parse(text)?;
        let mut auth = IdentityAuthority::new(scheme, seed);
        auth.records.clear();
        auth.pseudonyms.clear();
        let mut have_key = false;
        for (line_no, fields) in lines.drain(..) {
            let err = |msg: &str| SnapshotError { line: line_no, msg: msg.to_string() };
            match fields[0].as_str() {
                "K" => {
                    if fields.len() != 4 || fields[1] != AUTHORITY_NAME {
                        return Err(err("malformed authority key record"));
                    }
                    auth.key = KeyPair {
                        public: hex::decode(&fields[2]).map_err(|_| err("bad key hex"))?,
                        private: hex::decode(&fields[3]).map_err(|_| err("bad key hex"))?,
                    };
                    have_key = true;
                }
                "A" => {
                    if fields.len() != 7 {
                        return Err(err("authority record needs 7 fields"));
                    }
                    let real = String::from_utf8(
                        hex::decode(&fields[1]).map_err(|_| err("bad real id hex"))?,
                    )
                    .map_err(|_| err("real id is not utf-8"))?;
                    let pid = parse_digest(&fields[2], line_no)?;
                    let cert = parse_cert(&fields[3..7], line_no)?;
                    auth.pseudonyms.insert(pid);
                    auth.records.insert(real, AuthorityRecord { pseudonym_id: pid, certificate: cert });
                }
                other => {
                    return Err(err(&format!("unexpected record kind {other:?} in authority snapshot")));
                }
            }
        }
        if !have_key {
            return Err(SnapshotError { line: 0, msg: "missing authority key record".into() });
        }
        Ok(auth)
    }
}

#[derive(Debug, Clone)]
pub struct RegistryRecord {
    pub pseudonym_id: Digest,
    pub network_id: Digest,
    pub public_key: Vec<u8>,
    pub certificate: Certificate,
    pub role: NodeRole,
    pub join_height: u64,
}

/// One change-log entry. Registration is logged with an all-zero
/// `old_network_id`, so replaying the log from the start reconstructs the
/// full pseudonym-to-network mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub pseudonym_id: Digest,
    pub old_network_id: Digest,
    pub new_network_id: Digest,
    pub timestamp_ms: u64,
}

/// The network registry. Holds (pseudonym_id, network_id, certificate)
/// tuples plus the rotation change log; never sees real identities.
pub struct NetworkRegistry {
    scheme: Arc<dyn SignatureScheme>,
    key: KeyPair,
    authority_public: Vec<u8>,
    by_pseudonym: BTreeMap<Digest, RegistryRecord>,
    by_network: BTreeMap<Digest, Digest>,
    change_log: Vec<LogRecord>,
    challenges: BTreeMap<Digest, [u8; 32]>,
    rng: ChaCha8Rng,
}

impl NetworkRegistry {
    pub fn new(scheme: Arc<dyn SignatureScheme>, authority_public: &[u8], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let key = scheme.generate(&mut rng);
        NetworkRegistry {
            scheme,
            key,
            authority_public: authority_public.to_vec(),
            by_pseudonym: BTreeMap::new(),
            by_network: BTreeMap::new(),
            change_log: Vec::new(),
            challenges: BTreeMap::new(),
            rng,
        }
    }

    pub fn public_key(&self) -> &[u8] {
        &self.key.public
    }

    /// Starts the possession-proof protocol for a pseudonym (registration)
    /// or a network id (rotation). The returned challenge must be signed by
    /// the key certified for that subject.
    pub fn issue_challenge(&mut self, subject: &Digest) -> [u8; 32] {
        let mut c = [0u8; 32];
        self.rng.fill_bytes(&mut c);
        self.challenges.insert(*subject, c);
        c
    }

    /// Issues a network ID for a certified pseudonym. `auth_proof` must be a
    /// signature over the previously issued challenge by the key certified
    /// in `cert_i`.
    pub fn register_network_id(
        &mut self,
        pseudonym_id: &Digest,
        cert_i: &Certificate,
        pub_g: &[u8],
        auth_proof: &[u8],
        role: NodeRole,
        join_height: u64,
        now_ms: u64,
    ) -> Result<(Digest, Certificate), IdentityError> {
        if !cert_i.verify(self.scheme.as_ref(), &self.authority_public)
            || cert_i.subject_id != hex::encode(pseudonym_id)
        {
            return Err(IdentityError::InvalidCertificate);
        }
        if self.by_pseudonym.contains_key(pseudonym_id) {
            return Err(IdentityError::DuplicatePseudonym);
        }
        let challenge = self
            .challenges
            .get(pseudonym_id)
            .ok_or(IdentityError::AuthenticationFailed)?;
        if !self.scheme.verify(&cert_i.subject_key, challenge, auth_proof) {
            return Err(IdentityError::AuthenticationFailed);
        }
        self.challenges.remove(pseudonym_id);

        let nid = self.fresh_network_id();
        let cert = Certificate::issue(
            self.scheme.as_ref(),
            REGISTRY_NAME,
            &self.key,
            hex::encode(nid),
            pub_g.to_vec(),
        );
        self.by_pseudonym.insert(
            *pseudonym_id,
            RegistryRecord {
                pseudonym_id: *pseudonym_id,
                network_id: nid,
                public_key: pub_g.to_vec(),
                certificate: cert.clone(),
                role,
                join_height,
            },
        );
        self.by_network.insert(nid, *pseudonym_id);
        self.change_log.push(LogRecord {
            pseudonym_id: *pseudonym_id,
            old_network_id: ZERO_DIGEST,
            new_network_id: nid,
            timestamp_ms: now_ms,
        });
        Ok((nid, cert))
    }

    fn fresh_network_id(&mut self) -> Digest {
        loop {
            let mut d = ZERO_DIGEST;
            self.rng.fill_bytes(&mut d);
            if !self.by_network.contains_key(&d) {
                return d;
            }
        }
    }

    /// Replaces a registered network ID after a possession proof under its
    /// certified key, appending a change-log entry.
    pub fn rotate_network_id(
        &mut self,
        old_network_id: &Digest,
        auth_proof: &[u8],
        now_ms: u64,
    ) -> Result<Digest, IdentityError> {
        let pid = *self
            .by_network
            .get(old_network_id)
            .ok_or(IdentityError::UnknownNetworkId)?;
        let challenge = self
            .challenges
            .get(old_network_id)
            .ok_or(IdentityError::AuthenticationFailed)?;
        let rec = self.by_pseudonym.get(&pid).expect("index consistent");
        if !self.scheme.verify(&rec.public_key, challenge, auth_proof) {
            return Err(IdentityError::AuthenticationFailed);
        }
        self.challenges.remove(old_network_id);

        let nid = self.fresh_network_id();
        let rec = self.by_pseudonym.get_mut(&pid).expect("index consistent");
        let pub_g = rec.public_key.clone();
        rec.network_id = nid;
        rec.certificate = Certificate::issue(
            self.scheme.as_ref(),
            REGISTRY_NAME,
            &self.key,
            hex::encode(nid),
            pub_g,
        );
        self.by_network.remove(old_network_id);
        self.by_network.insert(nid, pid);
        self.change_log.push(LogRecord {
            pseudonym_id: pid,
            old_network_id: *old_network_id,
            new_network_id: nid,
            timestamp_ms: now_ms,
        });
        Ok(nid)
    }

    pub fn lookup_pseudonym(&self, pseudonym_id: &Digest) -> Option<&RegistryRecord> {
        self.by_pseudonym.get(pseudonym_id)
    }

    pub fn lookup_network(&self, network_id: &Digest) -> Option<&RegistryRecord> {
        self.by_network
            .get(network_id)
            .and_then(|pid| self.by_pseudonym.get(pid))
    }

    pub fn records(&self) -> impl Iterator<Item = &RegistryRecord> {
        self.by_pseudonym.values()
    }

    pub fn change_log(&self) -> &[LogRecord] {
        &self.change_log
    }

    pub fn len(&self) -> usize {
        self.by_pseudonym.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_pseudonym.is_empty()
    }

    /// Folds the change log into a pseudonym-to-network mapping. Matches the
    /// live index exactly as long as the log is intact.
    pub fn replay_change_log(&self) -> BTreeMap<Digest, Digest> {
        let mut map = BTreeMap::new();
        for rec in &self.change_log {
            map.insert(rec.pseudonym_id, rec.new_network_id);
        }
        map
    }

    /// Certificate-chain check for a roster member: the stored certificate
    /// must name the network id and verify under the registry key.
    pub fn verify_member(&self, network_id: &Digest) -> bool {
        match self.lookup_network(network_id) {
            Some(rec) => {
                rec.certificate.subject_id == hex::encode(network_id)
                    && rec.certificate.verify(self.scheme.as_ref(), &self.key.public)
            }
            None => false,
        }
    }

    /// Roster of every registered member, or of one role.
    pub fn roster(&self, role: Option<NodeRole>) -> Roster {
        Roster::from_entries(self.by_pseudonym.values().filter_map(|r| {
            if role.is_some() && role != Some(r.role) {
                return None;
            }
            Some(RosterEntry {
                network_id: r.network_id,
                join_height: r.join_height,
                active: true,
            })
        }))
    }

    pub fn save(&self) -> String {
        let mut out = String::new();
        out.push_str(SNAPSHOT_HEADER);
        out.push('\n');
        let _ = writeln!(
            out,
            "K\t{}\t{}\t{}\t{}",
            REGISTRY_NAME,
            hex::encode(&self.key.public),
            hex::encode(&self.key.private),
            hex::encode(&self.authority_public)
        );
        for rec in self.by_pseudonym.values() {
            let _ = writeln!(
                out,
                "N\t{}\t{}\t{}\t{}\t{}\t{}",
                hex::encode(rec.pseudonym_id),
                hex::encode(rec.network_id),
                hex::encode(&rec.public_key),
                rec.role.name(),
                rec.join_height,
                cert_fields(&rec.certificate)
            );
        }
        for l in &self.change_log {
            let _ = writeln!(
                out,
                "L\t{}\t{}\t{}\t{}",
                hex::encode(l.pseudonym_id),
                hex::encode(l.old_network_id),
                hex::encode(l.new_network_id),
                l.timestamp_ms
            );
        }
        out
    }

    pub fn load(scheme: Arc<dyn SignatureScheme>, text: &str, seed: u64) -> Result<Self, SnapshotError> {
        let mut lines = Snapshot::parse(text)?;
        let mut reg = NetworkRegistry::new(scheme, &[], seed);
        let mut have_key = false;
        for (line_no, fields) in lines.drain(..) {
            let err = |msg: &str| SnapshotError { line: line_no, msg: msg.to_string() };
            match fields[0].as_str() {
                "K" => {
                    if fields.len() != 5 || fields[1] != REGISTRY_NAME {
                        return Err(err("malformed registry key record"));
                    }
                    reg.key = KeyPair {
                        public: hex::decode(&fields[2]).map_err(|_| err("bad key hex"))?,
                        private: hex::decode(&fields[3]).map_err(|_| err("bad key hex"))?,
                    };
                    reg.authority_public = hex::decode(&fields[4]).map_err(|_| err("bad key hex"))?;
                    have_key = true;
                }
                "N" => {
                    if fields.len() != 10 {
                        return Err(err("network record needs 10 fields"));
                    }
                    let pid = parse_digest(&fields[1], line_no)?;
                    let nid = parse_digest(&fields[2], line_no)?;
                    let public_key = hex::decode(&fields[3]).map_err(|_| err("bad key hex"))?;
                    let role = NodeRole::parse(&fields[4]).ok_or_else(|| err("unknown role"))?;
                    let join_height: u64 =
                        fields[5].parse().map_err(|_| err("bad join height"))?;
                    let cert = parse_cert(&fields[6..10], line_no)?;
                    reg.by_network.insert(nid, pid);
                    reg.by_pseudonym.insert(
                        pid,
                        RegistryRecord {
                            pseudonym_id: pid,
                            network_id: nid,
                            public_key,
                            certificate: cert,
                            role,
                            join_height,
                        },
                    );
                }
                "L" => {
                    if fields.len() != 5 {
                        return Err(err("log record needs 5 fields"));
                    }
                    reg.change_log.push(LogRecord {
                        pseudonym_id: parse_digest(&fields[1], line_no)?,
                        old_network_id: parse_digest(&fields[2], line_no)?,
                        new_network_id: parse_digest(&fields[3], line_no)?,
                        timestamp_ms: fields[4].parse().map_err(|_| err("bad timestamp"))?,
                    });
                }
                other => {
                    return Err(err(&format!("unexpected record kind {other:?} in registry snapshot")));
                }
            }
        }
        if !have_key {
            return Err(SnapshotError { line: 0, msg: "missing registry key record".into() });
        }
        Ok(reg)
    }
}

fn cert_fields(c: &Certificate) -> String {
    debug_assert!(!c.subject_id.contains(['\t', '\n']));
    debug_assert!(!c.issuer.contains(['\t', '\n']));
    format!(
        "{}\t{}\t{}\t{}",
        c.subject_id,
        hex::encode(&c.subject_key),
        c.issuer,
        hex::encode(&c.issuer_signature)
    )
}

fn parse_cert(fields: &[String], line: usize) -> Result<Certificate, SnapshotError> {
    let err = |msg: &str| SnapshotError { line, msg: msg.to_string() };
    Ok(Certificate {
        subject_id: fields[0].clone(),
        subject_key: hex::decode(&fields[1]).map_err(|_| err("bad certificate key hex"))?,
        issuer: fields[2].clone(),
        issuer_signature: hex::decode(&fields[3]).map_err(|_| err("bad signature hex"))?,
    })
}

fn parse_digest(s: &str, line: usize) -> Result<Digest, SnapshotError> {
    crate::crypto::digest_from_hex(s)
        .map_err(|e| SnapshotError { line, msg: format!("bad digest: {e}") })
}

struct Snapshot;

impl Snapshot {
    /// Splits snapshot text into (line_number, tab-separated fields),
    /// validating the header. Line numbers are 1-based over the whole file.
    fn parse(text: &str) -> Result<Vec<(usize, Vec<String>)>, SnapshotError> {
        let mut out = Vec::new();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == SNAPSHOT_HEADER => {}
            Some((_, h)) => {
                return Err(SnapshotError {
                    line: 1,
                    msg: format!("expected header {SNAPSHOT_HEADER:?}, found {h:?}"),
                })
            }
            None => return Err(SnapshotError { line: 1, msg: "empty snapshot".into() }),
        }
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<String> = line.split('\t').map(|s| s.to_string()).collect();
            if fields.is_empty() {
                continue;
            }
            out.push((idx + 1, fields));
        }
        Ok(out)
    }
}

/// Full two-stage enrollment of one node, as the simulator and tests use it:
/// identity key registered with the authority, then a network key registered
/// with the registry after the possession proof.
pub struct Enrollment {
    pub real_id: String,
    pub pseudonym_id: Digest,
    pub network_id: Digest,
    pub identity_key: KeyPair,
    pub network_key: KeyPair,
    pub cert_identity: Certificate,
    pub cert_network: Certificate,
}

pub fn enroll(
    authority: &mut IdentityAuthority,
    registry: &mut NetworkRegistry,
    scheme: &dyn SignatureScheme,
    rng: &mut dyn RngCore,
    real_id: &str,
    role: NodeRole,
    join_height: u64,
    now_ms: u64,
) -> Result<Enrollment, IdentityError> {
    let identity_key = scheme.generate(rng);
    let (pid, cert_identity) = authority.register_identity(real_id, &identity_key.public)?;
    let network_key = scheme.generate(rng);
    let challenge = registry.issue_challenge(&pid);
    let proof = scheme.sign(&identity_key.private, &challenge);
    let (nid, cert_network) = registry.register_network_id(
        &pid,
        &cert_identity,
        &network_key.public,
        &proof,
        role,
        join_height,
        now_ms,
    )?;
    Ok(Enrollment {
        real_id: real_id.to_string(),
        pseudonym_id: pid,
        network_id: nid,
        identity_key,
        network_key,
        cert_identity,
        cert_network,
    })
}
