//! On-disk deployment state.
//!
//! `deployment.conf` holds the private seed and rotation history. The other
//! files are public artifacts a client or provider verifies against.

use std::fs;
use std::path::{Path, PathBuf};

use mfaas_core::codec::Canonical;
use mfaas_core::crypto::{Digest, VerifyingKey};
use mfaas_core::kde::PublishedKeys;
use mfaas_core::orchestrator::{parse_key_values, Deployment, Keyring, PoolConfig};

use crate::CliError;

pub const STATE: &str = "deployment.conf";
pub const ROOT: &str = "root.pub";
pub const EXPECTED: &str = "expected.conf";

pub fn keys_file(epoch: u64) -> String {
    format!("keys-{epoch}.hex")
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn decode_hex<T: Canonical>(path: &Path) -> Result<T, CliError> {
    let text = read_text(path)?;
    let bytes = hex::decode(text.trim())
        .map_err(|e| CliError::Usage(format!("{}: not hex: {e}", path.display())))?;
    T::from_canonical_bytes(&bytes)
        .map_err(|e| CliError::Usage(format!("{}: malformed: {e}", path.display())))
}

pub fn encode_hex<T: Canonical>(value: &T) -> String {
    let mut s = hex::encode(value.to_canonical_bytes());
    s.push('\n');
    s
}

pub fn parse_digest(text: &str) -> Result<Digest, CliError> {
    let bytes = hex::decode(text.trim()).map_err(|e| CliError::Usage(format!("digest: {e}")))?;
    let arr: [u8; 32] = bytes
        .try_into()
        .map_err(|_| CliError::Usage("digest: expected 32 bytes".into()))?;
    Ok(Digest(arr))
}

#[derive(Debug, Clone)]
pub struct State {
    pub seed: u64,
    pub rotations: Vec<u64>,
}

impl State {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let map = parse_key_values(&read_text(&dir.join(STATE))?)
            .map_err(|e| CliError::Usage(format!("{STATE}: {e}")))?;
        let bad = |k: &str| CliError::Usage(format!("{STATE}: bad {k}"));
        let seed = map
            .get("seed")
            .ok_or_else(|| bad("seed"))?
            .parse()
            .map_err(|_| bad("seed"))?;
        let rotations = match map.get("rotations").map(String::as_str) {
            None | Some("") => Vec::new(),
            Some(list) => list
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| bad("rotations")))
                .collect::<Result<_, _>>()?,
        };
        Ok(Self { seed, rotations })
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let rotations: Vec<String> = self.rotations.iter().map(u64::to_string).collect();
        write_text(
            &dir.join(STATE),
            &format!("seed = {}\nrotations = {}\n", self.seed, rotations.join(",")),
        )
    }

    /// Rebuilds the deployment by replaying its history.
    pub fn deployment(&self, pool: PoolConfig) -> Deployment {
        let mut d = Deployment::new(self.seed, pool);
        for &r in &self.rotations {
            d.rotate(r);
        }
        d
    }
}

/// Writes the public artifacts of a deployment.
pub fn publish(dir: &Path, d: &Deployment) -> Result<Vec<PathBuf>, CliError> {
    let mut written = vec![dir.join(ROOT), dir.join(EXPECTED)];
    write_text(&written[0], &encode_hex(&d.root.public()))?;
    write_text(
        &written[1],
        &format!("kde = {}\nworker = {}\n", d.expected_kde(), d.expected_worker()),
    )?;
    for p in d.kde.all_published() {
        let path = dir.join(keys_file(p.epoch().unwrap_or_default()));
        write_text(&path, &encode_hex(&p))?;
        written.push(path);
    }
    Ok(written)
}

/// What a relying party trusts: the root key, expected enclave measurements
/// and every published key set found in the directory.
pub struct PublicView {
    pub root: VerifyingKey,
    pub kde: Digest,
    pub worker: Digest,
    pub published: Vec<PublishedKeys>,
}

impl PublicView {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let root = decode_hex(&dir.join(ROOT))?;
        let map = parse_key_values(&read_text(&dir.join(EXPECTED))?)
            .map_err(|e| CliError::Usage(format!("{EXPECTED}: {e}")))?;
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| CliError::Usage(format!("{EXPECTED}: missing {k}")))
                .and_then(|v| parse_digest(v))
        };
        let (kde, worker) = (get("kde")?, get("worker")?);
        let mut files: Vec<(u64, PathBuf)> = fs::read_dir(dir)
            .map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let epoch = name.strip_prefix("keys-")?.strip_suffix(".hex")?.parse().ok()?;
                Some((epoch, e.path()))
            })
            .collect();
        files.sort();
        let published = files
            .iter()
            .map(|(_, p)| decode_hex(p))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            root,
            kde,
            worker,
            published,
        })
    }

    pub fn latest(&self) -> Option<&PublishedKeys> {
        self.published.iter().max_by_key(|p| p.epoch())
    }

    pub fn keyring(&self) -> Result<Keyring, CliError> {
        Keyring::new(&self.root, &self.kde, &self.worker, &self.published)
            .map_err(|e| CliError::Rejected(format!("key set attestation: {e}")))
    }
}
