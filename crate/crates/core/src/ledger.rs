//! Simulated append-only chain with a proof-verifier contract and an event
//! indexer.
//!
//! One transaction per block. Block `n` has timestamp `genesis + 12 n`.
//! Verifier contracts hold only their deployment parameters; verification
//! results live in block event logs.
//!
//! The index can be built from the chain itself or from events supplied by
//! an external provider. The latter trusts the provider to report events
//! faithfully.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::digest::{canonical_json, canonical_json_digest, Digest};
use crate::proof::{default_registry, statement_digest, Proof, ProofStatement};

pub const BLOCK_INTERVAL_S: u64 = 12;
pub const PROOF_VERIFIED: &str = "ProofVerified";

pub type SharedChain = Arc<RwLock<Chain>>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("unknown proof backend {0:?}")]
    UnknownBackend(String),
    #[error("no contract at {0}")]
    UnknownContract(String),
    #[error("chain integrity broken at block {block}: {reason}")]
    Integrity { block: u64, reason: String },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierContract {
    pub address: String,
    pub backend_id: String,
    pub trusted_roots: Vec<Digest>,
    pub expected_measurement: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TxBody {
    DeployVerifier {
        backend_id: String,
        trusted_roots: Vec<Digest>,
        expected_measurement: Digest,
    },
    SubmitProof {
        contract: String,
        statement: ProofStatement,
        proof: Proof,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tx {
    pub index: u64,
    pub body: TxBody,
}

impl Tx {
    pub fn digest(&self) -> Digest {
        canonical_json_digest(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub contract: String,
    pub event: String,
    pub credential_digest: Digest,
    pub statement_digest: Digest,
    pub outcome: bool,
    pub tx_digest: Digest,
    pub block_number: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventRef {
    pub credential_digest: Digest,
    pub tx_digest: Digest,
    pub block_number: u64,
}

impl LedgerEvent {
    pub fn event_ref(&self) -> EventRef {
        EventRef {
            credential_digest: self.credential_digest,
            tx_digest: self.tx_digest,
            block_number: self.block_number,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxReceipt {
    pub success: bool,
    pub tx_digest: Digest,
    pub block_number: u64,
    pub events: Vec<LedgerEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub number: u64,
    pub parent_digest: Digest,
    pub timestamp: u64,
    pub txs: Vec<Tx>,
    /// Success flag per transaction.
    pub results: Vec<bool>,
    pub events: Vec<LedgerEvent>,
    pub digest: Digest,
}

#[derive(Serialize)]
struct BlockContents<'a> {
    number: u64,
    parent_digest: &'a Digest,
    timestamp: u64,
    txs: &'a [Tx],
    results: &'a [bool],
    events: &'a [LedgerEvent],
}

impl Block {
    pub fn compute_digest(&self) -> Digest {
        canonical_json_digest(&BlockContents {
            number: self.number,
            parent_digest: &self.parent_digest,
            timestamp: self.timestamp,
            txs: &self.txs,
            results: &self.results,
            events: &self.events,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFilter {
    pub contract: Option<String>,
    pub credential_digest: Option<Digest>,
    pub from_block: Option<u64>,
}

/// Credential digest to the events recorded for it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Index {
    refs: BTreeMap<Digest, Vec<EventRef>>,
}

impl Index {
    /// Build solely from the chain's own blocks.
    pub fn rebuild(chain: &Chain) -> Self {
        Self::from_provider(chain.blocks.iter().flat_map(|b| b.events.iter().cloned()))
    }

    /// Build from events delivered by an external provider subscription.
    pub fn from_provider(events: impl IntoIterator<Item = LedgerEvent>) -> Self {
        let mut idx = Self::default();
        for e in events {
            idx.record(&e);
        }
        idx
    }

    pub fn record(&mut self, e: &LedgerEvent) {
        if e.event == PROOF_VERIFIED {
            self.refs.entry(e.credential_digest).or_default().push(e.event_ref());
        }
    }

    pub fn lookup(&self, credential_digest: &Digest) -> Vec<EventRef> {
        self.refs.get(credential_digest).cloned().unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.refs.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    blocks: Vec<Block>,
    contracts: BTreeMap<String, VerifierContract>,
    index: Index,
}

pub fn rebuild_index(chain: &Chain) -> Index {
    Index::rebuild(chain)
}

pub fn new_chain(genesis_timestamp: u64) -> Chain {
    let mut genesis = Block {
        number: 0,
        parent_digest: Digest::ZERO,
        timestamp: genesis_timestamp,
        txs: vec![],
        results: vec![],
        events: vec![],
        digest: Digest::ZERO,
    };
    genesis.digest = genesis.compute_digest();
    Chain {
        blocks: vec![genesis],
        contracts: BTreeMap::new(),
        index: Index::default(),
    }
}

fn contract_address(backend_id: &str, trusted_roots: &[Digest], expected_measurement: &Digest, tx_index: u64) -> String {
    #[derive(Serialize)]
    struct Deployment<'a> {
        backend_id: &'a str,
        trusted_roots: &'a [Digest],
        expected_measurement: &'a Digest,
        tx_index: u64,
    }
    let d = canonical_json_digest(&Deployment {
        backend_id,
        trusted_roots,
        expected_measurement,
        tx_index,
    });
    hex::encode(&d.0[..20])
}

impl Chain {
    pub fn height(&self) -> u64 {
        self.blocks.len() as u64 - 1
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn genesis_timestamp(&self) -> u64 {
        self.blocks[0].timestamp
    }

    pub fn head(&self) -> &Block {
        self.blocks.last().expect("genesis always present")
    }

    pub fn contract(&self, address: &str) -> Option<&VerifierContract> {
        self.contracts.get(address)
    }

    pub fn contracts(&self) -> impl Iterator<Item = &VerifierContract> {
        self.contracts.values()
    }

    /// The incrementally maintained index.
    pub fn live_index(&self) -> &Index {
        &self.index
    }

    fn append(&mut self, tx: Tx, success: bool, events: Vec<LedgerEvent>) -> &Block {
        let number = self.blocks.len() as u64;
        let mut block = Block {
            number,
            parent_digest: self.head().digest,
            timestamp: self.genesis_timestamp() + BLOCK_INTERVAL_S * number,
            txs: vec![tx],
            results: vec![success],
            events,
            digest: Digest::ZERO,
        };
        block.digest = block.compute_digest();
        for e in &block.events {
            self.index.record(e);
        }
        self.blocks.push(block);
        self.head()
    }

    fn next_tx_index(&self) -> u64 {
        self.blocks.iter().map(|b| b.txs.len() as u64).sum()
    }

    pub fn deploy_verifier(
        &mut self,
        backend_id: &str,
        trusted_roots: Vec<Digest>,
        expected_measurement: Digest,
    ) -> Result<VerifierContract, LedgerError> {
        default_registry()
            .get(backend_id)
            .map_err(|_| LedgerError::UnknownBackend(backend_id.to_string()))?;
        let index = self.next_tx_index();
        let contract = VerifierContract {
            address: contract_address(backend_id, &trusted_roots, &expected_measurement, index),
            backend_id: backend_id.to_string(),
            trusted_roots: trusted_roots.clone(),
            expected_measurement,
        };
        let tx = Tx {
            index,
            body: TxBody::DeployVerifier {
                backend_id: backend_id.to_string(),
                trusted_roots,
                expected_measurement,
            },
        };
        self.append(tx, true, vec![]);
        self.contracts.insert(contract.address.clone(), contract.clone());
        Ok(contract)
    }

    pub fn submit_proof_tx(
        &mut self,
        contract_address: &str,
        statement: &ProofStatement,
        proof: &Proof,
    ) -> Result<TxReceipt, LedgerError> {
        let contract = self
            .contracts
            .get(contract_address)
            .ok_or_else(|| LedgerError::UnknownContract(contract_address.to_string()))?
            .clone();
        let verified = statement.measurement == contract.expected_measurement
            && default_registry()
                .verify(&contract.backend_id, statement, proof, &contract.trusted_roots)
                .unwrap_or(false);
        let tx = Tx {
            index: self.next_tx_index(),
            body: TxBody::SubmitProof {
                contract: contract.address.clone(),
                statement: statement.clone(),
                proof: proof.clone(),
            },
        };
        let tx_digest = tx.digest();
        let block_number = self.blocks.len() as u64;
        let events = if verified {
            vec![LedgerEvent {
                contract: contract.address,
                event: PROOF_VERIFIED.into(),
                credential_digest: statement.credential_digest,
                statement_digest: statement_digest(statement),
                outcome: statement.outcome,
                tx_digest,
                block_number,
            }]
        } else {
            vec![]
        };
        let block = self.append(tx, verified, events);
        Ok(TxReceipt {
            success: verified,
            tx_digest,
            block_number,
            events: block.events.clone(),
        })
    }

    pub fn get_events(&self, filter: &EventFilter) -> Vec<LedgerEvent> {
        self.blocks
            .iter()
            .skip(filter.from_block.unwrap_or(0) as usize)
            .flat_map(|b| b.events.iter())
            .filter(|e| filter.contract.as_ref().is_none_or(|c| &e.contract == c))
            .filter(|e| filter.credential_digest.is_none_or(|d| e.credential_digest == d))
            .cloned()
            .collect()
    }

    /// The single event an [`EventRef`] points at, if any.
    pub fn resolve(&self, r: &EventRef) -> Option<&LedgerEvent> {
        let block = self.blocks.get(r.block_number as usize)?;
        let mut hits = block
            .events
            .iter()
            .filter(|e| e.tx_digest == r.tx_digest && e.credential_digest == r.credential_digest);
        let first = hits.next()?;
        hits.next().is_none().then_some(first)
    }

    /// One canonical JSON block per line.
    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend_from_slice(&canonical_json(b));
            out.push(b'\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), LedgerError> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| LedgerError::Io(e.to_string()))
    }

    /// Load and replay a persisted chain. Every block is re-executed and
    /// must reproduce the stored bytes exactly.
    pub fn from_jsonl(bytes: &[u8]) -> Result<Chain, LedgerError> {
        let text = std::str::from_utf8(bytes).map_err(|e| LedgerError::Integrity {
            block: 0,
            reason: e.to_string(),
        })?;
        let mut lines = text.lines().enumerate();
        let broken = |block: usize, reason: String| LedgerError::Integrity {
            block: block as u64,
            reason,
        };
        let (_, first) = lines.next().ok_or_else(|| broken(0, "empty file".into()))?;
        let genesis: Block = serde_json::from_str(first).map_err(|e| broken(0, e.to_string()))?;
        let mut chain = new_chain(genesis.timestamp);
        if chain.blocks[0] != genesis {
            return Err(broken(0, "genesis does not match".into()));
        }
        for (n, line) in lines {
            let stored: Block = serde_json::from_str(line).map_err(|e| broken(n, e.to_string()))?;
            if stored.txs.len() != 1 {
                return Err(broken(n, "expected exactly one transaction".into()));
            }
            match &stored.txs[0].body {
                TxBody::DeployVerifier {
                    backend_id,
                    trusted_roots,
                    expected_measurement,
                } => {
                    chain
                        .deploy_verifier(backend_id, trusted_roots.clone(), *expected_measurement)
                        .map_err(|e| broken(n, e.to_string()))?;
                }
                TxBody::SubmitProof {
                    contract,
                    statement,
                    proof,
                } => {
                    chain
                        .submit_proof_tx(contract, statement, proof)
                        .map_err(|e| broken(n, e.to_string()))?;
                }
            }
            if chain.head() != &stored || canonical_json(&stored) != line.as_bytes() {
                return Err(broken(n, "replayed block differs from stored block".into()));
            }
        }
        Ok(chain)
    }

    pub fn load(path: &Path) -> Result<Chain, LedgerError> {
        let bytes = std::fs::read(path).map_err(|e| LedgerError::Io(e.to_string()))?;
        Self::from_jsonl(&bytes)
    }
}
