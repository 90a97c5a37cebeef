pub mod attested;
pub mod clock;
pub mod credential;
pub mod digest;
pub mod enclave;
pub mod federation;
pub mod issuer;
pub mod keys;
pub mod ledger;
pub mod net;
pub mod proof;
pub mod scenario;
pub mod service;
#[cfg(test)]
mod testkit;
pub mod token;
pub mod wallet;
