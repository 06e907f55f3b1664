//! MQTT 3.1.1 publish/subscribe with a post-quantum signature PKI.
//!
//! Devices authenticate to the broker with a CA-issued certificate and a
//! signed connect credential; every application message travels inside a
//! signed envelope that subscribers verify before delivery.

pub mod bench;
pub mod broker;
pub mod cli;
pub mod client;
pub mod clock;
pub mod codec;
pub mod devices;
pub mod envelope;
pub(crate) mod net;
pub mod pki;
pub mod testkit;
pub mod topic;
pub mod wire;
