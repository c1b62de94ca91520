pub mod channel;
pub mod clock;
pub mod consensus;
pub mod crypto;
pub mod dht;
pub mod dmq;
pub mod node;
pub mod par;
pub mod pin;
pub mod rendezvous;
pub mod rpc;
pub mod sim;
pub mod store;
pub mod wire;
