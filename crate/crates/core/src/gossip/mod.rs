//! Decentralized consume/broadcast training over a simulated network of nodes.

mod node;
mod payload;
mod run;
mod topology;

pub use node::{node_step, Node, NodeCounters, StepContext, StepReport};
pub use payload::{make_payload, receive_loss, receive_loss_on_tape, Annotation, Inbox, Payload, PayloadKind};
pub use run::{run_gossip, BroadcastProb, GossipConfig, GossipRun};
pub use topology::{build_topology, equilibrium_broadcast_prob, Topology};
