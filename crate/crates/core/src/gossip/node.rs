use std::sync::Mutex;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataio::{Dataset, Shard};
use crate::error::{Error, Result};
use crate::numcore::{Mlp, Optimizer, Tensor};

use super::payload::{make_payload, receive_loss_on_tape, Annotation, Inbox, Payload, PayloadKind};
use super::topology::Topology;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct NodeCounters {
    pub local_steps: u64,
    pub external_steps: u64,
    pub broadcasts: u64,
    pub payloads_sent: u64,
    pub empty_inbox_fallbacks: u64,
    /// Reads of rows outside the node's own shard; must stay zero.
    pub audit_violations: u64,
}

impl NodeCounters {
    pub fn backward_passes(&self) -> u64 {
        self.local_steps + self.external_steps
    }
}

/// One simulated learner.
#[derive(Debug)]
pub struct Node {
    pub id: usize,
    pub model: Mlp<f32>,
    pub p_c: f64,
    pub p_b: f64,
    pub counters: NodeCounters,
    opt: Optimizer<f32>,
    shard: Shard,
    owned: Vec<usize>,
    rng: ChaCha8Rng,
}

/// Settings shared by every node during a step.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    pub dataset: &'a Dataset,
    pub kind: PayloadKind,
    pub tau: f32,
    pub feature_weight: f32,
    pub batch_size: usize,
    /// Broadcasting is suppressed while false.
    pub share: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepReport {
    pub consumed_external: bool,
    pub fallback: bool,
    pub broadcast: bool,
    pub delivered: usize,
    pub dropped: usize,
}

impl Node {
    pub fn new(id: usize, model: Mlp<f32>, opt: Optimizer<f32>, shard: Shard, p_c: f64, p_b: f64, rng: ChaCha8Rng) -> Result<Self> {
        for (name, p) in [("p_c", p_c), ("p_b", p_b)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} is not a probability")));
            }
        }
        let mut owned = shard.indices().to_vec();
        owned.sort_unstable();
        Ok(Node {
            id,
            model,
            p_c,
            p_b,
            counters: NodeCounters::default(),
            opt,
            shard,
            owned,
            rng,
        })
    }

    pub fn shard(&self) -> &Shard {
        &self.shard
    }

    /// Gathers rows of the node's own shard, counting any foreign index.
    fn read_local(&mut self, ds: &Dataset, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let foreign = idx
            .iter()
            .filter(|i| self.owned.binary_search(i).is_err())
            .count();
        self.counters.audit_violations += foreign as u64;
        ds.batch(idx)
    }
}

/// Consume or train locally, then maybe broadcast; exactly one optimizer update.
pub fn node_step(node: &mut Node, topology: &Topology, inboxes: &[Mutex<Inbox>], ctx: &StepContext<'_>) -> Result<StepReport> {
    let consume = node.rng.random_bool(node.p_c);
    let broadcast = node.rng.random_bool(node.p_b) && ctx.share && ctx.kind != PayloadKind::None;
    let mut report = StepReport {
        broadcast,
        ..StepReport::default()
    };

    let external = if consume {
        let popped = inboxes[node.id].lock().expect("inbox lock").pop();
        if popped.is_none() {
            node.counters.empty_inbox_fallbacks += 1;
            report.fallback = true;
        }
        popped
    } else {
        None
    };

    let outgoing: Option<Payload> = match external {
        Some(payload) => {
            let (tau, fw) = (ctx.tau, ctx.feature_weight);
            node.model.train_step(&mut node.opt, &payload.inputs, &mut node.rng, |tape, tr| {
                let loss = receive_loss_on_tape(tape, tr, &payload, tau)?;
                Ok(match payload.annotation.as_ref() {
                    Annotation::Features(_) => tape.scale(loss, fw),
                    _ => loss,
                })
            })?;
            node.counters.external_steps += 1;
            report.consumed_external = true;
            if broadcast {
                Some(payload.relayed_by(&node.model)?)
            } else {
                None
            }
        }
        None => {
            let idx = node.shard.next_batch(ctx.batch_size, &mut node.rng);
            let (x, y) = node.read_local(ctx.dataset, &idx);
            node.model.train_labels(&mut node.opt, &x, &y, &mut node.rng)?;
            node.counters.local_steps += 1;
            if broadcast {
                Some(make_payload(&node.model, node.id, x, &y, ctx.kind)?)
            } else {
                None
            }
        }
    };

    if let Some(p) = outgoing {
        node.counters.broadcasts += 1;
        for &j in topology.neighbors(node.id) {
            let dropped = inboxes[j].lock().expect("inbox lock").push(p.clone());
            report.delivered += 1;
            report.dropped += dropped as usize;
        }
        node.counters.payloads_sent += report.delivered as u64;
    }
    Ok(report)
}
