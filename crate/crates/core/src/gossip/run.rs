use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataio::{partition, Dataset};
use crate::ensemble::{evaluate_group, FusionMode};
use crate::error::{Error, Result};
use crate::harness::metrics::{MetricsTable, Summary};
use crate::harness::seeds::{derive_seed, stream};
use crate::numcore::{Activation, Mlp, Optimizer, OptimizerKind};

use super::node::{node_step, Node, NodeCounters, StepContext};
use super::payload::{Inbox, PayloadKind};
use super::topology::{build_topology, equilibrium_broadcast_prob, Topology};

/// Broadcast probability: a fixed value or the equilibrium rate `p_c / in_degree`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum BroadcastProb {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for BroadcastProb {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BroadcastProb::Auto => s.serialize_str("auto"),
            BroadcastProb::Fixed(p) => s.serialize_f64(*p),
        }
    }
}

impl<'de> Deserialize<'de> for BroadcastProb {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(p) => Ok(BroadcastProb::Fixed(p)),
            Raw::Word(w) if w == "auto" => Ok(BroadcastProb::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("expected a number or \"auto\", got \"{w}\""))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GossipConfig {
    pub nodes: usize,
    /// Out-neighbors per node; `nodes - 1` (complete graph) when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    pub payload_kind: PayloadKind,
    pub temperature: f64,
    /// Multiplies the feature-matching loss on received payloads.
    pub feature_weight: f64,
    pub p_c: f64,
    pub p_b: BroadcastProb,
    pub rounds: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub batch_size: usize,
    /// Widths of the hidden layers; the last one is the shared feature layer.
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub optimizer: OptimizerKind,
    /// Training rows spread over all nodes; every row of the training split when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    /// Rows of the validation split used for evaluation; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_size: Option<usize>,
    pub inbox_capacity: usize,
    pub fusion: FusionMode,
    /// No node broadcasts before this round.
    pub share_from_round: u64,
    /// Steps nodes concurrently within a round; inbox order then depends on thread timing.
    pub parallel: bool,
}

impl Default for GossipConfig {
    fn default() -> Self {
        GossipConfig {
            nodes: 10,
            p: None,
            payload_kind: PayloadKind::Labels,
            temperature: 1.0,
            feature_weight: 1.0,
            p_c: 0.5,
            p_b: BroadcastProb::Auto,
            rounds: 5000,
            eval_every: 100,
            seed: 0,
            batch_size: 32,
            hidden: vec![128, 64],
            dropout: 0.0,
            optimizer: OptimizerKind::adam(),
            train_size: None,
            eval_size: None,
            inbox_capacity: 64,
            fusion: FusionMode::Confidence,
            share_from_round: 0,
            parallel: false,
        }
    }
}

impl GossipConfig {
    pub fn neighbors(&self) -> usize {
        self.p.unwrap_or(self.nodes.saturating_sub(1))
    }

    /// Fills defaults that depend on other keys.
    pub fn resolved(mut self) -> Self {
        self.p = Some(self.neighbors());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::config("nodes", "must be at least 1"));
        }
        if self.neighbors() > self.nodes - 1 {
            return Err(Error::config("p", format!("{} exceeds nodes - 1 = {}", self.neighbors(), self.nodes - 1)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("temperature", "must be positive"));
        }
        if !(self.feature_weight >= 0.0) || !self.feature_weight.is_finite() {
            return Err(Error::config("feature_weight", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.p_c) {
            return Err(Error::config("p_c", "must lie in [0, 1]"));
        }
        if let BroadcastProb::Fixed(p) = self.p_b {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("p_b", "must lie in [0, 1] or be \"auto\""));
            }
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "needs at least one non-empty hidden layer"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if self.train_size.is_some_and(|n| n < self.nodes) {
            return Err(Error::config("train_size", "must give every node at least one row"));
        }
        if self.inbox_capacity == 0 {
            return Err(Error::config("inbox_capacity", "must be at least 1"));
        }
        Ok(())
    }

    /// Effective (p_c, p_b) for a node with the given in-degree.
    pub fn probabilities(&self, in_degree: usize) -> Result<(f64, f64)> {
        if self.payload_kind == PayloadKind::None || in_degree == 0 {
            return Ok((0.0, 0.0));
        }
        let p_b = match self.p_b {
            BroadcastProb::Fixed(p) => p,
            BroadcastProb::Auto => equilibrium_broadcast_prob(self.p_c, in_degree)?,
        };
        Ok((self.p_c, p_b))
    }
}

/// Outcome of a full gossip simulation.
#[derive(Debug)]
pub struct GossipRun {
    pub metrics: MetricsTable,
    pub summary: Summary,
    pub topology: Topology,
    pub counters: Vec<NodeCounters>,
    pub inbox_received: Vec<u64>,
    pub inbox_dropped: Vec<u64>,
    pub inbox_pending: Vec<usize>,
    pub models: Vec<Mlp<f32>>,
}

impl GossipRun {
    pub fn total_backward_passes(&self) -> u64 {
        self.counters.iter().map(NodeCounters::backward_passes).sum()
    }

    /// Every delivered payload is either consumed, still queued, or was dropped.
    pub fn conservation_holds(&self) -> bool {
        let sent: u64 = self.counters.iter().map(|c| c.payloads_sent).sum();
        let received: u64 = self.inbox_received.iter().sum();
        let consumed: u64 = self.counters.iter().map(|c| c.external_steps).sum();
        let dropped: u64 = self.inbox_dropped.iter().sum();
        let pending: u64 = self.inbox_pending.iter().map(|&n| n as u64).sum();
        let broadcast_fanout: u64 = self
            .counters
            .iter()
            .enumerate()
            .map(|(i, c)| c.broadcasts * self.topology.neighbors(i).len() as u64)
            .sum();
        sent == received && sent == broadcast_fanout && received == consumed + dropped + pending
    }

    pub fn audit_violations(&self) -> u64 {
        self.counters.iter().map(|c| c.audit_violations).sum()
    }
}

pub(crate) fn metric_columns(nodes: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["avg_acc", "collective_acc", "backward_passes"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..nodes {
        for c in ["local", "external", "broadcasts", "overflows", "fallbacks"] {
            cols.push(format!("node{i}_{c}"));
        }
    }
    cols
}

/// Runs `rounds` global rounds; in each, every node takes one step in id order.
pub fn run_gossip(cfg: &GossipConfig, train: &Dataset, valid: &Dataset) -> Result<GossipRun> {
    cfg.validate()?;
    let start = Instant::now();
    let topology = build_topology(cfg.nodes, cfg.neighbors())?;
    let n_train = cfg.train_size.unwrap_or(train.len());
    if n_train > train.len() {
        return Err(Error::config("train_size", format!("only {} training rows available", train.len())));
    }
    let pool = crate::dataio::split_indices(train.len(), n_train, derive_seed(cfg.seed, "gossip/subset")).1;
    let shards = partition(pool.len(), cfg.nodes, derive_seed(cfg.seed, "gossip/partition"))
        .map_err(|e| Error::config("nodes", e.to_string()))?;
    let eval = valid.head(cfg.eval_size.unwrap_or(valid.len()));
    if eval.is_empty() {
        return Err(Error::config("eval_size", "evaluation set is empty"));
    }

    let mut dims = vec![train.dim()];
    dims.extend(&cfg.hidden);
    dims.push(train.classes());
    let mut nodes = Vec::with_capacity(cfg.nodes);
    for (i, shard) in shards.into_iter().enumerate() {
        let mut init = stream(cfg.seed, &format!("gossip/init/{i}"));
        let model = Mlp::new(&dims, Activation::Relu, Activation::Identity, cfg.dropout, &mut init)?;
        let shard = crate::dataio::Shard::new(i, shard.indices().iter().map(|&k| pool[k]).collect());
        let (p_c, p_b) = cfg.probabilities(topology.in_degree[i])?;
        nodes.push(Node::new(
            i,
            model,
            Optimizer::new(cfg.optimizer),
            shard,
            p_c,
            p_b,
            stream(cfg.seed, &format!("gossip/node/{i}")),
        )?);
    }
    let inboxes: Vec<Mutex<Inbox>> = (0..cfg.nodes).map(|_| Mutex::new(Inbox::new(cfg.inbox_capacity))).collect();

    let mut metrics = MetricsTable::new(run_id(cfg), "round", metric_columns(cfg.nodes));
    for round in 1..=cfg.rounds {
        let ctx = StepContext {
            dataset: train,
            kind: cfg.payload_kind,
            tau: cfg.temperature as f32,
            feature_weight: cfg.feature_weight as f32,
            batch_size: cfg.batch_size,
            share: round > cfg.share_from_round,
        };
        if cfg.parallel {
            nodes
                .par_iter_mut()
                .try_for_each(|n| node_step(n, &topology, &inboxes, &ctx).map(|_| ()))?;
        } else {
            for n in nodes.iter_mut() {
                node_step(n, &topology, &inboxes, &ctx)?;
            }
        }
        if round % cfg.eval_every == 0 || round == cfg.rounds {
            let models: Vec<&Mlp<f32>> = nodes.iter().map(|n| &n.model).collect();
            let g = evaluate_group(&models, &eval, cfg.fusion)?;
            let mut row = vec![g.avg_acc, g.collective_acc, (round * cfg.nodes as u64) as f64];
            for (n, inbox) in nodes.iter().zip(&inboxes) {
                let c = &n.counters;
                let dropped = inbox.lock().expect("inbox lock").dropped;
                row.extend([c.local_steps, c.external_steps, c.broadcasts, dropped, c.empty_inbox_fallbacks].map(|v| v as f64));
            }
            metrics.push(round, row, start.elapsed().as_secs_f64())?;
        }
    }

    let mut summary = Summary::peak_of(&metrics, "collective_acc");
    if let Some(last) = metrics.records.last() {
        summary.add("final_avg_acc", last.values[0]);
        summary.add("final_collective_acc", last.values[1]);
    }
    let inboxes: Vec<Inbox> = inboxes.into_iter().map(|m| m.into_inner().expect("inbox lock")).collect();
    Ok(GossipRun {
        metrics,
        summary,
        topology,
        counters: nodes.iter().map(|n| n.counters).collect(),
        inbox_received: inboxes.iter().map(|b| b.received).collect(),
        inbox_dropped: inboxes.iter().map(|b| b.dropped).collect(),
        inbox_pending: inboxes.iter().map(Inbox::len).collect(),
        models: nodes.into_iter().map(|n| n.model).collect(),
    })
}

fn run_id(cfg: &GossipConfig) -> String {
    format!("gossip-{}n-{}-s{}", cfg.nodes, cfg.payload_kind.as_str(), cfg.seed)
}
