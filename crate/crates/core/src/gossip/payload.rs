use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{cross_entropy_full, mse_features, softmax_with_temperature, Mlp, MlpTrace, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    Logits,
    #[default]
    Labels,
    Features,
    None,
}

impl PayloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadKind::Logits => "logits",
            PayloadKind::Labels => "labels",
            PayloadKind::Features => "features",
            PayloadKind::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Annotation {
    /// Raw output scores of the sender; receivers normalize them.
    Logits(Tensor<f32>),
    Labels(Vec<usize>),
    /// Sender's last hidden layer.
    Features(Tensor<f32>),
}

impl Annotation {
    fn rows(&self) -> usize {
        match self {
            Annotation::Logits(t) | Annotation::Features(t) => t.rows(),
            Annotation::Labels(l) => l.len(),
        }
    }
}

/// A minibatch travelling between nodes. Cloning shares the underlying data.
#[derive(Clone, Debug, PartialEq)]
pub struct Payload {
    pub inputs: Arc<Tensor<f32>>,
    pub annotation: Arc<Annotation>,
    pub origin: usize,
    pub hops: u32,
}

impl Payload {
    pub fn new(inputs: Tensor<f32>, annotation: Annotation, origin: usize) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::invalid("empty payload batch"));
        }
        if annotation.rows() != inputs.rows() {
            return Err(Error::shape(format!(
                "annotation has {} rows for {} inputs",
                annotation.rows(),
                inputs.rows()
            )));
        }
        Ok(Payload {
            inputs: Arc::new(inputs),
            annotation: Arc::new(annotation),
            origin,
            hops: 0,
        })
    }

    /// The same data passed on by another node.
    ///
    /// True labels travel unchanged; logits and features are replaced by the
    /// relaying model's own outputs, since a node can only report what it computes.
    pub fn relayed_by(&self, model: &Mlp<f32>) -> Result<Payload> {
        let annotation = match self.annotation.as_ref() {
            Annotation::Labels(_) => self.annotation.clone(),
            Annotation::Logits(_) => Arc::new(annotate(model, &self.inputs, PayloadKind::Logits, &[])?),
            Annotation::Features(_) => Arc::new(annotate(model, &self.inputs, PayloadKind::Features, &[])?),
        };
        Ok(Payload {
            inputs: self.inputs.clone(),
            annotation,
            origin: self.origin,
            hops: self.hops + 1,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Annotates a local batch for broadcasting; model outputs come from an eval-mode pass.
pub fn make_payload(
    model: &Mlp<f32>,
    origin: usize,
    inputs: Tensor<f32>,
    labels: &[usize],
    kind: PayloadKind,
) -> Result<Payload> {
    let annotation = annotate(model, &inputs, kind, labels)?;
    Payload::new(inputs, annotation, origin)
}

fn annotate(model: &Mlp<f32>, inputs: &Tensor<f32>, kind: PayloadKind, labels: &[usize]) -> Result<Annotation> {
    Ok(match kind {
        PayloadKind::Labels => Annotation::Labels(labels.to_vec()),
        PayloadKind::Logits => Annotation::Logits(model.predict(inputs)?),
        PayloadKind::Features => {
            let mut outs = model.predict_all(inputs)?;
            if outs.len() < 2 {
                return Err(Error::invalid("a model without hidden layers has no features to share"));
            }
            outs.pop();
            Annotation::Features(outs.pop().unwrap())
        }
        PayloadKind::None => return Err(Error::invalid("payload kind `none` cannot be sent")),
    })
}

/// Records the loss for training on a received payload.
///
/// Labels use one-hot cross-entropy, logits use the full-distribution
/// cross-entropy against `softmax(v / tau)`, features use the row-mean
/// squared error against the receiver's last hidden layer.
pub fn receive_loss_on_tape(
    tape: &mut Tape<'_, f32>,
    trace: &MlpTrace,
    payload: &Payload,
    tau: f32,
) -> Result<Var> {
    let (rows, classes) = tape.shape(trace.output);
    match payload.annotation.as_ref() {
        Annotation::Labels(labels) => {
            if labels.iter().any(|&l| l >= classes) {
                return Err(Error::shape(format!("label outside {classes} classes")));
            }
            let mut target = vec![0.0; rows * classes];
            for (i, &l) in labels.iter().enumerate() {
                target[i * classes + l] = 1.0;
            }
            tape.softmax_cross_entropy(trace.output, target, 1.0)
        }
        Annotation::Logits(v) => {
            if v.cols() != classes {
                return Err(Error::shape(format!("{} received classes, model has {classes}", v.cols())));
            }
            let target = softmax_with_temperature(v, tau)?;
            tape.softmax_cross_entropy(trace.output, target.into_data(), 1.0)
        }
        Annotation::Features(h) => {
            let Some(&own) = trace.hidden.last() else {
                return Err(Error::invalid("receiver has no hidden layer"));
            };
            if tape.shape(own).1 != h.cols() {
                return Err(Error::shape(format!(
                    "received features of width {}, own width {}",
                    h.cols(),
                    tape.shape(own).1
                )));
            }
            let target = tape.constant(h.clone());
            tape.mse_rows(own, target)
        }
    }
}

/// Eval-mode value of the receive loss (no dropout, no update).
pub fn receive_loss(model: &Mlp<f32>, payload: &Payload, tau: f32) -> Result<f32> {
    let mut outs = model.predict_all(&payload.inputs)?;
    let logits = outs.pop().unwrap();
    let classes = logits.cols();
    match payload.annotation.as_ref() {
        Annotation::Labels(labels) => {
            if labels.iter().any(|&l| l >= classes) {
                return Err(Error::shape(format!("label outside {classes} classes")));
            }
            let target = crate::dataio::one_hot(labels, classes);
            cross_entropy_full(&target, &softmax_with_temperature(&logits, 1.0)?)
        }
        Annotation::Logits(v) => {
            if v.cols() != classes {
                return Err(Error::shape(format!("{} received classes, model has {classes}", v.cols())));
            }
            cross_entropy_full(&softmax_with_temperature(v, tau)?, &softmax_with_temperature(&logits, 1.0)?)
        }
        Annotation::Features(h) => {
            let own = outs.pop().ok_or_else(|| Error::invalid("receiver has no hidden layer"))?;
            mse_features(&own, h)
        }
    }
}

/// Bounded FIFO that discards its oldest entry when full.
#[derive(Clone, Debug)]
pub struct Inbox {
    queue: VecDeque<Payload>,
    capacity: usize,
    pub received: u64,
    pub dropped: u64,
}

impl Inbox {
    pub fn new(capacity: usize) -> Self {
        Inbox {
            queue: VecDeque::with_capacity(capacity),
            capacity,
            received: 0,
            dropped: 0,
        }
    }

    /// Returns true when an older payload had to be discarded.
    pub fn push(&mut self, p: Payload) -> bool {
        self.received += 1;
        let overflow = self.queue.len() >= self.capacity;
        if overflow {
            self.queue.pop_front();
            self.dropped += 1;
        }
        if self.capacity > 0 {
            self.queue.push_back(p);
        }
        overflow
    }

    pub fn pop(&mut self) -> Option<Payload> {
        self.queue.pop_front()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}
