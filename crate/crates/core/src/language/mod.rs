//! Two agents with differently masked views of the same input exchange short
//! Gumbel-softmax bit messages trained to carry information about the
//! sender's view, under four levels of gradient routing.

mod gumbel;
mod objective;
mod probe;
mod run;

pub use gumbel::{gumbel_noise, gumbel_softmax_on_tape, gumbel_softmax_sample, AnnealSchedule, Message};
pub use objective::{cyclic_shift, likelihood_loss, mi_objective, mi_pairs, mi_value, CommLevel};
pub use probe::{linear_probe, Probe, ProbeConfig, ProbeResult};
pub use run::{metric_columns, run_language, run_language_seeds, Agent, LanguageConfig, LanguageRun, LanguageSuite};
