use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataio::{apply_mask_rows, sample_mask, Dataset, NoiseMask, Shard};
use crate::error::{Error, Result};
use crate::harness::metrics::{MetricsTable, Summary};
use crate::harness::seeds::stream;
use crate::numcore::{Activation, Mlp, MlpTrace, Optimizer, OptimizerKind, Parameterized, Tape, Tensor};

use super::gumbel::{gumbel_noise, gumbel_softmax_on_tape, AnnealSchedule};
use super::objective::{likelihood_loss, mi_pairs, mi_value, CommLevel};
use super::probe::Probe;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanguageConfig {
    pub level: CommLevel,
    /// Message length `T`.
    pub length: usize,
    pub vocab: usize,
    /// Fraction of pixels each agent's fixed mask inverts.
    pub noise: f64,
    /// Weight of the likelihood term; the level's default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub likelihood_weight: Option<f64>,
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub batch_size: usize,
    /// Hidden widths of each agent's generator; the last one feeds the probe.
    pub trunk: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub anneal: AnnealSchedule,
    pub eval_every: u64,
    pub optimizer: OptimizerKind,
    pub probe_optimizer: OptimizerKind,
    /// Rows of the validation and test sets used for evaluation; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_size: Option<usize>,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        LanguageConfig {
            level: CommLevel::Baseline,
            length: 32,
            vocab: 2,
            noise: 0.10,
            likelihood_weight: None,
            seeds: vec![0, 1, 2, 3, 4],
            steps: 5000,
            batch_size: 32,
            trunk: vec![256, 128],
            disc_hidden: vec![256],
            anneal: AnnealSchedule::default(),
            eval_every: 200,
            optimizer: OptimizerKind::adam(),
            probe_optimizer: OptimizerKind::adam(),
            eval_size: None,
        }
    }
}

impl LanguageConfig {
    pub fn weight(&self) -> f64 {
        self.likelihood_weight.unwrap_or_else(|| self.level.default_weight())
    }

    /// Fills defaults that depend on other keys.
    pub fn resolved(mut self) -> Self {
        self.likelihood_weight = Some(self.weight());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::config("length", "must be at least 1"));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config("noise", "must lie in [0, 1]"));
        }
        if !(self.weight() >= 0.0) || !self.weight().is_finite() {
            return Err(Error::config("likelihood_weight", "must be non-negative"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "needs at least one seed"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds", "must be distinct"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2 to form marginal pairs"));
        }
        if self.trunk.is_empty() || self.trunk.contains(&0) {
            return Err(Error::config("trunk", "needs at least one non-empty hidden layer"));
        }
        if self.disc_hidden.contains(&0) {
            return Err(Error::config("disc_hidden", "layer widths must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        self.anneal.validate()
    }
}

/// One communicating agent: message generator, MI discriminator and fixed view mask.
#[derive(Clone, Debug)]
pub struct Agent {
    pub generator: Mlp<f32>,
    pub discriminator: Mlp<f32>,
    pub mask: NoiseMask,
    opt_g: Optimizer<f32>,
    opt_d: Optimizer<f32>,
}

impl Agent {
    fn new(cfg: &LanguageConfig, dim: usize, seed: u64, name: &str) -> Result<Self> {
        let msg = cfg.length * cfg.vocab;
        let mut g_dims = vec![dim];
        g_dims.extend(&cfg.trunk);
        g_dims.push(msg);
        let mut d_dims = vec![dim + msg];
        d_dims.extend(&cfg.disc_hidden);
        d_dims.push(1);
        Ok(Agent {
            generator: Mlp::new(&g_dims, Activation::Relu, Activation::Identity, 0.0, &mut stream(seed, &format!("language/init/{name}/gen")))?,
            discriminator: Mlp::new(&d_dims, Activation::Relu, Activation::Sigmoid, 0.0, &mut stream(seed, &format!("language/init/{name}/disc")))?,
            mask: sample_mask(dim, cfg.noise, &mut stream(seed, &format!("language/mask/{name}")))?,
            opt_g: Optimizer::new(cfg.optimizer),
            opt_d: Optimizer::new(cfg.optimizer),
        })
    }

    /// Last hidden layer of the generator for (unmasked) inputs `x`.
    pub fn features(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let view = apply_mask_rows(x, &self.mask)?;
        let mut outs = self.generator.predict_all(&view)?;
        outs.pop();
        Ok(outs.pop().expect("generator has a hidden layer"))
    }

    fn apply(&mut self, gen: &MlpTrace, disc: &[&MlpTrace], grads: &crate::numcore::Gradients<f32>) -> Result<()> {
        self.generator.zero_grad();
        self.generator.accumulate_grads(gen, grads)?;
        self.opt_g.step(&mut self.generator.params_mut())?;
        self.discriminator.zero_grad();
        for t in disc {
            self.discriminator.accumulate_grads(t, grads)?;
        }
        self.opt_d.step(&mut self.discriminator.params_mut())
    }
}

#[derive(Debug)]
pub struct LanguageRun {
    pub seed: u64,
    pub metrics: MetricsTable,
    pub summary: Summary,
    pub best_valid_acc: f64,
    pub test_acc_at_best: f64,
    pub final_valid_acc: f64,
    pub teacher: Agent,
    pub student: Agent,
}

pub fn metric_columns() -> Vec<String> {
    ["tau", "mi_teacher", "mi_student", "likelihood", "probe_valid_acc", "probe_test_acc_at_best"]
        .map(String::from)
        .to_vec()
}

/// Trains teacher (A) and student (B) together for one seed, with the student's probe alongside.
///
/// Each step both agents ascend their MI objective; levels other than the
/// baseline subtract the weighted likelihood term. The probe is fitted on the
/// student's features of the same minibatch and checked on validation every
/// `eval_every` steps.
pub fn run_language(cfg: &LanguageConfig, seed: u64, train: &Dataset, valid: &Dataset, test: &Dataset) -> Result<LanguageRun> {
    cfg.validate()?;
    if train.len() < cfg.batch_size || valid.is_empty() || test.is_empty() {
        return Err(Error::data("language run needs a full training batch and non-empty evaluation sets"));
    }
    let valid = cfg.eval_size.map_or_else(|| valid.clone(), |n| valid.head(n));
    let test = cfg.eval_size.map_or_else(|| test.clone(), |n| test.head(n));
    let mut a = Agent::new(cfg, train.dim(), seed, "teacher")?;
    let mut b = Agent::new(cfg, train.dim(), seed, "student")?;
    let feat_dim = *cfg.trunk.last().unwrap();
    let mut probe = Probe::new(feat_dim, train.classes(), cfg.probe_optimizer, &mut stream(seed, "language/init/probe"))?;
    let mut data_rng = stream(seed, "language/data");
    let mut noise_rng = stream(seed, "language/gumbel");
    let mut unused = stream(seed, "language/dropout");
    let mut shard = Shard::new(0, (0..train.len()).collect());
    let weight = cfg.weight() as f32;
    let msg = cfg.length * cfg.vocab;

    let mut metrics = MetricsTable::new(format!("language-{}-s{seed}", cfg.level.as_str()), "step", metric_columns());
    let start = Instant::now();
    let mut window = [0.0f64; 3];
    let mut window_n = 0u64;
    let mut best: Option<(f64, f64)> = None;
    let mut last_valid = 0.0;

    for step in 0..cfg.steps {
        let tau = cfg.anneal.anneal(step) as f32;
        let idx = shard.next_batch(cfg.batch_size, &mut data_rng);
        let (x, y) = train.batch(&idx);
        let xa = apply_mask_rows(&x, &a.mask)?;
        let xb = apply_mask_rows(&x, &b.mask)?;
        let na: Vec<f32> = gumbel_noise(cfg.batch_size * msg, &mut noise_rng);
        let nb: Vec<f32> = gumbel_noise(cfg.batch_size * msg, &mut noise_rng);

        let (stats, traces, feats, grads) = {
            let mut tape = Tape::new();
            let xa_v = tape.input(&xa);
            let xb_v = tape.input(&xb);
            let ga = a.generator.forward(&mut tape, xa_v, true, &mut unused)?;
            let gb = b.generator.forward(&mut tape, xb_v, true, &mut unused)?;
            let sa = gumbel_softmax_on_tape(&mut tape, ga.output, cfg.vocab, tau, &na)?;
            let sb = gumbel_softmax_on_tape(&mut tape, gb.output, cfg.vocab, tau, &nb)?;

            let (ja, ma) = mi_pairs(&mut tape, xa_v, sa)?;
            let dja = a.discriminator.forward(&mut tape, ja, true, &mut unused)?;
            let dma = a.discriminator.forward(&mut tape, ma, true, &mut unused)?;
            let va = mi_value(&mut tape, dja.output, dma.output);
            let (jb, mb) = mi_pairs(&mut tape, xb_v, sb)?;
            let djb = b.discriminator.forward(&mut tape, jb, true, &mut unused)?;
            let dmb = b.discriminator.forward(&mut tape, mb, true, &mut unused)?;
            let vb = mi_value(&mut tape, djb.output, dmb.output);

            let r_info = tape.add(va, vb)?;
            let mut loss = tape.scale(r_info, -1.0);
            let mut ll_value = 0.0;
            if cfg.level != CommLevel::Baseline {
                let ll = likelihood_loss(&mut tape, sa, sb, cfg.level)?;
                ll_value = tape.scalar(ll)? as f64;
                let weighted = tape.scale(ll, weight);
                loss = tape.add(loss, weighted)?;
            }
            let stats = [tape.scalar(va)? as f64, tape.scalar(vb)? as f64, ll_value];
            if !tape.scalar(loss)?.is_finite() {
                return Err(Error::NonFinite(format!("language loss at step {step}")));
            }
            let feats = tape.value(*gb.hidden.last().unwrap());
            let grads = tape.backward(loss)?;
            (stats, (ga, gb, dja, dma, djb, dmb), feats, grads)
        };
        let (ga, gb, dja, dma, djb, dmb) = traces;
        a.apply(&ga, &[&dja, &dma], &grads)?;
        b.apply(&gb, &[&djb, &dmb], &grads)?;
        probe.step(&feats, &y)?;

        for (w, s) in window.iter_mut().zip(stats) {
            *w += s;
        }
        window_n += 1;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let valid_acc = probe.accuracy(&b.features(valid.inputs())?, valid.labels())?;
            if best.is_none_or(|(v, _)| valid_acc > v) {
                let test_acc = probe.accuracy(&b.features(test.inputs())?, test.labels())?;
                best = Some((valid_acc, test_acc));
            }
            last_valid = valid_acc;
            let n = window_n as f64;
            metrics.push(
                done,
                vec![tau as f64, window[0] / n, window[1] / n, window[2] / n, valid_acc, best.unwrap().1],
                start.elapsed().as_secs_f64(),
            )?;
            window = [0.0; 3];
            window_n = 0;
        }
    }
    let (best_valid_acc, test_acc_at_best) = best.expect("evaluated at least once");
    let mut summary = Summary::peak_of(&metrics, "probe_valid_acc");
    summary.add("test_acc", test_acc_at_best);
    summary.add("final_valid_acc", last_valid);
    Ok(LanguageRun {
        seed,
        metrics,
        summary,
        best_valid_acc,
        test_acc_at_best,
        final_valid_acc: last_valid,
        teacher: a,
        student: b,
    })
}

/// Seed-averaged outcome of one communication level.
#[derive(Debug)]
pub struct LanguageSuite {
    pub runs: Vec<LanguageRun>,
    pub summary: Summary,
}

impl LanguageSuite {
    pub fn mean_test_acc(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.test_acc_at_best))
    }

    pub fn mean_best_valid_acc(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.best_valid_acc))
    }

    pub fn mean_final_valid_acc(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.final_valid_acc))
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs every configured seed and averages the per-seed outcomes.
pub fn run_language_seeds(cfg: &LanguageConfig, train: &Dataset, valid: &Dataset, test: &Dataset) -> Result<LanguageSuite> {
    cfg.validate()?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&s| run_language(cfg, s, train, valid, test))
        .collect::<Result<Vec<_>>>()?;
    let mut suite = LanguageSuite {
        runs,
        summary: Summary::default(),
    };
    let mut s = Summary::default();
    s.add("level", cfg.level.as_str());
    s.add("seeds", suite.runs.len());
    s.add("likelihood_weight", cfg.weight());
    s.add("mean_best_valid_acc", suite.mean_best_valid_acc());
    s.add("mean_test_acc", suite.mean_test_acc());
    s.add("mean_final_valid_acc", suite.mean_final_valid_acc());
    suite.summary = s;
    Ok(suite)
}
