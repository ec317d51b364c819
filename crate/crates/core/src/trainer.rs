//! Joint persistent-contrastive-divergence training of a whole network.
//!
//! One update:
//!
//! 1. collect data terms — a single sampled upward pass over the minibatch
//!    records `x(l)` for every layer;
//! 2. advance the N persistent particles by `k` full Gibbs cycles and record
//!    every layer's state during the last downward pass;
//! 3. per layer, form the gradient `mean dF(data)/dtheta - mean dF(model)/dtheta`
//!    (the gradient of the loss `mean F(data) - mean F(particles)`);
//! 4. apply one Adam step to every layer.
//!
//! All gradients are functions of the pre-update parameters only: no layer
//! sees another layer's update within a step. Particles persist across the
//! entire run and are never reinitialized.
//!
//! RNG layout: from the seed's root stream, particle chain `j` owns
//! `root.split(1).split(j)`, the data pass owns `root.split(2)`, epoch `e`'s
//! shuffle is `root.split(3).split(e)` (re-derivable, so resume needs no
//! shuffle state), and evaluation noise draws from `root.split(4)`.

use crate::adam::{AdamParams, AdamState};
use crate::layer::LayerGrads;
use crate::math::bernoulli_sample_rows;
use crate::net::{Drbn, Sampler};
use crate::rng::{RngState, RngStream};
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};
use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

pub const STREAM_PARTICLES: u64 = 1;
pub const STREAM_DATA: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
pub const STREAM_EVAL: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Gibbs cycles per update (the `k` of PCD(k, N)).
    pub gibbs_steps: usize,
    /// Number of persistent particles (the `N`).
    pub n_particles: usize,
    /// Minibatch size.
    pub minibatch: usize,
    pub epochs: usize,
    pub adam: AdamParams,
    pub seed: u64,
    /// Emit a step record every this many steps (0 = step records off).
    pub log_every: u64,
    /// Attach the free-energy gap to every this-many-th step record
    /// (0 = epoch ends only).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gibbs_steps: 5,
            n_particles: 100,
            minibatch: 100,
            epochs: 1,
            adam: AdamParams::default(),
            seed: 0,
            log_every: 10,
            eval_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gibbs_steps == 0 || self.n_particles == 0 || self.minibatch == 0 {
            return Err(Error::InvalidArg(
                "k, N and the minibatch size must all be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// The persistent fantasy particles and the streams that advance them.
#[derive(Clone, Debug)]
pub struct PcdState {
    particles: Tensor,
    streams: Vec<RngStream>,
    updates: u64,
}

impl PcdState {
    /// Particles start as Bernoulli(0.5) noise; chain `j` draws its own
    /// initial state from its own stream.
    pub fn init(visible_len: usize, n_particles: usize, base: &RngStream) -> Result<PcdState> {
        let mut streams: Vec<RngStream> =
            (0..n_particles).map(|j| base.split(j as u64)).collect();
        let noise = Tensor::filled(&[n_particles, visible_len], 0.5);
        let particles = bernoulli_sample_rows(&noise, &mut streams)?;
        Ok(PcdState {
            particles,
            streams,
            updates: 0,
        })
    }

    pub fn particles(&self) -> &Tensor {
        &self.particles
    }

    pub fn n_particles(&self) -> usize {
        self.streams.len()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn rng_states(&self) -> Vec<RngState> {
        self.streams.iter().map(RngStream::state).collect()
    }

    pub fn from_parts(particles: Tensor, rng_states: &[RngState], updates: u64) -> Result<PcdState> {
        if particles.rank() != 2 || particles.rows() != rng_states.len() {
            return Err(Error::shape(format!(
                "pcd state: {} particles vs {} rng streams",
                particles.shape().first().copied().unwrap_or(0),
                rng_states.len()
            )));
        }
        Ok(PcdState {
            particles,
            streams: rng_states.iter().map(RngStream::restore).collect(),
            updates,
        })
    }
}

#[derive(Clone, Debug)]
pub struct StepStats {
    pub step: u64,
    pub epoch: u64,
    /// Per-layer loss: mean F(data) - mean F(particles).
    pub losses: Vec<Real>,
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: u64,
    pub steps: u64,
    pub mean_losses: Vec<Real>,
    /// mean F(held-out) - mean F(particles) at the visible layer.
    pub fe_gap: Option<Real>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub(crate) net: Drbn,
    pub(crate) pcd: PcdState,
    pub(crate) opt: Vec<AdamState>,
    pub(crate) data_stream: RngStream,
    pub(crate) config: TrainConfig,
    pub(crate) epoch: u64,
    pub(crate) step_in_epoch: u64,
    pub(crate) global_step: u64,
}

impl Trainer {
    pub fn new(net: Drbn, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let root = RngStream::from_seed(config.seed);
        let pcd = PcdState::init(
            net.visible_len(),
            config.n_particles,
            &root.split(STREAM_PARTICLES),
        )?;
        let opt = net.layers().iter().map(|l| l.adam_state()).collect();
        Ok(Trainer {
            net,
            pcd,
            opt,
            data_stream: root.split(STREAM_DATA),
            config,
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
        })
    }

    pub fn net(&self) -> &Drbn {
        &self.net
    }

    pub fn into_net(self) -> Drbn {
        self.net
    }

    pub fn pcd(&self) -> &PcdState {
        &self.pcd
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs as u64
    }

    /// One sampled upward pass over the minibatch; returns the visible-side
    /// state of every layer (`x(l)` for `l = 0 .. L-1`), the inputs of each
    /// layer's data term.
    pub fn collect_data_terms(&mut self, minibatch: &Tensor) -> Result<Vec<Tensor>> {
        let depth = self.net.depth();
        let mut up = self
            .net
            .upward_pass(minibatch, &mut Sampler::Single(&mut self.data_stream))?;
        up.states.truncate(depth);
        Ok(up.states)
    }

    /// Advances every particle by `k` full Gibbs cycles and returns the
    /// per-layer visible-side states recorded during the last downward pass.
    pub fn advance_particles(&mut self) -> Result<Vec<Tensor>> {
        let depth = self.net.depth();
        let mut last_down = None;
        for _ in 0..self.config.gibbs_steps {
            let (_, down) = self.net.gibbs_cycle(
                &self.pcd.particles,
                &mut Sampler::PerRow(&mut self.pcd.streams),
            )?;
            self.pcd.particles = down.states[0].clone();
            last_down = Some(down);
        }
        let mut down = last_down.expect("k >= 1 is validated");
        down.states.truncate(depth);
        Ok(down.states)
    }

    /// One joint update of all layers. Every layer's gradient is computed
    /// from the same pre-update parameters; the Adam steps happen only after
    /// all gradients exist.
    pub fn train_step(&mut self, minibatch: &Tensor) -> Result<StepStats> {
        let data_terms = self.collect_data_terms(minibatch)?;
        let model_terms = self.advance_particles()?;
        let depth = self.net.depth();
        let mut grads: Vec<LayerGrads> = Vec::with_capacity(depth);
        let mut losses = Vec::with_capacity(depth);
        for l in 0..depth {
            let (g, loss) = self.net.layers()[l].pcd_terms(&data_terms[l], &model_terms[l])?;
            grads.push(g);
            losses.push(loss);
        }
        for (l, g) in grads.iter().enumerate() {
            self.net.layers_mut()[l].adam_apply(g, &mut self.opt[l], &self.config.adam)?;
        }
        self.pcd.updates += 1;
        self.global_step += 1;
        self.step_in_epoch += 1;
        Ok(StepStats {
            step: self.global_step,
            epoch: self.epoch,
            losses,
        })
    }

    /// Runs the remainder of the current epoch (all of it unless resuming
    /// mid-epoch from a checkpoint). Minibatch order is a seeded permutation
    /// derived from the epoch index alone.
    pub fn fit_epoch(
        &mut self,
        data: &Tensor,
        heldout: Option<&Tensor>,
        mut log: Option<&mut (dyn Write + '_)>,
    ) -> Result<EpochStats> {
        if data.rank() != 2 || data.rows() == 0 {
            return Err(Error::InvalidArg(
                "fit: dataset must be a nonempty [n, visible] tensor".into(),
            ));
        }
        let epoch = self.epoch;
        let n = data.rows();
        let mut perm: Vec<u32> = (0..n as u32).collect();
        RngStream::from_seed(self.config.seed)
            .split(STREAM_SHUFFLE)
            .split(epoch)
            .shuffle(&mut perm);

        let chunks: Vec<&[u32]> = perm.chunks(self.config.minibatch).collect();
        let start = self.step_in_epoch as usize;
        let mut steps = 0u64;
        let mut loss_sums = vec![0.0; self.net.depth()];
        for chunk in chunks.iter().skip(start) {
            let minibatch = data.gather_rows(chunk)?;
            let stats = self.train_step(&minibatch)?;
            steps += 1;
            for (acc, &l) in loss_sums.iter_mut().zip(&stats.losses) {
                *acc += l;
            }
            if let Some(log) = log.as_deref_mut() {
                if self.config.log_every > 0 && stats.step % self.config.log_every == 0 {
                    let gap = if self.config.eval_every > 0
                        && stats.step % self.config.eval_every == 0
                    {
                        heldout
                            .map(|h| self.free_energy_gap(h))
                            .transpose()?
                    } else {
                        None
                    };
                    write_step_record(log, &stats, gap)?;
                }
            }
        }
        let fe_gap = heldout.map(|h| self.free_energy_gap(h)).transpose()?;
        let mean_losses: Vec<Real> = loss_sums
            .iter()
            .map(|&s| if steps > 0 { s / steps as Real } else { 0.0 })
            .collect();
        let stats = EpochStats {
            epoch,
            steps,
            mean_losses,
            fe_gap,
        };
        if let Some(log) = log.as_deref_mut() {
            write_epoch_record(log, &stats, self.global_step)?;
        }
        self.epoch += 1;
        self.step_in_epoch = 0;
        Ok(stats)
    }

    /// Trains to the configured epoch count, invoking `on_epoch` after each
    /// epoch with the stats and an immutable view of the network. Callbacks
    /// cannot influence the training trajectory.
    pub fn fit_with(
        &mut self,
        data: &Tensor,
        heldout: Option<&Tensor>,
        mut log: Option<&mut (dyn Write + '_)>,
        on_epoch: &mut dyn FnMut(&EpochStats, &Drbn),
    ) -> Result<Vec<EpochStats>> {
        let mut all = Vec::new();
        while !self.is_finished() {
            let stats = self.fit_epoch(data, heldout, log.as_deref_mut())?;
            on_epoch(&stats, &self.net);
            all.push(stats);
        }
        Ok(all)
    }

    pub fn fit(
        &mut self,
        data: &Tensor,
        heldout: Option<&Tensor>,
        log: Option<&mut (dyn Write + '_)>,
    ) -> Result<Vec<EpochStats>> {
        self.fit_with(data, heldout, log, &mut |_, _| {})
    }

    /// `mean F(batch) - mean F(particles)` at the visible layer.
    pub fn free_energy_gap(&self, batch: &Tensor) -> Result<Real> {
        free_energy_gap(&self.net, batch, &self.pcd.particles)
    }
}

/// Mean visible-layer free-energy difference between two row batches.
pub fn free_energy_gap(net: &Drbn, a: &Tensor, b: &Tensor) -> Result<Real> {
    let layer = &net.layers()[0];
    Ok(layer.free_energy_rows(a)?.mean() - layer.free_energy_rows(b)?.mean())
}

/// The per-layer training loss `mean F(data) - mean F(particles)`; its
/// parameter gradient is the two-term PCD estimator.
pub fn layer_loss(
    layer: &crate::layer::Layer,
    data_rows: &Tensor,
    model_rows: &Tensor,
) -> Result<Real> {
    if data_rows.rank() != 2 || data_rows.rows() == 0 || model_rows.rank() != 2
        || model_rows.rows() == 0
    {
        return Err(Error::InvalidArg("layer_loss: empty batch".into()));
    }
    Ok(layer.free_energy_rows(data_rows)?.mean() - layer.free_energy_rows(model_rows)?.mean())
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn write_step_record(log: &mut (dyn Write + '_), stats: &StepStats, gap: Option<Real>) -> Result<()> {
    let mut line = format!("step={} epoch={}", stats.step, stats.epoch);
    for (l, loss) in stats.losses.iter().enumerate() {
        line.push_str(&format!(" loss{l}={loss:.6}"));
    }
    match gap {
        Some(g) => line.push_str(&format!(" fe_gap={g:.6}")),
        None => line.push_str(" fe_gap=na"),
    }
    line.push_str(&format!(" ts_ms={}", now_ms()));
    writeln!(log, "{line}").map_err(|e| Error::io("writing training log", e))
}

fn write_epoch_record(log: &mut (dyn Write + '_), stats: &EpochStats, global_step: u64) -> Result<()> {
    let mut line = format!("epoch_end epoch={} step={global_step}", stats.epoch);
    for (l, loss) in stats.mean_losses.iter().enumerate() {
        line.push_str(&format!(" loss{l}={loss:.6}"));
    }
    match stats.fe_gap {
        Some(g) => line.push_str(&format!(" fe_gap={g:.6}")),
        None => line.push_str(" fe_gap=na"),
    }
    line.push_str(&format!(" ts_ms={}", now_ms()));
    writeln!(log, "{line}").map_err(|e| Error::io("writing training log", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy;
    use crate::layer::Layer;
    use crate::net::NetworkSpec;
    use crate::rbm::RbmParams;

    fn single_layer_net(d: usize, p: usize, seed: u64) -> Drbn {
        NetworkSpec {
            layers: vec![crate::net::LayerSpec::Dense {
                visible: d,
                hidden: p,
            }],
        }
        .build(&RngStream::from_seed(seed))
        .unwrap()
    }

    #[test]
    fn default_config_mirrors_reference_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.gibbs_steps, c.n_particles, c.minibatch), (5, 100, 100));
        assert_eq!(c.adam, AdamParams::default());
    }

    #[test]
    fn data_terms_of_single_layer_net_are_the_minibatch() {
        let net = single_layer_net(6, 4, 1);
        let mut trainer = Trainer::new(net, TrainConfig::default()).unwrap();
        let mb = Tensor::from_fn(&[5, 6], |i| ((i * 7) % 2) as Real);
        let terms = trainer.collect_data_terms(&mb).unwrap();
        assert_eq!(terms.len(), 1);
        assert_eq!(terms[0], mb);
    }

    #[test]
    fn data_term_shapes_through_a_two_layer_net() {
        let spec = NetworkSpec::parse("dense:500,dense:1000", [28, 28, 1]).unwrap();
        let net = spec.build(&RngStream::from_seed(2)).unwrap();
        let mut trainer = Trainer::new(net, TrainConfig::default()).unwrap();
        let mb = Tensor::zeros(&[100, 784]);
        let terms = trainer.collect_data_terms(&mb).unwrap();
        assert_eq!(terms.len(), 2);
        assert_eq!(terms[0].shape(), &[100, 784]);
        assert_eq!(terms[1].shape(), &[100, 500]);
    }

    #[test]
    fn data_terms_are_deterministic_under_a_seed() {
        let run = || {
            let net = single_layer_net(8, 4, 3);
            let mut trainer = Trainer::new(net, TrainConfig::default()).unwrap();
            let mb = Tensor::filled(&[4, 8], 1.0);
            trainer.collect_data_terms(&mb).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn particles_on_zero_net_stay_symmetric() {
        let net = Drbn::from_layers(vec![Layer::Dense(RbmParams::zeros(30, 10))]).unwrap();
        let mut trainer = Trainer::new(
            net,
            TrainConfig {
                n_particles: 200,
                ..Default::default()
            },
        )
        .unwrap();
        trainer.advance_particles().unwrap();
        let mean = trainer.pcd.particles.mean();
        assert!((0.45..=0.55).contains(&mean), "mean {mean}");
    }

    #[test]
    fn particles_are_reproducible_and_continuous() {
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let mut a = Trainer::new(single_layer_net(6, 4, 4), cfg).unwrap();
        let mut b = Trainer::new(single_layer_net(6, 4, 4), cfg).unwrap();
        let mb = Tensor::from_fn(&[4, 6], |i| (i % 2) as Real);
        // Chain states depend only on (state, chain rng): identical runs
        // agree step by step, and a run resumed from step 3 matches one run
        // straight through step 5.
        let mut a_states = Vec::new();
        for _ in 0..5 {
            a.train_step(&mb).unwrap();
            a_states.push(a.pcd.particles.clone());
        }
        for _ in 0..3 {
            b.train_step(&mb).unwrap();
        }
        assert_eq!(b.pcd.particles, a_states[2]);
        for _ in 0..2 {
            b.train_step(&mb).unwrap();
        }
        assert_eq!(b.pcd.particles, a_states[4]);
        assert_eq!(b.pcd.updates, 5);
    }

    #[test]
    fn layer_loss_trivial_cases() {
        let net = single_layer_net(5, 3, 5);
        let layer = &net.layers()[0];
        let batch = Tensor::from_fn(&[3, 5], |i| ((i / 2) % 2) as Real);
        assert!(layer_loss(layer, &batch, &batch).unwrap().abs() < 1e-12);

        let u = Tensor::from_fn(&[1, 5], |i| (i % 2) as Real);
        let w = Tensor::from_fn(&[1, 5], |i| ((i + 1) % 2) as Real);
        let loss = layer_loss(layer, &u, &w).unwrap();
        let (fu, fw) = match layer {
            Layer::Dense(p) => (
                p.free_energy(&u.clone().reshape(&[5]).unwrap()).unwrap(),
                p.free_energy(&w.clone().reshape(&[5]).unwrap()).unwrap(),
            ),
            _ => unreachable!(),
        };
        assert!((loss - (fu - fw)).abs() < 1e-12);
        assert!(layer_loss(layer, &Tensor::zeros(&[0, 5]), &w).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // d(loss)/d(theta) of layer_loss must equal the pcd_grad estimator.
        let net = single_layer_net(4, 3, 6);
        let data = Tensor::from_fn(&[5, 4], |i| ((i * 3) % 2) as Real);
        let model = Tensor::from_fn(&[7, 4], |i| ((i * 5 + 1) % 2) as Real);
        let layer = &net.layers()[0];
        let grads = match layer.pcd_grad(&data, &model).unwrap() {
            LayerGrads::Dense(g) => g,
            _ => unreachable!(),
        };
        let params = match layer {
            Layer::Dense(p) => p.clone(),
            _ => unreachable!(),
        };
        let eps = 1e-5;
        let loss_of = |p: &RbmParams| {
            layer_loss(&Layer::Dense(p.clone()), &data, &model).unwrap()
        };
        for idx in 0..12 {
            let mut hi = params.clone();
            hi.weights.data_mut()[idx] += eps;
            let mut lo = params.clone();
            lo.weights.data_mut()[idx] -= eps;
            let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * eps);
            let an = grads.d_weights.data()[idx];
            assert!(
                (fd - an).abs() <= 1e-6 * fd.abs().max(1.0),
                "W[{idx}]: {fd} vs {an}"
            );
        }
    }

    #[test]
    fn zero_learning_rate_reports_losses_but_freezes_params() {
        let cfg = TrainConfig {
            adam: AdamParams {
                step_size: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut trainer = Trainer::new(single_layer_net(6, 4, 7), cfg).unwrap();
        let before = trainer.net.clone();
        let mb = Tensor::from_fn(&[4, 6], |i| (i % 2) as Real);
        let stats = trainer.train_step(&mb).unwrap();
        assert_eq!(stats.losses.len(), 1);
        assert!(stats.losses[0].is_finite());
        assert_eq!(trainer.net, before);
    }

    #[test]
    fn two_step_runs_are_bit_reproducible() {
        let run = || {
            let mut trainer =
                Trainer::new(single_layer_net(6, 4, 8), TrainConfig::default()).unwrap();
            let mb = Tensor::from_fn(&[4, 6], |i| ((i + 1) % 2) as Real);
            trainer.train_step(&mb).unwrap();
            trainer.train_step(&mb).unwrap();
            trainer.net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn update_is_invariant_to_layer_processing_order() {
        // All layer gradients are taken against pre-step parameters, so
        // processing layers in reverse must give bit-identical updates.
        let spec = NetworkSpec::parse("dense:10,dense:8", [4, 4, 1]).unwrap();
        let net = spec.build(&RngStream::from_seed(9)).unwrap();
        let cfg = TrainConfig::default();
        let mut forward = Trainer::new(net.clone(), cfg).unwrap();
        let mut reversed = Trainer::new(net, cfg).unwrap();
        let mb = Tensor::from_fn(&[6, 16], |i| ((i * 11) % 2) as Real);

        forward.train_step(&mb).unwrap();

        let data_terms = reversed.collect_data_terms(&mb).unwrap();
        let model_terms = reversed.advance_particles().unwrap();
        let depth = reversed.net.depth();
        let mut grads = Vec::new();
        for l in (0..depth).rev() {
            grads.push((
                l,
                reversed.net.layers()[l]
                    .pcd_grad(&data_terms[l], &model_terms[l])
                    .unwrap(),
            ));
        }
        for (l, g) in &grads {
            reversed.net.layers_mut()[*l]
                .adam_apply(g, &mut reversed.opt[*l], &cfg.adam)
                .unwrap();
        }
        assert_eq!(forward.net, reversed.net);
    }

    #[test]
    fn pcd_gradient_expectation_matches_exact_gradient() {
        // On an enumerable 4x3 model the model term of the gradient is
        // E_p[dF/dtheta]; long-run particles must reproduce it within
        // Monte-Carlo error (3 standard errors, N = 10^4).
        let d = 4;
        let p = 3;
        let params = {
            let mut rng = RngStream::from_seed(10);
            RbmParams {
                weights: Tensor::from_fn(&[d, p], |_| rng.uniform01() as Real * 2.0 - 1.0),
                visible_bias: Tensor::from_fn(&[d], |_| rng.uniform01() as Real * 2.0 - 1.0),
                hidden_bias: Tensor::from_fn(&[p], |_| rng.uniform01() as Real * 2.0 - 1.0),
            }
        };
        // Exact: sum_v p(v) dF(v)/dW.
        let log_z = params.log_partition().unwrap();
        let mut exact_dw = Tensor::zeros(&[d, p]);
        for u in 0..(1u32 << d) {
            let v = Tensor::from_fn(&[d], |i| ((u >> i) & 1) as Real);
            let pv = (-params.free_energy(&v).unwrap() - log_z).exp();
            let g = params
                .free_energy_grad(&v.clone().reshape(&[1, d]).unwrap())
                .unwrap();
            for (acc, &x) in exact_dw.data_mut().iter_mut().zip(g.d_weights.data()) {
                *acc += pv * x;
            }
        }
        // Monte Carlo: burn in 10^4 independent chains, then average the
        // per-particle gradient contributions.
        let n = 10_000;
        let net = Drbn::from_layers(vec![Layer::Dense(params.clone())]).unwrap();
        let root = RngStream::from_seed(11);
        let mut streams: Vec<RngStream> = (0..n).map(|j| root.split(j as u64)).collect();
        let noise = Tensor::filled(&[n, d], 0.5);
        let mut x = bernoulli_sample_rows(&noise, &mut streams).unwrap();
        for _ in 0..200 {
            let (next, _) = net
                .gibbs_iteration(&x, &mut Sampler::PerRow(&mut streams))
                .unwrap();
            x = next;
        }
        // Per-particle dF/dW_ij = -v_i sigma_j; accumulate mean and var.
        let s = params.prob_h_given_v(&x).unwrap();
        for i in 0..d {
            for j in 0..p {
                let mut mean = 0.0;
                let mut m2 = 0.0;
                for r in 0..n {
                    let contrib = -x.data()[r * d + i] * s.data()[r * p + j];
                    let delta = contrib - mean;
                    mean += delta / (r as Real + 1.0);
                    m2 += delta * (contrib - mean);
                }
                let se = (m2 / (n as Real - 1.0) / n as Real).sqrt();
                let exact = exact_dw.data()[i * p + j];
                assert!(
                    (mean - exact).abs() <= 3.0 * se + 1e-9,
                    "dW[{i},{j}]: mc {mean} vs exact {exact} (se {se})"
                );
            }
        }
    }

    #[test]
    fn fit_improves_exact_log_likelihood_on_bars_and_stripes() {
        let data = toy::bars_and_stripes();
        let net = single_layer_net(16, 8, 12);
        let initial_ll = match &net.layers()[0] {
            Layer::Dense(p) => p.exact_log_likelihood(&data).unwrap(),
            _ => unreachable!(),
        };
        // Bars/stripes has exactly uniform pixel marginals, so all learning
        // is correlational; it needs a larger step size than the default.
        let cfg = TrainConfig {
            minibatch: 16,
            epochs: 250, // 2 steps per epoch = 500 updates
            seed: 12,
            log_every: 0,
            adam: AdamParams::with_step_size(0.01),
            ..Default::default()
        };
        let mut trainer = Trainer::new(net, cfg).unwrap();
        trainer.fit(&data, None, None).unwrap();
        let final_ll = match &trainer.net.layers()[0] {
            Layer::Dense(p) => p.exact_log_likelihood(&data).unwrap(),
            _ => unreachable!(),
        };
        assert!(
            final_ll >= initial_ll + 1.0,
            "log-likelihood {initial_ll} -> {final_ll}"
        );
    }

    #[test]
    fn callbacks_do_not_perturb_training() {
        let data = Tensor::from_fn(&[12, 6], |i| ((i * 13) % 2) as Real);
        let cfg = TrainConfig {
            minibatch: 4,
            epochs: 2,
            seed: 13,
            log_every: 0,
            ..Default::default()
        };
        let mut plain = Trainer::new(single_layer_net(6, 4, 13), cfg).unwrap();
        plain.fit(&data, None, None).unwrap();
        let mut with_cb = Trainer::new(single_layer_net(6, 4, 13), cfg).unwrap();
        let mut calls = 0;
        with_cb
            .fit_with(&data, None, None, &mut |stats, net| {
                calls += 1;
                assert!(stats.steps > 0);
                assert_eq!(net.depth(), 1);
            })
            .unwrap();
        assert_eq!(calls, 2);
        assert_eq!(plain.net, with_cb.net);
    }

    #[test]
    fn long_chain_on_trained_two_mode_model_visits_both_modes() {
        // Train briefly on the two-mode corpus, then check a 10^4-step chain
        // spends real time in both modes.
        let data = toy::two_mode(64, 0.05, 21);
        let cfg = TrainConfig {
            minibatch: 16,
            epochs: 75,
            seed: 14,
            log_every: 0,
            ..Default::default()
        };
        let mut trainer = Trainer::new(single_layer_net(16, 8, 14), cfg).unwrap();
        trainer.fit(&data, None, None).unwrap();
        let net = trainer.net;
        let mut rng = RngStream::from_seed(15);
        let mut x = Tensor::from_fn(&[1, 16], |_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 });
        let mut mode_a = 0usize;
        let mut mode_b = 0usize;
        for _ in 0..10_000 {
            let (next, _) = net
                .gibbs_iteration(&x, &mut Sampler::Single(&mut rng))
                .unwrap();
            x = next;
            let left: Real = x.data()[..8].iter().sum();
            let right: Real = x.data()[8..].iter().sum();
            if left >= 6.0 && right <= 2.0 {
                mode_a += 1;
            } else if right >= 6.0 && left <= 2.0 {
                mode_b += 1;
            }
        }
        assert!(
            mode_a > 100 && mode_b > 100,
            "mode visits: {mode_a} / {mode_b}"
        );
    }
}
