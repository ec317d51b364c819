//! Semi-supervised evaluation: a softmax head over network features.
//!
//! Feature extraction is the deterministic probability pass — every layer
//! propagates activations, nothing is sampled — so features are reproducible
//! bit for bit. Two supervised phases are supported on top:
//!
//! - frozen: only the head trains on the labeled subset (the backbone is
//!   never touched);
//! - fine-tune: the upward network is treated as a deterministic sigmoid
//!   network and trained jointly with the head by backpropagation, normally
//!   at a reduced learning rate.
//!
//! A plain fully-connected baseline with the same layer sizes but random
//! initialization trains through the identical engine, so comparisons see
//! the same optimizer, schedule, and data handling.
//!
//! Head training runs a fixed epoch budget and keeps the epoch with the best
//! error on a held-out slice of the labeled subset (the labeled budget pays
//! for its own validation data).

use crate::adam::{AdamParams, AdamState};
use crate::layer::Layer;
use crate::net::Drbn;
use crate::rbm::RbmParams;
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxHead {
    /// `[feature_dim, n_classes]`.
    pub weights: Tensor,
    /// `[n_classes]`.
    pub bias: Tensor,
}

impl SoftmaxHead {
    pub fn zeros(feature_dim: usize, n_classes: usize) -> SoftmaxHead {
        SoftmaxHead {
            weights: Tensor::zeros(&[feature_dim, n_classes]),
            bias: Tensor::zeros(&[n_classes]),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut out = features.matmul(&self.weights)?;
        for r in 0..out.rows() {
            for (x, &b) in out.row_mut(r).iter_mut().zip(self.bias.data()) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Row-stochastic softmax of the logits.
    pub fn probabilities(&self, features: &Tensor) -> Result<Tensor> {
        let mut logits = self.logits(features)?;
        for r in 0..logits.rows() {
            softmax_row(logits.row_mut(r));
        }
        Ok(logits)
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<u8>> {
        let logits = self.logits(features)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0usize;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                best as u8
            })
            .collect())
    }
}

fn softmax_row(row: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub adam: AdamParams,
    /// Fraction of the labeled subset held out to pick the best epoch
    /// (0 disables selection and keeps the final epoch).
    pub val_fraction: Real,
    pub n_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            epochs: 200,
            minibatch: 50,
            adam: AdamParams::default(),
            val_fraction: 0.2,
            n_classes: 10,
        }
    }
}

impl HeadConfig {
    /// The fine-tuning phase default: same budget, smaller learning rate.
    pub fn fine_tune_default() -> Self {
        HeadConfig {
            adam: AdamParams::with_step_size(1e-4),
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitMetrics {
    pub test_error: Real,
    pub train_error: Real,
    pub val_error: Option<Real>,
    pub best_epoch: usize,
}

/// One line of the metrics record stream.
pub fn metric_line(labels_used: usize, model: &str, phase: &str, seed: u64, test_error: Real) -> String {
    format!("labels_used={labels_used} model={model} phase={phase} seed={seed} test_error={test_error:.4}")
}

/// Deterministic feature extraction: propagates probabilities through every
/// layer (no sampling) and returns the top-layer activations `[n, top]`.
pub fn extract_features(net: &Drbn, images: &Tensor) -> Result<Tensor> {
    if images.rank() != 2 {
        return Err(Error::shape(format!(
            "extract_features: expected [n, visible], got {:?}",
            images.shape()
        )));
    }
    let mut x = images.clone();
    for layer in net.layers() {
        x = layer.prob_h_rows(&x)?;
    }
    Ok(x)
}

fn check_labels(labels: &[u8], n: usize, n_classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArg("empty labeled data".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(Error::InvalidArg(format!(
            "label {bad} out of range (n_classes = {n_classes})"
        )));
    }
    Ok(())
}

/// Gradients of the mean cross-entropy with respect to the head and (when a
/// backbone is present) every layer's upward parameters.
struct SupervisedGrads {
    head_w: Tensor,
    head_b: Tensor,
    /// Per layer: (weight-or-filter grad, hidden-bias grad).
    layers: Vec<(Tensor, Tensor)>,
}

/// Forward activations through the (optional) backbone.
fn forward_activations(backbone: Option<&Drbn>, x: &Tensor) -> Result<Vec<Tensor>> {
    let mut acts = vec![x.clone()];
    if let Some(net) = backbone {
        for layer in net.layers() {
            let next = layer.prob_h_rows(acts.last().unwrap())?;
            acts.push(next);
        }
    }
    Ok(acts)
}

/// Mean cross-entropy loss and full gradients for one labeled batch.
fn supervised_grads(
    backbone: Option<&Drbn>,
    head: &SoftmaxHead,
    x: &Tensor,
    labels: &[u8],
) -> Result<(SupervisedGrads, Real)> {
    let m = x.rows();
    check_labels(labels, m, head.n_classes())?;
    let acts = forward_activations(backbone, x)?;
    let top = acts.last().unwrap();
    let mut delta = head.logits(top)?; // becomes (softmax - onehot)/m
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = delta.row_mut(r);
        softmax_row(row);
        loss -= row[label as usize].max(1e-300).ln();
        row[label as usize] -= 1.0;
        for v in row.iter_mut() {
            *v /= m as Real;
        }
    }
    loss /= m as Real;

    let head_w = top.matmul_at(&delta)?;
    let mut head_b = Tensor::zeros(&[head.n_classes()]);
    for r in 0..m {
        for (acc, &d) in head_b.data_mut().iter_mut().zip(delta.row(r)) {
            *acc += d;
        }
    }

    let mut layers = Vec::new();
    if let Some(net) = backbone {
        // delta over the top features.
        let mut upstream = delta.matmul_bt(&head.weights)?;
        for (l, layer) in net.layers().iter().enumerate().rev() {
            let out_act = &acts[l + 1];
            let in_act = &acts[l];
            // Through the sigmoid.
            let pre = upstream.zip_map(out_act, |g, a| g * a * (1.0 - a))?;
            match layer {
                Layer::Dense(p) => {
                    let d_w = in_act.matmul_at(&pre)?;
                    let mut d_c = Tensor::zeros(&[p.hidden_len()]);
                    for r in 0..m {
                        for (acc, &d) in d_c.data_mut().iter_mut().zip(pre.row(r)) {
                            *acc += d;
                        }
                    }
                    if l > 0 {
                        upstream = pre.matmul_bt(&p.weights)?;
                    }
                    layers.push((d_w, d_c));
                }
                Layer::Conv(p) => {
                    let g = p.geometry();
                    let mut d_w = Tensor::zeros(&g.filter_shape());
                    let mut d_c = Tensor::zeros(&[g.filters]);
                    let mut next_up = Tensor::zeros(&[m, g.visible_len()]);
                    for r in 0..m {
                        let in_row = &in_act.data()[r * g.visible_len()..(r + 1) * g.visible_len()];
                        let pre_row = &pre.data()[r * g.hidden_len()..(r + 1) * g.hidden_len()];
                        crate::conv::conv_grad_filters_into(&g, in_row, pre_row, d_w.data_mut());
                        for site in pre_row.chunks(g.filters) {
                            for (acc, &d) in d_c.data_mut().iter_mut().zip(site) {
                                *acc += d;
                            }
                        }
                        if l > 0 {
                            let dst = &mut next_up.data_mut()
                                [r * g.visible_len()..(r + 1) * g.visible_len()];
                            crate::conv::conv_transpose_into(&g, pre_row, p.filters.data(), dst);
                        }
                    }
                    if l > 0 {
                        upstream = next_up;
                    }
                    layers.push((d_w, d_c));
                }
            }
        }
        layers.reverse();
    }
    Ok((
        SupervisedGrads {
            head_w,
            head_b,
            layers,
        },
        loss,
    ))
}

/// Fraction of rows whose argmax class disagrees with the label.
pub fn classification_error(
    backbone: Option<&Drbn>,
    head: &SoftmaxHead,
    x: &Tensor,
    labels: &[u8],
) -> Result<Real> {
    check_labels(labels, x.rows(), head.n_classes())?;
    let acts = forward_activations(backbone, x)?;
    let preds = head.predict(acts.last().unwrap())?;
    let wrong = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count();
    Ok(wrong as Real / labels.len() as Real)
}

struct TrainOutcome {
    train_error: Real,
    val_error: Option<Real>,
    best_epoch: usize,
}

/// The shared supervised loop: Adam over minibatches, optional joint
/// backbone training, best-on-validation snapshot selection.
fn train_supervised(
    mut backbone: Option<&mut Drbn>,
    head: &mut SoftmaxHead,
    x: &Tensor,
    labels: &[u8],
    cfg: &HeadConfig,
    rng: &mut RngStream,
) -> Result<TrainOutcome> {
    check_labels(labels, x.rows(), cfg.n_classes)?;
    if cfg.epochs == 0 || cfg.minibatch == 0 {
        return Err(Error::InvalidArg("epochs and minibatch must be >= 1".into()));
    }
    let n = x.rows();
    // Carve the validation slice out of the labeled budget.
    let mut order: Vec<u32> = (0..n as u32).collect();
    rng.split(0).shuffle(&mut order);
    let val_n = ((n as Real * cfg.val_fraction) as usize).min(n.saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(val_n);
    let x_train = x.gather_rows(train_idx)?;
    let y_train: Vec<u8> = train_idx.iter().map(|&i| labels[i as usize]).collect();
    let (x_val, y_val) = if val_n > 0 {
        (
            Some(x.gather_rows(val_idx)?),
            val_idx.iter().map(|&i| labels[i as usize]).collect::<Vec<u8>>(),
        )
    } else {
        (None, Vec::new())
    };

    let mut head_opt = AdamState::new(&[head.weights.shape(), head.bias.shape()]);
    let mut layer_opts: Vec<AdamState> = match &backbone {
        Some(net) => net
            .layers()
            .iter()
            .map(|layer| match layer {
                Layer::Dense(p) => {
                    AdamState::new(&[p.weights.shape(), p.hidden_bias.shape()])
                }
                Layer::Conv(p) => {
                    AdamState::new(&[p.filters.shape(), p.hidden_bias.shape()])
                }
            })
            .collect(),
        None => Vec::new(),
    };

    let mut best: Option<(Real, usize, SoftmaxHead, Option<Drbn>)> = None;
    let train_n = x_train.rows();
    let mut perm: Vec<u32> = (0..train_n as u32).collect();
    for epoch in 0..cfg.epochs {
        rng.split(1 + epoch as u64).shuffle(&mut perm);
        for chunk in perm.chunks(cfg.minibatch.min(train_n)) {
            let xb = x_train.gather_rows(chunk)?;
            let yb: Vec<u8> = chunk.iter().map(|&i| y_train[i as usize]).collect();
            let (grads, _) = supervised_grads(backbone.as_deref(), head, &xb, &yb)?;
            head_opt.step(
                &cfg.adam,
                &mut [&mut head.weights, &mut head.bias],
                &[&grads.head_w, &grads.head_b],
            )?;
            if let Some(net) = backbone.as_deref_mut() {
                for (l, (d_w, d_c)) in grads.layers.iter().enumerate() {
                    match &mut net.layers_mut()[l] {
                        Layer::Dense(p) => layer_opts[l].step(
                            &cfg.adam,
                            &mut [&mut p.weights, &mut p.hidden_bias],
                            &[d_w, d_c],
                        )?,
                        Layer::Conv(p) => layer_opts[l].step(
                            &cfg.adam,
                            &mut [&mut p.filters, &mut p.hidden_bias],
                            &[d_w, d_c],
                        )?,
                    }
                }
            }
        }
        if let Some(x_val) = &x_val {
            let err = classification_error(backbone.as_deref(), head, x_val, &y_val)?;
            let improved = best.as_ref().map_or(true, |(b, ..)| err < *b);
            if improved {
                best = Some((
                    err,
                    epoch,
                    head.clone(),
                    backbone.as_deref().cloned(),
                ));
            }
        }
    }
    let (val_error, best_epoch) = match best {
        Some((err, epoch, best_head, best_net)) => {
            *head = best_head;
            if let (Some(net), Some(best)) = (backbone.as_deref_mut(), best_net) {
                *net = best;
            }
            (Some(err), epoch)
        }
        None => (None, cfg.epochs - 1),
    };
    let train_error = classification_error(backbone.as_deref(), head, &x_train, &y_train)?;
    Ok(TrainOutcome {
        train_error,
        val_error,
        best_epoch,
    })
}

/// Trains only the softmax head on frozen features.
pub fn train_head(
    features: &Tensor,
    labels: &[u8],
    test_features: &Tensor,
    test_labels: &[u8],
    cfg: &HeadConfig,
    rng: &mut RngStream,
) -> Result<(SoftmaxHead, FitMetrics)> {
    let mut head = SoftmaxHead::zeros(features.cols(), cfg.n_classes);
    let outcome = train_supervised(None, &mut head, features, labels, cfg, rng)?;
    let test_error = classification_error(None, &head, test_features, test_labels)?;
    Ok((
        head,
        FitMetrics {
            test_error,
            train_error: outcome.train_error,
            val_error: outcome.val_error,
            best_epoch: outcome.best_epoch,
        },
    ))
}

/// Joint supervised training of backbone and head at the configured
/// (typically reduced) learning rate.
pub fn fine_tune(
    net: &mut Drbn,
    head: &mut SoftmaxHead,
    images: &Tensor,
    labels: &[u8],
    test_images: &Tensor,
    test_labels: &[u8],
    cfg: &HeadConfig,
    rng: &mut RngStream,
) -> Result<FitMetrics> {
    let outcome = train_supervised(Some(net), head, images, labels, cfg, rng)?;
    let test_error = classification_error(Some(net), head, test_images, test_labels)?;
    Ok(FitMetrics {
        test_error,
        train_error: outcome.train_error,
        val_error: outcome.val_error,
        best_epoch: outcome.best_epoch,
    })
}

/// Supervised-only baseline: a dense sigmoid network with the given hidden
/// sizes, Glorot-initialized, trained from scratch with the same engine.
pub fn plain_fc_baseline(
    images: &Tensor,
    labels: &[u8],
    test_images: &Tensor,
    test_labels: &[u8],
    hidden_sizes: &[usize],
    cfg: &HeadConfig,
    rng: &mut RngStream,
) -> Result<FitMetrics> {
    if hidden_sizes.is_empty() {
        return Err(Error::InvalidArg("baseline needs at least one hidden layer".into()));
    }
    let mut layers = Vec::new();
    let mut fan_in = images.cols();
    let init = rng.split(100);
    for (i, &size) in hidden_sizes.iter().enumerate() {
        let limit = (6.0 / (fan_in + size) as Real).sqrt();
        let mut stream = init.split(i as u64);
        layers.push(Layer::Dense(RbmParams {
            weights: Tensor::from_fn(&[fan_in, size], |_| {
                (stream.uniform01() as Real * 2.0 - 1.0) * limit
            }),
            visible_bias: Tensor::zeros(&[fan_in]),
            hidden_bias: Tensor::zeros(&[size]),
        }));
        fan_in = size;
    }
    let mut net = Drbn::from_layers(layers)?;
    let mut head = SoftmaxHead::zeros(fan_in, cfg.n_classes);
    let outcome = train_supervised(Some(&mut net), &mut head, images, labels, cfg, rng)?;
    let test_error = classification_error(Some(&net), &head, test_images, test_labels)?;
    Ok(FitMetrics {
        test_error,
        train_error: outcome.train_error,
        val_error: outcome.val_error,
        best_epoch: outcome.best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkSpec;

    #[test]
    fn features_of_zero_net_are_half() {
        let net = Drbn::from_layers(vec![Layer::Dense(RbmParams::zeros(6, 4))]).unwrap();
        let f = extract_features(&net, &Tensor::zeros(&[3, 6])).unwrap();
        assert_eq!(f.shape(), &[3, 4]);
        assert!(f.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn feature_dims_match_reference_architectures() {
        let d3 = NetworkSpec::parse("dense:500,dense:500,dense:1000", [28, 28, 1])
            .unwrap()
            .build(&RngStream::from_seed(1))
            .unwrap();
        let f = extract_features(&d3, &Tensor::zeros(&[1, 784])).unwrap();
        assert_eq!(f.shape(), &[1, 1000]);

        let conv = NetworkSpec::parse("conv:64x12s2,conv:128x5s2,dense:512", [28, 28, 1])
            .unwrap()
            .build(&RngStream::from_seed(2))
            .unwrap();
        let f = extract_features(&conv, &Tensor::zeros(&[1, 784])).unwrap();
        assert_eq!(f.shape(), &[1, 512]);
    }

    #[test]
    fn features_are_deterministic() {
        let net = NetworkSpec::parse("dense:10,dense:6", [4, 4, 1])
            .unwrap()
            .build(&RngStream::from_seed(3))
            .unwrap();
        let x = Tensor::from_fn(&[5, 16], |i| ((i * 3) % 2) as Real);
        assert_eq!(
            extract_features(&net, &x).unwrap(),
            extract_features(&net, &x).unwrap()
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = RngStream::from_seed(4);
        let head = SoftmaxHead {
            weights: Tensor::from_fn(&[8, 10], |_| rng.uniform01() as Real * 4.0 - 2.0),
            bias: Tensor::from_fn(&[10], |_| rng.uniform01() as Real),
        };
        let x = Tensor::from_fn(&[6, 8], |_| rng.uniform01() as Real);
        let p = head.probabilities(&x).unwrap();
        for r in 0..6 {
            let s: Real = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
    }

    fn separable_fixture(n_per_class: usize) -> (Tensor, Vec<u8>) {
        // Class 0 lives near (1, 0, ...), class 1 near (0, 1, ...).
        let mut rng = RngStream::from_seed(5);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per_class {
            let class = (i % 2) as u8;
            labels.push(class);
            for j in 0..4 {
                let center = if j == class as usize { 0.9 } else { 0.1 };
                data.push(center + (rng.uniform01() as Real - 0.5) * 0.1);
            }
        }
        (Tensor::from_vec(&[2 * n_per_class, 4], data).unwrap(), labels)
    }

    #[test]
    fn separable_features_reach_zero_training_error() {
        let (x, y) = separable_fixture(20);
        let cfg = HeadConfig {
            epochs: 60,
            minibatch: 8,
            val_fraction: 0.0,
            n_classes: 2,
            ..Default::default()
        };
        let (head, metrics) =
            train_head(&x, &y, &x, &y, &cfg, &mut RngStream::from_seed(6)).unwrap();
        assert_eq!(metrics.train_error, 0.0);
        assert_eq!(metrics.test_error, 0.0);
        assert_eq!(head.n_classes(), 2);
    }

    #[test]
    fn random_labels_sit_at_chance() {
        // Features carry no label signal: expect ~90% error on 10 classes.
        let mut rng = RngStream::from_seed(7);
        let x = Tensor::from_fn(&[300, 6], |_| rng.uniform01() as Real);
        let y: Vec<u8> = (0..300).map(|_| rng.index(10) as u8).collect();
        let x_test = Tensor::from_fn(&[2000, 6], |_| rng.uniform01() as Real);
        let y_test: Vec<u8> = (0..2000).map(|_| rng.index(10) as u8).collect();
        let cfg = HeadConfig {
            epochs: 30,
            ..Default::default()
        };
        let (_, metrics) =
            train_head(&x, &y, &x_test, &y_test, &cfg, &mut RngStream::from_seed(8)).unwrap();
        assert!(
            (metrics.test_error - 0.9).abs() < 0.04,
            "error {}",
            metrics.test_error
        );
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let x = Tensor::zeros(&[2, 3]);
        let cfg = HeadConfig::default();
        assert!(train_head(&x, &[0, 10], &x, &[0, 0], &cfg, &mut RngStream::from_seed(9)).is_err());
    }

    #[test]
    fn zero_learning_rate_fine_tune_changes_nothing() {
        let net0 = NetworkSpec::parse("dense:8,dense:6", [3, 3, 1])
            .unwrap()
            .build(&RngStream::from_seed(10))
            .unwrap();
        let x = Tensor::from_fn(&[20, 9], |i| ((i * 7) % 2) as Real);
        let y: Vec<u8> = (0..20).map(|i| (i % 3) as u8).collect();

        let features = extract_features(&net0, &x).unwrap();
        let cfg = HeadConfig {
            epochs: 15,
            minibatch: 5,
            n_classes: 3,
            val_fraction: 0.0,
            ..Default::default()
        };
        let (head, frozen) =
            train_head(&features, &y, &features, &y, &cfg, &mut RngStream::from_seed(11)).unwrap();

        let mut net = net0.clone();
        let mut tuned_head = head.clone();
        let ft_cfg = HeadConfig {
            adam: AdamParams {
                step_size: 0.0,
                ..Default::default()
            },
            ..cfg
        };
        let tuned = fine_tune(
            &mut net,
            &mut tuned_head,
            &x,
            &y,
            &x,
            &y,
            &ft_cfg,
            &mut RngStream::from_seed(12),
        )
        .unwrap();
        assert_eq!(net, net0);
        assert_eq!(tuned_head, head);
        assert!((tuned.test_error - frozen.test_error).abs() < 1e-12);
    }

    #[test]
    fn backbone_is_untouched_by_head_training() {
        let net = NetworkSpec::parse("dense:8,dense:5", [3, 3, 1])
            .unwrap()
            .build(&RngStream::from_seed(13))
            .unwrap();
        let snapshot = net.clone();
        let x = Tensor::from_fn(&[12, 9], |i| ((i + 2) % 2) as Real);
        let y: Vec<u8> = (0..12).map(|i| (i % 2) as u8).collect();
        let features = extract_features(&net, &x).unwrap();
        let cfg = HeadConfig {
            epochs: 10,
            minibatch: 4,
            n_classes: 2,
            ..Default::default()
        };
        train_head(&features, &y, &features, &y, &cfg, &mut RngStream::from_seed(14)).unwrap();
        assert_eq!(net, snapshot);
    }

    #[test]
    fn backprop_matches_finite_differences_on_dense_net() {
        let mut net = NetworkSpec::parse("dense:4,dense:3", [2, 3, 1])
            .unwrap()
            .build(&RngStream::from_seed(15))
            .unwrap();
        // Give the toy net nonzero-scale weights so gradients are well sized.
        for layer in net.layers_mut() {
            if let Layer::Dense(p) = layer {
                let mut rng = RngStream::from_seed(16);
                p.weights = Tensor::from_fn(p.weights.shape(), |_| {
                    rng.uniform01() as Real * 2.0 - 1.0
                });
            }
        }
        let mut rng = RngStream::from_seed(17);
        let head = SoftmaxHead {
            weights: Tensor::from_fn(&[3, 3], |_| rng.uniform01() as Real - 0.5),
            bias: Tensor::from_fn(&[3], |_| rng.uniform01() as Real - 0.5),
        };
        let x = Tensor::from_fn(&[6, 6], |i| ((i * 5) % 2) as Real);
        let y: Vec<u8> = vec![0, 1, 2, 1, 0, 2];

        let (grads, _) = supervised_grads(Some(&net), &head, &x, &y).unwrap();
        let loss_of = |net: &Drbn, head: &SoftmaxHead| {
            supervised_grads(Some(net), head, &x, &y).unwrap().1
        };
        let eps = 1e-5;
        // Head weight check.
        for idx in 0..9 {
            let mut hi = head.clone();
            hi.weights.data_mut()[idx] += eps;
            let mut lo = head.clone();
            lo.weights.data_mut()[idx] -= eps;
            let fd = (loss_of(&net, &hi) - loss_of(&net, &lo)) / (2.0 * eps);
            let an = grads.head_w.data()[idx];
            assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1.0), "head W[{idx}]");
        }
        // Every backbone layer.
        for l in 0..2 {
            let n_w = match &net.layers()[l] {
                Layer::Dense(p) => p.weights.len(),
                _ => unreachable!(),
            };
            for idx in 0..n_w {
                let mut hi = net.clone();
                if let Layer::Dense(p) = &mut hi.layers_mut()[l] {
                    p.weights.data_mut()[idx] += eps;
                }
                let mut lo = net.clone();
                if let Layer::Dense(p) = &mut lo.layers_mut()[l] {
                    p.weights.data_mut()[idx] -= eps;
                }
                let fd = (loss_of(&hi, &head) - loss_of(&lo, &head)) / (2.0 * eps);
                let an = grads.layers[l].0.data()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * fd.abs().max(1.0),
                    "layer {l} W[{idx}]: {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences_through_conv() {
        let net0 = NetworkSpec::parse("conv:2x3s1,dense:3", [4, 4, 1])
            .unwrap()
            .build(&RngStream::from_seed(18))
            .unwrap();
        let mut net = net0;
        if let Layer::Conv(p) = &mut net.layers_mut()[0] {
            let mut rng = RngStream::from_seed(19);
            p.filters =
                Tensor::from_fn(p.filters.shape(), |_| rng.uniform01() as Real - 0.5);
        }
        let mut rng = RngStream::from_seed(20);
        let head = SoftmaxHead {
            weights: Tensor::from_fn(&[3, 2], |_| rng.uniform01() as Real - 0.5),
            bias: Tensor::zeros(&[2]),
        };
        let x = Tensor::from_fn(&[4, 16], |i| ((i * 3 + 1) % 2) as Real);
        let y: Vec<u8> = vec![0, 1, 1, 0];
        let (grads, _) = supervised_grads(Some(&net), &head, &x, &y).unwrap();
        let loss_of = |net: &Drbn| supervised_grads(Some(net), &head, &x, &y).unwrap().1;
        let eps = 1e-5;
        let n_f = match &net.layers()[0] {
            Layer::Conv(p) => p.filters.len(),
            _ => unreachable!(),
        };
        for idx in 0..n_f {
            let mut hi = net.clone();
            if let Layer::Conv(p) = &mut hi.layers_mut()[0] {
                p.filters.data_mut()[idx] += eps;
            }
            let mut lo = net.clone();
            if let Layer::Conv(p) = &mut lo.layers_mut()[0] {
                p.filters.data_mut()[idx] -= eps;
            }
            let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * eps);
            let an = grads.layers[0].0.data()[idx];
            assert!(
                (fd - an).abs() <= 1e-6 * fd.abs().max(1.0),
                "conv filter[{idx}]: {fd} vs {an}"
            );
        }
        // Dense layer behind the conv sees correctly backpropagated deltas.
        for idx in 0..6 {
            let mut hi = net.clone();
            if let Layer::Dense(p) = &mut hi.layers_mut()[1] {
                p.weights.data_mut()[idx] += eps;
            }
            let mut lo = net.clone();
            if let Layer::Dense(p) = &mut lo.layers_mut()[1] {
                p.weights.data_mut()[idx] -= eps;
            }
            let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * eps);
            let an = grads.layers[1].0.data()[idx];
            assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn plain_fc_memorizes_a_single_example() {
        let x = Tensor::from_fn(&[1, 9], |i| (i % 2) as Real);
        let y = vec![3u8];
        let cfg = HeadConfig {
            epochs: 150,
            minibatch: 1,
            val_fraction: 0.0,
            ..Default::default()
        };
        let metrics = plain_fc_baseline(
            &x,
            &y,
            &x,
            &y,
            &[8, 6],
            &cfg,
            &mut RngStream::from_seed(21),
        )
        .unwrap();
        assert_eq!(metrics.train_error, 0.0);
        assert_eq!(metrics.test_error, 0.0);
    }

    #[test]
    fn metric_lines_are_parseable_key_value_records() {
        let line = metric_line(600, "rbm-1000", "frozen", 7, 0.0915);
        assert_eq!(
            line,
            "labels_used=600 model=rbm-1000 phase=frozen seed=7 test_error=0.0915"
        );
    }
}
