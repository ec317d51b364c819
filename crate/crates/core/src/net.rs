//! Deep restricted Boltzmann networks: stacks of RBM layers where each
//! layer's hidden units are the next layer's visible units.
//!
//! A full Gibbs iteration is one up-and-down cycle: sample upward layer by
//! layer to the top, then sample downward back to the visibles. Energies and
//! free energies stay per-layer; nothing in a network couples non-adjacent
//! layers.
//!
//! Architecture strings describe a stack compactly:
//! `dense:500,dense:1000` or `conv:64x12s2,conv:128x5s2,dense:512` — a conv
//! layer is `conv:<filters>x<size>s<stride>`. Conv layers must precede dense
//! layers; the conv-to-dense junction flattens in row-major (H, W, C) order,
//! which is exactly the flat row carrier format, so it costs nothing and is
//! stable across versions.

use crate::conv::ConvGeometry;
use crate::conv_rbm::ConvRbmParams;
use crate::layer::Layer;
use crate::math::{bernoulli_sample, bernoulli_sample_rows};
use crate::rbm::RbmParams;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        visible: usize,
        hidden: usize,
    },
    Conv {
        in_shape: [usize; 3],
        filters: usize,
        filter_size: usize,
        stride: usize,
    },
}

impl LayerSpec {
    pub fn visible_len(&self) -> usize {
        match self {
            LayerSpec::Dense { visible, .. } => *visible,
            LayerSpec::Conv { in_shape, .. } => in_shape.iter().product(),
        }
    }

    pub fn hidden_len(&self) -> usize {
        match self {
            LayerSpec::Dense { hidden, .. } => *hidden,
            LayerSpec::Conv { .. } => self.geometry().unwrap().hidden_len(),
        }
    }

    pub fn geometry(&self) -> Option<ConvGeometry> {
        match self {
            LayerSpec::Dense { .. } => None,
            LayerSpec::Conv {
                in_shape,
                filters,
                filter_size,
                stride,
            } => ConvGeometry::new(*in_shape, *filters, *filter_size, *stride).ok(),
        }
    }

    pub fn weight_count(&self) -> u64 {
        match self {
            LayerSpec::Dense { visible, hidden } => (*visible as u64) * (*hidden as u64),
            LayerSpec::Conv {
                in_shape,
                filters,
                filter_size,
                ..
            } => (*filters as u64) * (*filter_size as u64) * (*filter_size as u64) * in_shape[2] as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArg("network needs at least one layer".into()));
        }
        let mut seen_dense = false;
        for (l, spec) in self.layers.iter().enumerate() {
            match spec {
                LayerSpec::Dense { visible, hidden } => {
                    if *visible == 0 || *hidden == 0 {
                        return Err(Error::InvalidArg(format!("layer {l}: zero-sized dense layer")));
                    }
                    seen_dense = true;
                }
                LayerSpec::Conv {
                    in_shape,
                    filters,
                    filter_size,
                    stride,
                } => {
                    if seen_dense {
                        return Err(Error::InvalidArg(format!(
                            "layer {l}: conv layer cannot follow a dense layer"
                        )));
                    }
                    ConvGeometry::new(*in_shape, *filters, *filter_size, *stride)?;
                    if l > 0 {
                        // Conv stacked on conv must consume the exact shape.
                        let prev = self.layers[l - 1]
                            .geometry()
                            .expect("conv layers precede dense layers");
                        if prev.out_shape() != *in_shape {
                            return Err(Error::shape(format!(
                                "layer {l}: conv input {:?} but previous layer emits {:?}",
                                in_shape,
                                prev.out_shape()
                            )));
                        }
                    }
                }
            }
            if l > 0 && self.layers[l - 1].hidden_len() != spec.visible_len() {
                return Err(Error::shape(format!(
                    "layer {l}: visible size {} but layer {} emits {}",
                    spec.visible_len(),
                    l - 1,
                    self.layers[l - 1].hidden_len()
                )));
            }
        }
        Ok(())
    }

    /// Total weight entries across all layers; bias parameters are excluded
    /// from the count.
    pub fn weight_count(&self) -> u64 {
        self.layers.iter().map(LayerSpec::weight_count).sum()
    }

    pub fn visible_len(&self) -> usize {
        self.layers[0].visible_len()
    }

    pub fn top_len(&self) -> usize {
        self.layers[self.layers.len() - 1].hidden_len()
    }

    /// Parses the architecture mini-language against a known input shape.
    pub fn parse(arch: &str, input_shape: [usize; 3]) -> Result<NetworkSpec> {
        if arch.trim().is_empty() {
            return Err(Error::ArchParse {
                pos: 0,
                msg: "empty architecture".into(),
            });
        }
        let mut layers = Vec::new();
        let mut cur_shape = input_shape;
        let mut cur_flat: usize = input_shape.iter().product();
        let mut seen_dense = false;
        let mut pos = 0usize;
        for chunk in arch.split(',') {
            let chunk_start = pos;
            pos += chunk.len() + 1; // next chunk offset (skip comma)
            let item = chunk.trim();
            let item_start = chunk_start + (chunk.len() - chunk.trim_start().len());
            if let Some(rest) = item.strip_prefix("dense:") {
                let hidden = parse_uint(rest, item_start + 6)?;
                layers.push(LayerSpec::Dense {
                    visible: cur_flat,
                    hidden,
                });
                cur_flat = hidden;
                seen_dense = true;
            } else if let Some(rest) = item.strip_prefix("conv:") {
                if seen_dense {
                    return Err(Error::ArchParse {
                        pos: item_start,
                        msg: "conv layer cannot follow a dense layer".into(),
                    });
                }
                let body_start = item_start + 5;
                let x = rest.find('x').ok_or(Error::ArchParse {
                    pos: body_start,
                    msg: "expected <filters>x<size>s<stride>".into(),
                })?;
                let s = rest[x + 1..].find('s').map(|i| i + x + 1).ok_or(Error::ArchParse {
                    pos: body_start + x + 1,
                    msg: "expected s<stride> after filter size".into(),
                })?;
                let filters = parse_uint(&rest[..x], body_start)?;
                let filter_size = parse_uint(&rest[x + 1..s], body_start + x + 1)?;
                let stride = parse_uint(&rest[s + 1..], body_start + s + 1)?;
                let geometry = ConvGeometry::new(cur_shape, filters, filter_size, stride)
                    .map_err(|e| Error::ArchParse {
                        pos: item_start,
                        msg: e.to_string(),
                    })?;
                layers.push(LayerSpec::Conv {
                    in_shape: cur_shape,
                    filters,
                    filter_size,
                    stride,
                });
                cur_shape = geometry.out_shape();
                cur_flat = geometry.hidden_len();
            } else {
                return Err(Error::ArchParse {
                    pos: item_start,
                    msg: format!("unknown layer kind {item:?} (expected dense: or conv:)"),
                });
            }
        }
        let spec = NetworkSpec { layers };
        spec.validate()?;
        Ok(spec)
    }

    /// Instantiates the network. Layer `l` draws its weights from
    /// `rng.split(l)`, so adding layers never shifts earlier layers' init.
    pub fn build(&self, rng: &RngStream) -> Result<Drbn> {
        self.validate()?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, spec)| {
                let mut stream = rng.split(l as u64);
                match spec {
                    LayerSpec::Dense { visible, hidden } => {
                        Layer::Dense(RbmParams::init(*visible, *hidden, &mut stream))
                    }
                    LayerSpec::Conv { .. } => {
                        let g = spec.geometry().expect("validated above");
                        Layer::Conv(ConvRbmParams::init(g, &mut stream))
                    }
                }
            })
            .collect();
        Ok(Drbn { layers })
    }
}

fn parse_uint(s: &str, pos: usize) -> Result<usize> {
    let s = s.trim();
    if s.is_empty() {
        return Err(Error::ArchParse {
            pos,
            msg: "expected a number".into(),
        });
    }
    s.parse::<usize>().map_err(|_| Error::ArchParse {
        pos,
        msg: format!("invalid number {s:?}"),
    })
}

/// How a pass draws its Bernoulli samples: one stream for the whole batch
/// (the data pass) or one stream per row (particle and image chains).
pub enum Sampler<'a> {
    Single(&'a mut RngStream),
    PerRow(&'a mut [RngStream]),
}

impl Sampler<'_> {
    pub fn sample(&mut self, probs: &Tensor) -> Result<Tensor> {
        match self {
            Sampler::Single(rng) => bernoulli_sample(probs, rng),
            Sampler::PerRow(streams) => bernoulli_sample_rows(probs, streams),
        }
    }
}

/// States and pre-sampling probabilities recorded along one pass.
///
/// `states` has one entry per layer boundary (`L + 1` tensors of `[M, len]`);
/// `probs[l]` is the probability the *sampled* end of edge `l` was drawn
/// from: on an upward pass that is `p(x[l+1] | x[l])`, on a downward pass
/// `p(x[l] | x[l+1])`. The layer-0 probability of a downward pass is always
/// present — it is what image output uses.
#[derive(Clone, Debug, PartialEq)]
pub struct PassRecord {
    pub states: Vec<Tensor>,
    pub probs: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Drbn {
    layers: Vec<Layer>,
}

impl Drbn {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Drbn> {
        let net = Drbn { layers };
        net.spec().validate()?;
        Ok(net)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn visible_len(&self) -> usize {
        self.layers[0].visible_len()
    }

    pub fn top_len(&self) -> usize {
        self.layers[self.layers.len() - 1].hidden_len()
    }

    /// Image geometry of the visible layer, when the input is a conv layer;
    /// dense-front networks report `None`.
    pub fn visible_image_shape(&self) -> Option<[usize; 3]> {
        match &self.layers[0] {
            Layer::Conv(p) => Some(p.in_shape),
            Layer::Dense(_) => None,
        }
    }

    /// Reconstructs the declarative spec of this instance.
    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            layers: self
                .layers
                .iter()
                .map(|layer| match layer {
                    Layer::Dense(p) => LayerSpec::Dense {
                        visible: p.visible_len(),
                        hidden: p.hidden_len(),
                    },
                    Layer::Conv(p) => LayerSpec::Conv {
                        in_shape: p.in_shape,
                        filters: p.filters.shape()[0],
                        filter_size: p.filters.shape()[1],
                        stride: p.stride,
                    },
                })
                .collect(),
        }
    }

    fn lift(&self, x: &Tensor, width: usize, what: &str) -> Result<Tensor> {
        match x.rank() {
            1 if x.len() == width => Ok(x.clone().reshape(&[1, width])?),
            2 if x.shape()[1] == width => Ok(x.clone()),
            _ => Err(Error::shape(format!(
                "{what}: expected [{width}] or [n, {width}], got {:?}",
                x.shape()
            ))),
        }
    }

    /// Samples upward from the visible layer to the top, recording every
    /// intermediate probability and state.
    pub fn upward_pass(&self, x0: &Tensor, sampler: &mut Sampler) -> Result<PassRecord> {
        let x0 = self.lift(x0, self.visible_len(), "upward_pass")?;
        let mut states = Vec::with_capacity(self.depth() + 1);
        let mut probs = Vec::with_capacity(self.depth());
        states.push(x0);
        for layer in &self.layers {
            let p = layer.prob_h_rows(states.last().unwrap())?;
            states.push(sampler.sample(&p)?);
            probs.push(p);
        }
        Ok(PassRecord { states, probs })
    }

    /// Samples downward from a top state back to the visibles. The layer-0
    /// probability is recorded for image output.
    pub fn downward_pass(&self, top: &Tensor, sampler: &mut Sampler) -> Result<PassRecord> {
        let top = self.lift(top, self.top_len(), "downward_pass")?;
        let depth = self.depth();
        let mut states = vec![Tensor::zeros(&[0]); depth + 1];
        let mut probs = vec![Tensor::zeros(&[0]); depth];
        states[depth] = top;
        for l in (0..depth).rev() {
            let p = self.layers[l].prob_v_rows(&states[l + 1])?;
            states[l] = sampler.sample(&p)?;
            probs[l] = p;
        }
        Ok(PassRecord { states, probs })
    }

    /// One full Gibbs cycle: upward pass, then downward pass from its top
    /// state. Returns both records.
    pub fn gibbs_cycle(&self, x0: &Tensor, sampler: &mut Sampler) -> Result<(PassRecord, PassRecord)> {
        let up = self.upward_pass(x0, sampler)?;
        let down = self.downward_pass(&up.states[self.depth()], sampler)?;
        Ok((up, down))
    }

    /// One full Gibbs iteration; returns the new visible sample and the
    /// probability it was drawn from.
    pub fn gibbs_iteration(&self, x0: &Tensor, sampler: &mut Sampler) -> Result<(Tensor, Tensor)> {
        let (_, down) = self.gibbs_cycle(x0, sampler)?;
        let mut down = down;
        Ok((down.states.swap_remove(0), down.probs.swap_remove(0)))
    }

    /// Generates `n_images` visible probability rows by running `n_steps`
    /// Gibbs iterations from Bernoulli(0.5) noise. Chain `j` owns the stream
    /// `rng.split(j)`. The returned rows are the final downward pass's
    /// layer-0 probabilities — the last step never samples the output.
    pub fn generate(&self, n_images: usize, n_steps: usize, rng: &RngStream) -> Result<Tensor> {
        if n_images == 0 || n_steps == 0 {
            return Err(Error::InvalidArg(
                "generate: n_images and n_steps must be at least 1".into(),
            ));
        }
        let mut streams: Vec<RngStream> = (0..n_images).map(|j| rng.split(j as u64)).collect();
        let noise = Tensor::filled(&[n_images, self.visible_len()], 0.5);
        let mut x = bernoulli_sample_rows(&noise, &mut streams)?;
        let mut probs = None;
        for _ in 0..n_steps {
            let (next, p) = self.gibbs_iteration(&x, &mut Sampler::PerRow(&mut streams))?;
            x = next;
            probs = Some(p);
        }
        Ok(probs.expect("n_steps >= 1"))
    }
}
