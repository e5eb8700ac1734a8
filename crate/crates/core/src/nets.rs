//! Multilayer perceptrons and the four networks of the model: the two view
//! mappings, the view discriminator and the similarity discriminator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::data::View;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Logistic,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
    pub init_seed: u64,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        output_activation: OutputActivation,
        init_seed: u64,
    ) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            hidden_activation: HiddenActivation::Relu,
            output_activation,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Validation(format!(
                "all layer widths must be >= 1, got {} -> {:?} -> {}",
                self.input_dim, self.hidden_dims, self.output_dim
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Affine layer `y = x W + b` with `W` stored `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Linear>,
}

impl Mlp {
    /// He-style uniform init, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn init(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (6.0 / fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect();
                Linear {
                    weight: Tensor::matrix(fan_in, fan_out, w).expect("sized"),
                    bias: Tensor::zeros(vec![fan_out]),
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<Linear>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::dim("mlp layers", &[dims.len()], &[layers.len()]));
        }
        for ((fi, fo), l) in dims.iter().zip(&layers) {
            if l.weight.shape() != [*fi, *fo] || l.bias.shape() != [*fo] {
                return Err(Error::dim("mlp layer", &[*fi, *fo], l.weight.shape()));
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter tensors in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn zero_output_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.data_mut().fill(0.0);
            last.bias.data_mut().fill(0.0);
        }
    }

    /// SHA-256 over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Records the parameters on `tape`. Frozen parameters are recorded as
    /// constants and never receive gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        BoundMlp {
            input_dim: self.spec.input_dim,
            layers,
            output: self.spec.output_activation,
        }
    }

    /// Tape-free forward pass over a batch (`n x input_dim`) or a single vector.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (n, cols) = match x.shape() {
            [d] => (1, *d),
            [n, d] => (*n, *d),
            s => return Err(Error::dim("mlp input", s, &[self.spec.input_dim])),
        };
        if cols != self.spec.input_dim {
            return Err(Error::dim("mlp input", x.shape(), &[self.spec.input_dim]));
        }
        let last = self.layers.len() - 1;
        let mut h = x.data().to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let (fi, fo) = (l.weight.shape()[0], l.weight.shape()[1]);
            let mut out = kernels::matmul(n, fi, fo, &h, l.weight.data());
            kernels::add_bias_rows(&mut out, l.bias.data());
            if i < last {
                out.iter_mut().for_each(|v| *v = kernels::relu(*v));
            } else if self.spec.output_activation == OutputActivation::Logistic {
                out.iter_mut().for_each(|v| *v = kernels::logistic(*v));
            }
            h = out;
        }
        let shape = if x.shape().len() == 1 {
            vec![self.spec.output_dim]
        } else {
            vec![n, self.spec.output_dim]
        };
        Tensor::new(shape, h)
    }
}

/// An [`Mlp`] whose parameters are recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    input_dim: usize,
    layers: Vec<(Var, Var)>,
    output: OutputActivation,
}

impl BoundMlp {
    /// Forward pass on a batch `x` of shape `n x input_dim`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::dim("mlp input", shape, &[self.input_dim]));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, *w)?;
            let z = tape.add_bias(z, *b)?;
            h = if i < last {
                tape.relu(z)
            } else {
                match self.output {
                    OutputActivation::Identity => z,
                    OutputActivation::Logistic => tape.logistic(z),
                }
            };
        }
        Ok(h)
    }

    /// Parameter handles in the same order as [`Mlp::params`].
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|(w, b)| [*w, *b])
    }
}

/// Per-view mapping into the shared embedding space (`M_s` or `M_t`).
#[derive(Clone, Debug, PartialEq)]
pub struct MappingNet {
    pub view: View,
    pub net: Mlp,
}

impl MappingNet {
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.net.infer(x)
    }

    pub fn embed_dim(&self) -> usize {
        self.net.spec().output_dim
    }
}

/// Binary view classifier; outputs `P(view = source)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewDiscriminator {
    pub net: Mlp,
}

impl ViewDiscriminator {
    /// Probability of the source view for each embedding row.
    pub fn prob(&self, embeddings: &Tensor) -> Result<Tensor> {
        let out = self.net.infer(embeddings)?;
        let n = out.len();
        out.reshape(vec![n])
    }
}

/// Pair scorer over the concatenation `(e_s, e_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDiscriminator {
    pub net: Mlp,
}

impl SimilarityDiscriminator {
    pub fn embed_dim(&self) -> usize {
        self.net.spec().input_dim / 2
    }

    /// Similarity for each row pair of `e_s` and `e_t`.
    pub fn score(&self, e_s: &Tensor, e_t: &Tensor) -> Result<Tensor> {
        if e_s.shape() != e_t.shape() {
            return Err(Error::dim("sim_disc", e_s.shape(), e_t.shape()));
        }
        let rows: Vec<Vec<f64>> = (0..e_s.rows())
            .map(|i| [e_s.row(i), e_t.row(i)].concat())
            .collect();
        let out = self.net.infer(&Tensor::from_rows(&rows)?)?;
        let n = out.len();
        out.reshape(vec![n])
    }
}

/// Records `D_s(e_s, e_t)` for row-aligned pair batches on a tape.
pub fn sim_disc_forward(tape: &mut Tape, d_s: &BoundMlp, e_s: Var, e_t: Var) -> Result<Var> {
    let (a, b) = (tape.value(e_s).shape(), tape.value(e_t).shape());
    if a != b {
        return Err(Error::dim("sim_disc", a, b));
    }
    let pair = tape.concat(&[e_s, e_t])?;
    d_s.forward(tape, pair)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub source_hidden: Vec<usize>,
    pub target_hidden: Vec<usize>,
    pub view_disc_hidden: usize,
    pub sim_disc_hidden: Vec<usize>,
    /// Give `M_t` the same architecture as `M_s` (weights stay independent).
    pub symmetric: bool,
    /// Multiplies the first-layer weights of both mappings at init. Keeps
    /// initial embedding distances near the margin instead of ~10x above it.
    pub map_input_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            source_hidden: vec![64, 48],
            target_hidden: vec![80, 48],
            view_disc_hidden: 64,
            sim_disc_hidden: vec![1024, 2048],
            symmetric: false,
            map_input_gain: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.view_disc_hidden == 0
            || self
                .source_hidden
                .iter()
                .chain(&self.target_hidden)
                .chain(&self.sim_disc_hidden)
                .any(|w| *w == 0)
        {
            return Err(Error::Validation("model widths must be >= 1".into()));
        }
        if !(self.map_input_gain.is_finite() && self.map_input_gain > 0.0) {
            return Err(Error::Validation(format!(
                "map_input_gain must be finite and > 0, got {}",
                self.map_input_gain
            )));
        }
        Ok(())
    }
}

/// Parameter groups that the training stages freeze and update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    SourceMap,
    TargetMap,
    ViewDisc,
    SimDisc,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::SourceMap, Group::TargetMap, Group::ViewDisc, Group::SimDisc];

    pub fn name(self) -> &'static str {
        match self {
            Group::SourceMap => "m_s",
            Group::TargetMap => "m_t",
            Group::ViewDisc => "d_d",
            Group::SimDisc => "d_s",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub source: MappingNet,
    pub target: MappingNet,
    pub view_disc: ViewDiscriminator,
    pub sim_disc: SimilarityDiscriminator,
}

impl Model {
    /// Fresh networks; each gets its own init seed drawn from the init stream.
    pub fn init(config: &ModelConfig, feature_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        // kept below 2^63 so manifests can store them as signed integers
        let seeds: [u64; 4] = std::array::from_fn(|_| rng.random::<u64>() >> 1);
        let e = config.embed_dim;
        let target_hidden = if config.symmetric {
            config.source_hidden.clone()
        } else {
            config.target_hidden.clone()
        };
        let m_s = MlpSpec::new(feature_dim, config.source_hidden.clone(), e, OutputActivation::Identity, seeds[0]);
        let m_t = MlpSpec::new(feature_dim, target_hidden, e, OutputActivation::Identity, seeds[1]);
        let d_d = MlpSpec::new(e, vec![config.view_disc_hidden], 1, OutputActivation::Logistic, seeds[2]);
        let d_s = MlpSpec::new(2 * e, config.sim_disc_hidden.clone(), 1, OutputActivation::Logistic, seeds[3]);
        let mut source = MappingNet { view: View::Source, net: Mlp::init(m_s)? };
        let mut target = MappingNet { view: View::Target, net: Mlp::init(m_t)? };
        for net in [&mut source.net, &mut target.net] {
            for w in net.layers_mut()[0].weight.data_mut() {
                *w *= config.map_input_gain;
            }
        }
        Ok(Self {
            config: config.clone(),
            source,
            target,
            view_disc: ViewDiscriminator { net: Mlp::init(d_d)? },
            sim_disc: SimilarityDiscriminator { net: Mlp::init(d_s)? },
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.source.net.spec().input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn mapping(&self, view: View) -> &MappingNet {
        match view {
            View::Source => &self.source,
            View::Target => &self.target,
        }
    }

    pub fn net(&self, group: Group) -> &Mlp {
        match group {
            Group::SourceMap => &self.source.net,
            Group::TargetMap => &self.target.net,
            Group::ViewDisc => &self.view_disc.net,
            Group::SimDisc => &self.sim_disc.net,
        }
    }

    pub fn net_mut(&mut self, group: Group) -> &mut Mlp {
        match group {
            Group::SourceMap => &mut self.source.net,
            Group::TargetMap => &mut self.target.net,
            Group::ViewDisc => &mut self.view_disc.net,
            Group::SimDisc => &mut self.sim_disc.net,
        }
    }

    pub fn fingerprint(&self, group: Group) -> String {
        self.net(group).fingerprint()
    }
}
