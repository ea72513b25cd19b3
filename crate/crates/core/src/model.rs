//! Backbone feature extractor, expression head and AU head.
//!
//! Stage one trains the backbone together with a single linear expression
//! head. [`transfer_backbone`] then carries the backbone over, drops the
//! expression head and attaches a freshly initialised three-layer AU head.

use rand_distr::{Distribution, Uniform};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeds::{self, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub backbone_layers: Vec<usize>,
    pub num_expressions: usize,
    pub num_aus: usize,
    /// Widths of the AU head's two hidden layers.
    pub au_head_hidden: Vec<usize>,
    pub freeze_backbone_in_stage2: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 64,
            backbone_layers: vec![128, 64],
            num_expressions: 6,
            num_aus: 12,
            au_head_hidden: vec![32, 16],
            freeze_backbone_in_stage2: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.au_head_hidden.len() != 2 {
            return Err(Error::contract(format!(
                "AU head needs exactly two hidden layers, got {}",
                self.au_head_hidden.len()
            )));
        }
        if self.backbone_layers.is_empty() {
            return Err(Error::contract("backbone needs at least one layer"));
        }
        let widths = [self.input_dim, self.num_expressions, self.num_aus];
        if widths
            .iter()
            .chain(&self.backbone_layers)
            .chain(&self.au_head_hidden)
            .any(|&w| w == 0)
        {
            return Err(Error::contract("all layer widths must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.backbone_layers.last().unwrap_or(&self.input_dim)
    }

    fn backbone_dims(&self) -> Vec<(usize, usize)> {
        chain_dims(self.input_dim, &self.backbone_layers)
    }

    fn expr_dims(&self) -> Vec<(usize, usize)> {
        vec![(self.feature_dim(), self.num_expressions)]
    }

    fn au_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = self.au_head_hidden.clone();
        widths.push(self.num_aus);
        chain_dims(self.feature_dim(), &widths)
    }

    /// Weights plus biases of all three blocks.
    pub fn parameter_count(&self) -> usize {
        [self.backbone_dims(), self.expr_dims(), self.au_dims()]
            .iter()
            .flatten()
            .map(|(i, o)| i * o + o)
            .sum()
    }
}

fn chain_dims(input: usize, widths: &[usize]) -> Vec<(usize, usize)> {
    let mut prev = input;
    widths
        .iter()
        .map(|&w| {
            let d = (prev, w);
            prev = w;
            d
        })
        .collect()
}

/// `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: Tensor::zeros(vec![fan_in, fan_out])?,
            bias: Tensor::zeros(vec![fan_out])?,
        })
    }

    fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Ok(Linear {
            weight: Tensor::matrix(fan_in, fan_out, data)?,
            bias: Tensor::zeros(vec![fan_out])?,
        })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// A stack of linear layers sharing one trainability flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub layers: Vec<Linear>,
    pub trainable: bool,
}

impl Block {
    fn init(dims: &[(usize, usize)], seed: u64, tag: u64) -> Result<Self> {
        let mut rng = seeds::rng(seed, tag);
        let layers = dims
            .iter()
            .map(|&(i, o)| Linear::glorot(i, o, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Block {
            layers,
            trainable: true,
        })
    }

    pub fn dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.fan_in(), l.fan_out())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn bind(&self, tape: &mut Tape) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|l| {
                if self.trainable {
                    (tape.leaf(l.weight.detached()), tape.leaf(l.bias.detached()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect()
    }

    fn pull_grads(&mut self, tape: &Tape, vars: &[(Var, Var)]) {
        if !self.trainable {
            return;
        }
        for (layer, &(w, b)) in self.layers.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(w) {
                layer.weight.accumulate_grad(g);
            }
            if let Some(g) = tape.grad(b) {
                layer.bias.accumulate_grad(g);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    pub backbone: Block,
    /// Single linear map; absent after transfer.
    pub expr_head: Option<Block>,
    /// Two hidden layers plus the output layer.
    pub au_head: Option<Block>,
}

/// Tape handles for one binding of [`ModelParameters`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    backbone: Vec<(Var, Var)>,
    expr_head: Option<Vec<(Var, Var)>>,
    au_head: Option<Vec<(Var, Var)>>,
}

impl ModelParameters {
    pub fn blocks(&self) -> impl Iterator<Item = (&'static str, &Block)> {
        std::iter::once(("backbone", &self.backbone))
            .chain(self.expr_head.as_ref().map(|b| ("expr", b)))
            .chain(self.au_head.as_ref().map(|b| ("au", b)))
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block> {
        std::iter::once(&mut self.backbone)
            .chain(self.expr_head.as_mut())
            .chain(self.au_head.as_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().map(|(_, b)| b.parameter_count()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.layers[0].fan_in()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.layers.last().map_or(0, Linear::fan_out)
    }

    pub fn num_aus(&self) -> Option<usize> {
        self.au_head
            .as_ref()
            .and_then(|b| b.layers.last())
            .map(Linear::fan_out)
    }

    pub fn num_expressions(&self) -> Option<usize> {
        self.expr_head
            .as_ref()
            .and_then(|b| b.layers.last())
            .map(Linear::fan_out)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.blocks_mut().flat_map(Block::tensors_mut)
    }

    pub fn zero_grad(&mut self) {
        crate::diffcore::zero_grad(self.tensors_mut());
    }

    /// Checks that every present block has the shapes `config` prescribes.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let mismatch = |what: &str, have: Vec<(usize, usize)>, want: Vec<(usize, usize)>| {
            Error::Transfer(format!("{what} shapes {have:?} do not match config {want:?}"))
        };
        if self.backbone.dims() != config.backbone_dims() {
            return Err(mismatch("backbone", self.backbone.dims(), config.backbone_dims()));
        }
        if let Some(b) = &self.expr_head {
            if b.dims() != config.expr_dims() {
                return Err(mismatch("expression head", b.dims(), config.expr_dims()));
            }
        }
        if let Some(b) = &self.au_head {
            if b.dims() != config.au_dims() {
                return Err(mismatch("AU head", b.dims(), config.au_dims()));
            }
        }
        Ok(())
    }

    /// Registers the parameters on `tape`; frozen blocks become constants.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            backbone: self.backbone.bind(tape),
            expr_head: self.expr_head.as_ref().map(|b| b.bind(tape)),
            au_head: self.au_head.as_ref().map(|b| b.bind(tape)),
        }
    }

    /// Accumulates the tape's leaf gradients into the trainable blocks.
    pub fn pull_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        self.backbone.pull_grads(tape, &bound.backbone);
        if let (Some(b), Some(v)) = (&mut self.expr_head, &bound.expr_head) {
            b.pull_grads(tape, v);
        }
        if let (Some(b), Some(v)) = (&mut self.au_head, &bound.au_head) {
            b.pull_grads(tape, v);
        }
    }
}

pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ModelParameters> {
    config.validate()?;
    Ok(ModelParameters {
        backbone: Block::init(&config.backbone_dims(), seed, stream::BACKBONE)?,
        expr_head: Some(Block::init(&config.expr_dims(), seed, stream::EXPR_HEAD)?),
        au_head: Some(Block::init(&config.au_dims(), seed, stream::AU_HEAD)?),
    })
}

fn linear(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_bias(h, b)
}

fn check_width(op: &'static str, tape: &Tape, x: Var, want: usize) -> Result<()> {
    let t = tape.value(x);
    if t.shape().len() != 2 || t.cols() != want {
        return Err(Error::dim(op, t.shape(), &[want]));
    }
    Ok(())
}

/// Backbone on the tape: linear→ReLU for every configured layer.
pub fn features(tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
    let want = tape.value(bound.backbone[0].0).rows();
    check_width("forward_features", tape, x, want)?;
    let mut h = x;
    for &layer in &bound.backbone {
        h = linear(tape, h, layer)?;
        h = tape.relu(h);
    }
    Ok(h)
}

pub fn expression_logits(tape: &mut Tape, bound: &BoundParams, features: Var) -> Result<Var> {
    let head = bound
        .expr_head
        .as_ref()
        .ok_or_else(|| Error::contract("model has no expression head"))?;
    check_width("forward_expression", tape, features, tape.value(head[0].0).rows())?;
    linear(tape, features, head[0])
}

/// AU head on the tape: linear→ReLU→linear→ReLU→linear.
pub fn au_logits(tape: &mut Tape, bound: &BoundParams, features: Var) -> Result<Var> {
    let head = bound
        .au_head
        .as_ref()
        .ok_or_else(|| Error::contract("model has no AU head"))?;
    check_width("forward_au", tape, features, tape.value(head[0].0).rows())?;
    let mut h = features;
    for (i, &layer) in head.iter().enumerate() {
        h = linear(tape, h, layer)?;
        if i + 1 < head.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn eval<F>(params: &ModelParameters, x: &Tensor, f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Tape, &BoundParams, Var) -> Result<Var>,
{
    let mut frozen = params.clone();
    frozen.blocks_mut().for_each(|b| b.trainable = false);
    let mut tape = Tape::new();
    let bound = frozen.bind(&mut tape);
    let input = tape.constant(x.clone());
    let out = f(&mut tape, &bound, input)?;
    Ok(tape.value(out).detached())
}

pub fn forward_features(params: &ModelParameters, x: &Tensor) -> Result<Tensor> {
    eval(params, x, features)
}

pub fn forward_expression(params: &ModelParameters, features: &Tensor) -> Result<Tensor> {
    eval(params, features, expression_logits)
}

pub fn forward_au(params: &ModelParameters, features: &Tensor) -> Result<Tensor> {
    eval(params, features, au_logits)
}

/// Copies the backbone of `pretrained` and attaches a fresh AU head drawn
/// exactly as [`init_parameters`] would draw it for `seed`.
pub fn transfer_backbone(
    pretrained: &ModelParameters,
    target: &ModelConfig,
    seed: u64,
) -> Result<ModelParameters> {
    target.validate()?;
    if pretrained.backbone.dims() != target.backbone_dims() {
        return Err(Error::Transfer(format!(
            "pretrained backbone {:?} does not match target backbone {:?}",
            pretrained.backbone.dims(),
            target.backbone_dims()
        )));
    }
    let mut backbone = pretrained.backbone.clone();
    for t in backbone.tensors_mut() {
        *t = t.detached();
    }
    backbone.trainable = !target.freeze_backbone_in_stage2;
    Ok(ModelParameters {
        backbone,
        expr_head: None,
        au_head: Some(Block::init(&target.au_dims(), seed, stream::AU_HEAD)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dim: 5,
            backbone_layers: vec![7, 4],
            num_expressions: 3,
            num_aus: 6,
            au_head_hidden: vec![5, 3],
            freeze_backbone_in_stage2: false,
        }
    }

    fn input(rows: usize, cols: usize, salt: f64) -> Tensor {
        let data = (0..rows * cols)
            .map(|i| (i as f64 * 0.731 + salt).sin() * 2.0)
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let c = ModelConfig {
            au_head_hidden: vec![32],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            backbone_layers: vec![128, 0],
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let c = ModelConfig::default();
        let a = init_parameters(&c, 3).unwrap();
        let b = init_parameters(&c, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_parameters(&c, 4).unwrap());
        for (_, block) in a.blocks() {
            for l in &block.layers {
                assert!(l.bias.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_weights_are_within_glorot_limit_and_centered() {
        let c = ModelConfig {
            input_dim: 128,
            backbone_layers: vec![128],
            ..ModelConfig::default()
        };
        let p = init_parameters(&c, 11).unwrap();
        let w = &p.backbone.layers[0].weight;
        let limit = (6.0f64 / 256.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        let n = w.len() as f64;
        assert!(n >= 1e4);
        let mean = w.data().iter().sum::<f64>() / n;
        let sigma = limit / (3.0 * n).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean} sigma {sigma}");
    }

    #[test]
    fn parameter_count_closed_form() {
        let c = ModelConfig::default();
        let p = init_parameters(&c, 0).unwrap();
        let expected = (64 * 128 + 128) + (128 * 64 + 64) + (64 * 6 + 6) + (64 * 32 + 32) + (32 * 16 + 16) + (16 * 12 + 12);
        assert_eq!(c.parameter_count(), expected);
        assert_eq!(p.parameter_count(), expected);
        // the AU head is exactly three linear maps
        let au = p.au_head.as_ref().unwrap();
        assert_eq!(au.dims(), vec![(64, 32), (32, 16), (16, 12)]);
        assert_eq!(p.expr_head.as_ref().unwrap().layers.len(), 1);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let c = small_config();
        let mut p = init_parameters(&c, 1).unwrap();
        for t in p.backbone.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let f = forward_features(&p, &input(3, 5, 0.2)).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert_eq!(f.shape(), &[3, 4]);
    }

    #[test]
    fn batch_consistency() {
        let p = init_parameters(&small_config(), 2).unwrap();
        let x = input(2, 5, 0.9);
        let both = forward_au(&p, &forward_features(&p, &x).unwrap()).unwrap();
        for i in 0..2 {
            let xi = x.select_rows(&[i]).unwrap();
            let one = forward_au(&p, &forward_features(&p, &xi).unwrap()).unwrap();
            assert_eq!(one.data(), both.row(i));
        }
    }

    #[test]
    fn single_layer_hand_case() {
        let c = ModelConfig {
            input_dim: 2,
            backbone_layers: vec![2],
            ..small_config()
        };
        let mut p = init_parameters(&c, 0).unwrap();
        p.backbone.layers[0].weight = Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 1.0]).unwrap();
        p.backbone.layers[0].bias = Tensor::vector(vec![0.25, -1.0]).unwrap();
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.0]).unwrap();
        // [1,2]: [1+1+.25, -2+2-1] = [2.25, -1] -> [2.25, 0]
        // [-1,0]: [-1+.25, 2-1] = [-0.75, 1] -> [0, 1]
        let f = forward_features(&p, &x).unwrap();
        assert_eq!(f.data(), &[2.25, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn expression_head_cases() {
        let c = ModelConfig {
            input_dim: 2,
            backbone_layers: vec![2],
            num_expressions: 3,
            ..small_config()
        };
        let mut p = init_parameters(&c, 0).unwrap();
        let feats = Tensor::matrix(1, 2, vec![2.0, -3.0]).unwrap();

        let head = &mut p.expr_head.as_mut().unwrap().layers[0];
        head.weight = Tensor::zeros(vec![2, 3]).unwrap();
        assert!(forward_expression(&p, &feats).unwrap().data().iter().all(|&v| v == 0.0));

        let head = &mut p.expr_head.as_mut().unwrap().layers[0];
        head.weight = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(forward_expression(&p, &feats).unwrap().data(), &[2.0, -3.0, 0.0]);

        let head = &mut p.expr_head.as_mut().unwrap().layers[0];
        head.weight = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        head.bias = Tensor::vector(vec![0.5, 0.0, -0.5]).unwrap();
        // [2·1-3·4+.5, 2·2-3·5, 2·3-3·6-.5]
        assert_eq!(forward_expression(&p, &feats).unwrap().data(), &[-9.5, -11.0, -12.5]);
    }

    #[test]
    fn zero_final_au_layer_gives_zero_logits() {
        let mut p = init_parameters(&small_config(), 5).unwrap();
        let last = p.au_head.as_mut().unwrap().layers.last_mut().unwrap();
        last.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let f = forward_features(&p, &input(4, 5, 1.3)).unwrap();
        assert!(forward_au(&p, &f).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let p = init_parameters(&small_config(), 5).unwrap();
        assert!(matches!(
            forward_features(&p, &input(2, 4, 0.0)),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            forward_au(&p, &input(2, 5, 0.0)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn transfer_copies_backbone_and_reinitialises_au_head() {
        let c = small_config();
        let mut pre = init_parameters(&c, 1).unwrap();
        pre.backbone.layers[1].bias.data_mut()[0] = 0.75;
        let t = transfer_backbone(&pre, &c, 9).unwrap();
        let x = input(3, 5, 0.4);
        assert_eq!(forward_features(&t, &x).unwrap(), forward_features(&pre, &x).unwrap());
        assert_eq!(t.au_head, init_parameters(&c, 9).unwrap().au_head);
        assert!(t.expr_head.is_none());
        assert!(t.backbone.trainable);

        let frozen = ModelConfig {
            freeze_backbone_in_stage2: true,
            ..c.clone()
        };
        assert!(!transfer_backbone(&pre, &frozen, 9).unwrap().backbone.trainable);

        let wider = ModelConfig {
            backbone_layers: vec![7, 5],
            ..c
        };
        assert!(matches!(
            transfer_backbone(&pre, &wider, 9),
            Err(Error::Transfer(_))
        ));
    }

    #[test]
    fn au_output_depends_on_backbone() {
        let c = small_config();
        let pre = init_parameters(&c, 1).unwrap();
        let mut t = transfer_backbone(&pre, &c, 2).unwrap();
        let x = input(3, 5, 0.1);
        let before = forward_au(&t, &forward_features(&t, &x).unwrap()).unwrap();
        t.backbone.layers[0].weight.data_mut()[0] += 0.5;
        t.backbone.layers[1].bias.data_mut()[0] += 0.5;
        let after = forward_au(&t, &forward_features(&t, &x).unwrap()).unwrap();
        assert_ne!(before, after);
    }
}
