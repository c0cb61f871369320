//! Building blocks: linear and convolutional layers, layer norm, multi-head
//! self-attention, the three ways attention output rejoins the main path,
//! and the stacked convolutional encoder block.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Whether a forward pass is training (dropout active) or inference.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

fn maybe_dropout(g: &mut Graph<'_>, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    match mode {
        Mode::Train(rng) if p > 0.0 => g.dropout(x, p, *rng),
        _ => Ok(x),
    }
}

/// Dense map `x W + b` applied to every row.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), &[in_dim, out_dim], in_dim, out_dim, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), &[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// One convolution over time with `width` taps. Odd widths pad symmetrically;
/// even widths put the extra zero on the left.
#[derive(Clone, Debug)]
pub struct Conv1dLayer {
    kernel: ParamId,
    bias: ParamId,
    pub width: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Conv1dLayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let kernel = store.add_glorot(
            format!("{name}.kernel"),
            &[width, in_dim, out_dim],
            width * in_dim,
            width * out_dim,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), &[out_dim]);
        Conv1dLayer {
            kernel,
            bias,
            width,
            in_dim,
            out_dim,
        }
    }

    pub fn pad_left(&self) -> usize {
        self.width / 2
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let k = g.param(self.kernel);
        let b = g.param(self.bias);
        g.conv1d_padded(x, k, b, self.pad_left())
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.kernel, self.bias]
    }

    pub fn kernel(&self) -> ParamId {
        self.kernel
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), true),
            bias: store.add_zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

#[derive(Clone, Debug)]
struct Head {
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

/// Multi-head scaled dot-product self-attention. Heads are concatenated
/// without an output projection, so the output width is `heads × head_dim`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    heads: Vec<Head>,
    pub head_dim: usize,
    pub in_dim: usize,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || head_dim == 0 {
            return Err(Error::Config("self-attention needs at least one head of positive width".into()));
        }
        let mut proj = |kind: &str, h: usize| {
            store.add_glorot(format!("{name}.head{h}.{kind}"), &[in_dim, head_dim], in_dim, head_dim, rng)
        };
        let heads = (0..heads)
            .map(|h| Head {
                query: proj("query", h),
                key: proj("key", h),
                value: proj("value", h),
            })
            .collect();
        Ok(SelfAttention {
            heads,
            head_dim,
            in_dim,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn out_dim(&self) -> usize {
        self.heads.len() * self.head_dim
    }

    /// `x[T×in] → [T×heads·head_dim]`; keys at masked positions get zero weight.
    pub fn self_attend(&self, g: &mut Graph<'_>, x: Var, mask: &[bool]) -> Result<Var> {
        let t = g.shape(x)[0];
        if mask.len() != t {
            return Err(Error::shape(
                "self_attend",
                format!("mask of length {} for sequence of {t}", mask.len()),
            ));
        }
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (wq, wk, wv) = (g.param(head.query), g.param(head.key), g.param(head.value));
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores, Some(mask))?;
            outs.push(g.matmul(weights, v)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat(&outs)
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(|h| [h.query, h.key, h.value]).collect()
    }
}

/// How attention output `SA(X)` rejoins the convolutional output `X`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bypass {
    /// `Y = SA(X)`
    None,
    /// `Y = SA(X) + X`
    Residual,
    /// `Y = [SA(X), X]`
    Dense,
}

impl fmt::Display for Bypass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bypass::None => "none",
            Bypass::Residual => "residual",
            Bypass::Dense => "dense",
        })
    }
}

impl FromStr for Bypass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Bypass::None),
            "residual" => Ok(Bypass::Residual),
            "dense" => Ok(Bypass::Dense),
            other => Err(Error::Config(format!("unknown bypass {other:?} (none|residual|dense)"))),
        }
    }
}

impl Bypass {
    /// Output width given attention width `a` and input width `h`.
    pub fn out_dim(self, a: usize, h: usize) -> Result<usize> {
        match self {
            Bypass::None => Ok(a),
            Bypass::Residual if a == h => Ok(h),
            Bypass::Residual => Err(Error::Config(format!(
                "residual bypass needs attention width {a} to equal channel width {h}"
            ))),
            Bypass::Dense => Ok(a + h),
        }
    }
}

pub fn apply_bypass(g: &mut Graph<'_>, variant: Bypass, attn_out: Var, x: Var) -> Result<Var> {
    let a = g.value(attn_out).last_dim();
    let h = g.value(x).last_dim();
    variant.out_dim(a, h)?;
    match variant {
        Bypass::None => Ok(attn_out),
        Bypass::Residual => g.add(attn_out, x),
        Bypass::Dense => g.concat(&[attn_out, x]),
    }
}

/// Where self-attention sits inside an encoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionPosition {
    /// After the last convolution.
    End,
    /// After convolution number `n` (1-based).
    AfterLayer(usize),
}

impl fmt::Display for AttentionPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionPosition::End => f.write_str("end"),
            AttentionPosition::AfterLayer(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for AttentionPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end" => Ok(AttentionPosition::End),
            n => n
                .parse()
                .ok()
                .filter(|&n: &usize| n > 0)
                .map(AttentionPosition::AfterLayer)
                .ok_or_else(|| Error::Config(format!("attention position {s:?} is neither \"end\" nor a layer number"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub head_dim: usize,
    pub bypass: Bypass,
    pub position: AttentionPosition,
}

/// Shape and regularisation of one [`ConvEncoderBlock`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderSpec {
    pub in_dim: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub kernel_width: usize,
    pub layer_norm: bool,
    pub attention: Option<AttentionSpec>,
    /// Dropout before every convolution.
    pub conv_dropout: f64,
    /// Dropout on the block output.
    pub output_dropout: f64,
}

#[derive(Clone, Debug)]
struct AttentionInsert {
    attention: SelfAttention,
    bypass: Bypass,
    after_layer: usize,
    norm: Option<LayerNorm>,
}

/// Input projection (when the input width differs from `hidden`), then
/// `num_layers` convolution + ReLU layers with optional layer norm and one
/// optional self-attention insert. Padding rows are zeroed after every layer.
#[derive(Clone, Debug)]
pub struct ConvEncoderBlock {
    input_proj: Option<Linear>,
    convs: Vec<Conv1dLayer>,
    norms: Vec<LayerNorm>,
    attention: Option<AttentionInsert>,
    spec: EncoderSpec,
    out_dim: usize,
}

impl ConvEncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, spec: EncoderSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.kernel_width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "encoder kernel width must be odd, got {}",
                spec.kernel_width
            )));
        }
        if spec.num_layers == 0 || spec.hidden == 0 || spec.in_dim == 0 {
            return Err(Error::Config("encoder needs positive width and at least one layer".into()));
        }
        let after_layer = match spec.attention.map(|a| a.position) {
            Some(AttentionPosition::AfterLayer(n)) if n > spec.num_layers => {
                return Err(Error::Config(format!(
                    "attention after layer {n} but the block has {} layers",
                    spec.num_layers
                )))
            }
            Some(AttentionPosition::AfterLayer(n)) => n,
            _ => spec.num_layers,
        };
        let attn_width = match spec.attention {
            Some(a) => Some(a.bypass.out_dim(a.heads * a.head_dim, spec.hidden)?),
            None => None,
        };

        let input_proj =
            (spec.in_dim != spec.hidden).then(|| Linear::new(store, &format!("{name}.input_proj"), spec.in_dim, spec.hidden, true, rng));
        let mut convs = Vec::with_capacity(spec.num_layers);
        let mut norms = Vec::new();
        let mut width = spec.hidden;
        let mut attention = None;
        for layer in 1..=spec.num_layers {
            if spec.layer_norm {
                norms.push(LayerNorm::new(store, &format!("{name}.norm{layer}"), width));
            }
            convs.push(Conv1dLayer::new(
                store,
                &format!("{name}.conv{layer}"),
                spec.kernel_width,
                width,
                spec.hidden,
                rng,
            ));
            width = spec.hidden;
            if let (Some(a), true) = (spec.attention, layer == after_layer) {
                let norm = spec.layer_norm.then(|| LayerNorm::new(store, &format!("{name}.attn_norm"), width));
                let sa = SelfAttention::new(store, &format!("{name}.attn"), width, a.heads, a.head_dim, rng)?;
                attention = Some(AttentionInsert {
                    attention: sa,
                    bypass: a.bypass,
                    after_layer,
                    norm,
                });
                width = attn_width.expect("set with attention");
            }
        }
        Ok(ConvEncoderBlock {
            input_proj,
            convs,
            norms,
            attention,
            spec,
            out_dim: width,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Changes dropout rates; parameters are untouched.
    pub fn set_dropout(&mut self, conv: f64, output: f64) {
        self.spec.conv_dropout = conv;
        self.spec.output_dropout = output;
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn self_attention(&self) -> Option<&SelfAttention> {
        self.attention.as_ref().map(|a| &a.attention)
    }

    pub fn encode(&self, g: &mut Graph<'_>, x: Var, mask: &[bool], mode: &mut Mode<'_>) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[0] != mask.len() || g.shape(x)[1] != self.spec.in_dim {
            return Err(Error::shape(
                "encode",
                format!(
                    "input {:?} with mask of {} does not fit a block expecting width {}",
                    g.shape(x),
                    mask.len(),
                    self.spec.in_dim
                ),
            ));
        }
        let projected = match &self.input_proj {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        let mut h = g.mask_rows(projected, mask)?;
        for (i, conv) in self.convs.iter().enumerate() {
            if let Some(norm) = self.norms.get(i) {
                let y = norm.forward(g, h)?;
                h = g.mask_rows(y, mask)?;
            }
            h = maybe_dropout(g, h, self.spec.conv_dropout, mode)?;
            let y = conv.forward(g, h)?;
            let y = g.relu(y);
            h = g.mask_rows(y, mask)?;
            if let Some(a) = self.attention.as_ref().filter(|a| a.after_layer == i + 1) {
                let input = match &a.norm {
                    Some(n) => {
                        let y = n.forward(g, h)?;
                        g.mask_rows(y, mask)?
                    }
                    None => h,
                };
                let attn = a.attention.self_attend(g, input, mask)?;
                let y = apply_bypass(g, a.bypass, attn, h)?;
                h = g.mask_rows(y, mask)?;
            }
        }
        maybe_dropout(g, h, self.spec.output_dropout, mode)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.input_proj.iter().flat_map(Linear::params).collect();
        ids.extend(self.convs.iter().flat_map(Conv1dLayer::params));
        ids.extend(self.norms.iter().flat_map(LayerNorm::params));
        if let Some(a) = &self.attention {
            ids.extend(a.attention.params());
            ids.extend(a.norm.iter().flat_map(LayerNorm::params));
        }
        ids
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.params().iter().map(|&id| store.value(id).numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn spec(in_dim: usize, hidden: usize, attention: Option<AttentionSpec>) -> EncoderSpec {
        EncoderSpec {
            in_dim,
            hidden,
            num_layers: 4,
            kernel_width: 3,
            layer_norm: false,
            attention,
            conv_dropout: 0.0,
            output_dropout: 0.0,
        }
    }

    #[test]
    fn linear_10_to_5_has_55_params() {
        let mut store = ParamStore::new();
        Linear::new(&mut store, "fc", 10, 5, true, &mut rng());
        assert_eq!(store.num_trainable(), 55);
    }

    #[test]
    fn encode_output_widths() {
        let mut store = ParamStore::new();
        let plain = ConvEncoderBlock::new(&mut store, "a", spec(100, 128, None), &mut rng()).unwrap();
        let dense = ConvEncoderBlock::new(
            &mut store,
            "b",
            spec(
                100,
                128,
                Some(AttentionSpec {
                    heads: 4,
                    head_dim: 32,
                    bypass: Bypass::Dense,
                    position: AttentionPosition::End,
                }),
            ),
            &mut rng(),
        )
        .unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::uniform(&[6, 100], 1.0, &mut rng()));
        let mask = [true; 6];
        let y = plain.encode(&mut g, x, &mask, &mut Mode::Eval).unwrap();
        assert_eq!(g.shape(y), &[6, 128]);
        let y = dense.encode(&mut g, x, &mask, &mut Mode::Eval).unwrap();
        assert_eq!(g.shape(y), &[6, 256]);
        assert_eq!(dense.out_dim(), 256);
    }

    #[test]
    fn masked_positions_are_zero() {
        let mut store = ParamStore::new();
        let block = ConvEncoderBlock::new(&mut store, "a", spec(8, 8, None), &mut rng()).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::uniform(&[5, 8], 1.0, &mut rng()));
        let mask = [false, false, true, false, false];
        let y = block.encode(&mut g, x, &mask, &mut Mode::Eval).unwrap();
        for (t, &m) in mask.iter().enumerate() {
            if !m {
                assert!(g.value(y).row(t).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn residual_needs_matching_width() {
        let mut store = ParamStore::new();
        let bad = AttentionSpec {
            heads: 4,
            head_dim: 8,
            bypass: Bypass::Residual,
            position: AttentionPosition::End,
        };
        assert!(matches!(
            ConvEncoderBlock::new(&mut store, "a", spec(16, 16, Some(bad)), &mut rng()),
            Err(Error::Config(_))
        ));
        let ok = AttentionSpec { head_dim: 4, ..bad };
        assert!(ConvEncoderBlock::new(&mut store, "b", spec(16, 16, Some(ok)), &mut rng()).is_ok());
    }

    #[test]
    fn self_attention_shapes_and_single_token() {
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, "sa", 128, 4, 32, &mut rng()).unwrap();
        let value0 = store.value(sa.params()[2]).clone();
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::uniform(&[7, 128], 1.0, &mut rng()));
        let y = sa.self_attend(&mut g, x, &[true; 7]).unwrap();
        assert_eq!(g.shape(y), &[7, 128]);

        let one = Tensor::uniform(&[1, 128], 1.0, &mut rng());
        let x1 = g.constant(one.clone());
        let y1 = sa.self_attend(&mut g, x1, &[true]).unwrap();
        let w = g.constant(value0);
        let v = g.matmul(x1, w).unwrap();
        assert_eq!(&g.value(y1).data()[..32], g.value(v).data());
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, "sa", 6, 2, 3, &mut rng()).unwrap();
        let row = Tensor::uniform(&[6], 1.0, &mut rng()).into_data();
        let x = Tensor::from_rows(&vec![row; 5]);
        let mut g = Graph::with_params(&store);
        let x = g.constant(x);
        let y = sa.self_attend(&mut g, x, &[true; 5]).unwrap();
        let out = g.value(y);
        for t in 1..5 {
            assert_eq!(out.row(t), out.row(0));
        }
    }

    #[test]
    fn bypass_contracts() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(&[4, 3], 1.0, &mut rng()));
        let a = g.constant(Tensor::uniform(&[4, 2], 1.0, &mut rng()));
        let dense = apply_bypass(&mut g, Bypass::Dense, a, x).unwrap();
        for t in 0..4 {
            assert_eq!(&g.value(dense).row(t)[2..], g.value(x).row(t));
        }
        let zero = g.constant(Tensor::zeros(&[4, 3]));
        let res = apply_bypass(&mut g, Bypass::Residual, zero, x).unwrap();
        assert_eq!(g.value(res), g.value(x));
        let none = apply_bypass(&mut g, Bypass::None, a, x).unwrap();
        assert_eq!(none, a);
        assert!(apply_bypass(&mut g, Bypass::Residual, a, x).is_err());
    }

    #[test]
    fn parses_variants() {
        assert_eq!("dense".parse::<Bypass>().unwrap(), Bypass::Dense);
        assert!("concat".parse::<Bypass>().is_err());
        assert_eq!("2".parse::<AttentionPosition>().unwrap(), AttentionPosition::AfterLayer(2));
        assert_eq!("end".parse::<AttentionPosition>().unwrap(), AttentionPosition::End);
        assert!("0".parse::<AttentionPosition>().is_err());
    }
}
