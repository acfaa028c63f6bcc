//! MixUp at the input, hidden and pooled-sentence levels.
//!
//! One training step draws a mixing weight `lambda ~ Beta(alpha, alpha)`
//! and a random pairing of the batch, computes representations at layer
//! `k`, replaces every row by `lambda * h_i + (1 - lambda) * h_j(i)`, mixes
//! the one-hot labels with the same weight, and finishes the forward pass
//! from `k`. The batch size is unchanged and the unmixed representations do
//! not enter the loss.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, PAD, SEP, UNUSED};
use crate::encoder::{AttentionMask, BoundEncoder, LayerIndex, Phase};
use crate::error::{Error, Result};
use crate::tensor::{cross_entropy_soft, Rng, Stream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    None,
    Cls,
    Input,
    Manifold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingStrategy {
    None,
    Pair,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadToken {
    Sep,
    Pad,
    Unused,
}

impl PadToken {
    pub fn id(self) -> usize {
        match self {
            PadToken::Sep => SEP,
            PadToken::Pad => PAD,
            PadToken::Unused => UNUSED,
        }
    }
}

macro_rules! text_enum {
    ($ty:ident { $($name:literal => $var:ident),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($ty::$var),)+
                    other => Err(Error::Parse(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$var => $name,)+ })
            }
        }
    };
}

text_enum!(MixMode { "none" => None, "cls" => Cls, "input" => Input, "manifold" => Manifold });
text_enum!(PaddingStrategy { "none" => None, "pair" => Pair, "max" => Max });
text_enum!(PadToken { "sep" => Sep, "pad" => Pad, "unused" => Unused });

/// Augmentation policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    pub mode: MixMode,
    pub alpha: f64,
    /// Eligible layers for manifold mode, sorted and deduplicated.
    pub layer_set: Vec<LayerIndex>,
    pub padding: PaddingStrategy,
    pub pad_token: PadToken,
    /// Fraction of epochs trained without MixUp before it switches on.
    pub start_fraction: f64,
    /// Replaces the Beta draw; for endpoint checks and ablations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_lambda: Option<f64>,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            mode: MixMode::None,
            alpha: 1.0,
            layer_set: Vec::new(),
            padding: PaddingStrategy::Pair,
            pad_token: PadToken::Sep,
            start_fraction: 0.0,
            fixed_lambda: None,
        }
    }
}

impl MixupConfig {
    pub fn none() -> Self {
        MixupConfig::default()
    }

    pub fn cls(alpha: f64) -> Self {
        MixupConfig {
            mode: MixMode::Cls,
            alpha,
            ..Default::default()
        }
    }

    pub fn input(alpha: f64) -> Self {
        MixupConfig {
            mode: MixMode::Input,
            alpha,
            ..Default::default()
        }
    }

    pub fn manifold(alpha: f64, layers: impl IntoIterator<Item = usize>) -> Self {
        let mut layer_set: Vec<LayerIndex> = layers.into_iter().map(LayerIndex).collect();
        layer_set.sort_unstable();
        layer_set.dedup();
        MixupConfig {
            mode: MixMode::Manifold,
            alpha,
            layer_set,
            ..Default::default()
        }
    }

    /// Short label such as `cls` or `manifold[0,1,2]`.
    pub fn variant_name(&self) -> String {
        match self.mode {
            MixMode::Manifold => format!(
                "manifold[{}]",
                self.layer_set
                    .iter()
                    .map(|k| k.0.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            m => m.to_string(),
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.mode != MixMode::None && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Parameter(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.mode == MixMode::Manifold && self.layer_set.is_empty() {
            return Err(Error::Parameter(
                "manifold mode needs a nonempty layer set".into(),
            ));
        }
        for k in &self.layer_set {
            k.check(n_layers)
                .map_err(|e| Error::Parameter(e.to_string()))?;
        }
        if !(0.0..=1.0).contains(&self.start_fraction) {
            return Err(Error::Parameter(format!(
                "start_fraction must be in [0,1], got {}",
                self.start_fraction
            )));
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Parameter(format!("fixed lambda {l} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// First epoch (0-based) that uses MixUp: `ceil(start_fraction * epochs)`.
    pub fn start_epoch(&self, epochs: usize) -> usize {
        (self.start_fraction * epochs as f64).ceil() as usize
    }

    pub fn active_at(&self, epoch: usize, epochs: usize) -> bool {
        self.mode != MixMode::None && epoch >= self.start_epoch(epochs)
    }

    /// Whether some reachable mixing layer sits at token level, so pairs must share a length.
    pub fn mixes_tokens(&self, n_layers: usize) -> bool {
        match self.mode {
            MixMode::Input => true,
            MixMode::Manifold => self.layer_set.iter().any(|k| k.is_token_level(n_layers)),
            MixMode::None | MixMode::Cls => false,
        }
    }
}

/// Natural log of a Gamma(shape, 1) variate (Marsaglia-Tsang; boosted for shape < 1).
fn ln_gamma_variate(shape: f64, rng: &mut Rng) -> f64 {
    if shape < 1.0 {
        let u = rng.uniform_open();
        return ln_gamma_variate(shape + 1.0, rng) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.normal();
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = rng.uniform_open();
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return (d * v).ln();
        }
    }
}

/// One draw from Beta(alpha, alpha) as `X / (X + Y)` with independent Gamma variates.
pub fn sample_lambda(alpha: f64, rng: &mut Rng) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Parameter(format!("alpha must be > 0, got {alpha}")));
    }
    let lx = ln_gamma_variate(alpha, rng);
    let ly = ln_gamma_variate(alpha, rng);
    // X / (X + Y) in log space so tiny shapes cannot underflow to 0/0
    Ok(1.0 / (1.0 + (ly - lx).exp()))
}

/// Uniform permutation `j(.)` of the batch; fixed points allowed.
pub fn pair_batch(batch_size: usize, rng: &mut Rng) -> Vec<usize> {
    rng.permutation(batch_size)
}

/// `lambda * a + (1 - lambda) * b`, differentiable through both operands.
pub fn interpolate(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "cannot interpolate shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("lambda {lambda} outside [0,1]")));
    }
    a.scale(lambda).add(&b.scale(1.0 - lambda))
}

/// Row `i` of the result is `lambda * y_i + (1 - lambda) * y_pairing[i]`.
pub fn mix_labels(one_hot: &[f64], n_classes: usize, pairing: &[usize], lambda: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(one_hot.len());
    for (i, &j) in pairing.iter().enumerate() {
        let yi = &one_hot[i * n_classes..(i + 1) * n_classes];
        let yj = &one_hot[j * n_classes..(j + 1) * n_classes];
        out.extend(
            yi.iter()
                .zip(yj)
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b),
        );
    }
    out
}

/// Uniform draw from `layers`; always consumes exactly one draw.
pub fn select_mix_layer(layers: &[LayerIndex], rng: &mut Rng) -> Result<LayerIndex> {
    if layers.is_empty() {
        return Err(Error::Parameter("empty layer set".into()));
    }
    Ok(layers[rng.below(layers.len())])
}

fn fit(ids: &[usize], target: usize, pad: usize) -> Vec<usize> {
    let mut out = ids.to_vec();
    if out.len() > target {
        // tail truncation keeps CLS and re-appends SEP
        out.truncate(target.saturating_sub(1).max(1));
        out.push(SEP);
    }
    out.resize(target, pad);
    out
}

/// Extends two token sequences to a common length.
///
/// `Pair` pads to the longer of the two, `Max` to `global_max`; both are
/// capped at `max_seq_len`, truncating anything longer. `None` requires
/// the lengths to already agree.
pub fn pad_pair(
    x1: &[usize],
    x2: &[usize],
    strategy: PaddingStrategy,
    pad_token: PadToken,
    global_max: usize,
    max_seq_len: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if x1.is_empty() || x2.is_empty() {
        return Err(Error::Contract("cannot pad an empty sequence".into()));
    }
    let target = match strategy {
        PaddingStrategy::None => {
            if x1.len() != x2.len() {
                return Err(Error::Contract(format!(
                    "padding strategy none needs equal lengths, got {} and {}",
                    x1.len(),
                    x2.len()
                )));
            }
            x1.len()
        }
        PaddingStrategy::Pair => x1.len().max(x2.len()),
        PaddingStrategy::Max => global_max.max(x1.len()).max(x2.len()),
    };
    let target = target.min(max_seq_len);
    let pad = pad_token.id();
    Ok((fit(x1, target, pad), fit(x2, target, pad)))
}

/// Token matrices for the two operands of every pair plus their shared mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedInputs {
    pub first_ids: Vec<usize>,
    pub second_ids: Vec<usize>,
    pub mask: AttentionMask,
}

/// Pads row `i` and its partner `pairing[i]` together; the padded span is attendable.
pub fn pad_batch_pairs(
    batch: &Batch,
    pairing: &[usize],
    strategy: PaddingStrategy,
    pad_token: PadToken,
    global_max: usize,
    max_seq_len: usize,
) -> Result<PairedInputs> {
    let real = |b: usize| &batch.row(b)[..batch.lengths[b]];
    let pairs = pairing
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            pad_pair(
                real(i),
                real(j),
                strategy,
                pad_token,
                global_max,
                max_seq_len,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let len = pairs.iter().map(|(a, _)| a.len()).max().unwrap_or(0);
    let mut first_ids = Vec::with_capacity(pairs.len() * len);
    let mut second_ids = Vec::with_capacity(pairs.len() * len);
    let mut lengths = Vec::with_capacity(pairs.len());
    for (a, b) in &pairs {
        lengths.push(a.len());
        first_ids.extend(a.iter().copied().chain(std::iter::repeat(PAD)).take(len));
        second_ids.extend(b.iter().copied().chain(std::iter::repeat(PAD)).take(len));
    }
    Ok(PairedInputs {
        first_ids,
        second_ids,
        mask: AttentionMask::from_lengths(&lengths, len),
    })
}

/// The independent random streams a MixUp step consumes.
#[derive(Debug, Clone)]
pub struct MixStreams {
    pub lambda: Rng,
    pub pairing: Rng,
    pub layer: Rng,
}

impl MixStreams {
    pub fn new(seed: u64) -> Self {
        MixStreams {
            lambda: Rng::stream(seed, Stream::Lambda),
            pairing: Rng::stream(seed, Stream::Pairing),
            layer: Rng::stream(seed, Stream::Layer),
        }
    }
}

/// A batch after interpolation.
#[derive(Debug, Clone)]
pub struct MixedBatch {
    pub mixed_repr: Tensor,
    /// `[B, n_classes]` row-major.
    pub mixed_labels: Vec<f64>,
    pub lambda: f64,
    pub layer: LayerIndex,
    pub pairing: Vec<usize>,
    /// Mask the mixed rows were continued with.
    pub mask: AttentionMask,
}

/// One MixUp forward pass; returns the soft-label loss and the mixed batch.
///
/// `global_max` is the padded length used by [`PaddingStrategy::Max`].
pub fn mixup_step(
    model: &BoundEncoder,
    batch: &Batch,
    config: &MixupConfig,
    streams: &mut MixStreams,
    phase: &mut Phase,
    global_max: usize,
) -> Result<(Tensor, MixedBatch)> {
    let n = model.config().n_layers;
    config.validate(n)?;
    let lambda = match config.fixed_lambda {
        Some(l) => l,
        None => sample_lambda(config.alpha, &mut streams.lambda)?,
    };
    let pairing = pair_batch(batch.size(), &mut streams.pairing);
    let layer = match config.mode {
        MixMode::None => return Err(Error::Contract("mixup_step called with mode none".into())),
        MixMode::Cls => model.config().pooled_layer(),
        MixMode::Input => LayerIndex::INPUT,
        MixMode::Manifold => select_mix_layer(&config.layer_set, &mut streams.layer)?,
    };

    let (mixed, mask) = if layer.is_token_level(n) {
        let paired = pad_batch_pairs(
            batch,
            &pairing,
            config.padding,
            config.pad_token,
            global_max,
            model.config().max_seq_len,
        )?;
        let h1 = model.forward_to_layer(&paired.first_ids, &paired.mask, layer, phase)?;
        let h2 = model.forward_to_layer(&paired.second_ids, &paired.mask, layer, phase)?;
        (interpolate(&h1, &h2, lambda)?, paired.mask)
    } else {
        let mask = batch.mask();
        let pooled = model.forward_to_layer(&batch.token_ids, &mask, layer, phase)?;
        let partner = pooled.index_select(0, &pairing)?;
        (interpolate(&pooled, &partner, lambda)?, mask)
    };

    let sentence = model.forward_from_layer(&mixed, layer, &mask, phase)?;
    let logits = model.classify(&sentence)?;
    let mixed_labels = mix_labels(&batch.one_hot(), batch.n_classes, &pairing, lambda);
    let loss = cross_entropy_soft(&logits, &mixed_labels)?;
    Ok((
        loss,
        MixedBatch {
            mixed_repr: mixed,
            mixed_labels,
            lambda,
            layer,
            pairing,
            mask,
        },
    ))
}

/// Plain cross-entropy on unmixed data with one-hot labels.
pub fn baseline_step(model: &BoundEncoder, batch: &Batch, phase: &mut Phase) -> Result<Tensor> {
    let logits = model.logits(&batch.token_ids, &batch.mask(), phase)?;
    cross_entropy_soft(&logits, &batch.one_hot())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_rejects_bad_alpha() {
        let mut rng = Rng::new(0);
        assert!(matches!(
            sample_lambda(0.0, &mut rng),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            sample_lambda(-1.0, &mut rng),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn lambda_small_alpha_stays_in_range() {
        let mut rng = Rng::new(2);
        for _ in 0..2000 {
            let l = sample_lambda(0.01, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&l) && l.is_finite());
        }
    }

    #[test]
    fn pairing_is_a_bijection() {
        let mut rng = Rng::new(3);
        assert_eq!(pair_batch(1, &mut rng), vec![0]);
        for n in 1..20 {
            let mut p = pair_batch(n, &mut rng);
            p.sort_unstable();
            assert_eq!(p, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn interpolate_cases() {
        let a = Tensor::new(vec![1.0, 0.0], vec![2]).unwrap();
        let b = Tensor::new(vec![0.0, 1.0], vec![2]).unwrap();
        assert_eq!(interpolate(&a, &b, 1.0).unwrap().values(), a.values());
        assert_eq!(interpolate(&a, &a, 0.3).unwrap().values(), a.values());
        assert_eq!(interpolate(&a, &b, 0.5).unwrap().values(), &[0.5, 0.5]);
        let c = Tensor::new(vec![1.0], vec![1]).unwrap();
        assert!(matches!(interpolate(&a, &c, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn pad_pair_cases() {
        let (a, b) = pad_pair(
            &[2, 7, 3],
            &[2, 7, 8, 9, 3],
            PaddingStrategy::Pair,
            PadToken::Sep,
            0,
            64,
        )
        .unwrap();
        assert_eq!(a, vec![2, 7, 3, SEP, SEP]);
        assert_eq!(b.len(), 5);
        let (a, b) = pad_pair(
            &[2, 5, 6, 3],
            &[2, 8, 9, 3],
            PaddingStrategy::Pair,
            PadToken::Sep,
            0,
            64,
        )
        .unwrap();
        assert_eq!(
            (a.as_slice(), b.as_slice()),
            (&[2, 5, 6, 3][..], &[2, 8, 9, 3][..])
        );
        let (a, b) = pad_pair(
            &[2, 7, 3],
            &[2, 7, 8, 9, 3],
            PaddingStrategy::Max,
            PadToken::Pad,
            9,
            64,
        )
        .unwrap();
        assert_eq!((a.len(), b.len()), (9, 9));
        assert_eq!(a[3..], [PAD; 6]);
        assert!(matches!(
            pad_pair(
                &[2, 3],
                &[2, 5, 3],
                PaddingStrategy::None,
                PadToken::Sep,
                0,
                64
            ),
            Err(Error::Contract(_))
        ));
        let (a, _) = pad_pair(
            &[2, 7, 3],
            &[2, 7, 8, 9, 3],
            PaddingStrategy::Max,
            PadToken::Unused,
            9,
            6,
        )
        .unwrap();
        assert_eq!(a, vec![2, 7, 3, UNUSED, UNUSED, UNUSED]);
    }

    #[test]
    fn layer_selection() {
        let mut rng = Rng::new(4);
        assert!(matches!(
            select_mix_layer(&[], &mut rng),
            Err(Error::Parameter(_))
        ));
        for _ in 0..50 {
            assert_eq!(
                select_mix_layer(&[LayerIndex(0)], &mut rng).unwrap(),
                LayerIndex(0)
            );
            assert_eq!(
                select_mix_layer(&[LayerIndex(5)], &mut rng).unwrap(),
                LayerIndex(5)
            );
        }
    }

    #[test]
    fn mixed_labels_are_distributions() {
        let y = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let m = mix_labels(&y, 2, &[2, 0, 1], 0.3);
        for row in m.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(m[..2], [0.3, 0.7]);
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(MixupConfig::manifold(1.0, []).validate(4).is_err());
        assert!(MixupConfig::manifold(1.0, [6]).validate(4).is_err());
        assert!(MixupConfig::manifold(1.0, [0, 5]).validate(4).is_ok());
        assert!(MixupConfig::cls(0.0).validate(4).is_err());
        assert_eq!("Manifold".parse::<MixMode>().unwrap(), MixMode::Manifold);
        assert_eq!("sep".parse::<PadToken>().unwrap().id(), SEP);
        assert!("wide".parse::<PaddingStrategy>().is_err());
        let mut c = MixupConfig::cls(1.0);
        c.start_fraction = 0.5;
        assert_eq!(c.start_epoch(5), 3);
        assert!(!c.active_at(2, 5) && c.active_at(3, 5));
        assert!(MixupConfig::manifold(1.0, [0, 5]).mixes_tokens(4));
        assert!(!MixupConfig::manifold(1.0, [5]).mixes_tokens(4));
    }
}
