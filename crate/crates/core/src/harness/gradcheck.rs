use crate::data::{Batch, Encoded};
use crate::encoder::{BoundEncoder, Encoder, EncoderConfig, Param, Phase};
use crate::error::Result;
use crate::mixup::{baseline_step, mixup_step, MixMode, MixStreams, MixupConfig};
use crate::tensor::{compare_with_finite_differences, GradReport, Rng, Stream, Tensor};

/// A small encoder, a random padded batch, and a loss to check end to end.
pub struct GradcheckCase {
    pub model: Encoder,
    pub batch: Batch,
    pub mixup: MixupConfig,
    pub seed: u64,
}

impl GradcheckCase {
    /// 2 layers, width 8, 3 classes; weights drawn wider than the usual init
    /// so every path carries signal.
    pub fn random(seed: u64, mixup: MixupConfig) -> Result<Self> {
        let cfg = EncoderConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            vocab_size: 12,
            n_classes: 3,
            dropout_rate: 0.0,
        };
        let mut rng = Rng::stream(seed, Stream::Custom(1));
        let base = Encoder::new(cfg.clone(), &mut rng)?;
        let params: Vec<Param> = base
            .params()
            .iter()
            .map(|p| Param {
                name: p.name.clone(),
                shape: p.shape.clone(),
                values: p.values.iter().map(|_| rng.normal() * 0.5).collect(),
            })
            .collect();
        let model = Encoder::from_params(cfg, params)?;
        let items: Vec<Encoded> = (0..4)
            .map(|_| {
                let len = 3 + rng.below(5);
                Encoded {
                    ids: (0..len).map(|_| rng.below(12)).collect(),
                    label: rng.below(3),
                }
            })
            .collect();
        let batch = Batch::from_encoded(&items.iter().collect::<Vec<_>>(), 3)?;
        Ok(GradcheckCase {
            model,
            batch,
            mixup,
            seed,
        })
    }

    pub fn loss(&self, bound: &BoundEncoder) -> Result<Tensor> {
        if self.mixup.mode == MixMode::None {
            return baseline_step(bound, &self.batch, &mut Phase::Eval);
        }
        let mut streams = MixStreams::new(self.seed);
        mixup_step(
            bound,
            &self.batch,
            &self.mixup,
            &mut streams,
            &mut Phase::Eval,
            self.batch.len,
        )
        .map(|(l, _)| l)
    }

    /// Central differences against backprop over every parameter tensor.
    pub fn check(&self, step: f64, tol: f64, max_coords: Option<usize>) -> Result<GradReport> {
        let bound = self.model.bind();
        self.loss(&bound)?.backward()?;
        let analytic = bound.grads();
        let values: Vec<Vec<f64>> = self
            .model
            .params()
            .iter()
            .map(|p| p.values.clone())
            .collect();
        let cfg = self.model.config().clone();
        let names: Vec<(String, Vec<usize>)> = self
            .model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect();
        compare_with_finite_differences(
            &values,
            &analytic,
            |vals| {
                let params = names
                    .iter()
                    .zip(vals)
                    .map(|((name, shape), v)| Param {
                        name: name.clone(),
                        shape: shape.clone(),
                        values: v.clone(),
                    })
                    .collect();
                let m = Encoder::from_params(cfg.clone(), params)?;
                self.loss(&m.bind_frozen())?.item()
            },
            step,
            tol,
            max_coords,
        )
    }
}
