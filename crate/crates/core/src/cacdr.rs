//! CACDR: source and target rating autoencoders joined by a latent mapper.
//!
//! Rows are shared-axis entities (items in item mode, users in user mode),
//! so every network sees vectors over the opposite axis of its own domain.
//! A cold-start entity is predicted as `Dᵗ(F(Eˢ(x)))` from its source row.

use ndarray::{Array2, ArrayView2, Axis as NdAxis};
use serde::{Deserialize, Serialize};

use crate::config::CacdrConfig;
use crate::data::Axis;
use crate::error::{Error, Result};
use crate::numerics::{Activation, DenseNetwork};
use crate::seed::{derive_seed, rng_for, streams};
use crate::train::{fit_chain, LossCurve, TrainViews};

#[derive(Clone, Debug, PartialEq)]
pub struct CacdrModel {
    pub source_encoder: DenseNetwork,
    pub source_decoder: DenseNetwork,
    pub target_encoder: DenseNetwork,
    pub target_decoder: DenseNetwork,
    pub mapper: DenseNetwork,
    pub shared_axis: Axis,
}

/// Loss curves of the three initialization sub-stages, in training order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CacdrInitLog {
    pub source_autoencoder: LossCurve,
    pub target_autoencoder: LossCurve,
    pub mapper: LossCurve,
}

impl CacdrModel {
    /// Freshly initialized networks for domains whose shared-axis rows have
    /// `source_width` and `target_width` entries.
    pub fn seeded(
        config: &CacdrConfig,
        source_width: usize,
        target_width: usize,
        shared_axis: Axis,
    ) -> Result<Self> {
        config.validate()?;
        let out = config.output_activation;
        let relu = Activation::Relu;
        let mut rng = rng_for(config.seed, streams::SOURCE_MODEL);
        let source_encoder = DenseNetwork::glorot(&config.encoder_sizes(source_width), relu, out, &mut rng)?;
        let source_decoder = DenseNetwork::glorot(&config.decoder_sizes(source_width), relu, out, &mut rng)?;
        let mut rng = rng_for(config.seed, streams::TARGET_MODEL);
        let target_encoder = DenseNetwork::glorot(&config.encoder_sizes(target_width), relu, out, &mut rng)?;
        let target_decoder = DenseNetwork::glorot(&config.decoder_sizes(target_width), relu, out, &mut rng)?;
        let mut rng = rng_for(config.seed, streams::MAPPER);
        let mapper = DenseNetwork::glorot(&config.mapper_sizes(), relu, out, &mut rng)?;
        Ok(Self {
            source_encoder,
            source_decoder,
            target_encoder,
            target_decoder,
            mapper,
            shared_axis,
        })
    }

    /// Seeded model sized for the given training views.
    pub fn for_views(config: &CacdrConfig, views: &TrainViews<'_>) -> Result<Self> {
        let axis = views.shared_axis;
        Self::seeded(config, views.source.width(axis), views.target.width(axis), axis)
    }

    pub fn latent_dim(&self) -> usize {
        self.mapper.input_size()
    }

    /// `clamp01(Dᵗ(F(Eˢ(x))))` for each source row of `x`.
    pub fn predict_cold_start(&self, source_rows: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = self.predict_raw(source_rows)?;
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(out)
    }

    /// Unclamped `Dᵗ(F(Eˢ(x)))`.
    pub fn predict_raw(&self, source_rows: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let z = self.source_encoder.forward(source_rows)?;
        let z = self.mapper.forward(z.view())?;
        self.target_decoder.forward(z.view())
    }

    pub fn all_finite(&self) -> bool {
        [
            &self.source_encoder,
            &self.source_decoder,
            &self.target_encoder,
            &self.target_decoder,
            &self.mapper,
        ]
        .iter()
        .all(|n| n.all_finite())
    }
}

fn check_axis(model: &CacdrModel, views: &TrainViews<'_>) -> Result<()> {
    if model.shared_axis != views.shared_axis {
        return Err(Error::Config(format!(
            "model shares {} but data shares {}",
            model.shared_axis, views.shared_axis
        )));
    }
    Ok(())
}

/// Initialization: source autoencoder on every source row, target autoencoder
/// on the training entities' target rows, then the mapper from source to
/// target codes of the training entities. Each piece trains on its own.
pub fn init_stage(views: &TrainViews<'_>, config: &CacdrConfig) -> Result<(CacdrModel, CacdrInitLog)> {
    let mut model = CacdrModel::for_views(config, views)?;
    let log = init_model(&mut model, views, config)?;
    Ok((model, log))
}

/// Runs the initialization stage on an existing (seeded) model.
pub fn init_model(
    model: &mut CacdrModel,
    views: &TrainViews<'_>,
    config: &CacdrConfig,
) -> Result<CacdrInitLog> {
    check_axis(model, views)?;
    let axis = views.shared_axis;
    let stage = &config.init;
    let mut rng = rng_for(derive_seed(config.seed, streams::SHUFFLE_INIT), 0);
    let mut log = CacdrInitLog {
        source_autoencoder: LossCurve::new("cacdr/init/source-ae"),
        target_autoencoder: LossCurve::new("cacdr/init/target-ae"),
        mapper: LossCurve::new("cacdr/init/mapper"),
    };

    let source = views.source.rows(axis, &views.all_shared());
    fit_chain(
        &mut [&mut model.source_encoder, &mut model.source_decoder],
        &["source_encoder", "source_decoder"],
        &source.values,
        &source.values,
        Some(&source.mask),
        stage,
        config.batch_size,
        &mut rng,
        &mut log.source_autoencoder,
    )
    .map_err(|e| e.in_stage("cacdr init: source autoencoder"))?;

    let target = views.target.rows(axis, views.train);
    fit_chain(
        &mut [&mut model.target_encoder, &mut model.target_decoder],
        &["target_encoder", "target_decoder"],
        &target.values,
        &target.values,
        Some(&target.mask),
        stage,
        config.batch_size,
        &mut rng,
        &mut log.target_autoencoder,
    )
    .map_err(|e| e.in_stage("cacdr init: target autoencoder"))?;

    let source_train = source.values.select(NdAxis(0), views.train);
    let codes_in = model.source_encoder.forward(source_train.view())?;
    let codes_out = model.target_encoder.forward(target.values.view())?;
    fit_chain(
        &mut [&mut model.mapper],
        &["mapper"],
        &codes_in,
        &codes_out,
        None,
        stage,
        config.batch_size,
        &mut rng,
        &mut log.mapper,
    )
    .map_err(|e| e.in_stage("cacdr init: mapper"))?;
    Ok(log)
}

/// Coupled learning: trains `Dᵗ ∘ F ∘ Eˢ` end to end on the observed target
/// ratings of the training entities. `Dˢ` and `Eᵗ` are left untouched.
pub fn coupled_stage(
    model: &mut CacdrModel,
    views: &TrainViews<'_>,
    config: &CacdrConfig,
) -> Result<LossCurve> {
    check_axis(model, views)?;
    config.validate()?;
    let axis = views.shared_axis;
    let mut rng = rng_for(derive_seed(config.seed, streams::SHUFFLE_COUPLED), 0);
    let mut curve = LossCurve::new("cacdr/coupled");
    let source = views.source.rows(axis, views.train);
    let target = views.target.rows(axis, views.train);
    fit_chain(
        &mut [&mut model.source_encoder, &mut model.mapper, &mut model.target_decoder],
        &["source_encoder", "mapper", "target_decoder"],
        &source.values,
        &target.values,
        Some(&target.mask),
        &config.coupled,
        config.batch_size,
        &mut rng,
        &mut curve,
    )
    .map_err(|e| e.in_stage("cacdr coupled"))?;
    Ok(curve)
}
