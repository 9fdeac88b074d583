//! LFACDR: per-domain item and user autoencoders whose codes are softly tied
//! to free latent-factor matrices `X_e` (items) and `Y_e` (users), with
//! `X_e·Y_eᵀ` fitted to the observed ratings.
//!
//! A cold-start entity is predicted from its source row by encoding it,
//! mapping the code into the target latent space and taking dot products
//! with the target's latents on the opposite axis.

use ndarray::{Array2, ArrayView2, Axis as NdAxis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LfacdrConfig, StageConfig};
use crate::data::{Axis, RatingMatrix};
use crate::error::{Error, Result};
use crate::numerics::loss::{dense_mse_grad, masked_mse_grad};
use crate::numerics::{
    adam_for, Activation, AdamConfig, AdamState, DenseNetwork, NetworkGrads, RowAdamState,
};
use crate::seed::{derive_seed, rng_for, streams};
use crate::train::{fit_chain, params_for, shuffled_batches, LossCurve, Pooled, TrainViews};

/// Encoder, decoder and latent matrix for one axis of a domain.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSide {
    /// Maps a rating row of this axis to a `k`-dimensional code.
    pub encoder: DenseNetwork,
    /// Maps a latent row back to a rating row.
    pub decoder: DenseNetwork,
    /// One `k`-dimensional row per entity on this axis.
    pub latents: Array2<f64>,
}

impl LatentSide {
    fn seeded<R: Rng>(config: &LfacdrConfig, count: usize, width: usize, rng: &mut R) -> Result<Self> {
        let relu = Activation::Relu;
        let out = config.output_activation;
        Ok(Self {
            encoder: DenseNetwork::glorot(&config.encoder_sizes(width), relu, out, rng)?,
            decoder: DenseNetwork::glorot(&config.decoder_sizes(width), relu, out, rng)?,
            latents: Array2::zeros((count, config.latent_dim())),
        })
    }
}

/// One domain's two autoencoders and latent matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LfacdrDomain {
    pub items: LatentSide,
    pub users: LatentSide,
    pub lambda: f64,
}

impl LfacdrDomain {
    pub fn seeded<R: Rng>(config: &LfacdrConfig, n_items: usize, n_users: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let items = LatentSide::seeded(config, n_items, n_users, rng)?;
        let users = LatentSide::seeded(config, n_users, n_items, rng)?;
        Ok(Self {
            items,
            users,
            lambda: config.lambda,
        })
    }

    pub fn side(&self, axis: Axis) -> &LatentSide {
        match axis {
            Axis::Items => &self.items,
            Axis::Users => &self.users,
        }
    }

    pub fn side_mut(&mut self, axis: Axis) -> &mut LatentSide {
        match axis {
            Axis::Items => &mut self.items,
            Axis::Users => &mut self.users,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.items.latents.ncols()
    }

    /// Sets `X_e := E_m(M)` and `Y_e := E_u(U)` over every row of `ratings`.
    pub fn reset_latents(&mut self, ratings: &RatingMatrix) -> Result<()> {
        for axis in [Axis::Items, Axis::Users] {
            let side = self.side_mut(axis);
            if ratings.count(axis) != side.latents.nrows() {
                return Err(Error::shape(
                    format!("{axis} latent rows"),
                    side.latents.nrows(),
                    ratings.count(axis),
                ));
            }
            let all: Vec<usize> = (0..ratings.count(axis)).collect();
            side.latents = side.encoder.forward(ratings.rows(axis, &all).values.view())?;
        }
        Ok(())
    }
}

/// The five unweighted terms of the joint latent objective, each an MSE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointTerms {
    /// Masked `M` vs `D_m(X_e)`.
    pub item_reconstruction: f64,
    /// Masked `U` vs `D_u(Y_e)`.
    pub user_reconstruction: f64,
    /// Dense `Y_e` vs `E_u(U)`.
    pub user_tie: f64,
    /// Dense `X_e` vs `E_m(M)`.
    pub item_tie: f64,
    /// Masked `X_e·Y_eᵀ` vs `R`.
    pub rating: f64,
    /// Number of observed ratings behind `rating`.
    pub rating_count: usize,
    pub lambda: f64,
    /// `l2 · Σ‖W‖²` over the four networks.
    pub penalty: f64,
}

impl JointTerms {
    pub fn total(&self) -> f64 {
        self.item_reconstruction
            + self.user_reconstruction
            + self.user_tie
            + self.item_tie
            + self.lambda * self.rating
            + self.penalty
    }
}

/// Gradients of the joint objective. Latent gradients cover only the batch rows.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGrads {
    pub item_encoder: NetworkGrads,
    pub item_decoder: NetworkGrads,
    pub user_encoder: NetworkGrads,
    pub user_decoder: NetworkGrads,
    /// `∂/∂X_e[items]`.
    pub items: Array2<f64>,
    /// `∂/∂Y_e[users]`.
    pub users: Array2<f64>,
}

/// Reconstruction and tie terms for one side; returns
/// `(reconstruction, tie, decoder grads, encoder grads, latent grads)`.
fn side_terms(
    side: &LatentSide,
    latents: &Array2<f64>,
    rows: &crate::data::DenseRows,
    l2: f64,
) -> Result<(f64, f64, NetworkGrads, NetworkGrads, Array2<f64>)> {
    let trace = side.decoder.forward_trace(latents.view())?;
    let (recon, g) = masked_mse_grad(trace.output().view(), rows.values.view(), &rows.mask, true)?;
    let (mut dec_grads, mut latent_grads) = side.decoder.backward(&trace, g)?;
    dec_grads.add_l2(&side.decoder, l2);

    let trace = side.encoder.forward_trace(rows.values.view())?;
    let (tie, g) = dense_mse_grad(latents.view(), trace.output().view())?;
    latent_grads += &g;
    let (mut enc_grads, _) = side.encoder.backward(&trace, -g)?;
    enc_grads.add_l2(&side.encoder, l2);
    Ok((recon, tie, dec_grads, enc_grads, latent_grads))
}

/// Joint objective restricted to rows `items` of `X_e`/`M` and `users` of
/// `Y_e`/`U`; the rating term covers the block `R[items, users]`.
///
/// Empty masks contribute zero rather than failing, so batches of entities
/// without ratings are allowed.
pub fn joint_latent_loss(
    domain: &LfacdrDomain,
    ratings: &RatingMatrix,
    items: &[usize],
    users: &[usize],
    l2: f64,
) -> Result<(JointTerms, JointGrads)> {
    if !(domain.lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {}", domain.lambda)));
    }
    let x = domain.items.latents.select(NdAxis(0), items);
    let y = domain.users.latents.select(NdAxis(0), users);
    let m_rows = ratings.rows(Axis::Items, items);
    let u_rows = ratings.rows(Axis::Users, users);

    let (item_reconstruction, item_tie, item_decoder, item_encoder, mut gx) =
        side_terms(&domain.items, &x, &m_rows, l2)?;
    let (user_reconstruction, user_tie, user_decoder, user_encoder, mut gy) =
        side_terms(&domain.users, &y, &u_rows, l2)?;

    let block = ratings.block(Axis::Items, items, users);
    let pred = x.dot(&y.t());
    let (rating, g) = masked_mse_grad(pred.view(), block.values.view(), &block.mask, true)?;
    if domain.lambda != 0.0 {
        gx.scaled_add(domain.lambda, &g.dot(&y));
        gy.scaled_add(domain.lambda, &g.t().dot(&x));
    }

    let penalty = l2
        * [
            &domain.items.encoder,
            &domain.items.decoder,
            &domain.users.encoder,
            &domain.users.decoder,
        ]
        .iter()
        .map(|n| n.weight_norm_sq())
        .sum::<f64>();
    let terms = JointTerms {
        item_reconstruction,
        user_reconstruction,
        user_tie,
        item_tie,
        rating,
        rating_count: block.observed(),
        lambda: domain.lambda,
        penalty,
    };
    let grads = JointGrads {
        item_encoder,
        item_decoder,
        user_encoder,
        user_decoder,
        items: gx,
        users: gy,
    };
    Ok((terms, grads))
}

/// Observed-entry RMSE of `X_e·Y_eᵀ` against `R[items, users]`.
pub fn rating_rmse(domain: &LfacdrDomain, ratings: &RatingMatrix, items: &[usize], users: &[usize]) -> Result<f64> {
    let x = domain.items.latents.select(NdAxis(0), items);
    let y = domain.users.latents.select(NdAxis(0), users);
    let block = ratings.block(Axis::Items, items, users);
    Ok(crate::numerics::masked_mse(x.dot(&y.t()).view(), block.values.view(), &block.mask)?.sqrt())
}

/// Pairs two shuffled batch lists cyclically so that every batch of the
/// longer list is visited once per epoch.
fn paired_batches<R: Rng>(
    first: usize,
    second: usize,
    batch: usize,
    rng: &mut R,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let a = shuffled_batches(first, batch, rng);
    let b = shuffled_batches(second, batch, rng);
    let steps = a.len().max(b.len());
    (0..steps)
        .map(|s| (a[s % a.len()].clone(), b[s % b.len()].clone()))
        .collect()
}

fn pick(indices: &[usize], positions: &[usize]) -> Vec<usize> {
    positions.iter().map(|&p| indices[p]).collect()
}

/// Trains one domain on the joint objective over the given item and user rows.
pub fn train_domain<R: Rng>(
    domain: &mut LfacdrDomain,
    ratings: &RatingMatrix,
    items: &[usize],
    users: &[usize],
    stage: &StageConfig,
    batch: usize,
    rng: &mut R,
    curve: &mut LossCurve,
) -> Result<()> {
    if items.is_empty() || users.is_empty() {
        return Err(Error::Data("no entities to train on".into()));
    }
    curve.record(0, stage.epochs, rating_rmse(domain, ratings, items, users)?);
    if stage.epochs == 0 {
        return Ok(());
    }
    let k = domain.latent_dim();
    let mut nets = adam_for(
        &[
            &domain.items.encoder,
            &domain.items.decoder,
            &domain.users.encoder,
            &domain.users.decoder,
        ],
        AdamConfig::default(),
    );
    let mut x_adam = RowAdamState::new(domain.items.latents.nrows(), k, AdamConfig::default());
    let mut y_adam = RowAdamState::new(domain.users.latents.nrows(), k, AdamConfig::default());
    for epoch in 1..=stage.epochs {
        let mut pooled = Pooled::default();
        for (ib, ub) in paired_batches(items.len(), users.len(), batch, rng) {
            let (bi, bu) = (pick(items, &ib), pick(users, &ub));
            let (terms, grads) = joint_latent_loss(domain, ratings, &bi, &bu, stage.l2)?;
            if !terms.total().is_finite() {
                return Err(Error::NonFiniteGradient {
                    tensor: "joint latent loss".into(),
                });
            }
            pooled.add(terms.rating, terms.rating_count);
            step_domain(domain, &grads, &mut nets, stage.lr)?;
            x_adam.step_rows("items.latents", &mut domain.items.latents, &grads.items, &bi, stage.lr)?;
            y_adam.step_rows("users.latents", &mut domain.users.latents, &grads.users, &bu, stage.lr)?;
        }
        curve.record(epoch, stage.epochs, pooled.rmse());
    }
    Ok(())
}

fn step_domain(domain: &mut LfacdrDomain, grads: &JointGrads, adam: &mut AdamState, lr: f64) -> Result<()> {
    let LfacdrDomain { items, users, .. } = domain;
    let mut params = params_for(vec![
        ("items.encoder", &mut items.encoder, &grads.item_encoder),
        ("items.decoder", &mut items.decoder, &grads.item_decoder),
        ("users.encoder", &mut users.encoder, &grads.user_encoder),
        ("users.decoder", &mut users.decoder, &grads.user_decoder),
    ]);
    adam.step(&mut params, lr)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LfacdrModel {
    pub source: LfacdrDomain,
    pub target: LfacdrDomain,
    /// Maps source latents of the shared axis into the target latent space.
    pub mapper: DenseNetwork,
    pub shared_axis: Axis,
}

/// Loss curves of the initialization stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LfacdrInitLog {
    pub source: LossCurve,
    pub target: LossCurve,
    pub mapper: LossCurve,
}

impl LfacdrModel {
    /// Seeded networks with zero latents; [`init_stage`] fills the latents.
    pub fn seeded(
        config: &LfacdrConfig,
        source_shape: (usize, usize),
        target_shape: (usize, usize),
        shared_axis: Axis,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, streams::SOURCE_MODEL);
        let source = LfacdrDomain::seeded(config, source_shape.0, source_shape.1, &mut rng)?;
        let mut rng = rng_for(config.seed, streams::TARGET_MODEL);
        let target = LfacdrDomain::seeded(config, target_shape.0, target_shape.1, &mut rng)?;
        let mut rng = rng_for(config.seed, streams::MAPPER);
        let relu = Activation::Relu;
        let mapper = DenseNetwork::glorot(&config.mapper_sizes(), relu, config.output_activation, &mut rng)?;
        Ok(Self {
            source,
            target,
            mapper,
            shared_axis,
        })
    }

    /// Seeded model sized for the views, with latents set to encoder outputs.
    pub fn for_views(config: &LfacdrConfig, views: &TrainViews<'_>) -> Result<Self> {
        let shape = |m: &RatingMatrix| (m.n_items(), m.n_users());
        let mut model = Self::seeded(config, shape(views.source), shape(views.target), views.shared_axis)?;
        model.source.reset_latents(views.source)?;
        model.target.reset_latents(views.target)?;
        Ok(model)
    }

    pub fn latent_dim(&self) -> usize {
        self.mapper.input_size()
    }

    /// `clamp01(F(Eˢ(x)) · Oᵗᵀ)` where `Eˢ` encodes shared-axis source rows and
    /// `Oᵗ` holds the target latents of the opposite axis. Rows of the result
    /// follow the input rows.
    pub fn predict_cold_start(&self, source_rows: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let axis = self.shared_axis;
        let code = self.source.side(axis).encoder.forward(source_rows)?;
        let mapped = self.mapper.forward(code.view())?;
        let other = &self.target.side(axis.other()).latents;
        let mut out = mapped.dot(&other.t());
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(out)
    }

    /// `R̂ᵗ(i, :) = clamp01(F(Eˢ_m(mˢ_i)) · Yᵗ_eᵀ)` for item rows of the source.
    pub fn predict_item_level(&self, source_item_rows: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.require(Axis::Items)?;
        self.predict_cold_start(source_item_rows)
    }

    /// `R̂ᵗ(:, j) = clamp01(Xᵗ_e · F(Eˢ_u(uˢ_j))ᵀ)` for user rows of the
    /// source, returned one row per user.
    pub fn predict_user_level(&self, source_user_rows: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.require(Axis::Users)?;
        self.predict_cold_start(source_user_rows)
    }

    fn require(&self, axis: Axis) -> Result<()> {
        if self.shared_axis != axis {
            return Err(Error::Config(format!(
                "operation needs shared {axis} but the model shares {}",
                self.shared_axis
            )));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        let domain_ok = |d: &LfacdrDomain| {
            [&d.items, &d.users].iter().all(|s| {
                s.encoder.all_finite() && s.decoder.all_finite() && s.latents.iter().all(|v| v.is_finite())
            })
        };
        domain_ok(&self.source) && domain_ok(&self.target) && self.mapper.all_finite()
    }
}

fn check_views(model: &LfacdrModel, views: &TrainViews<'_>) -> Result<()> {
    if model.shared_axis != views.shared_axis {
        return Err(Error::Config(format!(
            "model shares {} but data shares {}",
            model.shared_axis, views.shared_axis
        )));
    }
    Ok(())
}

/// Initialization: latents start at encoder outputs, each domain is trained
/// on the joint objective (the target only over training entities on the
/// shared axis), then the mapper learns source to target shared-axis latents
/// of the training entities.
pub fn init_stage(views: &TrainViews<'_>, config: &LfacdrConfig) -> Result<(LfacdrModel, LfacdrInitLog)> {
    let mut model = LfacdrModel::for_views(config, views)?;
    let log = init_model(&mut model, views, config)?;
    Ok((model, log))
}

/// Runs the initialization stage on a model built by [`LfacdrModel::for_views`].
pub fn init_model(model: &mut LfacdrModel, views: &TrainViews<'_>, config: &LfacdrConfig) -> Result<LfacdrInitLog> {
    check_views(model, views)?;
    let axis = views.shared_axis;
    let stage = &config.init;
    let mut rng = rng_for(derive_seed(config.seed, streams::SHUFFLE_INIT), 0);
    let mut log = LfacdrInitLog {
        source: LossCurve::new("lfacdr/init/source"),
        target: LossCurve::new("lfacdr/init/target"),
        mapper: LossCurve::new("lfacdr/init/mapper"),
    };

    let all = |m: &RatingMatrix, a: Axis| (0..m.count(a)).collect::<Vec<usize>>();
    let (s_items, s_users) = (all(views.source, Axis::Items), all(views.source, Axis::Users));
    train_domain(
        &mut model.source,
        views.source,
        &s_items,
        &s_users,
        stage,
        config.batch_size,
        &mut rng,
        &mut log.source,
    )
    .map_err(|e| e.in_stage("lfacdr init: source domain"))?;

    let (t_items, t_users) = match axis {
        Axis::Items => (views.train.to_vec(), all(views.target, Axis::Users)),
        Axis::Users => (all(views.target, Axis::Items), views.train.to_vec()),
    };
    train_domain(
        &mut model.target,
        views.target,
        &t_items,
        &t_users,
        stage,
        config.batch_size,
        &mut rng,
        &mut log.target,
    )
    .map_err(|e| e.in_stage("lfacdr init: target domain"))?;

    let inputs = model.source.side(axis).latents.select(NdAxis(0), views.train);
    let outputs = model.target.side(axis).latents.select(NdAxis(0), views.train);
    fit_chain(
        &mut [&mut model.mapper],
        &["mapper"],
        &inputs,
        &outputs,
        None,
        stage,
        config.batch_size,
        &mut rng,
        &mut log.mapper,
    )
    .map_err(|e| e.in_stage("lfacdr init: mapper"))?;
    Ok(log)
}

/// Item-level coupled learning: fits `F(Xˢ_e)·Yᵗ_eᵀ` to the target ratings
/// while tying `Xˢ_e` to `Eˢ_m(Mˢ)` and `Yᵗ_e` to `Eᵗ_u(Uᵗ)`.
pub fn coupled_stage_items(model: &mut LfacdrModel, views: &TrainViews<'_>, config: &LfacdrConfig) -> Result<LossCurve> {
    model.require(Axis::Items)?;
    coupled_stage(model, views, config)
}

/// User-level coupled learning: fits `Xᵗ_e·F(Yˢ_e)ᵀ` to the target ratings
/// while tying `Xᵗ_e` to `Eᵗ_m(Mᵗ)` and `Yˢ_e` to `Eˢ_u(Uˢ)`.
pub fn coupled_stage_users(model: &mut LfacdrModel, views: &TrainViews<'_>, config: &LfacdrConfig) -> Result<LossCurve> {
    model.require(Axis::Users)?;
    coupled_stage(model, views, config)
}

/// Coupled learning for the model's shared axis. Trains the mapper, the
/// source encoder and latents of the shared axis, and the target encoder and
/// latents of the opposite axis; everything else stays frozen.
pub fn coupled_stage(model: &mut LfacdrModel, views: &TrainViews<'_>, config: &LfacdrConfig) -> Result<LossCurve> {
    check_views(model, views)?;
    config.validate()?;
    let mut curve = LossCurve::new("lfacdr/coupled");
    run_coupled(model, views, config, &mut curve).map_err(|e| e.in_stage("lfacdr coupled"))?;
    Ok(curve)
}

/// Terms and gradients of the coupled objective on one batch.
struct CoupledStep {
    rating: f64,
    rating_count: usize,
    mapper: NetworkGrads,
    source_encoder: NetworkGrads,
    target_encoder: NetworkGrads,
    shared: Array2<f64>,
    other: Array2<f64>,
}

/// `shared` indexes shared-axis entities, `other` the target's opposite axis.
fn coupled_batch(
    model: &LfacdrModel,
    views: &TrainViews<'_>,
    shared: &[usize],
    other: &[usize],
    l2: f64,
) -> Result<CoupledStep> {
    let axis = model.shared_axis;
    let s_side = model.source.side(axis);
    let o_side = model.target.side(axis.other());
    let s = s_side.latents.select(NdAxis(0), shared);
    let o = o_side.latents.select(NdAxis(0), other);

    let f_trace = model.mapper.forward_trace(s.view())?;
    let mapped = f_trace.output();
    let block = views.target.block(axis, shared, other);
    let (rating, g) = masked_mse_grad(mapped.dot(&o.t()).view(), block.values.view(), &block.mask, true)?;
    let g_mapped = g.dot(&o);
    let mut g_other = g.t().dot(mapped);
    let (mut mapper, mut g_shared) = model.mapper.backward(&f_trace, g_mapped)?;
    mapper.add_l2(&model.mapper, l2);

    let s_rows = views.source.rows(axis, shared);
    let trace = s_side.encoder.forward_trace(s_rows.values.view())?;
    let (_, g) = dense_mse_grad(s.view(), trace.output().view())?;
    g_shared += &g;
    let (mut source_encoder, _) = s_side.encoder.backward(&trace, -g)?;
    source_encoder.add_l2(&s_side.encoder, l2);

    let o_rows = views.target.rows(axis.other(), other);
    let trace = o_side.encoder.forward_trace(o_rows.values.view())?;
    let (_, g) = dense_mse_grad(o.view(), trace.output().view())?;
    g_other += &g;
    let (mut target_encoder, _) = o_side.encoder.backward(&trace, -g)?;
    target_encoder.add_l2(&o_side.encoder, l2);

    Ok(CoupledStep {
        rating,
        rating_count: block.observed(),
        mapper,
        source_encoder,
        target_encoder,
        shared: g_shared,
        other: g_other,
    })
}

/// Observed-entry RMSE of `F(Sˢ[train])·Oᵗᵀ` against the target training ratings.
fn coupled_rmse(model: &LfacdrModel, views: &TrainViews<'_>, other: &[usize]) -> Result<f64> {
    let axis = model.shared_axis;
    let s = model.source.side(axis).latents.select(NdAxis(0), views.train);
    let o = model.target.side(axis.other()).latents.select(NdAxis(0), other);
    let pred = model.mapper.forward(s.view())?.dot(&o.t());
    let block = views.target.block(axis, views.train, other);
    Ok(crate::numerics::masked_mse(pred.view(), block.values.view(), &block.mask)?.sqrt())
}

fn run_coupled(model: &mut LfacdrModel, views: &TrainViews<'_>, config: &LfacdrConfig, curve: &mut LossCurve) -> Result<()> {
    let axis = model.shared_axis;
    let stage = &config.coupled;
    let other: Vec<usize> = (0..views.target.count(axis.other())).collect();
    curve.record(0, stage.epochs, coupled_rmse(model, views, &other)?);
    if stage.epochs == 0 {
        return Ok(());
    }
    let mut rng = rng_for(derive_seed(config.seed, streams::SHUFFLE_COUPLED), 0);
    let mut nets = adam_for(
        &[
            &model.mapper,
            &model.source.side(axis).encoder,
            &model.target.side(axis.other()).encoder,
        ],
        AdamConfig::default(),
    );
    let k = model.latent_dim();
    let mut s_adam = RowAdamState::new(model.source.side(axis).latents.nrows(), k, AdamConfig::default());
    let mut o_adam = RowAdamState::new(model.target.side(axis.other()).latents.nrows(), k, AdamConfig::default());
    for epoch in 1..=stage.epochs {
        let mut pooled = Pooled::default();
        for (sb, ob) in paired_batches(views.train.len(), other.len(), config.batch_size, &mut rng) {
            let shared = pick(views.train, &sb);
            let other_b = pick(&other, &ob);
            let step = coupled_batch(model, views, &shared, &other_b, stage.l2)?;
            if !step.rating.is_finite() {
                return Err(Error::NonFiniteGradient {
                    tensor: "coupled rating loss".into(),
                });
            }
            pooled.add(step.rating, step.rating_count);
            let LfacdrModel {
                source,
                target,
                mapper,
                ..
            } = model;
            let s_side = source.side_mut(axis);
            let o_side = target.side_mut(axis.other());
            let mut params = params_for(vec![
                ("mapper", mapper, &step.mapper),
                ("source.encoder", &mut s_side.encoder, &step.source_encoder),
                ("target.encoder", &mut o_side.encoder, &step.target_encoder),
            ]);
            nets.step(&mut params, stage.lr)?;
            s_adam.step_rows("source.latents", &mut s_side.latents, &step.shared, &shared, stage.lr)?;
            o_adam.step_rows("target.latents", &mut o_side.latents, &step.other, &other_b, stage.lr)?;
        }
        curve.record(epoch, stage.epochs, pooled.rmse());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rating;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> LfacdrConfig {
        LfacdrConfig {
            encoder_layers: vec![5, 3],
            mapper_hidden: vec![4],
            batch_size: 4,
            output_activation: Activation::Identity,
            ..LfacdrConfig::lfacdr_defaults()
        }
    }

    fn sparse(n_items: usize, n_users: usize, density: f64, seed: u64) -> RatingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for item in 0..n_items {
            for user in 0..n_users {
                if rng.random::<f64>() < density {
                    entries.push(Rating { item, user, value: rng.random_range(0.1..1.0) });
                }
            }
        }
        RatingMatrix::new(n_items, n_users, entries).unwrap()
    }

    fn all(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn ties_vanish_when_latents_are_encodings() {
        let r = sparse(7, 6, 0.6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = LfacdrDomain::seeded(&small_config(), 7, 6, &mut rng).unwrap();
        d.reset_latents(&r).unwrap();
        let (terms, _) = joint_latent_loss(&d, &r, &all(7), &all(6), 0.0).unwrap();
        assert_eq!(terms.item_tie, 0.0);
        assert_eq!(terms.user_tie, 0.0);
        assert!(terms.rating > 0.0);
    }

    #[test]
    fn identity_latents_fit_identity_ratings() {
        // zero is not a storable rating, so only the diagonal of R = I is observed
        let entries = vec![
            Rating { item: 0, user: 0, value: 1.0 },
            Rating { item: 1, user: 1, value: 1.0 },
        ];
        let r = RatingMatrix::new(2, 2, entries).unwrap();
        let config = LfacdrConfig { encoder_layers: vec![2], ..small_config() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = LfacdrDomain::seeded(&config, 2, 2, &mut rng).unwrap();
        d.items.latents = Array2::eye(2);
        d.users.latents = Array2::eye(2);
        let (terms, _) = joint_latent_loss(&d, &r, &[0, 1], &[0, 1], 0.0).unwrap();
        assert_eq!(terms.rating, 0.0);
        assert_eq!(terms.rating_count, 2);
    }

    #[test]
    fn zero_lambda_decouples_items_from_users() {
        let r = sparse(6, 5, 0.6, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let config = LfacdrConfig { lambda: 0.0, ..small_config() };
        let mut d = LfacdrDomain::seeded(&config, 6, 5, &mut rng).unwrap();
        d.reset_latents(&r).unwrap();
        let (t0, g0) = joint_latent_loss(&d, &r, &all(6), &all(5), 0.0).unwrap();
        let items_only = t0.item_reconstruction + t0.item_tie;
        d.users.latents.mapv_inplace(|v| v + 0.3);
        let (t1, g1) = joint_latent_loss(&d, &r, &all(6), &all(5), 0.0).unwrap();
        assert_eq!(t1.item_reconstruction + t1.item_tie, items_only);
        assert_eq!(g1.items, g0.items);
        assert_eq!(g1.item_encoder, g0.item_encoder);
        assert_eq!(g1.item_decoder, g0.item_decoder);
        assert_ne!(g1.users, g0.users);
        assert_abs_diff_eq!(
            t1.total(),
            t1.item_reconstruction + t1.user_reconstruction + t1.item_tie + t1.user_tie,
            epsilon = 1e-15
        );
    }

    #[test]
    fn loss_increases_with_lambda() {
        let r = sparse(6, 5, 0.6, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut d = LfacdrDomain::seeded(&small_config(), 6, 5, &mut rng).unwrap();
        d.reset_latents(&r).unwrap();
        let mut last = f64::NEG_INFINITY;
        for lambda in [0.0, 0.5, 1.0, 2.0, 10.0] {
            d.lambda = lambda;
            let (terms, _) = joint_latent_loss(&d, &r, &all(6), &all(5), 1e-4).unwrap();
            assert!(terms.rating > 0.0);
            assert!(terms.total() > last);
            last = terms.total();
        }
        d.lambda = -0.1;
        assert!(matches!(joint_latent_loss(&d, &r, &[0], &[0], 0.0), Err(Error::Config(_))));
    }

    /// Central differences of `total()` against the analytic gradients.
    #[test]
    fn joint_gradients_match_finite_differences() {
        let r = sparse(6, 5, 0.5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let config = LfacdrConfig { lambda: 0.7, ..small_config() };
        let mut d = LfacdrDomain::seeded(&config, 6, 5, &mut rng).unwrap();
        d.reset_latents(&r).unwrap();
        d.items.latents.mapv_inplace(|v| v + 0.1);
        d.users.latents.mapv_inplace(|v| v - 0.05);
        let (items, users) = (vec![4, 0, 2], vec![1, 3, 4, 0]);
        let l2 = 1e-3;
        let (_, grads) = joint_latent_loss(&d, &r, &items, &users, l2).unwrap();
        let f = |d: &LfacdrDomain| joint_latent_loss(d, &r, &items, &users, l2).unwrap().0.total();
        let h = 1e-5;
        let check = |a: f64, n: f64, what: &str| {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < 1e-5 || (a - n).abs() < 1e-9, "{what}: analytic {a} numeric {n}");
        };

        for (pos, &row) in items.iter().enumerate() {
            for c in 0..d.latent_dim() {
                let mut p = d.clone();
                p.items.latents[[row, c]] += h;
                let mut m = d.clone();
                m.items.latents[[row, c]] -= h;
                check(grads.items[[pos, c]], (f(&p) - f(&m)) / (2.0 * h), "items latent");
            }
        }
        for (pos, &row) in users.iter().enumerate() {
            for c in 0..d.latent_dim() {
                let mut p = d.clone();
                p.users.latents[[row, c]] += h;
                let mut m = d.clone();
                m.users.latents[[row, c]] -= h;
                check(grads.users[[pos, c]], (f(&p) - f(&m)) / (2.0 * h), "users latent");
            }
        }
        type Getter = fn(&mut LfacdrDomain) -> &mut DenseNetwork;
        let nets: [(&str, Getter, &NetworkGrads); 4] = [
            ("items.encoder", |d| &mut d.items.encoder, &grads.item_encoder),
            ("items.decoder", |d| &mut d.items.decoder, &grads.item_decoder),
            ("users.encoder", |d| &mut d.users.encoder, &grads.user_encoder),
            ("users.decoder", |d| &mut d.users.decoder, &grads.user_decoder),
        ];
        for (name, get, g) in nets {
            let base = get(&mut d.clone()).flatten();
            for (i, a) in g.flatten().into_iter().enumerate() {
                let mut p = d.clone();
                let mut v = base.clone();
                v[i] += h;
                get(&mut p).set_flat(&v).unwrap();
                let mut m = d.clone();
                v[i] -= 2.0 * h;
                get(&mut m).set_flat(&v).unwrap();
                check(a, (f(&p) - f(&m)) / (2.0 * h), name);
            }
        }
    }

    #[test]
    fn training_lowers_rating_error() {
        let r = sparse(10, 8, 0.7, 5);
        let stage = StageConfig { epochs: 150, lr: 1e-2, l2: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut d = LfacdrDomain::seeded(&small_config(), 10, 8, &mut rng).unwrap();
        d.reset_latents(&r).unwrap();
        let mut curve = LossCurve::new("t");
        train_domain(&mut d, &r, &all(10), &all(8), &stage, 4, &mut rng, &mut curve).unwrap();
        let rmse = rating_rmse(&d, &r, &all(10), &all(8)).unwrap();
        assert!(rmse < 0.5 * curve.first().unwrap(), "{rmse} vs {:?}", curve.first());
    }

    #[test]
    fn paired_batches_visit_the_longer_side_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pairs = paired_batches(10, 3, 4, &mut rng);
        assert_eq!(pairs.len(), 3);
        let mut firsts: Vec<usize> = pairs.iter().flat_map(|p| p.0.clone()).collect();
        firsts.sort_unstable();
        assert_eq!(firsts, all(10));
        assert!(pairs.iter().all(|p| p.1.len() == 3));
    }

    fn pair() -> (RatingMatrix, RatingMatrix) {
        (sparse(8, 6, 0.7, 7), sparse(8, 5, 0.7, 8))
    }

    #[test]
    fn zero_epochs_leaves_encoded_latents() {
        let (s, t) = pair();
        let train = vec![0, 1, 2, 3, 4];
        let views = TrainViews::new(&s, &t, Axis::Items, &train).unwrap();
        let mut config = small_config();
        config.init.epochs = 0;
        config.coupled.epochs = 0;
        let (mut model, _) = init_stage(&views, &config).unwrap();
        let fresh = LfacdrModel::for_views(&config, &views).unwrap();
        assert_eq!(model, fresh);
        let enc = model.source.items.encoder.forward(s.dense_m().view()).unwrap();
        assert_eq!(model.source.items.latents, enc);
        coupled_stage(&mut model, &views, &config).unwrap();
        assert_eq!(model, fresh);
    }

    fn coupled_changes(axis: Axis) -> (LfacdrModel, LfacdrModel) {
        let (s, t) = pair();
        let (s, t) = match axis {
            Axis::Items => (s, t),
            Axis::Users => (s.transpose(), t.transpose()),
        };
        let train = vec![0, 2, 3, 5, 6];
        let views = TrainViews::new(&s, &t, axis, &train).unwrap();
        let mut config = small_config();
        config.init.epochs = 3;
        config.coupled.epochs = 3;
        let (mut model, _) = init_stage(&views, &config).unwrap();
        let before = model.clone();
        match axis {
            Axis::Items => coupled_stage_items(&mut model, &views, &config).unwrap(),
            Axis::Users => coupled_stage_users(&mut model, &views, &config).unwrap(),
        };
        (before, model)
    }

    #[test]
    fn coupled_items_trains_only_its_parameters() {
        let (b, a) = coupled_changes(Axis::Items);
        assert_ne!(a.mapper, b.mapper);
        assert_ne!(a.source.items.encoder, b.source.items.encoder);
        assert_ne!(a.source.items.latents, b.source.items.latents);
        assert_ne!(a.target.users.encoder, b.target.users.encoder);
        assert_ne!(a.target.users.latents, b.target.users.latents);

        assert_eq!(a.source.items.decoder, b.source.items.decoder);
        assert_eq!(a.source.users, b.source.users);
        assert_eq!(a.target.items, b.target.items);
        assert_eq!(a.target.users.decoder, b.target.users.decoder);
    }

    #[test]
    fn coupled_users_trains_only_its_parameters() {
        let (b, a) = coupled_changes(Axis::Users);
        assert_ne!(a.mapper, b.mapper);
        assert_ne!(a.source.users.encoder, b.source.users.encoder);
        assert_ne!(a.source.users.latents, b.source.users.latents);
        assert_ne!(a.target.items.encoder, b.target.items.encoder);
        assert_ne!(a.target.items.latents, b.target.items.latents);

        assert_eq!(a.source.users.decoder, b.source.users.decoder);
        assert_eq!(a.source.items, b.source.items);
        assert_eq!(a.target.users, b.target.users);
        assert_eq!(a.target.items.decoder, b.target.items.decoder);
    }

    #[test]
    fn axis_mismatch_is_an_error() {
        let (s, t) = pair();
        let train = vec![0, 1, 2];
        let views = TrainViews::new(&s, &t, Axis::Items, &train).unwrap();
        let config = small_config();
        let mut model = LfacdrModel::for_views(&config, &views).unwrap();
        assert!(matches!(coupled_stage_users(&mut model, &views, &config), Err(Error::Config(_))));
        assert!(model.predict_user_level(Array2::zeros((1, 8)).view()).is_err());
        assert!(model.predict_item_level(Array2::zeros((1, 6)).view()).is_ok());
        let ts = s.transpose();
        let tt = t.transpose();
        let user_views = TrainViews::new(&ts, &tt, Axis::Users, &train).unwrap();
        assert!(init_model(&mut model, &user_views, &config).is_err());
    }

    /// Identity networks reduce prediction to a plain dot product.
    fn identity_model(k: usize, n_items: usize, n_users: usize) -> LfacdrModel {
        let config = LfacdrConfig {
            encoder_layers: vec![k],
            mapper_hidden: vec![],
            ..small_config()
        };
        let mut model = LfacdrModel::seeded(&config, (n_items, k), (n_items, n_users), Axis::Items).unwrap();
        let id = |n: usize| {
            let layer = crate::numerics::DenseLayer::new(Array2::eye(n), ndarray::Array1::zeros(n), Activation::Identity);
            DenseNetwork::new(vec![layer.unwrap()]).unwrap()
        };
        model.source.items.encoder = id(k);
        model.mapper = id(k);
        model
    }

    #[test]
    fn prediction_examples() {
        let mut model = identity_model(2, 1, 3);
        model.target.users.latents = ndarray::array![[1.0, 0.0], [0.0, 0.0], [0.2, -0.1]];
        let p = model.predict_item_level(ndarray::array![[0.5, 1.0]].view()).unwrap();
        assert_abs_diff_eq!(p[[0, 0]], 0.5, epsilon = 1e-15);
        assert_eq!(p[[0, 1]], 0.0);
        assert_abs_diff_eq!(p[[0, 2]], 0.0, epsilon = 1e-15);
        model.target.users.latents = ndarray::array![[0.3, -0.1], [2.0, 2.0], [-1.0, 0.0]];
        let p = model.predict_item_level(ndarray::array![[0.5, 1.0]].view()).unwrap();
        assert_abs_diff_eq!(p[[0, 0]], 0.05, epsilon = 1e-15);
        assert_eq!(p[[0, 1]], 1.0);
        assert_eq!(p[[0, 2]], 0.0);
    }

    #[test]
    fn prediction_matches_naive_loops() {
        let (s, t) = pair();
        let train = vec![0, 1, 2, 3];
        let views = TrainViews::new(&s, &t, Axis::Items, &train).unwrap();
        let mut config = small_config();
        config.init.epochs = 2;
        let (model, _) = init_stage(&views, &config).unwrap();
        let rows = s.rows(Axis::Items, &[5, 6, 7]).values;
        let p = model.predict_cold_start(rows.view()).unwrap();
        let mapped = model
            .mapper
            .forward(model.source.items.encoder.forward(rows.view()).unwrap().view())
            .unwrap();
        for i in 0..3 {
            for u in 0..t.n_users() {
                let mut dot = 0.0;
                for c in 0..model.latent_dim() {
                    dot += mapped[[i, c]] * model.target.users.latents[[u, c]];
                }
                assert_abs_diff_eq!(p[[i, u]], dot.clamp(0.0, 1.0), epsilon = 1e-12);
            }
        }
    }
}
