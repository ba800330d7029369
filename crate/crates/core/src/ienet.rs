//! Stage one: an inception encoder/decoder that distills inputs into
//! anomaly-free impressions, trained with a mutual-information discriminator,
//! a KL pull toward the standard Gaussian, and an L1 reconstruction term.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, IeConfig};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Ctx, Linear, LinearInit, Mlp};
use crate::nn::optim::Sgd;
use crate::nn::{NodeId, ParamId, ParamStore, Tape};

/// Probability clamp keeping the discriminator cross-entropy finite.
pub const PROB_EPS: f64 = 1e-7;

/// Latent moments (mu, sigma) of the code distribution; sigma is produced
/// through an exponential and is therefore strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

/// Closed-form KL(N(mu, diag(sigma^2)) || N(0, I)).
pub fn kl_gaussian(moments: &MomentEstimate) -> Result<f64> {
    if moments.sigma.iter().any(|s| *s <= 0.0) {
        return Err(Error::InvalidMoments);
    }
    let mut total = 0.0;
    for (m, s) in moments.mu.iter().zip(moments.sigma.iter()) {
        let var = s * s;
        total += 0.5 * (m * m + var - 1.0 - var.ln());
    }
    Ok(total)
}

/// Two-term discriminator cross-entropy from raw probabilities, means over
/// the batch, probabilities clamped to [eps, 1-eps].
pub fn mi_loss_from_probs(t_pos: &[f64], t_neg: &[f64]) -> f64 {
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos: f64 = t_pos.iter().map(|p| -clamp(*p).ln()).sum::<f64>() / t_pos.len() as f64;
    let neg: f64 =
        t_neg.iter().map(|p| -(1.0 - clamp(*p)).ln()).sum::<f64>() / t_neg.len() as f64;
    pos + neg
}

/// Draw a fixed-point-free permutation of 0..n (n >= 2).
pub fn derangement(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    loop {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..i + 1);
            perm.swap(i, j);
        }
        if perm.iter().enumerate().all(|(i, p)| i != *p) {
            return Ok(perm);
        }
    }
}

struct InceptionBlock {
    b1: Conv2d,
    reduce3: Conv2d,
    b3: Conv2d,
    reduce5: Conv2d,
    b5: Conv2d,
    pool_proj: Conv2d,
}

impl InceptionBlock {
    fn new(store: &mut ParamStore, seed: u64, name: &str, in_c: usize, out_c: usize) -> Self {
        assert!(out_c >= 8, "inception block needs at least 8 channels");
        let c1 = out_c / 4;
        let c3 = out_c / 2;
        let c5 = out_c / 8;
        let cp = out_c - c1 - c3 - c5;
        let r3 = (out_c / 4).max(4);
        let r5 = (out_c / 16).max(4);
        Self {
            b1: Conv2d::new(store, seed, &format!("{name}.b1"), in_c, c1, 1, 1, 0),
            reduce3: Conv2d::new(store, seed, &format!("{name}.r3"), in_c, r3, 1, 1, 0),
            b3: Conv2d::new(store, seed, &format!("{name}.b3"), r3, c3, 3, 1, 1),
            reduce5: Conv2d::new(store, seed, &format!("{name}.r5"), in_c, r5, 1, 1, 0),
            b5: Conv2d::new(store, seed, &format!("{name}.b5"), r5, c5, 5, 1, 2),
            pool_proj: Conv2d::new(store, seed, &format!("{name}.pp"), in_c, cp, 1, 1, 0),
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: NodeId) -> NodeId {
        let p1 = self.b1.forward(ctx, x);
        let p1 = ctx.tape.relu(p1);
        let r3 = self.reduce3.forward(ctx, x);
        let r3 = ctx.tape.relu(r3);
        let p3 = self.b3.forward(ctx, r3);
        let p3 = ctx.tape.relu(p3);
        let r5 = self.reduce5.forward(ctx, x);
        let r5 = ctx.tape.relu(r5);
        let p5 = self.b5.forward(ctx, r5);
        let p5 = ctx.tape.relu(p5);
        let pooled = ctx.tape.maxpool2d(x, 3, 1, 1);
        let pp = self.pool_proj.forward(ctx, pooled);
        let pp = ctx.tape.relu(pp);
        ctx.tape.concat_axis1(&[p1, p3, p5, pp])
    }
}

/// Stage-one model: encoder, moment head, discriminator, decoder.
pub struct IeNet {
    pub store: ParamStore,
    image_size: usize,
    channels: usize,
    d_z: usize,
    bottleneck: usize, // spatial side after all poolings
    widths: Vec<usize>,
    encoder: Vec<InceptionBlock>,
    to_latent: Linear,
    from_latent: Linear,
    decoder: Vec<InceptionBlock>,
    out_conv: Conv2d,
    moment_head: Mlp,
    discriminator: Mlp,
    enc_dec_params: Vec<ParamId>,
    disc_params: Vec<ParamId>,
}

fn block_widths(base: usize, blocks: usize) -> Vec<usize> {
    (0..blocks).map(|i| base << i.min(2)).collect()
}

impl IeNet {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let ie = &cfg.ie;
        let seed = cfg.seed.wrapping_add(0x1e);
        let mut store = ParamStore::new();
        let widths = block_widths(ie.base_width, ie.blocks);
        let bottleneck = cfg.image_size >> ie.blocks;
        assert!(bottleneck >= 1, "config validation admits only poolable sizes");

        let mut encoder = Vec::new();
        let mut in_c = cfg.channels;
        for (i, w) in widths.iter().enumerate() {
            encoder.push(InceptionBlock::new(
                &mut store,
                seed,
                &format!("encoder.block{i}"),
                in_c,
                *w,
            ));
            in_c = *w;
        }
        let c_last = *widths.last().unwrap();
        let flat = c_last * bottleneck * bottleneck;
        let to_latent = Linear::new(&mut store, seed, "encoder.to_latent", flat, ie.d_z, LinearInit::He);
        let from_latent =
            Linear::new(&mut store, seed, "decoder.from_latent", ie.d_z, flat, LinearInit::He);

        let mut decoder = Vec::new();
        let mut in_c = c_last;
        for (i, w) in widths.iter().rev().enumerate() {
            decoder.push(InceptionBlock::new(
                &mut store,
                seed,
                &format!("decoder.block{i}"),
                in_c,
                *w,
            ));
            in_c = *w;
        }
        let out_conv = Conv2d::new(&mut store, seed, "decoder.out", in_c, cfg.channels, 1, 1, 0);

        // moment head starts at (mu=0, sigma=1): zero last layer
        let moment_head = Mlp::new(
            &mut store,
            seed,
            "moments",
            &[ie.d_z, ie.d_z, ie.d_z, 2 * ie.d_z],
            LinearInit::Zero,
        );
        let disc_start = store.len();
        // zero-initialized last layer pins the untrained output at 0.5
        let discriminator = Mlp::new(
            &mut store,
            seed,
            "discriminator",
            &[c_last + ie.d_z, ie.t_hidden, ie.t_hidden, ie.t_hidden / 2, 1],
            LinearInit::Zero,
        );
        let disc_params: Vec<ParamId> = (disc_start..store.len()).map(crate::nn::ParamId).collect();
        let enc_dec_params: Vec<ParamId> = (0..disc_start).map(crate::nn::ParamId).collect();

        Self {
            store,
            image_size: cfg.image_size,
            channels: cfg.channels,
            d_z: ie.d_z,
            bottleneck,
            widths,
            encoder,
            to_latent,
            from_latent,
            decoder,
            out_conv,
            moment_head,
            discriminator,
            enc_dec_params,
            disc_params,
        }
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn encoder_decoder_params(&self) -> Vec<ParamId> {
        self.enc_dec_params.clone()
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.disc_params.clone()
    }

    fn check_input(&self, batch: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = batch.dim();
        if c != self.channels || h != self.image_size || w != self.image_size {
            return Err(Error::Shape {
                ctx: "ie-net input",
                expected: format!("{}x{}x{}", self.channels, self.image_size, self.image_size),
                got: format!("{c}x{h}x{w}"),
            });
        }
        Ok(())
    }

    /// Encoder forward; returns (final pooled feature map, latent z).
    fn encode_graph(&self, ctx: &mut Ctx, x: NodeId) -> (NodeId, NodeId) {
        let mut h = x;
        for block in &self.encoder {
            h = block.forward(ctx, h);
            h = ctx.tape.maxpool2d(h, 2, 2, 0);
        }
        let n = ctx.tape.value(h).shape()[0];
        let c_last = *self.widths.last().unwrap();
        let flat = ctx
            .tape
            .reshape(h, &[n, c_last * self.bottleneck * self.bottleneck]);
        let z = self.to_latent.forward(ctx, flat);
        (h, z)
    }

    /// Decoder forward from latent z to sigmoid image.
    fn decode_graph(&self, ctx: &mut Ctx, z: NodeId) -> NodeId {
        let n = ctx.tape.value(z).shape()[0];
        let c_last = *self.widths.last().unwrap();
        let h0 = self.from_latent.forward(ctx, z);
        let h0 = ctx.tape.relu(h0);
        let mut h = ctx
            .tape
            .reshape(h0, &[n, c_last, self.bottleneck, self.bottleneck]);
        for block in &self.decoder {
            h = ctx.tape.upsample_nearest2x(h);
            h = block.forward(ctx, h);
        }
        let out = self.out_conv.forward(ctx, h);
        ctx.tape.sigmoid(out)
    }

    /// Moment head over the latent batch. Pooled mode summarizes the batch by
    /// its mean code (order-invariant); per-sample mode emits one row each.
    fn moments_graph(&self, ctx: &mut Ctx, z: NodeId, per_sample: bool) -> (NodeId, NodeId) {
        let input = if per_sample { z } else { ctx.tape.row_mean(z) };
        let out = self.moment_head.forward(ctx, input);
        let mu = ctx.tape.slice_axis1(out, 0, self.d_z);
        let logvar = ctx.tape.slice_axis1(out, self.d_z, 2 * self.d_z);
        (mu, logvar)
    }

    /// Discriminator probability for (pooled image summary, code) rows.
    fn discriminate_graph(&self, ctx: &mut Ctx, pooled: NodeId, z: NodeId) -> NodeId {
        let joint = ctx.tape.concat_axis1(&[pooled, z]);
        let logit = self.discriminator.forward(ctx, joint);
        ctx.tape.sigmoid(logit)
    }

    fn mi_loss_graph(&self, ctx: &mut Ctx, t_pos: NodeId, t_neg: NodeId) -> NodeId {
        let pos = ctx.tape.clamp(t_pos, PROB_EPS, 1.0 - PROB_EPS);
        let pos = ctx.tape.ln(pos);
        let pos = ctx.tape.mean_all(pos);
        let pos = ctx.tape.scale(pos, -1.0);
        let neg = ctx.tape.one_minus(t_neg);
        let neg = ctx.tape.clamp(neg, PROB_EPS, 1.0 - PROB_EPS);
        let neg = ctx.tape.ln(neg);
        let neg = ctx.tape.mean_all(neg);
        let neg = ctx.tape.scale(neg, -1.0);
        ctx.tape.add(pos, neg)
    }

    // ------------------------------------------------------------------
    // inference API
    // ------------------------------------------------------------------

    /// Latent code of one preprocessed image.
    pub fn encode(&self, x: &ImageTensor) -> Result<Array1<f64>> {
        let batch = self.encode_batch(&stack(std::slice::from_ref(x))?)?;
        Ok(batch.index_axis(Axis(0), 0).to_owned())
    }

    /// Latent codes of a batch, row i belonging to image i.
    pub fn encode_batch(&self, batch: &Array4<f64>) -> Result<Array2<f64>> {
        self.check_input(batch)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape, &self.store);
        let x = ctx.tape.constant(batch.clone().into_dyn());
        let (_, z) = self.encode_graph(&mut ctx, x);
        Ok(tape
            .value(z)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap())
    }

    /// Moments of a latent batch through the pooled head.
    pub fn estimate_moments(&self, z_batch: &Array2<f64>) -> Result<MomentEstimate> {
        if z_batch.nrows() == 0 {
            return Err(Error::EmptyInput("estimate_moments batch"));
        }
        if z_batch.ncols() != self.d_z {
            return Err(Error::Shape {
                ctx: "estimate_moments",
                expected: format!("{}", self.d_z),
                got: format!("{}", z_batch.ncols()),
            });
        }
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape, &self.store);
        let z = ctx.tape.constant(z_batch.clone().into_dyn());
        let (mu, logvar) = self.moments_graph(&mut ctx, z, false);
        let mu = tape.value(mu).iter().copied().collect::<Array1<f64>>();
        let sigma = tape
            .value(logvar)
            .iter()
            .map(|lv| (0.5 * lv).exp())
            .collect::<Array1<f64>>();
        Ok(MomentEstimate { mu, sigma })
    }

    /// Discriminator probability that (x, z) is a joint sample.
    pub fn discriminate(&self, x: &ImageTensor, z: &Array1<f64>) -> Result<f64> {
        if z.len() != self.d_z {
            return Err(Error::Shape {
                ctx: "discriminate code",
                expected: format!("{}", self.d_z),
                got: format!("{}", z.len()),
            });
        }
        let batch = stack(std::slice::from_ref(x))?;
        self.check_input(&batch)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape, &self.store);
        let xin = ctx.tape.constant(batch.into_dyn());
        let (feat, _) = self.encode_graph(&mut ctx, xin);
        let pooled = ctx.tape.global_avg_pool(feat);
        let zin = ctx
            .tape
            .constant(z.clone().insert_axis(Axis(0)).into_dyn());
        let prob = self.discriminate_graph(&mut ctx, pooled, zin);
        Ok(tape.scalar(prob))
    }

    /// Discriminator loss on a batch with explicit negatives: `perm` shuffles
    /// the image summaries and `z_prior` supplies one marginal code per row.
    pub fn mi_discriminator_loss(
        &self,
        batch: &Array4<f64>,
        perm: &[usize],
        z_prior: &Array2<f64>,
    ) -> Result<f64> {
        self.check_input(batch)?;
        let n = batch.dim().0;
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape, &self.store);
        let xin = ctx.tape.constant(batch.clone().into_dyn());
        let (feat, z) = self.encode_graph(&mut ctx, xin);
        let pooled = ctx.tape.global_avg_pool(feat);
        let t_pos = self.discriminate_graph(&mut ctx, pooled, z);
        let shuffled = ctx.tape.permute_axis0(pooled, perm);
        let zp = ctx.tape.constant(z_prior.clone().into_dyn());
        let t_neg = self.discriminate_graph(&mut ctx, shuffled, zp);
        let loss = self.mi_loss_graph(&mut ctx, t_pos, t_neg);
        Ok(tape.scalar(loss))
    }

    /// Plain reconstruction error `mean |D(E(x)) - x|` of one image.
    pub fn reconstruction_loss(&self, x: &ImageTensor) -> Result<f64> {
        let m = self.extract_impression(x)?;
        Ok((m.array() - x.array()).mapv(f64::abs).mean().unwrap())
    }

    /// The anomaly-free impression `m = D(E(x))`.
    pub fn extract_impression(&self, x: &ImageTensor) -> Result<ImageTensor> {
        let batch = stack(std::slice::from_ref(x))?;
        let out = self.extract_impression_batch(&batch)?;
        let arr = out.index_axis(Axis(0), 0).to_owned();
        ImageTensor::new(arr)
    }

    pub fn extract_impression_batch(&self, batch: &Array4<f64>) -> Result<Array4<f64>> {
        self.check_input(batch)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape, &self.store);
        let x = ctx.tape.constant(batch.clone().into_dyn());
        let (_, z) = self.encode_graph(&mut ctx, x);
        let m = self.decode_graph(&mut ctx, z);
        Ok(tape
            .value(m)
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap())
    }

    // ------------------------------------------------------------------
    // training
    // ------------------------------------------------------------------

    /// One alternating training step: a discriminator update on the
    /// cross-entropy, then an encoder/decoder/moment-head update on the full
    /// objective evaluated against the refreshed discriminator.
    pub fn train_step(
        &mut self,
        batch: &Array4<f64>,
        cfg: &IeConfig,
        use_mi: bool,
        opt_disc: &mut Sgd,
        opt_enc_dec: &mut Sgd,
        rng: &mut ChaCha8Rng,
    ) -> Result<IeStepStats> {
        self.check_input(batch)?;
        let n = batch.dim().0;

        if !use_mi {
            // reconstruction-only baseline
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &self.store);
            let x = ctx.tape.constant(batch.clone().into_dyn());
            let (_, z) = self.encode_graph(&mut ctx, x);
            let m = self.decode_graph(&mut ctx, z);
            let l_d = ctx.tape.l1(m, x);
            let total = ctx.tape.scale(l_d, cfg.lambda_rec);
            let stats = IeStepStats {
                l_t: 0.0,
                kl: 0.0,
                l_d: tape.scalar(l_d),
                total: tape.scalar(total),
            };
            let grads = tape.backward(total);
            opt_enc_dec.step(&mut self.store, &grads);
            return Ok(stats);
        }

        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let perm = derangement(rng, n)?;
        let eta = Array2::from_shape_fn((n, self.d_z), |_| crate::nn::init::normal(rng));

        let mut tape = Tape::new();

        // shared forward
        let (pooled, z, mu, logvar, z_tilde, m) = {
            let mut ctx = Ctx::new(&mut tape, &self.store);
            let x = ctx.tape.constant(batch.clone().into_dyn());
            let (feat, z) = self.encode_graph(&mut ctx, x);
            let pooled = ctx.tape.global_avg_pool(feat);
            let (mu, logvar) = self.moments_graph(&mut ctx, z, cfg.kl_per_sample);
            let half = ctx.tape.scale(logvar, 0.5);
            let sigma = ctx.tape.exp(half);
            let noise = ctx.tape.constant(eta.into_dyn());
            let z_tilde = if cfg.kl_per_sample {
                let scaled = ctx.tape.mul(noise, sigma);
                ctx.tape.add(scaled, mu)
            } else {
                let scaled = ctx.tape.row_broadcast_mul(noise, sigma);
                ctx.tape.row_broadcast_add(scaled, mu)
            };
            let m = self.decode_graph(&mut ctx, z);
            (pooled, z, mu, logvar, z_tilde, m)
        };

        // discriminator step on detached inputs
        {
            let mut ctx = Ctx::new(&mut tape, &self.store);
            let pooled_d = ctx.tape.detach(pooled);
            let z_d = ctx.tape.detach(z);
            let zt_d = ctx.tape.detach(z_tilde);
            let t_pos = self.discriminate_graph(&mut ctx, pooled_d, z_d);
            let shuffled = ctx.tape.permute_axis0(pooled_d, &perm);
            let t_neg = self.discriminate_graph(&mut ctx, shuffled, zt_d);
            let loss_t = self.mi_loss_graph(&mut ctx, t_pos, t_neg);
            let grads = tape.backward(loss_t);
            opt_disc.step(&mut self.store, &grads);
        }

        // encoder/decoder step against the refreshed discriminator
        let (l_t, kl, l_d, total) = {
            let mut ctx = Ctx::new(&mut tape, &self.store);
            let t_pos = self.discriminate_graph(&mut ctx, pooled, z);
            let shuffled = ctx.tape.permute_axis0(pooled, &perm);
            let t_neg = self.discriminate_graph(&mut ctx, shuffled, z_tilde);
            let l_t = self.mi_loss_graph(&mut ctx, t_pos, t_neg);
            let kl = ctx.tape.kl_std_normal(mu, logvar);
            let x = ctx.tape.constant(batch.clone().into_dyn());
            let l_d = ctx.tape.l1(m, x);
            let kl_w = ctx.tape.scale(kl, cfg.lambda_mi);
            let ld_w = ctx.tape.scale(l_d, cfg.lambda_rec);
            let partial = ctx.tape.add(l_t, kl_w);
            let total = ctx.tape.add(partial, ld_w);
            (l_t, kl, l_d, total)
        };
        let stats = IeStepStats {
            l_t: tape.scalar(l_t),
            kl: tape.scalar(kl),
            l_d: tape.scalar(l_d),
            total: tape.scalar(total),
        };
        let grads = tape.backward(total);
        opt_enc_dec.step(&mut self.store, &grads);
        Ok(stats)
    }

    /// Build one loss term as a graph with fixed randomness; the
    /// finite-difference checks probe exactly what training optimizes.
    /// `store` may differ from `self.store` (perturbed copies) as long as it
    /// has the same layout.
    pub fn loss_term_graph(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        batch: &Array4<f64>,
        perm: &[usize],
        eta: &Array2<f64>,
        term: IeTerm,
        cfg: &IeConfig,
    ) -> NodeId {
        let mut ctx = Ctx::new(tape, store);
        let x = ctx.tape.constant(batch.clone().into_dyn());
        let (feat, z) = self.encode_graph(&mut ctx, x);
        let pooled = ctx.tape.global_avg_pool(feat);
        let (mu, logvar) = self.moments_graph(&mut ctx, z, cfg.kl_per_sample);
        match term {
            IeTerm::Reconstruction => {
                let m = self.decode_graph(&mut ctx, z);
                ctx.tape.l1(m, x)
            }
            IeTerm::Kl => ctx.tape.kl_std_normal(mu, logvar),
            IeTerm::Discriminator | IeTerm::Total => {
                let half = ctx.tape.scale(logvar, 0.5);
                let sigma = ctx.tape.exp(half);
                let noise = ctx.tape.constant(eta.clone().into_dyn());
                let z_tilde = if cfg.kl_per_sample {
                    let scaled = ctx.tape.mul(noise, sigma);
                    ctx.tape.add(scaled, mu)
                } else {
                    let scaled = ctx.tape.row_broadcast_mul(noise, sigma);
                    ctx.tape.row_broadcast_add(scaled, mu)
                };
                let t_pos = self.discriminate_graph(&mut ctx, pooled, z);
                let shuffled = ctx.tape.permute_axis0(pooled, perm);
                let t_neg = self.discriminate_graph(&mut ctx, shuffled, z_tilde);
                let l_t = self.mi_loss_graph(&mut ctx, t_pos, t_neg);
                if matches!(term, IeTerm::Discriminator) {
                    l_t
                } else {
                    let kl = ctx.tape.kl_std_normal(mu, logvar);
                    let m = self.decode_graph(&mut ctx, z);
                    let l_d = ctx.tape.l1(m, x);
                    let kl_w = ctx.tape.scale(kl, cfg.lambda_mi);
                    let ld_w = ctx.tape.scale(l_d, cfg.lambda_rec);
                    let partial = ctx.tape.add(l_t, kl_w);
                    ctx.tape.add(partial, ld_w)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum IeTerm {
    Discriminator,
    Kl,
    Reconstruction,
    Total,
}

#[derive(Debug, Clone, Copy)]
pub struct IeStepStats {
    pub l_t: f64,
    pub kl: f64,
    pub l_d: f64,
    pub total: f64,
}

/// Weighted total per the stage-one objective; exposed for logging and
/// direct formula tests.
pub fn ie_total_from_components(l_t: f64, kl: f64, l_d: f64, lambda: f64, lambda1: f64) -> f64 {
    l_t + lambda * kl + lambda1 * l_d
}

/// Stack image tensors into an NCHW batch.
pub fn stack<T: std::borrow::Borrow<ImageTensor>>(images: &[T]) -> Result<Array4<f64>> {
    if images.is_empty() {
        return Err(Error::EmptyInput("image batch"));
    }
    let (c, h, w) = images[0].borrow().array().dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        let img = img.borrow();
        if img.array().dim() != (c, h, w) {
            return Err(Error::Shape {
                ctx: "image batch",
                expected: format!("{c}x{h}x{w}"),
                got: format!("{:?}", img.array().dim()),
            });
        }
        out.index_axis_mut(Axis(0), i).assign(img.array());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::nn::init;
    use ndarray::Array3;
    use rand::SeedableRng;

    fn mini_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::small();
        cfg.seed = 5;
        cfg.image_size = 8;
        cfg.ie.blocks = 2;
        cfg.ie.base_width = 8;
        cfg.ie.d_z = 8;
        cfg.ie.t_hidden = 8;
        cfg
    }

    fn random_batch(n: usize, cfg: &ExperimentConfig, seed: u64) -> Array4<f64> {
        let mut rng = init::rng_for(seed, "batch");
        Array4::from_shape_fn((n, cfg.channels, cfg.image_size, cfg.image_size), |_| {
            rng.random::<f64>()
        })
    }

    #[test]
    fn kl_closed_form_examples() {
        let m = MomentEstimate {
            mu: Array1::zeros(4),
            sigma: Array1::ones(4),
        };
        assert_eq!(kl_gaussian(&m).unwrap(), 0.0);

        let m = MomentEstimate {
            mu: Array1::from_vec(vec![1.0]),
            sigma: Array1::from_vec(vec![1.0]),
        };
        assert!((kl_gaussian(&m).unwrap() - 0.5).abs() < 1e-12);

        // sigma^2 = e  ->  (e - 2) / 2
        let m = MomentEstimate {
            mu: Array1::from_vec(vec![0.0]),
            sigma: Array1::from_vec(vec![std::f64::consts::E.sqrt()]),
        };
        let expected = (std::f64::consts::E - 2.0) / 2.0;
        assert!((kl_gaussian(&m).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo_integral() {
        // sample z ~ p and average ln p - ln q
        let mu = 0.4;
        let sigma: f64 = 1.3;
        let m = MomentEstimate {
            mu: Array1::from_vec(vec![mu]),
            sigma: Array1::from_vec(vec![sigma]),
        };
        let closed = kl_gaussian(&m).unwrap();

        let mut rng = init::rng_for(99, "kl-mc");
        let samples = 200_000;
        let mut acc = 0.0;
        for _ in 0..samples {
            let z = mu + sigma * init::normal(&mut rng);
            let ln_p = -0.5 * ((z - mu) / sigma).powi(2) - sigma.ln();
            let ln_q = -0.5 * z * z;
            acc += ln_p - ln_q;
        }
        let mc = acc / samples as f64;
        assert!(
            (closed - mc).abs() < 0.02,
            "closed {closed} vs monte-carlo {mc}"
        );
    }

    #[test]
    fn kl_rejects_nonpositive_sigma() {
        let m = MomentEstimate {
            mu: Array1::zeros(2),
            sigma: Array1::from_vec(vec![1.0, 0.0]),
        };
        assert_eq!(kl_gaussian(&m).unwrap_err().category(), "invalid-moments");
    }

    #[test]
    fn mi_loss_formula_examples() {
        let v = mi_loss_from_probs(&[0.5, 0.5], &[0.5, 0.5]);
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let v = mi_loss_from_probs(&[0.9], &[0.1]);
        assert!((v - (-(0.9f64.ln()) - (0.9f64.ln()))).abs() < 1e-12);
        assert!((v - 0.21072).abs() < 1e-4);

        let v = mi_loss_from_probs(&[1.0], &[0.0]);
        assert!(v < 1e-6, "perfect discrimination tends to zero, got {v}");
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        assert_eq!(ie_total_from_components(1.0, 0.2, 0.3, 1.0, 1.0), 1.5);
        let v = ie_total_from_components(1.3863, 0.5, 0.1, 0.5, 10.0);
        assert!((v - 2.6363).abs() < 1e-9);
        assert_eq!(ie_total_from_components(1.7, 9.0, 9.0, 0.0, 0.0), 1.7);
    }

    #[test]
    fn untrained_discriminator_outputs_half() {
        let cfg = mini_config();
        let net = IeNet::new(&cfg);
        let img = ImageTensor::new(Array3::from_elem((3, 8, 8), 0.25)).unwrap();
        let z = Array1::from_elem(8, 0.3);
        let p = net.discriminate(&img, &z).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn encode_is_deterministic_and_matches_batch() {
        let cfg = mini_config();
        let net = IeNet::new(&cfg);
        let batch = random_batch(3, &cfg, 31);
        let z1 = net.encode_batch(&batch).unwrap();
        let z2 = net.encode_batch(&batch).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(z1.dim(), (3, 8));

        for i in 0..3 {
            let img = ImageTensor::new(batch.index_axis(Axis(0), i).to_owned()).unwrap();
            let zi = net.encode(&img).unwrap();
            let diff = (&zi - &z1.index_axis(Axis(0), i))
                .iter()
                .map(|d| d.abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-5, "row {i} differs by {diff}");
        }
    }

    #[test]
    fn moments_are_positive_and_order_invariant() {
        let cfg = mini_config();
        let mut net = IeNet::new(&cfg);
        // nudge the head away from its zero init so the check is non-trivial
        let mut rng = init::rng_for(77, "nudge");
        for (_, name, _) in net.store.clone().iter() {
            if name.starts_with("moments") {
                let id = net.store.id_of(name).unwrap();
                for v in net.store.value_mut(id).iter_mut() {
                    *v += 0.1 * init::normal(&mut rng);
                }
            }
        }
        let z = Array2::from_shape_fn((5, 8), |(i, j)| (i as f64 - j as f64) * 0.07);
        let m = net.estimate_moments(&z).unwrap();
        assert!(m.sigma.iter().all(|s| *s > 0.0));

        let permuted = z.select(Axis(0), &[4, 2, 0, 1, 3]);
        let m2 = net.estimate_moments(&permuted).unwrap();
        let diff = (&m.mu - &m2.mu)
            .iter()
            .chain((&m.sigma - &m2.sigma).iter())
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "moments moved under permutation: {diff}");

        let err = net.estimate_moments(&Array2::zeros((0, 8))).unwrap_err();
        assert_eq!(err.category(), "empty-input");
    }

    #[test]
    fn impression_shape_and_range() {
        let cfg = mini_config();
        let net = IeNet::new(&cfg);
        let img = ImageTensor::new(Array3::from_elem((3, 8, 8), 0.7)).unwrap();
        let m = net.extract_impression(&img).unwrap();
        assert_eq!(m.array().dim(), (3, 8, 8));
        assert!(m.array().iter().all(|v| *v > 0.0 && *v < 1.0));
        let m2 = net.extract_impression(&img).unwrap();
        assert_eq!(m.array(), m2.array());
    }

    #[test]
    fn mi_discriminator_loss_requires_batch_of_two() {
        let cfg = mini_config();
        let net = IeNet::new(&cfg);
        let batch = random_batch(1, &cfg, 3);
        let err = net
            .mi_discriminator_loss(&batch, &[0], &Array2::zeros((1, 8)))
            .unwrap_err();
        assert_eq!(err.category(), "batch-too-small");
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for n in 2..12 {
            for _ in 0..20 {
                let p = derangement(&mut rng, n).unwrap();
                assert!(p.iter().enumerate().all(|(i, v)| i != *v));
                let mut sorted = p.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            }
        }
        assert!(derangement(&mut rng, 1).is_err());
    }

    #[test]
    fn every_loss_term_matches_finite_differences() {
        let cfg = mini_config();
        let mut net = IeNet::new(&cfg);
        // move heads off their zero init so gradients reach every layer
        let mut rng = init::rng_for(13, "warm");
        let names: Vec<String> = net.store.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            if name.starts_with("moments") || name.starts_with("discriminator") {
                let id = net.store.id_of(&name).unwrap();
                for v in net.store.value_mut(id).iter_mut() {
                    *v += 0.05 * init::normal(&mut rng);
                }
            }
        }

        let batch = random_batch(3, &cfg, 8);
        let mut prng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let perm = derangement(&mut prng, 3).unwrap();
        let eta = Array2::from_shape_fn((3, cfg.ie.d_z), |_| init::normal(&mut prng));

        let mut probe_store = net.store.clone();
        for term in [
            IeTerm::Discriminator,
            IeTerm::Kl,
            IeTerm::Reconstruction,
            IeTerm::Total,
        ] {
            let report = crate::nn::gradcheck::check_gradients(
                &mut probe_store,
                |store| {
                    let mut tape = Tape::new();
                    let loss =
                        net.loss_term_graph(store, &mut tape, &batch, &perm, &eta, term, &cfg.ie);
                    let value = tape.scalar(loss);
                    let grads = tape.backward(loss);
                    (value, grads)
                },
                &crate::nn::gradcheck::GradCheckOptions {
                    coords_per_param: 3,
                    seed: 55,
                    h_scale: 1e-6,
                    rtol: 1e-3,
                    atol: 1e-9,
                },
            );
            assert!(report.ok(), "term {term:?}: {}", report.describe());
        }
    }
}
