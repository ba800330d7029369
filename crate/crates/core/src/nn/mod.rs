//! Tensor plumbing: a small reverse-mode autodiff tape over `ndarray`
//! (f64, NCHW), deterministic initializers, and the two optimizers the
//! training schedules call for. Single-threaded on purpose — repeated runs
//! must produce identical bytes.

pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use params::{Gradients, ParamId, ParamStore, Tensor};
pub use tape::{NodeId, Tape};

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, GradCheckOptions};
    use super::layers::{Conv2d, Ctx, Linear, LinearInit, Mlp};
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::RngExt;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = init::rng_for(seed, "test-tensor");
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Every op used by the real models, composed into one scalar loss, must
    /// match central finite differences.
    #[test]
    fn omnibus_graph_matches_finite_differences() {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, 3, "conv", 2, 3, 3, 1, 1);
        let conv_s2 = Conv2d::new(&mut store, 3, "down", 3, 4, 4, 2, 1);
        let fc = Linear::new(&mut store, 3, "fc", 16, 6, LinearInit::He);
        let head = Mlp::new(&mut store, 3, "head", &[6, 5, 4], LinearInit::Scaled(0.2));
        let style = Linear::new(&mut store, 3, "style", 4, 8, LinearInit::Scaled(0.5));

        let x = rand_tensor(&[2, 2, 8, 8], 11);
        let eta = rand_tensor(&[2, 3], 13);

        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, store);
            let xin = ctx.tape.constant(x.clone());
            let h = conv.forward(&mut ctx, xin); // [2,3,8,8]
            let h = ctx.tape.relu(h);
            let pooled = ctx.tape.maxpool2d(h, 2, 2, 0); // [2,3,4,4]
            let up = ctx.tape.upsample_nearest2x(pooled); // [2,3,8,8]
            let merged = ctx.tape.concat_axis1(&[h, up]); // [2,6,8,8]
            let merged = ctx.tape.slice_axis1(merged, 1, 4); // [2,3,8,8]
            let down = conv_s2.forward(&mut ctx, merged); // [2,4,4,4]
            let down = ctx.tape.sigmoid(down);
            let gap = ctx.tape.global_avg_pool(down); // [2,4]

            // gamma/beta via a style path exercising adain's three inputs
            let sv = style.forward(&mut ctx, gap); // [2,8]
            let gamma = ctx.tape.slice_axis1(sv, 0, 4);
            let gamma = ctx.tape.add_scalar(gamma, 1.0);
            let beta = ctx.tape.slice_axis1(sv, 4, 8);
            let normed = ctx.tape.adain(down, gamma, beta, 1e-5); // [2,4,4,4]

            let flat = ctx.tape.reshape(normed, &[2, 4 * 4 * 4]);
            let flat = ctx.tape.slice_axis1(flat, 0, 16);
            let z = fc.forward(&mut ctx, flat); // [2,6]
            let moments = head.forward(&mut ctx, z); // [2,4]
            let zbar = ctx.tape.row_mean(moments); // [1,4]
            let mu = ctx.tape.slice_axis1(zbar, 0, 2);
            let logvar = ctx.tape.slice_axis1(zbar, 2, 4);
            let kl = ctx.tape.kl_std_normal(mu, logvar);

            let half_lv = ctx.tape.scale(logvar, 0.5);
            let sigma = ctx.tape.exp(half_lv);
            let noise = ctx.tape.constant(eta.clone().slice_axis(ndarray::Axis(1), ndarray::Slice::from(0..2)).to_owned().into_dyn());
            let scaled = ctx.tape.row_broadcast_mul(noise, sigma);
            let zs = ctx.tape.row_broadcast_add(scaled, mu); // [2,2]
            let shuffled = ctx.tape.permute_axis0(zs, &[1, 0]);
            let prob = ctx.tape.sigmoid(shuffled);
            let prob = ctx.tape.clamp(prob, 1e-7, 1.0 - 1e-7);
            let lnp = ctx.tape.ln(prob);
            let mi_term = ctx.tape.mean_all(lnp);
            let mi_term = ctx.tape.scale(mi_term, -1.0);

            let target = ctx.tape.constant(ArrayD::zeros(IxDyn(&[2, 4, 4, 4])));
            let rec = ctx.tape.l1(normed, target);

            let partial = ctx.tape.add(kl, mi_term);
            let loss = ctx.tape.add(partial, rec);
            let value = ctx.tape.scalar(loss);
            let grads = tape.backward(loss);
            (value, grads)
        };

        let report = check_gradients(
            &mut store,
            run,
            &GradCheckOptions {
                coords_per_param: 6,
                rtol: 1e-6,
                atol: 1e-11,
                h_scale: 1e-6,
                seed: 17,
            },
        );
        assert!(report.ok(), "finite differences disagree: {}", report.describe());
        assert!(report.checked > 40);
    }

    #[test]
    fn detach_blocks_gradients() {
        let mut store = ParamStore::new();
        let fc = Linear::new(&mut store, 5, "fc", 3, 3, LinearInit::He);
        let x = rand_tensor(&[2, 3], 7);

        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store);
        let xin = ctx.tape.constant(x);
        let y = fc.forward(&mut ctx, xin);
        let yd = ctx.tape.detach(y);
        let loss = ctx.tape.mean_all(yd);
        let grads = tape.backward(loss);
        assert!(grads.is_empty());
    }

    #[test]
    fn frozen_ctx_passes_input_gradients_only() {
        let mut store = ParamStore::new();
        let fc = Linear::new(&mut store, 5, "fc", 3, 2, LinearInit::He);
        let x = rand_tensor(&[2, 3], 9);

        let mut tape = Tape::new();
        let xin = tape.input(x);
        let mut ctx = Ctx::frozen(&mut tape, &store);
        let y = fc.forward(&mut ctx, xin);
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss);
        assert!(grads.is_empty(), "frozen params must not collect gradients");
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        // Using a layer twice must sum both contributions.
        let mut store = ParamStore::new();
        let fc = Linear::new(&mut store, 5, "fc", 2, 2, LinearInit::He);
        let x = rand_tensor(&[1, 2], 21);

        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, store);
            let xin = ctx.tape.constant(x.clone());
            let y1 = fc.forward(&mut ctx, xin);
            let y2 = fc.forward(&mut ctx, y1);
            let loss = ctx.tape.mean_all(y2);
            let value = ctx.tape.scalar(loss);
            let grads = tape.backward(loss);
            (value, grads)
        };
        let report = check_gradients(
            &mut store,
            run,
            &GradCheckOptions {
                coords_per_param: 4,
                rtol: 1e-7,
                atol: 1e-12,
                ..Default::default()
            },
        );
        assert!(report.ok(), "shared-parameter gradients wrong: {}", report.describe());
    }

    #[test]
    fn sgd_momentum_matches_hand_rolled_update() {
        let mut store = ParamStore::new();
        let id = store.insert("p", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut opt = optim::Sgd::new(&store, vec![id], 0.1, 0.9);
        let mut grads = Gradients::new();
        grads.accumulate(id, &ArrayD::from_elem(IxDyn(&[2]), 1.0));
        opt.step(&mut store, &grads);
        // v = 1, p = 1 - 0.1
        assert!((store.value(id)[[0]] - 0.9).abs() < 1e-12);
        opt.step(&mut store, &grads);
        // v = 1.9, p = 0.9 - 0.19
        assert!((store.value(id)[[0]] - 0.71).abs() < 1e-12);
    }
}
