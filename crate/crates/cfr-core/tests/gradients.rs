//! End-to-end finite-difference verification of every analytic
//! gradient in the model.

use cfr_core::data::{gen_synthetic, SampleBundle, SynthConfig};
use cfr_core::fusion::SoftmaxAxis;
use cfr_core::gradcheck::grad_check;
use cfr_core::model::{init_params, TextContext};
use cfr_core::text::build_filter;
use cfr_core::train::batch_loss_and_grads;
use cfr_core::{AblationMode, CfrConfig, CfrParams};

fn tiny_batch(seed: u64) -> (Vec<SampleBundle>, TextContext, CfrConfig) {
    let scfg = SynthConfig {
        objects: 5,
        attrs: 3,
        emb_dim: 5,
        scene_min: 2,
        scene_max: 3,
        noise: 0.2,
        dropout: 0.0,
        ghost_rate: 0.5,
        train_n: 4,
        val_n: 0,
        seed,
    };
    let data = gen_synthetic(&scfg).unwrap();
    let config = CfrConfig {
        d_emb: scfg.emb_dim,
        d_q: 4,
        d_i: scfg.feature_dim(),
        d_psi: 4,
        d_cg: 4,
        d_fg: 4,
        n_answers: scfg.attrs,
        softmax_axis: SoftmaxAxis::Flat,
        learnable_channel_scale: false,
        seed,
    };
    let filter = build_filter(&data.stop_words, &data.vocab, 0);
    let ctx = TextContext { vocab: data.vocab, table: data.table, question_filter: filter };
    (data.train, ctx, config)
}

fn check_mode(mode: AblationMode, config: CfrConfig, batch: &[SampleBundle], ctx: &TextContext) {
    let params = init_params(&config, config.seed.wrapping_add(17));
    let (_, analytic) = batch_loss_and_grads(batch, &params, ctx, &config, mode).unwrap();
    let loss_fn = |p: &CfrParams| {
        batch_loss_and_grads(batch, p, ctx, &config, mode).map(|(loss, _)| loss)
    };
    let report = grad_check(loss_fn, &params, &analytic, 1e-5, 1e-4).unwrap();
    let worst = report
        .per_param
        .iter()
        .max_by(|a, b| a.max_rel_error.partial_cmp(&b.max_rel_error).unwrap())
        .unwrap();
    assert!(
        report.pass,
        "{mode:?} gradcheck failed; worst tensor {} with rel err {:.3e}",
        worst.name, worst.max_rel_error
    );
}

#[test]
fn full_model_gradients_three_seeds() {
    for seed in [1, 2, 3] {
        let (batch, ctx, config) = tiny_batch(seed);
        check_mode(AblationMode::Full, config, &batch, &ctx);
    }
}

#[test]
fn coarse_only_gradients() {
    let (batch, ctx, config) = tiny_batch(11);
    check_mode(AblationMode::CoarseOnly, config, &batch, &ctx);
}

#[test]
fn fine_only_gradients() {
    let (batch, ctx, config) = tiny_batch(12);
    check_mode(AblationMode::FineOnly, config, &batch, &ctx);
}

#[test]
fn row_softmax_axis_gradients() {
    let (batch, ctx, mut config) = tiny_batch(13);
    config.softmax_axis = SoftmaxAxis::Rows;
    check_mode(AblationMode::Full, config, &batch, &ctx);
}

#[test]
fn learnable_channel_scale_gradients() {
    let (batch, ctx, mut config) = tiny_batch(14);
    config.learnable_channel_scale = true;
    check_mode(AblationMode::Full, config, &batch, &ctx);
}
