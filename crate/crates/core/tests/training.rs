mod common;

use common::{tiny_config, tiny_model};
use mixmodal_core::config::HeadKind;
use mixmodal_core::heads::DiffusionDraw;
use mixmodal_core::model::groups;
use mixmodal_core::nn::Ctx;
use mixmodal_core::rng::RngStreams;
use mixmodal_core::training::{
    batch_loss, caption_to_image, combined_loss, image_to_caption, metrics_json, metrics_line, Batch, LossWeights,
    StageKind, StepLosses, Trainer,
};
use mixmodal_core::vocab::{BOI, EOS};
use mixmodal_core::{Error, Model};

const ALL_GROUPS: [&str; 7] = [
    groups::TEXT_EMBED,
    groups::VISION_EMBED,
    groups::BACKBONE,
    groups::LM_HEAD,
    groups::DIFF_HEAD,
    groups::MSE_HEAD,
    groups::AUTOENCODER,
];

fn digests(m: &Model<f64>) -> Vec<(&'static str, [u8; 32])> {
    ALL_GROUPS.iter().map(|&g| (g, m.params.group_digest(g))).collect()
}

fn changed_groups(before: &[(&'static str, [u8; 32])], after: &Model<f64>) -> Vec<&'static str> {
    before
        .iter()
        .filter(|(g, d)| after.params.group_digest(g) != *d)
        .map(|(g, _)| *g)
        .collect()
}

#[test]
fn combined_loss_arithmetic() {
    assert_eq!(combined_loss(2.0, 0.03, 100.0), 5.0);
    assert_eq!(combined_loss(1.25, 7.0, 0.0), 1.25);
}

#[test]
fn text_and_patch_targets_reach_only_their_heads() {
    let cfg = tiny_config();
    let (mut model, data) = tiny_model(&cfg, 1);
    model.params.set_trainable(|_| true);
    let max_len = cfg.backbone.max_len;
    let seqs = vec![
        caption_to_image(&data.captions[0], &data.features[0], max_len).unwrap(),
        image_to_caption(&data.features[1], &data.captions[1], max_len).unwrap(),
    ];
    let batch = Batch::new(seqs, model.patch_dim());
    // c2i: [BOI] and [EOS]; i2c: six words and [EOS]
    assert_eq!(batch.text_targets.len(), 2 + 7);
    assert_eq!(batch.text_targets[..2], [BOI, EOS]);
    assert_eq!(batch.patch_rows.len(), 16);

    let draw = DiffusionDraw::sample(16, model.patch_dim(), 1000, 0.0, &mut RngStreams::new(0));
    let grad_names = |ar: bool, diff: bool| {
        let mut ctx = Ctx::new(&model.params, true);
        let w = LossWeights { ar, diff, lambda: 100.0 };
        let nodes = batch_loss(&mut ctx, &model, &batch, Some(&draw), w).unwrap();
        assert_eq!(nodes.ar.is_some(), ar);
        assert_eq!(nodes.diff.is_some(), diff);
        let (_, grads) = ctx.gradients(nodes.total).unwrap();
        grads.into_iter().map(|(n, _)| n).collect::<Vec<_>>()
    };
    let ar_only = grad_names(true, false);
    assert!(ar_only.iter().any(|n| n == "lm.w"));
    assert!(ar_only.iter().all(|n| !n.starts_with("diff.")));
    let diff_only = grad_names(false, true);
    assert!(diff_only.iter().any(|n| n.starts_with("diff.")));
    assert!(diff_only.iter().all(|n| n != "lm.w"));
}

#[test]
fn total_is_ar_plus_lambda_diff() {
    let cfg = tiny_config();
    let (model, data) = tiny_model(&cfg, 2);
    let seqs = vec![caption_to_image(&data.captions[3], &data.features[3], 64).unwrap()];
    let batch = Batch::new(seqs, model.patch_dim());
    let draw = DiffusionDraw::sample(16, model.patch_dim(), 1000, 0.0, &mut RngStreams::new(1));
    let mut ctx = Ctx::new(&model.params, false);
    let w = LossWeights { ar: true, diff: true, lambda: 100.0 };
    let nodes = batch_loss(&mut ctx, &model, &batch, Some(&draw), w).unwrap();
    let (a, d, t) = (
        ctx.value(nodes.ar.unwrap()).item(),
        ctx.value(nodes.diff.unwrap()).item(),
        ctx.value(nodes.total).item(),
    );
    assert!((t - (a + 100.0 * d)).abs() < 1e-9 * t.abs());
}

#[test]
fn base_stage_moves_only_vision_embedding_and_patch_head() {
    for head in [HeadKind::Diffusion, HeadKind::Mse] {
        let mut cfg = tiny_config();
        cfg.heads.kind = head;
        let (model, data) = tiny_model(&cfg, 3);
        let before = digests(&model);
        let mut t = Trainer::new(model, StageKind::Base, 3);
        t.run(&data, 3, |_, _| {}).unwrap();
        let head_group = match head {
            HeadKind::Diffusion => groups::DIFF_HEAD,
            HeadKind::Mse => groups::MSE_HEAD,
        };
        assert_eq!(changed_groups(&before, &t.model), vec![groups::VISION_EMBED, head_group]);
    }
}

#[test]
fn post_stage_moves_everything_but_the_autoencoder() {
    let cfg = tiny_config();
    let (model, data) = tiny_model(&cfg, 4);
    let before = digests(&model);
    let mut t = Trainer::new(model, StageKind::Post, 4);
    t.run(&data, 4, |_, _| {}).unwrap();
    let changed = changed_groups(&before, &t.model);
    assert_eq!(
        changed,
        vec![groups::TEXT_EMBED, groups::VISION_EMBED, groups::BACKBONE, groups::LM_HEAD, groups::DIFF_HEAD]
    );
}

#[test]
fn non_finite_loss_aborts_without_an_update() {
    let cfg = tiny_config();
    let (mut model, data) = tiny_model(&cfg, 5);
    model.params.tensor_mut("lm.w").unwrap().data_mut()[0] = f64::NAN;
    let mut t = Trainer::new(model, StageKind::Post, 5);
    let before = t.model.params.digest(|_| true);
    let err = t.train_step(&data).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
    assert_eq!(t.model.params.digest(|_| true), before);
}

#[test]
fn untrained_caption_loss_is_near_uniform() {
    let cfg = tiny_config();
    let (model, data) = tiny_model(&cfg, 6);
    let mut t = Trainer::new(model, StageKind::Post, 6);
    let l = t.train_step(&data).unwrap();
    let ln_v = (cfg.backbone.vocab_size as f64).ln();
    assert!((l.ar.unwrap() - ln_v).abs() < 0.05 * ln_v);
}

#[test]
fn metrics_lines() {
    let l = StepLosses { ar: None, diff: Some(0.5), total: 0.5 };
    assert_eq!(metrics_line(7, &l), "7 - 0.500000 0.500000");
    assert_eq!(metrics_json(7, &l), r#"{"step":7,"ar":null,"diff":0.5,"total":0.5}"#);
}
