mod common;

use aqs_tensor::{ParamStore, Tape, Tensor};
use aqsnet::backbone::FeaturePyramid;
use aqsnet::layers::{Ctx, Init, Mode};
use aqsnet::loss::{combined_loss, LossConfig};
use aqsnet::neck::{Aspp, Neck};
use aqsnet::{AqsError, AqsNet, AuxSource, ModelConfig};
use common::{random_image, random_mask, rng, zero_prefix};
use proptest::prelude::*;
use rand::Rng;

fn neck(cfg: &ModelConfig) -> (ParamStore, Neck) {
    let mut store = ParamStore::new();
    let n = Neck::new(&mut Init::new(&mut store, 11), cfg).unwrap();
    (store, n)
}

fn randn(dims: &[usize], seed: u64) -> Tensor {
    Tensor::randn(dims.to_vec(), 1.0, &mut rng(seed))
}

/// ResNet-shaped and ViT-shaped pyramids for a `h × w` input.
fn pyramids(ctx: &mut Ctx, cfg: &ModelConfig, b: usize, h: usize, w: usize, seed: u64) -> (FeaturePyramid, FeaturePyramid) {
    let c = cfg.stage_channels;
    let d = cfg.vit.embed_dim;
    let r: Vec<_> = (0..4).map(|i| ctx.tape.input(randn(&[b, c[i], h >> (i + 2), w >> (i + 2)], seed + i as u64))).collect();
    let v: Vec<_> = (0..4).map(|i| ctx.tape.input(randn(&[b, d, h / 16, w / 16], seed + 10 + i as u64))).collect();
    (
        FeaturePyramid { stages: r.try_into().unwrap(), scales: [4, 8, 16, 32], channels: c },
        FeaturePyramid { stages: v.try_into().unwrap(), scales: [16; 4], channels: [d; 4] },
    )
}

#[test]
fn first_stage_fuses_at_resnet_extent_and_last_at_vit_extent() {
    let cfg = ModelConfig::default();
    let (store, n) = neck(&cfg);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let (r, v) = pyramids(&mut ctx, &cfg, 1, 64, 64, 0);
    let f1 = n.align_and_fuse(&mut ctx, 0, r.stages[0], Some(v.stages[0])).unwrap();
    let f4 = n.align_and_fuse(&mut ctx, 3, r.stages[3], Some(v.stages[3])).unwrap();
    assert_eq!(ctx.tape.dims(r.stages[3]), &[1, 512, 2, 2]);
    assert_eq!(ctx.tape.dims(f1), &[1, 64, 16, 16]);
    assert_eq!(ctx.tape.dims(f4), &[1, 512, 4, 4]);
}

#[test]
fn zeroed_alignment_makes_fusion_independent_of_vit_input() {
    let cfg = ModelConfig::compact();
    let (mut store, n) = neck(&cfg);
    for i in 1..=4 {
        zero_prefix(&mut store, &format!("neck.align{i}."));
    }
    let run = |vit_seed: u64| {
        let mut ctx = Ctx::new(&store, Mode::Train);
        let (r, _) = pyramids(&mut ctx, &cfg, 2, 64, 64, 0);
        let (_, v) = pyramids(&mut ctx, &cfg, 2, 64, 64, vit_seed);
        (0..4).map(|i| {
            let f = n.align_and_fuse(&mut ctx, i, r.stages[i], Some(v.stages[i])).unwrap();
            ctx.tape.value(f)
        }).collect::<Vec<_>>()
    };
    assert_eq!(run(100), run(200));
}

#[test]
fn batch_mismatch_between_branches_names_the_stage() {
    let cfg = ModelConfig::compact();
    let (store, n) = neck(&cfg);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let (r, _) = pyramids(&mut ctx, &cfg, 2, 64, 64, 0);
    let (_, v) = pyramids(&mut ctx, &cfg, 1, 64, 64, 0);
    let err = n.align_and_fuse(&mut ctx, 1, r.stages[1], Some(v.stages[1])).unwrap_err();
    assert!(err.to_string().contains("stage 2"), "{err}");
}

fn aspp_f64(channels: usize, rates: &[usize]) -> (ParamStore<f64>, Aspp) {
    let mut store = ParamStore::new();
    let a = Aspp::new(&mut Init::new(&mut store, 4), "aspp", channels, rates, 1e-5).unwrap();
    (store, a)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn aspp_preserves_spatial_extent(h in 1usize..14, w in 1usize..14, b in 1usize..3) {
        let (store, a) = aspp_f64(8, &[1, 6, 12, 18]);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = ctx.tape.input(Tensor::randn(vec![b, 8, h, w], 1.0, &mut rng(h as u64 * 31 + w as u64)));
        let y = a.forward(&mut ctx, x).unwrap();
        prop_assert_eq!(ctx.tape.dims(y), &[b, 8, h, w]);
    }
}

#[test]
fn zeroed_aspp_outputs_zero() {
    let (mut store, a) = aspp_f64(8, &[1, 6, 12, 18]);
    zero_prefix(&mut store, "aspp.");
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let x = ctx.tape.input(Tensor::randn(vec![2, 8, 5, 7], 1.0, &mut rng(0)));
    let y = a.forward(&mut ctx, x).unwrap();
    assert!(ctx.tape.data(y).iter().all(|&v| v == 0.0));
}

/// Nested-loop dilated 3×3 convolution with `same` padding.
fn dilated_conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, rate: usize) -> Vec<f64> {
    let (b, cin, h, wd) = x.nchw().unwrap();
    let cout = w.dims()[0];
    let mut out = vec![0.0; b * cout * h * wd];
    for n in 0..b {
        for o in 0..cout {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let y = i as isize + (ki as isize - 1) * rate as isize;
                                let z = j as isize + (kj as isize - 1) * rate as isize;
                                if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < wd {
                                    acc += x.at(&[n, c, y as usize, z as usize]) * w.at(&[o, c, ki, kj]);
                                }
                            }
                        }
                    }
                    out[((n * cout + o) * h + i) * wd + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn aspp_branch_matches_dilated_convolution_oracle() {
    let mut r = rng(21);
    for trial in 0..20 {
        let (store, a) = aspp_f64(4, &[1, 2, 3, 6]);
        let (h, w) = (r.random_range(4..=10), r.random_range(4..=10));
        let branch = trial % 4;
        let x = Tensor::randn(vec![2, 4, h, w], 1.0, &mut r);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let xv = ctx.tape.input(x.clone());
        let y = a.branch(&mut ctx, branch, xv).unwrap();
        let rate = Aspp::effective_rate(a.rates[branch], h, w);
        let conv = dilated_conv_oracle(&x, store.value(a.branches[branch].conv.weight), rate);
        // Fresh batch norm in eval mode: unit gamma, zero beta, zero mean, unit variance.
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (got, c) in ctx.tape.data(y).iter().zip(conv) {
            assert!((got - (c * scale).max(0.0)).abs() < 1e-6, "trial {trial}");
        }
    }
}

#[test]
fn aspp_rates_are_clamped_to_the_feature_extent() {
    assert_eq!(Aspp::effective_rate(18, 4, 4), 3);
    assert_eq!(Aspp::effective_rate(6, 32, 32), 6);
    assert_eq!(Aspp::effective_rate(12, 1, 1), 1);
}

fn neck_maps(cfg: &ModelConfig, h: usize, w: usize, shape_only: bool) -> Vec<Vec<usize>> {
    let net = AqsNet::<f32>::new(cfg).unwrap();
    let tape = if shape_only { Tape::shape_only() } else { Tape::new() };
    let mut ctx = Ctx::with_tape(&net.store, Mode::Eval, tape);
    let (image, mask) = if shape_only {
        (ctx.tape.placeholder(&[1, 3, h, w]), ctx.tape.placeholder(&[1, 1, h, w]))
    } else {
        (ctx.tape.input(random_image(&[1, 3, h, w], &mut rng(1))), ctx.tape.input(random_mask(&[1, 1, h, w], &mut rng(2))))
    };
    let out = net.forward(&mut ctx, image, mask).unwrap();
    out.neck.iter().map(|&m| ctx.tape.dims(m).to_vec()).collect()
}

#[test]
fn neck_contract_at_64() {
    let maps = neck_maps(&ModelConfig::default(), 64, 64, false);
    assert_eq!(maps, [vec![1, 64, 16, 16], vec![1, 128, 8, 8], vec![1, 256, 4, 4], vec![1, 512, 4, 4]]);
}

#[test]
fn neck_contract_at_512_in_shape_mode() {
    let maps = neck_maps(&ModelConfig::default(), 512, 512, true);
    assert_eq!(maps, [vec![1, 64, 128, 128], vec![1, 128, 64, 64], vec![1, 256, 32, 32], vec![1, 512, 32, 32]]);
}

#[test]
fn baseline_without_fusion_keeps_the_contract() {
    let cfg = ModelConfig { pretrained_fusion: false, ..ModelConfig::default() };
    let net = AqsNet::<f32>::new(&cfg).unwrap();
    assert!(net.vit.is_none() && net.neck.align.is_none());
    assert!(net.store.iter().all(|(_, name, _, _)| !name.starts_with("vit.")));
    assert_eq!(neck_maps(&cfg, 64, 96, false), [vec![1, 64, 16, 24], vec![1, 128, 8, 12], vec![1, 256, 4, 6], vec![1, 512, 4, 6]]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn neck_contract_holds_for_any_size_divisible_by_32(hk in 1usize..12, wk in 1usize..12, fusion in any::<bool>()) {
        let cfg = ModelConfig { pretrained_fusion: fusion, ..ModelConfig::compact() };
        let (h, w) = (32 * hk, 32 * wk);
        let maps = neck_maps(&cfg, h, w, true);
        let c = cfg.stage_channels;
        for (i, s) in [4, 8, 16, 16].iter().enumerate() {
            prop_assert_eq!(&maps[i], &vec![1, c[i], h / s, w / s]);
        }
    }
}

fn aux_logits(net: &AqsNet, h: usize, w: usize) -> Option<Tensor> {
    let mut ctx = Ctx::new(&net.store, Mode::Eval);
    let image = ctx.tape.input(random_image(&[1, 3, h, w], &mut rng(1)));
    let mask = ctx.tape.input(random_mask(&[1, 1, h, w], &mut rng(2)));
    let out = net.forward(&mut ctx, image, mask).unwrap();
    out.aux.map(|a| ctx.tape.value(a))
}

#[test]
fn aux_head_reads_n4_and_upsamples_to_input() {
    let net = AqsNet::<f32>::new(&ModelConfig::default()).unwrap();
    let head = net.neck.aux_head.as_ref().unwrap();
    assert_eq!(net.store.value(head.weight).dims(), &[3, 512, 1, 1]);
    assert_eq!(aux_logits(&net, 64, 64).unwrap().dims(), &[1, 3, 64, 64]);
    let finest = AqsNet::<f32>::new(&ModelConfig { aux_source: AuxSource::Finest, ..ModelConfig::compact() }).unwrap();
    let head = finest.neck.aux_head.as_ref().unwrap();
    assert_eq!(finest.store.value(head.weight).dims(), &[3, 16, 1, 1]);
}

#[test]
fn zeroed_aux_head_gives_uniform_probabilities() {
    let mut net = AqsNet::<f32>::new(&ModelConfig::compact()).unwrap();
    zero_prefix(&mut net.store, "aux_head.");
    let logits = aux_logits(&net, 64, 64).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let mut tape = Tape::<f32>::new();
    let x = tape.input(logits);
    let p = tape.softmax(x, 1).unwrap();
    assert!(tape.data(p).iter().all(|&v| v == 1.0 / 3.0));
}

#[test]
fn disabled_aux_head_has_no_output_and_no_loss_term() {
    let net = AqsNet::<f32>::new(&ModelConfig { aux_enabled: false, ..ModelConfig::compact() }).unwrap();
    assert!(net.neck.aux_head.is_none());
    assert!(net.store.iter().all(|(_, name, _, _)| !name.starts_with("aux_head.")));
    assert!(aux_logits(&net, 64, 64).is_none());
    let mut tape = Tape::<f32>::new();
    let l = tape.input(Tensor::zeros(vec![1, 3, 2, 2]));
    let loss = combined_loss(&mut tape, l, None, &[0; 4], &[0; 4], &LossConfig::default()).unwrap();
    assert!(loss.aux.is_none());
    assert_eq!(loss.total, loss.main.total);
}

#[test]
fn every_trainable_neck_parameter_receives_gradient() {
    let net = AqsNet::<f32>::new(&ModelConfig::compact()).unwrap();
    let mut r = rng(8);
    let mut ctx = Ctx::new(&net.store, Mode::Train);
    let image = ctx.tape.input(random_image(&[4, 3, 64, 64], &mut r));
    let mask = ctx.tape.input(random_mask(&[4, 1, 64, 64], &mut r));
    let labels: Vec<u8> = (0..4 * 64 * 64).map(|_| r.random_range(0..3)).collect();
    let out = net.forward(&mut ctx, image, mask).unwrap();
    let loss = combined_loss(&mut ctx.tape, out.logits, out.aux, &labels, &labels, &LossConfig::default()).unwrap();
    let grads = ctx.tape.backward(loss.total).unwrap().param_grads(&ctx.tape);
    let mut checked = 0;
    for id in net.store.ids().filter(|&id| net.store.is_trainable(id)) {
        let name = net.store.name(id);
        if !(name.starts_with("neck.") || name.starts_with("aux_head.")) {
            continue;
        }
        let g = grads.iter().find(|(g, _)| *g == id).map(|(_, t)| t).unwrap_or_else(|| panic!("no gradient for {name}"));
        let norm: f64 = g.data().iter().map(|&v| (v as f64).powi(2)).sum();
        assert!(norm > 0.0, "zero gradient for {name}");
        checked += 1;
    }
    assert!(checked > 50);
}

#[test]
fn fusion_rejects_missing_vit_features() {
    let cfg = ModelConfig::compact();
    let (store, n) = neck(&cfg);
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let (r, _) = pyramids(&mut ctx, &cfg, 1, 64, 64, 0);
    assert!(matches!(n.forward(&mut ctx, &r, None, 64, 64), Err(AqsError::Usage(_))));
}
