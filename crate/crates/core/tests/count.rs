use aqs_tensor::{Conv2dOptions, ParamStore, Tape};
use aqsnet::config::{DecoderKind, ModelConfig};
use aqsnet::count::count_params_flops;
use aqsnet::layers::{Conv2d, Ctx, Init, Linear, Mode};

fn conv(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    cin * cout * k * k + if bias { cout } else { 0 }
}

/// (trainable, frozen, buffers) enumerated layer by layer.
fn hand_count(cfg: &ModelConfig) -> (usize, usize, usize) {
    let c = cfg.stage_channels;
    let mut t = 0;
    let mut buf = 0;
    let mut bn = |t: &mut usize, ch: usize| {
        *t += 2 * ch;
        buf += 2 * ch;
    };
    // Residual encoder.
    t += conv(4, c[0], 7, false);
    bn(&mut t, c[0]);
    let mut cin = c[0];
    for (i, &co) in c.iter().enumerate() {
        for b in 0..cfg.resnet_blocks {
            let (inp, stride) = if b == 0 { (cin, if i == 0 { 1 } else { 2 }) } else { (co, 1) };
            t += conv(inp, co, 3, false) + conv(co, co, 3, false);
            bn(&mut t, co);
            bn(&mut t, co);
            if stride != 1 || inp != co {
                t += conv(inp, co, 1, false);
                bn(&mut t, co);
            }
        }
        cin = co;
    }
    // Frozen encoder.
    let v = &cfg.vit;
    let d = v.embed_dim;
    let hidden = d * v.mlp_ratio;
    let block = 2 * (2 * d) + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d);
    let frozen = if cfg.pretrained_fusion { conv(3, d, v.patch, true) + d * v.pos_grid[0] * v.pos_grid[1] + v.depth * block } else { 0 };
    // Neck.
    let fuse = |t: &mut usize, bn: &mut dyn FnMut(&mut usize, usize), i: usize, o: usize| {
        *t += conv(i, o, 3, false) + conv(o, o, 3, false) + conv(i, o, 1, false);
        bn(t, o);
        bn(t, o);
    };
    if cfg.pretrained_fusion {
        for &ci in &c {
            t += conv(d, ci, 1, true);
            fuse(&mut t, &mut bn, 2 * ci, ci);
        }
    }
    let inner = c[3] / 4;
    for _ in 0..4 {
        t += conv(c[3], inner, 3, false);
        bn(&mut t, inner);
    }
    t += conv(c[3], inner, 1, true) + conv(5 * inner, c[3], 1, false);
    bn(&mut t, c[3]);
    for i in 0..3 {
        fuse(&mut t, &mut bn, c[i + 1] + c[i], c[i]);
    }
    if cfg.aux_enabled {
        t += conv(c[3], 3, 1, true);
    }
    // Heads.
    match cfg.decoder {
        DecoderKind::Plain => {
            t += conv(c[0], c[0], 3, false) + conv(c[0], 3, 1, true);
            bn(&mut t, c[0]);
        }
        DecoderKind::Aqs => {
            for (i, o) in [(1, c[0] / 2), (c[0] / 2, c[0]), (c[0], c[1]), (c[1], c[2])] {
                t += conv(i, o, 3, false);
                bn(&mut t, o);
            }
            for &ci in &c[..3] {
                let h = (ci / cfg.csam_reduction).max(1);
                t += conv(ci, h, 1, true) + conv(h, ci, 1, true) + conv(2, 1, 7, true);
            }
            t += conv(c[0] + c[1] + c[2], c[0], 3, false) + conv(c[0], 3, 1, true);
            bn(&mut t, c[0]);
        }
    }
    (t, frozen, buf)
}

#[test]
fn single_layer_counts() {
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(&mut store, 0);
    Linear::new(&mut init, "dense", 10, 5, 0.1).unwrap();
    Conv2d::new(&mut init, "conv", 4, 8, 3, Conv2dOptions::same(3, 1), true).unwrap();
    let count = |p: &str| store.iter().filter(|(_, n, _, _)| n.starts_with(p)).map(|(_, _, _, t)| t.len()).sum::<usize>();
    assert_eq!(count("dense."), 55);
    assert_eq!(count("conv."), 296);
}

#[test]
fn conv_macs_are_counted_per_output_element() {
    let mut store = ParamStore::<f32>::new();
    let conv = Conv2d::new(&mut Init::new(&mut store, 0), "conv", 4, 8, 3, Conv2dOptions::same(3, 1), true).unwrap();
    let mut ctx = Ctx::with_tape(&store, Mode::Eval, Tape::shape_only());
    let x = ctx.tape.placeholder(&[2, 4, 8, 8]);
    conv.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.macs(), 2 * 8 * 64 * 4 * 9);
}

#[test]
fn model_counts_match_layer_by_layer_hand_count() {
    let configs = [
        ModelConfig::default(),
        ModelConfig::compact(),
        ModelConfig::compact().with_ablation(aqsnet::Ablation::Baseline),
        ModelConfig::compact().with_ablation(aqsnet::Ablation::BaselinePif),
        ModelConfig { aux_enabled: false, ..ModelConfig::compact() },
    ];
    for cfg in configs {
        let c = count_params_flops(&cfg, 64, 64).unwrap();
        assert_eq!((c.trainable, c.frozen, c.buffers), hand_count(&cfg), "{cfg:?}");
    }
}

#[test]
fn locked_mac_estimates() {
    // Recorded from the first run of the shape-propagation count.
    let full = count_params_flops(&ModelConfig::default(), 512, 512).unwrap();
    let compact = count_params_flops(&ModelConfig::compact(), 64, 64).unwrap();
    assert_eq!((full.macs, compact.macs), (LOCKED_FULL_512, LOCKED_COMPACT_64));
}

const LOCKED_FULL_512: u64 = 41_752_842_240;
const LOCKED_COMPACT_64: u64 = 52_044_576;
