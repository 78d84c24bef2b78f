use super::*;
use crate::tensor::gradcheck::{grad_check, random_tensor, weighted_sum};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn init(seed: u64) -> Init {
    Init::new(ChaCha8Rng::seed_from_u64(seed))
}

fn toy_vit(depth: usize) -> ViTConfig {
    ViTConfig {
        depth,
        dim: 16,
        heads: 2,
        patch_size: 4,
        image_size: 16,
        drop_path_rate: 0.0,
        layerscale_init: 0.5,
        multiscale_indices: Vec::new(),
    }
}

#[test]
fn patchify_shapes() {
    let t = patchify(&random_tensor(&[64, 64], 0.0, 1.0, 1), 16).unwrap();
    assert_eq!(t.shape(), &[16, 256]);
    let t = patchify(&Tensor::zeros(vec![896, 896]), 16).unwrap();
    assert_eq!(t.shape(), &[3136, 256]);
}

#[test]
fn patchify_constant_image_gives_identical_tokens() {
    let t = patchify(&Tensor::full(vec![32, 32], 0.25), 8).unwrap();
    for r in 1..t.rows() {
        assert_eq!(t.row(r), t.row(0));
    }
}

#[test]
fn patchify_is_row_major() {
    let img = Tensor::from_fn(vec![4, 4], |i| i as f64);
    let t = patchify(&img, 2).unwrap();
    assert_eq!(t.row(0), &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(t.row(1), &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(t.row(2), &[8.0, 9.0, 12.0, 13.0]);
}

#[test]
fn patchify_rejects_indivisible() {
    assert!(patchify(&Tensor::zeros(vec![30, 32]), 8).is_err());
}

#[test]
fn default_indices() {
    assert_eq!(default_multiscale_indices(12), vec![2, 5, 8, 11]);
    assert_eq!(default_multiscale_indices(4), vec![0, 1, 2, 3]);
    assert_eq!(default_multiscale_indices(8), vec![1, 3, 5, 7]);
    // 6/4 = 1.5: round(1.5)=2, 3, round(4.5)=5, 6
    assert_eq!(default_multiscale_indices(6), vec![1, 2, 4, 5]);
    assert_eq!(*default_multiscale_indices(7).last().unwrap(), 6);
}

#[test]
fn config_validation() {
    let mut c = ViTConfig::default();
    assert!(c.validate().is_ok());
    c.heads = 3;
    assert!(c.validate().is_err());
    let mut c = ViTConfig { image_size: 60, ..Default::default() };
    assert!(c.validate().is_err());
    c.image_size = 64;
    c.multiscale_indices = vec![1, 3, 5];
    assert!(c.validate().is_err());
    c.multiscale_indices = vec![3, 1, 7];
    assert!(c.validate().is_err());
    c.multiscale_indices = vec![0, 7];
    assert!(c.validate().is_ok());
}

fn encode(cfg: &ViTConfig, img: &Tensor, seed: u64) -> (Graph, BlockOutputs) {
    let enc = Encoder::new(cfg.clone()).unwrap();
    let params = enc.init(&mut init(seed));
    let mut g = Graph::new();
    let p = params.bind(&mut g, true).unwrap();
    let x = g.input(img.clone()).unwrap();
    let out = enc.forward(&mut g, &p, x, Forward::default()).unwrap();
    (g, out)
}

#[test]
fn encode_returns_every_block() {
    let cfg = toy_vit(4);
    let img = random_tensor(&[2, 16, 16], 0.0, 1.0, 3);
    let (g, out) = encode(&cfg, &img, 1);
    assert_eq!(out.blocks.len(), 4);
    for &b in &out.blocks {
        assert_eq!(g.shape(b), &[2, 17, 16]);
    }
}

#[test]
fn encode_is_deterministic() {
    let cfg = toy_vit(3);
    let img = random_tensor(&[1, 16, 16], 0.0, 1.0, 3);
    let (g1, o1) = encode(&cfg, &img, 1);
    let (g2, o2) = encode(&cfg, &img, 1);
    for (a, b) in o1.blocks.iter().zip(&o2.blocks) {
        assert_eq!(g1.value(*a).data(), g2.value(*b).data());
    }
}

#[test]
fn doubling_resolution_quadruples_patch_count() {
    let cfg = toy_vit(2);
    let (g, out) = encode(&cfg, &random_tensor(&[1, 32, 32], 0.0, 1.0, 3), 1);
    assert_eq!(g.shape(out.last()), &[1, 65, 16]);
    assert_eq!(out.grid, (8, 8));
}

#[test]
fn pos_embed_at_training_grid_is_identity() {
    let enc = Encoder::new(toy_vit(1)).unwrap();
    let params = enc.init(&mut init(2));
    let mut g = Graph::new();
    let p = params.bind(&mut g, false).unwrap();
    let pe = enc.pos_embed(&mut g, &p, 4, 4).unwrap();
    assert!(g.value(pe).max_abs_diff(params.get("encoder.pos_embed").unwrap()) < 1e-6);
    let pe2 = enc.pos_embed(&mut g, &p, 8, 6).unwrap();
    assert_eq!(g.shape(pe2), &[49, 16]);
}

#[test]
fn zero_layerscale_makes_blocks_identity() {
    let cfg = ViTConfig { layerscale_init: 0.0, ..toy_vit(3) };
    let (g, out) = encode(&cfg, &random_tensor(&[2, 16, 16], 0.0, 1.0, 5), 4);
    for w in out.blocks.windows(2) {
        assert_eq!(g.value(w[0]).data(), g.value(w[1]).data());
    }
}

#[test]
fn drop_path_only_with_rng() {
    let cfg = ViTConfig { drop_path_rate: 0.5, ..toy_vit(3) };
    let enc = Encoder::new(cfg).unwrap();
    let params = enc.init(&mut init(1));
    let img = random_tensor(&[4, 16, 16], 0.0, 1.0, 3);
    let run = |rng: Option<&mut ChaCha8Rng>| {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false).unwrap();
        let x = g.input(img.clone()).unwrap();
        let out = enc.forward(&mut g, &p, x, Forward { mask: None, rng }).unwrap();
        g.value(out.last()).clone()
    };
    assert_eq!(run(None), run(None));
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    assert_eq!(run(Some(&mut r1)), run(Some(&mut r2)));
    assert_ne!(run(Some(&mut r1)), run(None));
}

#[test]
fn mask_token_replaces_masked_patches() {
    let cfg = ViTConfig { layerscale_init: 0.0, ..toy_vit(1) };
    let enc = Encoder::new(cfg).unwrap();
    let mut params = enc.init(&mut init(1));
    *params.get_mut("encoder.mask_token").unwrap() = Tensor::full(vec![1, 16], 7.0);
    let mut g = Graph::new();
    let p = params.bind(&mut g, false).unwrap();
    let x = g.input(random_tensor(&[1, 16, 16], 0.0, 1.0, 3)).unwrap();
    let mut mask = vec![false; 16];
    mask[5] = true;
    let out = enc.forward(&mut g, &p, x, Forward { mask: Some(&mask), rng: None }).unwrap();
    let v = g.value(out.last());
    let pe = params.get("encoder.pos_embed").unwrap();
    for j in 0..16 {
        assert!((v.row(6)[j] - (7.0 + pe.row(6)[j])).abs() < 1e-12);
    }
}

#[test]
fn encoder_input_gradient() {
    let cfg = ViTConfig {
        depth: 2,
        dim: 8,
        heads: 2,
        patch_size: 2,
        image_size: 4,
        drop_path_rate: 0.0,
        layerscale_init: 0.7,
        multiscale_indices: Vec::new(),
    };
    let enc = Encoder::new(cfg).unwrap();
    let params = enc.init(&mut init(6));
    let img = random_tensor(&[1, 4, 4], 0.0, 1.0, 2);
    let report = grad_check(
        |g, x| {
            let p = params.bind(g, false)?;
            let out = enc.forward(g, &p, x, Forward::default())?;
            weighted_sum(g, out.last(), 3)
        },
        &img,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
}

#[test]
fn multiscale_selection_width_and_order() {
    let cfg = ViTConfig { dim: 64, heads: 4, ..toy_vit(8) };
    let (mut g, out) = encode(&cfg, &random_tensor(&[1, 16, 16], 0.0, 1.0, 3), 1);
    let idx = cfg.indices();
    assert_eq!(idx, vec![1, 3, 5, 7]);
    let cat = select_multiscale(&mut g, &out.blocks, &idx).unwrap();
    assert_eq!(g.shape(cat), &[1, 16, 256]);
    let v = g.value(cat);
    let b3 = g.value(out.blocks[3]);
    // patch 0 of block 3 occupies channels 64..128 of row 0; CLS is skipped
    assert_eq!(&v.row(0)[64..128], b3.row(1));
    assert!(select_multiscale(&mut g, &out.blocks, &[8]).is_err());
}

#[test]
fn decoder_output_extent() {
    let dec = Decoder::new(DecoderConfig { in_width: 64, num_classes: 3, patch_size: 16 }).unwrap();
    assert_eq!(dec.cfg.widths(), vec![64, 32, 32, 32, 32]);
    let params = dec.init(&mut init(1));
    let mut g = Graph::new();
    let p = params.bind(&mut g, false).unwrap();
    let t = g.input(random_tensor(&[1, 16, 64], -1.0, 1.0, 2)).unwrap();
    let y = dec.forward(&mut g, &p, t, (4, 4)).unwrap();
    assert_eq!(g.shape(y), &[1, 64, 64, 3]);
    assert!(dec.forward(&mut g, &p, t, (4, 5)).is_err());
}

#[test]
fn zero_tokens_and_zero_head_give_uniform_logits() {
    let dec = Decoder::new(DecoderConfig { in_width: 8, num_classes: 4, patch_size: 4 }).unwrap();
    let mut params = dec.init(&mut init(1));
    *params.get_mut("decoder.head.w").unwrap() = Tensor::zeros(vec![32, 4]);
    let mut g = Graph::new();
    let p = params.bind(&mut g, false).unwrap();
    let t = g.input(Tensor::zeros(vec![1, 4, 8])).unwrap();
    let y = dec.forward(&mut g, &p, t, (2, 2)).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == g.value(y).data()[0]));
}

#[test]
fn decoder_two_stage_gradient() {
    let dec = Decoder::new(DecoderConfig { in_width: 6, num_classes: 3, patch_size: 4 }).unwrap();
    let params = dec.init(&mut init(3));
    let report = grad_check(
        |g, x| {
            let p = params.bind(g, false)?;
            let y = dec.forward(g, &p, x, (2, 2))?;
            weighted_sum(g, y, 4)
        },
        &random_tensor(&[1, 4, 6], -1.0, 1.0, 5),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
}

#[test]
fn decoder_is_translation_consistent_at_patch_granularity() {
    let dec = Decoder::new(DecoderConfig { in_width: 4, num_classes: 2, patch_size: 4 }).unwrap();
    let params = dec.init(&mut init(3));
    let tok = random_tensor(&[1, 3, 3, 4], -1.0, 1.0, 8);
    // shift the token grid down by one row, new first row = zeros
    let shifted = Tensor::from_fn(vec![1, 3, 3, 4], |i| if i < 12 { 0.0 } else { tok.data()[i - 12] });
    let run = |t: &Tensor| {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false).unwrap();
        let x = g.input(t.clone().reshape(vec![1, 9, 4]).unwrap()).unwrap();
        let y = dec.forward(&mut g, &p, x, (3, 3)).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(&tok), run(&shifted));
    let row = 12 * 2;
    assert_eq!(&a.data()[..8 * row], &b.data()[4 * row..]);
}

fn loss_value(logits: &Tensor, labels: &[u8]) -> (f64, f64, f64) {
    let mut g = Graph::new();
    let l = g.input(logits.clone()).unwrap();
    let s = seg_loss(&mut g, l, labels).unwrap();
    (g.value(s.total).item(), g.value(s.dice).item(), g.value(s.ce).item())
}

#[test]
fn seg_loss_near_perfect() {
    let labels: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
    let logits = Tensor::from_fn(vec![1, 4, 4, 3], |i| if i % 3 == labels[i / 3] as usize { 20.0 } else { -20.0 });
    let (total, _, _) = loss_value(&logits, &labels);
    assert!((0.0..0.01).contains(&total), "{total}");
}

#[test]
fn seg_loss_uniform_two_class_cross_entropy() {
    let labels = [0u8, 1, 1, 0, 1, 1];
    let (_, _, ce) = loss_value(&Tensor::zeros(vec![1, 2, 3, 2]), &labels);
    assert!((ce - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn seg_loss_channel_permutation_invariance() {
    let logits = random_tensor(&[2, 3, 3, 4], -2.0, 2.0, 1);
    let labels: Vec<u8> = (0..18).map(|i| ((i * 7) % 4) as u8).collect();
    let perm = [2usize, 0, 3, 1];
    let permuted = Tensor::from_fn(vec![2, 3, 3, 4], |i| logits.data()[i - i % 4 + perm[i % 4]]);
    let inv: Vec<u8> = labels.iter().map(|&l| perm.iter().position(|&p| p == l as usize).unwrap() as u8).collect();
    let (a, _, _) = loss_value(&logits, &labels);
    let (b, _, _) = loss_value(&permuted, &inv);
    assert!((a - b).abs() < 1e-12);
    assert!(a >= 0.0);
}

#[test]
fn seg_loss_rejects_out_of_range_label() {
    let mut g = Graph::new();
    let l = g.input(Tensor::zeros(vec![1, 1, 2, 3])).unwrap();
    assert!(seg_loss(&mut g, l, &[0, 3]).is_err());
}

#[test]
fn seg_loss_gradient() {
    let labels = [0u8, 2, 2, 1, 0, 2];
    let report = grad_check(
        |g, x| Ok(seg_loss(g, x, &labels)?.total),
        &random_tensor(&[1, 2, 3, 3], -1.0, 1.0, 2),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
}

#[test]
fn proto_head_scores_are_cosines() {
    let head = ProtoHead::new(HeadConfig { hidden: 16, bottleneck: 8, prototypes: 12 }, "dino_head");
    let params = head.init(&mut init(1), 10);
    let mut g = Graph::new();
    let p = params.bind(&mut g, false).unwrap();
    let x = g.input(random_tensor(&[3, 10], -1.0, 1.0, 2)).unwrap();
    let y = head.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(y), &[3, 12]);
    assert!(g.value(y).data().iter().all(|v| v.abs() <= 1.0 + 1e-12));
}

#[test]
fn seg_model_forward_shape() {
    for multiscale in [true, false] {
        let m = SegModel::new(toy_vit(4), 5, multiscale).unwrap();
        let params = m.init(&mut init(1));
        let mut g = Graph::new();
        let p = params.bind(&mut g, true).unwrap();
        let x = g.input(random_tensor(&[2, 16, 16], 0.0, 1.0, 2)).unwrap();
        let y = m.forward(&mut g, &p, x, Forward::default()).unwrap();
        assert_eq!(g.shape(y), &[2, 16, 16, 5]);
    }
}

#[test]
fn params_congruence_and_prefixes() {
    let m = SegModel::new(toy_vit(2), 3, true).unwrap();
    let a = m.init(&mut init(1));
    let b = m.init(&mut init(2));
    assert!(a.check_congruent(&b).is_ok());
    let enc = a.select("encoder.");
    assert!(enc.names().all(|n| n.starts_with("encoder.")));
    let round = enc.with_prefix("teacher/").strip_prefix("teacher/");
    assert_eq!(round, enc);
    match enc.check_congruent(&a) {
        Err(crate::Error::ParamMismatch { missing, unexpected }) => {
            assert!(missing.iter().all(|n| n.starts_with("decoder.")));
            assert!(unexpected.is_empty());
        }
        other => panic!("{other:?}"),
    }
}
