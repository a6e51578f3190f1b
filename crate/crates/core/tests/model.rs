mod common;

use coma_core::dmmsa::AttentionKind;
use coma_core::masking::{apply_mask, reassemble};
use coma_core::model::{param_count, param_specs, stage_downsample};
use coma_core::params::Part;
use coma_core::{DyVit, FusionMode, Graph, ModelConfig, ParamStore, Tensor, Var};

fn nano() -> ModelConfig {
    ModelConfig::dyvit_nano()
}

fn setup(cfg: &ModelConfig, seed: u64) -> (DyVit<f64>, ParamStore<f64>) {
    (DyVit::new(cfg).unwrap(), ParamStore::init(param_specs(cfg).unwrap(), seed).unwrap())
}

fn image(cfg: &ModelConfig, seed: u64) -> Var<f64> {
    Var::constant(coma_core::data::synth_image(seed, 0, cfg.image_size).cast())
}

#[test]
fn nano_count_matches_hand_audit() {
    assert_eq!(common::nano_encoder_params(), 411_984);
    assert_eq!(param_count(&nano()).unwrap(), common::nano_encoder_params());
}

#[test]
fn preset_counts_within_reported_sizes() {
    let s = param_count(&ModelConfig::dyvit_s()).unwrap() as f64;
    let b = param_count(&ModelConfig::dyvit_b()).unwrap() as f64;
    assert!((29.75e6..=40.25e6).contains(&s), "{s}");
    assert!((59.5e6..=80.5e6).contains(&b), "{b}");
    assert!((b / s - 2.0).abs() <= 0.2);
}

#[test]
fn decoder_and_mask_token_are_not_encoder_parameters() {
    let specs = param_specs(&nano()).unwrap();
    for s in &specs {
        assert_eq!(s.part == Part::Encoder, s.name.starts_with("encoder."), "{}", s.name);
    }
    let tok = specs.iter().find(|s| s.name == "decoder.mask_token").unwrap();
    assert!(!tok.decay);
}

#[test]
fn scale_layer_extents() {
    let mut cfg = ModelConfig::dyvit_s();
    assert_eq!(cfg.token_side(), 56);
    cfg.image_size = 64;
    assert_eq!(cfg.token_side(), 16);
    assert_eq!(ModelConfig::dyvit_s().channels[0], 96);
}

#[test]
fn stage_shapes_for_two_visible_patches() {
    let mut cfg = nano();
    cfg.mask_ratio = 0.5;
    let (model, store) = setup(&cfg, 1);
    let g = Graph::new();
    let b = store.bind(&g, false);
    let out = model.encode(&g, &b, &image(&cfg, 1), &[true, false, false, true]).unwrap();
    let rows: Vec<usize> = out.stages.iter().map(|s| s.tokens.shape()[0]).collect();
    assert_eq!(rows, vec![128, 32, 8, 2]);
    let widths: Vec<usize> = out.stages.iter().map(|s| s.tokens.shape()[1]).collect();
    assert_eq!(widths, vec![16, 32, 64, 128]);
    assert_eq!(out.stages[0].indices, vec![0, 3]);
    let fused = model.positional_downsample(&g, &b, &out).unwrap();
    assert_eq!(fused.tokens.shape(), &[2, 128]);
}

#[test]
fn all_visible_shapes_and_stage_routing() {
    let cfg = nano();
    let (model, store) = setup(&cfg, 2);
    let g = Graph::new();
    let b = store.bind(&g, false);
    let out = model.encode(&g, &b, &image(&cfg, 2), &[true; 4]).unwrap();
    for (s, p) in out.stages.iter().zip([8, 4, 2, 1]) {
        assert_eq!(s.tokens.shape()[0], 4 * p * p);
    }
    let kinds = model.stage_kinds();
    assert!(matches!(&kinds[0], AttentionKind::MultiWindow { p: 8, windows } if windows == &[8, 4, 2]));
    assert!(matches!(&kinds[1], AttentionKind::MultiWindow { p: 4, windows } if windows == &[4, 2]));
    assert_eq!(kinds[2], AttentionKind::Global);
    assert_eq!(kinds[3], AttentionKind::Global);
}

#[test]
fn fusion_modes_agree_on_shape_and_zero_convs_pass_last_stage() {
    for fusion in [FusionMode::Cascade, FusionMode::Parallel] {
        let mut cfg = nano();
        cfg.fusion = fusion;
        let (model, mut store) = setup(&cfg, 3);
        for i in 1..=3 {
            for part in ["weight", "bias"] {
                let t = store.get_mut(&format!("encoder.fuse{i}.{part}")).unwrap();
                *t = Tensor::zeros(t.shape());
            }
        }
        let g = Graph::new();
        let b = store.bind(&g, false);
        let out = model.encode(&g, &b, &image(&cfg, 3), &[false, true, true, false]).unwrap();
        let fused = model.positional_downsample(&g, &b, &out).unwrap();
        assert_eq!(fused.tokens.shape(), &[2, 128]);
        assert!(fused.tokens.value().bit_eq(out.stages[3].tokens.value()));
    }
}

#[test]
fn reconstruction_shape_and_zero_head() {
    let cfg = nano();
    let (model, mut store) = setup(&cfg, 4);
    let g = Graph::new();
    let x = image(&cfg, 4);
    let rec = model.reconstruct(&g, &store.bind(&g, false), &x, &[true, false, true, false]).unwrap();
    assert_eq!(rec.shape(), x.shape());
    assert!(rec.value().all_finite());
    for part in ["weight", "bias"] {
        let t = store.get_mut(&format!("decoder.head.{part}")).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let rec = model.reconstruct(&g, &store.bind(&g, false), &x, &[true, false, true, false]).unwrap();
    assert!(rec.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn encode_is_equivariant_to_which_patches_are_visible() {
    // swapping the image halves and the mask together swaps the stage-1 blocks
    let cfg = nano();
    let (model, store) = setup(&cfg, 5);
    let g = Graph::new();
    let b = store.bind(&g, false);
    let x = image(&cfg, 5);
    let tokens = model.scale_embed(&g, &b, &x).unwrap();
    let a = apply_mask(&g, &tokens, &[true, false, true, true], 8).unwrap();
    let rows = 64;
    let order = [2, 0, 3];
    let perm: Vec<usize> = order
        .iter()
        .flat_map(|&blk| {
            let pos = [0, 2, 3].iter().position(|&i| i == blk).unwrap();
            pos * rows..(pos + 1) * rows
        })
        .collect();
    let permuted = g.gather_rows(&a.tokens, &perm).unwrap();
    let out_a = model.encode_visible(&g, &b, a.clone()).unwrap();
    let out_p = model.encode_visible(&g, &b, a.with_tokens(permuted)).unwrap();
    for (sa, sp) in out_a.stages.iter().zip(&out_p.stages) {
        let block = sa.p * sa.p;
        for (dst, &blk) in order.iter().enumerate() {
            let src = [0, 2, 3].iter().position(|&i| i == blk).unwrap();
            for r in 0..block {
                let ra = sa.tokens.value().row(src * block + r);
                let rp = sp.tokens.value().row(dst * block + r);
                for (u, w) in ra.iter().zip(rp) {
                    assert!((u - w).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn stage_downsample_examples() {
    let g = Graph::<f64>::new();
    let (v, p, c) = (2, 8, 3);
    let x = Var::constant(Tensor::full([v * p * p, c], 0.75));
    let w = Var::constant(Tensor::eye(c));
    let b = Var::constant(Tensor::zeros([c]));
    let y = stage_downsample(&g, &x, v, p, &w, &b).unwrap();
    assert_eq!(y.shape(), &[v * 16, c]);
    assert!(y.value().data().iter().all(|&t| t == 0.75));
    let odd = Var::constant(Tensor::zeros([9, c]));
    assert!(stage_downsample(&g, &odd, 1, 3, &w, &b).is_err());
}

#[test]
fn reassemble_fills_masked_blocks_with_the_token() {
    let g = Graph::<f64>::new();
    let tokens = Var::constant(Tensor::from_fn([4 * 4, 2], |i| i as f64));
    let set = apply_mask(&g, &tokens, &[false, true, false, true], 2).unwrap();
    let token = Var::constant(Tensor::from_vec([2], vec![-1.0, -2.0]).unwrap());
    let full = reassemble(&g, &set, &token, &Tensor::zeros([16, 2])).unwrap();
    for r in 0..16 {
        let want: Vec<f64> = if [1, 3].contains(&(r / 4)) { tokens.value().row(r).to_vec() } else { vec![-1.0, -2.0] };
        assert_eq!(full.value().row(r), want.as_slice());
    }
}
