mod common;

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor, Var};
use common::*;
use pbnet_core::bgm::{Bgm, BgmConfig, BgmLevelConfig};
use pbnet_core::config::Config;
use pbnet_core::data::{generate_phantoms, Normalization, PhantomConfig};
use pbnet_core::losses::{total_loss, LossConfig};
use pbnet_core::mgpm::{Mgpm, MgpmConfig};
use pbnet_core::network::{DecoderBlock, ModuleFlags, PBNetOutputs};
use pbnet_core::nn::{Ctx, ParamStore};
use pbnet_core::ops;
use pbnet_core::trainer::{make_batch, Trainer};

fn grad_norm(grads: &candle_core::backprop::GradStore, t: &Tensor) -> f64 {
    grads
        .get(t)
        .map(|g| values_f64(g).iter().map(|v| v * v).sum::<f64>().sqrt())
        .unwrap_or(0.0)
}

/// Deep maps are produced at label size so the loss sees them unresized.
fn outputs_from(x: &Tensor) -> PBNetOutputs {
    let p = |a: f64, b: f64| ops::probability(&x.affine(a, b).unwrap()).unwrap();
    PBNetOutputs {
        p0: p(1.0, 0.0),
        deep: vec![(3, p(0.5, 0.2)), (2, p(0.8, -0.1)), (1, p(1.2, 0.1))],
        aux: None,
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let (h, w) = (6, 6);
    let mut r = rng(21);
    let x0: Vec<f64> = random_map(&mut r, h * w).iter().map(|v| 4.0 * *v as f64 - 2.0).collect();
    let g: Vec<f64> = (0..h * w).map(|i| if (i / w) >= 2 && (i % w) >= 1 && (i % w) < 4 { 1.0 } else { 0.0 }).collect();
    let g = map_tensor_f64(&g, h, w);
    let cfg = LossConfig::default();
    let sup = ModuleFlags::FULL.supervision();
    let loss = |v: &[f64]| {
        let x = map_tensor_f64(v, h, w);
        scalar(&total_loss(&outputs_from(&x), &g, &cfg, sup).unwrap().total)
    };
    let x = Var::from_tensor(&map_tensor_f64(&x0, h, w)).unwrap();
    let bundle = total_loss(&outputs_from(x.as_tensor()), &g, &cfg, sup).unwrap();
    let auto = values_f64(bundle.total.backward().unwrap().get(x.as_tensor()).unwrap());
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for i in 0..h * w {
        let (mut plus, mut minus) = (x0.clone(), x0.clone());
        plus[i] += step;
        minus[i] -= step;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
        worst = worst.max((fd - auto[i]).abs());
        scale = scale.max(fd.abs());
    }
    assert!(scale > 1e-3);
    assert!(worst / scale <= 1e-4, "relative error {}", worst / scale);
}

fn micro_mgpm(store: &ParamStore) -> Mgpm {
    let cfg = MgpmConfig {
        n: 2,
        reduced_channels: 4,
        in_channels: 4,
        out_channels: 4,
    };
    Mgpm::new(cfg, store.root().pp("m")).unwrap()
}

fn var(seed: u64, shape: (usize, usize, usize, usize)) -> Var {
    let mut r = rng(seed);
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = random_map(&mut r, n).iter().map(|v| *v as f64 * 2.0 - 0.5).collect();
    Var::from_tensor(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap()).unwrap()
}

#[test]
fn mgpm_mixes_information_across_cells() {
    let store = ParamStore::new(2, DType::F64, Device::Cpu);
    let m = micro_mgpm(&store);
    let e = var(1, (1, 4, 8, 8));
    let s = var(2, (1, 4, 4, 4));
    let out = m.forward(&Ctx::eval(), e.as_tensor(), s.as_tensor()).unwrap();
    // one output pixel in the top-left cell
    let probe = out.narrow(2, 0, 1).unwrap().narrow(3, 0, 1).unwrap().sum_all().unwrap();
    let grads = probe.backward().unwrap();
    let ge = values_f64(grads.get(e.as_tensor()).unwrap());
    // e is 8×8 with 4×4 cells; the bottom-right cell starts at (4, 4)
    let other_cell: f64 = (0..4)
        .flat_map(|c| (4..8).flat_map(move |y| (4..8).map(move |x| c * 64 + y * 8 + x)))
        .map(|i| ge[i].abs())
        .sum();
    assert!(other_cell > 0.0, "no gradient from a distant cell");
}

#[test]
fn mgpm_gradient_matches_finite_differences() {
    let store = ParamStore::new(4, DType::F64, Device::Cpu);
    let m = micro_mgpm(&store);
    let s = var(6, (1, 4, 4, 4)).as_tensor().clone();
    let weights = var(7, (1, 4, 8, 8)).as_tensor().clone();
    let e0 = values_f64(var(5, (1, 4, 8, 8)).as_tensor());
    let f = |v: &[f64]| -> Tensor {
        let e = Tensor::from_vec(v.to_vec(), (1, 4, 8, 8), &Device::Cpu).unwrap();
        (m.forward(&Ctx::eval(), &e, &s).unwrap() * &weights).unwrap().sum_all().unwrap()
    };
    let e = Var::from_tensor(&Tensor::from_vec(e0.clone(), (1, 4, 8, 8), &Device::Cpu).unwrap()).unwrap();
    let out = (m.forward(&Ctx::eval(), e.as_tensor(), &s).unwrap() * &weights).unwrap().sum_all().unwrap();
    let auto = values_f64(out.backward().unwrap().get(e.as_tensor()).unwrap());
    let step = 1e-6;
    let (mut worst, mut scale) = (0f64, 0f64);
    for i in (0..e0.len()).step_by(7) {
        let (mut plus, mut minus) = (e0.clone(), e0.clone());
        plus[i] += step;
        minus[i] -= step;
        let fd = (scalar(&f(&plus)) - scalar(&f(&minus))) / (2.0 * step);
        worst = worst.max((fd - auto[i]).abs());
        scale = scale.max(fd.abs());
    }
    assert!(scale > 0.0);
    assert!(worst / scale <= 1e-4, "relative error {}", worst / scale);
}

fn micro_bgm(store: &ParamStore, detach: bool) -> Bgm {
    let cfg = BgmConfig {
        detach_attention: detach,
        ..Default::default()
    };
    Bgm::new(64, BgmLevelConfig::new(3, 5).unwrap(), &cfg, store.root().pp("b")).unwrap()
}

#[test]
fn bgm_attention_and_residual_paths_both_carry_gradient() {
    let store = ParamStore::new(9, DType::F64, Device::Cpu);
    let b = micro_bgm(&store, false);
    let ctx = Ctx::eval();
    let s = var(10, (1, 64, 8, 8));
    let m_s = Tensor::full(0.5f64, (1, 1, 8, 8), &Device::Cpu).unwrap();
    let m_c = Tensor::full(0.5f64, (1, 64, 1, 1), &Device::Cpu).unwrap();
    let st = s.as_tensor();
    let via_attention = b.gated_core_paths(&ctx, st, &st.detach(), &m_s, &m_c).unwrap();
    let via_residual = b.gated_core_paths(&ctx, &st.detach(), st, &m_s, &m_c).unwrap();
    for out in [via_attention, via_residual] {
        let grads = out.sum_all().unwrap().backward().unwrap();
        assert!(grad_norm(&grads, st) > 0.0);
    }
}

#[test]
fn bgm_spatial_attention_reaches_coarse_head_unless_detached() {
    let ctx = Ctx::eval();
    let s = var(12, (1, 64, 8, 8));
    let d = var(13, (1, 64, 4, 4));
    for (detach, expect) in [(false, true), (true, false)] {
        let store = ParamStore::new(11, DType::F64, Device::Cpu);
        let b = micro_bgm(&store, detach);
        let out = b.forward(&ctx, s.as_tensor(), d.as_tensor()).unwrap();
        let core = out.features.narrow(1, 0, 64).unwrap();
        let grads = core.sum_all().unwrap().backward().unwrap();
        let head: f64 = store
            .trainable()
            .iter()
            .filter(|(n, _)| n.contains("coarse_head"))
            .map(|(_, v)| grad_norm(&grads, v.as_tensor()))
            .sum();
        assert_eq!(head > 0.0, expect, "detach = {detach}");
    }
}

#[test]
fn decoder_gradient_reaches_both_concat_operands() {
    let store = ParamStore::new(14, DType::F64, Device::Cpu);
    let block = DecoderBlock::new(store.root().pp("dec")).unwrap();
    let a = var(15, (1, 64, 8, 8));
    let b = var(16, (1, 64, 8, 8));
    let x = Tensor::cat(&[a.as_tensor(), b.as_tensor()], 1).unwrap();
    let out = block.forward(&Ctx::eval(), &x).unwrap();
    assert_eq!(out.dims(), &[1, 64, 8, 8]);
    let grads = out.sum_all().unwrap().backward().unwrap();
    assert!(grad_norm(&grads, a.as_tensor()) > 0.0);
    assert!(grad_norm(&grads, b.as_tensor()) > 0.0);
}

#[test]
fn every_trainable_parameter_receives_gradient() {
    let mut cfg = Config::tiny();
    cfg.train.batch_size = 2;
    let phantoms = generate_phantoms(&PhantomConfig {
        count: 20,
        ..Default::default()
    })
    .unwrap();
    let samples: Vec<_> = phantoms.iter().map(|p| p.to_sample()).collect();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let names: Vec<(String, Var)> = trainer.net().store().trainable();
    let mut touched = BTreeSet::new();
    for chunk in samples.chunks(2).take(10) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = make_batch(&refs, None, &cfg.augment, &Normalization::default(), &Device::Cpu).unwrap();
        let res = trainer.step(&batch, 1e-3).unwrap();
        for (name, v) in &names {
            if grad_norm(&res.grads, v.as_tensor()) > 0.0 {
                touched.insert(name.clone());
            }
        }
    }
    let missing: Vec<_> = names.iter().map(|(n, _)| n).filter(|n| !touched.contains(*n)).collect();
    assert!(missing.is_empty(), "no gradient for {missing:?}");
}
