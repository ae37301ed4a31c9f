use mcu_encoder_core::arena::Arena;
use mcu_encoder_core::sched::{run_embedding, run_mha_naive, run_mha_tiled, run_mlp_naive, run_mlp_tiled, Activation};
use mcu_encoder_core::{
    peak_memory_model, plan_tile_size, run_encoder, run_encoder_naive, ClusterSpec, EncoderConfig, EncoderModel, Error,
    MicroKernelShape, Mode, SchedulePlan,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg(d: usize, h: usize) -> EncoderConfig {
    EncoderConfig {
        vocab: 64,
        d_model: d,
        heads: h,
        layers: 2,
        d_ffn: 4 * d,
        max_seq: 64,
        n_classes: 3,
    }
}

fn model(cfg: EncoderConfig, seed: u64) -> EncoderModel {
    let spec = ClusterSpec {
        sizes: vec![16, 16, 32],
        ranks: vec![cfg.d_model, cfg.d_model / 2, 2],
    };
    EncoderModel::random(cfg, spec, seed).unwrap()
}

fn tokens(rng: &mut ChaCha8Rng, s: usize, vocab: usize) -> Vec<usize> {
    (0..s).map(|_| rng.gen_range(0..vocab)).collect()
}

const BIG: usize = 1 << 26;

fn embedded(m: &EncoderModel, toks: &[usize], arena: &mut Arena) -> Activation {
    run_embedding(toks, m, toks.len(), arena, MicroKernelShape::default()).unwrap().0
}

#[test]
fn activations_are_not_degenerate() {
    let m = model(small_cfg(32, 4), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let toks = tokens(&mut rng, 24, 64);
    let mut arena = Arena::new(BIG);
    let mut x = embedded(&m, &toks, &mut arena);
    run_mha_tiled(&mut x, &m.layers[0], 4, 5, &mut arena, MicroKernelShape::default()).unwrap();
    let data = x.region.as_slice();
    let distinct: std::collections::HashSet<_> = data.iter().collect();
    let saturated = data.iter().filter(|&&q| q == 127 || q == -128).count();
    assert!(distinct.len() > 40, "only {} distinct codes", distinct.len());
    assert!(saturated * 20 < data.len(), "{saturated} of {} saturated", data.len());
}

#[test]
fn mlp_tiles_are_bit_identical_and_peaks_exact() {
    let cfg = small_cfg(32, 2);
    let m = model(cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let toks = tokens(&mut rng, 23, cfg.vocab);
    let s = toks.len();
    let reference = {
        let mut arena = Arena::new(BIG);
        let mut x = embedded(&m, &toks, &mut arena);
        run_mlp_naive(&mut x, &m.layers[0], &mut arena, MicroKernelShape::default()).unwrap();
        x.to_tensor().unwrap()
    };
    for t in [1, 2, 4, 7, 23] {
        let mut arena = Arena::new(BIG);
        let mut x = embedded(&m, &toks, &mut arena);
        arena.begin_window();
        run_mlp_tiled(&mut x, &m.layers[0], t, &mut arena, MicroKernelShape::default()).unwrap();
        assert_eq!(x.to_tensor().unwrap(), reference, "t={t}");
        let predicted = peak_memory_model(&cfg, s, t, Mode::Tiled).unwrap().mlp;
        assert_eq!(arena.window_peak(), predicted);
        assert_eq!(predicted, s * 32 + 5 * t * 32);
    }
}

#[test]
fn mha_tiled_matches_naive_for_heads_and_tiles() {
    for h in [1, 2, 4] {
        let cfg = small_cfg(32, h);
        let m = model(cfg, 10 + h as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(h as u64);
        let toks = tokens(&mut rng, 19, cfg.vocab);
        let s = toks.len();
        let (naive, naive_peak) = {
            let mut arena = Arena::new(BIG);
            let mut x = embedded(&m, &toks, &mut arena);
            arena.begin_window();
            run_mha_naive(&mut x, &m.layers[0], h, &mut arena, MicroKernelShape::default()).unwrap();
            (x.to_tensor().unwrap(), arena.window_peak())
        };
        assert_eq!(naive_peak, peak_memory_model(&cfg, s, 1, Mode::Naive).unwrap().mha);
        for t in [1, 2, 4, s] {
            let mut arena = Arena::new(BIG);
            let mut x = embedded(&m, &toks, &mut arena);
            arena.begin_window();
            run_mha_tiled(&mut x, &m.layers[0], h, t, &mut arena, MicroKernelShape::default()).unwrap();
            assert_eq!(x.to_tensor().unwrap(), naive, "h={h} t={t}");
            assert_eq!(arena.window_peak(), peak_memory_model(&cfg, s, t, Mode::Tiled).unwrap().mha);
        }
    }
}

#[test]
fn no_transpose_buffers_anywhere() {
    let cfg = small_cfg(32, 4);
    let m = model(cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let toks = tokens(&mut rng, 16, cfg.vocab);
    for plan in [SchedulePlan::tiled(&cfg, 16, 4).unwrap(), SchedulePlan::naive(&cfg, 16).unwrap()] {
        let mut arena = Arena::new(BIG);
        run_encoder(&toks, &m, &plan, &mut arena).unwrap();
        assert!(arena.events().iter().all(|e| !e.tag.contains("transpose") && !e.tag.contains("reshape")));
        assert_eq!(arena.live_bytes(), 0);
    }
}

#[test]
fn encoder_tiled_equals_naive_and_peaks_match_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..6u64 {
        let h = [1, 2, 4][seed as usize % 3];
        let cfg = small_cfg(16 * (1 + seed as usize % 2), h);
        let m = model(cfg, seed);
        let s = rng.gen_range(1..=cfg.max_seq);
        let toks = tokens(&mut rng, s, cfg.vocab);
        let t = rng.gen_range(1..=s);
        let mut a1 = Arena::new(BIG);
        let tiled = run_encoder(&toks, &m, &SchedulePlan::tiled(&cfg, s, t).unwrap(), &mut a1).unwrap();
        let mut a2 = Arena::new(BIG);
        let naive = run_encoder_naive(&toks, &m, &mut a2).unwrap();
        assert_eq!(tiled.logits, naive.logits);
        assert_eq!(tiled.stage_peaks, peak_memory_model(&cfg, s, t, Mode::Tiled).unwrap());
        assert_eq!(naive.stage_peaks, peak_memory_model(&cfg, s, s, Mode::Naive).unwrap());
        assert_eq!(a1.peak_bytes(), tiled.stage_peaks.max());
        assert_eq!(a2.peak_bytes(), naive.stage_peaks.max());
        assert_eq!(tiled.peak_bytes, a1.peak_bytes());
    }
}

#[test]
fn single_token_input() {
    let cfg = small_cfg(16, 2);
    let m = model(cfg, 8);
    let mut arena = Arena::new(BIG);
    let out = run_encoder(&[3], &m, &SchedulePlan::tiled(&cfg, 1, 1).unwrap(), &mut arena).unwrap();
    let mut arena = Arena::new(BIG);
    let naive = run_encoder_naive(&[3], &m, &mut arena).unwrap();
    assert_eq!(out.logits, naive.logits);
    assert_eq!(out.logits.len(), 3);
}

#[test]
fn kernel_shape_does_not_change_logits() {
    let cfg = small_cfg(32, 2);
    let m = model(cfg, 21);
    let toks: Vec<usize> = (0..20).collect();
    let plan = SchedulePlan::tiled(&cfg, 20, 3).unwrap();
    let mut a = Arena::new(BIG);
    let ours = run_encoder(&toks, &m, &plan, &mut a).unwrap();
    let mut b = Arena::new(BIG);
    let cmsis = run_encoder(&toks, &m, &plan.with_kernel(MicroKernelShape::cmsis_like()), &mut b).unwrap();
    assert_eq!(ours.logits, cmsis.logits);
    assert_eq!(ours.ops.dot4_ops, cmsis.ops.dot4_ops);
    assert!(ours.ops.loads < cmsis.ops.loads);
}

#[test]
fn invalid_inputs() {
    let cfg = small_cfg(16, 2);
    let m = model(cfg, 8);
    let mut arena = Arena::new(BIG);
    let plan = SchedulePlan::tiled(&cfg, 2, 1).unwrap();
    assert_eq!(
        run_encoder(&[1, 64], &m, &plan, &mut arena).unwrap_err(),
        Error::TokenOutOfRange { id: 64, vocab: 64 }
    );
    assert!(matches!(run_encoder(&[], &m, &plan, &mut arena), Err(Error::InvalidSequence { .. })));
    let long = vec![0; 65];
    assert!(matches!(run_encoder(&long, &m, &plan, &mut arena), Err(Error::InvalidSequence { .. })));
    let plan = SchedulePlan::tiled(&cfg, 4, 4).unwrap();
    assert_eq!(run_encoder(&[1, 2], &m, &plan, &mut arena).unwrap_err(), Error::InvalidTile { t: 4, s: 2 });
    assert_eq!(arena.live_bytes(), 0);
}

#[test]
fn oom_names_failing_stage() {
    let cfg = small_cfg(32, 2);
    let m = model(cfg, 8);
    let s = 48;
    let toks: Vec<usize> = (0..s).collect();
    let tiled = peak_memory_model(&cfg, s, 2, Mode::Tiled).unwrap().max();
    let mut arena = Arena::new(tiled);
    let err = run_encoder_naive(&toks, &m, &mut arena).unwrap_err();
    match err {
        Error::OutOfMemory { tag, .. } => assert!(tag.starts_with("mha."), "{tag}"),
        other => panic!("unexpected {other:?}"),
    }
    let mut arena = Arena::new(tiled);
    let plan = plan_tile_size(&cfg, s, tiled).unwrap();
    assert!(plan.t >= 2);
    let out = run_encoder(&toks, &m, &plan, &mut arena).unwrap();
    assert!(out.peak_bytes <= tiled);
}
