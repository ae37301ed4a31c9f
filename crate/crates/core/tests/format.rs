use mcu_encoder_core::{
    embedding_param_count, encoded_size, load_model, model_from_bytes, model_to_bytes, run_encoder, write_model,
    Arena, ClusterSpec, EncoderConfig, EncoderModel, Error, SchedulePlan,
};
use proptest::prelude::*;

const FLASH_BYTES: usize = 1 << 20;

fn spec_for(vocab: usize, d: usize, clusters: usize, seed: usize) -> ClusterSpec {
    let mut sizes = vec![vocab / clusters; clusters];
    sizes[0] += vocab - sizes.iter().sum::<usize>();
    let mut ranks = vec![d];
    ranks.extend((1..clusters).map(|i| 1 + (seed + i) % d));
    ClusterSpec { sizes, ranks }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_preserves_model_and_outputs(
        d_pow in 2u32..5,
        h_pow in 0u32..2,
        layers in 1usize..3,
        clusters in 1usize..4,
        seed in 0u64..1000,
    ) {
        let d = 1usize << d_pow;
        let cfg = EncoderConfig {
            vocab: 24,
            d_model: d,
            heads: 1 << h_pow,
            layers,
            d_ffn: 4 * d,
            max_seq: 16,
            n_classes: 2,
        };
        let spec = spec_for(cfg.vocab, d, clusters, seed as usize);
        let m = EncoderModel::random(cfg, spec.clone(), seed).unwrap();
        let mut bytes = Vec::new();
        let n = write_model(&m, &mut bytes).unwrap();
        prop_assert_eq!(n, bytes.len());
        prop_assert_eq!(n, encoded_size(&cfg, &spec));
        let back = load_model(&bytes[..]).unwrap();
        prop_assert_eq!(&back, &m);

        let toks: Vec<usize> = (0..10).map(|i| (i * 7 + seed as usize) % 24).collect();
        let plan = SchedulePlan::tiled(&cfg, 10, 3).unwrap();
        let a = run_encoder(&toks, &m, &plan, &mut Arena::new(1 << 20)).unwrap();
        let b = run_encoder(&toks, &back, &plan, &mut Arena::new(1 << 20)).unwrap();
        prop_assert_eq!(a.logits, b.logits);
    }
}

#[test]
fn every_truncation_is_reported() {
    let cfg = EncoderConfig { vocab: 8, d_model: 8, heads: 2, layers: 1, d_ffn: 16, max_seq: 4, n_classes: 2 };
    let m = EncoderModel::random(cfg, ClusterSpec { sizes: vec![4, 4], ranks: vec![8, 2] }, 1).unwrap();
    let bytes = model_to_bytes(&m).unwrap();
    for len in 0..bytes.len() {
        let err = model_from_bytes(&bytes[..len]).unwrap_err();
        assert!(matches!(err, Error::TruncatedSection { .. }), "len {len}: {err:?}");
    }
}

#[test]
fn bert_tiny_full_table_does_not_fit_flash() {
    let cfg = EncoderConfig::bert_tiny();
    let spec = ClusterSpec::full(cfg.vocab, cfg.d_model);
    let m = EncoderModel::random(cfg, spec.clone(), 0).unwrap();
    let total = m.param_counts().total;
    assert_eq!(total, 4_304_003);
    let size = encoded_size(&cfg, &spec);
    assert!(size > total);
    let ratio = size as f64 / FLASH_BYTES as f64;
    assert!((4.0..4.5).contains(&ratio), "{ratio}");
    assert_eq!(model_to_bytes(&m).unwrap().len(), size);
}

#[test]
fn compressed_embedding_shrinks_file_by_param_delta() {
    let cfg = EncoderConfig::bert_tiny();
    let full = ClusterSpec::full(cfg.vocab, cfg.d_model);
    let small = ClusterSpec {
        sizes: vec![1000, 9522, 20000],
        ranks: vec![128, 16, 4],
    };
    let delta = encoded_size(&cfg, &full) - encoded_size(&cfg, &small);
    let quant_growth = 2 * 2 * 8 + 2 * 4 * 2;
    assert_eq!(
        delta + quant_growth,
        embedding_param_count(&full, 128) - embedding_param_count(&small, 128)
    );
}
