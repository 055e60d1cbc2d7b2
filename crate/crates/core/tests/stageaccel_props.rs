mod common;

use std::sync::OnceLock;

use proptest::prelude::*;
use stagevar_core::matgrid::{upsample, FeatureMap, Grid};
use stagevar_core::numcore::{mix_seed, sample_rows, ProjectionMatrix};
use stagevar_core::stageaccel::{
    build_rank_table, generate_stagevar, refinement_forward, restore_rows, restore_tokens, Accelerator,
    OutputCache, ProjectionSharing, RankTable, StageConfig, Strategy,
};
use stagevar_core::varengine::{Condition, FlopCount, VarModel};
use stagevar_core::Error;

use common::{gaussian, small_model};

const G: f64 = 2.0;

fn model() -> &'static VarModel {
    static M: OnceLock<VarModel> = OnceLock::new();
    M.get_or_init(small_model)
}

fn table() -> &'static RankTable {
    static T: OnceLock<RankTable> = OnceLock::new();
    T.get_or_init(|| build_rank_table(model(), &[500, 501, 502, 503], &[1.0, 0.96, 0.9, 0.5], G).unwrap())
}

fn config(strategy: Strategy, alphas: Vec<f64>, cfg_zero: bool) -> StageConfig {
    StageConfig {
        alphas,
        strategy,
        cfg_zero_in_refinement: cfg_zero,
        projection_sharing: ProjectionSharing::PerScale,
        seed: 0,
    }
}

#[test]
fn strategy_one_reproduces_vanilla_bit_exactly() {
    let m = model();
    for seed in [0, 1, 17] {
        let (vf, vt) = m.generate_vanilla(seed, G).unwrap();
        for alphas in [vec![1.0, 1.0], vec![0.96, 0.5]] {
            let (f, t) = generate_stagevar(m, &config(Strategy::Vanilla, alphas, false), None, seed, G).unwrap();
            assert_eq!(f, vf);
            assert!(t.content_eq(&vt));
        }
    }
}

#[test]
fn cfg_bypass_is_the_unconditional_path() {
    let m = model();
    let seed = 5;
    let start = m.schedule.refinement_start();
    let cfg = config(Strategy::Vanilla, vec![1.0, 1.0], true);
    let (f, trace) = generate_stagevar(m, &cfg, None, seed, G).unwrap();

    // Hand-rolled loop: guided establishment, then g = 0 everywhere.
    let pre = m.vanilla_prefix(seed, G, start).unwrap();
    let cond = m.condition(seed);
    let (mut feat, mut input) = (pre.feature, pre.input);
    for k in start..m.schedule.len() {
        let step = m.vanilla_step(k, &feat, &input, &cond, 0.0).unwrap();
        let rec = trace.record(k).unwrap();
        assert_eq!(rec.output, step.output);
        assert_eq!(rec.forwards, 1);
        assert_eq!(rec.flops, step.flops);
        feat = step.feature;
        if let Some(next) = step.next_input {
            input = next;
        }
    }
    assert_eq!(f, feat);

    let (_, guided) = m.generate_vanilla(seed, G).unwrap();
    for k in start..m.schedule.len() {
        let (a, b) = (trace.record(k).unwrap(), guided.record(k).unwrap());
        assert_eq!(2 * a.flops.attention, b.flops.attention);
    }
}

#[test]
fn low_rank_full_at_alpha_one_matches_strategy_one() {
    let m = model();
    for (seed, cfg_zero) in [(0, false), (3, true), (8, false)] {
        let (r1, _) = generate_stagevar(m, &config(Strategy::Vanilla, vec![1.0, 1.0], cfg_zero), None, seed, G).unwrap();
        let (r2, t2) = generate_stagevar(m, &config(Strategy::LowRankFull, vec![1.0, 1.0], cfg_zero), None, seed, G).unwrap();
        assert!(r2.relative_error(&r1).unwrap() <= 1e-8);
        for rec in t2.records.iter().filter(|r| m.schedule.is_refinement(r.scale)) {
            assert!(rec.truncation.iter().all(|c| c.rank == m.dim().min(rec.grid.tokens())));
        }
    }
}

#[test]
fn truncation_error_equals_singular_tail() {
    let m = model();
    let (_, trace) = generate_stagevar(m, &config(Strategy::LowRankFull, vec![0.9, 0.5], true), None, 2, G).unwrap();
    let checks: Vec<_> = trace.records.iter().flat_map(|r| r.truncation.iter()).collect();
    assert_eq!(checks.len(), 2 * m.predictor.num_blocks());
    for c in checks {
        assert!((c.error - c.tail).abs() <= 1e-9 * c.tail.max(1.0), "{c:?}");
    }
}

#[test]
fn reduced_variants_count_flops_at_rank() {
    let m = model();
    let d = m.dim();
    for strategy in [Strategy::SvdRdim, Strategy::SvdRdimPredetermined, Strategy::RpLls, Strategy::RpRtr] {
        for cfg_zero in [true, false] {
            let cfg = config(strategy, vec![0.96, 0.9], cfg_zero);
            let (_, trace) = generate_stagevar(m, &cfg, Some(table()), 4, G).unwrap();
            for rec in trace.records.iter().filter(|r| m.schedule.is_refinement(r.scale)) {
                assert_eq!(rec.block_ranks.len(), m.predictor.num_blocks());
                let per_pass = rec
                    .block_ranks
                    .iter()
                    .fold(FlopCount::default(), |acc, &r| acc + FlopCount::block(r, d));
                let passes = if cfg_zero { 1 } else { 2 };
                assert_eq!(rec.forwards, passes);
                assert_eq!(rec.flops.attention, passes as u64 * per_pass.attention, "{strategy} scale {}", rec.scale);
                assert_eq!(rec.flops.mlp, passes as u64 * per_pass.mlp);
            }
        }
    }
}

#[test]
fn rp_rtr_is_the_documented_composition() {
    let m = model();
    let k = m.schedule.refinement_start();
    let pre = m.vanilla_prefix(6, G, k).unwrap();
    let cache = OutputCache::new(pre.last_output.clone().unwrap(), k - 1);
    let cfg = StageConfig {
        seed: 42,
        ..config(Strategy::RpRtr, vec![0.9, 0.9], true)
    };
    let out = refinement_forward(m, &cfg, Some(table()), k, &pre.input, Some(&cache), &m.condition(6), G).unwrap();

    let grid = m.schedule.grid(k);
    let scale_seed = mix_seed(42, k as u64);
    let filler = cache.upsampled(grid).unwrap();
    let mut x = m.predictor.prepare_input(&pre.input, &Condition::null(m.dim())).unwrap();
    let mut flops = FlopCount::default();
    for b in 0..m.predictor.num_blocks() {
        let r = table().rank_for(b, k, 0.9).unwrap();
        let q = ProjectionMatrix::new(grid.tokens(), r, mix_seed(scale_seed, 0x51)).unwrap();
        let y = m.predictor.block_forward(b, &q.q.t().dot(&x), &mut flops).unwrap();
        let idx = sample_rows(pre.input.data(), r, mix_seed(scale_seed, 0x1d)).unwrap().indices;
        x = restore_rows(&y, &idx, filler.data()).unwrap();
    }
    assert_eq!(out.output.data(), &x);
    assert_eq!(out.flops, flops);
}

#[test]
fn per_block_sharing_is_deterministic_and_distinct() {
    let m = model();
    let base = config(Strategy::RpRtr, vec![0.9, 0.9], true);
    let per_block = StageConfig {
        projection_sharing: ProjectionSharing::PerBlock,
        ..base.clone()
    };
    let (a, ta) = generate_stagevar(m, &per_block, Some(table()), 1, G).unwrap();
    let (b, tb) = generate_stagevar(m, &per_block, Some(table()), 1, G).unwrap();
    assert_eq!(a, b);
    assert!(ta.content_eq(&tb));
    let (c, _) = generate_stagevar(m, &base, Some(table()), 1, G).unwrap();
    assert_ne!(a, c);
}

#[test]
fn all_scales_skipped_leaves_the_prefix() {
    let m = model();
    let start = m.schedule.refinement_start();
    for strategy in Strategy::ALL {
        let cfg = config(strategy, vec![0.0, 0.0], true);
        let (f, trace) = generate_stagevar(m, &cfg, Some(table()), 9, G).unwrap();
        assert_eq!(trace.skipped, vec![start, start + 1]);
        assert_eq!(trace.records.len(), start);
        let pre = m.vanilla_prefix(9, G, start).unwrap();
        assert_eq!(f, pre.feature);
    }
}

#[test]
fn skipped_scale_does_not_touch_the_cache() {
    // With the first refinement scale skipped, the second one's cache is the
    // last establishment output.
    let m = model();
    let start = m.schedule.refinement_start();
    let cfg = config(Strategy::RpRtr, vec![0.0, 0.9], true);
    let (_, trace) = generate_stagevar(m, &cfg, Some(table()), 3, G).unwrap();
    assert_eq!(trace.skipped, vec![start]);
    let pre = m.vanilla_prefix(3, G, start).unwrap();
    let k = start + 1;
    let input = stagevar_core::matgrid::downsample(&pre.feature, m.schedule.grid(k)).unwrap();
    let cache = OutputCache::new(pre.last_output.unwrap(), start - 1);
    let out = refinement_forward(m, &cfg, Some(table()), k, &input, Some(&cache), &m.condition(3), G).unwrap();
    assert_eq!(trace.record(k).unwrap().output, out.output);
}

#[test]
fn configuration_errors() {
    let m = model();
    let k = m.schedule.refinement_start();
    let six = config(Strategy::RpRtr, vec![0.9, 0.9], true);
    assert!(matches!(Accelerator::new(m, &six, None), Err(Error::Config(_))));
    let short = config(Strategy::Vanilla, vec![0.9], true);
    assert!(matches!(generate_stagevar(m, &short, None, 0, G), Err(Error::Config(_))));
    let high = config(Strategy::Vanilla, vec![1.5, 0.9], true);
    assert!(matches!(generate_stagevar(m, &high, None, 0, G), Err(Error::Config(_))));
    let missing_alpha = config(Strategy::RpRtr, vec![0.7, 0.9], true);
    assert!(matches!(
        generate_stagevar(m, &missing_alpha, Some(table()), 0, G),
        Err(Error::MissingRankEntry { .. })
    ));
    let pre = m.vanilla_prefix(0, G, k).unwrap();
    let cond = m.condition(0);
    assert!(matches!(
        refinement_forward(m, &six, Some(table()), k, &pre.input, None, &cond, G),
        Err(Error::MissingCache(_))
    ));
    let (_, start) = m.initial_state();
    assert!(matches!(
        refinement_forward(m, &six, Some(table()), 0, &start, None, &cond, G),
        Err(Error::OutOfRange(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn restore_conserves_rows(h in 1usize..6, w in 1usize..6, ch in 1usize..4, seed in any::<u64>(), r_pick in 0usize..36, cache_side in 1usize..4) {
        let grid = Grid::new(h + 1, w + 1);
        let m_tokens = grid.tokens();
        let r = 1 + r_pick % m_tokens;
        let f_tilde = FeatureMap::new(gaussian(m_tokens, ch, seed), grid).unwrap();
        let cache_grid = Grid::new(cache_side.min(grid.h), cache_side.min(grid.w));
        let cache = OutputCache::new(FeatureMap::new(gaussian(cache_grid.tokens(), ch, seed ^ 5), cache_grid).unwrap(), 0);
        let computed = gaussian(r, ch, seed ^ 9);
        let out = restore_tokens(&computed, &f_tilde, &cache, r, seed).unwrap();
        let idx = sample_rows(f_tilde.data(), r, seed).unwrap().indices;
        let filler = upsample(&cache.output, grid).unwrap();
        let mut j = 0;
        for i in 0..m_tokens {
            if idx.get(j) == Some(&i) {
                prop_assert_eq!(out.data().row(i), computed.row(j));
                j += 1;
            } else {
                prop_assert_eq!(out.data().row(i), filler.data().row(i));
            }
        }
        prop_assert_eq!(j, r);
    }

    #[test]
    fn accelerated_runs_are_reproducible(prompt in 0u64..200, stage_seed in 0u64..4, s in 3usize..=6) {
        let m = model();
        let strategy = Strategy::from_number(s).unwrap();
        let cfg = StageConfig { seed: stage_seed, ..config(strategy, vec![0.96, 0.9], true) };
        let (a, ta) = generate_stagevar(m, &cfg, Some(table()), prompt, G).unwrap();
        let (b, tb) = generate_stagevar(m, &cfg.clone(), Some(table()), prompt, G).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(ta.content_eq(&tb));
    }
}
