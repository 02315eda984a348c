mod common;

use std::collections::HashSet;

use voxcl_core::augment::AugmentConfig;
use voxcl_core::phantom::{generate_phantom, PhantomSpec};
use voxcl_core::sampler::{
    assemble_batch, extract_patch, sample_labeled_patch, sample_pair_geometry, sample_patch_pair, PatchSpec,
    SampleSource, SamplerConfig,
};
use voxcl_core::volume::{compute_body_mask, preprocess, BodyMask, Grid3, PreprocessConfig, Volume};
use voxcl_core::Error;

fn phantom(seed: u64, patch: &PatchSpec) -> (Volume, BodyMask, voxcl_core::volume::LabelGrid) {
    let lv = generate_phantom(&PhantomSpec::default(), seed).unwrap();
    let p = preprocess(&lv.volume, Some(&lv.labels), &PreprocessConfig::default(), patch.extents).unwrap();
    (p.volume, p.mask, p.labels.unwrap())
}

#[test]
fn full_overlap_on_all_body_volume_gives_distinct_positions() {
    let v = Volume::new(Grid3::filled([20, 20, 10], 0.0), [1.0; 3]).unwrap();
    let mask = compute_body_mask(&v, &PreprocessConfig::default());
    let spec = PatchSpec { extents: [8, 8, 4] };
    let cfg = SamplerConfig { m: 200, min_overlap_fraction: 1.0, max_retries: 20 };
    let mut rng = common::rng(1);
    for _ in 0..20 {
        let g = sample_pair_geometry(&mask, &spec, &cfg, &mut rng).unwrap();
        assert_eq!(g.origins[0], g.origins[1]);
        assert!(!g.with_replacement);
        let distinct: HashSet<_> = g.locals[0].iter().collect();
        assert_eq!(distinct.len(), 200);
        assert!(g.locals[0].iter().all(|l| l[0] < 8 && l[1] < 8 && l[2] < 4));
    }
}

#[test]
fn pair_invariants_hold_on_phantoms() {
    let spec = PatchSpec::default();
    let cfg = SamplerConfig::default();
    let aug = AugmentConfig::default();
    let mut rng = common::rng(2);
    for seed in 0..4 {
        let (v, mask, _) = phantom(seed, &spec);
        for _ in 0..50 {
            let pair = sample_patch_pair(&v, &mask, &spec, &cfg, &aug, &mut rng).unwrap();
            let g = &pair.geometry;
            assert_eq!(g.positions.len(), cfg.m);
            assert!(!g.with_replacement);
            assert_eq!(g.positions.iter().collect::<HashSet<_>>().len(), cfg.m);
            let raw = g.origins.map(|o| extract_patch(&v, o, spec.extents));
            for (i, pos) in g.positions.iter().enumerate() {
                assert!(mask.is_body(pos[0], pos[1], pos[2]));
                for k in 0..2 {
                    let l = g.locals[k][i];
                    for a in 0..3 {
                        assert_eq!(l[a] + g.origins[k][a], pos[a]);
                        assert!(l[a] < spec.extents[a]);
                        // Every pyramid level sees a valid cell.
                        for level in 0..3 {
                            assert!(l[a] >> level < spec.extents[a] >> level);
                        }
                    }
                    assert_eq!(raw[k].get(l[0], l[1], l[2]), v.intensities.get(pos[0], pos[1], pos[2]));
                }
            }
            let overlap: usize = (0..3)
                .map(|a| spec.extents[a] - g.origins[0][a].abs_diff(g.origins[1][a]))
                .product();
            assert!(overlap as f64 >= 0.25 * spec.voxels() as f64);
            for p in &pair.patches {
                assert!(p.data().iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }
}

#[test]
fn scarce_body_falls_back_to_replacement() {
    let v = Volume::new(
        Grid3::from_fn([16, 16, 8], |x, y, z| if (7..9).contains(&x) && (7..9).contains(&y) && z == 4 { 0.0 } else { -1000.0 }),
        [1.0; 3],
    )
    .unwrap();
    let mask = compute_body_mask(&v, &PreprocessConfig::default());
    let spec = PatchSpec { extents: [8, 8, 4] };
    let cfg = SamplerConfig { m: 10, min_overlap_fraction: 0.25, max_retries: 5 };
    let g = sample_pair_geometry(&mask, &spec, &cfg, &mut common::rng(3)).unwrap();
    assert!(g.with_replacement);
    assert_eq!(g.positions.len(), 10);
    assert!(g.positions.iter().all(|p| mask.is_body(p[0], p[1], p[2])));

    let air = Volume::new(Grid3::filled([16, 16, 8], -1000.0), [1.0; 3]).unwrap();
    let none = compute_body_mask(&air, &PreprocessConfig::default());
    assert!(matches!(sample_pair_geometry(&none, &spec, &cfg, &mut common::rng(3)), Err(Error::Sampling(_))));
}

#[test]
fn too_small_volume_is_a_contract_error() {
    let v = Volume::new(Grid3::filled([4, 4, 4], 0.0), [1.0; 3]).unwrap();
    let mask = compute_body_mask(&v, &PreprocessConfig::default());
    let spec = PatchSpec { extents: [8, 8, 4] };
    let r = sample_pair_geometry(&mask, &spec, &SamplerConfig::default(), &mut common::rng(0));
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn batch_sizes_follow_n_and_m() {
    let spec = PatchSpec::default();
    let data: Vec<_> = (0..10).map(|s| phantom(s, &spec)).collect();
    let sources: Vec<_> = data
        .iter()
        .enumerate()
        .map(|(i, (v, m, _))| SampleSource { volume: v, mask: m, seed: 100 + i as u64 })
        .collect();
    let cfg = SamplerConfig { m: 1000, ..SamplerConfig::default() };
    let b = assemble_batch(&sources, &spec, &cfg, &AugmentConfig::default()).unwrap();
    assert_eq!(b.patches.shape(), &[20, 1, 32, 32, 16]);
    assert_eq!(b.pairs.len(), 10_000);
    // Every sampled voxel is negative to all 2N - 2 others.
    assert_eq!(2 * b.pairs.len() - 2, 19_998);
    for (i, p) in b.pairs.iter().enumerate() {
        let v = i / 1000;
        assert_eq!(p.patch, [2 * v, 2 * v + 1]);
    }

    let one = assemble_batch(&sources[..1], &spec, &SamplerConfig { m: 1, ..cfg }, &AugmentConfig::default()).unwrap();
    assert_eq!(one.patches.shape()[0], 2);
    assert_eq!(one.pairs.len(), 1);
}

#[test]
fn shuffled_sources_give_the_same_pairs() {
    let spec = PatchSpec::default();
    let data: Vec<_> = (0..4).map(|s| phantom(s, &spec)).collect();
    let sources: Vec<_> = data
        .iter()
        .enumerate()
        .map(|(i, (v, m, _))| SampleSource { volume: v, mask: m, seed: 7 * i as u64 })
        .collect();
    let cfg = SamplerConfig::default();
    let aug = AugmentConfig::default();
    let order = [2, 0, 3, 1];
    let shuffled: Vec<_> = order.iter().map(|&i| sources[i]).collect();
    let a = assemble_batch(&sources, &spec, &cfg, &aug).unwrap();
    let b = assemble_batch(&shuffled, &spec, &cfg, &aug).unwrap();
    let set_a: HashSet<_> = a.world.iter().map(|&(v, p)| (v, p)).collect();
    let set_b: HashSet<_> = b.world.iter().map(|&(v, p)| (order[v], p)).collect();
    assert_eq!(set_a, set_b);
}

#[test]
fn labeled_patches_cover_body_voxels() {
    let spec = PatchSpec::default();
    let (v, mask, labels) = phantom(5, &spec);
    let mut rng = common::rng(4);
    for _ in 0..50 {
        let lp = sample_labeled_patch(&v, &mask, &labels, &spec, &mut rng).unwrap();
        assert_eq!(lp.image.dims(), spec.extents);
        assert!(lp.image.data().iter().all(|x| (0.0..=1.0).contains(x)));
        let o = lp.origin;
        assert_eq!(lp.labels.get(3, 4, 5), labels.get(o[0] + 3, o[1] + 4, o[2] + 5));
    }
}
