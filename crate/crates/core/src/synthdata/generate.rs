use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{BenchmarkConfig, DatasetSplits, DomainParams, DomainRole, GenerationError, IMAGE_ID_STRIDE};
use crate::domain::{BBox, FeatureGrid, Sample};
use crate::scalar::Scalar;

const STREAM_SIGNATURE: u64 = 0x5349_474e;
const STREAM_PARAMS: u64 = 0x5041_5241;
const STREAM_IMAGES: u64 = 0x494d_4753;

/// Mixes `(seed, stream, index)` into an independent 64-bit seed (splitmix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z =
        seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(31);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}

fn cast<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

/// Draws the parameters of one domain.
///
/// Every random quantity comes from a stream keyed by `(cfg.seed, draw_index)`
/// and is drawn in the same order for every role; `role` only decides how far
/// the draw is displaced. With `shift_severity = 0`, a `Source` and an OOD draw
/// at the same index are identical.
pub fn sample_domain_params<T: Scalar>(cfg: &BenchmarkConfig, role: DomainRole, draw_index: usize) -> DomainParams<T> {
    let h = &cfg.hyper;
    let f = cfg.feature_dim;
    let shift = if role.is_ood() { cfg.shift_severity } else { 0.0 };

    let mut sig_rng = rng_for(cfg.seed, STREAM_SIGNATURE, 0);
    let shared_signature: Vec<f64> = normal_vec(&mut sig_rng, f).into_iter().map(|x| h.signature_scale * x).collect();

    let mut rng = rng_for(cfg.seed, STREAM_PARAMS, draw_index as u64);
    let direction = unit((0..f * f).map(|_| rng.random_range(-1.0..1.0)).collect());
    let radius = h.transform_jitter * rng.random::<f64>();
    let bias0 = normal_vec(&mut rng, f);
    let bias_dir = unit(normal_vec(&mut rng, f));
    let sig_noise = normal_vec(&mut rng, f);
    let sig_dir = unit(normal_vec(&mut rng, f));
    let noise_u: f64 = rng.random();

    let deviation = radius + shift * h.transform_jitter;
    let mut transform: Vec<f64> = direction.iter().map(|d| deviation * d).collect();
    for k in 0..f {
        transform[k * f + k] += 1.0;
    }

    let root_f = (f as f64).sqrt();
    let bias: Vec<f64> =
        bias0.iter().zip(&bias_dir).map(|(b, d)| h.bias_scale * b + shift * h.bias_scale * root_f * d).collect();
    let signature: Vec<f64> = shared_signature
        .iter()
        .zip(sig_noise.iter().zip(&sig_dir))
        .map(|(s, (n, d))| s + h.signature_jitter * n + shift * h.signature_jitter * root_f * d)
        .collect();

    let mut noise = h.noise_sigma * (1.0 + h.noise_jitter * (2.0 * noise_u - 1.0));
    if role == DomainRole::HardSource {
        noise *= h.hard_noise_factor;
    }
    noise *= 1.0 + h.ood_noise_gain * shift;

    let g = cfg.grid_size as f64;
    let size_gain = 1.0 + h.ood_size_gain * shift;
    let size = ((h.object_size.0 * size_gain).min(g), (h.object_size.1 * size_gain).min(g));
    let cap = cfg.grid_size * cfg.grid_size;
    let count_hi = (h.object_count.1 + (h.ood_count_gain * shift).round() as usize).min(cap);

    DomainParams {
        domain: cfg.domain_id(draw_index),
        role,
        feature_transform: cast(&transform),
        feature_bias: cast(&bias),
        noise_sigma: T::lit(noise),
        object_count_range: (h.object_count.0.min(count_hi), count_hi),
        object_size_range: (T::lit(size.0), T::lit(size.1)),
        center_jitter: T::lit(h.center_jitter),
        base_signature: cast(&signature),
    }
}

fn check_params<T: Scalar>(p: &DomainParams<T>, grid: usize, dim: usize) -> Result<(), GenerationError> {
    let bad = |m: &str| Err(GenerationError::Params(m.to_string()));
    if p.feature_transform.len() != dim * dim || p.feature_bias.len() != dim || p.base_signature.len() != dim {
        return bad("shape does not match feature_dim");
    }
    if p.noise_sigma.is_nan() || p.noise_sigma < T::zero() {
        return bad("noise_sigma must be >= 0");
    }
    let (lo, hi) = p.object_count_range;
    if lo > hi {
        return bad("object_count_range lo > hi");
    }
    if hi > grid * grid {
        return Err(GenerationError::Capacity { objects: hi, grid });
    }
    let (slo, shi) = p.object_size_range;
    if !(slo > T::zero() && slo <= shi && shi <= T::from_count(grid)) {
        return bad("object_size_range outside (0, G]");
    }
    if !(p.center_jitter >= T::zero() && p.center_jitter < T::lit(0.5)) {
        return bad("center_jitter outside [0, 0.5)");
    }
    Ok(())
}

/// Renders `n_images` samples of one domain.
///
/// Object centres occupy distinct cells. A cell holds the transformed object
/// signature when it is an object's own cell or its centre lies strictly inside
/// an object box; every other cell holds the transformed zero signature. Both
/// get the domain bias plus Gaussian noise.
pub fn generate_domain<T: Scalar, R: Rng>(
    params: &DomainParams<T>,
    n_images: usize,
    grid: usize,
    dim: usize,
    rng: &mut R,
    first_image_id: u64,
) -> Result<Vec<Sample<T>>, GenerationError> {
    if n_images == 0 {
        return Err(GenerationError::NoImages);
    }
    check_params(params, grid, dim)?;

    let as64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
    let transform = as64(&params.feature_transform);
    let bias = as64(&params.feature_bias);
    let signature = as64(&params.base_signature);
    let object_pattern: Vec<f64> =
        (0..dim).map(|r| (0..dim).map(|c| transform[r * dim + c] * signature[c]).sum::<f64>() + bias[r]).collect();
    let sigma = params.noise_sigma.as_f64();
    let (count_lo, count_hi) = params.object_count_range;
    let (size_lo, size_hi) = (params.object_size_range.0.as_f64(), params.object_size_range.1.as_f64());
    let g = grid as f64;
    let jitter = params.center_jitter.as_f64();

    let mut out = Vec::with_capacity(n_images);
    for j in 0..n_images {
        let k = rng.random_range(count_lo..=count_hi);
        let cells = sample_indices(rng, grid * grid, k).into_vec();
        let mut boxes = Vec::with_capacity(k);
        for &cell in &cells {
            let (row, col) = ((cell / grid) as f64, (cell % grid) as f64);
            let mut w = if size_hi > size_lo { rng.random_range(size_lo..=size_hi) } else { size_lo };
            let mut h = if size_hi > size_lo { rng.random_range(size_lo..=size_hi) } else { size_lo };
            // keep the centre inside its own cell while the box stays within the grid
            w = w.min(2.0 * (col + 1.0)).min(2.0 * (g - col));
            h = h.min(2.0 * (row + 1.0)).min(2.0 * (g - row));
            let cx =
                (col + 0.5 + rng.random_range(-jitter..=jitter)).clamp(col.max(0.5 * w), (col + 1.0).min(g - 0.5 * w));
            let cy =
                (row + 0.5 + rng.random_range(-jitter..=jitter)).clamp(row.max(0.5 * h), (row + 1.0).min(g - 0.5 * h));
            let b = BBox::new(
                T::lit((cx - 0.5 * w).max(0.0)),
                T::lit((cy - 0.5 * h).max(0.0)),
                T::lit((cx + 0.5 * w).min(g)),
                T::lit((cy + 0.5 * h).min(g)),
            )
            .map_err(|e| GenerationError::Params(e.to_string()))?;
            boxes.push(b);
        }

        let mut covered = vec![false; grid * grid];
        for (&cell, b) in cells.iter().zip(&boxes) {
            covered[cell] = true;
            let (x0, y0, x1, y1) = (b.xmin().as_f64(), b.ymin().as_f64(), b.xmax().as_f64(), b.ymax().as_f64());
            for (c, flag) in covered.iter_mut().enumerate() {
                let (ccx, ccy) = ((c % grid) as f64 + 0.5, (c / grid) as f64 + 0.5);
                if x0 < ccx && ccx < x1 && y0 < ccy && ccy < y1 {
                    *flag = true;
                }
            }
        }

        let mut features = FeatureGrid::zeros(grid, dim);
        for (c, &is_obj) in covered.iter().enumerate() {
            let base = if is_obj { &object_pattern } else { &bias };
            for (slot, &mean) in features.cell_mut(c).iter_mut().zip(base.iter()) {
                let noise = if sigma > 0.0 { sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                *slot = T::lit(mean + noise);
            }
        }

        out.push(Sample {
            domain: params.domain.clone(),
            image_id: first_image_id + j as u64,
            features,
            gt_boxes: boxes,
        });
    }
    Ok(out)
}

/// Builds all six splits; a pure function of `cfg`.
pub fn build_benchmark<T: Scalar>(cfg: &BenchmarkConfig) -> Result<DatasetSplits<T>, GenerationError> {
    cfg.validate()?;
    let mut splits = DatasetSplits {
        official_train: Vec::new(),
        official_val_ood: Vec::new(),
        official_test_ood: Vec::new(),
        id_holdout: Vec::new(),
        mixed_train: Vec::new(),
        mixed_test: Vec::new(),
        domain_registry: Vec::new(),
    };
    let mut mixed_extra = Vec::new();

    for index in 0..cfg.n_domains() {
        let role = cfg.role_of(index);
        let params = sample_domain_params::<T>(cfg, role, index);
        let n_main = cfg.images_for(index);
        let n_total = if role.is_source() { n_main + cfg.holdout_images_per_domain } else { n_main };
        let mut rng = rng_for(cfg.seed, STREAM_IMAGES, index as u64);
        let mut images = generate_domain(
            &params,
            n_total,
            cfg.grid_size,
            cfg.feature_dim,
            &mut rng,
            index as u64 * IMAGE_ID_STRIDE,
        )?;
        match role {
            DomainRole::Source | DomainRole::HardSource => {
                let holdout = images.split_off(n_main);
                splits.official_train.extend(images);
                splits.id_holdout.extend(holdout);
            }
            DomainRole::ValOod | DomainRole::TestOod => {
                let half = n_main / 2;
                mixed_extra.extend(images[..half].iter().cloned());
                splits.mixed_test.extend(images[half..].iter().cloned());
                if role == DomainRole::ValOod {
                    splits.official_val_ood.extend(images);
                } else {
                    splits.official_test_ood.extend(images);
                }
            }
        }
        splits.domain_registry.push(params);
    }
    splits.mixed_train = splits.official_train.clone();
    splits.mixed_train.extend(mixed_extra);
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::domain::validate_sample;
    use crate::synthdata::BenchmarkConfig;

    fn tiny() -> BenchmarkConfig {
        BenchmarkConfig {
            n_source_domains: 2,
            n_val_ood_domains: 1,
            n_test_ood_domains: 1,
            images_per_domain: 10,
            ..BenchmarkConfig::smoke_preset()
        }
    }

    fn frob_dev(p: &DomainParams<f64>, f: usize) -> f64 {
        let mut s = 0.0;
        for r in 0..f {
            for c in 0..f {
                let id = if r == c { 1.0 } else { 0.0 };
                s += (p.feature_transform[r * f + c] - id).powi(2);
            }
        }
        s.sqrt()
    }

    #[test]
    fn zero_shift_source_equals_ood() {
        let cfg = BenchmarkConfig { shift_severity: 0.0, hard_domain_fraction: 0.0, ..tiny() };
        for idx in 0..5 {
            let a = sample_domain_params::<f64>(&cfg, DomainRole::Source, idx);
            let b = sample_domain_params::<f64>(&cfg, DomainRole::TestOod, idx);
            assert_eq!(a.feature_transform, b.feature_transform);
            assert_eq!(a.feature_bias, b.feature_bias);
            assert_eq!(a.noise_sigma, b.noise_sigma);
            assert_eq!(a.object_count_range, b.object_count_range);
            assert_eq!(a.object_size_range, b.object_size_range);
            assert_eq!(a.base_signature, b.base_signature);
        }
    }

    #[test]
    fn params_deterministic() {
        let cfg = tiny();
        let a = sample_domain_params::<f64>(&cfg, DomainRole::ValOod, 3);
        let b = sample_domain_params::<f64>(&cfg, DomainRole::ValOod, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn severe_shift_exceeds_source_ceiling() {
        let cfg = BenchmarkConfig { shift_severity: 2.0, ..tiny() };
        let f = cfg.feature_dim;
        let ceiling = cfg.hyper.transform_jitter;
        let src_max =
            (0..100).map(|i| frob_dev(&sample_domain_params(&cfg, DomainRole::Source, i), f)).fold(0.0, f64::max);
        let ood_min = (0..100)
            .map(|i| frob_dev(&sample_domain_params(&cfg, DomainRole::TestOod, i), f))
            .fold(f64::INFINITY, f64::min);
        assert!(src_max <= ceiling + 1e-12, "source max {src_max} above ceiling {ceiling}");
        assert!(ood_min > ceiling, "ood min {ood_min} not above ceiling {ceiling}");
    }

    fn identity_params(f: usize, count: (usize, usize)) -> DomainParams<f64> {
        let mut t = vec![0.0; f * f];
        for k in 0..f {
            t[k * f + k] = 1.0;
        }
        DomainParams {
            domain: crate::domain::DomainId::new(0, "src_00").unwrap(),
            role: DomainRole::Source,
            feature_transform: t,
            feature_bias: vec![0.0; f],
            noise_sigma: 0.0,
            object_count_range: count,
            object_size_range: (0.8, 0.9),
            center_jitter: 0.1,
            base_signature: (0..f).map(|k| 0.5 + k as f64).collect(),
        }
    }

    #[test]
    fn noiseless_identity_cells_hold_signature() {
        let p = identity_params(3, (3, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = generate_domain(&p, 5, 5, 3, &mut rng, 0).unwrap();
        for s in &samples {
            assert_eq!(s.gt_boxes.len(), 3);
            validate_sample(s, 5, 3).unwrap();
            for b in &s.gt_boxes {
                let (cx, cy) = b.center();
                let cell = cy.floor() as usize * 5 + cx.floor() as usize;
                assert_eq!(s.features.cell(cell), p.base_signature.as_slice());
            }
            let objects = (0..25).filter(|&c| s.features.cell(c) == p.base_signature.as_slice());
            assert_eq!(objects.count(), 3);
            let background = (0..25).filter(|&c| s.features.cell(c).iter().all(|&v| v == 0.0));
            assert_eq!(background.count(), 22);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = sample_domain_params::<f64>(&tiny(), DomainRole::HardSource, 1);
        let a = generate_domain(&p, 4, 6, 4, &mut ChaCha8Rng::seed_from_u64(9), 0).unwrap();
        let b = generate_domain(&p, 4, 6, 4, &mut ChaCha8Rng::seed_from_u64(9), 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn over_capacity_rejected() {
        let p = identity_params(2, (5, 5));
        let err = generate_domain(&p, 1, 2, 2, &mut ChaCha8Rng::seed_from_u64(0), 0).unwrap_err();
        assert_eq!(err, GenerationError::Capacity { objects: 5, grid: 2 });
        let p = identity_params(2, (1, 1));
        assert_eq!(
            generate_domain(&p, 0, 2, 2, &mut ChaCha8Rng::seed_from_u64(0), 0).unwrap_err(),
            GenerationError::NoImages
        );
    }

    fn domains(s: &[Sample<f64>]) -> BTreeSet<usize> {
        s.iter().map(|x| x.domain.index).collect()
    }

    fn ids(s: &[Sample<f64>]) -> BTreeSet<u64> {
        s.iter().map(|x| x.image_id).collect()
    }

    #[test]
    fn split_bookkeeping() {
        let splits = build_benchmark::<f64>(&tiny()).unwrap();
        assert_eq!(splits.official_train.len(), 20);
        assert_eq!(domains(&splits.official_train).len(), 2);
        assert_eq!(splits.mixed_test.len(), 10);
        assert_eq!(domains(&splits.mixed_test).len(), 2);
        assert_eq!(splits.mixed_train.len(), 30);
        assert!(domains(&splits.official_train).is_disjoint(&domains(&splits.official_test_ood)));
        assert!(domains(&splits.official_train).is_disjoint(&domains(&splits.official_val_ood)));
        assert!(ids(&splits.mixed_train).is_disjoint(&ids(&splits.mixed_test)));
        assert!(ids(&splits.id_holdout).is_disjoint(&ids(&splits.official_train)));
        assert!(ids(&splits.official_train).is_subset(&ids(&splits.mixed_train)));
        let registry: BTreeSet<usize> = splits.domain_registry.iter().map(|p| p.domain.index).collect();
        for name in crate::synthdata::SPLIT_NAMES {
            for s in splits.split(name).unwrap() {
                assert!(registry.contains(&s.domain.index));
                validate_sample(s, 6, 4).unwrap();
            }
        }
    }

    #[test]
    fn benchmark_deterministic() {
        assert_eq!(build_benchmark::<f64>(&tiny()).unwrap(), build_benchmark::<f64>(&tiny()).unwrap());
    }

    #[test]
    fn hard_domains_are_last_sources() {
        let cfg = BenchmarkConfig::desk_preset();
        assert_eq!(cfg.n_hard_domains(), 2);
        let roles: Vec<DomainRole> = (0..6).map(|i| cfg.role_of(i)).collect();
        assert_eq!(&roles[4..], &[DomainRole::HardSource, DomainRole::HardSource]);
        assert_eq!(cfg.role_of(6), DomainRole::ValOod);
        assert_eq!(cfg.role_of(10), DomainRole::TestOod);
        assert_eq!(cfg.domain_id(8).label, "test_00");
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = tiny();
        cfg.n_source_domains = 1;
        assert!(build_benchmark::<f64>(&cfg).is_err());
        let mut cfg = tiny();
        cfg.grid_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.images_per_domain_overrides.insert(99, 3);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_change_counts() {
        let mut cfg = tiny();
        cfg.images_per_domain_overrides.insert(1, 3);
        let splits = build_benchmark::<f64>(&cfg).unwrap();
        assert_eq!(splits.official_train.iter().filter(|s| s.domain.index == 1).count(), 3);
        assert_eq!(splits.official_train.len(), 13);
    }

    #[test]
    fn f32_benchmark_matches_f64_draws() {
        let a = build_benchmark::<f64>(&tiny()).unwrap();
        let b = build_benchmark::<f32>(&tiny()).unwrap();
        assert_eq!(a.official_train.len(), b.official_train.len());
        let xs = a.official_train[0].features.as_slice();
        let ys = b.official_train[0].features.as_slice();
        for (x, y) in xs.iter().zip(ys) {
            assert!((*x as f32 - y).abs() <= 1e-5 * (1.0 + x.abs() as f32), "{x} vs {y}");
        }
        assert_eq!(a.official_train[0].gt_boxes.len(), b.official_train[0].gt_boxes.len());
    }
}
