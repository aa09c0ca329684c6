use std::sync::Arc;

use ckks::{keygen, tolerance, CkksBackend, CkksContext, HasMeta, HeBackend, HeError, HeParams};
use rand::rngs::StdRng;
use rand::SeedableRng;

fn desk() -> (CkksBackend, StdRng) {
    let ctx = Arc::new(CkksContext::new(HeParams::desk()).unwrap());
    let mut rng = StdRng::seed_from_u64(7);
    let keys = keygen(&ctx, &[1, 2, 3], &mut rng);
    let he = CkksBackend::new(ctx, Arc::new(keys.public), Some(Arc::new(keys.secret))).unwrap();
    (he, rng)
}

fn max_err(got: &[f64], want: &[f64]) -> f64 {
    want.iter().zip(got).map(|(w, g)| (w - g).abs()).fold(0.0, f64::max)
}

#[test]
fn encode_decode_examples() {
    let (he, _) = desk();
    let zero = he.encode(&[0.0; 4], he.params().default_scale).unwrap();
    assert!(he.decode(&zero).iter().all(|&x| x == 0.0));

    let v = [1.0, -0.5, 3.25, 0.125];
    let out = he.decode(&he.encode(&v, he.params().default_scale).unwrap());
    assert!(max_err(&out, &v) < tolerance::ENCODE);
    assert!(out[4..].iter().all(|x| x.abs() < tolerance::ENCODE));

    let ramp: Vec<f64> = (0..he.slot_count()).map(|i| i as f64 / 100.0).collect();
    let out = he.decode(&he.encode(&ramp, he.params().default_scale).unwrap());
    assert!(max_err(&out, &ramp) < tolerance::ENCODE);

    let too_long = vec![1.0; he.slot_count() + 1];
    assert!(matches!(
        he.encode(&too_long, he.params().default_scale),
        Err(HeError::CapacityExceeded { .. })
    ));
}

#[test]
fn small_ring_roundtrip() {
    let ctx = Arc::new(CkksContext::new(HeParams::toy(16, 1).unwrap()).unwrap());
    let mut rng = StdRng::seed_from_u64(1);
    let keys = keygen(&ctx, &[1], &mut rng);
    assert_eq!(keys.public.rotation_steps(), vec![1]);
    let he = CkksBackend::new(ctx, Arc::new(keys.public), Some(Arc::new(keys.secret))).unwrap();
    let v = [0.3, -1.7, 2.5, 4.0, -3.0, 0.0, 1.0, 7.5];
    let ct = he.encode_encrypt(&v, &mut rng).unwrap();
    assert!(max_err(&he.decrypt_decode(&ct).unwrap(), &v) < 1e-6);
}

#[test]
fn encrypt_roundtrip_and_randomization() {
    let (he, mut rng) = desk();
    let v = [1.0, 2.0, 3.0, 4.0];
    let pt = he.encode(&v, he.params().default_scale).unwrap();
    let a = he.encrypt(&pt, &mut rng).unwrap();
    let b = he.encrypt(&pt, &mut rng).unwrap();
    assert_eq!(a.level(), he.max_level());
    assert_ne!(a, b);
    assert!(max_err(&he.decrypt_decode(&a).unwrap(), &v) < tolerance::FRESH_NOISE);
    assert!(max_err(&he.decrypt_decode(&b).unwrap(), &v) < tolerance::FRESH_NOISE);
}

#[test]
fn add_and_add_plain() {
    let (he, mut rng) = desk();
    let a = he.encode_encrypt(&[1.0, 2.0], &mut rng).unwrap();
    let b = he.encode_encrypt(&[3.0, 4.0], &mut rng).unwrap();
    let s = he.add(&a, &b).unwrap();
    assert_eq!(s.meta(), a.meta());
    assert!(max_err(&he.decrypt_decode(&s).unwrap(), &[4.0, 6.0]) < tolerance::FRESH_NOISE);

    let z = he.encode_encrypt(&[0.0; 2], &mut rng).unwrap();
    let same = he.add(&a, &z).unwrap();
    assert!(max_err(&he.decrypt_decode(&same).unwrap(), &[1.0, 2.0]) < tolerance::FRESH_NOISE);

    let ones = he.encode_encrypt(&[1.0, 1.0], &mut rng).unwrap();
    let p = he.encode(&[5.0, 7.0], he.params().default_scale).unwrap();
    let r = he.add_plain(&ones, &p).unwrap();
    assert_eq!(r.level(), ones.level());
    assert!(max_err(&he.decrypt_decode(&r).unwrap(), &[6.0, 8.0]) < tolerance::FRESH_NOISE);

    let zp = he.encode(&[0.0], he.params().default_scale).unwrap();
    let r = he.add_plain(&ones, &zp).unwrap();
    assert!(max_err(&he.decrypt_decode(&r).unwrap(), &[1.0, 1.0]) < tolerance::FRESH_NOISE);
}

#[test]
fn cmult_then_rescale() {
    let (he, mut rng) = desk();
    let scale = he.params().default_scale;
    let a = he.encode_encrypt(&[1.0, 2.0, 3.0], &mut rng).unwrap();
    let p = he.encode(&[2.0, 2.0, 2.0], scale).unwrap();
    let prod = he.cmult(&a, &p).unwrap();
    assert_eq!(prod.scale(), a.scale() * p.scale());
    assert_eq!(prod.level(), a.level());
    let r = he.rescale(&prod).unwrap();
    assert_eq!(r.level(), a.level() - 1);
    let q = he.params().modulus_chain[a.level()] as f64;
    assert_eq!(r.scale(), prod.scale() / q);
    assert!(max_err(&he.decrypt_decode(&r).unwrap(), &[2.0, 4.0, 6.0]) < tolerance::PER_LEVEL);

    let one = he.encode_constant(1.0, scale, he.max_level()).unwrap();
    let r = he.rescale(&he.cmult(&a, &one).unwrap()).unwrap();
    assert!(max_err(&he.decrypt_decode(&r).unwrap(), &[1.0, 2.0, 3.0]) < tolerance::PER_LEVEL);
}

#[test]
fn mult_then_rescale() {
    let (he, mut rng) = desk();
    let a = he.encode_encrypt(&[2.0], &mut rng).unwrap();
    let b = he.encode_encrypt(&[3.0], &mut rng).unwrap();
    let r = he.rescale(&he.mult(&a, &b).unwrap()).unwrap();
    assert!(max_err(&he.decrypt_decode(&r).unwrap(), &[6.0]) < tolerance::PER_LEVEL);

    let x: Vec<f64> = (0..64).map(|i| (i as f64 - 32.0) / 4.0).collect();
    let ct = he.encode_encrypt(&x, &mut rng).unwrap();
    let ones = he.encode_encrypt(&vec![1.0; 64], &mut rng).unwrap();
    let same = he.rescale(&he.mult(&ct, &ones).unwrap()).unwrap();
    assert!(max_err(&he.decrypt_decode(&same).unwrap(), &x) < tolerance::PER_LEVEL);

    let sq = he.rescale(&he.mult(&ct, &ct).unwrap()).unwrap();
    let want: Vec<f64> = x.iter().map(|v| v * v).collect();
    assert!(max_err(&he.decrypt_decode(&sq).unwrap(), &want) < tolerance::PER_LEVEL);
}

#[test]
fn rescale_down_to_level_zero() {
    let (he, mut rng) = desk();
    let v = [1.5, -2.25, 0.75];
    let mut ct = he.encode_encrypt(&v, &mut rng).unwrap();
    let one = |lvl| {
        he.encode_constant(1.0, he.params().modulus_chain[lvl] as f64, lvl)
            .unwrap()
    };
    while ct.level() > 0 {
        let lvl = ct.level();
        ct = he.rescale(&he.cmult(&ct, &one(lvl)).unwrap()).unwrap();
        assert_eq!(ct.level(), lvl - 1);
    }
    assert!(max_err(&he.decrypt_decode(&ct).unwrap(), &v) < tolerance::PER_LEVEL);
    assert!(matches!(he.rescale(&ct), Err(HeError::LevelExhausted)));
}

#[test]
fn rotation() {
    let (he, mut rng) = desk();
    let slots = he.slot_count();
    let v: Vec<f64> = (1..=slots).map(|i| (i % 97) as f64).collect();
    let ct = he.encode_encrypt(&v, &mut rng).unwrap();

    let small = he.encode_encrypt(&[1.0, 2.0, 3.0, 4.0], &mut rng).unwrap();
    let r = he.decrypt_decode(&he.rotate(&small, 1).unwrap()).unwrap();
    assert!(max_err(&r[..4], &[2.0, 3.0, 4.0, 0.0]) < tolerance::FRESH_NOISE);
    assert!((r[slots - 1] - 1.0).abs() < tolerance::FRESH_NOISE);

    let mut want = v.clone();
    want.rotate_left(1);
    let r1 = he.rotate(&ct, 1).unwrap();
    assert_eq!(r1.meta(), ct.meta());
    assert!(max_err(&he.decrypt_decode(&r1).unwrap(), &want) < tolerance::FRESH_NOISE);

    let r0 = he.rotate(&ct, 0).unwrap();
    assert!(max_err(&he.decrypt_decode(&r0).unwrap(), &v) < tolerance::FRESH_NOISE);

    // rotating left by slots - 1 is rotating right by one; no key was generated for it
    assert!(matches!(
        he.rotate(&ct, slots as i64 - 1),
        Err(HeError::MissingRotationKey(_))
    ));
    assert!(matches!(he.rotate(&ct, 5), Err(HeError::MissingRotationKey(5))));

    let r12 = he.rotate(&he.rotate(&ct, 1).unwrap(), 2).unwrap();
    let r3 = he.rotate(&ct, 3).unwrap();
    let (a, b) = (he.decrypt_decode(&r12).unwrap(), he.decrypt_decode(&r3).unwrap());
    assert!(max_err(&a, &b) < 2.0 * tolerance::FRESH_NOISE);
}

#[test]
fn rotation_inverse_composition() {
    let ctx = Arc::new(CkksContext::new(HeParams::toy(64, 1).unwrap()).unwrap());
    let mut rng = StdRng::seed_from_u64(3);
    let slots = ctx.slot_count() as i64;
    let keys = keygen(&ctx, &[5, slots - 5], &mut rng);
    let he = CkksBackend::new(ctx, Arc::new(keys.public), Some(Arc::new(keys.secret))).unwrap();
    let v: Vec<f64> = (0..slots).map(|i| i as f64 - 10.0).collect();
    let ct = he.encode_encrypt(&v, &mut rng).unwrap();
    let back = he.rotate(&he.rotate(&ct, 5).unwrap(), slots - 5).unwrap();
    assert!(max_err(&he.decrypt_decode(&back).unwrap(), &v) < tolerance::FRESH_NOISE);
    let neg = he.rotate(&ct, -5).unwrap();
    let mut want = v.clone();
    want.rotate_right(5);
    assert!(max_err(&he.decrypt_decode(&neg).unwrap(), &want) < tolerance::FRESH_NOISE);
}

#[test]
fn metadata_errors() {
    let (he, mut rng) = desk();
    let scale = he.params().default_scale;
    let a = he.encode_encrypt(&[1.0], &mut rng).unwrap();
    let lower = he.mod_down_to(&a, a.level() - 1).unwrap();
    assert_eq!(lower.scale(), a.scale());
    assert!(matches!(he.add(&a, &lower), Err(HeError::LevelMismatch(..))));
    assert!(matches!(
        he.mod_down_to(&lower, a.level()),
        Err(HeError::LevelRaise { .. })
    ));

    let other = he.encrypt(&he.encode(&[1.0], scale * 2.0).unwrap(), &mut rng).unwrap();
    assert!(matches!(he.add(&a, &other), Err(HeError::ScaleMismatch(..))));

    let low_pt = he.encode_at(&[1.0], scale, 0).unwrap();
    assert!(matches!(he.add_plain(&a, &low_pt), Err(HeError::PlaintextLevel { .. })));

    let bottom = he.mod_down_to(&a, 0).unwrap();
    let big = he.encode(&[1.0], 2f64.powi(30)).unwrap();
    assert!(matches!(he.cmult(&bottom, &big), Err(HeError::ScaleOverflow { .. })));
}

#[test]
fn align_brings_operands_together() {
    let (he, mut rng) = desk();
    let scale = he.params().default_scale;
    let a = he.encode_encrypt(&[1.0, 2.0], &mut rng).unwrap();
    let b = he.encode_encrypt(&[0.5, 0.25], &mut rng).unwrap();
    let two = he.encode(&[3.0, 3.0], scale).unwrap();
    let b = he.rescale(&he.cmult(&b, &two).unwrap()).unwrap();
    assert!(he.add(&a, &b).is_err());
    let (a2, b2) = he.align(&a, &b).unwrap();
    let s = he.add(&a2, &b2).unwrap();
    assert!(max_err(&he.decrypt_decode(&s).unwrap(), &[2.5, 2.75]) < tolerance::PER_LEVEL);
}

#[test]
fn public_only_backend_cannot_decrypt() {
    let ctx = Arc::new(CkksContext::new(HeParams::toy(32, 1).unwrap()).unwrap());
    let mut rng = StdRng::seed_from_u64(2);
    let keys = keygen(&ctx, &[], &mut rng);
    let he = CkksBackend::new(ctx, Arc::new(keys.public), None).unwrap();
    let ct = he.encode_encrypt(&[1.0], &mut rng).unwrap();
    assert!(matches!(he.decrypt(&ct), Err(HeError::MissingSecretKey)));
}

#[test]
fn keys_from_other_params_are_rejected() {
    let ctx_a = Arc::new(CkksContext::new(HeParams::toy(32, 1).unwrap()).unwrap());
    let ctx_b = Arc::new(CkksContext::new(HeParams::toy(32, 2).unwrap()).unwrap());
    let mut rng = StdRng::seed_from_u64(4);
    let keys = keygen(&ctx_a, &[], &mut rng);
    assert!(matches!(
        CkksBackend::new(ctx_b, Arc::new(keys.public), None),
        Err(HeError::ParamMismatch)
    ));
}
