use latch_core::selftest::{
    composite_sweep, generate_determinism, neutrality, recipes, sampler_oracle, v_identity, COMPOSITES,
};

#[test]
fn composite_losses_match_central_differences() {
    let reports = composite_sweep(3, 1e-4).unwrap();
    assert_eq!(reports.len(), COMPOSITES.len());
    for (name, rep) in reports {
        println!("{name}: {rep:?}");
        assert!(rep.checked > 0, "{name} checked nothing");
        assert!(rep.max_rel_error < 1e-3, "{name}: {rep:?}");
    }
}

#[test]
fn v_identity_holds() {
    let c = v_identity(1, 1000).unwrap();
    assert!(c.pass, "{c}");
}

#[test]
fn exact_gaussian_denoiser_recovers_moments() {
    let c = sampler_oracle(2, 10_000).unwrap();
    assert!(c.pass, "{c}");
}

#[test]
fn masked_or_zero_guidance_is_neutral() {
    let c = neutrality(4).unwrap();
    assert!(c.pass, "{c}");
}

#[test]
fn recipe_hand_cases() {
    let c = recipes().unwrap();
    assert!(c.pass, "{c}");
}

#[test]
fn seeded_generation_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_determinism(5, dir.path()).unwrap();
    assert!(c.pass, "{c}");
}
