use proptest::prelude::*;
use pseudoris::backends::CaptionerBackend;
use pseudoris::decoding::{
    calibrate, candidate_rng, generate, CalibrationContext, CalibrationMode, CandidateKey, DecodingConfig,
};
use pseudoris::maskops::{crop, CropSpec, Patch};
use pseudoris::synthworld::{content_words, make_scene, render, Scene, SynthCaptioner, SynthWorld};

fn patches(world: &SynthWorld, scene: &Scene, spec: CropSpec) -> Vec<Patch> {
    let image = render(world, scene, "scene");
    scene
        .masks()
        .iter()
        .enumerate()
        .map(|(i, m)| crop(&image, m, i, spec).unwrap())
        .collect()
}

fn context(cap: &SynthCaptioner, all: &[Patch], target: usize) -> CalibrationContext {
    let others = all
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(_, p)| p.clone())
        .collect();
    CalibrationContext::new(cap, all[target].clone(), others).unwrap()
}

/// How often the sampled caption names a descriptor only the target has.
fn unique_word_rate(config: &DecodingConfig, n_scenes: u64) -> f64 {
    let world = SynthWorld::default();
    let cap = SynthCaptioner::new(world.clone());
    let (mut hits, mut total) = (0usize, 0usize);
    for seed in 0..n_scenes {
        let scene = make_scene(&world, seed, 2, 1.0).unwrap();
        let all = patches(&world, &scene, CropSpec::new(0.1, false));
        for target in 0..2 {
            let ctx = context(&cap, &all, target);
            let mut rng = candidate_rng(&CandidateKey {
                seed,
                image_id: "scene",
                mask_index: target,
                crop_index: 0,
                config_index: 0,
            });
            let seq = generate(&cap, &ctx, config, &mut rng).unwrap();
            let text = world.vocabulary().decode(&seq.ids);
            let other = &scene.objects[1 - target];
            let own = &scene.objects[target];
            total += 1;
            hits += content_words(world.space(), &text)
                .iter()
                .any(|w| own.has_descriptor(w) && !other.has_descriptor(w)) as usize;
        }
    }
    hits as f64 / total as f64
}

#[test]
fn distinctive_sampling_names_the_differing_attribute_more_often() {
    let naive = unique_word_rate(&DecodingConfig::top_k(5, false), 250);
    let distinctive = unique_word_rate(&DecodingConfig::top_k(5, true).with_temperature(0.05), 250);
    assert!(
        distinctive > naive + 0.2,
        "distinctive {distinctive:.3} vs naive {naive:.3}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // At the attribute slot of a fully overlapping scene, every attribute the
    // target shares with a similar distractor loses mass under calibration.
    #[test]
    fn shared_attributes_lose_mass(
        seed in any::<u64>(),
        n in 2usize..5,
        temperature in prop::sample::select(vec![0.05, 0.5, 1.0]),
        weighted in any::<bool>(),
    ) {
        let world = SynthWorld::default();
        let cap = SynthCaptioner::new(world.clone());
        let scene = make_scene(&world, seed, n, 1.0).unwrap();
        let all = patches(&world, &scene, CropSpec::new(0.0, true));
        let ctx = context(&cap, &all, 0);
        prop_assume!(ctx.sims.iter().any(|s| *s > 0.0));

        let prefix = [world.vocabulary().id("a").unwrap()];
        let before = cap.next_word_dist(&ctx.target, &prefix).unwrap();
        let others: Vec<_> = ctx.others.iter().map(|p| cap.next_word_dist(p, &prefix).unwrap()).collect();
        let mode = if weighted { CalibrationMode::Weighted } else { CalibrationMode::Average };
        let after = calibrate(&before, &others, &ctx.sims, temperature, mode).unwrap();

        let target = &scene.objects[0];
        for a in &target.attrs {
            if scene.objects[1..].iter().any(|o| o.has_descriptor(a)) {
                let id = world.vocabulary().id(a).unwrap() as usize;
                prop_assert!(
                    after.probs()[id] < before.probs()[id],
                    "`{}`: {} -> {}", a, before.probs()[id], after.probs()[id]
                );
            }
        }
    }
}
