use pipetteloc::enhancer::{collect_patches, CycleGanBundle, CycleGanConfig, GanSchedule};
use pipetteloc::nn::Device;
use pipetteloc::synthdata::{generate_scenes, SceneConfig};

#[test]
fn identical_domains_reconstruction_improves() {
    let mut patches = collect_patches(&generate_scenes(&SceneConfig { rng_seed: 11, ..SceneConfig::default() }, 8).unwrap()).unwrap();
    patches.truncate(12);
    let config = CycleGanConfig {
        generator_width: 8,
        residual_blocks: 1,
        discriminator_width: 8,
        batch_size: 4,
        seed: 11,
        ..CycleGanConfig::default()
    };
    let mut bundle = CycleGanBundle::new(config, &Device::Cpu).unwrap();
    let before = bundle.reconstruction_error(&patches).unwrap();
    bundle.train(&patches, &patches, &GanSchedule::constant(4)).unwrap();
    let after = bundle.reconstruction_error(&patches).unwrap();
    assert!(after < before, "{before} -> {after}");
    assert_eq!(bundle.history().len(), 4);
}
