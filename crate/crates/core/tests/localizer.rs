use candle_core::Tensor;
use pipetteloc::config::SMALL_SIGMA;
use pipetteloc::heatmap::{gaussian_heatmap, HeatmapConfig};
use pipetteloc::localizer::{LocalizerConfig, LocalizerModel};
use pipetteloc::losses::{dice_loss_tensor, hungarian_loss_tensor};
use pipetteloc::nn::Device;
use pipetteloc::synthdata::{generate_scenes, SceneConfig};
use pipetteloc::GrayImage;

fn small() -> LocalizerModel {
    LocalizerModel::new(LocalizerConfig::small(), &Device::Cpu).unwrap()
}

fn ramp(n: usize) -> GrayImage {
    GrayImage::from_fn(n, n, |x, y| ((x * 7 + y * 3) % n) as f32 / n as f32)
}

fn zero_final_layer(model: &LocalizerModel) {
    for (_, var) in model.params().vars("decoder.fc") {
        var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
    }
}

#[test]
fn small_model_shapes_and_bounds() {
    let model = small();
    let image = ramp(64);
    let (heatmap, tips) = model.predict(&image).unwrap();
    assert_eq!((heatmap.width(), heatmap.height()), (64, 64));
    assert!(heatmap.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(tips.len(), 4);
    assert!(tips.iter().all(|p| (0.0..=64.0).contains(&p.x) && (0.0..=64.0).contains(&p.y)));

    let x = model.images_to_tensor(&[&image]).unwrap();
    assert_eq!(model.tokens(&x).unwrap().dims(), [1, 64, 64]);
    assert!(model.images_to_tensor(&[&ramp(32)]).is_err());
}

#[test]
fn prediction_composes_the_two_stages() {
    let model = small();
    let image = ramp(64);
    let (h, tips) = model.predict(&image).unwrap();
    assert_eq!(model.encode(&image).unwrap(), h);
    let separate = model.decode(&h).unwrap();
    for (a, b) in separate.iter().zip(&tips) {
        assert!((a.x - b.x).abs() < 1e-4 && (a.y - b.y).abs() < 1e-4, "{a:?} vs {b:?}");
    }
}

#[test]
fn zero_final_layer_centres_every_tip() {
    let model = small();
    zero_final_layer(&model);
    let (_, tips) = model.predict(&ramp(64)).unwrap();
    assert!(tips.iter().all(|p| p.x == 32.0 && p.y == 32.0), "{tips:?}");

    let full = LocalizerModel::new(LocalizerConfig::default(), &Device::Cpu).unwrap();
    zero_final_layer(&full);
    let h = Tensor::zeros((1, 1, 256, 256), candle_core::DType::F32, &Device::Cpu).unwrap();
    let out: Vec<f32> = full.decode_batch(&h).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(out, vec![128.0; 8]);
}

#[test]
fn eval_forward_is_deterministic() {
    let model = small();
    model.set_training(false);
    let x = model.images_to_tensor(&[&ramp(64), &ramp(64)]).unwrap();
    let a: Vec<f32> = model.decode_batch(&model.encode_batch(&x).unwrap()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f32> = model.decode_batch(&model.encode_batch(&x).unwrap()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(a, b);
}

#[test]
fn total_loss_gradients_are_finite() {
    let model = small();
    model.set_training(true);
    let scenes = generate_scenes(&SceneConfig::small(), 4).unwrap();
    let images: Vec<&GrayImage> = scenes.iter().map(|s| &s.image).collect();
    let x = model.images_to_tensor(&images).unwrap();
    let cfg = HeatmapConfig {
        sigma: SMALL_SIGMA,
        ..HeatmapConfig::default()
    };
    let truth: Vec<f32> = scenes
        .iter()
        .flat_map(|s| gaussian_heatmap(&s.tips, 64, 64, &cfg).unwrap().data().iter().map(|&v| v as f32).collect::<Vec<_>>())
        .collect();
    let truth = Tensor::from_vec(truth, (4, 1, 64, 64), &Device::Cpu).unwrap();
    let h = model.encode_batch(&x).unwrap();
    let tips = model.decode_batch(&h).unwrap();
    let dice = dice_loss_tensor(&h, &truth, 1e-6).unwrap();
    let labels: Vec<_> = scenes.iter().map(|s| s.tips.clone()).collect();
    let (hung, _) = hungarian_loss_tensor(&tips, &labels).unwrap();
    let loss = (dice + (hung * 0.15).unwrap()).unwrap();
    assert!(loss.to_scalar::<f32>().unwrap().is_finite());
    let grads = loss.backward().unwrap();
    let trainable = model.params().trainable("");
    assert!(!trainable.is_empty());
    for (name, var) in trainable {
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}"));
        let s = g.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(s.is_finite(), "{name}: {s}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.safetensors");
    let model = small();
    model.save(&path).unwrap();
    let loaded = LocalizerModel::load(&path, &Device::Cpu).unwrap();
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.params().checksum("").unwrap(), model.params().checksum("").unwrap());
    let image = ramp(64);
    assert_eq!(loaded.predict(&image).unwrap(), model.predict(&image).unwrap());
}

#[test]
fn parameter_census() {
    let model = small();
    let p = model.params();
    let names = p.names("");
    assert!(names.iter().all(|n| n.starts_with("encoder.") || n.starts_with("decoder.")));
    // The coordinate head is the only fully connected layer in the decoder.
    let fc: Vec<_> = names.iter().filter(|n| n.starts_with("decoder.fc")).collect();
    assert_eq!(fc.len(), 2);
    let w = p.vars("decoder.fc.weight");
    assert_eq!(w[0].1.as_tensor().dims()[0], 8);
    assert!(names.iter().any(|n| n.starts_with("encoder.heatmap_head.")));
    assert!(!names.iter().any(|n| n.contains("cls") || n.contains("classifier")));
    assert_eq!(p.parameter_count(""), p.parameter_count("encoder.") + p.parameter_count("decoder."));
    assert!(p.trainable("").iter().all(|(n, _)| !n.ends_with("running_mean") && !n.ends_with("running_var")));
}
