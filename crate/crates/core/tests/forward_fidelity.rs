//! The f32 forward pass against activations computed by an independent
//! PyTorch implementation (`tools/reference_forward.py`) on the same bundle.

use std::fs;
use std::path::PathBuf;

use swtex_core::vgg::{synthetic_vgg19, Network, SYNTHETIC_SEED};
use swtex_core::ImageTensor;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn read_f32(path: PathBuf) -> Vec<f32> {
    fs::read(path).unwrap().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

#[test]
fn all_layers_match_reference_dumps() {
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fixtures().join("manifest.json")).unwrap()).unwrap();
    let bundle = synthetic_vgg19(SYNTHETIC_SEED);
    assert_eq!(
        format!("{:08x}", bundle.payload_crc32()),
        manifest["bundle_crc32"].as_str().unwrap(),
        "fixtures were produced from a different bundle"
    );
    let net = Network::<f32>::new(&bundle).unwrap();
    for entry in manifest["images"].as_array().unwrap() {
        let img = ImageTensor::load_png(fixtures().join(entry["png"].as_str().unwrap())).unwrap();
        let (stack, _) = net.forward(&img, 12).unwrap();
        let layers = entry["layers"].as_array().unwrap();
        assert_eq!(layers.len(), 12);
        for (layer, want) in stack.layers.iter().zip(layers) {
            let shape: Vec<usize> = want["shape"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
            assert_eq!(shape, vec![layer.height, layer.width, layer.channels]);
            let golden = read_f32(fixtures().join(want["file"].as_str().unwrap()));
            let err = layer.data.iter().zip(&golden).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(err < 1e-3, "{} {}: max abs error {err}", entry["png"], want["name"]);
        }
    }
}
