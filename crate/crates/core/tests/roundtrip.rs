use lesionsynth::cluster::LoadedPool;
use lesionsynth::diffusion::{checkpoint, train::train, TrainConfig};
use lesionsynth::repaint::{inpaint_all, GenerationConfig, RepaintMask};
use lesionsynth::toy::{generate, ToyConfig};
use lesionsynth::LabeledImage;
use rand::SeedableRng;

fn tiny() -> TrainConfig {
    TrainConfig {
        iterations: 4,
        batch_size: 4,
        timesteps: 20,
        respaced_len: 8,
        skip: 2,
        base_channels: 4,
        ..TrainConfig::default()
    }
}

// A reloaded checkpoint must inpaint exactly like the in-memory net, and both
// must leave the known region untouched.
#[test]
fn checkpoint_reload_inpaints_identically() {
    let data: Vec<LabeledImage> = generate(&ToyConfig { count: 6, size: 16, ..Default::default() })
        .unwrap()
        .into_iter()
        .map(|s| s.image)
        .collect();
    let cfg = tiny();
    let mut net = cfg.build_net().unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    train(&mut net, &data, &cfg, &mut rng, |_, _| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &net, &cfg).unwrap();
    let (loaded, lcfg) = checkpoint::load(&path).unwrap();
    assert_eq!(lcfg, cfg);

    let chain = cfg.respaced().unwrap();
    let gcfg = GenerationConfig { samples: 2, jump: 2, resample: 2, ..Default::default() };
    let a = inpaint_all(&LoadedPool { nets: vec![net], configs: vec![cfg.clone()] }, &data, &gcfg, &chain).unwrap();
    let b = inpaint_all(&LoadedPool { nets: vec![loaded], configs: vec![lcfg] }, &data, &gcfg, &chain).unwrap();
    assert_eq!(a.len(), data.len());
    for ((x, y), src) in a.iter().zip(&b).zip(&data) {
        assert_eq!(x.outputs.len(), 2);
        let keep = RepaintMask::from_label(src, gcfg.radius_for(src.height()));
        for (ox, oy) in x.outputs.iter().zip(&y.outputs) {
            let (dx, dy) = (ox.tensor().data(), oy.tensor().data());
            assert!(dx.iter().zip(dy).all(|(p, q)| p.to_bits() == q.to_bits()));
            let plane = src.plane();
            for (c, chunk) in dx.chunks(plane).enumerate() {
                let s = src.channel(c);
                for (i, &k) in keep.known().iter().enumerate() {
                    if k {
                        assert_eq!(chunk[i].to_bits(), s[i].to_bits(), "channel {c} pixel {i}");
                    }
                }
            }
        }
    }
}
