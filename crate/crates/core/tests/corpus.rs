use dse_core::metrics::{psnr, ssim, SsimParams};
use dse_core::synth::{gen_corpus, gen_scene, read_manifest, SceneSpec};
use dse_core::tile::{read_tile, Tile, TileKind};
use proptest::prelude::*;

#[test]
fn corpus_files_depend_only_on_the_seed() {
    let spec = SceneSpec {
        n_timesteps: 2,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = gen_corpus(4, &spec, 77, a.path()).unwrap();
    let mb = gen_corpus(4, &spec, 77, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(read_manifest(a.path()).unwrap(), ma);
    for e in &ma {
        let mut files = vec![&e.eo_path, &e.sar_clean_path, &e.mask_path];
        files.extend(&e.sar_noisy_paths);
        for f in files {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }
    let scene = gen_scene(&SceneSpec { seed: 78, ..spec }).unwrap();
    assert_eq!(read_tile(a.path().join(&ma[1].eo_path)).unwrap(), scene.eo);
    assert_eq!(read_tile(a.path().join(&ma[1].sar_noisy_paths[1])).unwrap(), scene.sar_noisy[1]);
}

fn tile(values: Vec<f32>) -> Tile {
    Tile::new(16, 16, 1, TileKind::EoRgb, values).unwrap()
}

proptest! {
    #[test]
    fn image_metrics_are_symmetric_and_bounded(
        a in prop::collection::vec(0.0f32..1.0, 256),
        b in prop::collection::vec(0.0f32..1.0, 256),
    ) {
        let (a, b) = (tile(a), tile(b));
        let p = SsimParams::default();
        let s = ssim(&a, &b, &p).unwrap();
        prop_assert!((s - ssim(&b, &a, &p).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0 - 1e-12);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!(psnr(&a, &b, 1.0).unwrap() > 0.0);
    }
}
