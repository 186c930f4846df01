//! Property tests over the public API with a small randomly initialized
//! denoiser, so they run without the shipped weights.

use lbe::attention_control::BinaryMask;
use lbe::autoencoder::{decode_raw, encode, CodecParams, ImageFrame};
use lbe::denoiser::{Architecture, DenoiserParams, Vocab};
use lbe::io::config::RunConfig;
use lbe::io::container::TensorContainer;
use lbe::io::ppm::{decode_ppm, encode_ppm};
use lbe::pipeline::{self, BackgroundMode, EditConfig, MaskMode, UserMask};
use lbe::scheduler::{Latent, NoiseSchedule};
use lbe::temporal::{temporal_spatial_attention, AttentionProjections, FrameFeatureBatch};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn small_denoiser(seed: u64) -> DenoiserParams {
    let arch = Architecture { width: 8, embed_dim: 8, time_dim: 8, res_before: 1, res_after: 1, ..Default::default() };
    DenoiserParams::init(arch, Vocab::default(), seed).unwrap()
}

fn frame_from(vals: &[f64], h: usize, w: usize) -> ImageFrame {
    ImageFrame::new(Array3::from_shape_fn((3, h, w), |(c, i, j)| vals[(c * h * w + i * w + j) % vals.len()])).unwrap()
}

fn clip(vals: &[f64], n: usize) -> Vec<ImageFrame> {
    (0..n)
        .map(|f| {
            let shifted: Vec<f64> = vals.iter().map(|v| (v + 0.07 * f as f64).fract()).collect();
            frame_from(&shifted, 16, 16)
        })
        .collect()
}

fn latent_from(vals: &[f64], shape: (usize, usize, usize)) -> Latent {
    Latent::new(Array3::from_shape_fn(shape, |(c, i, j)| vals[(c * 31 + i * 7 + j) % vals.len()]), 0).unwrap()
}

fn bits(l: &Latent) -> Vec<u64> {
    l.data.iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, ..ProptestConfig::default() })]

    #[test]
    fn background_outside_the_last_mask_is_the_clean_latent(
        vals in proptest::collection::vec(0.0f64..1.0, 64),
        seed in 0u64..1000,
        tau in 0.0f64..0.95,
        temporal in any::<bool>(),
    ) {
        let d = small_denoiser(seed);
        let codec = CodecParams::orthonormal(0);
        let schedule = NoiseSchedule::linear(6, 0.00085, 0.012).unwrap();
        let frames = clip(&vals, 3);
        let mut cfg = EditConfig::new("a red square on gray floor", "a blue circle on gray floor");
        cfg.steps = 6;
        cfg.tau = tau;
        cfg.temporal_attention = temporal;
        cfg.edited_words = vec![(1, 1), (2, 2)];
        let r = pipeline::edit_video(&frames, &cfg, &schedule, &d, &codec).unwrap();
        let z0 = pipeline::encode_frames(&frames, &codec).unwrap();
        for ((z, z0), m) in r.final_latents.iter().zip(&z0).zip(r.last_masks()) {
            for ((k, i, j), v) in z.data.indexed_iter() {
                if !m.mask[[i, j]] {
                    prop_assert_eq!(v.to_bits(), z0.data[[k, i, j]].to_bits());
                }
            }
        }
    }

    #[test]
    fn replaying_auto_masks_reproduces_the_edit(vals in proptest::collection::vec(0.0f64..1.0, 64), seed in 0u64..1000) {
        let d = small_denoiser(seed);
        let codec = CodecParams::orthonormal(0);
        let schedule = NoiseSchedule::linear(5, 0.00085, 0.012).unwrap();
        let frames = clip(&vals, 2);
        let inv = pipeline::invert_video(&frames, "a red square on gray floor", &schedule, &d, &codec, false).unwrap();
        let mut cfg = EditConfig::new("a red square on gray floor", "a green square on gray floor");
        cfg.steps = 5;
        let auto = pipeline::edit_from_inversion(&inv, &cfg, &schedule, &d, &codec).unwrap();
        cfg.mask_mode = MaskMode::User;
        cfg.user_mask = Some(UserMask::Replay(auto.masks.clone()));
        let replay = pipeline::edit_from_inversion(&inv, &cfg, &schedule, &d, &codec).unwrap();
        for (a, b) in auto.final_latents.iter().zip(&replay.final_latents) {
            prop_assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn randomly_noised_background_is_seed_deterministic(vals in proptest::collection::vec(0.0f64..1.0, 64), seed in 0u64..50) {
        let d = small_denoiser(3);
        let codec = CodecParams::orthonormal(0);
        let schedule = NoiseSchedule::linear(4, 0.00085, 0.012).unwrap();
        let frames = clip(&vals, 2);
        let mut cfg = EditConfig::new("a red square on gray floor", "a blue square on gray floor");
        cfg.steps = 4;
        cfg.seed = seed;
        cfg.background_mode = BackgroundMode::RandomlyNoised;
        let a = pipeline::edit_video(&frames, &cfg, &schedule, &d, &codec).unwrap();
        let b = pipeline::edit_video(&frames, &cfg, &schedule, &d, &codec).unwrap();
        prop_assert_eq!(a.frames, b.frames);
    }
}

proptest! {
    #[test]
    fn codec_round_trip_is_lossless(vals in proptest::collection::vec(0.0f64..1.0, 1..200), seed in 0u64..20) {
        let codec = CodecParams::orthonormal(seed);
        let frame = frame_from(&vals, 16, 24);
        let z = encode(&frame, &codec).unwrap();
        prop_assert_eq!(z.shape(), [192, 2, 3]);
        let back = decode_raw(&z, &codec).unwrap();
        for (a, b) in back.iter().zip(frame.pixels.iter()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn blend_picks_cells_by_mask(
        fg in proptest::collection::vec(-3.0f64..3.0, 24),
        bg in proptest::collection::vec(-3.0f64..3.0, 24),
        cells in proptest::collection::vec(any::<bool>(), 6),
    ) {
        let (a, b) = (latent_from(&fg, (4, 2, 3)), latent_from(&bg, (4, 2, 3)));
        let m = BinaryMask { mask: Array2::from_shape_vec((2, 3), cells).unwrap() };
        let out = pipeline::blend(&a, &b, &m).unwrap();
        for ((k, i, j), v) in out.data.indexed_iter() {
            let src = if m.mask[[i, j]] { &a } else { &b };
            prop_assert_eq!(v.to_bits(), src.data[[k, i, j]].to_bits());
        }
    }

    #[test]
    fn temporal_maps_are_row_stochastic(vals in proptest::collection::vec(-2.0f64..2.0, 60), n in 1usize..5) {
        let frames: Vec<Array2<f64>> =
            (0..n).map(|f| Array2::from_shape_fn((5, 4), |(i, j)| vals[(f * 20 + i * 4 + j) % 60] * (1.0 + f as f64))).collect();
        let proj = AttentionProjections {
            wq: Array2::from_shape_fn((4, 3), |(i, j)| vals[i * 3 + j]),
            wk: Array2::from_shape_fn((4, 3), |(i, j)| vals[12 + i * 3 + j]),
            wv: Array2::from_shape_fn((4, 2), |(i, j)| vals[24 + i * 2 + j]),
        };
        let out = temporal_spatial_attention(&FrameFeatureBatch::new(frames).unwrap(), &proj).unwrap();
        for map in &out.maps {
            prop_assert_eq!(map.dim(), (5, 10));
            for row in map.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-5);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn ppm_round_trip_of_byte_valued_frames(bytes in proptest::collection::vec(any::<u8>(), 192)) {
        let frame = ImageFrame::new(Array3::from_shape_fn((3, 8, 8), |(c, i, j)| bytes[(i * 8 + j) * 3 + c] as f64 / 255.0)).unwrap();
        let back = decode_ppm(&encode_ppm(&frame)).unwrap();
        prop_assert_eq!(back, frame);
    }

    #[test]
    fn container_round_trip_is_bitwise(vals in proptest::collection::vec(proptest::num::f32::NORMAL, 0..40), flags in proptest::collection::vec(any::<bool>(), 0..9)) {
        let mut c = TensorContainer::new();
        let vals: Vec<f64> = vals.into_iter().map(f64::from).collect();
        c.insert_f64("x", &ndarray::Array1::from(vals.clone())).unwrap();
        c.insert_bool("m", &ndarray::Array1::from(flags.clone())).unwrap();
        let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
        let x: Vec<f64> = back.get_f64("x").unwrap().iter().copied().collect();
        prop_assert_eq!(x, vals);
        prop_assert_eq!(back.get_bool("m").unwrap().iter().copied().collect::<Vec<_>>(), flags);
        prop_assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn run_config_text_round_trips(seed in any::<u64>(), tau in 0.0f64..0.99, steps in 1usize..500, temporal in any::<bool>()) {
        let mut c = RunConfig::new("edit");
        c.seed = seed;
        c.tau = tau;
        c.steps = steps;
        c.temporal = temporal;
        c.source_prompt = Some("a red square on gray floor".into());
        prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }
}
