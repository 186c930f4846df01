//! Properties of the shipped denoiser weights on clips it was not trained on.

use std::path::Path;

use lbe::autoencoder::{encode, CodecParams};
use lbe::denoiser::train::{evaluate_loss, TrainExample};
use lbe::denoiser::DenoiserParams;
use lbe::io::corpus::{generate, CorpusSpec};
use lbe::pipeline::{encode_frames, mean_relative_error, reconstruct_video};
use lbe::scheduler::NoiseSchedule;

#[test]
fn true_captions_beat_shuffled_captions() {
    let d = DenoiserParams::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("weights/denoiser.lbtf")).unwrap();
    let codec = CodecParams::orthonormal(d.arch.codec_seed);
    let clips = generate(&CorpusSpec { clips: 16, seed: 31337, ..Default::default() }).unwrap();
    let mut data = Vec::new();
    for c in &clips {
        let tokens = d.tokenize(&c.manifest.caption).unwrap().tokens;
        for f in &c.frames {
            data.push(TrainExample { z0: encode(f, &codec).unwrap(), tokens: tokens.clone() });
        }
    }
    let schedule = NoiseSchedule::default_ladder();
    let matched = evaluate_loss(&d, &data, &schedule, 256, 5, None).unwrap();
    let mut shuffled: Vec<Vec<usize>> = data.iter().map(|e| e.tokens.clone()).collect();
    // shift by whole clips so every frame gets another clip's caption
    shuffled.rotate_left(8 * 5);
    let mismatched = evaluate_loss(&d, &data, &schedule, 256, 5, Some(&shuffled)).unwrap();
    println!("loss with true captions {matched:.5}, with shuffled captions {mismatched:.5}");
    assert!(matched < mismatched);
}

#[test]
fn finer_ladder_reconstructs_no_worse() {
    let d = DenoiserParams::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("weights/denoiser.lbtf")).unwrap();
    let codec = CodecParams::orthonormal(d.arch.codec_seed);
    let clip = generate(&CorpusSpec { clips: 1, seed: 606, ..Default::default() }).unwrap().remove(0);
    let fine = NoiseSchedule::default_ladder();
    // every fifth level of the same ladder, so both end at the same noise level
    let coarse = fine.strided(5).unwrap();
    let err = |s: &NoiseSchedule| {
        let r = reconstruct_video(&clip.frames, &clip.manifest.caption, s, &d, &codec, false).unwrap();
        mean_relative_error(&r.final_latents, &encode_frames(&clip.frames, &codec).unwrap())
    };
    let (e50, e10) = (err(&fine), err(&coarse));
    println!("reconstruction error with 50 steps {e50:.5}, with 10 steps {e10:.5}");
    assert!(e50 <= e10 + 1e-3);
}
