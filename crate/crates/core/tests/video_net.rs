mod common;

use common::{
    framewise_2d_probs, max_abs_diff, rng, small_video_instance, video_gradcheck,
    zero_outer_temporal_taps, GRAD_REL_TOL,
};
use rand::Rng;
use vidgate::video_net::{
    build_toy_net, degrade_kernel, gather_frames, stage_weight_name, NetConfig, NetSpec, VideoNet,
};
use vidgate::Tensor;

const DEGRADE_TOL: f64 = 1e-9;

fn default_net(seed: u64) -> VideoNet {
    let spec = NetSpec::from_config(&NetConfig::default(), 4, 8, 1, 16, 16).unwrap();
    build_toy_net(spec, seed).unwrap()
}

fn random_clip(frames: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..frames * 256).map(|_| r.gen_range(0.0..1.0)).collect()
}

fn all_masks(k: usize) -> Vec<Vec<bool>> {
    (0..1usize << k)
        .map(|a| (0..k).map(|i| a >> i & 1 == 1).collect())
        .collect()
}

#[test]
fn video_graph_gradients() {
    for seed in 0..5 {
        let err = video_gradcheck(seed);
        assert!(err < GRAD_REL_TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn center_only_kernels_make_gates_irrelevant() {
    let mut net = default_net(1);
    zero_outer_temporal_taps(&mut net);
    for frames in [1, 4, 8] {
        let clip = random_clip(frames, frames as u64);
        let reference = net.forward(&clip, &[true; 3]).unwrap();
        for v in all_masks(3) {
            let p = net.forward(&clip, &v).unwrap();
            assert!(
                max_abs_diff(&p, &reference) <= DEGRADE_TOL,
                "T'={frames}, v={v:?}"
            );
        }
    }
}

#[test]
fn gates_matter_for_full_kernels() {
    let net = default_net(2);
    let clip = random_clip(8, 3);
    let on = net.forward(&clip, &[true; 3]).unwrap();
    let off = net.forward(&clip, &[false; 3]).unwrap();
    assert!(max_abs_diff(&on, &off) > 1e-6);
}

#[test]
fn all_gates_off_matches_framewise_2d_network() {
    let net = default_net(4);
    for frames in [1, 3, 8] {
        let clip = random_clip(frames, 10 + frames as u64);
        let got = net.forward(&clip, &[false; 3]).unwrap();
        let want = framewise_2d_probs(&net, &clip);
        assert!(max_abs_diff(&got, &want) < 1e-9, "T'={frames}");
    }
}

#[test]
fn disabled_stage_ignores_outer_temporal_taps() {
    let mut net = default_net(5);
    let clip = random_clip(8, 6);
    let v = [true, false, true];
    let before = net.forward(&clip, &v).unwrap();
    // stage 2 is the second temporal stage, switched off by v[1]
    let idx = net
        .params
        .iter()
        .position(|(n, _)| n == stage_weight_name(2))
        .unwrap();
    for (i, x) in net.params.tensor_mut(idx).data_mut().iter_mut().enumerate() {
        if (i / 9) % 3 != 1 {
            *x += 0.37 * (i as f64).sin();
        }
    }
    let after = net.forward(&clip, &v).unwrap();
    assert!(max_abs_diff(&before, &after) < 1e-12);
}

#[test]
fn degraded_kernel_is_the_middle_slice() {
    let net = default_net(7);
    let k = net.params.tensor(2);
    let d = degrade_kernel(k).unwrap();
    assert_eq!(d.shape(), &[8, 8, 3, 3]);
    for o in 0..8 * 8 {
        assert_eq!(
            &d.data()[o * 9..o * 9 + 9],
            &k.data()[(o * 3 + 1) * 9..(o * 3 + 1) * 9 + 9]
        );
    }
}

#[test]
fn probabilities_are_normalised() {
    let (net, clip, v) = small_video_instance(3);
    for frames in [1, 2] {
        let p = net.forward(&clip[..frames * 36], &v).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&q| q > 0.0));
    }
}

#[test]
fn parameter_count_matches_architecture() {
    let net = default_net(0);
    // stem 1→8 (1×3×3), then 8→8, 8→16, 16→16 (3×3×3), head 16→4
    let expected =
        (8 * 9 + 8) + (8 * 8 * 27 + 8) + (16 * 8 * 27 + 16) + (16 * 16 * 27 + 16) + (16 * 4 + 4);
    assert_eq!(net.params.num_scalars(), expected);
    assert_eq!(net.num_temporal(), 3);
}

#[test]
fn gated_forward_sees_only_kept_frames() {
    let net = default_net(8);
    let clip = random_clip(8, 9);
    let u = [false, true, true, false, false, true, false, false];
    let v = [true, false, true];
    let sub = gather_frames(&clip, 256, &u);
    assert_eq!(sub.len(), 3 * 256);
    assert_eq!(&sub[..256], &clip[256..512]);
    let a = net.forward_gated(&clip, &u, &v).unwrap();
    let b = net.forward(&sub, &v).unwrap();
    assert_eq!(a, b);
}

#[test]
fn malformed_inputs_are_rejected() {
    let net = default_net(0);
    let clip = random_clip(8, 0);
    assert!(net.forward(&clip, &[true; 2]).is_err());
    assert!(net.forward(&clip[..100], &[true; 3]).is_err());
    assert!(net.forward(&random_clip(9, 0), &[true; 3]).is_err());
    assert!(net.forward_gated(&clip, &[false; 8], &[true; 3]).is_err());
    assert!(degrade_kernel(&Tensor::zeros(&[2, 2, 3])).is_err());
}

#[test]
fn initialisation_is_seeded() {
    assert_eq!(default_net(3), default_net(3));
    assert_ne!(default_net(3), default_net(4));
}
