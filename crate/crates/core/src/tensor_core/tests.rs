use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn random_spec(rng: &mut ChaCha8Rng, c: usize, oc: usize, opts: ConvOpts) -> ConvSpec<f64> {
    let w = Tensor::randn(&[oc, c / opts.groups, opts.kernel, opts.kernel], 0.5, rng);
    let b = Tensor::randn(&[oc], 0.5, rng);
    ConvSpec::new(opts, w, Some(b)).unwrap()
}

fn random_field(rng: &mut ChaCha8Rng, d: usize, k: usize, h: usize, w: usize, scale: f64) -> OffsetField<f64> {
    let offsets = Tensor::randn(&[d * 2 * k * k, h, w], scale, rng);
    let masks = Tensor::uniform(&[d * k * k, h, w], 0.0, 1.0, rng);
    OffsetField::new(offsets, masks).unwrap()
}

#[test]
fn zero_offsets_unit_masks_reduce_to_plain_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for d in [1, 2, 4] {
        let x = Tensor::randn(&[4, 6, 6], 1.0, &mut rng);
        let spec = random_spec(&mut rng, 4, 3, ConvOpts::same(3).with_deform_groups(d));
        let field = OffsetField::identity(d, 3, 6, 6);
        let got = deform_conv2d(&x, &spec, &field).unwrap();
        let want = conv2d(&x, &spec.weight, spec.bias.as_ref(), &spec.opts).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
        let r = deform_conv2d_reference(&x, &spec, &field).unwrap();
        assert!(r.max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn constant_input_gives_weight_sum_plus_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = 1.7;
    let x = Tensor::full(&[4, 8, 8], v);
    let spec = random_spec(&mut rng, 4, 2, ConvOpts::same(3).with_deform_groups(2));
    // keep every sample strictly inside so all four neighbours are real pixels
    let mut field = random_field(&mut rng, 2, 3, 8, 8, 0.3);
    field.masks = Tensor::full(field.masks.shape(), 1.0);
    for o in field.offsets.data_mut() {
        *o = o.clamp(-0.4, 0.4);
    }
    let out = deform_conv2d(&x, &spec, &field).unwrap();
    for f in 0..2 {
        let wsum: f64 = spec.weight.data()[f * 36..(f + 1) * 36].iter().sum();
        let want = v * wsum + spec.bias.as_ref().unwrap().data()[f];
        // interior pixels: every tap stays at least 0.6 px inside the field
        for y in 2..6 {
            for xx in 2..6 {
                assert!((out.at3(f, y, xx) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn matches_reference_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn(&[4, 6, 6], 1.0, &mut rng);
    let spec = random_spec(&mut rng, 4, 4, ConvOpts::same(3).with_deform_groups(2));
    let field = random_field(&mut rng, 2, 3, 6, 6, 1.5);
    let a = deform_conv2d(&x, &spec, &field).unwrap();
    let b = deform_conv2d_reference(&x, &spec, &field).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);

    // strided, dilated, grouped
    let opts = ConvOpts::same(3).with_dilation(2).with_stride(2).with_groups(2).with_deform_groups(4);
    let spec = random_spec(&mut rng, 8, 6, opts);
    let x = Tensor::randn(&[8, 9, 7], 1.0, &mut rng);
    let (ho, wo) = opts.output_size(9, 7).unwrap();
    let field = random_field(&mut rng, 4, 3, ho, wo, 2.0);
    let a = deform_conv2d(&x, &spec, &field).unwrap();
    let b = deform_conv2d_reference(&x, &spec, &field).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn pointwise_reference_is_identity() {
    let x = Tensor::from_vec(&[1, 3, 3], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let spec = ConvSpec::new(ConvOpts::same(1), Tensor::full(&[1, 1, 1, 1], 1.0), None).unwrap();
    let field = OffsetField::identity(1, 1, 3, 3);
    assert_eq!(deform_conv2d_reference(&x, &spec, &field).unwrap(), x);
}

#[test]
fn far_offsets_leave_only_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(&[4, 6, 6], 1.0, &mut rng);
    let spec = random_spec(&mut rng, 4, 3, ConvOpts::same(3).with_deform_groups(2));
    let mut field = random_field(&mut rng, 2, 3, 6, 6, 1.0);
    field.offsets = Tensor::full(field.offsets.shape(), 1e4);
    let out = deform_conv2d(&x, &spec, &field).unwrap();
    for f in 0..3 {
        let b = spec.bias.as_ref().unwrap().data()[f];
        assert!(out.channel(f).iter().all(|&v| v == b));
    }
}

#[test]
fn offset_shape_mismatch_is_reported() {
    let x = Tensor::<f32>::zeros(&[4, 6, 6]);
    let spec = ConvSpec::new(
        ConvOpts::same(3).with_deform_groups(2),
        Tensor::zeros(&[4, 4, 3, 3]),
        None,
    )
    .unwrap();
    let field = OffsetField::identity(1, 3, 6, 6);
    let err = deform_conv2d(&x, &spec, &field).unwrap_err();
    assert!(err.to_string().contains("offset channels"), "{err}");
    let field = OffsetField::identity(2, 3, 5, 6);
    let err = deform_conv2d(&x, &spec, &field).unwrap_err();
    assert!(err.to_string().contains("offset height/width"), "{err}");
}

#[test]
fn offset_field_rejects_out_of_range_masks() {
    let off = Tensor::<f32>::zeros(&[18, 2, 2]);
    let masks = Tensor::full(&[9, 2, 2], 1.5);
    assert!(OffsetField::new(off, masks).is_err());
}

fn ca_params(w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: Vec<f64>, c: usize, r: usize) -> ChannelAttentionParams<f64> {
    let hid = c / r;
    ChannelAttentionParams {
        reduce: ConvSpec::new(
            ConvOpts::same(1),
            Tensor::from_vec(&[hid, c, 1, 1], w1).unwrap(),
            Some(Tensor::from_vec(&[hid], b1).unwrap()),
        )
        .unwrap(),
        expand: ConvSpec::new(
            ConvOpts::same(1),
            Tensor::from_vec(&[c, hid, 1, 1], w2).unwrap(),
            Some(Tensor::from_vec(&[c], b2).unwrap()),
        )
        .unwrap(),
    }
}

#[test]
fn channel_attention_hand_computation() {
    let x = Tensor::from_vec(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.5]).unwrap();
    let p = ca_params(vec![0.5, -0.25], vec![0.1], vec![1.0, -2.0], vec![0.0, 0.3], 2, 2);
    // GAP = [2.5, 0.5]; hidden = relu(0.5*2.5 - 0.25*0.5 + 0.1) = 1.225
    let hidden: f64 = 1.225;
    let g0 = 1.0 / (1.0 + (-(1.0 * hidden)).exp());
    let g1 = 1.0 / (1.0 + (-(-2.0 * hidden + 0.3)).exp());
    let out = channel_attention(&x, &p).unwrap();
    let want: Vec<f64> = x.data()[..4]
        .iter()
        .map(|v| v * g0)
        .chain(x.data()[4..].iter().map(|v| v * g1))
        .collect();
    for (a, b) in out.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn channel_attention_zero_channel_stays_zero_and_gate_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut x = Tensor::randn(&[8, 5, 5], 2.0, &mut rng);
    for v in &mut x.data_mut()[3 * 25..4 * 25] {
        *v = 0.0;
    }
    let p = ca_params(
        (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        vec![0.1, -0.1],
        (0..16).map(|_| rng.random_range(-1.0..1.0)).collect(),
        vec![0.0; 8],
        8,
        4,
    );
    let out = channel_attention(&x, &p).unwrap();
    assert!(out.channel(3).iter().all(|&v| v == 0.0));
    let gate = channel_gate(&x, &p).unwrap();
    assert!(gate.iter().all(|&g| g > 0.0 && g < 1.0));
    for (o, i) in out.data().iter().zip(x.data()) {
        assert!(o.abs() <= i.abs());
    }
}

#[test]
fn channel_attention_rejects_bad_reduction() {
    let p = ca_params(vec![0.0; 3], vec![0.0], vec![0.0; 3], vec![0.0; 3], 3, 3);
    let x = Tensor::<f64>::zeros(&[4, 2, 2]);
    assert!(channel_attention(&x, &p).is_err());
}

#[test]
fn spatial_attention_hand_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::randn(&[3, 4, 4], 1.0, &mut rng);
    let wt = Tensor::randn(&[1, 2, 7, 7], 0.2, &mut rng);
    let spec = ConvSpec::new(ConvOpts::same(7), wt.clone(), None).unwrap();
    let out = spatial_attention(&x, &spec).unwrap();
    for y in 0..4 {
        for xx in 0..4 {
            let mut logit = 0.0;
            for ky in 0..7 {
                for kx in 0..7 {
                    let (iy, ix) = (y as i32 + ky as i32 - 3, xx as i32 + kx as i32 - 3);
                    if !(0..4).contains(&iy) || !(0..4).contains(&ix) {
                        continue;
                    }
                    let vals: Vec<f64> = (0..3).map(|c| x.at3(c, iy as usize, ix as usize)).collect();
                    let mean = vals.iter().sum::<f64>() / 3.0;
                    let max = vals.iter().cloned().fold(f64::MIN, f64::max);
                    logit += wt.data()[ky * 7 + kx] * mean + wt.data()[49 + ky * 7 + kx] * max;
                }
            }
            let g = 1.0 / (1.0 + (-logit).exp());
            for c in 0..3 {
                assert!((out.at3(c, y, xx) - x.at3(c, y, xx) * g).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn spatial_attention_zero_in_zero_out_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let spec = ConvSpec::new(ConvOpts::same(7), Tensor::<f64>::randn(&[1, 2, 7, 7], 0.3, &mut rng), None).unwrap();
    let z = Tensor::zeros(&[3, 5, 5]);
    assert_eq!(spatial_attention(&z, &spec).unwrap(), z);
    let x = Tensor::randn(&[3, 5, 5], 3.0, &mut rng);
    let gate = spatial_gate(&x, &spec).unwrap();
    assert!(gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
    let out = spatial_attention(&x, &spec).unwrap();
    for (o, i) in out.data().iter().zip(x.data()) {
        assert!(o.abs() <= i.abs());
    }
}

#[test]
fn global_avg_pool_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::<f64>::randn(&[3, 5, 7], 1.0, &mut rng);
    let got = global_avg_pool(&x).unwrap();
    for c in 0..3 {
        let mut s = 0.0;
        for y in 0..5 {
            for xx in 0..7 {
                s += x.at3(c, y, xx);
            }
        }
        assert!((got[c] - s / 35.0).abs() < 1e-12);
    }
}
