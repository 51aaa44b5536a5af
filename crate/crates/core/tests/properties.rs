use lupulus::functional::{reference_conv, simulate_functional};
use lupulus::tensor::quantize;
use lupulus::timing::MemoryInterfaceModel;
use lupulus::{build_schedule, map_layer, HwConfig, LayerSpec, Schedule, Tensor};
use proptest::prelude::*;

fn conv_layer() -> impl Strategy<Value = LayerSpec> {
    (
        1u32..=8,
        1u32..=12,
        1u32..=12,
        1u32..=8,
        prop::sample::select(vec![1u32, 3, 5, 7, 11]),
        1u32..=3,
        0u32..=2,
    )
        .prop_map(|(ci, h, w, co, k, s, p)| LayerSpec::conv("p", ci, h, w, co, (k, k), s, p))
        .prop_filter("valid layer", |l| l.validate().is_ok())
}

fn schedule(layer: &LayerSpec, cfg: &HwConfig) -> Schedule {
    build_schedule(&map_layer(layer, cfg).unwrap(), cfg).unwrap()
}

fn tensor(shape: &[usize], bits: u32, data: Vec<i32>) -> Tensor {
    Tensor::from_vec(shape, bits, data).unwrap()
}

fn operands(layer: &LayerSpec, lo: i32, hi: i32) -> impl Strategy<Value = (Vec<i32>, Vec<i32>)> {
    let n_in = layer.input_elems() as usize;
    let n_w = layer.weight_elems() as usize;
    (
        prop::collection::vec(lo..=hi, n_in),
        prop::collection::vec(lo..=hi, n_w),
    )
}

fn layer_with_operands(lo: i32, hi: i32) -> impl Strategy<Value = (LayerSpec, Vec<i32>, Vec<i32>)> {
    conv_layer().prop_flat_map(move |l| operands(&l, lo, hi).prop_map(move |(i, w)| (l.clone(), i, w)))
}

fn run(layer: &LayerSpec, input: &[i32], weights: &[i32]) -> Vec<i32> {
    let cfg = HwConfig::default();
    let l = layer;
    let x = tensor(
        &[l.in_channels as usize, l.in_height as usize, l.in_width as usize],
        8,
        input.to_vec(),
    );
    let shape = [
        l.out_channels as usize,
        l.in_channels as usize,
        l.kernel_height as usize,
        l.kernel_width as usize,
    ];
    let w = tensor(&shape, 8, weights.to_vec());
    simulate_functional(&schedule(l, &cfg), &x, &w, None)
        .unwrap()
        .output
        .data
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn more_groups_never_need_more_rounds(layer in conv_layer(), gr in 1u32..=3, gc in 1u32..=3, n in 1u32..=4) {
        let small = HwConfig::with_grid(gr * n, gc * 4, gr, gc);
        let big = HwConfig::with_grid(gr * (n + 1), gc * 4, gr, gc);
        if let (Ok(a), Ok(b)) = (map_layer(&layer, &small), map_layer(&layer, &big)) {
            prop_assert!(b.num_rounds() <= a.num_rounds());
        }
    }

    #[test]
    fn tiles_partition_the_output(layer in conv_layer(), acc in 2u32..=256, buf in 11u32..=64) {
        let mut cfg = HwConfig::default();
        cfg.memory.accumulator_bytes = acc;
        cfg.memory.input_buffer_bytes = buf;
        let s = schedule(&layer, &cfg);
        let (ho, wo) = (layer.out_height(), layer.out_width());
        let mut hits = vec![0u32; (ho * wo) as usize];
        for t in &s.tiles {
            prop_assert!(t.rows.len() as u32 <= s.plan.output_tile.0 && t.cols.len() as u32 <= s.plan.output_tile.1);
            for r in t.rows.clone() {
                for c in t.cols.clone() {
                    hits[(r * wo + c) as usize] += 1;
                }
            }
        }
        prop_assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn filter_order_permutes_output_channels((layer, input, weights) in layer_with_operands(-128, 127), rot in 0usize..8) {
        let co = layer.out_channels as usize;
        let per = weights.len() / co;
        let rot = rot % co;
        let mut rotated = weights.clone();
        rotated.rotate_left(rot * per);
        let a = run(&layer, &input, &weights);
        let b = run(&layer, &input, &rotated);
        let plane = a.len() / co;
        let mut a_rot = a.clone();
        a_rot.rotate_left(rot * plane);
        prop_assert_eq!(a_rot, b);
    }

    #[test]
    fn channel_order_does_not_matter((layer, input, weights) in layer_with_operands(-128, 127), rot in 0usize..8) {
        let ci = layer.in_channels as usize;
        let rot = rot % ci;
        let mut x = input.clone();
        x.rotate_left(rot * input.len() / ci);
        let per_channel = weights.len() / (layer.out_channels as usize * ci);
        let w: Vec<i32> = weights
            .chunks(ci * per_channel)
            .flat_map(|f| {
                let mut f = f.to_vec();
                f.rotate_left(rot * per_channel);
                f
            })
            .collect();
        prop_assert_eq!(run(&layer, &input, &weights), run(&layer, &x, &w));
    }

    #[test]
    fn linear_in_the_weights_below_saturation(
        (layer, input, w1) in layer_with_operands(-3, 3),
        seed in any::<u64>(),
    ) {
        let w2: Vec<i32> = w1.iter().enumerate().map(|(i, _)| ((seed >> (i % 60)) & 7) as i32 - 3).collect();
        let sum: Vec<i32> = w1.iter().zip(&w2).map(|(a, b)| a + b).collect();
        let a = run(&layer, &input, &w1);
        let b = run(&layer, &input, &w2);
        let ab = run(&layer, &input, &sum);
        prop_assert_eq!(ab, a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<_>>());
    }

    #[test]
    fn functional_matches_reference_on_full_range((layer, input, weights) in layer_with_operands(-128, 127)) {
        let l = &layer;
        let x = tensor(&[l.in_channels as usize, l.in_height as usize, l.in_width as usize], 8, input.clone());
        let shape = [l.out_channels as usize, l.in_channels as usize, l.kernel_height as usize, l.kernel_width as usize];
        let w = tensor(&shape, 8, weights.clone());
        let want = reference_conv(l, &x, &w, None, 16).unwrap();
        prop_assert_eq!(run(l, &input, &weights), want.data);
    }
}

proptest! {
    #[test]
    fn quantize_rounds_to_nearest_in_range(values in prop::collection::vec(-200.0f64..200.0, 1..32)) {
        let t = quantize(&values, &[values.len()], 8).unwrap();
        for (v, q) in values.iter().zip(&t.data) {
            prop_assert!((-128..=127).contains(q));
            if (-128.0..=127.0).contains(v) {
                prop_assert!((v - *q as f64).abs() <= 0.5);
            }
        }
    }

    #[test]
    fn tensors_round_trip(data in prop::collection::vec(-32768i32..=32767, 1..64), bits in prop::sample::select(vec![16u32, 32])) {
        let t = tensor(&[data.len()], bits, data);
        let mut buf = Vec::new();
        t.write_binary(&mut buf).unwrap();
        prop_assert_eq!(&Tensor::read_binary(buf.as_slice()).unwrap(), &t);
        prop_assert_eq!(&Tensor::from_json(&t.to_json()).unwrap(), &t);
    }

    #[test]
    fn transfer_time_grows_with_size(a in 0u64..100_000, b in 0u64..100_000, overhead in 0u32..8) {
        let mut cfg = HwConfig::default();
        cfg.interface.overhead_cycles = overhead;
        let m = MemoryInterfaceModel::from_config(&cfg);
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(m.transfer_cycles(lo) <= m.transfer_cycles(hi));
        prop_assert!(m.transfer_cycles(hi) as f64 >= hi as f64 / m.bytes_per_core_cycle());
    }
}
