//! Randomized workloads shared by the acceptance suite.

use lupulus::config::{GridConfig, HwConfig};
use lupulus::tensor::signed_range;
use lupulus::{LayerSpec, Tensor};
use rand::Rng;

/// Kernel sizes the functional sweep must cover.
pub const KERNELS: [u32; 5] = [1, 3, 5, 7, 11];

/// Layer with every dimension at most 16: a convolution with a kernel from
/// [`KERNELS`], stride 1-4 and padding 0-2, or (one in eight) an FC layer.
pub fn small_layer(rng: &mut impl Rng, name: &str) -> LayerSpec {
    let mut l = if rng.gen_ratio(1, 8) {
        LayerSpec::fc(name, rng.gen_range(1..=16), rng.gen_range(1..=16))
    } else {
        loop {
            let kh = KERNELS[rng.gen_range(0..KERNELS.len())];
            let kw = if rng.gen_ratio(4, 5) {
                kh
            } else {
                KERNELS[rng.gen_range(0..KERNELS.len())]
            };
            let (h, w) = (rng.gen_range(kh.max(1)..=16), rng.gen_range(kw.max(1)..=16));
            let l = LayerSpec::conv(
                name,
                rng.gen_range(1..=16),
                h,
                w,
                rng.gen_range(1..=16),
                (kh, kw),
                rng.gen_range(1..=4),
                rng.gen_range(0..=2),
            );
            if l.validate().is_ok() {
                break l;
            }
        }
    };
    l.has_bias = rng.gen_ratio(1, 3);
    l.apply_relu = rng.gen_ratio(1, 3);
    l
}

/// Hardware config with random grid, group and memory sizes. Memories are
/// always large enough to hold one weight, one partial sum and one row of a
/// kernel up to 16 wide.
pub fn random_config(rng: &mut impl Rng) -> HwConfig {
    let mut cfg = HwConfig::default();
    let (gr, gc) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    cfg.grid = GridConfig {
        rows: gr * rng.gen_range(1..=5),
        cols: gc * rng.gen_range(1..=5),
        group_rows: gr,
        group_cols: gc,
    };
    cfg.memory.pe_spm_bytes = [1, 4, 16, 32, 64][rng.gen_range(0..5)];
    cfg.memory.input_buffer_bytes = rng.gen_range(16..=512);
    cfg.memory.accumulator_bytes = rng.gen_range(2..=4096);
    cfg.memory.double_buffer_inputs = rng.gen();
    cfg.memory.double_buffer_spm = rng.gen();
    cfg
}

/// Layer for mapping sweeps: kernels 1-13 in either direction, up to 64
/// channels and a 40x40 input.
pub fn mapping_layer(rng: &mut impl Rng, name: &str) -> LayerSpec {
    if rng.gen_ratio(1, 10) {
        return LayerSpec::fc(name, rng.gen_range(1..=64), rng.gen_range(1..=64));
    }
    loop {
        let (kh, kw) = (rng.gen_range(1..=13), rng.gen_range(1..=13));
        let l = LayerSpec::conv(
            name,
            rng.gen_range(1..=64),
            rng.gen_range(1..=40),
            rng.gen_range(1..=40),
            rng.gen_range(1..=64),
            (kh, kw),
            rng.gen_range(1..=4),
            rng.gen_range(0..=2),
        );
        if l.validate().is_ok() {
            return l;
        }
    }
}

/// Input, weights and (if the layer uses one) bias spanning the full
/// operand ranges of `cfg`.
pub fn operands(layer: &LayerSpec, cfg: &HwConfig, rng: &mut impl Rng) -> (Tensor, Tensor, Option<Tensor>) {
    let p = &cfg.precision;
    let fill = |rng: &mut dyn rand::RngCore, n: usize, bits: u32| -> Vec<i32> {
        let (lo, hi) = signed_range(bits);
        (0..n).map(|_| rng.gen_range(lo..=hi) as i32).collect()
    };
    let (ci, co) = (layer.in_channels as usize, layer.out_channels as usize);
    let in_shape = [ci, layer.in_height as usize, layer.in_width as usize];
    let w_shape = [co, ci, layer.kernel_height as usize, layer.kernel_width as usize];
    let input = Tensor::from_vec(
        &in_shape,
        p.input_bits,
        fill(rng, in_shape.iter().product(), p.input_bits),
    )
    .expect("in range");
    let weights = Tensor::from_vec(
        &w_shape,
        p.weight_bits,
        fill(rng, w_shape.iter().product(), p.weight_bits),
    )
    .expect("in range");
    let bias = layer.has_bias.then(|| {
        let b = fill(rng, co, 12);
        Tensor::from_vec(&[co], p.psum_bits, b).expect("in range")
    });
    (input, weights, bias)
}
