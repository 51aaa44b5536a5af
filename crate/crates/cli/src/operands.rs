//! Seeded operand generation for functional runs.

use anyhow::Result;
use lupulus::layer::WeightInit;
use lupulus::tensor::signed_range;
use lupulus::{HwConfig, LayerSpec, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Operands {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

/// Generator for layer `index` of a run seeded with `seed`.
pub fn layer_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn uniform(rng: &mut impl Rng, n: usize, bits: u32) -> Vec<i32> {
    let (lo, hi) = signed_range(bits);
    (0..n).map(|_| rng.gen_range(lo..=hi) as i32).collect()
}

pub fn generate(layer: &LayerSpec, cfg: &HwConfig, rng: &mut impl Rng) -> Result<Operands> {
    let p = &cfg.precision;
    let (ci, co) = (layer.in_channels as usize, layer.out_channels as usize);
    let (kh, kw) = (layer.kernel_height as usize, layer.kernel_width as usize);
    let in_shape = [ci, layer.in_height as usize, layer.in_width as usize];
    let w_shape = [co, ci, kh, kw];
    let n_in = in_shape.iter().product();
    let n_w: usize = w_shape.iter().product();

    let input = Tensor::from_vec(&in_shape, p.input_bits, uniform(rng, n_in, p.input_bits))?;
    let weights = match layer.init {
        WeightInit::Random => uniform(rng, n_w, p.weight_bits),
        WeightInit::Zeros => vec![0; n_w],
        WeightInit::Identity => {
            let mut w = vec![0; n_w];
            for o in 0..co.min(ci) {
                w[((o * ci + o) * kh + kh / 2) * kw + kw / 2] = 1;
            }
            w
        }
    };
    let weights = Tensor::from_vec(&w_shape, p.weight_bits, weights)?;
    let bias = if layer.has_bias {
        let (lo, hi) = signed_range(p.psum_bits);
        let b = (0..co).map(|_| rng.gen_range(lo / 64..=hi / 64) as i32).collect();
        Some(Tensor::from_vec(&[co], p.psum_bits, b)?)
    } else {
        None
    };
    Ok(Operands { input, weights, bias })
}

/// Random small layer for the functional cross-check.
pub fn random_small_layer(rng: &mut impl Rng, cfg: &HwConfig, name: String) -> LayerSpec {
    let kernels = [1u32, 3, 5, 7, 11];
    let max_k = cfg.grid.cols;
    loop {
        if rng.gen_bool(0.1) {
            let mut l = LayerSpec::fc(&name, rng.gen_range(1..=16), rng.gen_range(1..=16));
            l.has_bias = rng.gen_bool(0.3);
            l.apply_relu = rng.gen_bool(0.3);
            return l;
        }
        let kh = kernels[rng.gen_range(0..kernels.len())];
        let kw = if rng.gen_bool(0.8) {
            kh
        } else {
            kernels[rng.gen_range(0..kernels.len())]
        };
        if kw > max_k {
            continue;
        }
        let mut l = LayerSpec::conv(
            &name,
            rng.gen_range(1..=16),
            rng.gen_range(1..=16),
            rng.gen_range(1..=16),
            rng.gen_range(1..=16),
            (kh, kw),
            rng.gen_range(1..=4),
            rng.gen_range(0..=2),
        );
        l.has_bias = rng.gen_bool(0.3);
        l.apply_relu = rng.gen_bool(0.3);
        if l.validate().is_ok() {
            return l;
        }
    }
}
