//! Re-run the pipeline-depth / transfer-overhead search behind the default
//! config.

use lupulus::calibrate::fit;
use lupulus::HwConfig;

fn main() {
    let f = fit(&HwConfig::default(), 1..=16, 0..=8).unwrap();
    println!(
        "depth {} overhead {}: AlexNet {:.3} ms, VGG-16 {:.3} ms, worst error {:.2}%",
        f.pipeline_depth,
        f.overhead_cycles,
        f.alexnet_ms,
        f.vgg16_ms,
        100.0 * f.max_rel_error()
    );
}
