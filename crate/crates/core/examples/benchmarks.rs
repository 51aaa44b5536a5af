//! Per-layer timing of the bundled benchmark networks on the default config.

use lupulus::{timing::simulate_network, HwConfig, NetworkSpec};

fn main() {
    let cfg = HwConfig::default();
    for net in [NetworkSpec::alexnet_conv(), NetworkSpec::vgg16_conv()] {
        let r = simulate_network(&net.layers, &cfg).unwrap();
        println!("{}\n{r}", net.name);
    }
}
