//! Workload descriptions: single conv/FC layers and ordered networks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
}

/// How the CLI fills a layer's weights when it generates operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightInit {
    #[default]
    Random,
    /// Kernel centre of filter `o` on channel `o` is 1, everything else 0.
    Identity,
    Zeros,
}

fn one() -> u32 {
    1
}

fn is_random(w: &WeightInit) -> bool {
    *w == WeightInit::Random
}

/// Shape, stride, padding and post-processing of one layer.
///
/// FC layers are expressed as 1x1 convolutions over a 1x1 input: the
/// weight-matrix width is `in_channels` and its height `out_channels`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    #[serde(default)]
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: u32,
    #[serde(default = "one")]
    pub in_height: u32,
    #[serde(default = "one")]
    pub in_width: u32,
    pub out_channels: u32,
    #[serde(default = "one")]
    pub kernel_height: u32,
    #[serde(default = "one")]
    pub kernel_width: u32,
    #[serde(default = "one")]
    pub stride: u32,
    /// Symmetric zero padding on every border.
    #[serde(default)]
    pub padding: u32,
    #[serde(default)]
    pub has_bias: bool,
    #[serde(default)]
    pub apply_relu: bool,
    #[serde(default, skip_serializing_if = "is_random")]
    pub init: WeightInit,
}

impl LayerSpec {
    /// Convolution with no bias or activation.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        name: &str,
        in_channels: u32,
        in_height: u32,
        in_width: u32,
        out_channels: u32,
        kernel: (u32, u32),
        stride: u32,
        padding: u32,
    ) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::Conv,
            in_channels,
            in_height,
            in_width,
            out_channels,
            kernel_height: kernel.0,
            kernel_width: kernel.1,
            stride,
            padding,
            has_bias: false,
            apply_relu: false,
            init: WeightInit::Random,
        }
    }

    /// FC layer with a `rows x cols` weight matrix.
    pub fn fc(name: &str, rows: u32, cols: u32) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::Fc,
            in_channels: cols,
            in_height: 1,
            in_width: 1,
            out_channels: rows,
            kernel_height: 1,
            kernel_width: 1,
            stride: 1,
            padding: 0,
            has_bias: false,
            apply_relu: false,
            init: WeightInit::Random,
        }
    }

    pub fn out_height(&self) -> u32 {
        out_dim(self.in_height, self.kernel_height, self.stride, self.padding)
    }

    pub fn out_width(&self) -> u32 {
        out_dim(self.in_width, self.kernel_width, self.stride, self.padding)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_height == 1 && self.kernel_width == 1
    }

    pub fn label(&self) -> &str {
        if self.name.is_empty() {
            "<unnamed>"
        } else {
            &self.name
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("layer `{}`: {msg}", self.label())));
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("in_height", self.in_height),
            ("in_width", self.in_width),
            ("out_channels", self.out_channels),
            ("kernel_height", self.kernel_height),
            ("kernel_width", self.kernel_width),
            ("stride", self.stride),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.kind == LayerKind::Fc
            && (self.kernel_height != 1
                || self.kernel_width != 1
                || self.in_height != 1
                || self.in_width != 1
                || self.stride != 1
                || self.padding != 0)
        {
            return bad("fc layers must be 1x1 over a 1x1 input".into());
        }
        if self.in_height + 2 * self.padding < self.kernel_height
            || self.in_width + 2 * self.padding < self.kernel_width
        {
            return bad("kernel larger than padded input".into());
        }
        Ok(())
    }

    pub fn input_elems(&self) -> u64 {
        self.in_channels as u64 * self.in_height as u64 * self.in_width as u64
    }

    pub fn weight_elems(&self) -> u64 {
        self.out_channels as u64 * self.in_channels as u64 * self.kernel_height as u64 * self.kernel_width as u64
    }

    pub fn output_elems(&self) -> u64 {
        self.out_channels as u64 * self.out_height() as u64 * self.out_width() as u64
    }

    pub fn macs(&self) -> u64 {
        self.weight_elems() * self.out_height() as u64 * self.out_width() as u64
    }
}

fn out_dim(input: u32, kernel: u32, stride: u32, padding: u32) -> u32 {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return 0;
    }
    (padded - kernel) / stride + 1
}

/// Ordered list of layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
}

const BUNDLED: &[(&str, &str)] = &[
    ("alexnet-conv", include_str!("../networks/alexnet-conv.toml")),
    ("vgg16-conv", include_str!("../networks/vgg16-conv.toml")),
    ("alexnet-fc", include_str!("../networks/alexnet-fc.toml")),
    ("vgg16-fc", include_str!("../networks/vgg16-fc.toml")),
    ("identity", include_str!("../networks/identity.toml")),
];

impl NetworkSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let net: NetworkSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        net.validate()?;
        Ok(net)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("network serializes")
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    /// One of the descriptors shipped with the crate.
    pub fn bundled(name: &str) -> Option<Self> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_toml_str(text).expect("bundled descriptor is valid"))
    }

    pub fn alexnet_conv() -> Self {
        Self::bundled("alexnet-conv").unwrap()
    }

    pub fn vgg16_conv() -> Self {
        Self::bundled("vgg16-conv").unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        self.layers.iter().try_for_each(LayerSpec::validate)
    }

    /// Checks that every layer consumes exactly what the previous one
    /// produces. Only needed when layers are executed back to back.
    pub fn check_chain(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            let produced = (prev.out_channels, prev.out_height(), prev.out_width());
            let consumed = (next.in_channels, next.in_height, next.in_width);
            if produced != consumed {
                return Err(Error::Shape(format!(
                    "layer `{}` produces {:?} but `{}` expects {:?}",
                    prev.label(),
                    produced,
                    next.label(),
                    consumed
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Count the positions the canonical loop nest visits along one axis.
    fn visited_positions(input: u32, kernel: u32, stride: u32, padding: u32) -> u32 {
        let padded = (input + 2 * padding) as i64;
        let mut count = 0;
        let mut start = 0i64;
        while start + kernel as i64 <= padded {
            count += 1;
            start += stride as i64;
        }
        count
    }

    #[test]
    fn output_shape_matches_loop_bounds() {
        for input in 1..20 {
            for kernel in 1..8 {
                for stride in 1..5 {
                    for padding in 0..3 {
                        if input + 2 * padding < kernel {
                            continue;
                        }
                        assert_eq!(
                            out_dim(input, kernel, stride, padding),
                            visited_positions(input, kernel, stride, padding)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn bundled_networks_parse() {
        let alex = NetworkSpec::alexnet_conv();
        assert_eq!(alex.layers.len(), 5);
        assert_eq!(alex.layers[0].out_height(), 55);
        let vgg = NetworkSpec::vgg16_conv();
        assert_eq!(vgg.layers.len(), 13);
        assert!(vgg.layers.iter().all(|l| l.out_height() == l.in_height));
        for name in NetworkSpec::bundled_names() {
            assert!(NetworkSpec::bundled(name).is_some());
        }
        let fc = NetworkSpec::bundled("alexnet-fc").unwrap();
        assert_eq!(fc.layers[0].kind, LayerKind::Fc);
        assert_eq!(fc.layers[0].in_height, 1);
    }

    #[test]
    fn fc_shape_rules() {
        let mut l = LayerSpec::fc("f", 10, 20);
        assert!(l.validate().is_ok());
        l.kernel_width = 3;
        assert!(l.validate().is_err());
    }

    #[test]
    fn chain_check() {
        let a = LayerSpec::conv("a", 3, 8, 8, 4, (3, 3), 1, 1);
        let b = LayerSpec::conv("b", 4, 8, 8, 2, (1, 1), 1, 0);
        let net = NetworkSpec {
            name: "n".into(),
            layers: vec![a.clone(), b],
        };
        assert!(net.check_chain().is_ok());
        let c = LayerSpec::conv("c", 5, 8, 8, 2, (1, 1), 1, 0);
        let net = NetworkSpec {
            name: "n".into(),
            layers: vec![a, c],
        };
        assert!(net.check_chain().is_err());
    }

    #[test]
    fn unknown_layer_key_rejected() {
        let text = "name = \"x\"\n[[layers]]\nkind = \"fc\"\nin_channels = 2\nout_channels = 2\nwidth = 3\n";
        let err = NetworkSpec::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }
}
