//! Per-layer convolution shapes and size accounting.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{NernError, Result};

pub const BYTES_PER_PARAM: f64 = 4.0;
pub const BYTES_PER_MB: f64 = 1_048_576.0;

pub fn params_to_mb(params: f64) -> f64 {
    params * BYTES_PER_PARAM / BYTES_PER_MB
}

pub fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub filters: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Whether the predictor reconstructs this layer.
    pub predictable: bool,
}

impl LayerSpec {
    pub fn conv(name: impl Into<String>, filters: usize, channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            filters,
            channels,
            kernel,
            stride,
            padding: kernel / 2,
            predictable: true,
        }
    }

    pub fn skipped(mut self) -> Self {
        self.predictable = false;
        self
    }

    pub fn kernels(&self) -> usize {
        self.filters * self.channels
    }

    pub fn param_count(&self) -> usize {
        self.kernels() * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.filters, self.channels, self.kernel, self.kernel]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchCatalog {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub k_max: usize,
    /// Dense, bias and normalization parameters.
    pub non_conv_param_count: usize,
}

impl ArchCatalog {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>, non_conv_param_count: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(NernError::InvalidArgument("catalog has no layers".into()));
        }
        if let Some(l) = layers
            .iter()
            .find(|l| l.filters == 0 || l.channels == 0 || l.kernel == 0 || l.stride == 0)
        {
            return Err(NernError::InvalidArgument(format!("layer `{}` has a zero extent", l.name)));
        }
        let k_max = layers.iter().map(|l| l.kernel).max().unwrap_or(1);
        Ok(Self {
            name: name.into(),
            layers,
            k_max,
            non_conv_param_count,
        })
    }

    pub fn conv_param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn total_param_count(&self) -> usize {
        self.conv_param_count() + self.non_conv_param_count
    }

    pub fn predictable_layers(&self) -> impl Iterator<Item = &LayerSpec> + '_ {
        self.layers.iter().filter(|l| l.predictable)
    }

    /// Catalog indices of the predictable layers, in order.
    pub fn predictable_indices(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].predictable).collect()
    }

    pub fn predictable_param_count(&self) -> usize {
        self.predictable_layers().map(LayerSpec::param_count).sum()
    }

    pub fn predictable_kernel_count(&self) -> usize {
        self.predictable_layers().map(LayerSpec::kernels).sum()
    }

    /// Largest kernel among predictable layers; this is the predictor's output side.
    pub fn prediction_kernel(&self) -> usize {
        self.predictable_layers().map(|l| l.kernel).max().unwrap_or(self.k_max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SizeReport {
    /// Rounded to 2 decimals.
    pub total_mb: f64,
    /// Rounded to 2 decimals.
    pub conv_mb: f64,
    /// Ratio of the two rounded figures, in percent, rounded to 2 decimals.
    pub conv_percent: f64,
    /// Unrounded `conv / total * 100`.
    pub conv_percent_exact: f64,
}

impl fmt::Display for SizeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} {:.2} {:.2}", self.total_mb, self.conv_mb, self.conv_percent)
    }
}

pub fn size_report(catalog: &ArchCatalog) -> SizeReport {
    let total = params_to_mb(catalog.total_param_count() as f64);
    let conv = params_to_mb(catalog.conv_param_count() as f64);
    let (total_mb, conv_mb) = (round_to(total, 2), round_to(conv, 2));
    SizeReport {
        total_mb,
        conv_mb,
        conv_percent: round_to(conv_mb / total_mb * 100.0, 2),
        conv_percent_exact: conv / total * 100.0,
    }
}

pub const DESK3: &str = "desk3";
pub const RESNET20_CIFAR: &str = "resnet20_cifar";
pub const RESNET56_CIFAR: &str = "resnet56_cifar";
pub const RESNET18_IMAGENET: &str = "resnet18_imagenet";

pub const KNOWN_ARCHS: [&str; 4] = [DESK3, RESNET20_CIFAR, RESNET56_CIFAR, RESNET18_IMAGENET];

/// The trainable desk-scale network: three 3x3 convs on 8x8 single-channel input.
pub fn desk3_catalog() -> ArchCatalog {
    let layers = vec![
        LayerSpec::conv("conv1", 8, 1, 3, 1),
        LayerSpec::conv("conv2", 16, 8, 3, 2),
        LayerSpec::conv("conv3", 16, 16, 3, 1),
    ];
    // conv biases (8 + 16 + 16) and the 16 -> 2 head
    let non_conv = 40 + 16 * 2 + 2;
    ArchCatalog::new(DESK3, layers, non_conv).expect("static catalog")
}

/// CIFAR ResNet (6n + 2 layers) with 1x1 projection shortcuts.
fn cifar_resnet(name: &str, blocks_per_stage: usize, classes: usize) -> ArchCatalog {
    let mut layers = vec![LayerSpec::conv("conv1", 16, 3, 3, 1)];
    let mut in_ch = 16;
    for (stage, width) in [16usize, 32, 64].into_iter().enumerate() {
        for block in 0..blocks_per_stage {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let prefix = format!("layer{}.{block}", stage + 1);
            layers.push(LayerSpec::conv(format!("{prefix}.conv1"), width, in_ch, 3, stride));
            layers.push(LayerSpec::conv(format!("{prefix}.conv2"), width, width, 3, 1));
            if in_ch != width {
                layers.push(LayerSpec::conv(format!("{prefix}.shortcut"), width, in_ch, 1, stride).skipped());
            }
            in_ch = width;
        }
    }
    let bn = 2 * layers.iter().map(|l| l.filters).sum::<usize>();
    let fc = in_ch * classes + classes;
    ArchCatalog::new(name, layers, bn + fc).expect("static catalog")
}

/// torchvision ResNet-18. The 7x7 stem and the 1x1 downsampling convs are not predicted.
fn resnet18_imagenet() -> ArchCatalog {
    let mut layers = vec![LayerSpec::conv("conv1", 64, 3, 7, 2).skipped()];
    let mut in_ch = 64;
    for (stage, width) in [64usize, 128, 256, 512].into_iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let prefix = format!("layer{}.{block}", stage + 1);
            layers.push(LayerSpec::conv(format!("{prefix}.conv1"), width, in_ch, 3, stride));
            layers.push(LayerSpec::conv(format!("{prefix}.conv2"), width, width, 3, 1));
            if stride != 1 || in_ch != width {
                layers.push(LayerSpec::conv(format!("{prefix}.downsample"), width, in_ch, 1, stride).skipped());
            }
            in_ch = width;
        }
    }
    let bn = 2 * layers.iter().map(|l| l.filters).sum::<usize>();
    let fc = in_ch * 1000 + 1000;
    ArchCatalog::new(RESNET18_IMAGENET, layers, bn + fc).expect("static catalog")
}

pub fn resnet_catalog(name: &str) -> Result<ArchCatalog> {
    match name {
        RESNET20_CIFAR => Ok(cifar_resnet(RESNET20_CIFAR, 3, 10)),
        RESNET56_CIFAR => Ok(cifar_resnet(RESNET56_CIFAR, 9, 10)),
        RESNET18_IMAGENET => Ok(resnet18_imagenet()),
        other => Err(NernError::UnknownArch(other.to_string())),
    }
}

/// Any known catalog, including `desk3`.
pub fn catalog_by_name(name: &str) -> Result<ArchCatalog> {
    match name {
        DESK3 => Ok(desk3_catalog()),
        other => resnet_catalog(other),
    }
}
