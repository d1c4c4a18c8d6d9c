use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{reject, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Conv4Like,
    Generator,
    Probe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn square(size: usize, channels: usize) -> Self {
        InputShape {
            height: size,
            width: size,
            channels,
        }
    }

    pub fn elements(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Layer {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    MaxPool {
        size: usize,
    },
    Upsample {
        factor: usize,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Reshape {
        height: usize,
        width: usize,
        channels: usize,
    },
    Sigmoid,
}

impl Layer {
    pub fn param_len(&self) -> usize {
        match *self {
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => kernel * kernel * in_channels * out_channels + out_channels,
            Layer::BatchNorm { channels } => 4 * channels,
            Layer::Linear { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        }
    }
}

/// Activation shape between layers (batch dimension omitted).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Image { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl ActShape {
    pub fn elements(&self) -> usize {
        match *self {
            ActShape::Image { h, w, c } => h * w * c,
            ActShape::Flat(f) => f,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub layers: Vec<Layer>,
    pub input_shape: InputShape,
    pub num_outputs: usize,
}

impl ArchSpec {
    /// `blocks` × (conv 3×3 → BN → ReLU → 2×2 max-pool), then a linear head.
    pub fn conv_classifier(
        kind: ArchKind,
        input: InputShape,
        filters: usize,
        blocks: usize,
        outputs: usize,
    ) -> Self {
        let mut layers = Vec::new();
        let mut c = input.channels;
        let (mut h, mut w) = (input.height, input.width);
        for _ in 0..blocks {
            layers.push(Layer::Conv {
                in_channels: c,
                out_channels: filters,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            layers.push(Layer::BatchNorm { channels: filters });
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool { size: 2 });
            c = filters;
            h /= 2;
            w /= 2;
        }
        layers.push(Layer::Linear {
            inputs: h * w * c,
            outputs,
        });
        ArchSpec {
            kind,
            layers,
            input_shape: input,
            num_outputs: outputs,
        }
    }

    /// Desk-scale classifier: two 16-filter blocks on 32×32×3 inputs.
    pub fn desk_classifier(outputs: usize) -> Self {
        Self::conv_classifier(
            ArchKind::Conv4Like,
            InputShape::square(32, 3),
            16,
            2,
            outputs,
        )
    }

    /// Latent → FC → reshape → BN → up → conv/BN/LeakyReLU → up →
    /// conv/BN/LeakyReLU → conv → sigmoid.
    pub fn generator(latent_dim: usize, filters: usize, image_size: usize, channels: usize) -> Self {
        let s4 = image_size / 4;
        let wide = 2 * filters;
        let layers = vec![
            Layer::Linear {
                inputs: latent_dim,
                outputs: wide * s4 * s4,
            },
            Layer::Reshape {
                height: s4,
                width: s4,
                channels: wide,
            },
            Layer::BatchNorm { channels: wide },
            Layer::Upsample { factor: 2 },
            Layer::Conv {
                in_channels: wide,
                out_channels: wide,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Layer::BatchNorm { channels: wide },
            Layer::LeakyRelu { slope: 0.2 },
            Layer::Upsample { factor: 2 },
            Layer::Conv {
                in_channels: wide,
                out_channels: filters,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Layer::BatchNorm { channels: filters },
            Layer::LeakyRelu { slope: 0.2 },
            Layer::Conv {
                in_channels: filters,
                out_channels: channels,
                kernel: 3,
                stride: 1,
                pad: 1,
            },
            Layer::Sigmoid,
        ];
        ArchSpec {
            kind: ArchKind::Generator,
            layers,
            input_shape: InputShape {
                height: 1,
                width: 1,
                channels: latent_dim,
            },
            num_outputs: image_size * image_size * channels,
        }
    }

    /// Shapes after each layer, checking that the chain is consistent.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let i = self.input_shape;
        if i.height == 0 || i.width == 0 || i.channels == 0 {
            return reject("input shape has a zero dimension");
        }
        let mut cur = ActShape::Image {
            h: i.height,
            w: i.width,
            c: i.channels,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let bad = |why: String| reject(format!("layer {li} ({layer:?}): {why}"));
            cur = match (*layer, cur) {
                (
                    Layer::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        pad,
                    },
                    ActShape::Image { h, w, c },
                ) => {
                    if c != in_channels {
                        return bad(format!("expects {in_channels} channels, got {c}"));
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return bad("zero kernel, stride or channel count".into());
                    }
                    if h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return bad("kernel larger than padded input".into());
                    }
                    ActShape::Image {
                        h: (h + 2 * pad - kernel) / stride + 1,
                        w: (w + 2 * pad - kernel) / stride + 1,
                        c: out_channels,
                    }
                }
                (Layer::Conv { .. }, ActShape::Flat(_)) => {
                    return bad("convolution needs an image input".into())
                }
                (Layer::BatchNorm { channels }, s) => {
                    let c = match s {
                        ActShape::Image { c, .. } => c,
                        ActShape::Flat(f) => f,
                    };
                    if c != channels {
                        return bad(format!("records {channels} channels, input has {c}"));
                    }
                    s
                }
                (Layer::Relu | Layer::LeakyRelu { .. } | Layer::Sigmoid, s) => s,
                (Layer::MaxPool { size }, ActShape::Image { h, w, c }) => {
                    if size == 0 || h % size != 0 || w % size != 0 {
                        return bad(format!("{h}×{w} not divisible by pool size {size}"));
                    }
                    ActShape::Image {
                        h: h / size,
                        w: w / size,
                        c,
                    }
                }
                (Layer::Upsample { factor }, ActShape::Image { h, w, c }) => {
                    if factor == 0 {
                        return bad("zero upsample factor".into());
                    }
                    ActShape::Image {
                        h: h * factor,
                        w: w * factor,
                        c,
                    }
                }
                (Layer::MaxPool { .. } | Layer::Upsample { .. }, ActShape::Flat(_)) => {
                    return bad("spatial layer needs an image input".into())
                }
                (Layer::Linear { inputs, outputs }, s) => {
                    if s.elements() != inputs {
                        return bad(format!("expects {inputs} inputs, got {}", s.elements()));
                    }
                    ActShape::Flat(outputs)
                }
                (
                    Layer::Reshape {
                        height,
                        width,
                        channels,
                    },
                    s,
                ) => {
                    if s.elements() != height * width * channels {
                        return bad(format!("cannot reshape {} elements", s.elements()));
                    }
                    ActShape::Image {
                        h: height,
                        w: width,
                        c: channels,
                    }
                }
            };
            out.push(cur);
        }
        if cur.elements() != self.num_outputs {
            return reject(format!(
                "architecture produces {} outputs, declares {}",
                cur.elements(),
                self.num_outputs
            ));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Offset of each layer's parameters in the canonical vector.
    pub fn param_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = off;
                off += l.param_len();
                o
            })
            .collect()
    }

    pub fn param_len(&self) -> usize {
        self.layers.iter().map(Layer::param_len).sum()
    }

    /// Parameter count of the first `layers` layers.
    pub fn param_len_until(&self, layers: usize) -> usize {
        self.layers[..layers].iter().map(Layer::param_len).sum()
    }

    /// `true` for learnable entries, `false` for BN running statistics.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.param_len());
        for l in &self.layers {
            match *l {
                Layer::BatchNorm { channels } => {
                    mask.extend(std::iter::repeat_n(true, 2 * channels));
                    mask.extend(std::iter::repeat_n(false, 2 * channels));
                }
                _ => mask.extend(std::iter::repeat_n(true, l.param_len())),
            }
        }
        mask
    }

    /// Index of the last linear layer (the classification head).
    pub fn head_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::Linear { .. }))
    }

    /// Fan-in scaled uniform weights, unit BN gains, zero shifts, unit
    /// running variances.
    pub fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut rng = seed::rng(seed);
        let mut out = Vec::with_capacity(self.param_len());
        for l in &self.layers {
            match *l {
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = kernel * kernel * in_channels;
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for _ in 0..fan_in * out_channels + out_channels {
                        out.push(rng.random_range(-bound..bound) as f32);
                    }
                }
                Layer::Linear { inputs, outputs } => {
                    let bound = 1.0 / (inputs as f64).sqrt();
                    for _ in 0..inputs * outputs + outputs {
                        out.push(rng.random_range(-bound..bound) as f32);
                    }
                }
                Layer::BatchNorm { channels } => {
                    out.extend(std::iter::repeat_n(1.0f32, channels));
                    out.extend(std::iter::repeat_n(0.0f32, channels));
                    out.extend(std::iter::repeat_n(0.0f32, channels));
                    out.extend(std::iter::repeat_n(1.0f32, channels));
                }
                _ => {}
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_classifier_chains_to_head() {
        let a = ArchSpec::desk_classifier(5);
        let shapes = a.shapes().unwrap();
        assert_eq!(shapes.last(), Some(&ActShape::Flat(5)));
        assert_eq!(shapes[7], ActShape::Image { h: 8, w: 8, c: 16 });
        assert_eq!(a.param_len(), (27 * 16 + 16) + 64 + (144 * 16 + 16) + 64 + 1024 * 5 + 5);
        assert_eq!(a.trainable_mask().iter().filter(|t| !**t).count(), 64);
    }

    #[test]
    fn generator_output_matches_image() {
        let g = ArchSpec::generator(256, 8, 32, 3);
        let shapes = g.shapes().unwrap();
        assert_eq!(shapes.last(), Some(&ActShape::Image { h: 32, w: 32, c: 3 }));
    }

    #[test]
    fn inconsistent_chain_is_rejected() {
        let mut a = ArchSpec::desk_classifier(5);
        a.layers[1] = Layer::BatchNorm { channels: 8 };
        assert!(a.validate().is_err());
        let mut b = ArchSpec::desk_classifier(5);
        b.num_outputs = 6;
        assert!(b.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_sized() {
        let a = ArchSpec::desk_classifier(5);
        let p = a.init_params(3);
        assert_eq!(p.len(), a.param_len());
        assert_eq!(p, a.init_params(3));
        assert_ne!(p, a.init_params(4));
    }
}
