//! Architecture descriptions.
//!
//! The text format is line oriented:
//!
//! ```text
//! # target network
//! input 1 28 28
//! classes 10
//! conv3-4          # 3x3 convolution with 4 kernels, then ReLU
//! maxpooling-2
//! conv3-8
//! maxpooling-2
//! FC-1024          # ReLU follows every FC except the last
//! FC-10
//! ```
//!
//! Tokens may also be separated by `/` on a single line. A `padding same` or
//! `padding valid` line sets the padding of the convolutions that follow it
//! (default `same`). `input` defaults to `1 28 28`; `classes` defaults to the
//! unit count of the final FC layer. A flatten layer is inserted before the
//! first FC layer.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Padding;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty architecture description")]
    Empty,
    #[error("layer {layer} ({kind}): {message}")]
    Shape {
        layer: usize,
        kind: String,
        message: String,
    },
    #[error("layer list is not in canonical form: {0}")]
    NotCanonical(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        size: usize,
        kernels: usize,
        padding: Padding,
    },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool {
        size: usize,
    },
    #[serde(rename = "meanpool")]
    MeanPool {
        size: usize,
    },
    Flatten,
    Fc {
        units: usize,
    },
}

impl LayerSpec {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Fc { .. })
    }

    pub fn is_pool(&self) -> bool {
        matches!(self, LayerSpec::MaxPool { .. } | LayerSpec::MeanPool { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::MeanPool { .. } => "meanpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Fc { .. } => "fc",
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Conv {
                size,
                kernels,
                padding,
            } => {
                let [_, h, w] = chw(input)?;
                if size == 0 || size % 2 == 0 {
                    return Err(format!("kernel size {size} must be odd"));
                }
                if kernels == 0 {
                    return Err("kernel count must be positive".into());
                }
                if padding == Padding::Valid && (size > h || size > w) {
                    return Err(format!("kernel size {size} exceeds input {h}x{w}"));
                }
                Ok(vec![
                    kernels,
                    padding.output_size(h, size),
                    padding.output_size(w, size),
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { size } | LayerSpec::MeanPool { size } => {
                let [c, h, w] = chw(input)?;
                if size == 0 || h % size != 0 || w % size != 0 {
                    return Err(format!("input {h}x{w} not divisible by pool size {size}"));
                }
                Ok(vec![c, h / size, w / size])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Fc { units } => {
                if input.len() != 1 {
                    return Err(format!("expects a flat input, got {input:?}"));
                }
                if units == 0 {
                    return Err("unit count must be positive".into());
                }
                Ok(vec![units])
            }
        }
    }
}

fn chw(shape: &[usize]) -> Result<[usize; 3], String> {
    match shape {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(format!("expects a [c, h, w] input, got {shape:?}")),
    }
}

/// Which family of layer a tap point refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TapKind {
    Conv,
    Relu,
    Pool,
}

impl TapKind {
    pub fn of(layer: &LayerSpec) -> Option<TapKind> {
        match layer {
            LayerSpec::Conv { .. } => Some(TapKind::Conv),
            LayerSpec::Relu => Some(TapKind::Relu),
            LayerSpec::MaxPool { .. } | LayerSpec::MeanPool { .. } => Some(TapKind::Pool),
            LayerSpec::Flatten | LayerSpec::Fc { .. } => None,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            TapKind::Conv => "conv",
            TapKind::Relu => "relu",
            TapKind::Pool => "pool",
        }
    }
}

/// One operation layer whose output an attack manipulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TapPoint {
    pub layer_index: usize,
    pub kind: TapKind,
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.kind.prefix(), self.layer_index)
    }
}

/// A validated, shape-consistent layer list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct NetworkSpec {
    input: [usize; 3],
    classes: usize,
    layers: Vec<LayerSpec>,
    #[serde(skip)]
    shapes: Vec<Vec<usize>>,
}

impl NetworkSpec {
    /// Validates shape propagation end to end. The last layer must be an FC
    /// layer with `classes` units.
    pub fn new(
        input: [usize; 3],
        classes: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self, SpecError> {
        Self::with_lines(input, classes, layers, None)
    }

    fn with_lines(
        input: [usize; 3],
        classes: usize,
        layers: Vec<LayerSpec>,
        lines: Option<&[usize]>,
    ) -> Result<Self, SpecError> {
        let shape_err = |i: usize, layer: &LayerSpec, message: String| match lines {
            Some(lines) => SpecError::Parse {
                line: lines[i],
                message: format!("{}: {message}", layer.name()),
            },
            None => SpecError::Shape {
                layer: i,
                kind: layer.name().into(),
                message,
            },
        };
        if layers.is_empty() {
            return Err(SpecError::Empty);
        }
        if input.contains(&0) {
            return Err(SpecError::Shape {
                layer: 0,
                kind: "input".into(),
                message: format!("input shape {input:?} has a zero dimension"),
            });
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            current = layer
                .output_shape(&current)
                .map_err(|m| shape_err(i, layer, m))?;
            shapes.push(current.clone());
        }
        let last = layers.len() - 1;
        match layers[last] {
            LayerSpec::Fc { units } if units == classes => {}
            LayerSpec::Fc { units } => {
                return Err(shape_err(
                    last,
                    &layers[last],
                    format!("final layer has {units} units but {classes} classes are declared"),
                ))
            }
            ref other => {
                return Err(shape_err(
                    last,
                    other,
                    "the final layer must be a fully connected layer".into(),
                ))
            }
        }
        Ok(Self {
            input,
            classes,
            layers,
            shapes,
        })
    }

    /// The MNIST target network on 1×28×28 inputs.
    pub fn mnist_target() -> Self {
        Self::parse("conv3-4 / maxpooling-2 / conv3-8 / maxpooling-2 / FC-1024 / FC-10")
            .expect("built-in spec is valid")
    }

    /// One MNIST oracle member on 1×28×28 inputs.
    pub fn mnist_oracle() -> Self {
        Self::parse(
            "conv3-16 / conv3-32 / maxpooling-2 / conv3-64 / conv3-64 / maxpooling-2 / FC-1024 / FC-10",
        )
        .expect("built-in spec is valid")
    }

    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let mut input = None;
        let mut classes = None;
        let mut padding = Padding::Same;
        // (line, raw layer before ReLU / flatten expansion)
        let mut raw: Vec<(usize, LayerSpec)> = Vec::new();

        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let content = line.split('#').next().unwrap_or("");
            for part in content.split('/') {
                let words: Vec<&str> = part.split_whitespace().collect();
                let Some(&head) = words.first() else { continue };
                let err = |message: String| SpecError::Parse {
                    line: line_no,
                    message,
                };
                match head.to_ascii_lowercase().as_str() {
                    "input" => {
                        let dims = parse_numbers(&words[1..]).map_err(err)?;
                        match dims[..] {
                            [c, h, w] => input = Some([c, h, w]),
                            _ => return Err(err("`input` takes three integers: C H W".into())),
                        }
                    }
                    "classes" => {
                        let n = parse_numbers(&words[1..]).map_err(err)?;
                        match n[..] {
                            [n] if n >= 2 => classes = Some(n),
                            _ => return Err(err("`classes` takes one integer >= 2".into())),
                        }
                    }
                    "padding" => {
                        padding = match words.get(1).map(|w| w.to_ascii_lowercase()).as_deref() {
                            Some("same") if words.len() == 2 => Padding::Same,
                            Some("valid") if words.len() == 2 => Padding::Valid,
                            _ => return Err(err("`padding` takes `same` or `valid`".into())),
                        };
                    }
                    _ => {
                        if words.len() != 1 {
                            return Err(err(format!("unexpected text after token `{head}`")));
                        }
                        let layer = parse_token(head, padding).map_err(err)?;
                        raw.push((line_no, layer));
                    }
                }
            }
        }
        if raw.is_empty() {
            return Err(SpecError::Empty);
        }
        let last_fc = raw
            .iter()
            .rposition(|(_, l)| matches!(l, LayerSpec::Fc { .. }));
        let mut layers = Vec::new();
        let mut lines = Vec::new();
        let mut flattened = false;
        for (i, (line, layer)) in raw.iter().enumerate() {
            match layer {
                LayerSpec::Conv { .. } => {
                    if flattened {
                        return Err(SpecError::Parse {
                            line: *line,
                            message: "convolution after a fully connected layer".into(),
                        });
                    }
                    layers.extend([*layer, LayerSpec::Relu]);
                    lines.extend([*line, *line]);
                }
                LayerSpec::Fc { .. } => {
                    if !flattened {
                        layers.push(LayerSpec::Flatten);
                        lines.push(*line);
                        flattened = true;
                    }
                    layers.push(*layer);
                    lines.push(*line);
                    if Some(i) != last_fc {
                        layers.push(LayerSpec::Relu);
                        lines.push(*line);
                    }
                }
                _ => {
                    if flattened {
                        return Err(SpecError::Parse {
                            line: *line,
                            message: "pooling after a fully connected layer".into(),
                        });
                    }
                    layers.push(*layer);
                    lines.push(*line);
                }
            }
        }
        let classes = match (classes, layers.last()) {
            (Some(c), _) => c,
            (None, Some(LayerSpec::Fc { units })) => *units,
            (None, _) => {
                return Err(SpecError::Parse {
                    line: *lines.last().unwrap(),
                    message: "the final layer must be a fully connected layer".into(),
                })
            }
        };
        Self::with_lines(input.unwrap_or([1, 28, 28]), classes, layers, Some(&lines))
    }

    /// Renders the spec in the text format accepted by [`NetworkSpec::parse`].
    ///
    /// Only layer lists with the canonical ReLU / flatten placement (the
    /// form `parse` produces) can be rendered.
    pub fn to_text(&self) -> Result<String, SpecError> {
        let mut out = format!(
            "input {} {} {}\nclasses {}\n",
            self.input[0], self.input[1], self.input[2], self.classes
        );
        let mut padding = Padding::Same;
        let last = self.layers.len() - 1;
        let mut i = 0;
        let mut seen_fc = false;
        while i < self.layers.len() {
            match self.layers[i] {
                LayerSpec::Conv {
                    size,
                    kernels,
                    padding: p,
                } => {
                    if self.layers.get(i + 1) != Some(&LayerSpec::Relu) {
                        return Err(SpecError::NotCanonical(format!(
                            "conv at {i} is not followed by relu"
                        )));
                    }
                    if p != padding {
                        padding = p;
                        out.push_str(match p {
                            Padding::Same => "padding same\n",
                            Padding::Valid => "padding valid\n",
                        });
                    }
                    out.push_str(&format!("conv{size}-{kernels}\n"));
                    i += 2;
                }
                LayerSpec::MaxPool { size } => {
                    out.push_str(&format!("maxpooling-{size}\n"));
                    i += 1;
                }
                LayerSpec::MeanPool { size } => {
                    out.push_str(&format!("meanpooling-{size}\n"));
                    i += 1;
                }
                LayerSpec::Flatten => {
                    if seen_fc || !matches!(self.layers.get(i + 1), Some(LayerSpec::Fc { .. })) {
                        return Err(SpecError::NotCanonical(format!(
                            "flatten at {i} does not precede the first fc"
                        )));
                    }
                    i += 1;
                }
                LayerSpec::Fc { units } => {
                    if !seen_fc && (i == 0 || self.layers[i - 1] != LayerSpec::Flatten) {
                        return Err(SpecError::NotCanonical(
                            "first fc is not preceded by flatten".into(),
                        ));
                    }
                    seen_fc = true;
                    out.push_str(&format!("FC-{units}\n"));
                    if i == last {
                        i += 1;
                    } else if self.layers[i + 1] == LayerSpec::Relu {
                        i += 2;
                    } else {
                        return Err(SpecError::NotCanonical(format!(
                            "hidden fc at {i} is not followed by relu"
                        )));
                    }
                }
                LayerSpec::Relu => {
                    return Err(SpecError::NotCanonical(format!("stray relu at {i}")));
                }
            }
        }
        Ok(out)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> Vec<usize> {
        if i == 0 {
            self.input.to_vec()
        } else {
            self.shapes[i - 1].clone()
        }
    }

    /// Named tap points of the convolutional encoder, numbered per kind:
    /// `conv1, relu1, pool1, conv2, ...`.
    pub fn taps(&self) -> Vec<(String, TapPoint)> {
        let mut counts = [0usize; 3];
        let mut taps = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::Flatten | LayerSpec::Fc { .. }) {
                break;
            }
            if let Some(kind) = TapKind::of(layer) {
                let slot = kind as usize;
                counts[slot] += 1;
                taps.push((
                    format!("{}{}", kind.prefix(), counts[slot]),
                    TapPoint {
                        layer_index: i,
                        kind,
                    },
                ));
            }
        }
        taps
    }

    pub fn tap(&self, name: &str) -> Option<TapPoint> {
        let name = name.to_ascii_lowercase();
        self.taps()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
    }

    pub fn tap_name(&self, tap: TapPoint) -> Option<String> {
        self.taps()
            .into_iter()
            .find(|(_, t)| *t == tap)
            .map(|(n, _)| n)
    }

    /// Checks that `tap` names an existing layer of the stated kind.
    pub fn validate_tap(&self, tap: TapPoint) -> Result<(), String> {
        let layer = self
            .layers
            .get(tap.layer_index)
            .ok_or_else(|| format!("tap index {} out of range", tap.layer_index))?;
        match TapKind::of(layer) {
            Some(kind) if kind == tap.kind => Ok(()),
            _ => Err(format!(
                "layer {} is {}, not {}",
                tap.layer_index,
                layer.name(),
                tap.kind.prefix()
            )),
        }
    }
}

fn parse_numbers(words: &[&str]) -> Result<Vec<usize>, String> {
    words
        .iter()
        .map(|w| {
            w.parse::<usize>()
                .map_err(|_| format!("`{w}` is not a non-negative integer"))
        })
        .collect()
}

fn parse_token(token: &str, padding: Padding) -> Result<LayerSpec, String> {
    let lower = token.to_ascii_lowercase();
    let positive = |s: &str| -> Result<usize, String> {
        match s.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(format!("bad number `{s}` in token `{token}`")),
        }
    };
    if let Some(rest) = lower.strip_prefix("conv") {
        let (m, k) = rest
            .split_once('-')
            .ok_or_else(|| format!("expected convM-K, got `{token}`"))?;
        let size = positive(m)?;
        if size % 2 == 0 {
            return Err(format!("kernel size {size} must be odd in `{token}`"));
        }
        return Ok(LayerSpec::Conv {
            size,
            kernels: positive(k)?,
            padding,
        });
    }
    if let Some(n) = lower.strip_prefix("maxpooling-") {
        return Ok(LayerSpec::MaxPool { size: positive(n)? });
    }
    if let Some(n) = lower.strip_prefix("meanpooling-") {
        return Ok(LayerSpec::MeanPool { size: positive(n)? });
    }
    if let Some(u) = lower.strip_prefix("fc-") {
        return Ok(LayerSpec::Fc {
            units: positive(u)?,
        });
    }
    Err(format!("unknown token `{token}`"))
}
