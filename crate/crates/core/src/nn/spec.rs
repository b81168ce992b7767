use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(filters: usize, kernel: usize, stride: usize) -> Self {
        Self { filters, kernel, stride }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    /// Mean head, state-independent log-std and a value head on a shared trunk.
    GaussianPolicy,
    /// `tanh`-squashed action head.
    Actor,
    /// Action-value head; the action joins the flattened features before the dense layers.
    Critic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub conv: Vec<ConvSpec>,
    pub conv_activation: Activation,
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub action_dim: usize,
    pub init_log_std: f64,
    /// Multiplier on the initial mean/action head weights.
    pub head_init_scale: f64,
    /// Inputs enter as `(x - input_shift) * input_scale`.
    pub input_shift: f64,
    pub input_scale: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            kind: NetworkKind::GaussianPolicy,
            input_channels: 1,
            input_height: 80,
            input_width: 80,
            conv: vec![ConvSpec::new(16, 8, 4), ConvSpec::new(32, 4, 2)],
            conv_activation: Activation::Relu,
            hidden: vec![256],
            hidden_activation: Activation::Tanh,
            action_dim: 4,
            init_log_std: 0.5f64.ln(),
            head_init_scale: 0.01,
            input_shift: 0.0,
            input_scale: 1.0,
        }
    }
}

/// Convolution stacks for the four supported square input sizes.
pub fn conv_preset(resolution: usize) -> Result<Vec<ConvSpec>, NnError> {
    let c80 = vec![ConvSpec::new(16, 8, 4), ConvSpec::new(32, 4, 2)];
    let c128 = {
        let mut v = c80.clone();
        v.push(ConvSpec::new(64, 2, 1));
        v
    };
    match resolution {
        32 => Ok(vec![ConvSpec::new(4, 2, 4), ConvSpec::new(8, 1, 2)]),
        80 => Ok(c80),
        128 => Ok(c128),
        256 => {
            let mut v = c128;
            v.push(ConvSpec::new(72, 2, 1));
            Ok(v)
        }
        r => Err(NnError::UnsupportedResolution(r)),
    }
}

/// Default Gaussian policy for a square `resolution` input with `channels` planes.
pub fn arch_preset(resolution: usize, channels: usize) -> Result<NetworkSpec, NnError> {
    let spec = NetworkSpec {
        input_channels: channels,
        input_height: resolution,
        input_width: resolution,
        conv: conv_preset(resolution)?,
        ..NetworkSpec::default()
    };
    spec.validate()?;
    Ok(spec)
}

impl NetworkSpec {
    /// Multilayer perceptron over a flat vector input.
    pub fn mlp(kind: NetworkKind, inputs: usize, hidden: Vec<usize>, action_dim: usize) -> Self {
        Self {
            kind,
            input_channels: inputs,
            input_height: 1,
            input_width: 1,
            conv: Vec::new(),
            hidden,
            action_dim,
            ..Self::default()
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_height * self.input_width
    }

    /// `(channels, height, width)` after each conv layer.
    pub fn conv_shapes(&self) -> Result<Vec<(usize, usize, usize)>, NnError> {
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut out = Vec::with_capacity(self.conv.len());
        for (i, c) in self.conv.iter().enumerate() {
            if c.kernel == 0 || c.stride == 0 || c.filters == 0 {
                return Err(NnError::BadSpec(format!("conv layer {i} has a zero parameter")));
            }
            if c.kernel > h || c.kernel > w {
                return Err(NnError::BadSpec(format!("conv layer {i}: kernel {} exceeds input {h}x{w}", c.kernel)));
            }
            h = (h - c.kernel) / c.stride + 1;
            w = (w - c.kernel) / c.stride + 1;
            out.push((c.filters, h, w));
        }
        Ok(out)
    }

    /// Width of the flattened conv output (or the raw input without convs).
    pub fn feature_len(&self) -> Result<usize, NnError> {
        Ok(match self.conv_shapes()?.last() {
            Some((c, h, w)) => c * h * w,
            None => self.input_len(),
        })
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_len() == 0 || self.action_dim == 0 {
            return Err(NnError::BadSpec("empty input or action".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(NnError::BadSpec("zero-width hidden layer".into()));
        }
        if !(self.input_scale.is_finite() && self.input_shift.is_finite()) {
            return Err(NnError::BadSpec("non-finite input transform".into()));
        }
        self.conv_shapes()?;
        Ok(())
    }

    /// FNV-1a over the canonical text form of the network description.
    pub fn hash(&self) -> u64 {
        let text = format!("{self:?}");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_80() {
        let s = arch_preset(80, 1).unwrap();
        assert_eq!(s.conv, vec![ConvSpec::new(16, 8, 4), ConvSpec::new(32, 4, 2)]);
    }

    #[test]
    fn preset_256_has_four_layers() {
        let s = arch_preset(256, 1).unwrap();
        assert_eq!(s.conv.len(), 4);
        assert_eq!(*s.conv.last().unwrap(), ConvSpec::new(72, 2, 1));
        assert_eq!(s.conv[2], ConvSpec::new(64, 2, 1));
    }

    #[test]
    fn preset_32_and_128() {
        assert_eq!(arch_preset(32, 1).unwrap().conv, vec![ConvSpec::new(4, 2, 4), ConvSpec::new(8, 1, 2)]);
        assert_eq!(arch_preset(128, 4).unwrap().conv.len(), 3);
    }

    #[test]
    fn unsupported_resolution() {
        assert!(matches!(arch_preset(64, 1), Err(NnError::UnsupportedResolution(64))));
    }

    #[test]
    fn preset_sizes_positive() {
        let want = [(32, vec![(4, 8, 8), (8, 4, 4)]), (80, vec![(16, 19, 19), (32, 8, 8)])];
        for (r, shapes) in want {
            assert_eq!(arch_preset(r, 1).unwrap().conv_shapes().unwrap(), shapes);
        }
        for r in [128, 256] {
            let s = arch_preset(r, 1).unwrap();
            assert!(s.conv_shapes().unwrap().iter().all(|&(_, h, w)| h >= 1 && w >= 1));
        }
        // 128: 31 -> 14 -> 13; 256: 63 -> 30 -> 29 -> 28
        assert_eq!(arch_preset(128, 1).unwrap().conv_shapes().unwrap()[2], (64, 13, 13));
        assert_eq!(arch_preset(256, 1).unwrap().conv_shapes().unwrap()[3], (72, 28, 28));
    }

    #[test]
    fn hash_tracks_changes() {
        let a = arch_preset(80, 1).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.hidden = vec![128];
        assert_ne!(a.hash(), b.hash());
    }
}
