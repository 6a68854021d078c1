use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Architecture hyperparameters shared by parameters and the forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Output channels of each stride-2 3x3 backbone stage; the last entry is
    /// the feature width `C`.
    pub backbone_channels: Vec<usize>,
    /// Number of classes.
    pub classes: usize,
    /// Hidden width `D` of the inter-attention nonlinearity; `None` means `C`.
    pub inter_dim: Option<usize>,
    pub ablation: Ablation,
}

impl NetConfig {
    /// Five stages `3 -> 16 -> 32 -> 64 -> 96 -> channels`.
    pub fn standard(channels: usize, classes: usize) -> Self {
        Self { backbone_channels: vec![16, 32, 64, 96, channels], classes, inter_dim: None, ablation: Ablation::default() }
    }

    pub fn channels(&self) -> usize {
        *self.backbone_channels.last().expect("validated")
    }

    /// `C' = floor(C / 8)`.
    pub fn attention_dim(&self) -> usize {
        self.channels() / 8
    }

    /// SE bottleneck width, `floor(C / 16)` but at least one.
    pub fn se_hidden(&self) -> usize {
        (self.channels() / 16).max(1)
    }

    pub fn inter_hidden(&self) -> usize {
        self.inter_dim.unwrap_or_else(|| self.channels())
    }

    /// Spatial reduction factor of the backbone.
    pub fn stride(&self) -> usize {
        1 << self.backbone_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.backbone_channels.last().copied().unwrap_or(0);
        if self.backbone_channels.iter().any(|&ch| ch == 0) || c < 8 || c % 8 != 0 {
            return Err(Error::InvalidArgument(format!(
                "backbone channels {:?}: need at least one stage and a final width that is a positive multiple of 8",
                self.backbone_channels
            )));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.inter_dim == Some(0) {
            return Err(Error::InvalidArgument("inter-attention width must be positive".into()));
        }
        Ok(())
    }
}

/// Which boxes of a region set feed the region branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSelection {
    #[default]
    All,
    PrimaryOnly,
    SecondaryOnly,
    WholeImageOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// Learned convex combination of max and average pooling.
    #[default]
    Fused,
    GmpOnly,
    GapOnly,
}

/// Component switches for ablation runs. The default enables everything.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub self_attention: bool,
    pub se_residual: bool,
    pub inter_attention: bool,
    pub regions: RegionSelection,
    pub pooling: PoolingMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            self_attention: true,
            se_residual: true,
            inter_attention: true,
            regions: RegionSelection::All,
            pooling: PoolingMode::Fused,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage<T> {
    /// `[3, 3, Cin, Cout]`.
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    pub stages: Vec<ConvStage<T>>,
}

/// 1x1 projections stored as `[in, out]` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionParams<T> {
    pub w_f: Tensor<T>,
    pub w_g: Tensor<T>,
    pub w_h: Tensor<T>,
    pub w_v: Tensor<T>,
    /// Residual scale, shape `[1]`, zero at initialization.
    pub delta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeResidualParams<T> {
    pub w_squeeze: Tensor<T>,
    pub b_squeeze: Tensor<T>,
    pub w_excite: Tensor<T>,
    pub b_excite: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterAttentionParams<T> {
    /// `[C, D]`, applied to the region in focus.
    pub w_u: Tensor<T>,
    /// `[C, D]`, applied to the context region.
    pub w_u_prime: Tensor<T>,
    pub b_u: Tensor<T>,
    /// `[D, 1]`.
    pub w_m: Tensor<T>,
    pub b_m: Tensor<T>,
    /// `[C, 1]` region-importance projection.
    pub w_alpha: Tensor<T>,
    pub b_alpha: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionClassifierParams<T> {
    /// `[2C, 2]` pooling-fusion logits.
    pub w_omega: Tensor<T>,
    pub b_omega: Tensor<T>,
    /// `[C, classes]`.
    pub w_cls: Tensor<T>,
    pub b_cls: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgNetParams<T> {
    pub backbone: BackboneParams<T>,
    pub self_attn: SelfAttentionParams<T>,
    pub se: SeResidualParams<T>,
    pub inter: InterAttentionParams<T>,
    pub fusion_cls: FusionClassifierParams<T>,
}

fn normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (gain / fan_in as f64).sqrt(), rng)
}

impl<T: Scalar> AgNetParams<T> {
    /// He-normal convolutions, scaled-normal projections, zero biases and
    /// `delta = 0`.
    pub fn init<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, ca, cr, d, k) = (cfg.channels(), cfg.attention_dim(), cfg.se_hidden(), cfg.inter_hidden(), cfg.classes);
        let mut stages = Vec::with_capacity(cfg.backbone_channels.len());
        let mut cin = 3;
        for &cout in &cfg.backbone_channels {
            stages.push(ConvStage { kernel: normal(&[3, 3, cin, cout], 9 * cin, 2.0, rng), bias: Tensor::zeros(&[cout]) });
            cin = cout;
        }
        Ok(Self {
            backbone: BackboneParams { stages },
            self_attn: SelfAttentionParams {
                w_f: normal(&[c, ca], c, 1.0, rng),
                w_g: normal(&[c, ca], c, 1.0, rng),
                w_h: normal(&[c, ca], c, 1.0, rng),
                w_v: normal(&[ca, c], ca, 1.0, rng),
                delta: Tensor::zeros(&[1]),
            },
            se: SeResidualParams {
                w_squeeze: normal(&[c, cr], c, 2.0, rng),
                b_squeeze: Tensor::zeros(&[cr]),
                w_excite: normal(&[cr, c], cr, 1.0, rng),
                b_excite: Tensor::zeros(&[c]),
            },
            inter: InterAttentionParams {
                w_u: normal(&[c, d], c, 1.0, rng),
                w_u_prime: normal(&[c, d], c, 1.0, rng),
                b_u: Tensor::zeros(&[d]),
                w_m: normal(&[d, 1], d, 1.0, rng),
                b_m: Tensor::zeros(&[1]),
                w_alpha: normal(&[c, 1], c, 1.0, rng),
                b_alpha: Tensor::zeros(&[1]),
            },
            fusion_cls: FusionClassifierParams {
                w_omega: normal(&[2 * c, 2], 2 * c, 1.0, rng),
                b_omega: Tensor::zeros(&[2]),
                w_cls: normal(&[c, k], c, 1.0, rng),
                b_cls: Tensor::zeros(&[k]),
            },
        })
    }

    /// Every tensor with its canonical name, in canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.backbone.stages.iter().enumerate() {
            out.push((format!("backbone.stage{i}.kernel"), &s.kernel));
            out.push((format!("backbone.stage{i}.bias"), &s.bias));
        }
        let a = &self.self_attn;
        let e = &self.se;
        let m = &self.inter;
        let f = &self.fusion_cls;
        let rest: [(&str, &Tensor<T>); 18] = [
            ("self_attn.w_f", &a.w_f),
            ("self_attn.w_g", &a.w_g),
            ("self_attn.w_h", &a.w_h),
            ("self_attn.w_v", &a.w_v),
            ("self_attn.delta", &a.delta),
            ("se.w_squeeze", &e.w_squeeze),
            ("se.b_squeeze", &e.b_squeeze),
            ("se.w_excite", &e.w_excite),
            ("se.b_excite", &e.b_excite),
            ("inter.w_u", &m.w_u),
            ("inter.w_u_prime", &m.w_u_prime),
            ("inter.b_u", &m.b_u),
            ("inter.w_m", &m.w_m),
            ("inter.b_m", &m.b_m),
            ("inter.w_alpha", &m.w_alpha),
            ("inter.b_alpha", &m.b_alpha),
            ("fusion.w_omega", &f.w_omega),
            ("fusion.b_omega", &f.b_omega),
        ];
        out.extend(rest.into_iter().map(|(n, t)| (n.to_string(), t)));
        out.push(("classifier.w".to_string(), &f.w_cls));
        out.push(("classifier.b".to_string(), &f.b_cls));
        out
    }

    /// Mutable tensors in the same order as [`Self::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for s in &mut self.backbone.stages {
            out.push(&mut s.kernel);
            out.push(&mut s.bias);
        }
        let a = &mut self.self_attn;
        out.extend([&mut a.w_f, &mut a.w_g, &mut a.w_h, &mut a.w_v, &mut a.delta]);
        let e = &mut self.se;
        out.extend([&mut e.w_squeeze, &mut e.b_squeeze, &mut e.w_excite, &mut e.b_excite]);
        let m = &mut self.inter;
        out.extend([&mut m.w_u, &mut m.w_u_prime, &mut m.b_u, &mut m.w_m, &mut m.b_m, &mut m.w_alpha, &mut m.b_alpha]);
        let f = &mut self.fusion_cls;
        out.extend([&mut f.w_omega, &mut f.b_omega, &mut f.w_cls, &mut f.b_cls]);
        out
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Replaces every tensor, in canonical order, checking shapes.
    pub fn set_tensors(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let mut slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(Error::InvalidArgument(format!("expected {} tensors, got {}", slots.len(), values.len())));
        }
        if let Some((slot, v)) = slots.iter().zip(&values).find(|(s, v)| s.shape() != v.shape()) {
            return Err(Error::Shape { op: "set_tensors", detail: format!("{:?} vs {:?}", slot.shape(), v.shape()) });
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            **slot = v;
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> AgNetParams<U> {
        let stages =
            self.backbone.stages.iter().map(|s| ConvStage { kernel: s.kernel.cast(), bias: s.bias.cast() }).collect();
        let a = &self.self_attn;
        let e = &self.se;
        let m = &self.inter;
        let f = &self.fusion_cls;
        AgNetParams {
            backbone: BackboneParams { stages },
            self_attn: SelfAttentionParams {
                w_f: a.w_f.cast(),
                w_g: a.w_g.cast(),
                w_h: a.w_h.cast(),
                w_v: a.w_v.cast(),
                delta: a.delta.cast(),
            },
            se: SeResidualParams {
                w_squeeze: e.w_squeeze.cast(),
                b_squeeze: e.b_squeeze.cast(),
                w_excite: e.w_excite.cast(),
                b_excite: e.b_excite.cast(),
            },
            inter: InterAttentionParams {
                w_u: m.w_u.cast(),
                w_u_prime: m.w_u_prime.cast(),
                b_u: m.b_u.cast(),
                w_m: m.w_m.cast(),
                b_m: m.b_m.cast(),
                w_alpha: m.w_alpha.cast(),
                b_alpha: m.b_alpha.cast(),
            },
            fusion_cls: FusionClassifierParams {
                w_omega: f.w_omega.cast(),
                b_omega: f.b_omega.cast(),
                w_cls: f.w_cls.cast(),
                b_cls: f.b_cls.cast(),
            },
        }
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> ParamVars<'t, T> {
        let leaf = |t: &Tensor<T>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let a = &self.self_attn;
        let e = &self.se;
        let m = &self.inter;
        let f = &self.fusion_cls;
        ParamVars {
            backbone: self.backbone.stages.iter().map(|s| (leaf(&s.kernel), leaf(&s.bias))).collect(),
            self_attn: SelfAttentionVars { w_f: leaf(&a.w_f), w_g: leaf(&a.w_g), w_h: leaf(&a.w_h), w_v: leaf(&a.w_v), delta: leaf(&a.delta) },
            se: SeVars {
                w_squeeze: leaf(&e.w_squeeze),
                b_squeeze: leaf(&e.b_squeeze),
                w_excite: leaf(&e.w_excite),
                b_excite: leaf(&e.b_excite),
            },
            inter: InterVars {
                w_u: leaf(&m.w_u),
                w_u_prime: leaf(&m.w_u_prime),
                b_u: leaf(&m.b_u),
                w_m: leaf(&m.w_m),
                b_m: leaf(&m.b_m),
                w_alpha: leaf(&m.w_alpha),
                b_alpha: leaf(&m.b_alpha),
            },
            fusion: FusionVars { w_omega: leaf(&f.w_omega), b_omega: leaf(&f.b_omega), w_cls: leaf(&f.w_cls), b_cls: leaf(&f.b_cls) },
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelfAttentionVars<'t, T: Scalar> {
    pub w_f: Var<'t, T>,
    pub w_g: Var<'t, T>,
    pub w_h: Var<'t, T>,
    pub w_v: Var<'t, T>,
    pub delta: Var<'t, T>,
}

#[derive(Debug, Clone, Copy)]
pub struct SeVars<'t, T: Scalar> {
    pub w_squeeze: Var<'t, T>,
    pub b_squeeze: Var<'t, T>,
    pub w_excite: Var<'t, T>,
    pub b_excite: Var<'t, T>,
}

#[derive(Debug, Clone, Copy)]
pub struct InterVars<'t, T: Scalar> {
    pub w_u: Var<'t, T>,
    pub w_u_prime: Var<'t, T>,
    pub b_u: Var<'t, T>,
    pub w_m: Var<'t, T>,
    pub b_m: Var<'t, T>,
    pub w_alpha: Var<'t, T>,
    pub b_alpha: Var<'t, T>,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars<'t, T: Scalar> {
    pub w_omega: Var<'t, T>,
    pub b_omega: Var<'t, T>,
    pub w_cls: Var<'t, T>,
    pub b_cls: Var<'t, T>,
}

/// Tape handles for every parameter of [`AgNetParams`].
#[derive(Debug, Clone)]
pub struct ParamVars<'t, T: Scalar> {
    pub backbone: Vec<(Var<'t, T>, Var<'t, T>)>,
    pub self_attn: SelfAttentionVars<'t, T>,
    pub se: SeVars<'t, T>,
    pub inter: InterVars<'t, T>,
    pub fusion: FusionVars<'t, T>,
}

impl<'t, T: Scalar> ParamVars<'t, T> {
    /// Handles in canonical order, matching [`AgNetParams::named`].
    pub fn ordered(&self) -> Vec<Var<'t, T>> {
        let mut out: Vec<Var<'t, T>> = self.backbone.iter().flat_map(|&(k, b)| [k, b]).collect();
        let a = &self.self_attn;
        out.extend([a.w_f, a.w_g, a.w_h, a.w_v, a.delta]);
        let e = &self.se;
        out.extend([e.w_squeeze, e.b_squeeze, e.w_excite, e.b_excite]);
        let m = &self.inter;
        out.extend([m.w_u, m.w_u_prime, m.b_u, m.w_m, m.b_m, m.w_alpha, m.b_alpha]);
        let f = &self.fusion;
        out.extend([f.w_omega, f.b_omega, f.w_cls, f.b_cls]);
        out
    }

    /// Rebuilds handles from a canonical-order list (inverse of [`Self::ordered`]).
    pub fn from_ordered(stages: usize, vars: &[Var<'t, T>]) -> Result<Self> {
        let expected = 2 * stages + 20;
        if vars.len() != expected {
            return Err(Error::InvalidArgument(format!("expected {expected} parameter handles, got {}", vars.len())));
        }
        let backbone = (0..stages).map(|i| (vars[2 * i], vars[2 * i + 1])).collect();
        let r = &vars[2 * stages..];
        Ok(Self {
            backbone,
            self_attn: SelfAttentionVars { w_f: r[0], w_g: r[1], w_h: r[2], w_v: r[3], delta: r[4] },
            se: SeVars { w_squeeze: r[5], b_squeeze: r[6], w_excite: r[7], b_excite: r[8] },
            inter: InterVars { w_u: r[9], w_u_prime: r[10], b_u: r[11], w_m: r[12], b_m: r[13], w_alpha: r[14], b_alpha: r[15] },
            fusion: FusionVars { w_omega: r[16], b_omega: r[17], w_cls: r[18], b_cls: r[19] },
        })
    }
}
