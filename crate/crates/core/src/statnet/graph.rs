//! Network description: scale branches of down/up tubes, a final evaluator,
//! the parameter layout table and seeded initialization.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sampler::ScaleSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    ConvDown,
    TConvUp,
    Conv1x1,
    Relu,
    Concat,
}

impl LayerKind {
    pub fn has_params(self) -> bool {
        matches!(self, Self::Conv3x3 | Self::ConvDown | Self::TConvUp | Self::Conv1x1)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::Conv3x3 => "conv3x3",
            Self::ConvDown => "conv_down",
            Self::TConvUp => "tconv_up",
            Self::Conv1x1 => "conv1x1",
            Self::Relu => "relu",
            Self::Concat => "concat",
        }
    }
}

/// Whether a layer runs on canonical forms or on plain samples in the
/// statistical pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Statistical,
    Deterministic,
}

/// Where the statistical tensors are mixed into per-frame features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixPoint {
    AfterDownTube,
    AfterUpTube,
}

impl MixPoint {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AfterDownTube => "after_dt",
            Self::AfterUpTube => "after_ut",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "after_dt" => Ok(Self::AfterDownTube),
            "after_ut" => Ok(Self::AfterUpTube),
            other => Err(Error::config(format!("unknown mix point '{other}' (after_dt | after_ut)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub mode: Mode,
    /// Index into the parameter layout table.
    pub slot: Option<usize>,
}

/// One entry of the parameter layout table. Weights come first, then biases.
/// Convolution weights are `[co][ci][k][k]`; transposed-convolution weights
/// are `[co][ky][kx][ci]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub weights: usize,
    pub bias: usize,
    pub shape: [usize; 4],
    pub fan_in: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.weights + self.bias
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.weights
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.offset + self.weights..self.offset + self.weights + self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownBlock {
    pub conv: LayerSpec,
    pub relu: LayerSpec,
    pub down: LayerSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterBlock {
    pub conv: LayerSpec,
    pub relu: LayerSpec,
}

/// Up block `l` pairs with down block `l` through the skip connection.
#[derive(Debug, Clone, PartialEq)]
pub struct UpBlock {
    pub tconv: LayerSpec,
    pub concat: LayerSpec,
    pub conv: LayerSpec,
    pub relu: LayerSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub scale: ScaleSpec,
    pub down: Vec<DownBlock>,
    pub center: CenterBlock,
    /// Indexed like `down`; executed in reverse.
    pub up: Vec<UpBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalEvaluator {
    pub concat: LayerSpec,
    pub conv: LayerSpec,
    pub relu: LayerSpec,
    pub classifier: LayerSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphConfig {
    pub scales: Vec<ScaleSpec>,
    pub base_channels: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub mix_point: MixPoint,
    /// `false` builds a plain per-frame network (every layer deterministic).
    pub statistical: bool,
    /// Reuse the first branch's center block in every branch.
    pub share_center: bool,
    pub seed: u64,
}

impl GraphConfig {
    pub fn msunet(scales: Vec<ScaleSpec>, base_channels: usize, depth: usize, num_classes: usize, mix_point: MixPoint) -> Self {
        Self { scales, base_channels, depth, num_classes, mix_point, statistical: true, share_center: false, seed: 0 }
    }

    pub fn unet(depth: usize, base_channels: usize, num_classes: usize) -> Self {
        Self {
            scales: vec![ScaleSpec { patch: 1, span: 1, stride: 1, dim: 1 }],
            base_channels,
            depth,
            num_classes,
            mix_point: MixPoint::AfterDownTube,
            statistical: false,
            share_center: false,
            seed: 0,
        }
    }

    /// Down blocks in the branch of scale `i`: the largest patch gets
    /// `depth - 1`, each halving of the patch adds one.
    pub fn down_steps(&self, i: usize) -> usize {
        let max = self.scales.iter().map(|s| s.patch).max().unwrap_or(1);
        (self.depth - 1) + (max / self.scales[i].patch).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("network needs at least one scale"));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.base_channels < 2 || self.num_classes == 0 {
            return Err(Error::config("base channels must be at least 2 and classes positive"));
        }
        let max = self.scales.iter().map(|s| s.patch).max().unwrap_or(1);
        for s in &self.scales {
            s.validate()?;
            if max % s.patch != 0 || !(max / s.patch).is_power_of_two() {
                return Err(Error::config(format!(
                    "patch sizes {} and {} are not related by a power of two",
                    s.patch, max
                )));
            }
            if s.span != self.scales[0].span {
                return Err(Error::config("all scales must share the snippet span"));
            }
        }
        if self.share_center {
            let k0 = self.down_steps(0);
            if (0..self.scales.len()).any(|i| self.down_steps(i) != k0) {
                return Err(Error::config("a shared center block needs equal depth in every branch"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let scales: Vec<String> = self.scales.iter().map(|s| format!("{}:{}:{}", s.patch, s.span, s.dim)).collect();
        let _ = writeln!(s, "scales={}", scales.join(","));
        let _ = writeln!(s, "base_channels={}", self.base_channels);
        let _ = writeln!(s, "depth={}", self.depth);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "mix_point={}", self.mix_point.as_str());
        let _ = writeln!(s, "statistical={}", self.statistical);
        let _ = writeln!(s, "share_center={}", self.share_center);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = GraphConfig::unet(1, 2, 2);
        let mut seen = 0usize;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::config(format!("malformed line '{line}'")))?;
            let bad = |_| Error::config(format!("bad value for {k}: '{v}'"));
            match k {
                "scales" => {
                    cfg.scales = v
                        .split(',')
                        .map(|p| {
                            let f: Vec<usize> = p.split(':').map(|x| x.parse::<usize>()).collect::<Result<_, _>>().map_err(bad)?;
                            if f.len() != 3 {
                                return Err(Error::config(format!("scale '{p}' must be patch:span:dim")));
                            }
                            Ok(ScaleSpec { patch: f[0], span: f[1], stride: f[0], dim: f[2] })
                        })
                        .collect::<Result<_>>()?
                }
                "base_channels" => cfg.base_channels = v.parse().map_err(bad)?,
                "depth" => cfg.depth = v.parse().map_err(bad)?,
                "num_classes" => cfg.num_classes = v.parse().map_err(bad)?,
                "mix_point" => cfg.mix_point = MixPoint::parse(v)?,
                "statistical" => cfg.statistical = v.parse().map_err(|_| Error::config(format!("bad value for {k}: '{v}'")))?,
                "share_center" => cfg.share_center = v.parse().map_err(|_| Error::config(format!("bad value for {k}: '{v}'")))?,
                "seed" => cfg.seed = v.parse().map_err(bad)?,
                other => return Err(Error::config(format!("unknown network key '{other}'"))),
            }
            seen += 1;
        }
        if seen < 8 {
            return Err(Error::config("network description is incomplete"));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub config: GraphConfig,
    pub branches: Vec<Branch>,
    pub final_eval: FinalEvaluator,
    pub layout: Vec<ParamSlot>,
    pub params: Vec<f64>,
}

struct Builder {
    layout: Vec<ParamSlot>,
    total: usize,
}

impl Builder {
    fn layer(&mut self, name: String, kind: LayerKind, cin: usize, cout: usize, mode: Mode) -> LayerSpec {
        let slot = if kind.has_params() {
            let (shape, fan_in) = match kind {
                LayerKind::Conv3x3 | LayerKind::ConvDown => ([cout, cin, 3, 3], cin * 9),
                LayerKind::Conv1x1 => ([cout, cin, 1, 1], cin),
                LayerKind::TConvUp => ([cout, 2, 2, cin], cin),
                _ => unreachable!(),
            };
            let weights = shape.iter().product();
            self.layout.push(ParamSlot { name: name.clone(), offset: self.total, weights, bias: cout, shape, fan_in });
            self.total += weights + cout;
            Some(self.layout.len() - 1)
        } else {
            None
        };
        LayerSpec { name, kind, in_channels: cin, out_channels: cout, mode, slot }
    }

    fn shared(&self, from: &LayerSpec, name: String, mode: Mode) -> LayerSpec {
        LayerSpec { name, mode, ..from.clone() }
    }
}

impl NetworkGraph {
    pub fn build(config: GraphConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { layout: Vec::new(), total: 0 };
        let c0 = config.base_channels;
        let stat = |stat_region: bool| if config.statistical && stat_region { Mode::Statistical } else { Mode::Deterministic };
        let up_stat = config.mix_point == MixPoint::AfterUpTube;
        let mut branches: Vec<Branch> = Vec::new();
        for (i, scale) in config.scales.iter().enumerate() {
            let k = config.down_steps(i);
            let width = |l: usize| c0 << l;
            let mut down = Vec::with_capacity(k);
            let mut cin = 1;
            for l in 0..k {
                let p = format!("s{i}.down{l}");
                let conv = b.layer(format!("{p}.conv3x3"), LayerKind::Conv3x3, cin, width(l), stat(true));
                let relu = b.layer(format!("{p}.relu"), LayerKind::Relu, width(l), width(l), stat(true));
                let dn = b.layer(format!("{p}.conv_down"), LayerKind::ConvDown, width(l), width(l + 1), stat(true));
                down.push(DownBlock { conv, relu, down: dn });
                cin = width(l + 1);
            }
            let ck = width(k);
            let p = format!("s{i}.center");
            let center = match (&config.share_center, branches.first()) {
                (true, Some(first)) => CenterBlock {
                    conv: b.shared(&first.center.conv, format!("{p}.conv3x3"), stat(up_stat)),
                    relu: b.shared(&first.center.relu, format!("{p}.relu"), stat(up_stat)),
                },
                _ => CenterBlock {
                    conv: b.layer(format!("{p}.conv3x3"), LayerKind::Conv3x3, cin, ck, stat(up_stat)),
                    relu: b.layer(format!("{p}.relu"), LayerKind::Relu, ck, ck, stat(up_stat)),
                },
            };
            let mut up = Vec::with_capacity(k);
            for l in 0..k {
                let p = format!("s{i}.up{l}");
                let tconv = b.layer(format!("{p}.tconv_up"), LayerKind::TConvUp, width(l + 1), width(l), stat(up_stat));
                let concat = b.layer(format!("{p}.concat"), LayerKind::Concat, 2 * width(l), 2 * width(l), stat(up_stat));
                let conv = b.layer(format!("{p}.conv3x3"), LayerKind::Conv3x3, 2 * width(l), width(l), stat(up_stat));
                let relu = b.layer(format!("{p}.relu"), LayerKind::Relu, width(l), width(l), stat(up_stat));
                up.push(UpBlock { tconv, concat, conv, relu });
            }
            branches.push(Branch { scale: *scale, down, center, up });
        }
        let fe_in = branches.len() * c0;
        let det = Mode::Deterministic;
        let final_eval = FinalEvaluator {
            concat: b.layer("final.concat".into(), LayerKind::Concat, fe_in, fe_in, det),
            conv: b.layer("final.conv3x3".into(), LayerKind::Conv3x3, fe_in, c0, det),
            relu: b.layer("final.relu".into(), LayerKind::Relu, c0, c0, det),
            classifier: b.layer("final.conv1x1".into(), LayerKind::Conv1x1, c0, config.num_classes, det),
        };
        let mut graph = NetworkGraph { config, branches, final_eval, layout: b.layout, params: vec![0.0; b.total] };
        graph.initialize(graph.config.seed);
        Ok(graph)
    }

    /// He-uniform weights from a seeded generator, zero biases.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for slot in &self.layout {
            let bound = (6.0 / slot.fan_in as f64).sqrt();
            for w in &mut self.params[slot.weight_range()] {
                *w = rng.random_range(-bound..bound);
            }
            self.params[slot.bias_range()].fill(0.0);
        }
    }

    /// Same weights, different span or basis size per scale. Patch sizes
    /// must stay as built.
    pub fn with_scales(&self, scales: Vec<ScaleSpec>) -> Result<Self> {
        if scales.len() != self.config.scales.len() || scales.iter().zip(&self.config.scales).any(|(a, b)| a.patch != b.patch) {
            return Err(Error::config("replacement scales must keep the patch sizes of the network"));
        }
        let mut config = self.config.clone();
        config.scales = scales;
        config.validate()?;
        let mut g = self.clone();
        for (br, s) in g.branches.iter_mut().zip(&config.scales) {
            br.scale = *s;
        }
        g.config = config;
        Ok(g)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Every layer in execution order.
    pub fn layers(&self) -> Vec<&LayerSpec> {
        let mut out = Vec::new();
        for br in &self.branches {
            for d in &br.down {
                out.extend([&d.conv, &d.relu, &d.down]);
            }
            out.extend([&br.center.conv, &br.center.relu]);
            for u in br.up.iter().rev() {
                out.extend([&u.tconv, &u.concat, &u.conv, &u.relu]);
            }
        }
        let f = &self.final_eval;
        out.extend([&f.concat, &f.conv, &f.relu, &f.classifier]);
        out
    }

    pub fn layout_table(&self) -> String {
        let mut s = String::from("name,offset,weights,bias,shape\n");
        for p in &self.layout {
            let _ = writeln!(s, "{},{},{},{},{}x{}x{}x{}", p.name, p.offset, p.weights, p.bias, p.shape[0], p.shape[1], p.shape[2], p.shape[3]);
        }
        s
    }

    pub fn slot(&self, layer: &LayerSpec) -> &ParamSlot {
        &self.layout[layer.slot.expect("layer without parameters")]
    }
}
