//! The 3D FPN backbone, the pyramid-concatenation voxel representation, the
//! projection head, and the voxel-wise linear and non-linear heads.
//!
//! Parameters live in an ordered name → tensor map. Names are dotted paths
//! (`encoder.stage0.conv1.weight`, `projector.linear2.bias`, ...) and are the
//! keys used by checkpoints. A forward pass binds the map into a [`Graph`]
//! and runs on the resulting [`ParamVars`].

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

pub type Params<T = f32> = IndexMap<String, Tensor<T>>;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpnConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub convs_per_stage: usize,
    pub projector_hidden: usize,
    pub projection_dim: usize,
    /// Levels concatenated into the representation; `None` means all.
    pub representation_levels: Option<Vec<usize>>,
}

impl Default for FpnConfig {
    /// The desk-scale configuration.
    fn default() -> Self {
        FpnConfig {
            levels: 3,
            base_channels: 8,
            convs_per_stage: 2,
            projector_hidden: 512,
            projection_dim: 128,
            representation_levels: None,
        }
    }
}

impl FpnConfig {
    /// Six levels with 16 base channels.
    pub fn full_scale() -> Self {
        FpnConfig {
            levels: 6,
            base_channels: 16,
            ..FpnConfig::default()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Selected levels, ascending and de-duplicated.
    pub fn rep_levels(&self) -> Vec<usize> {
        match &self.representation_levels {
            None => (0..self.levels).collect(),
            Some(l) => {
                let mut l = l.clone();
                l.sort_unstable();
                l.dedup();
                l
            }
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.levels == 0 {
            errs.push("model.levels must be >= 1".into());
        }
        if self.base_channels == 0 {
            errs.push("model.base_channels must be >= 1".into());
        }
        if self.convs_per_stage == 0 {
            errs.push("model.convs_per_stage must be >= 1".into());
        }
        if self.projector_hidden == 0 || self.projection_dim == 0 {
            errs.push("model.projector_hidden and model.projection_dim must be >= 1".into());
        }
        if let Some(l) = &self.representation_levels {
            if l.is_empty() {
                errs.push("model.representation_levels must not be empty".into());
            }
            if let Some(bad) = l.iter().find(|&&v| v >= self.levels) {
                errs.push(format!("model.representation_levels: level {bad} >= levels {}", self.levels));
            }
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// Extents must halve cleanly `levels - 1` times.
    pub fn check_extents(&self, extents: [usize; 3]) -> Result<()> {
        let f = 1usize << (self.levels - 1);
        if extents.iter().any(|&e| e == 0 || e % f != 0) {
            return Err(Error::Config(format!(
                "patch extents {extents:?} are not divisible by 2^(levels-1) = {f}"
            )));
        }
        Ok(())
    }
}

/// Length of a voxel's representation vector.
pub fn representation_dim(config: &FpnConfig) -> usize {
    config.rep_levels().iter().map(|&l| config.channels(l)).sum()
}

pub fn param_count<T: Element>(params: &Params<T>) -> usize {
    params.values().map(|t| t.data().len()).sum()
}

/// Parameters whose name starts with `prefix`.
pub fn param_count_with_prefix<T: Element>(params: &Params<T>, prefix: &str) -> usize {
    params
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(_, t)| t.data().len())
        .sum()
}

// ---- initialization ----

fn he<T: Element>(shape: Vec<usize>, gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape, (gain / fan_in as f64).sqrt(), rng)
}

fn conv_w<T: Element>(out: usize, inp: usize, k: usize, gain: f64, rng: &mut impl Rng) -> Tensor<T> {
    he(vec![out, inp, k, k, k], gain, rng)
}

fn put_norm<T: Element>(p: &mut Params<T>, prefix: &str, ch: usize) {
    p.insert(format!("{prefix}.scale"), Tensor::full(vec![ch], T::one()));
    p.insert(format!("{prefix}.shift"), Tensor::zeros(vec![ch]));
}

/// He-initialized backbone; norm scales 1, shifts and biases 0.
pub fn init_backbone<T: Element>(config: &FpnConfig, rng: &mut impl Rng) -> Result<Params<T>> {
    config.check()?;
    let mut p = Params::new();
    for l in 0..config.levels {
        let c = config.channels(l);
        if l > 0 {
            p.insert(format!("encoder.down{}.conv.weight", l - 1), conv_w(c, config.channels(l - 1), 3, 2.0, rng));
            put_norm(&mut p, &format!("encoder.down{}.norm", l - 1), c);
        }
        for j in 0..config.convs_per_stage {
            let inp = if l == 0 && j == 0 { 1 } else { c };
            p.insert(format!("encoder.stage{l}.conv{j}.weight"), conv_w(c, inp, 3, 2.0, rng));
            put_norm(&mut p, &format!("encoder.stage{l}.norm{j}"), c);
        }
    }
    for l in (0..config.levels).rev() {
        let c = config.channels(l);
        p.insert(format!("decoder.level{l}.lateral.weight"), conv_w(c, c, 1, 1.0, rng));
        p.insert(format!("decoder.level{l}.lateral.bias"), Tensor::zeros(vec![c]));
        if l + 1 < config.levels {
            p.insert(format!("decoder.level{l}.reduce.weight"), conv_w(c, config.channels(l + 1), 1, 1.0, rng));
            p.insert(format!("decoder.level{l}.block.conv.weight"), conv_w(c, c, 3, 2.0, rng));
            put_norm(&mut p, &format!("decoder.level{l}.block.norm"), c);
        }
    }
    Ok(p)
}

/// Three-layer perceptron `dim → hidden → hidden → projection_dim`.
pub fn init_projector<T: Element>(config: &FpnConfig, rng: &mut impl Rng) -> Params<T> {
    let dims = [
        representation_dim(config),
        config.projector_hidden,
        config.projector_hidden,
        config.projection_dim,
    ];
    let mut p = Params::new();
    for i in 0..3 {
        let gain = if i < 2 { 2.0 } else { 1.0 };
        p.insert(format!("projector.linear{i}.weight"), he(vec![dims[i + 1], dims[i]], gain, rng));
        p.insert(format!("projector.linear{i}.bias"), Tensor::zeros(vec![dims[i + 1]]));
    }
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Nonlinear,
}

/// One zero-initialized 1×1×1 classifier per selected level; the bias lives
/// only on the finest selected level.
pub fn init_linear_head<T: Element>(config: &FpnConfig, num_classes: usize) -> Params<T> {
    let levels = config.rep_levels();
    let mut p = Params::new();
    for &l in &levels {
        p.insert(
            format!("head.level{l}.weight"),
            Tensor::zeros(vec![num_classes, config.channels(l), 1, 1, 1]),
        );
    }
    p.insert(format!("head.level{}.bias", levels[0]), Tensor::zeros(vec![num_classes]));
    p
}

/// Decoder-shaped head where every convolution is 1×1×1.
pub fn init_nonlinear_head<T: Element>(config: &FpnConfig, num_classes: usize, rng: &mut impl Rng) -> Params<T> {
    let levels = config.rep_levels();
    let mut p = Params::new();
    for w in levels.windows(2).rev() {
        let (fine, coarse) = (w[0], w[1]);
        let c = config.channels(fine);
        p.insert(format!("head.level{fine}.reduce.weight"), conv_w(c, config.channels(coarse), 1, 2.0, rng));
        p.insert(format!("head.level{fine}.reduce.bias"), Tensor::zeros(vec![c]));
        p.insert(format!("head.level{fine}.fuse.weight"), conv_w(c, 2 * c, 1, 2.0, rng));
        p.insert(format!("head.level{fine}.fuse.bias"), Tensor::zeros(vec![c]));
    }
    p.insert("head.out.weight".into(), conv_w(num_classes, config.channels(levels[0]), 1, 1.0, rng));
    p.insert("head.out.bias".into(), Tensor::zeros(vec![num_classes]));
    p
}

pub fn init_head<T: Element>(kind: HeadKind, config: &FpnConfig, num_classes: usize, rng: &mut impl Rng) -> Params<T> {
    match kind {
        HeadKind::Linear => init_linear_head(config, num_classes),
        HeadKind::Nonlinear => init_nonlinear_head(config, num_classes, rng),
    }
}

// ---- binding ----

/// Parameters bound into a graph, by name.
#[derive(Clone, Debug, Default)]
pub struct ParamVars(IndexMap<String, Var>);

impl ParamVars {
    /// Adds every parameter as a leaf; `trainable = false` makes them
    /// constants so no gradient is computed for them.
    pub fn bind<T: Element>(&mut self, g: &mut Graph<T>, params: &Params<T>, trainable: bool) {
        for (name, t) in params {
            let v = g.leaf(t.clone(), trainable);
            self.0.insert(name.clone(), v);
        }
    }

    pub fn new<T: Element>(g: &mut Graph<T>, params: &Params<T>, trainable: bool) -> Self {
        let mut v = ParamVars::default();
        v.bind(g, params, trainable);
        v
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars(iter.into_iter().collect())
    }
}

// ---- forward ----

fn conv_norm_relu<T: Element>(
    g: &mut Graph<T>,
    p: &ParamVars,
    x: Var,
    conv: &str,
    norm: &str,
    stride: usize,
) -> Result<Var> {
    let y = g.conv3d(x, p.get(&format!("{conv}.weight"))?, None, [stride; 3], [1; 3])?;
    let y = g.instance_norm3d(y, p.get(&format!("{norm}.scale"))?, p.get(&format!("{norm}.shift"))?, NORM_EPS)?;
    g.relu(y)
}

fn conv1<T: Element>(g: &mut Graph<T>, p: &ParamVars, x: Var, prefix: &str, bias: bool) -> Result<Var> {
    let b = if bias { Some(p.get(&format!("{prefix}.bias"))?) } else { None };
    g.conv3d(x, p.get(&format!("{prefix}.weight"))?, b, [1; 3], [0; 3])
}

/// Shapes of the maps [`fpn_forward`] returns, without computing them.
pub fn pyramid_shapes(config: &FpnConfig, batch: usize, extents: [usize; 3]) -> Result<Vec<[usize; 5]>> {
    config.check()?;
    config.check_extents(extents)?;
    Ok((0..config.levels)
        .map(|l| {
            let [x, y, z] = extents.map(|e| e >> l);
            [batch, config.channels(l), x, y, z]
        })
        .collect())
}

/// Runs the backbone on `[B, 1, X, Y, Z]` patches and returns the decoder
/// maps, finest first: `maps[l]` is `[B, C0·2^l, X/2^l, Y/2^l, Z/2^l]`.
pub fn fpn_forward<T: Element>(g: &mut Graph<T>, p: &ParamVars, config: &FpnConfig, input: Var) -> Result<Vec<Var>> {
    config.check()?;
    let shape = g.shape(input).to_vec();
    if shape.len() != 5 || shape[1] != 1 {
        return Err(Error::contract(format!("fpn_forward expects [B, 1, X, Y, Z], got {shape:?}")));
    }
    config.check_extents([shape[2], shape[3], shape[4]])?;

    let mut skips = Vec::with_capacity(config.levels);
    let mut x = input;
    for l in 0..config.levels {
        if l > 0 {
            x = conv_norm_relu(g, p, x, &format!("encoder.down{}.conv", l - 1), &format!("encoder.down{}.norm", l - 1), 2)?;
        }
        for j in 0..config.convs_per_stage {
            x = conv_norm_relu(
                g,
                p,
                x,
                &format!("encoder.stage{l}.conv{j}"),
                &format!("encoder.stage{l}.norm{j}"),
                1,
            )?;
        }
        skips.push(x);
    }

    let top = config.levels - 1;
    let mut maps = vec![conv1(g, p, skips[top], &format!("decoder.level{top}.lateral"), true)?];
    for l in (0..top).rev() {
        let coarse = *maps.last().expect("non-empty");
        let lateral = conv1(g, p, skips[l], &format!("decoder.level{l}.lateral"), true)?;
        let reduced = conv1(g, p, coarse, &format!("decoder.level{l}.reduce"), false)?;
        let up = g.upsample3d(reduced, [2; 3])?;
        let sum = g.add(lateral, up)?;
        let out = conv_norm_relu(
            g,
            p,
            sum,
            &format!("decoder.level{l}.block.conv"),
            &format!("decoder.level{l}.block.norm"),
            1,
        )?;
        maps.push(out);
    }
    maps.reverse();
    Ok(maps)
}

/// Representations `[N, dim]` of voxels given as `(patch, local voxel)`:
/// per selected level, the cell `floor(voxel / 2^l)`, concatenated in
/// ascending level order.
pub fn gather_representation<T: Element>(
    g: &mut Graph<T>,
    maps: &[Var],
    config: &FpnConfig,
    voxels: &[(usize, [usize; 3])],
) -> Result<Var> {
    let mut parts = Vec::new();
    for l in config.rep_levels() {
        let map = *maps
            .get(l)
            .ok_or_else(|| Error::contract(format!("pyramid has no level {l}")))?;
        let s = g.shape(map);
        let full = [s[2] << l, s[3] << l, s[4] << l];
        let mut index = Vec::with_capacity(voxels.len());
        for &(b, v) in voxels {
            if (0..3).any(|a| v[a] >= full[a]) {
                return Err(Error::contract(format!("voxel {v:?} outside patch extents {full:?}")));
            }
            index.push([b, v[0] >> l, v[1] >> l, v[2] >> l]);
        }
        parts.push(g.gather_voxels(map, &index)?);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts, 1)
    }
}

/// The same vector as [`gather_representation`] for one voxel, read
/// directly from pyramid tensors.
pub fn representation_at<T: Element>(
    maps: &[Tensor<T>],
    config: &FpnConfig,
    patch: usize,
    voxel: [usize; 3],
) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for l in config.rep_levels() {
        let m = maps
            .get(l)
            .ok_or_else(|| Error::contract(format!("pyramid has no level {l}")))?;
        let s = m.shape();
        let cell = voxel.map(|v| v >> l);
        if patch >= s[0] || (0..3).any(|a| cell[a] >= s[2 + a]) {
            return Err(Error::contract(format!("voxel {voxel:?} of patch {patch} outside the pyramid")));
        }
        for c in 0..s[1] {
            out.push(m.at(&[patch, c, cell[0], cell[1], cell[2]]));
        }
    }
    Ok(out)
}

/// Projection head: linear → relu → linear → relu → linear → l2-normalize.
pub fn project<T: Element>(g: &mut Graph<T>, p: &ParamVars, h: Var) -> Result<Var> {
    let mut x = h;
    for i in 0..3 {
        x = g.linear(
            x,
            p.get(&format!("projector.linear{i}.weight"))?,
            Some(p.get(&format!("projector.linear{i}.bias"))?),
        )?;
        if i < 2 {
            x = g.relu(x)?;
        }
    }
    g.l2_normalize(x)
}

/// Per-level 1×1×1 logits, nearest-upsampled to full resolution and summed.
pub fn linear_head_forward<T: Element>(g: &mut Graph<T>, p: &ParamVars, config: &FpnConfig, maps: &[Var]) -> Result<Var> {
    let levels = config.rep_levels();
    let mut total: Option<Var> = None;
    for (i, &l) in levels.iter().enumerate() {
        let logits = conv1(g, p, maps[l], &format!("head.level{l}"), i == 0)?;
        let up = if l > 0 { g.upsample3d(logits, [1 << l; 3])? } else { logits };
        total = Some(match total {
            None => up,
            Some(t) => g.add(t, up)?,
        });
    }
    Ok(total.expect("at least one level"))
}

/// Coarse-to-fine pathway of 1×1×1 convs: reduce the coarser map, upsample,
/// concatenate the finer map, fuse; a final 1×1×1 conv gives the logits.
pub fn nonlinear_head_forward<T: Element>(
    g: &mut Graph<T>,
    p: &ParamVars,
    config: &FpnConfig,
    maps: &[Var],
) -> Result<Var> {
    let levels = config.rep_levels();
    let mut x = maps[*levels.last().expect("non-empty")];
    for w in levels.windows(2).rev() {
        let (fine, coarse) = (w[0], w[1]);
        let r = conv1(g, p, x, &format!("head.level{fine}.reduce"), true)?;
        let r = g.relu(r)?;
        let up = g.upsample3d(r, [1 << (coarse - fine); 3])?;
        let cat = g.concat(&[up, maps[fine]], 1)?;
        let f = conv1(g, p, cat, &format!("head.level{fine}.fuse"), true)?;
        x = g.relu(f)?;
    }
    let logits = conv1(g, p, x, "head.out", true)?;
    if levels[0] > 0 {
        g.upsample3d(logits, [1 << levels[0]; 3])
    } else {
        Ok(logits)
    }
}

pub fn head_forward<T: Element>(
    kind: HeadKind,
    g: &mut Graph<T>,
    p: &ParamVars,
    config: &FpnConfig,
    maps: &[Var],
) -> Result<Var> {
    match kind {
        HeadKind::Linear => linear_head_forward(g, p, config, maps),
        HeadKind::Nonlinear => nonlinear_head_forward(g, p, config, maps),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn representation_dims() {
        assert_eq!(representation_dim(&FpnConfig::full_scale()), 1008);
        let one = FpnConfig { levels: 1, base_channels: 16, ..FpnConfig::default() };
        assert_eq!(representation_dim(&one), 16);
        let ablation = FpnConfig {
            representation_levels: Some(vec![0]),
            ..FpnConfig::full_scale()
        };
        assert_eq!(representation_dim(&ablation), 16);
    }

    #[test]
    fn config_validation() {
        let bad = FpnConfig {
            representation_levels: Some(vec![3]),
            ..FpnConfig::default()
        };
        assert!(bad.check().is_err());
        assert!(FpnConfig::default().check_extents([32, 32, 10]).is_err());
        assert!(FpnConfig::default().check_extents([32, 32, 16]).is_ok());
    }
}
