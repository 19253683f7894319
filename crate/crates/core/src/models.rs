//! Network definitions: residual encoder, projection head, disc classifier,
//! 2.5D coordinate regressor, and parameter grouping for fine-tuning.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data_model::{DiscLevel, SeverityGrade};
use crate::error::{Error, Result};
use crate::nn::{
    BasicBlock, BatchNorm, ConvBn, Dropout, Embedding, GlobalAvgPool, Linear, MaxPool2d, ParamGroup, ParamStore, Pass,
    Relu, Sigmoid, Tensor,
};
use crate::rng::{stream, PipelineRng};

pub const FEATURE_DIM: usize = 512;
pub const PROJECTION_HIDDEN: usize = 512;
pub const PROJECTION_DIM: usize = 128;
pub const LEVEL_EMBEDDING_DIM: usize = 32;
pub const FUSION_HIDDEN: usize = 256;
pub const REGRESSOR_DROPOUT: f32 = 0.5;

/// Backbone stage names in forward order.
pub const STAGES: [&str; 5] = ["stem", "layer1", "layer2", "layer3", "layer4"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// ResNet-18 layout at full input resolution.
    #[default]
    Standard,
    /// Reduced widths and depth for desk-scale runs.
    Tiny,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Standard => "standard",
            Preset::Tiny => "tiny",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" | "standard-18" => Ok(Preset::Standard),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(Error::Config(format!(
                "unknown preset {s:?} (expected standard or tiny)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneArch {
    pub in_channels: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
}

impl BackboneArch {
    pub fn encoder(preset: Preset) -> Self {
        match preset {
            Preset::Standard => BackboneArch {
                in_channels: 1,
                input_size: 224,
                stem_channels: 64,
                stem_kernel: 7,
                widths: [64, 128, 256, FEATURE_DIM],
                blocks: [2, 2, 2, 2],
            },
            Preset::Tiny => BackboneArch {
                in_channels: 1,
                input_size: 64,
                stem_channels: 16,
                stem_kernel: 3,
                widths: [16, 32, 64, FEATURE_DIM],
                blocks: [1, 1, 1, 1],
            },
        }
    }

    pub fn regressor(preset: Preset) -> Self {
        match preset {
            Preset::Standard => BackboneArch {
                in_channels: 3,
                input_size: 256,
                ..Self::encoder(Preset::Standard)
            },
            Preset::Tiny => BackboneArch {
                in_channels: 3,
                input_size: 256,
                stem_channels: 8,
                stem_kernel: 5,
                widths: [8, 16, 32, 64],
                blocks: [1, 1, 1, 1],
            },
        }
    }

    /// Spatial side after every stage (stem stride 2, max-pool stride 2,
    /// then stride 2 in layers 2-4).
    pub fn output_side(&self) -> usize {
        let conv = |s: usize, k: usize, st: usize, p: usize| (s + 2 * p - k) / st + 1;
        let mut s = conv(self.input_size, self.stem_kernel, 2, self.stem_kernel / 2);
        s = conv(s, 3, 2, 1);
        for _ in 0..3 {
            s = conv(s, 3, 2, 1);
        }
        s
    }
}

/// Residual convolutional trunk with named stages.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub arch: BackboneArch,
    stem: ConvBn,
    stem_relu: Relu,
    pool: MaxPool2d,
    layers: Vec<Vec<BasicBlock>>,
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, prefix: &str, arch: BackboneArch, rng: &mut PipelineRng) -> Self {
        let k = arch.stem_kernel;
        let mut stem = ConvBn::new(
            ps,
            &format!("{prefix}.conv1"),
            &format!("{prefix}.bn1"),
            arch.in_channels,
            arch.stem_channels,
            k,
            2,
            k / 2,
            rng,
        );
        stem.conv.input_grad = false;
        let mut layers = Vec::new();
        let mut cin = arch.stem_channels;
        for (i, (&w, &n)) in arch.widths.iter().zip(&arch.blocks).enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let blocks = (0..n)
                .map(|b| {
                    let blk = BasicBlock::new(
                        ps,
                        &format!("{prefix}.layer{}.{b}", i + 1),
                        if b == 0 { cin } else { w },
                        w,
                        if b == 0 { stride } else { 1 },
                        rng,
                    );
                    cin = w;
                    blk
                })
                .collect();
            layers.push(blocks);
        }
        Backbone {
            arch,
            stem,
            stem_relu: Relu::default(),
            pool: MaxPool2d::new(3, 2, 1),
            layers,
        }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [self.arch.in_channels, self.arch.input_size, self.arch.input_size];
        if x.shape.len() != 4 || x.shape[1..] != want {
            return Err(Error::Config(format!(
                "backbone expects input (N, {}, {}, {}), got {:?}",
                want[0], want[1], want[2], x.shape
            )));
        }
        Ok(())
    }

    /// Runs the stages in `stages` (indices into [`STAGES`]).
    pub fn forward_stages(&mut self, ps: &mut ParamStore, x: &Tensor, stages: Range<usize>, pass: Pass) -> Tensor {
        let mut h = x.clone();
        for s in stages {
            if s == 0 {
                h = self.stem.forward(ps, &h, pass);
                h = self.stem_relu.forward(&h, pass);
                h = self.pool.forward(&h, pass);
            } else {
                for blk in &mut self.layers[s - 1] {
                    h = blk.forward(ps, &h, pass);
                }
            }
        }
        h
    }

    pub fn backward_stages(&mut self, ps: &mut ParamStore, g: &Tensor, stages: Range<usize>) -> Tensor {
        let mut g = g.clone();
        for s in stages.rev() {
            if s == 0 {
                g = self.pool.backward(&g);
                g = self.stem_relu.backward(&g);
                g = self.stem.backward(ps, &g);
            } else {
                for blk in self.layers[s - 1].iter_mut().rev() {
                    g = blk.backward(ps, &g);
                }
            }
        }
        g
    }
}

/// Single-channel encoder: backbone plus global average pooling, with the
/// classification layer removed.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub backbone: Backbone,
    gap: GlobalAvgPool,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, preset: Preset, rng: &mut PipelineRng) -> Self {
        Encoder {
            backbone: Backbone::new(ps, "encoder", BackboneArch::encoder(preset), rng),
            gap: GlobalAvgPool::default(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.backbone.arch.input_size
    }

    /// Features for stages `from..5`, given the activation entering stage `from`.
    pub fn forward_from(&mut self, ps: &mut ParamStore, h: &Tensor, from: usize, pass: Pass) -> Tensor {
        let h = self.backbone.forward_stages(ps, h, from..STAGES.len(), pass);
        self.gap.forward(&h, pass)
    }

    pub fn backward_to(&mut self, ps: &mut ParamStore, g: &Tensor, from: usize) -> Tensor {
        let g = self.gap.backward(g);
        self.backbone.backward_stages(ps, &g, from..STAGES.len())
    }

    pub fn encode(&mut self, ps: &mut ParamStore, x: &Tensor, pass: Pass) -> Result<Tensor> {
        self.backbone.check_input(x)?;
        Ok(self.forward_from(ps, x, 0, pass))
    }
}

/// Two fully connected layers with batch norm and ReLU between.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    fc1: Linear,
    bn: BatchNorm,
    relu: Relu,
    fc2: Linear,
}

impl ProjectionHead {
    pub fn new(ps: &mut ParamStore, rng: &mut PipelineRng) -> Self {
        ProjectionHead {
            fc1: Linear::new(ps, "projection.0", FEATURE_DIM, PROJECTION_HIDDEN, rng),
            bn: BatchNorm::new(ps, "projection.1", PROJECTION_HIDDEN, rng),
            relu: Relu::default(),
            fc2: Linear::new(ps, "projection.3", PROJECTION_HIDDEN, PROJECTION_DIM, rng),
        }
    }

    /// Un-normalized head output; the loss normalizes internally.
    pub fn forward(&mut self, ps: &mut ParamStore, z: &Tensor, pass: Pass) -> Tensor {
        let h = self.fc1.forward(ps, z, pass);
        let h = self.bn.forward(ps, &h, pass);
        let h = self.relu.forward(&h, pass);
        self.fc2.forward(ps, &h, pass)
    }

    pub fn backward(&mut self, ps: &mut ParamStore, g: &Tensor) -> Tensor {
        let g = self.fc2.backward(ps, g);
        let g = self.relu.backward(&g);
        let g = self.bn.backward(ps, &g);
        self.fc1.backward(ps, &g)
    }
}

/// Row-wise L2 normalization; a zero row is a numeric error.
pub fn l2_normalize(t: &Tensor) -> Result<Tensor> {
    let (n, d) = t.dims2();
    let mut out = t.clone();
    for r in 0..n {
        let row = &mut out.data[r * d..(r + 1) * d];
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "embedding row {r} has norm {norm}; cannot normalize"
            )));
        }
        row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
    }
    Ok(out)
}

/// Encoder plus projection head, as trained by contrastive pretraining.
#[derive(Debug, Clone)]
pub struct ContrastiveNet {
    pub preset: Preset,
    pub ps: ParamStore,
    pub encoder: Encoder,
    pub projection: ProjectionHead,
}

impl ContrastiveNet {
    pub fn new(preset: Preset, seed: u64) -> Self {
        let mut rng = stream(seed, "init/contrastive");
        let mut ps = ParamStore::new();
        let encoder = Encoder::new(&mut ps, preset, &mut rng);
        let projection = ProjectionHead::new(&mut ps, &mut rng);
        ContrastiveNet {
            preset,
            ps,
            encoder,
            projection,
        }
    }

    pub fn encode(&mut self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        self.encoder.encode(&mut self.ps, x, pass)
    }

    /// Unit-norm embeddings `g(f(x))`.
    pub fn project(&mut self, z: &Tensor, pass: Pass) -> Result<Tensor> {
        let h = self.projection.forward(&mut self.ps, z, pass);
        l2_normalize(&h)
    }
}

/// Mean of a set of embeddings. Each coordinate is summed in sorted order,
/// so the result is bitwise invariant to the order of the set.
pub fn pool_disc(embeddings: &[&[f32]]) -> Result<Vec<f32>> {
    let Some(first) = embeddings.first() else {
        return Err(Error::Data("cannot pool an empty embedding set".into()));
    };
    let d = first.len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Data("embeddings in a set must share one dimension".into()));
    }
    let s = embeddings.len() as f64;
    let mut col = Vec::with_capacity(embeddings.len());
    Ok((0..d)
        .map(|j| {
            col.clear();
            col.extend(embeddings.iter().map(|e| e[j] as f64));
            col.sort_by(f64::total_cmp);
            (col.iter().sum::<f64>() / s) as f32
        })
        .collect())
}

/// Pools consecutive groups of rows; `sizes` gives the set size of each disc.
pub fn pool_batch(z: &Tensor, sizes: &[usize]) -> Result<Tensor> {
    let (n, d) = z.dims2();
    if sizes.iter().sum::<usize>() != n {
        return Err(Error::Data(format!("set sizes {sizes:?} do not cover {n} rows")));
    }
    let mut data = Vec::with_capacity(sizes.len() * d);
    let mut start = 0;
    for &s in sizes {
        let rows: Vec<&[f32]> = (start..start + s).map(|r| z.row(r)).collect();
        data.extend(pool_disc(&rows)?);
        start += s;
    }
    Ok(Tensor::from_vec(&[sizes.len(), d], data))
}

/// Gradient of [`pool_batch`]: each member receives `g / S`.
pub fn pool_batch_backward(g: &Tensor, sizes: &[usize]) -> Tensor {
    let (_, d) = g.dims2();
    let n: usize = sizes.iter().sum();
    let mut out = Tensor::zeros(&[n, d]);
    let mut r = 0;
    for (i, &s) in sizes.iter().enumerate() {
        for _ in 0..s {
            for j in 0..d {
                out.data[r * d + j] = g.data[i * d + j] / s as f32;
            }
            r += 1;
        }
    }
    out
}

/// Argmax over grade logits; ties resolve toward the less severe grade.
pub fn classify(logits: &[f32]) -> SeverityGrade {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    SeverityGrade::from_index(best).expect("three logits")
}

/// Encoder with a three-way linear grade head.
#[derive(Debug, Clone)]
pub struct GradeNet {
    pub preset: Preset,
    pub ps: ParamStore,
    pub encoder: Encoder,
    pub head: Linear,
}

impl GradeNet {
    pub fn new(preset: Preset, seed: u64) -> Self {
        let mut rng = stream(seed, "init/grade");
        let mut ps = ParamStore::new();
        let encoder = Encoder::new(&mut ps, preset, &mut rng);
        let head = Linear::new(&mut ps, "head", FEATURE_DIM, SeverityGrade::ALL.len(), &mut rng);
        GradeNet {
            preset,
            ps,
            encoder,
            head,
        }
    }

    /// Logits for discs whose instances are stacked in `x`, `sizes[i]` rows per disc.
    pub fn logits(&mut self, x: &Tensor, sizes: &[usize], pass: Pass) -> Result<Tensor> {
        let z = self.encoder.encode(&mut self.ps, x, pass)?;
        let pooled = pool_batch(&z, sizes)?;
        Ok(self.head.forward(&mut self.ps, &pooled, pass))
    }
}

/// Parameter-name prefix of a backbone stage or the head.
pub fn stage_prefix(stage: &str) -> Result<Vec<String>> {
    Ok(match stage {
        "stem" => vec!["encoder.conv1.".into(), "encoder.bn1.".into()],
        "layer1" | "layer2" | "layer3" | "layer4" => vec![format!("encoder.{stage}.")],
        "head" => vec!["head.".into()],
        other => {
            return Err(Error::Config(format!(
                "unknown stage {other:?}; expected one of stem, layer1..layer4, head"
            )))
        }
    })
}

/// Index of the first trainable backbone stage given the frozen set, which
/// must be a prefix of the stage order.
pub fn first_trainable_stage(frozen: &[String]) -> Result<usize> {
    for f in frozen {
        stage_prefix(f)?;
        if f == "head" {
            return Err(Error::Config("the classification head cannot be frozen".into()));
        }
    }
    let n = frozen.len();
    let expected: Vec<&str> = STAGES[..n.min(STAGES.len())].to_vec();
    let mut sorted: Vec<&str> = frozen.iter().map(String::as_str).collect();
    sorted.sort_by_key(|s| STAGES.iter().position(|t| t == s));
    sorted.dedup();
    if sorted != expected {
        return Err(Error::Config(format!(
            "frozen stages {frozen:?} must be a leading run of {STAGES:?}"
        )));
    }
    Ok(n)
}

/// Optimizer groups for differential fine-tuning: trainable backbone stages
/// at `backbone_lr`, the head at `head_lr`. Frozen stages get no group.
pub fn build_finetune_param_groups(
    ps: &ParamStore,
    frozen: &[String],
    backbone_lr: f64,
    head_lr: f64,
    weight_decay: f64,
) -> Result<Vec<ParamGroup>> {
    let first = first_trainable_stage(frozen)?;
    let mut backbone = Vec::new();
    for stage in &STAGES[first..] {
        let prefixes = stage_prefix(stage)?;
        let refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
        backbone.extend(ps.weights_with_prefix(&refs));
    }
    let head = ps.weights_with_prefix(&["head."]);
    let mut groups = Vec::new();
    if !backbone.is_empty() {
        groups.push(ParamGroup {
            name: "backbone".into(),
            params: backbone,
            lr: backbone_lr,
            weight_decay,
        });
    }
    groups.push(ParamGroup {
        name: "head".into(),
        params: head,
        lr: head_lr,
        weight_decay,
    });
    Ok(groups)
}

/// 2.5D coordinate regressor: backbone features (flattened spatially) fused
/// with a disc-level embedding, squashed to normalized (x, y).
#[derive(Debug, Clone)]
pub struct RoiRegressor {
    pub preset: Preset,
    pub ps: ParamStore,
    pub backbone: Backbone,
    pub embedding: Embedding,
    fc1: Linear,
    relu: Relu,
    dropout: Dropout,
    fc2: Linear,
    sigmoid: Sigmoid,
    feat_shape: Vec<usize>,
}

impl RoiRegressor {
    pub fn new(preset: Preset, seed: u64) -> Self {
        let mut rng = stream(seed, "init/regressor");
        let mut ps = ParamStore::new();
        let arch = BackboneArch::regressor(preset);
        let side = arch.output_side();
        let flat = arch.widths[3] * side * side;
        let backbone = Backbone::new(&mut ps, "regressor.backbone", arch, &mut rng);
        let embedding = Embedding::new(
            &mut ps,
            "regressor.level_embedding",
            DiscLevel::ALL.len(),
            LEVEL_EMBEDDING_DIM,
            &mut rng,
        );
        let fc1 = Linear::new(
            &mut ps,
            "regressor.fc1",
            flat + LEVEL_EMBEDDING_DIM,
            FUSION_HIDDEN,
            &mut rng,
        );
        let fc2 = Linear::new(&mut ps, "regressor.fc2", FUSION_HIDDEN, 2, &mut rng);
        RoiRegressor {
            preset,
            ps,
            backbone,
            embedding,
            fc1,
            relu: Relu::default(),
            dropout: Dropout::new(REGRESSOR_DROPOUT, stream(seed, "dropout/regressor")),
            fc2,
            sigmoid: Sigmoid::default(),
            feat_shape: Vec::new(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.backbone.arch.input_size
    }

    /// Normalized `(x, y)` per row, in [0, 1].
    pub fn forward(&mut self, x: &Tensor, levels: &[DiscLevel], pass: Pass) -> Result<Tensor> {
        self.backbone.check_input(x)?;
        let n = x.shape[0];
        if levels.len() != n {
            return Err(Error::Data(format!("{} levels for {n} inputs", levels.len())));
        }
        let ps = &mut self.ps;
        let f = self.backbone.forward_stages(ps, x, 0..STAGES.len(), pass);
        self.feat_shape = f.shape.clone();
        let flat = f.numel() / n;
        let idx: Vec<usize> = levels.iter().map(|l| l.index()).collect();
        let e = self.embedding.forward(ps, &idx, pass);
        let width = flat + LEVEL_EMBEDDING_DIM;
        let mut fused = Tensor::zeros(&[n, width]);
        for r in 0..n {
            fused.data[r * width..r * width + flat].copy_from_slice(&f.data[r * flat..(r + 1) * flat]);
            fused.data[r * width + flat..(r + 1) * width].copy_from_slice(e.row(r));
        }
        let h = self.fc1.forward(ps, &fused, pass);
        let h = self.relu.forward(&h, pass);
        let h = self.dropout.forward(&h, pass);
        let out = self.fc2.forward(ps, &h, pass);
        Ok(self.sigmoid.forward(&out, pass))
    }

    pub fn backward(&mut self, g: &Tensor) {
        let ps = &mut self.ps;
        let g = self.sigmoid.backward(g);
        let g = self.fc2.backward(ps, &g);
        let g = self.dropout.backward(&g);
        let g = self.relu.backward(&g);
        let g = self.fc1.backward(ps, &g);
        let n = g.shape[0];
        let width = g.shape[1];
        let flat = width - LEVEL_EMBEDDING_DIM;
        let mut gf = Tensor::zeros(&self.feat_shape);
        let mut ge = Tensor::zeros(&[n, LEVEL_EMBEDDING_DIM]);
        for r in 0..n {
            gf.data[r * flat..(r + 1) * flat].copy_from_slice(&g.data[r * width..r * width + flat]);
            ge.data[r * LEVEL_EMBEDDING_DIM..(r + 1) * LEVEL_EMBEDDING_DIM]
                .copy_from_slice(&g.data[r * width + flat..(r + 1) * width]);
        }
        self.embedding.backward(ps, &ge);
        self.backbone.backward_stages(ps, &gf, 0..STAGES.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Pass;
    use rand::Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::rng_from(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn tiny_encoder_yields_512_features() {
        let mut net = ContrastiveNet::new(Preset::Tiny, 0);
        let x = random_input(&[3, 1, 64, 64], 1);
        let z = net.encode(&x, Pass::EVAL).unwrap();
        assert_eq!(z.shape, vec![3, FEATURE_DIM]);
        assert!(z.is_finite());
        assert_eq!(z, net.encode(&x, Pass::EVAL).unwrap());
        let p = net.project(&z, Pass::EVAL).unwrap();
        for r in 0..3 {
            let n: f32 = p.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_rejects_wrong_size() {
        let mut net = ContrastiveNet::new(Preset::Tiny, 0);
        let err = net.encode(&random_input(&[1, 1, 32, 32], 1), Pass::EVAL).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn classify_ties_go_to_lower_grade() {
        assert_eq!(classify(&[2.0, 0.0, 0.0]), SeverityGrade::Normal);
        assert_eq!(classify(&[1.0, 1.0, 0.0]), SeverityGrade::Normal);
        assert_eq!(classify(&[0.0, 1.0, 1.0]), SeverityGrade::Moderate);
        assert_eq!(classify(&[0.0, 0.0, 1.0]), SeverityGrade::Severe);
    }

    #[test]
    fn pooling_identity_and_copies() {
        let v = [0.1f32, -3.5, 7.25];
        assert_eq!(pool_disc(&[&v]).unwrap(), v.to_vec());
        assert_eq!(pool_disc(&[&v, &v]).unwrap(), v.to_vec());
        assert!(pool_disc(&[]).is_err());
    }

    #[test]
    fn finetune_groups_cover_layer4_and_head() {
        let net = GradeNet::new(Preset::Tiny, 0);
        let frozen: Vec<String> = ["stem", "layer1", "layer2", "layer3"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let groups = build_finetune_param_groups(&net.ps, &frozen, 5e-5, 5e-4, 0.0).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[1].lr / groups[0].lr, 10.0);
        let names: Vec<&str> = groups
            .iter()
            .flat_map(|g| g.params.iter().map(|&id| net.ps.get(id).name.as_str()))
            .collect();
        assert!(names
            .iter()
            .all(|n| n.starts_with("encoder.layer4.") || n.starts_with("head.")));
        let expected = net.ps.weights_with_prefix(&["encoder.layer4.", "head."]).len();
        assert_eq!(names.len(), expected);
        assert!(build_finetune_param_groups(&net.ps, &["layer9".into()], 1.0, 1.0, 0.0).is_err());
        assert!(build_finetune_param_groups(&net.ps, &["layer2".into()], 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn regressor_outputs_in_unit_square() {
        let mut reg = RoiRegressor::new(Preset::Tiny, 0);
        let x = random_input(&[2, 3, 256, 256], 3);
        let levels = [DiscLevel::L1L2, DiscLevel::L5S1];
        let y = reg.forward(&x, &levels, Pass::EVAL).unwrap();
        assert_eq!(y.shape, vec![2, 2]);
        assert!(y.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(y, reg.forward(&x, &levels, Pass::EVAL).unwrap());
    }
}
