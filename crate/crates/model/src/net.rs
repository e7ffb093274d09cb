use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::config::{ModelConfig, PpnPooling};
use crate::error::{Error, Result};
use crate::params::{param_specs, ModelKind, ParamStore};

/// Multi-scale features from one forward pass.
#[derive(Debug, Clone)]
pub struct BackboneFeatures {
    /// Full-resolution stem output.
    pub stem: Tensor,
    /// Encoder stage outputs at strides 2, 4, 8, 16.
    pub stages: Vec<Tensor>,
    /// Finest decoder map, at `output_stride`.
    pub decoder: Tensor,
}

#[derive(Debug, Clone)]
pub struct DetectorOutput {
    /// Localization logits, `(B, 1, H / output_stride, W / output_stride)`.
    pub heatmap_logits: Tensor,
    /// Foreground logits per class-grid cell, `(B, 1, H / 16, W / 16)`.
    pub class_logits: Tensor,
}

impl DetectorOutput {
    pub fn heatmap(&self) -> Result<Tensor> {
        sigmoid(&self.heatmap_logits)
    }

    pub fn class_probs(&self) -> Result<Tensor> {
        sigmoid(&self.class_logits)
    }
}

/// Logistic function via tanh, which stays finite for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Nearest-neighbour ×2 upsampling through broadcasting, which has a cheap
/// backward pass.
fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Converts equally sized RGB patches to a normalized `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0f32; images.len() * 3 * plane];
    for (i, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {}x{} patches",
                w,
                h,
                img.width(),
                img.height()
            )));
        }
        let base = i * 3 * plane;
        for (j, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * plane + j] = (f32::from(p.0[c]) / 255.0 - 0.5) / 0.25;
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), &Device::Cpu)?.to_dtype(dtype)?)
}

/// The shared encoder-decoder with either the PPN head or the two detector
/// heads attached.
const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// Clones share parameters and the training flag.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub kind: ModelKind,
    params: ParamStore,
    training: Arc<AtomicBool>,
}

impl Network {
    /// Scratch initialization.
    pub fn new(config: ModelConfig, kind: ModelKind, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&param_specs(&config, kind), seed, dtype)?;
        Ok(Network {
            config,
            kind,
            params,
            training: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn from_tensors(
        config: ModelConfig,
        kind: ModelKind,
        tensors: &BTreeMap<String, Tensor>,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::from_tensors(&param_specs(&config, kind), tensors, dtype)?;
        Ok(Network {
            config,
            kind,
            params,
            training: Arc::new(AtomicBool::new(false)),
        })
    }

    /// Training mode uses batch statistics in normalization layers and
    /// updates their running averages. Networks start in evaluation mode.
    pub fn set_training(&self, on: bool) {
        self.training.store(on, Ordering::Relaxed);
    }

    pub fn is_training(&self) -> bool {
        self.training.load(Ordering::Relaxed)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn conv(&self, x: &Tensor, name: &str, stride: usize) -> Result<Tensor> {
        let w = self.params.get(&format!("{name}.weight")).as_tensor();
        let b = self.params.get(&format!("{name}.bias")).as_tensor();
        let k = w.dim(2)?;
        let y = x.conv2d(w, k / 2, stride, 1, 1)?;
        Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
    }

    /// Backbone convolution followed by batch normalization when enabled.
    /// Training mode normalizes with batch statistics and folds them into the
    /// running averages; evaluation uses the running averages.
    fn conv_norm(&self, x: &Tensor, name: &str, stride: usize) -> Result<Tensor> {
        if !self.config.backbone.batch_norm {
            return self.conv(x, name, stride);
        }
        let w = self.params.get(&format!("{name}.weight")).as_tensor();
        let k = w.dim(2)?;
        let y = x.conv2d(w, k / 2, stride, 1, 1)?;
        let (b, c, h, wd) = y.dims4()?;
        let mean_var = self.params.get(&format!("{name}.norm.running_mean"));
        let run_var = self.params.get(&format!("{name}.norm.running_var"));
        let (centred, var) = if self.is_training() {
            let n = b * h * wd;
            let flat = y.transpose(0, 1)?.reshape((c, n))?;
            let mean = flat.mean_keepdim(1)?;
            let centred_flat = flat.broadcast_sub(&mean)?;
            let var = centred_flat.sqr()?.mean_keepdim(1)?;
            let unbiased = var.detach().affine(n as f64 / (n.max(2) - 1) as f64, 0.0)?;
            let m = BN_MOMENTUM;
            mean_var
                .set(&(mean_var.as_tensor().affine(1.0 - m, 0.0)? + mean.detach().flatten_all()?.affine(m, 0.0)?)?)?;
            run_var.set(&(run_var.as_tensor().affine(1.0 - m, 0.0)? + unbiased.flatten_all()?.affine(m, 0.0)?)?)?;
            let centred = y.broadcast_sub(&mean.reshape((1, c, 1, 1))?)?;
            (centred, var.reshape((1, c, 1, 1))?)
        } else {
            let mean = mean_var.as_tensor().detach().reshape((1, c, 1, 1))?;
            (
                y.broadcast_sub(&mean)?,
                run_var.as_tensor().detach().reshape((1, c, 1, 1))?,
            )
        };
        let normed = centred.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        let gamma = self
            .params
            .get(&format!("{name}.norm.weight"))
            .as_tensor()
            .reshape((1, c, 1, 1))?;
        let beta = self
            .params
            .get(&format!("{name}.norm.bias"))
            .as_tensor()
            .reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        let f = self.config.backbone.down_factor() as usize;
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::Shape(format!("expected (B, 3, H, W) input, got {dims:?}")));
        }
        if dims[2] == 0 || dims[3] == 0 || dims[2] % f != 0 || dims[3] % f != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} is not a positive multiple of {f}",
                dims[3], dims[2]
            )));
        }
        Ok(())
    }

    pub fn backbone_forward(&self, x: &Tensor) -> Result<BackboneFeatures> {
        self.check_input(x)?;
        let b = &self.config.backbone;
        let stem = self.conv_norm(x, "backbone.stem", 1)?.relu()?;
        let mut stages = Vec::with_capacity(b.stage_widths.len());
        let mut h = stem.clone();
        for (i, &blocks) in b.stage_blocks.iter().enumerate() {
            h = self.conv_norm(&h, &format!("backbone.stage{i}.down"), 2)?.relu()?;
            let mut outs = vec![h.clone()];
            for j in 0..blocks {
                let p = format!("backbone.stage{i}.block{j}");
                let r = self.conv_norm(&h, &format!("{p}.conv1"), 1)?.relu()?;
                let r = self.conv_norm(&r, &format!("{p}.conv2"), 1)?;
                h = (h + r)?.relu()?;
                outs.push(h.clone());
            }
            if blocks > 0 {
                let cat = Tensor::cat(&outs, 1)?;
                h = self.conv_norm(&cat, &format!("backbone.stage{i}.agg"), 1)?.relu()?;
            }
            stages.push(h.clone());
        }
        let mut y = stages.last().unwrap().clone();
        for i in (0..stages.len() - 1).rev() {
            let p = format!("backbone.decoder.up{i}");
            let up = upsample2(&self.conv_norm(&y, &format!("{p}.proj"), 1)?.relu()?)?;
            y = self.conv_norm(&(up + &stages[i])?, &format!("{p}.fuse"), 1)?.relu()?;
        }
        if b.output_stride == 1 {
            let up = upsample2(&self.conv_norm(&y, "backbone.decoder.up_stem.proj", 1)?.relu()?)?;
            y = self
                .conv_norm(&(up + &stem)?, "backbone.decoder.up_stem.fuse", 1)?
                .relu()?;
        }
        Ok(BackboneFeatures {
            stem,
            stages,
            decoder: y,
        })
    }

    fn expect(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "{:?} head requested from a {:?} model",
                kind, self.kind
            )));
        }
        Ok(())
    }

    /// PPN logits from already computed decoder features, shape `(B,)`.
    pub fn ppn_head(&self, decoder: &Tensor) -> Result<Tensor> {
        self.expect(ModelKind::Ppn)?;
        let (bsz, c, _, _) = decoder.dims4()?;
        let pooled = match self.config.heads.ppn_pooling {
            PpnPooling::ChannelVector => decoder.mean(3)?.mean(2)?,
            PpnPooling::Scalar => decoder.reshape((bsz, c, ()))?.mean(2)?.mean_keepdim(1)?,
        };
        let w = self.params.get("ppn_head.linear.weight").as_tensor();
        let b = self.params.get("ppn_head.linear.bias").as_tensor();
        Ok(pooled.matmul(&w.t()?)?.broadcast_add(b)?.squeeze(1)?)
    }

    pub fn ppn_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.expect(ModelKind::Ppn)?;
        self.ppn_head(&self.backbone_forward(x)?.decoder)
    }

    /// Probability that each patch contains at least one animal.
    pub fn ppn_forward(&self, x: &Tensor) -> Result<Tensor> {
        sigmoid(&self.ppn_logits(x)?)
    }

    pub fn detector_heads(&self, feats: &BackboneFeatures) -> Result<DetectorOutput> {
        self.expect(ModelKind::Detector)?;
        let h = self.conv(&feats.decoder, "loc_head.conv1", 1)?.relu()?;
        let heatmap_logits = self.conv(&h, "loc_head.conv2", 1)?;
        let c = self.conv(feats.stages.last().unwrap(), "cls_head.conv1", 1)?.relu()?;
        let class_logits = self.conv(&c, "cls_head.conv2", 1)?;
        Ok(DetectorOutput {
            heatmap_logits,
            class_logits,
        })
    }

    pub fn detector_forward(&self, x: &Tensor) -> Result<DetectorOutput> {
        self.expect(ModelKind::Detector)?;
        self.detector_heads(&self.backbone_forward(x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BackboneConfig;

    fn noise(b: usize, size: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = herdcount_core::seed::rng(seed);
        let v: Vec<f32> = (0..b * 3 * size * size).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::from_vec(v, (b, 3, size, size), &Device::Cpu).unwrap()
    }

    #[test]
    fn desk_shapes_at_512() {
        let cfg = ModelConfig::desk();
        let net = Network::new(cfg.clone(), ModelKind::Detector, 0, DType::F32).unwrap();
        let x = noise(1, 512, 1);
        let f = net.backbone_forward(&x).unwrap();
        assert_eq!(f.stem.dims(), &[1, 16, 512, 512]);
        let strides: Vec<_> = f.stages.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            strides,
            vec![
                vec![1, 16, 256, 256],
                vec![1, 32, 128, 128],
                vec![1, 64, 64, 64],
                vec![1, 128, 32, 32]
            ]
        );
        assert_eq!(f.decoder.dims(), &[1, 16, 256, 256]);
        let out = net.detector_heads(&f).unwrap();
        assert_eq!(out.heatmap_logits.dims(), &[1, 1, 256, 256]);
        assert_eq!(out.class_logits.dims(), &[1, 1, 32, 32]);
        assert!(net.parameter_count() > 100_000);
    }

    #[test]
    fn stride_one_decoder_reaches_full_resolution() {
        let mut cfg = ModelConfig::tiny();
        cfg.backbone.output_stride = 1;
        let net = Network::new(cfg, ModelKind::Detector, 0, DType::F32).unwrap();
        let out = net.detector_forward(&noise(2, 64, 2)).unwrap();
        assert_eq!(out.heatmap_logits.dims(), &[2, 1, 64, 64]);
        assert_eq!(out.class_logits.dims(), &[2, 1, 4, 4]);
    }

    #[test]
    fn outputs_are_finite_and_bounded() {
        let net = Network::new(ModelConfig::tiny(), ModelKind::Detector, 3, DType::F32).unwrap();
        let out = net.detector_forward(&noise(2, 64, 4)).unwrap();
        for t in [out.heatmap().unwrap(), out.class_probs().unwrap()] {
            let v = t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
        }
        let ppn = Network::new(ModelConfig::tiny(), ModelKind::Ppn, 3, DType::F32).unwrap();
        let big = (noise(3, 32, 5) * 1000.0).unwrap();
        let p = ppn.ppn_forward(&big).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
    }

    #[test]
    fn zero_features_give_sigmoid_of_bias() {
        let net = Network::new(ModelConfig::tiny(), ModelKind::Ppn, 0, DType::F64).unwrap();
        net.params()
            .set("ppn_head.linear.bias", &Tensor::new(&[0.7f64], &Device::Cpu).unwrap())
            .unwrap();
        let zeros = Tensor::zeros((2, 4, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let p = sigmoid(&net.ppn_head(&zeros).unwrap())
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let expected = 1.0 / (1.0 + (-0.7f64).exp());
        assert!(p.iter().all(|v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn scalar_pooling_uses_one_weight() {
        let mut cfg = ModelConfig::tiny();
        cfg.heads.ppn_pooling = PpnPooling::Scalar;
        let net = Network::new(cfg, ModelKind::Ppn, 0, DType::F32).unwrap();
        assert_eq!(net.params().get("ppn_head.linear.weight").dims(), &[1, 1]);
        assert_eq!(net.ppn_forward(&noise(2, 32, 0)).unwrap().dims(), &[2]);
    }

    #[test]
    fn wrong_input_shape_is_an_error() {
        let net = Network::new(ModelConfig::tiny(), ModelKind::Ppn, 0, DType::F32).unwrap();
        assert!(matches!(net.ppn_forward(&noise(1, 40, 0)), Err(Error::Shape(_))));
        let two_channel = Tensor::zeros((1, 2, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.ppn_forward(&two_channel), Err(Error::Shape(_))));
        assert!(matches!(net.detector_forward(&noise(1, 32, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-800.0f64, -1.0, 0.0, 1.0, 800.0], &Device::Cpu).unwrap();
        let v = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        let want = [
            0.0,
            (1.0 + (-1.0f64).exp()).ln(),
            2f64.ln(),
            1.0 + (1.0 + (-1.0f64).exp()).ln(),
            800.0,
        ];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn full_config_builds() {
        let cfg = ModelConfig {
            backbone: BackboneConfig::full().with_input_size(64),
            heads: Default::default(),
        };
        let net = Network::new(cfg, ModelKind::Ppn, 0, DType::F32).unwrap();
        assert!(net.parameter_count() > 5_000_000);
    }

    #[test]
    fn batch_norm_train_and_eval_modes() {
        let net = Network::new(ModelConfig::tiny(), ModelKind::Ppn, 0, DType::F64).unwrap();
        let x = noise(3, 32, 5).to_dtype(DType::F64).unwrap();
        let name = "backbone.stem";
        let raw = x
            .conv2d(net.params().get(&format!("{name}.weight")).as_tensor(), 1, 1, 1, 1)
            .unwrap();
        // reference batch statistics per channel, computed by hand
        let v = raw
            .transpose(0, 1)
            .unwrap()
            .flatten_from(1)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        let mean: Vec<f64> = v.iter().map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        let var: Vec<f64> = v
            .iter()
            .zip(&mean)
            .map(|(c, m)| c.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (c.len() - 1) as f64)
            .collect();

        net.set_training(true);
        let y = net.conv_norm(&x, name, 1).unwrap();
        net.set_training(false);
        let per_channel = y
            .transpose(0, 1)
            .unwrap()
            .flatten_from(1)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        for c in &per_channel {
            let m = c.iter().sum::<f64>() / c.len() as f64;
            let s = c.iter().map(|a| (a - m).powi(2)).sum::<f64>() / c.len() as f64;
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-3, "mean {m} var {s}");
        }
        let rm = net
            .params()
            .get(&format!("{name}.norm.running_mean"))
            .as_tensor()
            .to_vec1::<f64>()
            .unwrap();
        let rv = net
            .params()
            .get(&format!("{name}.norm.running_var"))
            .as_tensor()
            .to_vec1::<f64>()
            .unwrap();
        for c in 0..mean.len() {
            assert!((rm[c] - 0.1 * mean[c]).abs() < 1e-9);
            assert!((rv[c] - (0.9 + 0.1 * var[c])).abs() < 1e-9);
        }

        // evaluation depends only on the sample, not on its batch
        let one = x.narrow(0, 0, 1).unwrap();
        let alone = net.ppn_logits(&one).unwrap().to_vec1::<f64>().unwrap()[0];
        let batched = net.ppn_logits(&x).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((alone - batched).abs() < 1e-9);
        assert_eq!(
            net.params()
                .get(&format!("{name}.norm.running_mean"))
                .as_tensor()
                .to_vec1::<f64>()
                .unwrap(),
            rm
        );
    }
}
