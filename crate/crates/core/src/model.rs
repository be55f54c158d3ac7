//! A small fully convolutional per-pixel classifier with an OOD head:
//! two 3x3 conv + ReLU layers of width `k`, then 1x1 heads for the class
//! logits and a single OOD logit. Zero padding keeps spatial dims.
//!
//! Activations are pixel-major (`[row][col][channel]`); 3x3 kernels are
//! stored as `[tap][in][out]` with `tap = (dy + 1) * 3 + (dx + 1)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::ImageRgb;
use crate::io;
use crate::scoring::{LogitVolume, OodLogitMap};

pub const MIN_INPUT_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub width: usize,
    pub num_classes: usize,
}

/// All trainable tensors. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub seg_w: Vec<f64>,
    pub seg_b: Vec<f64>,
    pub ood_w: Vec<f64>,
    pub ood_b: Vec<f64>,
}

pub const TENSOR_NAMES: [&str; 8] = [
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "seg_w", "seg_b", "ood_w", "ood_b",
];

impl Params {
    pub fn zeros(dims: &ModelDims) -> Self {
        let (k, c) = (dims.width, dims.num_classes);
        Self {
            conv1_w: vec![0.0; 9 * 3 * k],
            conv1_b: vec![0.0; k],
            conv2_w: vec![0.0; 9 * k * k],
            conv2_b: vec![0.0; k],
            seg_w: vec![0.0; k * c],
            seg_b: vec![0.0; c],
            ood_w: vec![0.0; k],
            ood_b: vec![0.0; 1],
        }
    }

    pub fn tensors(&self) -> [&Vec<f64>; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.seg_w,
            &self.seg_b,
            &self.ood_w,
            &self.ood_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.seg_w,
            &mut self.seg_b,
            &mut self.ood_w,
            &mut self.ood_b,
        ]
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub dims: ModelDims,
    pub params: Params,
}

/// Intermediate activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    height: usize,
    width: usize,
    input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

/// Map 8-bit intensities to [-1, 1], pixel-major.
pub fn normalize_input(image: &ImageRgb) -> Vec<f64> {
    image.data.iter().map(|&v| v as f64 / 127.5 - 1.0).collect()
}

impl ToyModel {
    /// Uniform init in `+-sqrt(1 / fan_in)` for every weight and bias.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.width == 0 || dims.num_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "model needs width > 0 and at least 2 classes, got {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = dims.width;
        let mut params = Params::zeros(&dims);
        let fan_ins = [27, 27, 9 * k, 9 * k, k, k, k, k];
        for (t, fan_in) in params.tensors_mut().into_iter().zip(fan_ins) {
            let bound = (1.0 / fan_in as f64).sqrt();
            for v in t.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { dims, params })
    }

    pub fn zeroed(dims: ModelDims) -> Self {
        let params = Params::zeros(&dims);
        Self { dims, params }
    }

    pub fn forward(&self, image: &ImageRgb) -> Result<(LogitVolume, OodLogitMap)> {
        self.forward_cached(image).map(|(v, o, _)| (v, o))
    }

    pub fn forward_cached(&self, image: &ImageRgb) -> Result<(LogitVolume, OodLogitMap, ForwardCache)> {
        if image.width < MIN_INPUT_SIDE || image.height < MIN_INPUT_SIDE {
            return Err(Error::InvalidParameter(format!(
                "input {}x{} is smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}",
                image.width, image.height
            )));
        }
        let (h, w) = (image.height, image.width);
        let k = self.dims.width;
        let nc = self.dims.num_classes;
        let p = &self.params;
        let input = normalize_input(image);

        let mut h1 = conv3x3(&input, h, w, 3, k, &p.conv1_w, &p.conv1_b);
        relu(&mut h1);
        let mut h2 = conv3x3(&h1, h, w, k, k, &p.conv2_w, &p.conv2_b);
        relu(&mut h2);

        let mut logits = vec![0.0; h * w * nc];
        let mut ood = vec![0.0; h * w];
        for (i, feat) in h2.chunks_exact(k).enumerate() {
            let out = &mut logits[i * nc..(i + 1) * nc];
            out.copy_from_slice(&p.seg_b);
            for (c, &f) in feat.iter().enumerate() {
                let row = &p.seg_w[c * nc..(c + 1) * nc];
                for (o, wv) in out.iter_mut().zip(row) {
                    *o += f * wv;
                }
            }
            ood[i] = p.ood_b[0] + feat.iter().zip(&p.ood_w).map(|(f, wv)| f * wv).sum::<f64>();
        }
        let volume = LogitVolume::new(h, w, nc, logits)
            .map_err(|_| Error::NonFinite("model produced non-finite logits".into()))?;
        let ood = OodLogitMap::new(h, w, ood)
            .map_err(|_| Error::NonFinite("model produced non-finite OOD logits".into()))?;
        Ok((
            volume,
            ood,
            ForwardCache {
                height: h,
                width: w,
                input,
                h1,
                h2,
            },
        ))
    }

    /// Parameter gradients given gradients of the loss with respect to the
    /// class logits (pixel-major) and the OOD logits.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f64], grad_ood: &[f64]) -> Params {
        let (h, w) = (cache.height, cache.width);
        let k = self.dims.width;
        let nc = self.dims.num_classes;
        let p = &self.params;
        let mut g = Params::zeros(&self.dims);

        let mut g_h2 = vec![0.0; h * w * k];
        for i in 0..h * w {
            let feat = &cache.h2[i * k..(i + 1) * k];
            let gl = &grad_logits[i * nc..(i + 1) * nc];
            let go = grad_ood[i];
            for (gb, v) in g.seg_b.iter_mut().zip(gl) {
                *gb += v;
            }
            g.ood_b[0] += go;
            let gh = &mut g_h2[i * k..(i + 1) * k];
            for c in 0..k {
                let wrow = &p.seg_w[c * nc..(c + 1) * nc];
                let grow = &mut g.seg_w[c * nc..(c + 1) * nc];
                let mut acc = p.ood_w[c] * go;
                for j in 0..nc {
                    grow[j] += feat[c] * gl[j];
                    acc += wrow[j] * gl[j];
                }
                g.ood_w[c] += feat[c] * go;
                gh[c] = acc;
            }
        }
        relu_backward(&mut g_h2, &cache.h2);

        let mut g_h1 = vec![0.0; h * w * k];
        conv3x3_backward(
            &cache.h1,
            h,
            w,
            k,
            k,
            &p.conv2_w,
            &g_h2,
            &mut g.conv2_w,
            &mut g.conv2_b,
            Some(&mut g_h1),
        );
        relu_backward(&mut g_h1, &cache.h1);
        conv3x3_backward(
            &cache.input,
            h,
            w,
            3,
            k,
            &p.conv1_w,
            &g_h1,
            &mut g.conv1_w,
            &mut g.conv1_b,
            None,
        );
        g
    }

    /// Versioned binary checkpoint: magic, u32 version, u32 header length,
    /// JSON header, then every tensor as little-endian f64 in
    /// [`TENSOR_NAMES`] order.
    pub fn to_bytes(&self, meta: &CheckpointMeta) -> Vec<u8> {
        let header = CheckpointHeader {
            dims: self.dims.clone(),
            meta: meta.clone(),
            tensors: TENSOR_NAMES
                .iter()
                .zip(self.params.tensors())
                .map(|(n, t)| (n.to_string(), t.len()))
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Self, CheckpointMeta)> {
        let bad = |m: &str| Error::format(path, m.to_string());
        let magic_len = CHECKPOINT_MAGIC.len();
        if bytes.len() < magic_len + 8 || &bytes[..magic_len] != CHECKPOINT_MAGIC {
            return Err(bad("not a model checkpoint"));
        }
        let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = read_u32(magic_len);
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = read_u32(magic_len + 4) as usize;
        let body = magic_len + 8 + hlen;
        if bytes.len() < body {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[magic_len + 8..body])
            .map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut model = ToyModel::zeroed(header.dims.clone());
        let expected: usize = model.params.tensors().iter().map(|t| t.len()).sum();
        if bytes.len() != body + expected * 8 {
            return Err(bad("payload size does not match header dims"));
        }
        let mut values = bytes[body..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
        for t in model.params.tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().unwrap();
            }
        }
        Ok((model, header.meta))
    }

    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        io::write_bytes(path, &self.to_bytes(meta))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

const CHECKPOINT_MAGIC: &[u8] = b"ANOSEGCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub preset: String,
    pub model_seed: u64,
    pub data_seed: u64,
    pub epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    dims: ModelDims,
    meta: CheckpointMeta,
    tensors: Vec<(String, usize)>,
}

fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn relu_backward(grad: &mut [f64], activated: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Same-padded 3x3 convolution over pixel-major activations.
fn conv3x3(input: &[f64], h: usize, w: usize, cin: usize, cout: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for r in 0..h {
        for c in 0..w {
            let o = &mut out[(r * w + c) * cout..(r * w + c + 1) * cout];
            o.copy_from_slice(bias);
            for dy in 0..3 {
                let rr = r as isize + dy as isize - 1;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let cc = c as isize + dx as isize - 1;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    let tap = dy * 3 + dx;
                    let src = (rr as usize * w + cc as usize) * cin;
                    let x = &input[src..src + cin];
                    let wt = &weight[tap * cin * cout..(tap + 1) * cin * cout];
                    for (ic, &xv) in x.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wt[ic * cout..(ic + 1) * cout];
                        for (ov, wv) in o.iter_mut().zip(wrow) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    weight: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_in: Option<&mut Vec<f64>>,
) {
    for r in 0..h {
        for c in 0..w {
            let go = &grad_out[(r * w + c) * cout..(r * w + c + 1) * cout];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (b, g) in grad_b.iter_mut().zip(go) {
                *b += g;
            }
            for dy in 0..3 {
                let rr = r as isize + dy as isize - 1;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let cc = c as isize + dx as isize - 1;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    let tap = dy * 3 + dx;
                    let src = (rr as usize * w + cc as usize) * cin;
                    let x = &input[src..src + cin];
                    let base = tap * cin * cout;
                    for (ic, &xv) in x.iter().enumerate() {
                        let wrow = &weight[base + ic * cout..base + (ic + 1) * cout];
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let dot: f64 = wrow.iter().zip(go).map(|(a, b)| a * b).sum();
                            gi[src + ic] += dot;
                        }
                        if xv != 0.0 {
                            let gw = &mut grad_w[base + ic * cout..base + (ic + 1) * cout];
                            for (gv, g) in gw.iter_mut().zip(go) {
                                *gv += xv * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            width: 4,
            num_classes: 3,
        }
    }

    fn image(seed: u8) -> ImageRgb {
        ImageRgb::new(9, 8, (0..9 * 8 * 3).map(|i| ((i * 37 + seed as usize * 11) % 256) as u8).collect()).unwrap()
    }

    #[test]
    fn output_shapes() {
        let m = ToyModel::init(ModelDims { width: 16, num_classes: 4 }, 1).unwrap();
        let img = ImageRgb::filled(64, 64, [10, 20, 30]);
        let (v, o) = m.forward(&img).unwrap();
        assert_eq!((v.height, v.width, v.num_classes), (64, 64, 4));
        assert_eq!((o.height, o.width), (64, 64));
        assert!(m.forward(&ImageRgb::filled(7, 12, [0, 0, 0])).is_err());
    }

    #[test]
    fn zero_weights_output_biases() {
        let mut m = ToyModel::zeroed(dims());
        m.params.seg_b = vec![0.5, -1.0, 2.0];
        m.params.ood_b = vec![-0.25];
        let (v, o) = m.forward(&image(3)).unwrap();
        for p in v.pixels() {
            assert_eq!(p, &[0.5, -1.0, 2.0]);
        }
        assert!(o.values.iter().all(|&z| z == -0.25));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ToyModel::init(dims(), 5).unwrap();
        assert_eq!(a, ToyModel::init(dims(), 5).unwrap());
        assert_ne!(a, ToyModel::init(dims(), 6).unwrap());
        let bound = (1.0f64 / 27.0).sqrt();
        assert!(a.params.conv1_w.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = ToyModel::init(dims(), 2).unwrap();
        let meta = CheckpointMeta {
            preset: "dh2".into(),
            model_seed: 2,
            data_seed: 3,
            epochs: 4,
        };
        let bytes = m.to_bytes(&meta);
        let (back, meta2) = ToyModel::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
        assert!(ToyModel::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(ToyModel::from_bytes(b"garbage!garbage!", Path::new("x")).is_err());
    }
}
