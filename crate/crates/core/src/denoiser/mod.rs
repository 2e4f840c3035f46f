//! The denoising network: attribute tokens, floor token, transformer encoder
//! and absolute-pose output heads.

mod encoding;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use encoding::{pe_frequencies, positional_encode, sample_floor_points};

use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng;
use crate::scene::{normalize, FloorPlan, ObjectState, Scene};

const LN_EPS: f64 = 1e-5;
const ROTATION_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub token_dim: usize,
    pub head_count: usize,
    pub layer_count: usize,
    /// Width of the per-layer feed-forward block.
    pub mlp_hidden_dim: usize,
    pub pe_frequencies: usize,
    pub class_count: usize,
    pub shape_count: usize,
    /// Width of each attribute sub-encoding (class, shape, rotation).
    pub attribute_dim: usize,
    pub floor_points: usize,
    pub floor_hidden: [usize; 3],
    pub head_hidden_dim: usize,
    pub leaky_slope: f64,
    /// Seed of the boundary sampling offset, fixed so inference is repeatable.
    pub floor_seed: u64,
    pub desk_preset: bool,
}

impl DenoiserConfig {
    pub fn full(class_count: usize, shape_count: usize) -> Self {
        Self {
            token_dim: 512,
            head_count: 8,
            layer_count: 4,
            mlp_hidden_dim: 2048,
            pe_frequencies: 32,
            class_count,
            shape_count,
            attribute_dim: 128,
            floor_points: 250,
            floor_hidden: [64, 64, 512],
            head_hidden_dim: 256,
            leaky_slope: 0.01,
            floor_seed: 0,
            desk_preset: false,
        }
    }

    pub fn desk(class_count: usize, shape_count: usize) -> Self {
        Self {
            token_dim: 128,
            head_count: 4,
            layer_count: 2,
            mlp_hidden_dim: 256,
            desk_preset: true,
            ..Self::full(class_count, shape_count)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.token_dim < 2 || self.head_count == 0 || !self.token_dim.is_multiple_of(self.head_count) {
            return bad(format!(
                "token_dim {} must be divisible by head_count {}",
                self.token_dim, self.head_count
            ));
        }
        if self.pe_frequencies == 0 {
            return bad("pe_frequencies must be at least 1".into());
        }
        if self.class_count == 0 || self.shape_count == 0 {
            return bad("class_count and shape_count must be positive".into());
        }
        if self.layer_count == 0
            || self.mlp_hidden_dim == 0
            || self.attribute_dim == 0
            || self.head_hidden_dim == 0
            || self.floor_points == 0
            || self.floor_hidden.contains(&0)
        {
            return bad("layer and hidden sizes must be positive".into());
        }
        if !(self.leaky_slope.is_finite() && (0.0..1.0).contains(&self.leaky_slope)) {
            return bad(format!("leaky_slope {} outside [0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    /// Width of the concatenated attribute vector (640 at the defaults).
    pub fn attribute_width(&self) -> usize {
        let pe = 2 * self.pe_frequencies;
        2 * pe + 2 * pe + 3 * self.attribute_dim
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }
}

/// Raw network output per object: `(t̂x, t̂y, r̂cos, r̂sin)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformPrediction {
    pub rows: Vec<[f64; 4]>,
}

impl TransformPrediction {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn translation(&self, i: usize) -> [f64; 2] {
        [self.rows[i][0], self.rows[i][1]]
    }

    /// Rotation divided by its norm, with a small floor on the norm.
    pub fn rotation(&self, i: usize) -> [f64; 2] {
        let r = [self.rows[i][2], self.rows[i][3]];
        let n = r[0].hypot(r[1]).max(ROTATION_NORM_FLOOR);
        if n == ROTATION_NORM_FLOOR {
            return normalize([1.0, 0.0]);
        }
        [r[0] / n, r[1] / n]
    }

    /// `scene` with every object moved to its predicted pose.
    pub fn apply(&self, scene: &Scene) -> Scene {
        let mut out = scene.clone();
        for (i, o) in out.objects.iter_mut().enumerate() {
            o.translation = self.translation(i);
            o.rotation = self.rotation(i);
        }
        out
    }
}

#[derive(Clone)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone)]
struct Ids {
    rot: (ParamId, ParamId),
    class1: (ParamId, ParamId),
    class2: (ParamId, ParamId),
    shape_table: ParamId,
    shape1: (ParamId, ParamId),
    shape2: (ParamId, ParamId),
    obj1: (ParamId, ParamId),
    obj2: (ParamId, ParamId),
    floor: [(ParamId, ParamId); 3],
    floor_out: (ParamId, ParamId),
    layers: Vec<LayerIds>,
    ln_final: (ParamId, ParamId),
    head1: (ParamId, ParamId),
    head2: (ParamId, ParamId),
}

/// Outputs of a batched forward pass.
pub struct BatchOutput {
    /// All objects of all scenes stacked in input order, `N×4`.
    pub output: Var,
    /// Row offset of each scene in `output`, plus the total at the end.
    pub offsets: Vec<usize>,
}

/// Floor tokens computed outside any tape, keyed by floor plan.
#[derive(Default)]
pub struct FloorTokenCache {
    entries: Vec<(FloorPlan, Tensor)>,
}

impl FloorTokenCache {
    pub fn new() -> Self {
        Self::default()
    }
}

#[derive(Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    ids: Ids,
    freqs: Vec<f64>,
}

impl Denoiser {
    /// Fresh network with seeded uniform initialization.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let mut p = ParamStore::new();
        let c = &config;
        let d = c.token_dim;
        let a = c.attribute_dim;
        let pe = 2 * c.pe_frequencies;

        fn linear(p: &mut ParamStore, r: &mut rng::Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<(ParamId, ParamId)> {
            let w = p.add_uniform(&format!("{name}.w"), fan_in, fan_out, fan_in, r)?;
            let b = p.add_uniform(&format!("{name}.b"), 1, fan_out, fan_in, r)?;
            Ok((w, b))
        }
        fn norm(p: &mut ParamStore, name: &str, d: usize) -> Result<(ParamId, ParamId)> {
            let mut ones = Tensor::zeros(1, d);
            ones.data_mut().fill(1.0);
            Ok((p.add(&format!("{name}.gain"), ones)?, p.add(&format!("{name}.bias"), Tensor::zeros(1, d))?))
        }

        let rot = linear(&mut p, &mut r, "object.rotation", pe, a)?;
        let class1 = linear(&mut p, &mut r, "object.class1", c.class_count, a)?;
        let class2 = linear(&mut p, &mut r, "object.class2", a, a)?;
        let shape_table = {
            let mut sr = rng::seeded(rng::derive(seed, 1));
            p.add_uniform("object.shape_embedding", c.shape_count, a, 1, &mut sr)?
        };
        let shape1 = linear(&mut p, &mut r, "object.shape1", a, a)?;
        let shape2 = linear(&mut p, &mut r, "object.shape2", a, a)?;
        let obj1 = linear(&mut p, &mut r, "object.mlp1", c.attribute_width(), d)?;
        let obj2 = linear(&mut p, &mut r, "object.mlp2", d, d - 1)?;
        let [h1, h2, h3] = c.floor_hidden;
        let floor = [
            linear(&mut p, &mut r, "floor.point1", 4, h1)?,
            linear(&mut p, &mut r, "floor.point2", h1, h2)?,
            linear(&mut p, &mut r, "floor.point3", h2, h3)?,
        ];
        let floor_out = linear(&mut p, &mut r, "floor.out", h3, d - 1)?;
        let mut layers = Vec::with_capacity(c.layer_count);
        for l in 0..c.layer_count {
            let name = |s: &str| format!("layer{l}.{s}");
            let ln1 = norm(&mut p, &name("ln1"), d)?;
            let wq = p.add_uniform(&name("query.w"), d, d, d, &mut r)?;
            let wk = p.add_uniform(&name("key.w"), d, d, d, &mut r)?;
            let wv = p.add_uniform(&name("value.w"), d, d, d, &mut r)?;
            let wo = linear(&mut p, &mut r, &name("attn_out"), d, d)?;
            let ln2 = norm(&mut p, &name("ln2"), d)?;
            let ff1 = linear(&mut p, &mut r, &name("ff1"), d, c.mlp_hidden_dim)?;
            let ff2 = linear(&mut p, &mut r, &name("ff2"), c.mlp_hidden_dim, d)?;
            layers.push(LayerIds {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                ff1,
                ff2,
            });
        }
        let ln_final = norm(&mut p, "final_ln", d)?;
        let head1 = linear(&mut p, &mut r, "head1", d, c.head_hidden_dim)?;
        let head2 = linear(&mut p, &mut r, "head2", c.head_hidden_dim, 4)?;

        let ids = Ids {
            rot,
            class1,
            class2,
            shape_table,
            shape1,
            shape2,
            obj1,
            obj2,
            floor,
            floor_out,
            layers,
            ln_final,
            head1,
            head2,
        };
        let freqs = pe_frequencies(c.pe_frequencies);
        Ok(Self {
            config,
            params: p,
            ids,
            freqs,
        })
    }

    /// Network with the given parameters, which must match `config` exactly.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(&params)?;
        Ok(model)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: DenoiserConfig = serde_json::from_value(ckpt.meta["model"].clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("model config: {e}")))?;
        let params = ckpt.to_store()?;
        Self::from_params(config, params).map_err(|e| match e {
            Error::UntrainedParams(m) => Error::IncompatibleCheckpoint(m),
            other => other,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Checkpoint carrying the config under `meta.model` plus `extra` fields.
    pub fn checkpoint(&self, extra: serde_json::Map<String, serde_json::Value>) -> Checkpoint {
        let mut meta = extra;
        meta.insert(
            "model".into(),
            serde_json::to_value(&self.config).expect("config serializes"),
        );
        Checkpoint::from_store(&self.params, serde_json::Value::Object(meta))
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_scene(&self, scene: &Scene) -> Result<()> {
        for o in &scene.objects {
            if o.class_id >= self.config.class_count {
                return Err(Error::ClassOutOfRange {
                    class: o.class_id,
                    class_count: self.config.class_count,
                });
            }
            if o.shape_id >= self.config.shape_count {
                return Err(Error::ShapeOutOfRange {
                    shape: o.shape_id,
                    shape_count: self.config.shape_count,
                });
            }
        }
        Ok(())
    }

    fn lin(g: &mut Graph, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (g.param(w), g.param(b));
        g.linear(x, w, b)
    }

    /// Positional features of each object: `PE(tx)‖PE(ty)`, `PE(θ)` and
    /// `PE(bx)‖PE(by)`.
    fn attribute_inputs(&self, objects: &[&ObjectState]) -> Result<(Tensor, Tensor, Tensor)> {
        let pe = 2 * self.freqs.len();
        let mut t = Vec::with_capacity(objects.len() * 2 * pe);
        let mut r = Vec::with_capacity(objects.len() * pe);
        let mut b = Vec::with_capacity(objects.len() * 2 * pe);
        for o in objects {
            t.extend(positional_encode(o.translation[0], &self.freqs));
            t.extend(positional_encode(o.translation[1], &self.freqs));
            r.extend(positional_encode(o.angle(), &self.freqs));
            b.extend(positional_encode(o.bbox[0], &self.freqs));
            b.extend(positional_encode(o.bbox[1], &self.freqs));
        }
        let n = objects.len();
        Ok((
            Tensor::from_vec(n, 2 * pe, t)?,
            Tensor::from_vec(n, pe, r)?,
            Tensor::from_vec(n, 2 * pe, b)?,
        ))
    }

    /// Object tokens without the type bit, `N×(token_dim−1)`.
    fn encode_objects(&self, g: &mut Graph, objects: &[&ObjectState]) -> Result<Var> {
        let slope = self.config.leaky_slope;
        let ids = &self.ids;
        let (t, r, b) = self.attribute_inputs(objects)?;
        let t = g.input(t);
        let r = g.input(r);
        let b = g.input(b);
        let rot = Self::lin(g, r, ids.rot)?;

        // Class MLP evaluated on every one-hot row at once, then gathered.
        let w = g.param(ids.class1.0);
        let bias = g.param(ids.class1.1);
        let h = g.add_row(w, bias)?;
        let h = g.leaky_relu(h, slope);
        let class_table = Self::lin(g, h, ids.class2)?;
        let class_idx: Vec<usize> = objects.iter().map(|o| o.class_id).collect();
        let class = g.gather_rows(class_table, &class_idx)?;

        let emb = g.param(ids.shape_table);
        let h = Self::lin(g, emb, ids.shape1)?;
        let h = g.leaky_relu(h, slope);
        let shape_table = Self::lin(g, h, ids.shape2)?;
        let shape_idx: Vec<usize> = objects.iter().map(|o| o.shape_id).collect();
        let shape = g.gather_rows(shape_table, &shape_idx)?;

        let attrs = g.concat_cols(&[t, rot, b, class, shape])?;
        let h = Self::lin(g, attrs, ids.obj1)?;
        let h = g.leaky_relu(h, slope);
        Self::lin(g, h, ids.obj2)
    }

    /// Floor token without the type bit, `1×(token_dim−1)`.
    fn encode_floor_var(&self, g: &mut Graph, floor: &FloorPlan) -> Result<Var> {
        let pts = sample_floor_points(floor, self.config.floor_points, self.config.floor_seed)?;
        let mut h = g.input(pts);
        for layer in self.ids.floor {
            h = Self::lin(g, h, layer)?;
            h = g.leaky_relu(h, self.config.leaky_slope);
        }
        let pooled = g.max_rows(h)?;
        Self::lin(g, pooled, self.ids.floor_out)
    }

    /// The full floor token, including the type bit, as a value.
    pub fn encode_floor(&self, floor: &FloorPlan) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let v = self.encode_floor_var(&mut g, floor)?;
        let mut out = g.value(v).data().to_vec();
        out.push(1.0);
        Ok(out)
    }

    /// A single object's token, including the type bit.
    pub fn encode_object(&self, object: &ObjectState) -> Result<Vec<f64>> {
        if object.class_id >= self.config.class_count {
            return Err(Error::ClassOutOfRange {
                class: object.class_id,
                class_count: self.config.class_count,
            });
        }
        if object.shape_id >= self.config.shape_count {
            return Err(Error::ShapeOutOfRange {
                shape: object.shape_id,
                shape_count: self.config.shape_count,
            });
        }
        let mut g = Graph::new(&self.params);
        let v = self.encode_objects(&mut g, &[object])?;
        let mut out = g.value(v).data().to_vec();
        out.push(0.0);
        Ok(out)
    }

    /// Records the forward pass for a batch of scenes on `g`.
    ///
    /// Row-wise layers run on all tokens of the batch stacked together;
    /// attention runs per scene. Each scene's result is identical to running
    /// it alone. With `cache`, floor tokens are taken from (and stored in) the
    /// cache as constants, which is only appropriate when no gradient is
    /// needed.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        scenes: &[&Scene],
        cache: Option<&mut FloorTokenCache>,
    ) -> Result<BatchOutput> {
        self.forward_impl(g, scenes, cache, 1.0)
    }

    fn forward_impl(
        &self,
        g: &mut Graph,
        scenes: &[&Scene],
        mut cache: Option<&mut FloorTokenCache>,
        floor_bit: f64,
    ) -> Result<BatchOutput> {
        if !std::ptr::eq(g.params(), &self.params) {
            return Err(Error::shape("forward", "graph built over a different parameter store"));
        }
        for s in scenes {
            self.check_scene(s)?;
        }
        let d = self.config.token_dim;
        let slope = self.config.leaky_slope;
        let objects: Vec<&ObjectState> = scenes.iter().flat_map(|s| s.objects.iter()).collect();
        let mut offsets = Vec::with_capacity(scenes.len() + 1);
        let mut total = 0;
        for s in scenes {
            offsets.push(total);
            total += s.len();
        }
        offsets.push(total);
        if total == 0 {
            return Err(Error::InvalidScene("batch has no objects".into()));
        }

        let obj_tokens = self.encode_objects(g, &objects)?;

        let mut floor_vars: Vec<(&FloorPlan, Var)> = Vec::new();
        let mut pieces = Vec::with_capacity(2 * scenes.len());
        let mut bits = Vec::with_capacity(total + scenes.len());
        for (si, s) in scenes.iter().enumerate() {
            let floor = match floor_vars.iter().find(|(f, _)| *f == &s.floor) {
                Some(&(_, v)) => v,
                None => {
                    let v = match cache.as_deref_mut() {
                        Some(cache) => {
                            let t = match cache.entries.iter().find(|(f, _)| f == &s.floor) {
                                Some((_, t)) => t.clone(),
                                None => {
                                    let mut fg = Graph::new(&self.params);
                                    let fv = self.encode_floor_var(&mut fg, &s.floor)?;
                                    let t = fg.value(fv).clone();
                                    cache.entries.push((s.floor.clone(), t.clone()));
                                    t
                                }
                            };
                            g.input(t)
                        }
                        None => self.encode_floor_var(g, &s.floor)?,
                    };
                    floor_vars.push((&s.floor, v));
                    v
                }
            };
            if !s.is_empty() {
                pieces.push(g.slice_rows(obj_tokens, offsets[si], s.len())?);
            }
            pieces.push(floor);
            bits.extend(std::iter::repeat_n(0.0, s.len()));
            bits.push(floor_bit);
        }
        let stacked = g.concat_rows(&pieces)?;
        let bit_col = g.input(Tensor::from_vec(bits.len(), 1, bits)?);
        let mut x = g.concat_cols(&[stacked, bit_col])?;

        let heads = self.config.head_count;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        for layer in &self.ids.layers {
            let (gain, bias) = (g.param(layer.ln1.0), g.param(layer.ln1.1));
            let h = g.layer_norm(x, gain, bias, LN_EPS)?;
            let (wq, wk, wv) = (g.param(layer.wq), g.param(layer.wk), g.param(layer.wv));
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let mut mixed = Vec::with_capacity(scenes.len());
            for (si, s) in scenes.iter().enumerate() {
                let start = offsets[si] + si;
                let len = s.len() + 1;
                let (qs, ks, vs) = (
                    g.slice_rows(q, start, len)?,
                    g.slice_rows(k, start, len)?,
                    g.slice_rows(v, start, len)?,
                );
                let mut per_head = Vec::with_capacity(heads);
                for hi in 0..heads {
                    let qh = g.slice_cols(qs, hi * hd, hd)?;
                    let kh = g.slice_cols(ks, hi * hd, hd)?;
                    let vh = g.slice_cols(vs, hi * hd, hd)?;
                    let scores = g.matmul_nt(qh, kh)?;
                    let scores = g.scale(scores, scale);
                    let probs = g.softmax_rows(scores);
                    per_head.push(g.attn_mix(probs, vh)?);
                }
                mixed.push(g.concat_cols(&per_head)?);
            }
            let attn = g.concat_rows(&mixed)?;
            let attn = Self::lin(g, attn, layer.wo)?;
            x = g.add(x, attn)?;

            let (gain, bias) = (g.param(layer.ln2.0), g.param(layer.ln2.1));
            let h = g.layer_norm(x, gain, bias, LN_EPS)?;
            let h = Self::lin(g, h, layer.ff1)?;
            let h = g.leaky_relu(h, slope);
            let h = Self::lin(g, h, layer.ff2)?;
            x = g.add(x, h)?;
        }
        let (gain, bias) = (g.param(self.ids.ln_final.0), g.param(self.ids.ln_final.1));
        let x = g.layer_norm(x, gain, bias, LN_EPS)?;

        let object_rows: Vec<usize> = scenes
            .iter()
            .enumerate()
            .flat_map(|(si, s)| {
                let start = offsets[si] + si;
                start..start + s.len()
            })
            .collect();
        let x = g.gather_rows(x, &object_rows)?;
        let h = Self::lin(g, x, self.ids.head1)?;
        let h = g.leaky_relu(h, slope);
        let output = Self::lin(g, h, self.ids.head2)?;
        Ok(BatchOutput { output, offsets })
    }

    /// Predicted absolute poses for every object of `scene`.
    pub fn forward(&self, scene: &Scene) -> Result<TransformPrediction> {
        self.forward_cached(scene, None)
    }

    pub fn forward_cached(&self, scene: &Scene, cache: Option<&mut FloorTokenCache>) -> Result<TransformPrediction> {
        let mut g = Graph::new(&self.params);
        let out = self.forward_batch(&mut g, &[scene], cache)?;
        let t = g.value(out.output);
        if !t.is_finite() {
            return Err(Error::NonFinite("denoiser forward"));
        }
        Ok(TransformPrediction {
            rows: (0..t.rows()).map(|i| {
                let r = t.row(i);
                [r[0], r[1], r[2], r[3]]
            }).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, TableChairSpec, Variant};

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            token_dim: 16,
            head_count: 2,
            layer_count: 1,
            mlp_hidden_dim: 24,
            pe_frequencies: 4,
            attribute_dim: 8,
            floor_points: 20,
            floor_hidden: [8, 8, 16],
            head_hidden_dim: 12,
            ..DenoiserConfig::desk(2, 3)
        }
    }

    fn table_chair(seed: u64) -> Scene {
        synth::generate_clean(&TableChairSpec::new(Variant::SymmetryParallelism, seed)).unwrap()
    }

    #[test]
    fn desk_attribute_width_is_640() {
        assert_eq!(DenoiserConfig::desk(2, 3).attribute_width(), 640);
        assert_eq!(DenoiserConfig::full(2, 3).attribute_width(), 640);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.head_count = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny();
        c.pe_frequencies = 0;
        assert!(c.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn output_has_one_row_per_object_and_unit_rotations() {
        let model = Denoiser::new(DenoiserConfig::desk(2, 3), 1).unwrap();
        let scene = table_chair(4);
        let pred = model.forward(&scene).unwrap();
        assert_eq!(pred.len(), scene.len());
        for i in 0..pred.len() {
            let r = pred.rotation(i);
            assert!((r[0].hypot(r[1]) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn token_lengths_and_type_bits() {
        let model = Denoiser::new(DenoiserConfig::desk(2, 3), 2).unwrap();
        let scene = table_chair(1);
        let tok = model.encode_object(&scene.objects[0]).unwrap();
        assert_eq!(tok.len(), 128);
        assert_eq!(tok[127], 0.0);
        let floor = model.encode_floor(&scene.floor).unwrap();
        assert_eq!(floor.len(), 128);
        assert_eq!(floor[127], 1.0);
    }

    #[test]
    fn class_path_ablation() {
        let mut model = Denoiser::new(tiny(), 3).unwrap();
        let a = ObjectState::new(0, [0.2, -0.1], 0.4, [0.1, 0.2], 1);
        let b = ObjectState { class_id: 1, ..a.clone() };
        assert_ne!(model.encode_object(&a).unwrap(), model.encode_object(&b).unwrap());
        for name in ["object.class1.w", "object.class2.w"] {
            let id = model.params().find(name).unwrap();
            model.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        assert_eq!(model.encode_object(&a).unwrap(), model.encode_object(&b).unwrap());
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let model = Denoiser::new(tiny(), 3).unwrap();
        let o = ObjectState::new(5, [0.0, 0.0], 0.0, [0.1, 0.1], 0);
        assert!(matches!(model.encode_object(&o), Err(Error::ClassOutOfRange { .. })));
        let o = ObjectState::new(0, [0.0, 0.0], 0.0, [0.1, 0.1], 9);
        assert!(matches!(model.encode_object(&o), Err(Error::ShapeOutOfRange { .. })));
    }

    #[test]
    fn distinct_floors_give_distinct_tokens() {
        let model = Denoiser::new(DenoiserConfig::desk(2, 3), 5).unwrap();
        let square = FloorPlan::unit_square();
        let l_shape = FloorPlan::new(vec![
            [-1.0, -1.0],
            [1.0, -1.0],
            [1.0, 0.0],
            [0.0, 0.0],
            [0.0, 1.0],
            [-1.0, 1.0],
        ])
        .unwrap();
        let a = model.encode_floor(&square).unwrap();
        let b = model.encode_floor(&l_shape).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-3, "{diff}");
    }

    #[test]
    fn permuting_objects_permutes_outputs_exactly() {
        let model = Denoiser::new(DenoiserConfig::desk(2, 3), 6).unwrap();
        let scene = synth::perturb_bimodal(&table_chair(2), 11);
        let pred = model.forward(&scene).unwrap();
        let n = scene.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
        let mut shuffled = scene.clone();
        shuffled.objects = perm.iter().map(|&i| scene.objects[i].clone()).collect();
        let pred_s = model.forward(&shuffled).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(pred_s.rows[k], pred.rows[i]);
        }
    }

    #[test]
    fn batched_forward_matches_single_scenes() {
        let model = Denoiser::new(tiny(), 7).unwrap();
        let a = table_chair(3);
        let b = synth::generate_clean(&TableChairSpec::new(Variant::UniformSpacing, 4)).unwrap();
        let mut g = Graph::new(model.params());
        let out = model.forward_batch(&mut g, &[&a, &b], None).unwrap();
        let t = g.value(out.output).clone();
        for (si, s) in [&a, &b].iter().enumerate() {
            let single = model.forward(s).unwrap();
            for i in 0..s.len() {
                assert_eq!(t.row(out.offsets[si] + i), &single.rows[i][..]);
            }
        }
        let mut cache = FloorTokenCache::new();
        assert_eq!(model.forward_cached(&a, Some(&mut cache)).unwrap(), model.forward(&a).unwrap());
        assert_eq!(model.forward_cached(&a, Some(&mut cache)).unwrap(), model.forward(&a).unwrap());
    }

    #[test]
    fn floor_type_bit_matters() {
        let model = Denoiser::new(tiny(), 8).unwrap();
        let scene = table_chair(5);
        let base = model.forward(&scene).unwrap();
        let mut g = Graph::new(model.params());
        let flipped = model.forward_impl(&mut g, &[&scene], None, 0.0).unwrap().output;
        assert!((0..scene.len()).any(|i| g.value(flipped).row(i) != &base.rows[i][..]));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Denoiser::new(tiny(), 9).unwrap();
        let ck = model.checkpoint(serde_json::Map::new());
        let back = Denoiser::from_checkpoint(&ck).unwrap();
        let scene = table_chair(6);
        assert_eq!(back.forward(&scene).unwrap(), model.forward(&scene).unwrap());
        let mut other = ck.clone();
        other.meta["model"]["token_dim"] = serde_json::json!(32);
        assert!(matches!(Denoiser::from_checkpoint(&other), Err(Error::IncompatibleCheckpoint(_))));
    }
}
