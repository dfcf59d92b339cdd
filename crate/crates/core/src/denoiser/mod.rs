//! The denoising network: per-input embeddings, self-attention over the
//! resulting tokens and a skip-connected decoder predicting the clean hand.

pub mod points;

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{DiffusionSchedule, Normalizer, ScheduleSpec};
use crate::hand::HAND_DIM;
use crate::io::{load_checkpoint, save_checkpoint};
use crate::nn::{normal, Graph, LayerNorm, Linear, ParamId, ParamStore, Var};
use crate::rng::{self, Domain};
use crate::{Error, Result};
pub use points::{prepare_cloud, PointEncoder, PreparedCloud, SetAbstraction};

pub const CHECKPOINT_KIND: &str = "denoiser";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub profile: String,
    /// Hidden width of the embedding MLPs.
    pub hidden: usize,
    /// Token width.
    pub embed: usize,
    pub time_encoding: usize,
    pub heads: usize,
    pub feed_forward: usize,
    pub blocks: usize,
    pub global: usize,
    pub decoder_width: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub object: Option<SetAbstraction>,
}

impl NetConfig {
    pub fn small() -> Self {
        NetConfig {
            profile: "small".into(),
            hidden: 256,
            embed: 128,
            time_encoding: 128,
            heads: 4,
            feed_forward: 256,
            blocks: 1,
            global: 256,
            decoder_width: 256,
            decoder_layers: 7,
            dropout: 0.1,
            object: None,
        }
    }

    pub fn paper() -> Self {
        NetConfig {
            profile: "paper".into(),
            hidden: 2056,
            embed: 512,
            time_encoding: 512,
            heads: 4,
            feed_forward: 2048,
            blocks: 2,
            global: 2056,
            decoder_width: 2056,
            decoder_layers: 7,
            dropout: 0.1,
            object: None,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::small()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::InvalidArgument(format!("unknown profile {other:?}"))),
        }
    }

    pub fn with_object(mut self) -> Self {
        self.object = Some(SetAbstraction::object());
        self
    }

    fn tokens(&self) -> usize {
        if self.object.is_some() {
            4
        } else {
            3
        }
    }
}

/// Standard transformer sinusoid: half sines then half cosines.
pub fn time_encoding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

#[derive(Debug, Clone)]
struct Mlp2 {
    a: Linear,
    b: Linear,
}

impl Mlp2 {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dims: [usize; 3]) -> Self {
        Mlp2 {
            a: Linear::new(store, rng, &format!("{name}.0"), dims[0], dims[1]),
            b: Linear::new(store, rng, &format!("{name}.1"), dims[1], dims[2]),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.a.forward(g, x);
        let h = g.silu(h);
        self.b.forward(g, h)
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, e: usize, ff: usize) -> Self {
        EncoderBlock {
            q: Linear::new(store, rng, &format!("{name}.q"), e, e),
            k: Linear::new(store, rng, &format!("{name}.k"), e, e),
            v: Linear::new(store, rng, &format!("{name}.v"), e, e),
            o: Linear::new(store, rng, &format!("{name}.o"), e, e),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), e),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), e, ff),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), ff, e),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), e),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var, seq: usize, heads: usize, p: f64) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, x);
        let v = self.v.forward(g, x);
        let a = g.attention(q, k, v, seq, heads);
        let a = self.o.forward(g, a);
        let a = g.dropout(a, p);
        let h = g.add(x, a);
        let h = self.norm1.forward(g, h);
        let f = self.ff1.forward(g, h);
        let f = g.relu(f);
        let f = g.dropout(f, p);
        let f = self.ff2.forward(g, f);
        let f = g.dropout(f, p);
        let h2 = g.add(h, f);
        self.norm2.forward(g, h2)
    }
}

/// One denoiser input batch. Rows of `cond` flagged in `dropped` are
/// replaced by the learned null token.
pub struct Batch<'a> {
    pub x_t: Array2<f64>,
    pub cond: Array2<f64>,
    pub dropped: Vec<bool>,
    pub t: Vec<usize>,
    pub objects: Vec<&'a PreparedCloud>,
}

#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub cfg: NetConfig,
    pub store: ParamStore,
    noisy_mlp: Mlp2,
    cond_mlp: Mlp2,
    time_mlp: Mlp2,
    pub null_token: ParamId,
    blocks: Vec<EncoderBlock>,
    global: Linear,
    decoder: Vec<Linear>,
    object: Option<PointEncoder>,
    /// Maps hand parameters to the diffusion space; fitted by training.
    pub norm: Normalizer,
}

impl DenoiserNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Domain::Init, 0);
        let mut store = ParamStore::default();
        let (h, e) = (cfg.hidden, cfg.embed);
        let noisy_mlp = Mlp2::new(&mut store, &mut rng, "noisy", [HAND_DIM, h, e]);
        let cond_mlp = Mlp2::new(&mut store, &mut rng, "cond", [HAND_DIM, h, e]);
        let time_mlp = Mlp2::new(&mut store, &mut rng, "time", [cfg.time_encoding, h, e]);
        let null_token = store.add("null_token", normal(&mut rng, 1.0, 1, e));
        let blocks = (0..cfg.blocks)
            .map(|i| EncoderBlock::new(&mut store, &mut rng, &format!("block{i}"), e, cfg.feed_forward))
            .collect();
        let global = Linear::new(&mut store, &mut rng, "global", cfg.tokens() * e, cfg.global);
        let object = cfg
            .object
            .clone()
            .map(|sa| PointEncoder::new(&mut store, &mut rng, "object", sa, e));
        let skip = e * if object.is_some() { 3 } else { 2 };
        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        for layer in 1..=cfg.decoder_layers {
            let input = if layer == 1 { cfg.global } else { cfg.decoder_width };
            let input = input + skip + if layer % 2 == 1 { e } else { 0 };
            let output = if layer == cfg.decoder_layers { HAND_DIM } else { cfg.decoder_width };
            decoder.push(Linear::new(&mut store, &mut rng, &format!("decoder{layer}"), input, output));
        }
        DenoiserNet {
            cfg,
            store,
            noisy_mlp,
            cond_mlp,
            time_mlp,
            null_token,
            blocks,
            global,
            decoder,
            object,
            norm: Normalizer::identity(),
        }
    }

    pub fn is_object_conditional(&self) -> bool {
        self.object.is_some()
    }

    pub fn prepare_object(&self, points: &[nalgebra::Vector3<f64>]) -> Result<PreparedCloud> {
        let sa = self.cfg.object.as_ref().ok_or(Error::InvalidArgument(
            "model has no object branch".into(),
        ))?;
        prepare_cloud(points, sa)
    }

    /// Embeds prepared object clouds, one row each.
    pub fn embed_object(&self, clouds: &[&PreparedCloud]) -> Result<Array2<f64>> {
        let enc = self.object.as_ref().ok_or(Error::MissingObject)?;
        let mut g = Graph::new(&self.store);
        let v = enc.forward(&mut g, clouds);
        Ok(g.value(v).clone())
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let b = batch.x_t.nrows();
        if batch.x_t.ncols() != HAND_DIM || batch.cond.dim() != (b, HAND_DIM) || batch.dropped.len() != b || batch.t.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "denoiser batch: x_t {:?}, cond {:?}, {} flags, {} times",
                batch.x_t.dim(),
                batch.cond.dim(),
                batch.dropped.len(),
                batch.t.len()
            )));
        }
        let obj_token = match &self.object {
            Some(enc) => {
                if batch.objects.len() != b {
                    return Err(Error::MissingObject);
                }
                Some(enc.forward(g, &batch.objects))
            }
            None => None,
        };
        let p = self.cfg.dropout;
        let x = g.input(batch.x_t.clone());
        let noisy = self.noisy_mlp.forward(g, x);
        let c = g.input(batch.cond.clone());
        let cond = self.cond_mlp.forward(g, c);
        let cond = g.substitute(cond, self.null_token, &batch.dropped);
        let te = self.cfg.time_encoding;
        let enc: Vec<f64> = batch.t.iter().flat_map(|&t| time_encoding(t, te)).collect();
        let tin = g.input(Array2::from_shape_vec((b, te), enc).unwrap());
        let time = self.time_mlp.forward(g, tin);
        let mut tokens = vec![noisy, cond, time];
        tokens.extend(obj_token);
        let seq = tokens.len();
        let mut h = g.stack(&tokens);
        for block in &self.blocks {
            h = block.forward(g, h, seq, self.cfg.heads, p);
        }
        let flat = g.reshape(h, b, seq * self.cfg.embed);
        let mut h = self.global.forward(g, flat);
        let mut skips = vec![cond, time];
        skips.extend(obj_token);
        for (i, layer) in self.decoder.iter().enumerate() {
            let mut parts = vec![h];
            parts.extend(&skips);
            if i % 2 == 0 {
                parts.push(noisy);
            }
            let input = g.concat(&parts);
            h = layer.forward(g, input);
            if i + 1 < self.decoder.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Evaluation-mode clean estimates.
    pub fn predict(&self, batch: &Batch) -> Result<Array2<f64>> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, batch)?;
        Ok(g.value(out).clone())
    }

    pub fn save(&self, dir: &Path, schedule: &ScheduleSpec, extra: serde_json::Value) -> Result<String> {
        let meta = serde_json::json!({
            "net": self.cfg,
            "schedule": schedule,
            "normalizer": self.norm,
            "train": extra,
        });
        save_checkpoint(dir, CHECKPOINT_KIND, &self.store.to_tensors(), meta)
    }

    pub fn load(dir: &Path) -> Result<(DenoiserNet, DiffusionSchedule, String)> {
        let (manifest, tensors) = load_checkpoint(dir, CHECKPOINT_KIND)?;
        let bad = |what: &str| Error::LayoutMismatch(format!("checkpoint manifest lacks a valid {what}"));
        let cfg: NetConfig = serde_json::from_value(manifest.meta["net"].clone()).map_err(|_| bad("net"))?;
        let spec: ScheduleSpec = serde_json::from_value(manifest.meta["schedule"].clone()).map_err(|_| bad("schedule"))?;
        let mut net = DenoiserNet::new(cfg, 0);
        net.store.load_tensors(&tensors)?;
        if let Some(v) = manifest.meta.get("normalizer") {
            net.norm = serde_json::from_value(v.clone()).map_err(|_| bad("normalizer"))?;
            net.norm.validate()?;
        }
        Ok((net, DiffusionSchedule::from_spec(&spec)?, manifest.checksum))
    }
}

/// Anything that maps noisy hands to clean estimates. Lets the sampler and
/// regularizer run against the network or an analytic oracle.
///
/// Inputs and outputs live in the standardized space of [`Denoiser::normalizer`].
pub trait Denoiser: Sync {
    /// `cond[i] = None` selects the unconditional branch.
    fn predict_x0(
        &self,
        x_t: &[[f64; HAND_DIM]],
        cond: &[Option<[f64; HAND_DIM]>],
        t: &[usize],
        objects: &[&PreparedCloud],
    ) -> Result<Vec<[f64; HAND_DIM]>>;

    fn is_object_conditional(&self) -> bool {
        false
    }

    fn normalizer(&self) -> Normalizer {
        Normalizer::identity()
    }
}

pub fn rows_to_array(rows: &[[f64; HAND_DIM]]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), HAND_DIM), |(i, j)| rows[i][j])
}

impl Denoiser for DenoiserNet {
    fn predict_x0(
        &self,
        x_t: &[[f64; HAND_DIM]],
        cond: &[Option<[f64; HAND_DIM]>],
        t: &[usize],
        objects: &[&PreparedCloud],
    ) -> Result<Vec<[f64; HAND_DIM]>> {
        let batch = Batch {
            x_t: rows_to_array(x_t),
            cond: Array2::from_shape_fn((cond.len(), HAND_DIM), |(i, j)| cond[i].map_or(0.0, |c| c[j])),
            dropped: cond.iter().map(Option::is_none).collect(),
            t: t.to_vec(),
            objects: objects.to_vec(),
        };
        let out = self.predict(&batch)?;
        Ok(out
            .rows()
            .into_iter()
            .map(|r| std::array::from_fn(|j| r[j]))
            .collect())
    }

    fn is_object_conditional(&self) -> bool {
        DenoiserNet::is_object_conditional(self)
    }

    fn normalizer(&self) -> Normalizer {
        self.norm.clone()
    }
}

#[cfg(test)]
mod tests;
