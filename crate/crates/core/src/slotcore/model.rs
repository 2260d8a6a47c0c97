use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::graph::{Graph, Var};
use super::params::ModelParams;
use super::{AttentionMaps, FeatureMap, SlotError, SlotState};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// 3 for RGB, 4 for XYZd front views.
    pub in_channels: usize,
    /// Decoder output channels.
    pub out_channels: usize,
    /// Feature and slot width `D`.
    pub width: usize,
    pub stem_width: usize,
    pub decoder_width: usize,
    pub mlp_hidden: usize,
    /// Object slots `K`.
    pub num_slots: usize,
    pub background_slot: bool,
    /// Total encoder stride: 1, 2 or 4.
    pub downsample: usize,
    /// Attention steps on the first frame of a video.
    pub first_frame_iters: usize,
    /// Attention steps on every later frame.
    pub frame_iters: usize,
}

impl ModelConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels: in_channels,
            width: 64,
            stem_width: 32,
            decoder_width: 16,
            mlp_hidden: 128,
            num_slots: 5,
            background_slot: true,
            downsample: 4,
            first_frame_iters: 3,
            frame_iters: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SlotError> {
        if self.in_channels == 0 || self.out_channels == 0 || self.width == 0 || self.num_slots == 0 {
            return Err(SlotError::Shape("channel counts and slot count must be positive".into()));
        }
        if !matches!(self.downsample, 1 | 2 | 4) {
            return Err(SlotError::Shape(format!("unsupported downsample {}", self.downsample)));
        }
        if self.first_frame_iters == 0 || self.frame_iters == 0 {
            return Err(SlotError::Shape("attention iterations must be positive".into()));
        }
        Ok(())
    }

    /// Rows of the slot matrix: `K` plus the background slot.
    pub fn slot_rows(&self) -> usize {
        self.num_slots + usize::from(self.background_slot)
    }

    fn strides(&self) -> (usize, usize) {
        match self.downsample {
            4 => (2, 2),
            2 => (2, 1),
            _ => (1, 1),
        }
    }

    /// Feature grid size for an input of `height×width`.
    pub fn feature_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let (s1, s2) = self.strides();
        let step = |n: usize, s: usize| (n + 2 - 3) / s + 1;
        (step(step(height, s1), s2), step(step(width, s1), s2))
    }

    pub fn to_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        for (k, v) in [
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
            ("width", self.width),
            ("stem_width", self.stem_width),
            ("decoder_width", self.decoder_width),
            ("mlp_hidden", self.mlp_hidden),
            ("num_slots", self.num_slots),
            ("background_slot", usize::from(self.background_slot)),
            ("downsample", self.downsample),
            ("first_frame_iters", self.first_frame_iters),
            ("frame_iters", self.frame_iters),
        ] {
            m.insert(k.to_string(), v.to_string());
        }
        m
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self, SlotError> {
        let get = |k: &str| -> Result<usize, SlotError> {
            meta.get(k)
                .ok_or_else(|| SlotError::Checkpoint(format!("missing meta key {k}")))?
                .parse()
                .map_err(|_| SlotError::Checkpoint(format!("bad meta value for {k}")))
        };
        let cfg = Self {
            in_channels: get("in_channels")?,
            out_channels: get("out_channels")?,
            width: get("width")?,
            stem_width: get("stem_width")?,
            decoder_width: get("decoder_width")?,
            mlp_hidden: get("mlp_hidden")?,
            num_slots: get("num_slots")?,
            background_slot: get("background_slot")? != 0,
            downsample: get("downsample")?,
            first_frame_iters: get("first_frame_iters")?,
            frame_iters: get("frame_iters")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parameter names and shapes, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.width;
        let mut v: Vec<(String, Vec<usize>)> = Vec::new();
        let mut conv = |name: &str, cin: usize, cout: usize| {
            v.push((format!("{name}.w"), vec![3, 3, cin, cout]));
            v.push((format!("{name}.b"), vec![cout]));
        };
        conv("enc.conv1", self.in_channels, self.stem_width);
        conv("enc.conv2", self.stem_width, d);
        conv("enc.conv3", d, d);
        conv("enc.conv4", d, d);
        conv("dec.conv1", d, self.decoder_width);
        conv("dec.conv2", self.decoder_width, self.decoder_width);
        conv("dec.conv3", self.decoder_width, self.out_channels);
        v.push(("enc.pos.w".into(), vec![4, d]));
        v.push(("enc.pos.b".into(), vec![d]));
        for ln in ["sa.ln_in", "sa.ln_slot", "sa.ln_mlp"] {
            v.push((format!("{ln}.g"), vec![d]));
            v.push((format!("{ln}.b"), vec![d]));
        }
        for p in ["sa.k.w", "sa.q.w", "sa.v.w"] {
            v.push((p.into(), vec![d, d]));
        }
        for gate in ["r", "z", "n"] {
            v.push((format!("sa.gru.wi{gate}"), vec![d, d]));
            v.push((format!("sa.gru.bi{gate}"), vec![d]));
            v.push((format!("sa.gru.wh{gate}"), vec![d, d]));
            v.push((format!("sa.gru.bh{gate}"), vec![d]));
        }
        v.push(("sa.mlp1.w".into(), vec![d, self.mlp_hidden]));
        v.push(("sa.mlp1.b".into(), vec![self.mlp_hidden]));
        v.push(("sa.mlp2.w".into(), vec![self.mlp_hidden, d]));
        v.push(("sa.mlp2.b".into(), vec![d]));
        v.push(("sa.init".into(), vec![self.slot_rows(), d]));
        v
    }
}

/// Outputs of one frame of [`SlotModel::forward_video`].
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput<T> {
    pub attention: AttentionMaps<T>,
    pub slots: SlotState<T>,
    /// `[H, W, C_out]` reconstruction or completion.
    pub decoded: Tensor<T>,
}

/// Graph handles for a batch of videos.
#[derive(Clone, Debug)]
pub struct VideoVars {
    /// `[B·T, h, w, D]` features.
    pub features: Var,
    /// `[B·T, H, W, C_out]` decoder output.
    pub decoded: Var,
    /// `attention[b][t]`: `[N, K (+1)]` softmax weights.
    pub attention: Vec<Vec<Var>>,
    /// `slots[b][t]`: `[K (+1), D]`.
    pub slots: Vec<Vec<Var>>,
    pub feature_dims: (usize, usize),
}

/// Slot-attention model: configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotModel<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

fn position_grid<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let mut data = Vec::with_capacity(h * w * 4);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = (norm(i, h), norm(j, w));
            data.extend([x, y, 1.0 - x, 1.0 - y].map(T::lit));
        }
    }
    Tensor::from_vec(&[h, w, 4], data).unwrap()
}

impl<T: Scalar> SlotModel<T> {
    /// Seeded initialization: Xavier-uniform weights, zero biases, unit
    /// layer-norm gains, unit-variance initial slots.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, SlotError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        for (name, shape) in config.layout() {
            let len: usize = shape.iter().product();
            let t = if name.ends_with(".g") {
                Tensor::full(&shape, T::one())
            } else if name == "sa.init" {
                let a = 3f64.sqrt();
                Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-a..a)))
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let (fan_in, fan_out) = if shape.len() == 4 {
                    let rf = shape[0] * shape[1];
                    (rf * shape[2], rf * shape[3])
                } else {
                    (shape[0], shape[1])
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..len).map(|_| T::lit(rng.gen_range(-a..a))).collect();
                Tensor::from_vec(&shape, data).unwrap()
            };
            params.insert(&name, t);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking they fit the configuration.
    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self, SlotError> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(SlotError::Shape(format!(
                "expected {} tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(SlotError::Shape(format!("{name}: expected {shape:?}, found {:?}", t.shape())));
                }
                None => return Err(SlotError::Shape(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> SlotModel<U> {
        SlotModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn check_frames(&self, shape: &[usize]) -> Result<(), SlotError> {
        if shape.len() != 4 || shape[3] != self.config.in_channels {
            return Err(SlotError::Shape(format!(
                "expected [B,H,W,{}] frames, found {shape:?}",
                self.config.in_channels
            )));
        }
        if shape[1] == 0 || shape[2] == 0 {
            return Err(SlotError::Shape("empty frame".into()));
        }
        Ok(())
    }

    fn conv(&self, g: &mut Graph<'_, T>, x: Var, name: &str, stride: usize) -> Var {
        let w = g.param(&format!("{name}.w"));
        let b = g.param(&format!("{name}.b"));
        g.conv2d(x, w, b, stride, 1)
    }

    fn ln(&self, g: &mut Graph<'_, T>, x: Var, name: &str) -> Var {
        let gain = g.param(&format!("{name}.g"));
        let bias = g.param(&format!("{name}.b"));
        g.layer_norm(x, gain, bias)
    }

    fn lin(&self, g: &mut Graph<'_, T>, x: Var, w: &str, b: Option<&str>) -> Var {
        let wv = g.param(w);
        let bv = b.map(|b| g.param(b));
        g.linear(x, wv, bv)
    }

    /// Encoder on `[B, H, W, C]` frames → `[B, h, w, D]`.
    pub fn encode_graph(&self, g: &mut Graph<'_, T>, frames: Var) -> Var {
        let (s1, s2) = self.config.strides();
        let x = self.conv(g, frames, "enc.conv1", s1);
        let x = g.silu(x);
        let x = self.conv(g, x, "enc.conv2", s2);
        let x = g.silu(x);
        let x = self.conv(g, x, "enc.conv3", 1);
        let x = g.silu(x);
        let x = self.conv(g, x, "enc.conv4", 1);
        let s = g.shape(x).to_vec();
        let grid = g.input(position_grid(s[1], s[2]));
        let pos = self.lin(g, grid, "enc.pos.w", Some("enc.pos.b"));
        g.add(x, pos)
    }

    /// Keys and values for `[N, D]` features; reused across iterations on
    /// the same frame.
    pub fn keys_values(&self, g: &mut Graph<'_, T>, features: Var) -> (Var, Var) {
        let x = self.ln(g, features, "sa.ln_in");
        let k = self.lin(g, x, "sa.k.w", None);
        let v = self.lin(g, x, "sa.v.w", None);
        (k, v)
    }

    /// One attention + slot update: returns `([N, K(+1)]` weights, new slots).
    pub fn attend(&self, g: &mut Graph<'_, T>, keys: Var, values: Var, slots: Var) -> (Var, Var) {
        let d = self.config.width;
        let sn = self.ln(g, slots, "sa.ln_slot");
        let q = self.lin(g, sn, "sa.q.w", None);
        let logits = g.matmul(keys, q, false, true);
        let logits = g.scale(logits, T::lit(1.0 / (d as f64).sqrt()));
        let attn = g.softmax(logits);
        let weights = g.normalize_cols(attn, T::lit(1e-8));
        let updates = g.matmul(weights, values, true, false);

        // Gated recurrent update of the previous slots.
        let gate = |g: &mut Graph<'_, T>, name: &str| {
            let i = self.lin(g, updates, &format!("sa.gru.wi{name}"), Some(&format!("sa.gru.bi{name}")));
            let h = self.lin(g, slots, &format!("sa.gru.wh{name}"), Some(&format!("sa.gru.bh{name}")));
            (i, h)
        };
        let (ir, hr) = gate(g, "r");
        let (iz, hz) = gate(g, "z");
        let (inn, hn) = gate(g, "n");
        let r = g.add(ir, hr);
        let r = g.sigmoid(r);
        let z = g.add(iz, hz);
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn);
        let n = g.add(inn, rh);
        let n = g.tanh(n);
        let diff = g.sub(slots, n);
        let zd = g.mul(z, diff);
        let h = g.add(n, zd);

        let m = self.ln(g, h, "sa.ln_mlp");
        let m = self.lin(g, m, "sa.mlp1.w", Some("sa.mlp1.b"));
        let m = g.silu(m);
        let m = self.lin(g, m, "sa.mlp2.w", Some("sa.mlp2.b"));
        let out = g.add(h, m);
        (attn, out)
    }

    /// Decoder on `[B, h, w, D]` → `[B, H, W, C_out]`.
    pub fn decode_graph(&self, g: &mut Graph<'_, T>, features: Var, target: (usize, usize)) -> Var {
        let (th, tw) = target;
        let x = self.conv(g, features, "dec.conv1", 1);
        let x = g.silu(x);
        let x = g.resize(x, th.div_ceil(2), tw.div_ceil(2));
        let x = self.conv(g, x, "dec.conv2", 1);
        let x = g.silu(x);
        let x = g.resize(x, th, tw);
        self.conv(g, x, "dec.conv3", 1)
    }

    /// Records encoder, slot recurrence and decoder for `batch` videos of
    /// `steps` frames stacked as `[batch·steps, H, W, C]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_, T>,
        frames: Var,
        batch: usize,
        steps: usize,
        init: Option<Var>,
    ) -> Result<VideoVars, SlotError> {
        let shape = g.shape(frames).to_vec();
        self.check_frames(&shape)?;
        if shape[0] != batch * steps || steps == 0 {
            return Err(SlotError::Shape(format!("{} frames for {batch}x{steps}", shape[0])));
        }
        let features = self.encode_graph(g, frames);
        let fs = g.shape(features).to_vec();
        let (h, w, d) = (fs[1], fs[2], fs[3]);
        let init = match init {
            Some(v) => v,
            None => g.param("sa.init"),
        };
        let mut attention = Vec::with_capacity(batch);
        let mut slots_out = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut slots = init;
            let mut attn_b = Vec::with_capacity(steps);
            let mut slots_b = Vec::with_capacity(steps);
            for t in 0..steps {
                let f = g.select(features, b * steps + t);
                let f = g.reshape(f, &[h * w, d]);
                let (k, v) = self.keys_values(g, f);
                let iters = if t == 0 { self.config.first_frame_iters } else { self.config.frame_iters };
                let mut attn = None;
                for _ in 0..iters {
                    let (a, s) = self.attend(g, k, v, slots);
                    attn = Some(a);
                    slots = s;
                }
                attn_b.push(attn.unwrap());
                slots_b.push(slots);
            }
            attention.push(attn_b);
            slots_out.push(slots_b);
        }
        let decoded = self.decode_graph(g, features, (shape[1], shape[2]));
        Ok(VideoVars {
            features,
            decoded,
            attention,
            slots: slots_out,
            feature_dims: (h, w),
        })
    }

    fn slot_state(&self, t: &Tensor<T>) -> SlotState<T> {
        SlotState {
            slots: t.clone(),
            num_slots: self.config.num_slots,
            background: self.config.background_slot,
        }
    }

    /// Learned initial slots.
    pub fn initial_slots(&self) -> SlotState<T> {
        self.slot_state(self.params.get("sa.init").expect("sa.init"))
    }

    /// Features of one `[H, W, C]` frame.
    pub fn encode(&self, frame: &Tensor<T>) -> Result<FeatureMap<T>, SlotError> {
        let s = frame.shape();
        if s.len() != 3 {
            return Err(SlotError::Shape(format!("expected [H,W,C] frame, found {s:?}")));
        }
        self.check_frames(&[1, s[0], s[1], s[2]])?;
        let mut g = Graph::new(&self.params);
        let x = g.input(frame.clone().reshape(&[1, s[0], s[1], s[2]]).unwrap());
        let f = self.encode_graph(&mut g, x);
        let t = g.value(f).index0(0);
        if !t.is_finite() {
            return Err(SlotError::NonFinite("encoder features".into()));
        }
        Ok(FeatureMap { features: t })
    }

    /// One attention step of `slots` over `features`.
    pub fn slot_attention_step(
        &self,
        features: &FeatureMap<T>,
        slots: &SlotState<T>,
    ) -> Result<(AttentionMaps<T>, SlotState<T>), SlotError> {
        let d = self.config.width;
        if features.dim() != d || slots.dim() != d || slots.rows() != self.config.slot_rows() {
            return Err(SlotError::Shape(format!(
                "features width {} / slots {:?} do not fit D={d}, rows={}",
                features.dim(),
                slots.slots.shape(),
                self.config.slot_rows()
            )));
        }
        let mut g = Graph::new(&self.params);
        let f = g.input(features.features.clone().reshape(&[features.positions(), d]).unwrap());
        let s = g.input(slots.slots.clone());
        let (k, v) = self.keys_values(&mut g, f);
        let (a, s2) = self.attend(&mut g, k, v, s);
        let maps = AttentionMaps::from_matrix(features.height(), features.width(), g.value(a), self.config.background_slot);
        if !maps.is_finite() {
            return Err(SlotError::NonFinite("attention weights".into()));
        }
        let next = self.slot_state(g.value(s2));
        if !next.slots.is_finite() {
            return Err(SlotError::NonFinite("slot update".into()));
        }
        Ok((maps, next))
    }

    /// Dense decoding of a feature map to `target` resolution.
    pub fn decode(&self, features: &FeatureMap<T>, target: (usize, usize)) -> Result<Tensor<T>, SlotError> {
        if features.dim() != self.config.width {
            return Err(SlotError::Shape(format!(
                "decoder expects width {}, found {}",
                self.config.width,
                features.dim()
            )));
        }
        if target.0 == 0 || target.1 == 0 {
            return Err(SlotError::Shape("empty decode target".into()));
        }
        let mut g = Graph::new(&self.params);
        let shape = features.features.shape();
        let f = g.input(features.features.clone().reshape(&[1, shape[0], shape[1], shape[2]]).unwrap());
        let out = self.decode_graph(&mut g, f, target);
        Ok(g.value(out).index0(0))
    }

    /// Runs a video: slots from frame `t−1` seed frame `t`.
    pub fn forward_video(
        &self,
        frames: &[Tensor<T>],
        init: Option<&SlotState<T>>,
    ) -> Result<Vec<FrameOutput<T>>, SlotError> {
        if frames.is_empty() {
            return Err(SlotError::Shape("empty frame list".into()));
        }
        let stacked = Tensor::stack(frames).map_err(|e| SlotError::Shape(e.to_string()))?;
        let mut g = Graph::new(&self.params);
        let x = g.input(stacked);
        let init_var = match init {
            Some(s) => {
                if s.slots.shape() != [self.config.slot_rows(), self.config.width] {
                    return Err(SlotError::Shape(format!("initial slots {:?}", s.slots.shape())));
                }
                Some(g.input(s.slots.clone()))
            }
            None => None,
        };
        let vars = self.forward_graph(&mut g, x, 1, frames.len(), init_var)?;
        let (h, w) = vars.feature_dims;
        let decoded = g.value(vars.decoded);
        let mut out = Vec::with_capacity(frames.len());
        for t in 0..frames.len() {
            let attention = AttentionMaps::from_matrix(h, w, g.value(vars.attention[0][t]), self.config.background_slot);
            if !attention.is_finite() {
                return Err(SlotError::NonFinite(format!("attention at frame {t}")));
            }
            out.push(FrameOutput {
                attention,
                slots: self.slot_state(g.value(vars.slots[0][t])),
                decoded: decoded.index0(t),
            });
        }
        Ok(out)
    }
}
