//! Fine-tuning: L1 flow objective, one-cycle learning rate, AdamW with
//! serializable state, bit-exact resumable training loop, gradient check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{backprop::GradStore, DType, Tensor};
use ndarray::{s, Array2, Axis};
use pivdiff_core::diffusion::{forward_noise, DiffusionSchedule};
use pivdiff_core::metrics::{aee, MetricOptions};
use pivdiff_core::resample::{upsample, upsample_field};
use pivdiff_core::types::is_valid_component;
use pivdiff_core::{FlowSample, VelocityField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::estimate::estimate;
use crate::model::DiffuserNet;
use crate::params::ParamStore;
use crate::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anneal {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Fraction of `total_steps` spent ramping up to `peak_lr`.
    pub warmup_fraction: f64,
    pub anneal: Anneal,
    /// Start learning rate is `peak_lr / div_factor`.
    pub div_factor: f64,
    /// End learning rate is `peak_lr / final_div_factor`.
    pub final_div_factor: f64,
    pub weight_decay: f64,
    pub gradient_clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Square crop side in native pixels.
    pub crop_size: usize,
    pub flip_augment: bool,
    pub seed: u64,
    /// Validation cadence in steps; 0 disables.
    pub eval_every: usize,
    /// Checkpoint cadence in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub resume_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 10_000,
            batch_size: 4,
            peak_lr: 1.25e-4,
            warmup_fraction: 0.05,
            anneal: Anneal::Linear,
            div_factor: 25.0,
            final_div_factor: 1e4,
            weight_decay: 1e-5,
            gradient_clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            crop_size: 256,
            flip_augment: true,
            seed: 0,
            eval_every: 1000,
            checkpoint_every: 1000,
            resume_from: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::Precondition(m.to_string()));
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1");
        }
        if !(self.peak_lr > 0.0) {
            return bad("peak_lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        if !(self.div_factor > 0.0 && self.final_div_factor > 0.0) {
            return bad("div factors must be positive");
        }
        if !(self.gradient_clip_norm > 0.0) {
            return bad("gradient_clip_norm must be positive");
        }
        Ok(())
    }

    fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }
}

/// One-cycle schedule: ramp from `peak/div` to `peak` over the warm-up, then
/// anneal to `peak/final_div` at `total_steps`. Steps past the end clamp.
pub fn one_cycle_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps;
    let warm = cfg.warmup_steps().min(total);
    let start = cfg.peak_lr / cfg.div_factor;
    let end = cfg.peak_lr / cfg.final_div_factor;
    let interp = |a: f64, b: f64, frac: f64| match cfg.anneal {
        Anneal::Linear => a + (b - a) * frac,
        Anneal::Cosine => b + (a - b) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
    };
    let step = step.min(total);
    if step < warm {
        interp(start, cfg.peak_lr, step as f64 / warm as f64)
    } else if step == warm {
        cfg.peak_lr
    } else if step == total {
        end
    } else {
        interp(cfg.peak_lr, end, (step - warm) as f64 / (total - warm) as f64)
    }
}

/// Mean of `|pred - gt|` over valid pixels and both components.
/// `pred`, `gt`: `[B, 2, H, W]`; `mask`: `[B, 1, H, W]` of zeros and ones.
pub fn l1_flow_loss(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<Tensor, NetError> {
    if pred.dims() != gt.dims() {
        return Err(NetError::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let diff = (pred - gt.to_dtype(pred.dtype())?)?.abs()?;
    match mask {
        None => {
            if diff.elem_count() == 0 {
                return Err(NetError::EmptyMask);
            }
            Ok(diff.mean_all()?)
        }
        Some(m) => {
            let m = m.to_dtype(pred.dtype())?;
            let count = m.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if count <= 0.0 {
                return Err(NetError::EmptyMask);
            }
            Ok((diff.broadcast_mul(&m)?.sum_all()? / (2.0 * count))?)
        }
    }
}

/// AdamW with decoupled weight decay; moments are plain tensors so the
/// whole state round-trips through a checkpoint.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update; `grad_scale` multiplies every gradient (clipping).
    pub fn update(
        &mut self,
        params: &ParamStore,
        grads: &GradStore,
        lr: f64,
        grad_scale: f64,
    ) -> Result<(), NetError> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = (g * grad_scale)?;
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let step = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let p = var.as_tensor().detach();
            let next = ((&p * (1.0 - lr * self.weight_decay))? - (step * lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    fn save_into(&self, ck: &mut Checkpoint) -> Result<(), NetError> {
        for (k, t) in &self.m {
            ck.insert_tensor(&format!("adam.m.{k}"), t)?;
        }
        for (k, t) in &self.v {
            ck.insert_tensor(&format!("adam.v.{k}"), t)?;
        }
        ck.metadata.insert("adam_step".into(), self.step.to_string());
        Ok(())
    }

    fn restore_from(&mut self, ck: &Checkpoint, dtype: DType) -> Result<(), NetError> {
        self.m.clear();
        self.v.clear();
        for name in ck.entries.keys() {
            let t = ck.tensor(name, dtype)?.expect("listed entry");
            if let Some(k) = name.strip_prefix("adam.m.") {
                self.m.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix("adam.v.") {
                self.v.insert(k.to_string(), t);
            }
        }
        self.step = meta_parse(ck, "adam_step")?;
        Ok(())
    }
}

fn meta_parse<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T, NetError> {
    ck.metadata
        .get(key)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| NetError::Checkpoint { path: "<state>".into(), reason: format!("missing or bad metadata {key}") })
}

/// Global L2 norm of all parameter gradients.
pub fn grad_norm(params: &ParamStore, grads: &GradStore) -> Result<f64, NetError> {
    let mut sq = 0.0;
    for (_, var) in params.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

/// One fully prepared training batch at working resolution.
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, 1, H*s, W*s]`
    pub frame_a: Tensor,
    pub frame_b: Tensor,
    /// Noised normalized flow `[B, 2, H*s, W*s]`.
    pub v_t: Tensor,
    pub t: Vec<usize>,
    /// Native-pixel ground truth `[B, 2, H, W]`.
    pub gt: Tensor,
    /// `[B, 1, H, W]`, one where the ground truth is usable.
    pub mask: Tensor,
}

fn flip(a: &Array2<f32>, h: bool, v: bool) -> Array2<f32> {
    let mut out = a.view();
    if h {
        out.invert_axis(Axis(1));
    }
    if v {
        out.invert_axis(Axis(0));
    }
    out.to_owned()
}

/// Draws one batch: sample choice, crop, flips (flow signs corrected), time
/// steps and noise all come from `rng`, in that order per element.
pub fn draw_batch(
    samples: &[FlowSample],
    model: &DiffuserNet,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, NetError> {
    let c = cfg.crop_size;
    let s = model.config().upsample_factor;
    let norm = model.flow_normalizer();
    let (dev, dtype) = (model.device().clone(), model.dtype());
    let (mut fa, mut fb, mut vt, mut gt, mut mask, mut ts, mut ids) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.batch_size {
        let sample = &samples[rng.random_range(0..samples.len())];
        let field = sample.gt.as_ref().ok_or_else(|| NetError::Precondition(format!("{} has no ground truth", sample.id)))?;
        let (h, w) = (sample.pair.height(), sample.pair.width());
        let y0 = rng.random_range(0..=h - c);
        let x0 = rng.random_range(0..=w - c);
        let (hf, vf) = if cfg.flip_augment { (rng.random_bool(0.5), rng.random_bool(0.5)) } else { (false, false) };
        let cut = |a: &Array2<f32>| flip(&a.slice(s![y0..y0 + c, x0..x0 + c]).to_owned(), hf, vf);
        let mut u = cut(field.u());
        let mut v = cut(field.v());
        if hf {
            u.mapv_inplace(|x| -x);
        }
        if vf {
            v.mapv_inplace(|x| -x);
        }
        let native = VelocityField::new(u, v, 1.0)?;
        let t = rng.random_range(1..=schedule.train_steps());
        let working = upsample_field(&native, s)?;
        let (wh, ww) = working.shape();
        let mut noise_u = Array2::<f32>::zeros((wh, ww));
        let mut noise_v = Array2::<f32>::zeros((wh, ww));
        noise_u.iter_mut().chain(noise_v.iter_mut()).for_each(|x| *x = StandardNormal.sample(rng));
        let noise = VelocityField::new(noise_u, noise_v, s as f32)?;
        let v0 = norm.normalize(&working.map(|x| if is_valid_component(x) { x } else { 0.0 }));
        let noised = forward_noise(&v0, t, &noise, schedule)?;

        fa.extend(upsample(&cut(sample.pair.frame_a()), s).iter().copied());
        fb.extend(upsample(&cut(sample.pair.frame_b()), s).iter().copied());
        vt.extend(noised.u().iter().chain(noised.v().iter()).copied());
        let valid = native.valid_mask();
        gt.extend(native.u().iter().chain(native.v().iter()).map(|&x| if is_valid_component(x) { x } else { 0.0 }));
        mask.extend(valid.iter().map(|&b| if b { 1f32 } else { 0.0 }));
        ts.push(t);
        ids.push(sample.id.clone());
    }
    let b = cfg.batch_size;
    let (ws, cs) = (c * s, c);
    let mk = |d: Vec<f32>, ch: usize, side: usize| -> Result<Tensor, NetError> {
        Ok(Tensor::from_vec(d, (b, ch, side, side), &dev)?.to_dtype(dtype)?)
    };
    Ok(Batch {
        ids,
        frame_a: mk(fa, 1, ws)?,
        frame_b: mk(fb, 1, ws)?,
        v_t: mk(vt, 2, ws)?,
        t: ts,
        gt: mk(gt, 2, cs)?,
        mask: mk(mask, 1, cs)?,
    })
}

/// Denoise the batch once from fresh conditions and score it in native pixels.
pub fn batch_loss(model: &DiffuserNet, batch: &Batch) -> Result<Tensor, NetError> {
    let mut cond = model.encode_batch(&batch.frame_a, &batch.frame_b)?;
    let pred = model.denoise_batch(&mut cond, &batch.v_t, &batch.t)?;
    let pixels = (pred * model.flow_normalizer().scale_max)?;
    let s = model.config().upsample_factor;
    let native = if s == 1 { pixels } else { (pixels.avg_pool2d(s)? / s as f64)? };
    l1_flow_loss(&native, &batch.gt, Some(&batch.mask))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_aee: Option<f64>,
}

pub const LOG_HEADER: &str = "step\tloss\tlr\tval_aee";

impl LogRow {
    pub fn to_line(&self) -> String {
        // shortest round-trip formatting, so a resumed run restores exact values
        let val = self.val_aee.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        format!("{}\t{}\t{}\t{}", self.step, self.loss, self.lr, val)
    }

    pub fn parse(line: &str) -> Option<Self> {
        let mut it = line.split('\t');
        let step = it.next()?.parse().ok()?;
        let loss = it.next()?.parse().ok()?;
        let lr = it.next()?.parse().ok()?;
        let val_aee = match it.next()? {
            "-" => None,
            v => Some(v.parse().ok()?),
        };
        Some(Self { step, loss, lr, val_aee })
    }
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_line());
    }
    out
}

/// Trailing mean of the logged loss over `window` steps ending at `step`.
pub fn smoothed_loss(rows: &[LogRow], step: usize, window: usize) -> Option<f64> {
    let sel: Vec<f64> =
        rows.iter().filter(|r| r.step <= step && r.step + window > step).map(|r| r.loss).collect();
    (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
}

/// Mean native-pixel AEE of full `estimate` runs over `samples`.
pub fn mean_aee(
    model: &DiffuserNet,
    samples: &[FlowSample],
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Option<f64>, NetError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        let Some(gt) = &s.gt else { continue };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = estimate(&s.pair, model, schedule, &mut rng)?;
        if let Ok(e) = aee(&pred, gt, &MetricOptions::default()) {
            total += e;
            n += 1;
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:06}.safetensors"))
}

/// Optimizer/RNG/log state stored next to a model checkpoint.
pub fn state_path(model_ckpt: &Path) -> PathBuf {
    model_ckpt.with_extension("state.safetensors")
}

fn save_state(
    dir: &Path,
    step: usize,
    model: &DiffuserNet,
    opt: &AdamW,
    rng: &ChaCha8Rng,
    log: &[LogRow],
) -> Result<PathBuf, NetError> {
    let path = checkpoint_path(dir, step);
    let mut ck = Checkpoint::from_params(model.params(), "pivdiff train")?;
    ck.metadata.insert("step".into(), step.to_string());
    ck.save(&path)?;
    let mut st = Checkpoint::new("pivdiff train state");
    opt.save_into(&mut st)?;
    st.metadata.insert("step".into(), step.to_string());
    st.metadata.insert("rng_seed".into(), rng.get_seed().iter().map(|b| format!("{b:02x}")).collect());
    st.metadata.insert("rng_stream".into(), rng.get_stream().to_string());
    st.metadata.insert("rng_word_pos".into(), rng.get_word_pos().to_string());
    st.metadata.insert("log".into(), format_log(log));
    st.save(state_path(&path))?;
    Ok(path)
}

fn restore_state(
    ckpt_path: &Path,
    model: &DiffuserNet,
    opt: &mut AdamW,
) -> Result<(usize, ChaCha8Rng, Vec<LogRow>), NetError> {
    Checkpoint::load(ckpt_path)?.restore_exact(model.params())?;
    let st = Checkpoint::load(state_path(ckpt_path))?;
    opt.restore_from(&st, model.dtype())?;
    let step: usize = meta_parse(&st, "step")?;
    let hex = st.metadata.get("rng_seed").cloned().unwrap_or_default();
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = hex.get(2 * i..2 * i + 2).and_then(|h| u8::from_str_radix(h, 16).ok()).ok_or_else(|| {
            NetError::Checkpoint { path: ckpt_path.display().to_string(), reason: "bad rng_seed".into() }
        })?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta_parse(&st, "rng_stream")?);
    rng.set_word_pos(meta_parse(&st, "rng_word_pos")?);
    let log = st.metadata.get("log").map(|t| t.lines().skip(1).filter_map(LogRow::parse).collect()).unwrap_or_default();
    Ok((step, rng, log))
}

/// Fine-tunes every parameter of `model` on `train_set`.
///
/// With `out_dir`, checkpoints (and their optimizer/RNG state) land in
/// `out_dir` at the configured cadence and at the final step. `on_row` sees
/// every log row as it is produced.
pub fn train(
    model: &DiffuserNet,
    train_set: &[FlowSample],
    val_set: &[FlowSample],
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome, NetError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(NetError::Precondition("training split is empty".into()));
    }
    let s = model.config().upsample_factor;
    let min_side = 8 * model.config().min_coarse_side();
    if (cfg.crop_size * s) % 8 != 0 || cfg.crop_size * s < min_side {
        return Err(NetError::Precondition(format!(
            "crop_size {} x upsample {} must be a multiple of 8 and at least {min_side}",
            cfg.crop_size, s
        )));
    }
    for smp in train_set {
        if smp.gt.is_none() {
            return Err(NetError::Precondition(format!("{} has no ground truth", smp.id)));
        }
        if smp.pair.height() < cfg.crop_size || smp.pair.width() < cfg.crop_size {
            return Err(NetError::Precondition(format!("{} is smaller than crop_size {}", smp.id, cfg.crop_size)));
        }
    }

    let mut opt = AdamW::new(cfg);
    let (mut step, mut rng, mut log) = match &cfg.resume_from {
        Some(p) => restore_state(p, model, &mut opt)?,
        None => (0, ChaCha8Rng::seed_from_u64(cfg.seed), Vec::new()),
    };
    let mut checkpoints = Vec::new();
    while step < cfg.total_steps {
        let lr = one_cycle_lr(step, cfg);
        let batch = draw_batch(train_set, model, schedule, cfg, &mut rng)?;
        let loss = batch_loss(model, &batch)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(NetError::NonFiniteLoss { step: step + 1, batch_ids: batch.ids });
        }
        let grads = loss.backward()?;
        let norm = grad_norm(model.params(), &grads)?;
        let scale = if norm > cfg.gradient_clip_norm { cfg.gradient_clip_norm / norm } else { 1.0 };
        opt.update(model.params(), &grads, lr, scale)?;
        step += 1;

        let val_aee = if cfg.eval_every > 0 && step % cfg.eval_every == 0 && !val_set.is_empty() {
            mean_aee(model, val_set, schedule, cfg.seed)?
        } else {
            None
        };
        let row = LogRow { step, loss: value, lr, val_aee };
        on_row(&row);
        log.push(row);

        if let Some(dir) = out_dir {
            let due = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
            if due || step == cfg.total_steps {
                checkpoints.push(save_state(dir, step, model, &opt, &rng, &log)?);
            }
        }
    }
    Ok(TrainOutcome { log, checkpoints })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckEntry {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Compares backprop gradients of [`batch_loss`] with central differences
/// `(L(p + e) - L(p - e)) / 2e` on `count` scalar parameters drawn uniformly
/// over all parameter elements. `step` is in normalized units: the actual
/// perturbation is `e = step * rms(tensor)`, so every tensor is probed at
/// the same relative scale.
pub fn gradient_check(
    model: &DiffuserNet,
    batch: &Batch,
    count: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<GradCheckEntry>, NetError> {
    let ps = model.params();
    let loss = batch_loss(model, batch)?;
    let grads = loss.backward()?;
    let sizes: Vec<(String, usize)> = ps.iter().map(|(n, v)| (n.clone(), v.elem_count())).collect();
    let total: usize = sizes.iter().map(|(_, c)| c).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = || -> Result<f64, NetError> { Ok(batch_loss(model, batch)?.to_dtype(DType::F64)?.to_scalar()?) };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut flat = rng.random_range(0..total);
        let (name, index) = sizes
            .iter()
            .find_map(|(n, c)| if flat < *c { Some((n.clone(), flat)) } else { flat -= c; None })
            .expect("index within total");
        let var = ps.get(&name).expect("listed parameter");
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[index],
            None => 0.0,
        };
        let values = ps.values(&name)?;
        let rms = (values.iter().map(|x| x * x).sum::<f64>() / values.len() as f64).sqrt();
        let h = if rms > 0.0 { step * rms } else { step };
        let orig = values[index];
        ps.set_element(&name, index, orig + h)?;
        let plus = eval()?;
        ps.set_element(&name, index, orig - h)?;
        let minus = eval()?;
        ps.set_element(&name, index, orig)?;
        out.push(GradCheckEntry { param: name, index, analytic, numeric: (plus - minus) / (2.0 * h) });
    }
    Ok(out)
}
