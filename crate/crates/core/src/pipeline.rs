//! Orchestration of training (pad -> corrupt -> denoise -> match -> loss ->
//! step) and inference (random boxes -> iterate: denoise -> filter -> DDIM ->
//! renew).

use crate::denoiser::{
    self, adam_step, AdamState, DenoiseContext, Denoiser, MlpParams,
};
use crate::diffusion::{self, NoiseSchedule, ScheduleError, TimeStep};
use crate::evalmetrics;
use crate::geometry::{self, Box, SignalPoint4};
use crate::matching::{self, CostWeights, MatchError};
use crate::padding::{self, PaddingConfig};
use crate::synthdata::{multi_window, Sample};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

/// Which box set the loss matches predictions against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTarget {
    /// The image's original ground-truth boxes.
    Original,
    /// The padded (perturbated) target set.
    Perturbated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub padding: PaddingConfig,
    pub weights: CostWeights,
    pub t_max: usize,
    pub b_scale: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_target: LossTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            padding: PaddingConfig::default(),
            weights: CostWeights::default(),
            t_max: diffusion::DEFAULT_T,
            b_scale: geometry::B_SCALE,
            iterations: 120_000,
            batch_size: 4,
            seed: 0,
            loss_target: LossTarget::Original,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.padding.validate()?;
        self.weights.validate()?;
        if self.iterations < 1 {
            return Err(format!("iterations must be >= 1, got {}", self.iterations));
        }
        if self.batch_size < 1 {
            return Err(format!("batch_size must be >= 1, got {}", self.batch_size));
        }
        if self.t_max < 1 {
            return Err(format!("t_max must be >= 1, got {}", self.t_max));
        }
        if self.b_scale <= 0.0 || !self.b_scale.is_finite() {
            return Err(format!("b_scale must be > 0, got {}", self.b_scale));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferConfig {
    /// DDIM refinement steps.
    pub steps: usize,
    /// Confidence filter: proposals with `sigmoid(logit) < lambda_conf` are
    /// dropped at every refinement step.
    pub lambda_conf: f64,
    /// Proposals per image (the padded target count at training time).
    pub n_proposals: usize,
    pub seed: u64,
    pub use_nms: bool,
    pub nms_iou: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            lambda_conf: 0.5,
            n_proposals: 300,
            seed: 0,
            use_nms: true,
            nms_iou: 0.5,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.steps < 1 {
            return Err(format!("steps must be >= 1, got {}", self.steps));
        }
        if !(0.0..=1.0).contains(&self.lambda_conf) {
            return Err(format!(
                "lambda_conf must lie in [0, 1], got {}",
                self.lambda_conf
            ));
        }
        if self.n_proposals < 1 {
            return Err(format!(
                "n_proposals must be >= 1, got {}",
                self.n_proposals
            ));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(format!("nms_iou must lie in [0, 1], got {}", self.nms_iou));
        }
        Ok(())
    }
}

/// One detection in pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub bbox: Box,
    pub score: f64,
}

/// Ground truth of a sample in unit coordinates.
pub fn unit_gt(sample: &Sample) -> Vec<Box> {
    let (w, h) = (sample.image.w as f64, sample.image.h as f64);
    sample
        .gt_boxes
        .iter()
        .map(|b| {
            geometry::sanitize(b.x1 / w, b.y1 / h, b.x2 / w, b.y2 / h)
                .expect("dataset boxes are finite")
        })
        .collect()
}

/// Per-image training inputs drawn sequentially from the step rng, so the
/// forward/backward work can run in parallel without changing results.
struct ImageTask<'a> {
    sample: &'a Sample,
    noisy: Vec<SignalPoint4>,
    t: TimeStep,
    targets: Vec<Box>,
}

/// One optimizer update over a batch of samples. Returns the batch-mean loss.
pub fn train_step(
    params: &mut MlpParams,
    state: &mut AdamState,
    batch: &[&Sample],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<f64, PipelineError> {
    train_step_threaded(params, state, batch, cfg, sched, rng, 1)
}

/// [`train_step`] with per-image forward/backward parallelism; gradients are
/// combined in fixed image order, so results are identical for any thread
/// count.
pub fn train_step_threaded(
    params: &mut MlpParams,
    state: &mut AdamState,
    batch: &[&Sample],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    threads: usize,
) -> Result<f64, PipelineError> {
    assert!(!batch.is_empty());

    // Phase 1: all rng draws, in image order.
    let tasks: Vec<ImageTask> = batch
        .iter()
        .map(|sample| {
            let gt = unit_gt(sample);
            let padded = padding::pad_targets(&gt, &cfg.padding, cfg.b_scale, rng);
            let t = TimeStep(rng.random_range(1..=cfg.t_max));
            let noisy: Vec<SignalPoint4> = padded
                .boxes
                .iter()
                .map(|b| {
                    let z = geometry::signal_encode(b, cfg.b_scale);
                    let eps: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
                    diffusion::corrupt(&z, t, sched, &eps, cfg.b_scale)
                })
                .collect();
            let targets = match cfg.loss_target {
                LossTarget::Original => gt,
                LossTarget::Perturbated => padded.boxes,
            };
            ImageTask {
                sample,
                noisy,
                t,
                targets,
            }
        })
        .collect();

    // Phase 2: pure forward/backward per image.
    let frozen = &*params;
    let run_one = |(_, task): (usize, &ImageTask)| -> Result<(Vec<f64>, f64), PipelineError> {
        let windows = multi_window(&task.sample.image);
        let (out, cache) =
            denoiser::mlp_forward(frozen, &task.noisy, task.t, &windows, cfg.t_max, cfg.b_scale);
        let sl = matching::set_loss(&out.pred_boxes, &out.conf_logits, &task.targets, &cfg.weights)?;
        let grads = denoiser::mlp_backward(frozen, &cache, &sl.grad_boxes, &sl.grad_logits);
        Ok((grads, sl.loss))
    };
    let results: Vec<Result<(Vec<f64>, f64), PipelineError>> = if threads <= 1 {
        tasks.iter().enumerate().map(run_one).collect()
    } else {
        parallel_map(&tasks, threads, run_one)
    };

    // Phase 3: combine in image order.
    let mut grad_sum = vec![0.0f64; denoiser::PARAM_COUNT];
    let mut loss_sum = 0.0f64;
    for r in results {
        let (grads, loss) = r?;
        for (acc, g) in grad_sum.iter_mut().zip(&grads) {
            *acc += g;
        }
        loss_sum += loss;
    }

    let scale = 1.0 / batch.len() as f64;
    grad_sum.iter_mut().for_each(|g| *g *= scale);
    let loss = loss_sum * scale;
    if !loss.is_finite() {
        return Err(PipelineError::NonFiniteLoss {
            step: state.step as usize,
        });
    }
    adam_step(params, &grad_sum, state);
    Ok(loss)
}

/// Fractions of the run at which the learning rate is divided by 10
/// (the 120K-iteration schedule's 60K and 100K boundaries).
pub const LR_DECAY_NUM_DEN: [(usize, usize); 2] = [(1, 2), (5, 6)];

/// Step-decayed learning rate for 0-based step `i` of `iterations`.
pub fn lr_for_step(base_lr: f64, step: usize, iterations: usize) -> f64 {
    let mut lr = base_lr;
    for (num, den) in LR_DECAY_NUM_DEN {
        if step >= iterations * num / den {
            lr /= 10.0;
        }
    }
    lr
}

pub struct TrainResult {
    pub params: MlpParams,
    pub state: AdamState,
    /// Batch-mean loss per iteration.
    pub losses: Vec<f64>,
}

/// Full training run over shuffled minibatches.
pub fn train_loop(dataset: &[Sample], cfg: &TrainConfig) -> Result<TrainResult, PipelineError> {
    train_loop_threaded(dataset, cfg, 1)
}

/// [`train_loop`] with per-image parallelism inside each batch.
pub fn train_loop_threaded(
    dataset: &[Sample],
    cfg: &TrainConfig,
    threads: usize,
) -> Result<TrainResult, PipelineError> {
    cfg.validate().map_err(PipelineError::BadConfig)?;
    if dataset.is_empty() {
        return Err(PipelineError::BadConfig(
            "training dataset is empty".into(),
        ));
    }
    let sched = NoiseSchedule::cosine(cfg.t_max, diffusion::DEFAULT_S_OFFSET)?;
    let mut params = MlpParams::glorot(cfg.seed);
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle
    let mut losses = Vec::with_capacity(cfg.iterations);

    for step in 0..cfg.iterations {
        let mut batch: Vec<&Sample> = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor >= order.len() {
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&dataset[order[cursor]]);
            cursor += 1;
        }
        state.lr = lr_for_step(denoiser::ADAM_LR, step, cfg.iterations);
        let loss = train_step_threaded(
            &mut params, &mut state, &batch, cfg, &sched, &mut rng, threads,
        )?;
        losses.push(loss);
    }

    Ok(TrainResult {
        params,
        state,
        losses,
    })
}

/// Rng stream for image `index` under an inference seed; identical whether
/// images are processed sequentially or in parallel.
pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Refine random proposals into detections for one image.
///
/// Starts from `n` standard-normal signal points; at each ladder pair
/// `(t, t_prev)`: denoise at `t`, drop proposals below the confidence
/// threshold, DDIM-step the survivors, and refill to `n` with fresh draws —
/// except after the final step, where survivors are emitted directly.
pub fn infer_image(
    den: &dyn Denoiser,
    sample: &Sample,
    cfg: &InferConfig,
    sched: &NoiseSchedule,
    b_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Prediction>, PipelineError> {
    cfg.validate().map_err(PipelineError::BadConfig)?;
    let windows = multi_window(&sample.image);
    let gt = unit_gt(sample);
    let ctx = DenoiseContext {
        windows: &windows,
        gt_unit: &gt,
        t_max: sched.t_max(),
        b_scale,
    };
    let ladder = diffusion::timestep_ladder(sched.t_max(), cfg.steps)?;
    let n = cfg.n_proposals;
    let draw = |rng: &mut ChaCha8Rng| {
        SignalPoint4(std::array::from_fn(|_| rng.sample(StandardNormal))).clamped(b_scale)
    };

    let mut boxes: Vec<SignalPoint4> = (0..n).map(|_| draw(rng)).collect();
    let mut final_preds = Vec::new();

    for pair in ladder.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        assert_eq!(boxes.len(), n, "proposal count invariant violated");
        assert!(boxes.iter().all(|b| b.is_within(b_scale)));

        let out = den.denoise(&boxes, t, &ctx);
        let mut survivors: Vec<(SignalPoint4, f64)> = Vec::with_capacity(n);
        for ((z_t, pred), &logit) in boxes.iter().zip(&out.pred_boxes).zip(&out.conf_logits) {
            let score = matching::sigmoid(logit);
            if score < cfg.lambda_conf {
                continue;
            }
            let z0_hat = geometry::signal_encode(pred, b_scale);
            let stepped = diffusion::ddim_step(z_t, &z0_hat, t, t_prev, sched, b_scale)?;
            survivors.push((stepped, score));
        }

        if t_prev.0 == 0 {
            let (w, h) = (sample.image.w as f64, sample.image.h as f64);
            final_preds = survivors
                .into_iter()
                .map(|(z, score)| Prediction {
                    image_id: sample.image_id.clone(),
                    bbox: geometry::signal_decode(&z, b_scale).scaled(w, h),
                    score,
                })
                .collect();
        } else {
            boxes = survivors.into_iter().map(|(z, _)| z).collect();
            while boxes.len() < n {
                boxes.push(draw(rng));
            }
        }
    }

    if cfg.use_nms {
        final_preds = evalmetrics::nms(&final_preds, cfg.nms_iou);
    }
    Ok(final_preds)
}

/// Run inference over a whole dataset with per-image rng streams.
pub fn infer_dataset(
    den: &(dyn Denoiser + Sync),
    samples: &[Sample],
    cfg: &InferConfig,
    sched: &NoiseSchedule,
    b_scale: f64,
    threads: usize,
) -> Result<Vec<Prediction>, PipelineError> {
    let run_one = |(i, sample): (usize, &Sample)| {
        let mut rng = image_rng(cfg.seed, i);
        infer_image(den, sample, cfg, sched, b_scale, &mut rng)
    };

    let per_image: Vec<Result<Vec<Prediction>, PipelineError>> = if threads <= 1 {
        samples.iter().enumerate().map(run_one).collect()
    } else {
        parallel_map(samples, threads, run_one)
    };

    let mut all = Vec::new();
    for preds in per_image {
        all.extend(preds?);
    }
    Ok(all)
}

/// Deterministic parallel map: results are collected in input order, so the
/// output is independent of the thread count.
pub fn parallel_map<T, U, F>(items: &[T], threads: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn((usize, &T)) -> U + Sync,
{
    let mut out: Vec<Option<U>> = (0..items.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut out);
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let value = f((i, &items[i]));
                slots.lock().unwrap()[i] = Some(value);
            });
        }
    });
    out.into_iter().map(|v| v.unwrap()).collect()
}
