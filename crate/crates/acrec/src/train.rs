//! Optimization loop: Adam over minibatches with square-root learning-rate
//! decay, one optimizer step per batch ("iteration").
//!
//! Per batch, per-sequence gradients from [`crate::grad::backward`] are
//! computed in parallel, summed in batch order (so results are identical for
//! any thread count) and normalized by the number of unmasked prediction
//! steps before the Adam update. A non-finite loss or gradient aborts the
//! loop, leaving the parameters at the last good state.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::datapipe::{batch_iter, EncodedSequence, MaskMode, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::grad::{backward, loss_only, Gradients};
use crate::model::{
    save_checkpoint, ModelParams, Variant, DEFAULT_EMBED_DIM, DEFAULT_HIDDEN_DIM, TENSOR_NAMES,
};
use crate::numkernel::{adam_step, log_sum_exp, AdamState, Rng};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub variant: Variant,
    pub d: usize,
    pub k: usize,
    pub batch_size: usize,
    pub iterations: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub mask_mode: MaskMode,
    /// Log validation loss and write a checkpoint every this many
    /// iterations; 0 disables periodic output.
    pub eval_every: u64,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            d: DEFAULT_EMBED_DIM,
            k: DEFAULT_HIDDEN_DIM,
            batch_size: DEFAULT_BATCH_SIZE,
            iterations: 10_000,
            lr_start: 0.01,
            lr_end: 0.001,
            seed: 0,
            mask_mode: MaskMode::All,
            eval_every: 0,
        }
    }

    /// The clicks baseline is the late architecture trained only on clicked
    /// recommendation steps; its mask mode is not configurable.
    pub fn effective_mask_mode(&self) -> MaskMode {
        if self.variant == Variant::Clicks {
            MaskMode::ClicksOnly
        } else {
            self.mask_mode
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start >= self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_start >= lr_end > 0, got {} -> {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.d < 1 || self.k < 1 || self.batch_size < 1 {
            return Err(Error::Config("d, k and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Square-root decay hitting both endpoints exactly:
/// lr(step) = lr_start / sqrt(1 + c·step) with c = ((lr_start/lr_end)² − 1) / iterations.
///
/// The endpoints are returned explicitly — sqrt of the algebraic form only
/// reproduces them to rounding error, and they are contractual values.
pub fn lr_schedule(cfg: &TrainConfig, step: u64) -> f64 {
    if step == 0 {
        return cfg.lr_start;
    }
    if step >= cfg.iterations {
        return cfg.lr_end;
    }
    let r = cfg.lr_start / cfg.lr_end;
    let c = (r * r - 1.0) / cfg.iterations as f64;
    cfg.lr_start / (1.0 + c * step as f64).sqrt()
}

/// Mean negative log-likelihood over the unmasked steps of one sequence's
/// logits: Σ −log softmax(logits_t)[target_t] / #unmasked.
pub fn nll_loss(step_logits: &[Vec<f64>], targets: &[usize], mask: &[bool]) -> Result<f64> {
    assert_eq!(step_logits.len(), targets.len());
    assert_eq!(step_logits.len(), mask.len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((logits, &y), &m) in step_logits.iter().zip(targets).zip(mask) {
        if !m {
            continue;
        }
        sum += log_sum_exp(logits) - logits[y];
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data("nll_loss: every step is masked".into()));
    }
    if !sum.is_finite() {
        return Err(Error::Numeric("non-finite NLL".into()));
    }
    Ok(sum / count as f64)
}

/// Corpus-level mean NLL per unmasked step, parallel over sequences.
pub fn mean_nll(
    params: &ModelParams,
    sequences: &[EncodedSequence],
    variant: Variant,
    mask_mode: MaskMode,
) -> Result<f64> {
    let per_seq: Result<Vec<(f64, usize)>> = sequences
        .par_iter()
        .map(|s| {
            let mask = mask_mode.mask_for(s);
            let n = mask.iter().filter(|&&b| b).count();
            if n == 0 {
                return Ok((0.0, 0));
            }
            Ok((loss_only(params, s, variant, &mask)?, n))
        })
        .collect();
    let per_seq = per_seq?;
    let total: f64 = per_seq.iter().map(|&(l, _)| l).sum();
    let count: usize = per_seq.iter().map(|&(_, n)| n).sum();
    if count == 0 {
        return Err(Error::Data("mean_nll: no unmasked steps in corpus".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone)]
pub struct HistoryEntry {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Per-iteration training trace.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub entries: Vec<HistoryEntry>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,lr,seconds\n");
        for e in &self.entries {
            out.push_str(&format!("{},{:.6},{:.8},{:.3}\n", e.iteration, e.loss, e.lr, e.seconds));
        }
        out
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    /// Set when a non-finite loss/gradient stopped training early; `params`
    /// then hold the last state that produced finite values.
    pub diverged_at: Option<u64>,
}

/// Run the full optimization. `v_x` comes from the vocabulary; `valid_data`
/// is only consulted for the periodic progress line; `checkpoint_dir`
/// receives periodic checkpoints when `eval_every` is set.
pub fn train(
    cfg: &TrainConfig,
    v_x: usize,
    train_data: &[EncodedSequence],
    valid_data: &[EncodedSequence],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    assert!(!train_data.is_empty(), "train on empty corpus");
    let mask_mode = cfg.effective_mask_mode();
    if mask_mode == MaskMode::ClicksOnly {
        let clicks: usize =
            train_data.iter().map(|s| s.click_target.iter().filter(|&&c| c).count()).sum();
        if clicks == 0 {
            return Err(Error::Config(
                "clicks-masked training needs at least one clicked recommendation step".into(),
            ));
        }
    }

    let root = Rng::new(cfg.seed);
    let mut params = ModelParams::init(v_x, cfg.d, cfg.k, &mut root.derive(0));
    let mut batch_rng = root.derive(1);
    let mut adam = AdamState::new(&params.tensor_shapes());
    let mut history = TrainHistory::default();
    let started = Instant::now();
    let mut diverged_at = None;

    let mut done = 0u64;
    'outer: while done < cfg.iterations {
        let mut progressed = false;
        for batch in batch_iter(train_data, cfg.batch_size, &mut batch_rng, mask_mode) {
            progressed = true;

            let per_seq: Result<Vec<(f64, Gradients)>> = batch
                .sequences
                .par_iter()
                .zip(&batch.loss_mask)
                .map(|(s, m)| backward(&params, s, cfg.variant, m))
                .collect();
            let per_seq = match per_seq {
                Ok(v) => v,
                Err(Error::Numeric(msg)) => {
                    eprintln!("training aborted at iteration {done}: {msg}");
                    diverged_at = Some(done);
                    break 'outer;
                }
                Err(e) => return Err(e),
            };

            let count = batch.unmasked_steps();
            let mut total = Gradients::zeros_like(&params);
            let mut loss_sum = 0.0;
            for (l, g) in &per_seq {
                loss_sum += l;
                total.add_assign(g);
            }
            total.scale(1.0 / count as f64);
            let loss = loss_sum / count as f64;
            if !loss.is_finite() {
                eprintln!("training aborted at iteration {done}: non-finite batch loss");
                diverged_at = Some(done);
                break 'outer;
            }

            let lr = lr_schedule(cfg, done);
            {
                let mut flat = params.flat_mut();
                if let Err(e) = adam_step(&mut flat, &total.flat(), &TENSOR_NAMES, &mut adam, lr) {
                    eprintln!("training aborted at iteration {done}: {e}");
                    diverged_at = Some(done);
                    break 'outer;
                }
            }
            history.entries.push(HistoryEntry {
                iteration: done,
                loss,
                lr,
                seconds: started.elapsed().as_secs_f64(),
            });
            done += 1;

            if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
                let valid_msg = if valid_data.is_empty() {
                    "n/a".to_string()
                } else {
                    match mean_nll(&params, valid_data, cfg.variant, mask_mode) {
                        Ok(v) => format!("{v:.4}"),
                        Err(_) => "n/a".to_string(),
                    }
                };
                eprintln!(
                    "iter {done}/{} loss {loss:.4} valid_nll {valid_msg} lr {lr:.6}",
                    cfg.iterations
                );
                if let Some(dir) = checkpoint_dir {
                    save_checkpoint(
                        &dir.join(format!("checkpoint_{done:06}.bin")),
                        &params,
                        cfg.variant,
                    )?;
                }
            }
            if done >= cfg.iterations {
                break 'outer;
            }
        }
        if !progressed {
            return Err(Error::Config("no trainable batches in corpus".into()));
        }
    }

    Ok(TrainOutcome { params, history, diverged_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::{build_vocab, encode_corpus};
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn nll_perfect_prediction_is_zero() {
        // logits putting (numerically) all mass on the target
        let logits = vec![vec![500.0, 0.0, 0.0], vec![0.0, 500.0, 0.0]];
        let loss = nll_loss(&logits, &[0, 1], &[true, true]).unwrap();
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn nll_uniform_logits_is_log_v() {
        let logits = vec![vec![0.25; 100]];
        let loss = nll_loss(&logits, &[42], &[true]).unwrap();
        assert!((loss - 100.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_two_step_hand_case() {
        // p(target) = 0.5 then 0.25
        let logits = vec![
            vec![2.0f64.ln(), 1.0f64.ln(), 1.0f64.ln()], // softmax = (1/2, 1/4, 1/4)
            vec![1.0f64.ln(), 1.0f64.ln(), 2.0f64.ln()], // target 0 → p = 1/4
        ];
        let loss = nll_loss(&logits, &[0, 0], &[true, true]).unwrap();
        let expect = -(0.5f64.ln() + 0.25f64.ln()) / 2.0;
        assert!((loss - expect).abs() < 1e-12);
        assert!((loss - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn nll_rejects_fully_masked() {
        let logits = vec![vec![0.0, 0.0]];
        assert!(nll_loss(&logits, &[0], &[false]).is_err());
    }

    #[test]
    fn lr_schedule_endpoints_and_monotonicity() {
        let cfg = TrainConfig::new(Variant::Navigation);
        assert_eq!(lr_schedule(&cfg, 0), 0.01);
        assert_eq!(lr_schedule(&cfg, 10_000), 0.001);
        // the derived constant
        let r: f64 = 0.01 / 0.001;
        let c = (r * r - 1.0) / 10_000.0;
        assert_eq!(c, 0.0099);
        let mut prev = lr_schedule(&cfg, 0);
        for step in 1..=10_000u64 {
            let lr = lr_schedule(&cfg, step);
            assert!(lr < prev, "not strictly decreasing at {step}");
            prev = lr;
        }
    }

    fn small_corpus(seed: u64) -> (usize, Vec<EncodedSequence>) {
        let cfg = SynthConfig {
            catalog: 200,
            n_sessions: 1500,
            len_range: (3, 8),
            rec_rate: 0.2,
            seed,
            ..Default::default()
        };
        let (sessions, _) = generate(&cfg).unwrap();
        let vocab = build_vocab(&sessions, 5).unwrap();
        let encoded = encode_corpus(&sessions, &vocab, 40, 5);
        (vocab.len(), encoded)
    }

    #[test]
    fn initial_loss_is_near_log_vocab() {
        let (v_x, data) = small_corpus(1);
        let params = ModelParams::init(v_x, 40, 40, &mut Rng::new(0));
        let nll = mean_nll(&params, &data, Variant::Late, MaskMode::All).unwrap();
        let ln_v = (v_x as f64).ln();
        assert!((nll / ln_v - 1.0).abs() < 0.05, "nll {nll} vs ln V {ln_v}");
    }

    #[test]
    fn training_reduces_loss_on_synthetic_corpus() {
        let (v_x, data) = small_corpus(2);
        let mut cfg = TrainConfig::new(Variant::Late);
        cfg.iterations = 1000;
        cfg.seed = 3;
        let out = train(&cfg, v_x, &data, &[], None).unwrap();
        assert!(out.diverged_at.is_none());
        assert_eq!(out.history.entries.len(), 1000);
        // one optimizer step per batch per iteration
        for (i, e) in out.history.entries.iter().enumerate() {
            assert_eq!(e.iteration, i as u64);
        }
        let head: f64 =
            out.history.entries[..100].iter().map(|e| e.loss).sum::<f64>() / 100.0;
        let tail: f64 =
            out.history.entries[900..].iter().map(|e| e.loss).sum::<f64>() / 100.0;
        assert!(tail < head, "tail {tail} vs head {head}");
        let initial = out.history.entries[0].loss;
        let last = out.history.entries.last().unwrap().loss;
        assert!(last < 0.8 * initial, "final {last} vs initial {initial}");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (v_x, data) = small_corpus(4);
        let mut cfg = TrainConfig::new(Variant::Early);
        cfg.iterations = 40;
        cfg.seed = 9;
        let a = train(&cfg, v_x, &data, &[], None).unwrap();
        let b = train(&cfg, v_x, &data, &[], None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.entries.len(), b.history.entries.len());
        for (x, y) in a.history.entries.iter().zip(&b.history.entries) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.lr.to_bits(), y.lr.to_bits());
        }
    }

    #[test]
    fn determinism_holds_across_thread_counts() {
        let (v_x, data) = small_corpus(5);
        let mut cfg = TrainConfig::new(Variant::Late);
        cfg.iterations = 10;
        cfg.seed = 17;
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let a = single.install(|| train(&cfg, v_x, &data, &[], None)).unwrap();
        let quad = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let b = quad.install(|| train(&cfg, v_x, &data, &[], None)).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn clicks_variant_counts_unmasked_steps_as_clicks() {
        let (_, data) = small_corpus(6);
        let clicks: usize =
            data.iter().map(|s| s.click_target.iter().filter(|&&c| c).count()).sum();
        assert!(clicks > 0);
        let cfg = TrainConfig::new(Variant::Clicks);
        let mask_mode = cfg.effective_mask_mode();
        assert_eq!(mask_mode, MaskMode::ClicksOnly);
        let total: usize = data
            .iter()
            .map(|s| mask_mode.mask_for(s).iter().filter(|&&b| b).count())
            .sum();
        assert_eq!(total, clicks);
    }

    #[test]
    fn clicks_variant_on_rec_free_corpus_is_config_error() {
        let cfg_synth = SynthConfig {
            catalog: 100,
            n_sessions: 200,
            rec_rate: 0.0,
            seed: 8,
            ..Default::default()
        };
        let (sessions, _) = generate(&cfg_synth).unwrap();
        let vocab = build_vocab(&sessions, 2).unwrap();
        let data = encode_corpus(&sessions, &vocab, 40, 5);
        let mut cfg = TrainConfig::new(Variant::Clicks);
        cfg.iterations = 5;
        let err = train(&cfg, vocab.len(), &data, &[], None).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn history_csv_shape() {
        let h = TrainHistory {
            entries: vec![HistoryEntry { iteration: 0, loss: 1.5, lr: 0.01, seconds: 0.25 }],
        };
        let csv = h.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "iteration,loss,lr,seconds");
        assert!(lines.next().unwrap().starts_with("0,1.500000,0.01000000,"));
    }
}
