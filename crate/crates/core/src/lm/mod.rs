//! Small causal language model with LoRA adapters and feature-slot splicing.

pub mod model;
pub mod params;
pub mod tokenizer;

pub use model::{
    backward, forward, ForwardCache, GradRequest, Gradients, LogitRows, Mode, SplicedSequence,
};
pub use params::{
    AdapterMix, LayerParams, LmConfig, LmParams, LoraAdapter, LoraConfig, LoraLayer, LoraPair,
};
pub use tokenizer::{Encoding, Tokenizer};

use serde::{Deserialize, Serialize};

use crate::dataset::Slot;
use crate::error::{Error, Result};
use crate::linalg::{sigmoid, Mat};

/// Builds the input rows for `ids`: token embeddings, with slot positions
/// replaced by the vectors `feature` returns.
pub fn embed_and_splice(
    params: &LmParams,
    ids: &[u32],
    slots: &[(usize, Slot)],
    answer_start: usize,
    mut feature: impl FnMut(Slot) -> Result<Vec<f64>>,
) -> Result<SplicedSequence> {
    let d = params.config.d_model;
    let vocab = params.config.vocab_size;
    let mut embeddings = Mat::zeros(ids.len(), d);
    for (r, &id) in ids.iter().enumerate() {
        if id as usize >= vocab {
            return Err(Error::Invalid(format!(
                "token id {id} outside vocabulary of {vocab}"
            )));
        }
        embeddings
            .row_mut(r)
            .copy_from_slice(params.tok_emb.row(id as usize));
    }
    for &(pos, slot) in slots {
        let v = feature(slot)?;
        if v.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: v.len(),
            });
        }
        if pos >= ids.len() {
            return Err(Error::Invalid(format!(
                "slot position {pos} outside sequence"
            )));
        }
        embeddings.row_mut(pos).copy_from_slice(&v);
    }
    if answer_start > ids.len() {
        return Err(Error::Invalid("answer start beyond sequence end".into()));
    }
    Ok(SplicedSequence {
        ids: ids.to_vec(),
        embeddings,
        answer_start,
        slots: slots.to_vec(),
    })
}

/// How a recommendation probability is read from the answer logits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    /// `σ(z_yes − z_no)`
    #[default]
    YesNoMargin,
    /// `σ(z_yes)`
    YesLogit,
}

impl ScoreRule {
    pub fn apply(self, logits: &[f64]) -> f64 {
        let yes = logits[tokenizer::YES as usize];
        match self {
            ScoreRule::YesNoMargin => sigmoid(yes - logits[tokenizer::NO as usize]),
            ScoreRule::YesLogit => sigmoid(yes),
        }
    }
}

/// Probability of `Yes` as the first answer token. The logits are taken at
/// `answer_start − 1`, the position that predicts the first answer token.
pub fn score_yes(
    params: &LmParams,
    mix: Option<&AdapterMix>,
    seq: &SplicedSequence,
    rule: ScoreRule,
) -> Result<f64> {
    let row = seq
        .answer_start
        .checked_sub(1)
        .ok_or_else(|| Error::Invalid("cannot score an empty prompt".into()))?;
    let (logits, _) = forward(params, mix, seq, Mode::Eval, &[row])?;
    Ok(rule.apply(logits.values.row(0)))
}

/// [`score_yes`] for each sequence in turn.
pub fn score_batch(
    params: &LmParams,
    mix: Option<&AdapterMix>,
    seqs: &[SplicedSequence],
    rule: ScoreRule,
) -> Result<Vec<f64>> {
    seqs.iter()
        .map(|s| score_yes(params, mix, s, rule))
        .collect()
}

fn never_generated(id: u32) -> bool {
    matches!(
        id,
        tokenizer::PAD | tokenizer::BOS | tokenizer::USER_SLOT | tokenizer::ITEM_SLOT
    )
}

/// Greedy decoding from the end of `prompt` until EOS or `max_new` tokens.
/// Ties go to the lowest token id. The returned ids exclude EOS.
pub fn generate(
    params: &LmParams,
    mix: Option<&AdapterMix>,
    prompt: &SplicedSequence,
    max_new: usize,
) -> Result<Vec<u32>> {
    let mut seq = prompt.clone();
    seq.answer_start = seq.len();
    let mut out = Vec::new();
    let d = params.config.d_model;
    while out.len() < max_new && seq.len() < params.config.context_len {
        let last = seq.len() - 1;
        let (logits, _) = forward(params, mix, &seq, Mode::Eval, &[last])?;
        let row = logits.values.row(0);
        let mut best: Option<(u32, f64)> = None;
        for (id, &z) in row.iter().enumerate() {
            let id = id as u32;
            if never_generated(id) {
                continue;
            }
            if best.map_or(true, |(_, b)| z > b) {
                best = Some((id, z));
            }
        }
        let (next, _) =
            best.ok_or_else(|| Error::Invalid("vocabulary has no generable tokens".into()))?;
        if next == tokenizer::EOS {
            break;
        }
        out.push(next);
        seq.ids.push(next);
        let mut data = std::mem::take(&mut seq.embeddings.data);
        data.extend_from_slice(params.tok_emb.row(next as usize));
        seq.embeddings = Mat::from_vec(seq.ids.len(), d, data);
        seq.answer_start = seq.len();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(vocab: usize) -> LmConfig {
        LmConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            context_len: 32,
            vocab_size: vocab,
            mlp_ratio: 2,
            tie_embeddings: false,
            seed: 7,
        }
    }

    /// Parameters with non-trivial LayerNorm affine terms and biases.
    fn perturbed(cfg: &LmConfig) -> LmParams {
        let mut p = LmParams::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        p.visit_mut(|name, m| {
            if name.contains("ln") || name.contains(".b") {
                for v in &mut m.data {
                    *v += rng.gen_range(-0.3..0.3);
                }
            } else {
                for v in &mut m.data {
                    *v *= 5.0;
                }
            }
        });
        p
    }

    fn adapter(cfg: &LmConfig, seed: u64, dropout: f64) -> LoraAdapter {
        let mut a = LoraAdapter::init(
            cfg,
            LoraConfig {
                rank: 3,
                alpha: 6.0,
                dropout,
            },
            seed,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        a.visit_mut(|_, _, m| {
            m.data
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.5..0.5))
        });
        a
    }

    fn sequence(params: &LmParams, len: usize, with_slot: bool) -> SplicedSequence {
        let ids: Vec<u32> = (0..len as u32)
            .map(|i| (i * 7 + 3) % params.config.vocab_size as u32)
            .collect();
        let mut ids = ids;
        let slots = if with_slot {
            ids[2] = tokenizer::ITEM_SLOT;
            vec![(2, Slot::Item(0))]
        } else {
            vec![]
        };
        embed_and_splice(params, &ids, &slots, len - 2, |_| {
            Ok((0..16).map(|i| (i as f64 * 0.37).sin()).collect())
        })
        .unwrap()
    }

    fn loss(logits: &LogitRows, weights: &Mat) -> f64 {
        logits
            .values
            .data
            .iter()
            .zip(&weights.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    fn close(analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= 1e-3 * analytic.abs().max(numeric.abs()) || diff <= 1e-8
    }

    /// Central differences on a spread of entries of every tensor.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny(40);
        let params = perturbed(&cfg);
        let (a1, a2) = (adapter(&cfg, 1, 0.3), adapter(&cfg, 2, 0.3));
        let mix = AdapterMix::weighted(&[0.7, 0.3], &[&a1, &a2]).unwrap();
        let seq = sequence(&params, 9, true);
        let rows = vec![3, 5, 8];
        let mode = Mode::Train { seed: 11 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let weights = Mat::randn(rows.len(), cfg.vocab_size, 1.0, &mut rng);

        let (logits, cache) = forward(&params, Some(&mix), &seq, mode, &rows).unwrap();
        let request = GradRequest {
            base: true,
            adapter_layers: Some(vec![true, true]),
            inputs: true,
        };
        let grads = backward(&params, Some(&mix), &seq, &cache, &rows, &weights, &request).unwrap();
        let _ = logits;
        let h = 1e-5;
        let mut failures = Vec::new();

        let base = grads.base.as_ref().unwrap();
        let mut names = Vec::new();
        params.visit(|name, m| names.push((name.to_string(), m.data.len())));
        for (name, n) in &names {
            let mut analytic = Vec::new();
            base.visit(|nm, m| {
                if nm == name {
                    analytic = m.data.clone();
                }
            });
            for idx in (0..*n).step_by((*n / 5).max(1)) {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p.visit_mut(|nm, m| {
                        if nm == name {
                            m.data[idx] += delta;
                        }
                    });
                    let seq = embed_and_splice(&p, &seq.ids, &seq.slots, seq.answer_start, |_| {
                        Ok(seq.embeddings.row(2).to_vec())
                    })
                    .unwrap();
                    loss(
                        &forward(&p, Some(&mix), &seq, mode, &rows).unwrap().0,
                        &weights,
                    )
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                if !close(analytic[idx], numeric) {
                    failures.push(format!("{name}[{idx}]: {} vs {numeric}", analytic[idx]));
                }
            }
        }

        for (which, grad) in grads.adapters.iter().enumerate() {
            let mut entries = Vec::new();
            grad.visit(|name, layer, m| entries.push((name.to_string(), layer, m.data.clone())));
            for (name, _, analytic) in &entries {
                for idx in (0..analytic.len()).step_by((analytic.len() / 4).max(1)) {
                    let eval = |delta: f64| {
                        let mut adapters = [a1.clone(), a2.clone()];
                        adapters[which].visit_mut(|nm, _, m| {
                            if nm == name {
                                m.data[idx] += delta;
                            }
                        });
                        let mix = AdapterMix::weighted(&[0.7, 0.3], &[&adapters[0], &adapters[1]])
                            .unwrap();
                        loss(
                            &forward(&params, Some(&mix), &seq, mode, &rows).unwrap().0,
                            &weights,
                        )
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    if !close(analytic[idx], numeric) {
                        failures.push(format!(
                            "adapter{which}.{name}[{idx}]: {} vs {numeric}",
                            analytic[idx]
                        ));
                    }
                }
            }
        }

        let dinput = grads.inputs.as_ref().unwrap();
        for idx in (0..dinput.data.len()).step_by(7) {
            let eval = |delta: f64| {
                let mut s = seq.clone();
                s.embeddings.data[idx] += delta;
                loss(
                    &forward(&params, Some(&mix), &s, mode, &rows).unwrap().0,
                    &weights,
                )
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            if !close(dinput.data[idx], numeric) {
                failures.push(format!("input[{idx}]: {} vs {numeric}", dinput.data[idx]));
            }
        }
        assert!(failures.is_empty(), "{failures:#?}");
    }

    #[test]
    fn tied_embedding_gradients_match_finite_differences() {
        let cfg = LmConfig {
            tie_embeddings: true,
            ..tiny(30)
        };
        let params = perturbed(&cfg);
        let seq = sequence(&params, 6, false);
        let rows = vec![2, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let weights = Mat::randn(rows.len(), cfg.vocab_size, 1.0, &mut rng);
        let (_, cache) = forward(&params, None, &seq, Mode::Eval, &rows).unwrap();
        let grads = backward(
            &params,
            None,
            &seq,
            &cache,
            &rows,
            &weights,
            &GradRequest::full(2),
        )
        .unwrap();
        let analytic = &grads.base.unwrap().tok_emb;
        let h = 1e-5;
        for idx in (0..analytic.data.len()).step_by(23) {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tok_emb.data[idx] += delta;
                let s = embed_and_splice(&p, &seq.ids, &[], seq.answer_start, |_| unreachable!())
                    .unwrap();
                loss(
                    &forward(&p, None, &s, Mode::Eval, &rows).unwrap().0,
                    &weights,
                )
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                close(analytic.data[idx], numeric),
                "tok_emb[{idx}]: {} vs {numeric}",
                analytic.data[idx]
            );
        }
    }

    #[test]
    fn upper_layer_request_matches_full_request() {
        let cfg = tiny(40);
        let params = perturbed(&cfg);
        let a = adapter(&cfg, 3, 0.0);
        let mix = AdapterMix::single(&a);
        let seq = sequence(&params, 8, true);
        let rows = vec![7];
        let weights = Mat::from_vec(1, 40, (0..40).map(|i| (i as f64).cos()).collect());
        let (_, cache) = forward(&params, Some(&mix), &seq, Mode::Eval, &rows).unwrap();
        let full = backward(
            &params,
            Some(&mix),
            &seq,
            &cache,
            &rows,
            &weights,
            &GradRequest::full(2),
        )
        .unwrap();
        let top = GradRequest {
            base: false,
            adapter_layers: Some(vec![false, true]),
            inputs: false,
        };
        let partial = backward(&params, Some(&mix), &seq, &cache, &rows, &weights, &top).unwrap();
        assert_eq!(partial.adapters[0].layers[1], full.adapters[0].layers[1]);
        assert!(partial.adapters[0].layers[0]
            .q
            .a
            .data
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn zero_b_adapter_is_identity() {
        let cfg = tiny(40);
        let params = perturbed(&cfg);
        let a = LoraAdapter::init(&cfg, LoraConfig::default(), 3).unwrap();
        let seq = sequence(&params, 10, false);
        let rows: Vec<usize> = (0..10).collect();
        let (plain, _) = forward(&params, None, &seq, Mode::Eval, &rows).unwrap();
        let (adapted, _) = forward(
            &params,
            Some(&AdapterMix::single(&a)),
            &seq,
            Mode::Eval,
            &rows,
        )
        .unwrap();
        assert_eq!(plain.values, adapted.values);
    }

    #[test]
    fn merged_adapter_matches_runtime_adapter() {
        let cfg = tiny(40);
        let params = perturbed(&cfg);
        let a = adapter(&cfg, 4, 0.1);
        let seq = sequence(&params, 10, true);
        let rows: Vec<usize> = (0..10).collect();
        let (runtime, _) = forward(
            &params,
            Some(&AdapterMix::single(&a)),
            &seq,
            Mode::Eval,
            &rows,
        )
        .unwrap();
        let (merged, _) = forward(&a.merge_into(&params), None, &seq, Mode::Eval, &rows).unwrap();
        assert!(runtime.values.max_abs_diff(&merged.values) <= 1e-6);
    }

    #[test]
    fn outputs_are_causal() {
        let cfg = tiny(40);
        let params = perturbed(&cfg);
        let seq = sequence(&params, 10, false);
        let mut changed = seq.clone();
        changed
            .embeddings
            .row_mut(7)
            .iter_mut()
            .for_each(|v| *v += 1.0);
        let rows: Vec<usize> = (0..10).collect();
        let (a, _) = forward(&params, None, &seq, Mode::Eval, &rows).unwrap();
        let (b, _) = forward(&params, None, &changed, Mode::Eval, &rows).unwrap();
        for r in 0..7 {
            assert_eq!(a.values.row(r), b.values.row(r));
        }
        assert_ne!(a.values.row(7), b.values.row(7));
    }

    #[test]
    fn logits_rows_match_full_computation() {
        let cfg = tiny(40);
        let params = perturbed(&cfg);
        let seq = sequence(&params, 6, false);
        let all: Vec<usize> = (0..6).collect();
        let (full, _) = forward(&params, None, &seq, Mode::Eval, &all).unwrap();
        let (some, _) = forward(&params, None, &seq, Mode::Eval, &[4, 1]).unwrap();
        assert_eq!(some.at(4).unwrap(), full.values.row(4));
        assert_eq!(some.at(1).unwrap(), full.values.row(1));
    }

    #[test]
    fn eval_mode_ignores_dropout_and_train_mode_is_seeded() {
        let cfg = tiny(40);
        let params = perturbed(&cfg);
        let a = adapter(&cfg, 5, 0.5);
        let mix = AdapterMix::single(&a);
        let seq = sequence(&params, 8, false);
        let rows = vec![7];
        let run = |mode| {
            forward(&params, Some(&mix), &seq, mode, &rows)
                .unwrap()
                .0
                .values
        };
        assert_eq!(run(Mode::Eval), run(Mode::Eval));
        assert_eq!(run(Mode::Train { seed: 1 }), run(Mode::Train { seed: 1 }));
        assert_ne!(run(Mode::Train { seed: 1 }), run(Mode::Train { seed: 2 }));
        assert_ne!(run(Mode::Train { seed: 1 }), run(Mode::Eval));
    }

    #[test]
    fn context_overflow_is_rejected() {
        let cfg = tiny(40);
        let params = perturbed(&cfg);
        let ids = vec![9u32; 33];
        let seq = embed_and_splice(&params, &ids, &[], 33, |_| unreachable!()).unwrap();
        assert!(matches!(
            forward(&params, None, &seq, Mode::Eval, &[0]),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn splice_checks_feature_dimension() {
        let cfg = tiny(40);
        let params = perturbed(&cfg);
        let err = embed_and_splice(&params, &[9, 6, 9], &[(1, Slot::Item(3))], 3, |_| {
            Ok(vec![0.0; 5])
        })
        .unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                expected: 16,
                got: 5
            }
        ));
        let err = embed_and_splice(&params, &[9, 6, 9], &[(1, Slot::Item(3))], 3, |_| {
            Err(Error::UnknownId {
                kind: "item",
                id: 3,
            })
        })
        .unwrap_err();
        assert!(matches!(err, Error::UnknownId { .. }));
    }

    #[test]
    fn score_rules() {
        let mut logits = vec![0.0; 10];
        logits[tokenizer::YES as usize] = 2.0;
        logits[tokenizer::NO as usize] = 1.0;
        assert!((ScoreRule::YesNoMargin.apply(&logits) - sigmoid(1.0)).abs() < 1e-15);
        assert!((ScoreRule::YesLogit.apply(&logits) - sigmoid(2.0)).abs() < 1e-15);
    }

    #[test]
    fn greedy_ties_resolve_to_lowest_generable_id() {
        let cfg = tiny(12);
        let mut params = perturbed(&cfg);
        params
            .w_out
            .as_mut()
            .unwrap()
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let seq = embed_and_splice(&params, &[7, 8], &[], 2, |_| unreachable!()).unwrap();
        // All logits tie; PAD and BOS are excluded so EOS wins.
        assert!(generate(&params, None, &seq, 5).unwrap().is_empty());
    }

    #[test]
    fn greedy_generation_follows_output_bias() {
        let cfg = tiny(12);
        let mut params = perturbed(&cfg);
        let w = params.w_out.as_mut().unwrap();
        w.data.iter_mut().for_each(|v| *v = 0.0);
        // Slot and PAD columns dominate but are never produced; token 9 is next best.
        for r in 0..w.rows {
            w.data[r * w.cols + tokenizer::USER_SLOT as usize] = 1e3;
            w.data[r * w.cols + tokenizer::PAD as usize] = 1e3;
        }
        params.lnf_g.data.iter_mut().for_each(|v| *v = 0.0);
        params.lnf_b.data.iter_mut().for_each(|v| *v = 1.0);
        for r in 0..w.rows {
            w.data[r * w.cols + 9] = 1.0;
        }
        let seq = embed_and_splice(&params, &[7, 8], &[], 2, |_| unreachable!()).unwrap();
        assert_eq!(generate(&params, None, &seq, 4).unwrap(), vec![9, 9, 9, 9]);
    }

    #[test]
    fn score_is_shift_invariant_and_batch_transparent() {
        let mut logits = vec![0.3; 10];
        logits[tokenizer::YES as usize] = 1.7;
        logits[tokenizer::NO as usize] = 0.7;
        let base = ScoreRule::YesNoMargin.apply(&logits);
        assert!((base - 0.731_058_578_630_004_9).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|v| v + 123.0).collect();
        assert!((ScoreRule::YesNoMargin.apply(&shifted) - base).abs() < 1e-12);

        let cfg = tiny(40);
        let params = perturbed(&cfg);
        let seqs: Vec<_> = (4..8).map(|n| sequence(&params, n, n % 2 == 0)).collect();
        let batch = score_batch(&params, None, &seqs, ScoreRule::YesNoMargin).unwrap();
        for (s, b) in seqs.iter().zip(&batch) {
            assert_eq!(
                score_yes(&params, None, s, ScoreRule::YesNoMargin).unwrap(),
                *b
            );
        }
    }

    #[test]
    fn zero_budget_generates_nothing_and_decoding_is_repeatable() {
        let cfg = tiny(40);
        let params = perturbed(&cfg);
        let seq = sequence(&params, 5, false);
        assert!(generate(&params, None, &seq, 0).unwrap().is_empty());
        assert_eq!(
            generate(&params, None, &seq, 6).unwrap(),
            generate(&params, None, &seq, 6).unwrap()
        );
    }

    #[test]
    fn splicing_replaces_only_slot_rows() {
        let cfg = tiny(40);
        let params = perturbed(&cfg);
        let ids = [9u32, tokenizer::ITEM_SLOT, 11];
        let seq = embed_and_splice(&params, &ids, &[(1, Slot::Item(4))], 3, |_| {
            Ok(vec![0.0; 16])
        })
        .unwrap();
        assert_eq!(seq.embeddings.row(0), params.tok_emb.row(9));
        assert_eq!(seq.embeddings.row(1), &[0.0; 16][..]);
        assert_eq!(seq.embeddings.row(2), params.tok_emb.row(11));
    }
}
