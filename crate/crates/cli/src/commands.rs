use std::fs;
use std::io::{self, Write};
use std::path::Path;

use hwlm::cells::CellKind;
use hwlm::corpus::{read_lines, split_heldout, TokenStream, Vocabulary};
use hwlm::evaluator::{estimate_weights, interpolate, model_stream, perplexity, InterpolationWeights, ProbStream};
use hwlm::gradcheck::{cell_gradient_error, network_gradient_error};
use hwlm::network::{load_checkpoint_any, save_checkpoint, AnyModel, LmArchitecture, LmModel};
use hwlm::rescorer::{
    chosen_words, format_score_dump, format_transcripts, lm_scores, matched_pair_test, read_nbest, read_transcripts, rescore,
    tune_lm_weight, wer, ModelScorer, RescoreConfig,
};
use hwlm::trainer::{convert_to_highway, fine_tune, train, EpochRecord, TrainConfig, TrainData, TrainError, TrainText};
use hwlm::{Precision, Real};

use crate::args::{Batching, Cli, Command, DataArgs, Global, OptimArgs};
use crate::manifest::RunManifest;
use crate::{CliError, EXIT_CHECK_FAILED, EXIT_DIVERGED};

type CmdResult = Result<(), CliError>;

pub fn run(cli: Cli) -> CmdResult {
    configure_threads(cli.global.threads)?;
    let g = &cli.global;
    let name = cli.command.name();
    match &cli.command {
        Command::Vocab(a) => {
            announce(RunManifest::new(name, g, a, &[&a.corpus])?);
            let lines = read_lines(&a.corpus)?;
            let (train_lines, _) = heldout_split(&lines, a.heldout_lines)?;
            let v = Vocabulary::build(train_lines.iter().map(String::as_str), a.max_size)?;
            v.write(&a.out)?;
            println!("tokens={} fingerprint={}", v.len(), v.fingerprint());
            Ok(())
        }
        Command::Train(a) => {
            let mut inputs = vec![a.data.corpus.as_path(), a.vocab.as_path()];
            inputs.extend(a.data.heldout.as_deref());
            let manifest = RunManifest::new(name, g, a, &inputs)?;
            let vocab = Vocabulary::read(&a.vocab)?;
            let mut arch = LmArchitecture::new(vocab.len(), a.embedding_dim, a.hidden_dim)
                .with_cell(a.cell.into(), a.depth)
                .with_layer_norm(!a.no_layer_norm)
                .with_dropout(a.optim.dropout);
            // Skips on every recurrent layer after the first and on the FC layer.
            arch.num_layers = a.layers;
            arch.residual_layers = (1..=a.layers).collect();
            match g.precision.map_or(Precision::F32, Into::into) {
                Precision::F32 => {
                    let m = LmModel::<f32>::new(arch, g.seed)?;
                    run_training(m, false, &vocab, &a.data, &a.optim, g, &a.out, &manifest)
                }
                Precision::F64 => {
                    let m = LmModel::<f64>::new(arch, g.seed)?;
                    run_training(m, false, &vocab, &a.data, &a.optim, g, &a.out, &manifest)
                }
            }
        }
        Command::Convert(a) => {
            announce(RunManifest::new(name, g, a, &[&a.input])?);
            let ck = load_checkpoint_any(&a.input, None)?;
            let kind: CellKind = a.variant.into();
            let vocab = ck.vocab;
            let precision = g.precision.map_or(ck.model.precision(), Into::into);
            let arch = match precision {
                Precision::F32 => {
                    let hw = convert_to_highway(&ck.model.into_precision::<f32>(), kind, a.depth, a.bias, g.seed)?;
                    save_checkpoint(&hw, vocab.as_deref(), &a.out)?;
                    hw.arch
                }
                Precision::F64 => {
                    let hw = convert_to_highway(&ck.model.into_precision::<f64>(), kind, a.depth, a.bias, g.seed)?;
                    save_checkpoint(&hw, vocab.as_deref(), &a.out)?;
                    hw.arch
                }
            };
            println!("variant={} depth={} transform_bias={}", arch.cell_kind, arch.depth, a.bias);
            Ok(())
        }
        Command::Finetune(a) => {
            let mut inputs = vec![a.input.as_path(), a.data.corpus.as_path()];
            inputs.extend(a.data.heldout.as_deref());
            inputs.extend(a.vocab.as_deref());
            let manifest = RunManifest::new(name, g, a, &inputs)?;
            let ck = load_checkpoint_any(&a.input, None)?;
            let vocab = resolve_vocab(ck.vocab, a.vocab.as_deref(), ck.model.vocab_fingerprint())?;
            match g.precision.map_or(ck.model.precision(), Into::into) {
                Precision::F32 => run_training(ck.model.into_precision::<f32>(), true, &vocab, &a.data, &a.optim, g, &a.out, &manifest),
                Precision::F64 => run_training(ck.model.into_precision::<f64>(), true, &vocab, &a.data, &a.optim, g, &a.out, &manifest),
            }
        }
        Command::Ppl(a) => {
            let mut inputs = vec![a.model.as_path(), a.text.as_path()];
            inputs.extend(a.vocab.as_deref());
            announce(RunManifest::new(name, g, a, &inputs)?);
            let ck = load_checkpoint_any(&a.model, None)?;
            let vocab = resolve_vocab(ck.vocab, a.vocab.as_deref(), ck.model.vocab_fingerprint())?;
            let sentences: Vec<Vec<u32>> = read_lines(&a.text)?.iter().map(|l| vocab.encode(l)).collect();
            let stream = match g.precision.map_or(ck.model.precision(), Into::into) {
                Precision::F32 => model_stream(&ck.model.into_precision::<f32>(), &a.label, &sentences, a.batch)?,
                Precision::F64 => model_stream(&ck.model.into_precision::<f64>(), &a.label, &sentences, a.batch)?,
            };
            if let Some(p) = &a.dump_probs {
                stream.write(p)?;
            }
            let ppl = perplexity(&stream, stream.len())?;
            println!("ppl={ppl} tokens={}", stream.len());
            Ok(())
        }
        Command::Interp(a) => {
            let inputs: Vec<&Path> = a.streams.iter().map(|p| p.as_path()).collect();
            announce(RunManifest::new(name, g, a, &inputs)?);
            let streams = read_streams(&a.streams)?;
            let w = match &a.weights {
                Some(w) => InterpolationWeights::new(w.clone())?,
                None => InterpolationWeights::uniform(streams.len()),
            };
            let mixed = interpolate(&streams, &w)?;
            if let Some(p) = &a.out {
                mixed.write(p)?;
            }
            println!("ppl={} tokens={}", perplexity(&mixed, mixed.len())?, mixed.len());
            Ok(())
        }
        Command::Weights(a) => {
            let inputs: Vec<&Path> = a.streams.iter().map(|p| p.as_path()).collect();
            announce(RunManifest::new(name, g, a, &inputs)?);
            let streams = read_streams(&a.streams)?;
            let em = estimate_weights(&streams)?;
            let joined = join(em.weights.as_slice());
            if let Some(p) = &a.out {
                fs::write(p, format!("{joined}\n")).map_err(|e| hwlm::Error::io(p, e))?;
            }
            let mixed = interpolate(&streams, &em.weights)?;
            println!(
                "weights={joined} ppl={} iterations={} converged={} degenerate={}",
                perplexity(&mixed, mixed.len())?,
                em.iterations,
                em.converged,
                em.degenerate
            );
            Ok(())
        }
        Command::Rescore(a) => {
            let mut inputs = vec![a.nbest.as_path()];
            inputs.extend(a.models.iter().map(|p| p.as_path()));
            inputs.extend(a.vocab.as_deref());
            inputs.extend(a.dev_nbest.as_deref());
            inputs.extend(a.dev_ref.as_deref());
            announce(RunManifest::new(name, g, a, &inputs)?);
            let cks = a
                .models
                .iter()
                .map(|p| load_checkpoint_any(p, None))
                .collect::<hwlm::Result<Vec<_>>>()?;
            let precision = g.precision.map_or(cks[0].model.precision(), Into::into);
            let fp = cks[0].model.vocab_fingerprint().to_string();
            let vocab = resolve_vocab(cks[0].vocab.clone(), a.vocab.as_deref(), &fp)?;
            let models: Vec<AnyModel> = cks.into_iter().map(|c| c.model).collect();
            match precision {
                Precision::F32 => rescore_cmd(models.into_iter().map(AnyModel::into_precision::<f32>).collect(), &vocab, a),
                Precision::F64 => rescore_cmd(models.into_iter().map(AnyModel::into_precision::<f64>).collect(), &vocab, a),
            }
        }
        Command::Wer(a) => {
            announce(RunManifest::new(name, g, a, &[&a.hyp, &a.reference])?);
            let r = wer(&read_transcripts(&a.hyp)?, &read_transcripts(&a.reference)?)?;
            println!(
                "wer={} errors={} sub={} ins={} del={} ref_words={}",
                r.wer,
                r.counts.errors(),
                r.counts.substitutions,
                r.counts.insertions,
                r.counts.deletions,
                r.ref_words
            );
            Ok(())
        }
        Command::Mpt(a) => {
            announce(RunManifest::new(name, g, a, &[&a.a, &a.b, &a.reference])?);
            let r = matched_pair_test(
                &read_transcripts(&a.a)?,
                &read_transcripts(&a.b)?,
                &read_transcripts(&a.reference)?,
                a.differing_only,
            )?;
            println!("z={} p={} n={} mean={} std={}", r.z, r.p, r.n, r.mean, r.std);
            Ok(())
        }
        Command::Gradcheck(a) => {
            announce(RunManifest::new(name, g, a, &[])?);
            let kind: CellKind = a.cell.into();
            let depth = if kind == CellKind::Lstm { 0 } else { a.depth };
            let mut worst = 0.0f64;
            for ln in [false, true] {
                worst = worst.max(cell_gradient_error(kind, depth, ln, g.seed)?);
                worst = worst.max(network_gradient_error(kind, depth, ln, g.seed)?);
            }
            println!("max_rel_error={worst}");
            if worst < 1e-5 {
                Ok(())
            } else {
                Err(CliError {
                    code: EXIT_CHECK_FAILED,
                    message: format!("gradient check failed: {worst} ≥ 1e-5"),
                })
            }
        }
    }
}

fn configure_threads(threads: usize) -> CmdResult {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::usage(format!("--threads: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn announce(m: RunManifest) {
    eprintln!("{}", m.line());
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn heldout_split(lines: &[String], k: usize) -> Result<(Vec<String>, Vec<String>), CliError> {
    if k == 0 {
        return Ok((lines.to_vec(), Vec::new()));
    }
    Ok(split_heldout(lines, k)?)
}

fn resolve_vocab(stored: Option<Vec<String>>, path: Option<&Path>, fingerprint: &str) -> Result<Vocabulary, CliError> {
    let v = match (path, stored) {
        (Some(p), _) => Vocabulary::read(p)?,
        (None, Some(tokens)) => Vocabulary::from_tokens(tokens)?,
        (None, None) => return Err(CliError::usage("checkpoint has no vocabulary; pass --vocab")),
    };
    if v.fingerprint() != fingerprint {
        return Err(hwlm::Error::FingerprintMismatch {
            expected: fingerprint.to_string(),
            found: v.fingerprint().to_string(),
        }
        .into());
    }
    Ok(v)
}

fn read_streams(paths: &[std::path::PathBuf]) -> Result<Vec<ProbStream>, CliError> {
    Ok(paths.iter().map(|p| ProbStream::read(p)).collect::<hwlm::Result<Vec<_>>>()?)
}

#[allow(clippy::too_many_arguments)]
fn run_training<T: Real>(
    model: LmModel<T>,
    continuing: bool,
    vocab: &Vocabulary,
    data: &DataArgs,
    optim: &OptimArgs,
    g: &Global,
    out: &Path,
    manifest: &RunManifest,
) -> CmdResult {
    let lines = read_lines(&data.corpus)?;
    let (train_lines, held_lines) = match (&data.heldout, data.heldout_lines) {
        (Some(p), _) => (lines, read_lines(p)?),
        (None, Some(k)) if k > 0 => split_heldout(&lines, k)?,
        _ => return Err(CliError::usage("give --heldout or --heldout-lines K with K > 0")),
    };
    let sentences: Vec<Vec<u32>> = train_lines.iter().map(|l| vocab.encode(l)).collect();
    let heldout: Vec<Vec<u32>> = held_lines.iter().map(|l| vocab.encode(l)).collect();
    let stream = TokenStream::from_ids(sentences.concat(), sentences.len());
    let text = match optim.batching {
        Batching::Stream => TrainText::Stream(&stream),
        Batching::Sentences => TrainText::Sentences(&sentences),
    };
    let train_data = TrainData {
        fingerprint: vocab.fingerprint(),
        text,
        heldout: &heldout,
    };
    let cfg = TrainConfig {
        lr: optim.lr,
        epochs: optim.epochs,
        batch_size: optim.batch_size,
        bptt_len: optim.bptt,
        dropout_rate: optim.dropout,
        clip_norm: optim.clip_norm,
        seed: g.seed,
        precision: T::PRECISION,
        eval_every: optim.eval_every,
        eval_batch: optim.eval_batch,
        deterministic: g.deterministic,
    };

    let mut log: Box<dyn Write> = match &optim.log {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p).map_err(|e| hwlm::Error::io(p, e))?)),
        None => Box::new(io::stderr()),
    };
    let log_path = optim.log.clone();
    let io_err = |e: io::Error| CliError::from(hwlm::Error::io(log_path.clone().unwrap_or_else(|| "<stderr>".into()), e));
    writeln!(log, "{}", manifest.line()).map_err(io_err)?;
    writeln!(log, "# epoch\ttrain_loss\theldout_ppl\tseconds").map_err(io_err)?;
    let mut write_err = None;
    let on_epoch = |r: &EpochRecord| {
        if let Err(e) = writeln!(log, "{}", r.to_tsv()).and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
    };
    let result = if continuing {
        fine_tune(model, &train_data, &cfg, on_epoch)
    } else {
        train(model, &train_data, &cfg, on_epoch)
    };
    if let Some(e) = write_err {
        return Err(io_err(e));
    }
    let tokens = Some(vocab.tokens());
    match result {
        Ok(outcome) => {
            save_checkpoint(&outcome.best, tokens, out)?;
            println!("best_epoch={} ppl={}", outcome.best_epoch, outcome.best_ppl);
            Ok(())
        }
        Err(TrainError::Diverged(d)) => {
            save_checkpoint(&d.last_good, tokens, out)?;
            Err(CliError {
                code: EXIT_DIVERGED,
                message: format!(
                    "training diverged at epoch {}: {}; last good model saved to {}",
                    d.epoch,
                    d.reason,
                    out.display()
                ),
            })
        }
        Err(TrainError::Failed(e)) => Err(e.into()),
    }
}

fn rescore_cmd<T: Real>(models: Vec<LmModel<T>>, vocab: &Vocabulary, a: &crate::args::RescoreArgs) -> CmdResult {
    let weights = match &a.interp_weights {
        Some(w) => InterpolationWeights::new(w.clone())?,
        None => InterpolationWeights::uniform(models.len()),
    };
    let scorer = ModelScorer::new(models.iter().collect(), weights, vocab, a.batch)?;
    let lm_weight = match (&a.dev_nbest, &a.dev_ref) {
        (Some(dn), Some(dr)) => {
            let dev = read_nbest(dn)?;
            let refs = read_transcripts(dr)?;
            let scores = lm_scores(&dev, &scorer)?;
            let (w, dev_wer) = tune_lm_weight(&dev, &scores, &refs, &a.grid, a.wip)?;
            eprintln!("tuned lm_weight={w} dev_wer={dev_wer}");
            w
        }
        _ => a.lm_weight,
    };
    let nbest = read_nbest(&a.nbest)?;
    let cfg = RescoreConfig {
        lm_weight,
        word_insertion_penalty: a.wip,
    };
    let r = rescore(&nbest, &scorer, &cfg)?;
    fs::write(&a.out, format_transcripts(&chosen_words(&r))).map_err(|e| hwlm::Error::io(&a.out, e))?;
    if let Some(p) = &a.scores {
        fs::write(p, format_score_dump(&nbest, &r)).map_err(|e| hwlm::Error::io(p, e))?;
    }
    println!("lm_weight={lm_weight} utterances={}", r.len());
    Ok(())
}
