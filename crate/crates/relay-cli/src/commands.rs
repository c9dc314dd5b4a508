//! Subcommand implementations.

use crate::config::*;
use anyhow::{anyhow, Context};
use relay_core::bridge::BridgeVariant;
use relay_core::data::{gen_synthetic_pair, load_parallel, SyntheticLangSpec};
use relay_core::harness::{self, PipelineSettings};
use relay_core::metrics;
use relay_core::model::{pretrain_lm, TrainLogRow, TransformerLM};
use relay_core::params::ParamStore;
use relay_core::relay::{
    assemble_relay, load_relay_checkpoint, save_lm_checkpoint, save_relay_checkpoint,
};
use relay_core::vocab::{TokenizerKind, Vocabulary};
use std::fs;
use std::path::Path;

fn read_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| anyhow!("data error: cannot read {}: {e}", path.display()))?;
    Ok(text.lines().map(|l| l.trim_end().to_string()).collect())
}

fn write_train_log(path: &Path, log: &[TrainLogRow]) -> anyhow::Result<()> {
    let mut out = String::from("step\tlr\ttrain_loss\theldout_bleu\n");
    for r in log {
        let bleu = r
            .heldout_bleu
            .map(|b| format!("{b:.4}"))
            .unwrap_or_default();
        out.push_str(&format!("{}\t{:.4e}\t{:.6}\t{}\n", r.step, r.lr, r.loss, bleu));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn cmd_pretrain(config: PretrainConfig, out_dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out_dir)?;
    write_resolved(out_dir, &config)?;
    let sentences = read_lines(&config.corpus)?;
    let sentences: Vec<String> = sentences.into_iter().filter(|l| !l.is_empty()).collect();
    let mut vocab_corpus = sentences.clone();
    vocab_corpus.extend(config.vocab_extra_lines.iter().cloned());
    let vocab = Vocabulary::build(&vocab_corpus, TokenizerKind::WhitespaceWord)?;
    let mut store = ParamStore::<f32>::new();
    let model = TransformerLM::init(
        &mut store,
        config.model.with_vocab(vocab.size()),
        &config.prefix,
        config.seed,
    )?;
    let log = pretrain_lm(
        &model,
        &mut store,
        &sentences,
        &vocab,
        &config.train,
        &config.optim,
        config.seed,
    )?;
    write_train_log(&out_dir.join("loss.tsv"), &log)?;
    vocab.save(&out_dir.join("lm.vocab"))?;
    save_lm_checkpoint(&out_dir.join("lm.ckpt"), &model, &store, &vocab)?;
    println!(
        "pretrained {} steps, final loss {:.4}; checkpoint at {}",
        log.len(),
        log.last().map(|r| r.loss).unwrap_or(f64::NAN),
        out_dir.join("lm.ckpt").display()
    );
    Ok(())
}

pub fn cmd_train_bridge(config: TrainBridgeConfig, out_dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out_dir)?;
    write_resolved(out_dir, &config)?;
    let (mut store, relay) = assemble_relay(
        &config.ckpt_a,
        &config.ckpt_b,
        &config.bridge,
        config.prompt.clone(),
        config.finetune_a,
        config.finetune_b,
        config.lora.clone(),
        config.seed,
    )?;
    let train = load_parallel(&config.train_src, &config.train_tgt)?;
    let heldout = match (&config.heldout_src, &config.heldout_tgt) {
        (Some(s), Some(t)) => Some(load_parallel(s, t)?),
        (None, None) => None,
        _ => return Err(anyhow!("config error: heldout_src and heldout_tgt must come together")),
    };
    let outcome = relay.train_bridge(
        &mut store,
        &train,
        &config.train,
        &config.optim,
        heldout.as_ref(),
        config.seed,
    )?;
    write_train_log(&out_dir.join("train_log.tsv"), &outcome.log)?;
    save_relay_checkpoint(&out_dir.join("relay.ckpt"), &relay, &store)?;
    if let Some(h) = &heldout {
        let report = metrics::evaluate(
            &relay,
            &store,
            h,
            &relay_core::decode::DecodeSettings::default(),
            Some(&out_dir.join("heldout_hyps.txt")),
        )?;
        fs::write(
            out_dir.join("heldout_report.json"),
            report.to_canonical_json() + "\n",
        )?;
        println!(
            "trained {} steps, loss {:.4} -> {:.4}, heldout BLEU {:.2}",
            outcome.log.len(),
            outcome.initial_loss,
            outcome.final_loss,
            report.bleu
        );
    } else {
        println!(
            "trained {} steps, loss {:.4} -> {:.4}",
            outcome.log.len(),
            outcome.initial_loss,
            outcome.final_loss
        );
    }
    Ok(())
}

pub fn cmd_translate(
    config: TranslateConfig,
    input: &Path,
    output: &Path,
    out_dir: &Path,
) -> anyhow::Result<()> {
    fs::create_dir_all(out_dir)?;
    write_resolved(out_dir, &config)?;
    let (store, relay) = load_relay_checkpoint(&config.checkpoint)?;
    let lines = read_lines(input)?;
    // skip a trailing empty line from a final newline, keep interior ones as errors
    let lines: Vec<String> = if lines.last().is_some_and(|l| l.is_empty()) {
        lines[..lines.len() - 1].to_vec()
    } else {
        lines
    };
    for (i, l) in lines.iter().enumerate() {
        if l.is_empty() {
            return Err(anyhow!("data error: empty source line {} in {}", i + 1, input.display()));
        }
    }
    let translations = relay_core::decode::translate_lines(&relay, &store, &lines, &config.decode)?;
    let mut text = String::new();
    for t in &translations {
        text.push_str(t);
        text.push('\n');
    }
    fs::write(output, text)?;
    println!("translated {} lines to {}", translations.len(), output.display());
    Ok(())
}

pub fn cmd_evaluate(
    config: EvaluateConfig,
    hyp: Option<&Path>,
    src: Option<&Path>,
    refs: &Path,
    out_dir: &Path,
) -> anyhow::Result<()> {
    fs::create_dir_all(out_dir)?;
    write_resolved(out_dir, &config)?;
    let ref_lines = read_nonempty(refs)?;
    let report = match (hyp, src, &config.checkpoint) {
        (Some(hyp_path), _, _) => {
            let hyp_lines = read_hyp_lines(hyp_path, ref_lines.len())?;
            metrics::score_corpus(&hyp_lines, &ref_lines)?
        }
        (None, Some(src_path), Some(ckpt)) => {
            let (store, relay) = load_relay_checkpoint(ckpt)?;
            let src_lines = read_nonempty(src_path)?;
            let hyps = relay_core::decode::translate_lines(&relay, &store, &src_lines, &config.decode)?;
            let mut text = String::new();
            for h in &hyps {
                text.push_str(h);
                text.push('\n');
            }
            fs::write(out_dir.join("hyps.txt"), text)?;
            metrics::score_corpus(&hyps, &ref_lines)?
        }
        _ => {
            return Err(anyhow!(
                "config error: evaluate needs either --hyp, or --src plus a checkpoint in the config"
            ))
        }
    };
    let json = report.to_canonical_json();
    fs::write(out_dir.join("report.json"), json.clone() + "\n")?;
    println!("{json}");
    Ok(())
}

fn read_nonempty(path: &Path) -> anyhow::Result<Vec<String>> {
    let lines = read_lines(path)?;
    let lines: Vec<String> = if lines.last().is_some_and(|l| l.is_empty()) {
        lines[..lines.len() - 1].to_vec()
    } else {
        lines
    };
    Ok(lines)
}

/// Hypothesis lines may legitimately be empty (failed translations); pad or
/// reject only on count mismatch.
fn read_hyp_lines(path: &Path, want: usize) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| anyhow!("data error: cannot read {}: {e}", path.display()))?;
    let mut lines: Vec<String> = text.lines().map(|l| l.trim_end().to_string()).collect();
    if lines.len() == want + 1 && lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    if lines.len() != want {
        return Err(anyhow!(
            "data error: {} has {} lines, references have {want}",
            path.display(),
            lines.len()
        ));
    }
    Ok(lines)
}

pub fn cmd_gen_data(config: GenDataConfig, out_dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out_dir)?;
    write_resolved(out_dir, &config)?;
    let spec = SyntheticLangSpec::with_random_permutation(
        config.n_symbols,
        config.len_range,
        config.reorder,
        config.seed,
    )?;
    let data = gen_synthetic_pair(&spec, &config.counts)?;
    data.train
        .save(&out_dir.join("train.src"), &out_dir.join("train.tgt"))?;
    data.heldout
        .save(&out_dir.join("heldout.src"), &out_dir.join("heldout.tgt"))?;
    data.test
        .save(&out_dir.join("test.src"), &out_dir.join("test.tgt"))?;
    fs::write(out_dir.join("mono_a.txt"), data.mono_a.join("\n") + "\n")?;
    fs::write(out_dir.join("mono_b.txt"), data.mono_b.join("\n") + "\n")?;
    let spec_json = serde_json::to_value(&spec)?;
    fs::write(
        out_dir.join("spec.json"),
        serde_json::to_string_pretty(&spec_json)? + "\n",
    )?;
    println!(
        "wrote {} train / {} heldout / {} test pairs and {}+{} monolingual lines to {}",
        data.train.len(),
        data.heldout.len(),
        data.test.len(),
        data.mono_a.len(),
        data.mono_b.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_ablate(config: AblateConfig, axis: &str, out_dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out_dir)?;
    write_resolved(out_dir, &config)?;
    let spec = SyntheticLangSpec::with_random_permutation(
        config.n_symbols,
        config.len_range,
        config.reorder,
        config.seed,
    )?;
    let settings = PipelineSettings {
        shape_a: config.shape_a.clone(),
        shape_b: config.shape_b.clone(),
        prompt: config.prompt.clone(),
        pretrain: config.pretrain.clone(),
        pretrain_adam: config.pretrain_optim.clone(),
        bridge_train: config.train.clone(),
        bridge_adam: config.optim.clone(),
        decode: config.decode.clone(),
        seed: config.seed,
    };
    let fixture = harness::build_fixture(&spec, &config.counts, &settings)
        .context("building the shared fixture")?;
    let rows = match axis {
        "finetune-grid" => harness::finetune_grid(&fixture, &config.lora, &settings)?,
        "data-size" => {
            harness::data_size_sweep(&fixture, &config.data_sizes, &config.lora, &settings)?
        }
        "mapping-variant" => harness::mapping_variant_sweep(&fixture, &config.lora, &settings)?,
        other => return Err(anyhow!("config error: unknown ablation axis {other:?}")),
    };
    let mut tsv = String::from("setting\tbleu\tchrf\tfinal_loss\n");
    for r in &rows {
        tsv.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.6}\n",
            r.label, r.bleu, r.chrf, r.final_loss
        ));
    }
    fs::write(out_dir.join("report.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

/// --bridge override parser.
pub fn parse_bridge_variant(s: &str) -> anyhow::Result<BridgeVariant> {
    match s {
        "fc" => Ok(BridgeVariant::Fc),
        "ca" => Ok(BridgeVariant::Ca),
        "caq" | "ca-q" => Ok(BridgeVariant::CaQ),
        other => Err(anyhow!("config error: unknown bridge variant {other:?}")),
    }
}
