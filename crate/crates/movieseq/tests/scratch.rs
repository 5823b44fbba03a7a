//! Temporary diagnostic for the in-context binding experiment. Not part of
//! the suite (run with --ignored).

mod common;

use std::collections::BTreeMap;

use movieseq::encoders::FrameEncoder;
use movieseq::harness::{build_vocab, load_manifest, Builder, RunConfig, Split, Toggles};
use movieseq::instructions::HistoryMode;
use movieseq::lm::{generate, train_step, LMConfig, TrainState};
use movieseq::rng::{stream, Rng};
use movieseq::seqcore::{pack, pack_prefix};

#[test]
#[ignore]
fn diagnose_binding() {
    let dir = tempfile::tempdir().unwrap();
    let fixed = std::env::var("VARIANT").unwrap_or_default().contains("fixed");
    let manifest = if fixed {
        // No permutation: photo j always belongs to name j.
        let mut out = String::new();
        for i in 0..64 {
            let t = i % 4;
            let bank: Vec<String> = common::NAMES[..4]
                .iter()
                .enumerate()
                .map(|(j, n)| format!(r#"{{"name":"{n}","seed":{}}}"#, 9000 + j))
                .collect();
            out.push_str(&format!(
                "{{\"id\":\"train{i}\",\"task\":\"identify\",\"split\":\"train\",\"media\":[{{\"seed\":{},\"frames\":1}}],\"contexts\":[{{\"type\":\"characters\",\"bank\":[{}],\"present\":[\"{}\"]}}]}}
",
                9000 + t,
                bank.join(","),
                common::NAMES[t]
            ));
        }
        let p = dir.path().join("fixed.jsonl");
        std::fs::write(&p, out).unwrap();
        p
    } else {
        common::write_identify_manifest(dir.path(), 64, 32, 4)
    };
    let records = load_manifest(&manifest).unwrap();
    let mut config = RunConfig::default();
    config
        .apply_text(
            "d_model = 64\nn_layers = 2\nn_heads = 4\nmax_len = 256\nlora_rank = 32\n\
             lora_alpha = 32\nlearning_rate = 0.005\nmax_new_tokens = 6\nd_v = 32\n\
             max_frames = 8\nbatch_size = 8\nembed_dim = 32",
        )
        .unwrap();
    config.seed = 7;

    let train: Vec<_> = records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let vocab = build_vocab(&config, &train, &manifest).unwrap();
    let lm_cfg = LMConfig {
        vocab_size: vocab.size(),
        ..config.lm
    };
    let mut state = TrainState::new(lm_cfg, config.proj, config.seed).unwrap();
    let encoder = FrameEncoder::Toy {
        seed: stream(config.seed, 0x746f79),
        d_v: 32,
    };
    let mut builder = Builder::new(&config, &vocab, &records, &manifest, Toggles::all(), HistoryMode::Oracle);
    let no_preds = BTreeMap::new();

    let packed: Vec<_> = train
        .iter()
        .map(|r| pack(&builder.build(r, &no_preds, true).unwrap(), &vocab, 256).unwrap())
        .collect();

    let accuracy = |state: &TrainState, builder: &mut Builder, recs: &[movieseq::harness::ManifestRecord]| -> f64 {
        let mut hit = 0;
        for r in recs {
            let sample = builder.build(r, &no_preds, false).unwrap();
            let prefix = pack_prefix(&sample, &vocab, 256).unwrap();
            let toks = generate(state, &prefix, &encoder, 4).unwrap();
            let text = vocab.decode(&toks).unwrap();
            let want = Builder::present_names(r).unwrap()[0].clone();
            if text == want {
                hit += 1;
            }
        }
        hit as f64 / recs.len() as f64
    };

    // Per-target losses: name token and EOS separately.
    let split_loss = |state: &TrainState| -> (f64, f64) {
        let mut name_nll = 0.0;
        let mut eos_nll = 0.0;
        for p in &packed {
            let logits = movieseq::lm::forward(state, p, &encoder).unwrap();
            let l = p.len();
            // answer token at l-2 predicted from l-3; EOS at l-1 from l-2.
            let name_tok = p.token_at(l - 2).unwrap() as usize;
            let eos_tok = p.token_at(l - 1).unwrap() as usize;
            name_nll -= movieseq::nn::log_softmax_at(&logits[l - 3], name_tok);
            eos_nll -= movieseq::nn::log_softmax_at(&logits[l - 2], eos_tok);
        }
        (name_nll / packed.len() as f64, eos_nll / packed.len() as f64)
    };

    let variant = std::env::var("VARIANT").unwrap_or_default();
    let mut rng = Rng::new(1);
    let mut order: Vec<usize> = (0..packed.len()).collect();
    let total = 2000u32;
    for step in 1..=total {
        if variant.contains("decay") {
            let base: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(0.005);
            let horizon: f64 = std::env::var("HORIZON").ok().and_then(|v| v.parse().ok()).unwrap_or(total as f64);
            state.cfg.learning_rate = base * (1.0 - ((step - 1) as f64 / horizon).min(0.999));
        } else if let Ok(v) = std::env::var("LR") {
            state.cfg.learning_rate = v.parse().unwrap();
        }
        if (step - 1) % (packed.len() / 8) as u32 == 0 {
            rng.shuffle(&mut order);
        }
        let start = ((step - 1) as usize * 8) % packed.len();
        let batch: Vec<_> = (0..8).map(|k| packed[order[(start + k) % packed.len()]].clone()).collect();
        let loss = train_step(&mut state, &batch, &encoder).unwrap();
        if step % 100 == 0 {
            let (name_l, eos_l) = split_loss(&state);
            let train_recs: Vec<_> = train.iter().take(16).cloned().collect();
            let acc = accuracy(&state, &mut builder, &train_recs);
            eprintln!(
                "step {step}: batch loss {loss:.4}, name nll {name_l:.4}, eos nll {eos_l:.4}, train16 acc {acc:.3}"
            );
        }
    }
}
