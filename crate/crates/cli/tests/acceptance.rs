//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::panic::{self, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use gemma_core::attention::{attend_batch, AttnWeights, KvCache};
use gemma_core::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
use gemma_core::config::{ModelConfig, Preset};
use gemma_core::evals::{bundled_rules, memorization_audit, win_rate, AuditParams, MemReport, RatingTally};
use gemma_core::generation::{generate, SamplerParams};
use gemma_core::model::GemmaModel;
use gemma_core::numerics::{rope_apply, Matrix};
use gemma_core::text::{encode_dialogue, format_dialogue, TokenId, Turn, Vocab};
use gemma_oracles::fixtures::{random_text, word_corpus, ReplayModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn nano_model(seed: u64) -> GemmaModel {
    let mut m = GemmaModel::random_init(Preset::Nano.config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(!seed);
    let mut jitter = |g: &mut Vec<f32>| g.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
    for b in &mut m.blocks {
        jitter(&mut b.attn_norm);
        jitter(&mut b.ffn_norm);
    }
    jitter(&mut m.final_norm);
    m
}

fn random_tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len).map(|_| TokenId(rng.random_range(0..vocab as u32))).collect()
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn param_counts() -> Outcome {
    let expected = [("gemma-2b", 524_550_144u64, 1_981_884_416u64), ("gemma-7b", 786_825_216, 7_751_248_896)];
    let mut seen = Vec::new();
    for (preset, emb, non_emb) in expected {
        let out = Command::new(env!("CARGO_BIN_EXE_gemma"))
            .args(["params", "--preset", preset, "--json"])
            .output()
            .map_err(|e| e.to_string())?;
        check(out.status.success(), || format!("{preset}: exit {:?}", out.status.code()))?;
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
        let got = (v["embedding"].as_u64(), v["non_embedding"].as_u64());
        check(got == (Some(emb), Some(non_emb)), || format!("{preset}: got {got:?}"))?;
        seen.push(format!("{preset} {emb}/{non_emb}"));
    }
    Ok(seen.join(", "))
}

fn win_rates() -> Outcome {
    // (label, win %, tie %, loss %, reported win rate %)
    let rows = [
        ("1.1 7B safety", 51.5, 23.9, 24.6, 63.5),
        ("1.1 7B instruction", 52.2, 18.1, 29.8, 61.2),
        ("1.1 2B safety", 48.5, 23.2, 28.3, 60.1),
        ("1.1 2B instruction", 37.1, 15.8, 47.1, 45.0),
        ("1.0 7B safety", 42.9, 30.2, 26.9, 58.0),
        ("1.0 7B instruction", 42.5, 18.4, 39.1, 51.7),
        ("1.0 2B safety", 44.8, 22.9, 32.3, 56.5),
        ("1.0 2B instruction", 32.7, 17.8, 49.5, 41.6),
    ];
    let mut worst: f64 = 0.0;
    for (label, w, t, l, reported) in rows {
        let got = 100.0 * win_rate(&RatingTally::new(w, t, l)).map_err(|e| e.to_string())?;
        let diff = (got - reported).abs();
        check(diff <= 0.3 + 1e-9, || format!("{label}: {got:.2} vs {reported}"))?;
        worst = worst.max(diff);
    }
    Ok(format!("8 rows, max deviation {worst:.2} points"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let m = nano_model(seed);
        let len = rng.random_range(1..24);
        let toks = random_tokens(&mut rng, len, 512);
        let logits = m.forward(&toks, &mut m.new_cache()).map_err(|e| e.to_string())?;
        let err = gemma_oracles::max_abs_diff(&logits, &gemma_oracles::reference_logits(&m, &toks));
        check(err <= 1e-5, || format!("seed {seed}: max abs diff {err:e}"))?;
        worst = worst.max(err);
    }
    Ok(format!("20 seeds, max abs diff {worst:.2e}"))
}

fn cache_equivalence() -> Outcome {
    let m = nano_model(77);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let steps = 16;
    let mut worst: f32 = 0.0;
    for p in 0..50 {
        let len = rng.random_range(1..40);
        let prompt = random_tokens(&mut rng, len, 512);
        let params = SamplerParams { stop_ids: Vec::new(), ..SamplerParams::greedy(steps) };
        let cached = generate(&m, &prompt, &params).map_err(|e| e.to_string())?;
        let (plain, plain_logits) = gemma_oracles::greedy_no_cache(&m, &prompt, steps);
        check(cached == plain, || format!("prompt {p}: tokens differ"))?;

        let mut cache = m.new_cache();
        let prefill = m.forward(&prompt, &mut cache).map_err(|e| e.to_string())?;
        let mut step_logits = vec![prefill.row(prefill.rows() - 1).to_vec()];
        for &tok in &cached[..steps - 1] {
            step_logits.push(m.forward(&[tok], &mut cache).map_err(|e| e.to_string())?.into_vec());
        }
        for (a, b) in step_logits.iter().zip(&plain_logits) {
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
        check(worst <= 1e-5, || format!("prompt {p}: logit diff {worst:e}"))?;
    }
    Ok(format!("50 prompts x {steps} steps, tokens identical, max logit diff {worst:.2e}"))
}

fn attention_degeneracies() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ModelConfig { n_kv_heads: 4, ..Preset::Nano.config() };
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let w = AttnWeights {
            w_q: random_matrix(&mut rng, 64, 64, 0.1),
            w_k: random_matrix(&mut rng, 64, 64, 0.1),
            w_v: random_matrix(&mut rng, 64, 64, 0.1),
            w_o: random_matrix(&mut rng, 64, 64, 0.1),
        };
        let x = random_matrix(&mut rng, 16, 64, 1.0);
        let got = attend_batch(&x, &w, &cfg).map_err(|e| e.to_string())?;
        let rows: Vec<Vec<f64>> = (0..16).map(|r| x.row(r).iter().map(|&v| v as f64).collect()).collect();
        let err = gemma_oracles::max_abs_diff(&got, &gemma_oracles::plain_mha(&rows, &w, &cfg));
        check(err <= 1e-6, || format!("MHA diff {err:e}"))?;
        worst = worst.max(err);
    }
    let mqa = Preset::Nano.config();
    let cache = KvCache::new(&mqa);
    for h in 0..mqa.n_heads {
        let (k, v) = (cache.key_slab(mqa.kv_group(h)), cache.value_slab(mqa.kv_group(h)));
        check(std::ptr::eq(k, cache.key_slab(0)) && std::ptr::eq(v, cache.value_slab(0)), || {
            format!("head {h} reads a different slab")
        })?;
    }
    Ok(format!("MHA max diff {worst:.2e}; {} MQA heads share one K/V slab", mqa.n_heads))
}

fn rope_relative() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let d = [16usize, 32, 64, 128][rng.random_range(0..4)];
        let q: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (m, n, s) = (rng.random_range(0..4096), rng.random_range(0..4096), rng.random_range(0..4096));
        let r = |v: &[f32], p| rope_apply(v, p, 10_000.0).unwrap();
        let diff = (dot(&r(&q, m), &r(&k, n)) - dot(&r(&q, m + s), &r(&k, n + s))).abs();
        check(diff <= 1e-5, || format!("sample {i}: d={d} m={m} n={n} s={s} diff {diff:e}"))?;
        worst = worst.max(diff);
        check(r(&q, 0) == q, || format!("sample {i}: position 0 is not the identity"))?;
    }
    Ok(format!("1000 samples, max diff {worst:.2e}, position 0 exact"))
}

fn tokenizer_contract() -> Outcome {
    let v = Vocab::default_english();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..10_000 {
        let s = random_text(&mut rng, 48);
        let ids = v.encode(&s);
        let back = v.decode(&ids).map_err(|e| e.to_string())?;
        check(back == s, || format!("string {i} {s:?} decoded as {back:?}"))?;
        check(ids.iter().all(|id| !id.is_control()), || format!("string {i} {s:?} produced a control id"))?;
        let digits = s.chars().filter(|c| c.is_ascii_digit()).count();
        let mut digit_tokens = 0;
        for id in &ids {
            let text = v.decode(std::slice::from_ref(id)).map_err(|e| e.to_string())?;
            if text.chars().any(|c| c.is_ascii_digit()) {
                check(text.chars().count() == 1, || format!("string {i}: multi-char digit token {text:?}"))?;
                digit_tokens += 1;
            }
        }
        check(digit_tokens == digits, || format!("string {i}: {digits} digits, {digit_tokens} digit tokens"))?;
    }
    Ok("10000 strings round-trip; digits atomic; no control ids from raw text".into())
}

fn formatter_golden() -> Outcome {
    let turns = [
        Turn::user("Knock knock."),
        Turn::model("Who's there?"),
        Turn::user("Gemma."),
        Turn::model("Gemma who?"),
    ];
    let golden = concat!(
        "<start_of_turn>user\nKnock knock.<end_of_turn>\n",
        "<start_of_turn>model\nWho's there?<end_of_turn>\n",
        "<start_of_turn>user\nGemma.<end_of_turn>\n",
        "<start_of_turn>model\nGemma who?<end_of_turn>\n",
    );
    let rendered = format_dialogue(&turns, false).map_err(|e| e.to_string())?;
    check(rendered == golden, || format!("rendered {rendered:?}"))?;

    let v = Vocab::default_english();
    let ids = encode_dialogue(&v, &turns, false).map_err(|e| e.to_string())?;
    let mut want = Vec::new();
    for t in &turns {
        want.push(TokenId::START_OF_TURN);
        want.extend(v.encode(&format!("{}\n{}", t.role.as_str(), t.content)));
        want.push(TokenId::END_OF_TURN);
        want.extend(v.encode("\n"));
    }
    check(ids == want, || "token sequence differs".into())?;
    check(v.decode(&ids).map_err(|e| e.to_string())? == golden, || "decoded tokens differ".into())?;

    // the CLI renders the same bytes
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("turns.jsonl");
    let lines: Vec<String> = turns.iter().map(|t| serde_json::to_string(t).unwrap()).collect();
    std::fs::write(&path, lines.join("\n")).map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_gemma"))
        .args(["fmt", "--dialogue"])
        .arg(&path)
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success() && out.stdout == golden.as_bytes(), || "CLI output differs".into())?;
    Ok(format!("{} tokens, 8 control ids in place", ids.len()))
}

fn memorization_harness() -> Outcome {
    let start = Instant::now();
    let v = Vocab::default_english();
    let docs = word_corpus(&mut ChaCha8Rng::seed_from_u64(9), 1500, 90);
    let params = AuditParams { sample_n: 1000, seed: 11, ..AuditParams::default() };
    let rules = bundled_rules();
    let json = |r: &MemReport| serde_json::to_vec(r).unwrap();

    let mut runs = Vec::new();
    for (frac, want) in [(0.0, (1.0, 1.0)), (0.08, (0.0, 1.0)), (0.12, (0.0, 0.0))] {
        let oracle = ReplayModel::new(&v, &docs, params.prompt_len, params.cont_len, frac);
        let r = memorization_audit(&oracle, &v, &docs, &params, &rules).map_err(|e| e.to_string())?;
        check(r.n_eligible == 1000, || format!("audited {}", r.n_eligible))?;
        check((r.exact_rate, r.approx_rate) == want, || {
            format!("perturbation {frac}: exact {} approx {}", r.exact_rate, r.approx_rate)
        })?;
        let again = memorization_audit(&oracle, &v, &docs, &params, &rules).map_err(|e| e.to_string())?;
        check(json(&r) == json(&again), || format!("perturbation {frac}: rerun differs"))?;
        runs.push(r);
    }

    let model = nano_model(10);
    let nano_params = AuditParams { prompt_len: 50, cont_len: 50, ..params.clone() };
    let timer = Instant::now();
    let r = memorization_audit(&model, &v, &docs, &nano_params, &rules).map_err(|e| e.to_string())?;
    let audit_secs = timer.elapsed().as_secs_f64();
    check(audit_secs < 60.0, || format!("nano audit took {audit_secs:.1}s"))?;
    let again = memorization_audit(&model, &v, &docs, &nano_params, &rules).map_err(|e| e.to_string())?;
    check(json(&r) == json(&again), || "nano rerun differs".into())?;
    runs.push(r);
    for r in &runs {
        check(r.approx_rate >= r.exact_rate, || "approx rate below exact rate".into())?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(format!(
        "replay 1.0/1.0, 8% 0.0/1.0, 12% 0.0/0.0, nano {:.3}/{:.3}; reruns identical; \
         nano audit of 1000 docs {audit_secs:.1}s ({elapsed:.1}s total)",
        runs[3].exact_rate, runs[3].approx_rate
    ))
}

fn checkpoint_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = nano_model(12);
    let (a, b) = (dir.path().join("a.gmmf"), dir.path().join("b.gmmf"));
    save_checkpoint(&m, &a).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&a).map_err(|e| e.to_string())?;
    save_checkpoint(&loaded, &b).map_err(|e| e.to_string())?;
    let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    check(ba == bb, || "re-saved file differs".into())?;
    check(from_bytes(&to_bytes(&m).unwrap()).is_ok(), || "in-memory round trip failed".into())?;

    let toks = random_tokens(&mut ChaCha8Rng::seed_from_u64(12), 30, 512);
    let before = m.forward(&toks, &mut m.new_cache()).map_err(|e| e.to_string())?;
    let after = loaded.forward(&toks, &mut loaded.new_cache()).map_err(|e| e.to_string())?;
    let bits = |x: &Matrix| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    check(bits(&before) == bits(&after), || "logits differ after reload".into())?;
    Ok(format!("{} bytes byte-identical; logits bit-identical", ba.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("parameter counts", param_counts),
        ("win-rate arithmetic", win_rates),
        ("scalar oracle equivalence", oracle_equivalence),
        ("cache equivalence", cache_equivalence),
        ("attention degeneracies", attention_degeneracies),
        ("rope relative offset", rope_relative),
        ("tokenizer contract", tokenizer_contract),
        ("formatter golden", formatter_golden),
        ("memorization harness", memorization_harness),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
