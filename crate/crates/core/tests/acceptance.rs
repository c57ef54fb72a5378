//! Acceptance suite. Each criterion is one test that writes a single
//! `PASS`/`FAIL` line to stderr (bypassing output capture) before asserting.
//!
//! Criteria 8 and 10 to 13 share one pipeline trained at acceptance scale.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use candle_core::{Device, Tensor, Var};
use face2voice::align::{monotonic_alignment, segmentation_score};
use face2voice::audio::{AudioConfig, GriffinLim};
use face2voice::corpus;
use face2voice::eval::{self, OracleTranscriber, Report, SpeakerEmbedder, SpeechEncoderEmbedder, SynthesisSetup};
use face2voice::face::{
    self, map_loss, FaceEncoder, FaceEncoderConfig, FaceTrainConfig, LossVariant, MappingLossConfig,
};
use face2voice::nn;
use face2voice::pipeline::Voice;
use face2voice::plm::{self, PlmConfig, PlmExample, PlmModel, PlmTrainConfig, SamplingConfig};
use face2voice::prosody::{self, pool_by_phoneme, CodecConfig};
use face2voice::tts::{self, probe, DurationVector, TtsConfig, TtsModel, TtsTrainConfig};
use face2voice::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, title: &str, pass: bool, detail: impl std::fmt::Display) {
    let line = format!(
        "acceptance criterion {n:>2} [{}] {title}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {title}: {detail}");
}

fn matrix(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows.first().map_or(0, Vec::len);
    Tensor::from_vec(rows.concat(), (rows.len(), cols), &Device::Cpu).unwrap()
}

fn random_rows(rng: &mut impl Rng, n: usize, d: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(lo..hi)).collect()).collect()
}

/// Every vector of length `n` over `0..=max`.
fn all_vectors(n: usize, max: u32) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|v| {
                (0..=max).map(move |x| {
                    let mut w = v.clone();
                    w.push(x);
                    w
                })
            })
            .collect();
    }
    out
}

#[test]
fn c01_expand_matches_row_repetition() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut checked, mut mismatches) = (0usize, 0usize);
    for n in 1..=5 {
        let rows = random_rows(&mut rng, n, 3, -1.0, 1.0);
        let h = matrix(&rows);
        for d in all_vectors(n, 4) {
            checked += 1;
            let mut oracle: Vec<Vec<f64>> = Vec::new();
            for (row, &k) in rows.iter().zip(&d) {
                for _ in 0..k {
                    oracle.push(row.clone());
                }
            }
            let got = tts::expand(&h, &DurationVector(d.clone()));
            let ok = match got {
                Ok(t) => nn::to_vec2(&t).unwrap() == oracle,
                Err(_) => oracle.is_empty(),
            };
            mismatches += usize::from(!ok);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "expand oracle",
        mismatches == 0 && elapsed < Duration::from_secs(5),
        format!("{checked} duration vectors, {mismatches} mismatches, {elapsed:.2?}"),
    );
}

fn nearest_oracle(row: &[f64], book: &[Vec<f64>]) -> u32 {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in book.iter().enumerate() {
        let d: f64 = row.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best as u32
}

#[test]
fn c02_quantize_matches_exhaustive_nearest_neighbour() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut mismatches, mut ties) = (0usize, 0usize);
    for inst in 0..1000 {
        let n = rng.random_range(1..=8);
        let size = rng.random_range(2..=32);
        let dim = rng.random_range(1..=4);
        let (h, book) = if inst % 2 == 0 {
            let int = |rng: &mut ChaCha8Rng, k: usize| -> Vec<Vec<f64>> {
                (0..k).map(|_| (0..dim).map(|_| rng.random_range(-2..=2) as f64).collect()).collect()
            };
            (int(&mut rng, n), int(&mut rng, size))
        } else {
            (random_rows(&mut rng, n, dim, -3.0, 3.0), random_rows(&mut rng, size, dim, -3.0, 3.0))
        };
        let q = prosody::quantize(&matrix(&h), &matrix(&book), 0.25).unwrap();
        for (row, &got) in h.iter().zip(&q.codes.indices) {
            let want = nearest_oracle(row, &book);
            let dists: Vec<f64> = book.iter().map(|c| row.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum()).collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            ties += usize::from(dists.iter().filter(|&&d| d == min).count() > 1);
            mismatches += usize::from(got != want);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "VQ oracle",
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("1000 instances, {ties} rows with tied minima, {mismatches} mismatches, {elapsed:.2?}"),
    );
}

#[test]
fn c03_pooling_matches_segment_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let dim = rng.random_range(1..=6);
        let d: Vec<u32> = (0..n).map(|_| rng.random_range(1..=7)).collect();
        let m: usize = d.iter().sum::<u32>() as usize;
        let frames = random_rows(&mut rng, m, dim, -10.0, 10.0);
        let got = nn::to_vec2(&pool_by_phoneme(&matrix(&frames), &d).unwrap()).unwrap();
        let mut t = 0;
        for (i, &k) in d.iter().enumerate() {
            let seg = &frames[t..t + k as usize];
            t += k as usize;
            let mean: Vec<f64> = (0..dim).map(|j| seg.iter().map(|r| r[j]).sum::<f64>() / k as f64).collect();
            let err = got[i].iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            worst = worst.max(err / norm);
        }
    }
    verdict(
        3,
        "pooling oracle",
        worst < 1e-12,
        format!("1000 instances, worst row-wise relative error {worst:.2e}"),
    );
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Contrastive term by explicit enumeration of each row's candidate set.
fn contrastive_oracle(v: &[Vec<f64>], s: &[Vec<f64>], labels: Option<&[usize]>, tau: f64) -> f64 {
    let m = v.len();
    let mut total = 0.0;
    for i in 0..m {
        let pos = (cosine(&v[i], &s[i]) / tau).exp();
        let mut denom = pos;
        for k in 0..m {
            let negative = k != i && labels.is_none_or(|l| l[k] != l[i]);
            if negative {
                denom += (cosine(&v[i], &s[k]) / tau).exp();
            }
        }
        total += -(pos / denom).ln();
    }
    total / m as f64
}

#[test]
fn c04_mapping_loss_matches_enumeration_and_hand_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = MappingLossConfig::default();
    let mut worst = 0.0f64;
    for batch in 0..100 {
        let m = rng.random_range(1..=16);
        let d = rng.random_range(2..=8);
        let v = random_rows(&mut rng, m, d, -1.0, 1.0);
        let s = random_rows(&mut rng, m, d, -1.0, 1.0);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..m.max(2) / 2 + 1)).collect();
        let labels = (batch % 2 == 1).then_some(labels.as_slice());
        let l = map_loss(&matrix(&v), &matrix(&s), labels, &cfg).unwrap();
        let want = contrastive_oracle(&v, &s, labels, cfg.temperature);
        worst = worst.max((nn::scalar(&l.extra).unwrap() - want).abs());
    }
    let term = |v: Vec<f64>, s: Vec<f64>| {
        let l = map_loss(&matrix(&[v]), &matrix(&[s]), None, &MappingLossConfig {
            variant: LossVariant::MseCos,
            ..cfg
        })
        .unwrap();
        (nn::scalar(&l.mse).unwrap(), nn::scalar(&l.cosine).unwrap())
    };
    let mse = face::mse_term(&matrix(&[vec![0.0, 0.0]]), &matrix(&[vec![3.0, 4.0]])).unwrap();
    let mse = nn::scalar(&mse).unwrap();
    let (mse_b, cos_orth) = term(vec![1.0, 0.0], vec![0.0, 2.0]);
    let (mse_c, cos_same) = term(vec![1.0, 2.0], vec![2.0, 4.0]);
    let (_, cos_opposite) = term(vec![1.0, 1.0], vec![-3.0, -3.0]);
    let hand_ok = mse == 12.5
        && mse_b == 2.5
        && mse_c == 2.5
        && cos_orth == 1.0
        && cos_same.abs() < 1e-15
        && (cos_opposite - 2.0).abs() < 1e-15;
    verdict(
        4,
        "mapping-loss value oracle",
        worst < 1e-9 && hand_ok,
        format!(
            "100 batches, worst |diff| {worst:.2e}; MSE([0,0],[3,4]) = {mse}, cosine terms {cos_orth}/{cos_same:.1e}/{cos_opposite}"
        ),
    );
}

/// Largest relative error between backprop and central differences over
/// sampled coordinates of `vars`.
struct GradCheck {
    worst: f64,
    coords: usize,
}

const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely.
const FD_FLOOR: f64 = 1e-6;

fn grad_check(
    vars: &[Var],
    per_var: usize,
    rng: &mut impl Rng,
    loss: &dyn Fn() -> face2voice::Result<Tensor>,
) -> GradCheck {
    let grads = loss().unwrap().backward().unwrap();
    let mut out = GradCheck { worst: 0.0, coords: 0 };
    for var in vars {
        let shape = var.dims().to_vec();
        let orig = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; orig.len()],
        };
        let picks: Vec<usize> = if orig.len() <= per_var {
            (0..orig.len()).collect()
        } else {
            (0..per_var).map(|_| rng.random_range(0..orig.len())).collect()
        };
        for i in picks {
            let eval = |delta: f64| {
                let mut w = orig.clone();
                w[i] += delta;
                var.set(&Tensor::from_vec(w, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                nn::scalar(&loss().unwrap()).unwrap()
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            var.set(&Tensor::from_vec(orig.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            out.worst = out.worst.max(rel);
            out.coords += 1;
        }
    }
    out
}

fn gradcheck_tts() -> TtsModel {
    let cfg = TtsConfig {
        n_mels: 10,
        text_dim: 8,
        speech_dim: 6,
        decoder_dim: 8,
        text_blocks: 1,
        speech_blocks: 1,
        decoder_blocks: 1,
        codec: CodecConfig {
            codebook_size: 5,
            dim: 4,
            n_low: 4,
            ..CodecConfig::default()
        },
        ..TtsConfig::default()
    };
    TtsModel::new(cfg, DType::F64, 21).unwrap()
}

#[test]
fn c05_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut lines = Vec::new();
    let mut worst = 0.0f64;
    let mut max_params = 0usize;
    let mut record = |what: &str, r: GradCheck, params: usize, lines: &mut Vec<String>| {
        worst = worst.max(r.worst);
        max_params = max_params.max(params);
        lines.push(format!("{what} {:.1e} ({} coords)", r.worst, r.coords));
    };

    // Mapping loss, with respect to both inputs and through a small face encoder.
    let enc = FaceEncoder::new(
        FaceEncoderConfig {
            channels: vec![2, 3],
            speech_dim: 4,
            ..FaceEncoderConfig::default()
        },
        DType::F64,
        3,
    )
    .unwrap();
    let c = corpus::generate_synthetic_corpus(5, 4, 1, 1).unwrap();
    let faces: Vec<&corpus::FaceImage> = c.examples.iter().map(|e| e.face.as_deref().unwrap()).collect();
    let pooled = enc.stem(&faces).unwrap();
    let labels = [0usize, 1, 1, 2];
    for variant in LossVariant::ALL {
        let cfg = MappingLossConfig { variant, ..Default::default() };
        let v = Var::from_tensor(&matrix(&random_rows(&mut rng, 5, 4, -1.0, 1.0))).unwrap();
        let s = Var::from_tensor(&matrix(&random_rows(&mut rng, 5, 4, -1.0, 1.0))).unwrap();
        let r = grad_check(&[v.clone(), s.clone()], 20, &mut rng, &|| {
            Ok(map_loss(v.as_tensor(), s.as_tensor(), None, &cfg)?.total)
        });
        record(&format!("{}(v,s)", variant.name()), r, 40, &mut lines);
        let target = matrix(&random_rows(&mut rng, 4, 4, -1.0, 1.0));
        let vars = enc.params().all_vars();
        let r = grad_check(&vars, 1000, &mut rng, &|| {
            Ok(map_loss(&enc.forward_pooled(&pooled)?, &target, Some(&labels), &cfg)?.total)
        });
        record(&format!("{}(encoder)", variant.name()), r, enc.params().num_params(), &mut lines);
    }

    // VQ losses: codebook loss to the codebook, commitment loss to the encoder input,
    // and the pass-through gradient equal to the downstream gradient at the code.
    let h = Var::from_tensor(&matrix(&random_rows(&mut rng, 6, 3, -1.0, 1.0))).unwrap();
    let book = Var::from_tensor(&matrix(&random_rows(&mut rng, 5, 3, -1.0, 1.0))).unwrap();
    let r = grad_check(&[book.clone()], 100, &mut rng, &|| {
        Ok(prosody::quantize(h.as_tensor(), book.as_tensor(), 0.25)?.codebook_loss)
    });
    record("vq codebook", r, 15, &mut lines);
    let r = grad_check(&[h.clone()], 100, &mut rng, &|| {
        Ok(prosody::quantize(h.as_tensor(), book.as_tensor(), 0.25)?.commitment_loss)
    });
    record("vq commitment", r, 18, &mut lines);
    let w = matrix(&random_rows(&mut rng, 6, 3, -1.0, 1.0));
    let downstream = |z: &Tensor| -> face2voice::Result<Tensor> { Ok((z.tanh()? * &w)?.sum_all()?) };
    let q = prosody::quantize(h.as_tensor(), book.as_tensor(), 0.25).unwrap();
    let through = downstream(&q.pass_through).unwrap().backward().unwrap();
    let analytic = through.get(h.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let z = Var::from_tensor(&q.quantized.detach()).unwrap();
    let at_code = downstream(z.as_tensor()).unwrap().backward().unwrap();
    let expected = at_code.get(z.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let r = grad_check(&[z.clone()], 100, &mut rng, &|| downstream(z.as_tensor()));
    let st = analytic.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    record(
        "vq pass-through",
        GradCheck {
            worst: r.worst.max(st),
            coords: r.coords,
        },
        18,
        &mut lines,
    );

    // Duration and mel losses of a small TTS model at fixed durations.
    let mut model = gradcheck_tts();
    let mut book_rows = random_rows(&mut rng, 5, 4, -1.0, 1.0);
    book_rows[0] = vec![0.0; 4];
    probe::set_codebook(&mut model, prosody::Codebook::new(book_rows.concat(), 5, 4).unwrap());
    let frames = random_rows(&mut rng, 9, 10, -2.0, 2.0);
    let utt = tts::PreparedUtterance {
        ids: vec![3, 7, 1],
        mel: matrix(&frames),
    };
    let d = [2u32, 4, 3];
    let params = model.params().num_params();
    let dur_vars = model.params().vars_with_prefix(&["duration.", "speech."]);
    let r = grad_check(&dur_vars, 4, &mut rng, &|| Ok(probe::fixed_alignment_losses(&model, &utt, &d)?.1));
    record("duration", r, params, &mut lines);
    let mel_vars = model.params().vars_with_prefix(&["text.", "speech.", "decoder."]);
    let r = grad_check(&mel_vars, 4, &mut rng, &|| Ok(probe::fixed_alignment_losses(&model, &utt, &d)?.0));
    record("mel", r, params, &mut lines);

    let elapsed = start.elapsed();
    verdict(
        5,
        "gradient checks",
        worst < 1e-4 && max_params <= 10_000 && elapsed < Duration::from_secs(120),
        format!(
            "worst relative error {worst:.1e}, largest model {max_params} params, {elapsed:.1?}; {}",
            lines.join(", ")
        ),
    );
}

/// Best segmentation score by enumerating every composition of `m` into `n`
/// positive parts.
fn best_segmentation(sim: &[Vec<f64>]) -> (f64, Vec<Vec<u32>>) {
    let n = sim.len();
    let m = sim[0].len();
    let mut best = f64::NEG_INFINITY;
    let mut argmax = Vec::new();
    for d in all_vectors(n, m as u32) {
        if d.iter().any(|&k| k == 0) || d.iter().sum::<u32>() as usize != m {
            continue;
        }
        let score = segmentation_score(sim, &d);
        if score > best {
            best = score;
            argmax = vec![d];
        } else if score == best {
            argmax.push(d);
        }
    }
    (best, argmax)
}

#[test]
fn c06_alignment_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut instances, mut mismatches) = (0usize, 0usize);
    for n in 1..=4 {
        for m in n..=8 {
            for trial in 0..24 {
                let sim: Vec<Vec<f64>> = if trial % 3 == 0 {
                    (0..n).map(|_| (0..m).map(|_| rng.random_range(-2..=1) as f64).collect()).collect()
                } else {
                    random_rows(&mut rng, n, m, -3.0, 1.0)
                };
                let got = monotonic_alignment(&sim).unwrap();
                let (best, argmax) = best_segmentation(&sim);
                let ok = segmentation_score(&sim, &got) == best && argmax.contains(&got);
                instances += 1;
                mismatches += usize::from(!ok);
            }
        }
    }
    let infeasible = monotonic_alignment(&[vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]]).is_err();
    verdict(
        6,
        "alignment oracle",
        mismatches == 0 && infeasible,
        format!("{instances} instances with n <= 4, m <= 8, {mismatches} disagreements"),
    );
}

/// Edit distance by the textbook full-table recurrence.
fn levenshtein_oracle(a: &[char], b: &[char]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = (t[i - 1][j] + 1).min(t[i][j - 1] + 1).min(t[i - 1][j - 1] + cost);
        }
    }
    t[a.len()][b.len()]
}

#[test]
fn c07_cer_matches_edit_distance_oracle() {
    let mut strings: Vec<String> = Vec::new();
    for len in 0..=6 {
        for v in all_vectors(len, 2) {
            strings.push(v.iter().map(|&c| (b'a' + c as u8) as char).collect());
        }
    }
    let chars: Vec<Vec<char>> = strings.iter().map(|s| s.chars().collect()).collect();
    let mut pairs = 0usize;
    let mut mismatches = 0usize;
    for (r, rc) in strings.iter().zip(&chars) {
        for (h, hc) in strings.iter().zip(&chars) {
            pairs += 1;
            if rc.is_empty() {
                mismatches += usize::from(eval::cer(r, h).is_ok());
                continue;
            }
            let want = 100.0 * levenshtein_oracle(rc, hc) as f64 / rc.len() as f64;
            mismatches += usize::from(eval::cer(r, h).unwrap() != want);
        }
    }
    let hand = [("hello", "hello", 0.0), ("hello", "helo", 20.0), ("abc", "xyz", 100.0)];
    let hand_ok = hand.iter().all(|&(r, h, want)| eval::cer(r, h).unwrap() == want);
    verdict(
        7,
        "CER oracle",
        mismatches == 0 && hand_ok,
        format!("{pairs} string pairs over a 3-letter alphabet, {mismatches} mismatches; hand examples exact: {hand_ok}"),
    );
}

const TRAIN_SEED: u64 = 7;
const HELD_SEED: u64 = 8;
const N_TRAIN: usize = 256;
const N_HELD: usize = 32;
const TRAIN_UTTS: usize = 8;
const HELD_UTTS: usize = 48;
const FRAMES: usize = 3;

fn tts_config() -> TtsConfig {
    TtsConfig {
        text_dim: 64,
        speech_dim: 64,
        decoder_dim: 64,
        ..TtsConfig::default()
    }
}

fn tts_train_config() -> TtsTrainConfig {
    TtsTrainConfig {
        steps: 600,
        ..TtsTrainConfig::default()
    }
}

fn face_train_config(variant: LossVariant) -> FaceTrainConfig {
    FaceTrainConfig {
        steps: 1500,
        learning_rate: 1e-3,
        loss: MappingLossConfig {
            variant,
            ..MappingLossConfig::default()
        },
        ..FaceTrainConfig::default()
    }
}

fn progress(msg: impl std::fmt::Display) {
    let _ = std::io::stderr().write_all(format!("acceptance fixture: {msg}\n").as_bytes());
}

/// Everything trained once at acceptance scale and shared by criteria 9 to 12.
/// Held-out identities come from an independently seeded corpus.
struct Pipeline {
    tts: TtsModel,
    plm: PlmModel,
    plm_data: Vec<PlmExample>,
    report: Report,
    /// Speech vectors, face-mapping training of the contrastive variant and
    /// its retrieval evaluation.
    mapping_time: Duration,
    same_identity: Vec<f64>,
    cross_identity: f64,
}

fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(build_pipeline)
}

fn build_pipeline() -> Pipeline {
    let audio = AudioConfig::default();
    let train = corpus::generate_synthetic_corpus(TRAIN_SEED, N_TRAIN, TRAIN_UTTS, FRAMES).unwrap().examples;
    let held = corpus::generate_synthetic_corpus(HELD_SEED, N_HELD, HELD_UTTS, FRAMES).unwrap().examples;

    let t = Instant::now();
    let (tts, _) = tts::train_tts(&train, &tts_config(), &tts_train_config(), &audio, DType::F32, |_| {}).unwrap();
    progress(format!("tts trained on {} utterances in {:.1?}", train.len(), t.elapsed()));

    let t = Instant::now();
    let codes = plm::extract_codes(&tts, &train, &audio).unwrap();
    let plm_data: Vec<PlmExample> = train
        .iter()
        .zip(codes)
        .map(|(e, c)| PlmExample {
            utt: e.utt_id.clone(),
            phonemes: e.transcript.clone(),
            codes: c.codes,
        })
        .collect();
    let (plm, _) =
        plm::train_plm(&tts, &plm_data, &PlmConfig::default(), &PlmTrainConfig::default(), DType::F32, |_| {}).unwrap();
    progress(format!("plm trained in {:.1?}", t.elapsed()));

    let t = Instant::now();
    let train_speech = face::compute_speech_vectors(&tts, &train, &audio).unwrap();
    let held_speech = face::compute_speech_vectors(&tts, &held, &audio).unwrap();
    let speech_time = t.elapsed();
    let pairs = face::make_pairs(&train, &train_speech).unwrap();
    let identities = eval::eval_identities(&held, &held_speech, &audio, 0).unwrap();
    let prompt_mel = face2voice::audio::compute_mel(&train[0].waveform, &audio).unwrap();
    let setup = SynthesisSetup {
        voice: Voice { tts: &tts, plm: Some(&plm) },
        text: held[0].transcript.clone(),
        prompt: Some(plm::make_prompt(&prompt_mel, &train[0].transcript, &tts).unwrap()),
        sampling: SamplingConfig::default(),
        seed: 0,
    };
    let emb = SpeechEncoderEmbedder { tts: &tts, audio: audio.clone() };
    let asr = OracleTranscriber::from_corpus(&train, &audio, Some(&tts)).unwrap();

    let mut report = Report::default();
    let mut contrastive = None;
    let mut mapping_time = speech_time;
    for variant in LossVariant::ALL {
        let t = Instant::now();
        let (enc, _) =
            face::train_face_encoder(&pairs, &FaceEncoderConfig::default(), &face_train_config(variant), DType::F32, |_| {})
                .unwrap();
        let row = eval::evaluate_face_encoder(variant.name(), &enc, &identities, &setup, &emb, &asr).unwrap();
        progress(format!("{} trained and evaluated in {:.1?}: {row:?}", variant.name(), t.elapsed()));
        if variant == LossVariant::MseCosContrastive {
            mapping_time += t.elapsed();
            contrastive = Some(enc);
        }
        report.rows.push(row);
    }

    let enc = contrastive.unwrap();
    let mut same_identity = Vec::new();
    let mut firsts = Vec::new();
    for ident in &identities {
        same_identity.push(eval::consistency_test(&ident.faces, &setup, &enc, &emb).unwrap().off_diagonal_mean);
        firsts.push(emb.embed(eval::Audio::Mel(&setup.from_face(ident.faces[0], &enc).unwrap())).unwrap());
    }
    let cross_identity = eval::sed_embeddings(&firsts).unwrap();
    drop(setup);
    Pipeline {
        tts,
        plm,
        plm_data,
        report,
        mapping_time,
        same_identity,
        cross_identity,
    }
}

#[test]
fn c08_toy_tts_overfits_and_trains_in_budget() {
    let audio = AudioConfig::default();
    let one = corpus::generate_synthetic_corpus(11, 1, 1, 1).unwrap();
    let overfit = TtsTrainConfig {
        steps: 500,
        batch_size: 1,
        ..TtsTrainConfig::default()
    };
    let (_, log) = tts::train_tts(&one.examples, &tts_config(), &overfit, &audio, DType::F32, |_| {}).unwrap();
    let (initial, last) = (log[0].loss_mel, log[log.len() - 1].loss_mel);

    let small = corpus::generate_synthetic_corpus(12, 4, 20, 1).unwrap();
    let t = Instant::now();
    let (_, log) = tts::train_tts(&small.examples, &tts_config(), &tts_train_config(), &audio, DType::F32, |_| {}).unwrap();
    let elapsed = t.elapsed();
    let finite = log
        .iter()
        .all(|r| r.loss_mel.is_finite() && r.loss_dur.is_finite() && r.loss_vq.is_finite() && r.loss_align.is_finite());
    verdict(
        8,
        "toy TTS training",
        last < 0.25 * initial && finite && elapsed < Duration::from_secs(600),
        format!(
            "single-utterance mel L1 {initial:.3} -> {last:.3} ({:.1}% of initial) after 500 steps; \
             4 x 20 corpus trained {} steps in {elapsed:.1?}, all losses finite: {finite}",
            100.0 * last / initial,
            log.len()
        ),
    );
}

fn plm_eval_loss(model: &PlmModel, tts: &TtsModel, data: &[PlmExample]) -> f64 {
    let total: f64 = data
        .iter()
        .map(|ex| {
            let (ctx, target) = plm::split_context(tts, ex, ex.phonemes.len() / 2).unwrap();
            nn::scalar(&model.teacher_forced_loss(&ctx, &target).unwrap()).unwrap()
        })
        .sum();
    total / data.len() as f64
}

#[test]
fn c09_prosody_language_model_sanity() {
    let p = pipeline();
    let tts = &p.tts;
    let ten = &p.plm_data[..10];
    let t = tts.config().codec.codebook_size;
    let train = PlmTrainConfig {
        steps: 200,
        ..PlmTrainConfig::default()
    };
    let resolved = PlmConfig {
        codebook_size: t,
        text_dim: tts.config().text_dim,
        ..PlmConfig::default()
    };
    let fresh = PlmModel::new(resolved, DType::F32, train.seed).unwrap();
    let initial = plm_eval_loss(&fresh, tts, ten);
    let uniform = (t as f64).ln();
    let (trained, _) = plm::train_plm(tts, ten, &PlmConfig::default(), &train, DType::F32, |_| {}).unwrap();
    let after = plm_eval_loss(&trained, tts, ten);

    let single = &p.plm_data[..1];
    let overfit = PlmTrainConfig {
        steps: 300,
        batch_size: 1,
        ..PlmTrainConfig::default()
    };
    let (memorised, _) = plm::train_plm(tts, single, &PlmConfig::default(), &overfit, DType::F32, |_| {}).unwrap();
    let greedy = SamplingConfig {
        top_k: 1,
        temperature: 1.0,
        seed: 0,
    };
    let ex = &single[0];
    let n = ex.phonemes.len();
    let exact = (1..n).all(|k| {
        let (ctx, target) = plm::split_context(tts, ex, k).unwrap();
        memorised.generate(&ctx, &greedy).unwrap().indices == target
    });

    let mut lengths_ok = true;
    for (i, ex) in p.plm_data.iter().take(20).enumerate() {
        let n = ex.phonemes.len();
        for k in [0, 1, n / 2, n - 1] {
            let (ctx, _) = plm::split_context(tts, ex, k).unwrap();
            let sampling = SamplingConfig {
                seed: i as u64,
                ..SamplingConfig::default()
            };
            lengths_ok &= p.plm.generate(&ctx, &sampling).unwrap().indices.len() == n - k;
        }
    }
    let initial_ok = (initial - uniform).abs() <= 0.05 * uniform;
    verdict(
        9,
        "prosody LM sanity",
        initial_ok && after < 0.5 * initial && exact && lengths_ok,
        format!(
            "initial loss {initial:.3} vs ln T {uniform:.3}; after 200 steps on 10 utterances {after:.3} ({:.1}%); \
             greedy single-pair reproduction at every split: {exact}; generated lengths equal |x|: {lengths_ok}",
            100.0 * after / initial
        ),
    );
}

fn row<'a>(report: &'a Report, variant: LossVariant) -> &'a face2voice::eval::ReportRow {
    report.rows.iter().find(|r| r.variant == variant.name()).unwrap()
}

#[test]
fn c10_face_to_speech_retrieval() {
    let p = pipeline();
    let r = row(&p.report, LossVariant::MseCosContrastive);
    verdict(
        10,
        "face-to-speech retrieval",
        r.n == N_HELD && r.recall_at_1 >= 0.9 && p.mapping_time < Duration::from_secs(900),
        format!(
            "recall@1 {:.3} over {} held-out identities after training on {N_TRAIN}; face mapping stage {:.1?}",
            r.recall_at_1, r.n, p.mapping_time
        ),
    );
}

#[test]
fn c11_ablation_direction() {
    let p = pipeline();
    let c = row(&p.report, LossVariant::MseCosContrastive);
    let m = row(&p.report, LossVariant::MseCos);
    let t = row(&p.report, LossVariant::MseCosTriplet);
    let pass = c.sed <= m.sed && c.recall_at_1 >= m.recall_at_1 && c.recall_at_1 >= t.recall_at_1;
    verdict(
        11,
        "ablation direction",
        pass,
        format!(
            "SED contrastive {:.2} vs mse_cos {:.2}; recall@1 contrastive {:.3}, mse_cos {:.3}, triplet {:.3}",
            c.sed, m.sed, c.recall_at_1, m.recall_at_1, t.recall_at_1
        ),
    );
}

#[test]
fn c12_frame_consistency() {
    let p = pipeline();
    let above = p.same_identity.iter().filter(|&&s| s > p.cross_identity).count();
    let frac = above as f64 / p.same_identity.len() as f64;
    let mean = p.same_identity.iter().sum::<f64>() / p.same_identity.len() as f64;
    verdict(
        12,
        "frame consistency",
        frac >= 0.8,
        format!(
            "{above}/{} identities above the cross-identity SECS {:.2} (mean same-identity SECS {mean:.2})",
            p.same_identity.len(),
            p.cross_identity
        ),
    );
}

fn tree_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Trains every model and synthesises once, returning all produced bytes.
fn deterministic_run(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let audio = AudioConfig::default();
    let c = corpus::generate_synthetic_corpus(13, 3, 3, 2).unwrap();
    corpus::write_synthetic_corpus(&c, &dir.join("corpus")).unwrap();
    let small = TtsConfig {
        text_dim: 32,
        speech_dim: 32,
        decoder_dim: 32,
        text_blocks: 1,
        speech_blocks: 1,
        decoder_blocks: 1,
        codec: CodecConfig {
            codebook_size: 16,
            dim: 16,
            ..CodecConfig::default()
        },
        ..TtsConfig::default()
    };
    let (tts, _) = tts::train_tts(
        &c.examples,
        &small,
        &TtsTrainConfig {
            steps: 12,
            batch_size: 2,
            ..TtsTrainConfig::default()
        },
        &audio,
        DType::F32,
        |_| {},
    )
    .unwrap();
    let codes = plm::extract_codes(&tts, &c.examples, &audio).unwrap();
    let data: Vec<PlmExample> = c
        .examples
        .iter()
        .zip(codes)
        .map(|(e, r)| PlmExample {
            utt: e.utt_id.clone(),
            phonemes: e.transcript.clone(),
            codes: r.codes,
        })
        .collect();
    let plm_cfg = PlmConfig {
        width: 32,
        blocks: 1,
        ..PlmConfig::default()
    };
    let plm_train = PlmTrainConfig {
        steps: 8,
        batch_size: 2,
        ..PlmTrainConfig::default()
    };
    let (plm, _) = plm::train_plm(&tts, &data, &plm_cfg, &plm_train, DType::F32, |_| {}).unwrap();
    let speech = face::compute_speech_vectors(&tts, &c.examples, &audio).unwrap();
    let pairs = face::make_pairs(&c.examples, &speech).unwrap();
    let enc_cfg = FaceEncoderConfig {
        channels: vec![4, 8],
        speech_dim: 32,
        ..FaceEncoderConfig::default()
    };
    let face_train = FaceTrainConfig {
        steps: 8,
        batch_size: 4,
        ..FaceTrainConfig::default()
    };
    let (enc, _) = face::train_face_encoder(&pairs, &enc_cfg, &face_train, DType::F32, |_| {}).unwrap();
    tts.to_archive().unwrap().save(&dir.join("tts.f2va")).unwrap();
    plm.to_archive().unwrap().save(&dir.join("plm.f2va")).unwrap();
    enc.to_archive().unwrap().save(&dir.join("face.f2va")).unwrap();

    let voice = Voice { tts: &tts, plm: Some(&plm) };
    let mel = face2voice::audio::compute_mel(&c.examples[0].waveform, &audio).unwrap();
    let prompt = plm::make_prompt(&mel, &c.examples[0].transcript, &tts).unwrap();
    let syn = voice
        .synthesize_from_face(
            c.examples[1].face.as_deref().unwrap(),
            &enc,
            &c.examples[1].transcript,
            Some(&prompt),
            &SamplingConfig::default(),
            3,
        )
        .unwrap();
    GriffinLim { iterations: 16, seed: 3 }
        .render(&syn.mel, &audio)
        .unwrap()
        .write_wav(&dir.join("out.wav"))
        .unwrap();
    tree_bytes(dir)
}

#[test]
fn c13_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = deterministic_run(a.path());
    let second = deterministic_run(b.path());
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let pass = first.len() == second.len() && differing.is_empty() && names.iter().any(|n| n.ends_with(".wav"));
    verdict(
        13,
        "determinism audit",
        pass,
        format!(
            "{} files from corpus generation, three trainings and one synthesis; byte-identical across reruns: {}",
            first.len(),
            if differing.is_empty() { "all".to_string() } else { format!("not {differing:?}") }
        ),
    );
}
