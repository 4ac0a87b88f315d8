use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use taiyan::decoder::{post_edit_flags, punctuate, punctuate_many};
use taiyan::model::{checkpoint, ModelConfig, Parameters};
use taiyan::sense::{cluster_glosses, concordance, sense_trajectory, trajectory_csv, Gloss, Period, PeriodCorpus};
use taiyan::sft::{serialize_for_training, validate_task_lines, PUNCTUATION_INSTRUCTION};
use taiyan::text::{is_mark, strip_marks};
use taiyan::tokenizer::{build_vocab, Vocabulary};
use taiyan::trainer::{sft_examples, train, TrainConfig};

fn small_model(vocab: &Vocabulary, max_seq_len: usize, seed: u64) -> Parameters<f32> {
    let cfg = ModelConfig::new(2, 16, 2, vocab.len(), max_seq_len);
    Parameters::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn vocab_of(text: &str) -> Vocabulary {
    build_vocab(text.chars().chain(PUNCTUATION_INSTRUCTION.chars()), 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn punctuation_keeps_text_and_grammar(text in "[\u{4e00}-\u{4e3f}]{1,90}", seed in 0u64..4) {
        let vocab = vocab_of("\u{4e00}\u{4e01}\u{4e02}\u{4e03}");
        let params = small_model(&vocab, 48, seed);
        let out = punctuate(&params, &vocab, &text).unwrap();
        prop_assert_eq!(strip_marks(&out), text);
        let cs: Vec<char> = out.chars().collect();
        prop_assert!(!is_mark(cs[0]));
        prop_assert!(is_mark(*cs.last().unwrap()));
        prop_assert!(cs.windows(2).all(|w| !(is_mark(w[0]) && is_mark(w[1]))));
    }
}

#[test]
fn batched_punctuation_matches_single_calls_after_reload() {
    let vocab = vocab_of("學而時習之不亦說乎有朋自遠方來");
    let params = small_model(&vocab, 40, 9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tyck");
    checkpoint::save(&params, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let texts = [
        "學而時習之",
        "有朋自遠方來不亦樂乎",
        "學",
        "學而時習之不亦說乎有朋自遠方來學而時習之不亦說乎",
    ];
    let batched = punctuate_many(&loaded, &vocab, &texts);
    for (t, b) in texts.iter().zip(batched) {
        assert_eq!(b.unwrap(), punctuate(&params, &vocab, t).unwrap());
    }
}

#[test]
fn task_file_to_trained_model() {
    let src = concat!(
        r#"{"task": "punctuation", "input": "學而時習之不亦說乎", "instruction": "給上述文本添加標點。", "output": "學而時習之，不亦說乎？"}"#,
        "\n",
        r#"{"task": "translation", "input": "學而時習之", "instruction": "將上文翻譯成白話文。", "output": "學了又時常溫習"}"#,
        "\n",
        r#"{"task": "punctuation", "input": "學而", "instruction": "給上述文本添加標點。", "output": "學，，而。"}"#,
        "\n"
    );
    let report = validate_task_lines(src);
    assert_eq!(report.accepted.len(), 2);
    assert_eq!(report.rejected.len(), 1);
    assert_eq!(report.rejected[0].line, 3);
    let text: String = report
        .accepted
        .iter()
        .flat_map(|e| [e.input.clone(), e.instruction.clone(), e.output.clone()])
        .collect::<String>()
        + "\n";
    let vocab = vocab_of(&text);
    let seqs: Vec<_> = report
        .accepted
        .iter()
        .map(|e| serialize_for_training(e, &vocab))
        .collect();
    let (rows, skipped) = sft_examples(&seqs, 40);
    assert_eq!((rows.len(), skipped), (2, 0));
    let mut params = small_model(&vocab, 64, 1);
    let mut cfg = TrainConfig::sft(30);
    cfg.seq_len = 40;
    cfg.batch_size = 2;
    cfg.max_lr = 1e-2;
    let log = train(&mut params, &rows, &cfg, |_| {}).unwrap();
    assert_eq!(log.len(), 30);
    assert!(log.iter().all(|l| l.loss.is_finite()));
    assert!(log[29].loss < log[0].loss);
    let out = punctuate(&params, &vocab, "學而時習之不亦說乎").unwrap();
    let flags = post_edit_flags("學而時習之，不亦說乎？", &out).unwrap();
    assert!(flags.iter().all(|f| f.boundary <= 9));
}

#[test]
fn concordance_glosses_and_trajectory() {
    let mut corpus = PeriodCorpus::new();
    corpus.add(Period::PreQin, "物一無文，五色成文");
    corpus.add(Period::Tang, "文以載道");
    let hits = concordance(&corpus, "文", 2).unwrap();
    assert_eq!(hits.len(), 3);
    assert_eq!(hits[0].snippet, "一無文，五");
    let senses = ["花紋", "花紋色彩", "文章"];
    let glosses: Vec<Gloss> = hits
        .iter()
        .zip(senses)
        .map(|(h, g)| Gloss {
            period: h.period,
            snippet: h.snippet.clone(),
            gloss: g.into(),
        })
        .collect();
    let clusters = cluster_glosses(&glosses, 0.85).unwrap();
    assert_eq!(clusters.len(), 2);
    let t = sense_trajectory(&clusters, 2).unwrap();
    assert_eq!(t.crossings(0, 1), vec![(Period::PreQin, Period::Tang)]);
    let csv = trajectory_csv(&t).unwrap();
    assert!(csv.contains("Pre-Qin,花紋,1\n"));
    assert!(csv.contains("Tang,文章,1\n"));
}
