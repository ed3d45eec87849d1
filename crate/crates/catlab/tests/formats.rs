use std::fs;

use catlab::checkpoint::{
    checkpoint_path, load_model_dir, read_checkpoint, read_meta, save_model_dir, write_checkpoint,
};
use catlab::report::{read_report, to_tsv, write_report};
use catlab::tsv::{read_jsonl, read_tsv, write_jsonl, write_tsv, IngestStats};
use catlab::vocab::{load_tokenizer, save_tokenizer};
use catlab_core::corpus::CorpusRecord;
use catlab_core::experiment::{trainable_report, ExperimentConfig};
use catlab_core::model::{init_params, Extensions, LoraConfig, ModelConfig, Parameters};
use catlab_core::tokenizer::train_subword;
use catlab_core::trainer::Checkpoint;

fn small_params() -> Parameters<f32> {
    let cfg = ModelConfig {
        enc_layers: 1,
        dec_layers: 1,
        d_model: 8,
        d_ffn: 16,
        n_heads: 2,
        head_dim: 4,
        max_len: 8,
        ..ModelConfig::desk(20)
    };
    init_params(&cfg).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = small_params();
    p.tensors[0].data[3] = f32::MIN_POSITIVE / 4.0; // subnormal survives
    p.tensors[1].data[0] = -0.0;
    let path = checkpoint_path(dir.path(), 7);
    write_checkpoint(&path, &p, 7).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.step, 7);
    for (a, b) in p.tensors.iter().zip(&back.params.tensors) {
        assert_eq!(a.name, b.name);
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back, Checkpoint::new(p, 7));
}

#[test]
fn checkpoint_with_extensions_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ext = Extensions {
        adapter: None,
        lora: Some(LoraConfig { rank: 2, alpha: 4.0 }),
    };
    let p = small_params().with_extensions(ext, 3).unwrap();
    let path = dir.path().join("x.bin");
    write_checkpoint(&path, &p, 1).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap().params, p);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.bin");
    write_checkpoint(&path, &small_params(), 1).unwrap();
    let bytes = fs::read(&path).unwrap();

    fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
    assert!(read_checkpoint(&path).is_err());

    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0, 0, 0, 0]);
    fs::write(&path, &extra).unwrap();
    assert!(read_checkpoint(&path).is_err());

    let mut magic = bytes;
    magic[0] = b'X';
    fs::write(&path, &magic).unwrap();
    assert!(read_checkpoint(&path).is_err());
}

#[test]
fn model_dir_keeps_checkpoints_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let p = small_params();
    let mut q = p.clone();
    q.tensors[0].data[0] += 1.0;
    let ckpts = [Checkpoint::new(p.clone(), 10), Checkpoint::new(q.clone(), 20)];
    let meta = save_model_dir(dir.path(), &q, 21, &ckpts, &[10, 20], "test").unwrap();
    assert_eq!(meta.steps, [10, 20, 21]);
    assert_eq!(read_meta(dir.path()).unwrap(), meta);
    assert_eq!(load_model_dir(dir.path()).unwrap(), q);
    assert_eq!(read_checkpoint(&checkpoint_path(dir.path(), 10)).unwrap().params, p);
}

#[test]
fn vocab_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let text = ["the cat sat on the mat", "a cat and a hat", "that cat"];
    let tok = train_subword(&text, 40, &["<a>".to_string(), "<HQ>".to_string()]).unwrap();
    save_tokenizer(dir.path(), &tok).unwrap();
    let lines = fs::read_to_string(dir.path().join("vocab.txt")).unwrap();
    assert_eq!(lines.lines().count(), tok.vocab.size());
    let back = load_tokenizer(dir.path()).unwrap();
    assert_eq!(back, tok);
    assert_eq!(back.encode("the hat sat"), tok.encode("the hat sat"));
    assert_eq!(back.vocab.tag_id("<HQ>"), tok.vocab.tag_id("<HQ>"));

    // A vocab.txt whose tag block disagrees with the sidecar is refused.
    let swapped = lines.replacen("<a>", "<b>", 1);
    fs::write(dir.path().join("vocab.txt"), swapped).unwrap();
    assert!(load_tokenizer(dir.path()).is_err());
}

#[test]
fn tsv_ingest_counts_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tsv");
    fs::write(&path, "a b\tA B\n\nonly-one-field\n \tX\nc\tC\thttp://x.org/p\n").unwrap();
    let (records, stats) = read_tsv(&path, "c").unwrap();
    assert_eq!(
        stats,
        IngestStats {
            records: 2,
            malformed: 2,
            blank: 1
        }
    );
    assert_eq!(records[1].url.as_deref(), Some("http://x.org/p"));

    let out = dir.path().join("out.tsv");
    write_tsv(&out, &records).unwrap();
    assert_eq!(read_tsv(&out, "c").unwrap().0, records);

    let jl = dir.path().join("r.jsonl");
    let recs = vec![
        CorpusRecord::new("s", "t", "x"),
        CorpusRecord::new("u", "v", "y").with_url("http://a.b"),
    ];
    write_jsonl(&jl, &recs).unwrap();
    assert_eq!(read_jsonl(&jl).unwrap(), recs);
}

#[test]
fn reports_round_trip_and_carry_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::desk();
    let r = trainable_report(&cfg, &ModelConfig::paper_base(48_000), "paper");
    write_report(dir.path(), "t", &r).unwrap();
    assert_eq!(read_report(&dir.path().join("t.json")).unwrap(), r);
    let tsv = fs::read_to_string(dir.path().join("t.tsv")).unwrap();
    assert_eq!(tsv, to_tsv(&r));
    assert!(tsv.contains(&format!("# config_hash: {}", r.config_hash)));
    assert!(tsv.contains("# metric: chrF2|"));
    assert!(tsv.contains("seeds: bootstrap="));
    let header = tsv.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "preset\tmethod\ttrainable");
    assert_eq!(tsv.lines().filter(|l| !l.starts_with('#')).count(), 1 + r.rows.len());
}
