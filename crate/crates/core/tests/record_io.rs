mod common;

use std::alloc::{GlobalAlloc, Layout, System};
use std::fs;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use mia_audit::record::{
    header_line, load_record_set, parse_record_line, serialize_record, stream_records, validate_file,
    write_record_set, ModalityMode, Moments, RecordError, RecordSet, SampleRecord, SplitTag, TokenObservation,
};
use proptest::prelude::*;

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let now = LIVE.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
        PEAK.fetch_max(now, Ordering::Relaxed);
        System.alloc(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
        System.dealloc(ptr, layout)
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

fn token() -> impl Strategy<Value = TokenObservation> {
    (
        0u64..1_000_000,
        -50.0f64..=0.0,
        prop::option::of((-20.0f64..0.0, 0.0f64..10.0)),
    )
        .prop_map(|(token_id, log_prob, m)| TokenObservation {
            token_id,
            log_prob,
            moments: m.map(|(mean, std)| Moments { mean, std }),
        })
}

fn record() -> impl Strategy<Value = SampleRecord> {
    (
        "[a-z0-9_-]{1,12}",
        prop::sample::select(vec![ModalityMode::TextOnly, ModalityMode::VisionText]),
        prop::sample::select(vec![
            SplitTag::Member,
            SplitTag::NonmemberId,
            SplitTag::NonmemberOod,
            SplitTag::Unlabeled,
        ]),
        "\\PC{1,40}",
        prop::collection::vec(token(), 1..20),
        prop::option::of(prop::collection::vec(token(), 1..20)),
        prop::option::of(prop::collection::vec(token(), 1..20)),
    )
        .prop_map(|(sample_id, modality, split, text, tokens, cond, reference)| {
            let conditional_tokens = cond.map(|mut c| {
                c.resize(tokens.len(), tokens[0].clone());
                c
            });
            SampleRecord {
                sample_id,
                model_id: "model-a".into(),
                modality,
                split,
                dataset: "ds".into(),
                text,
                tokens,
                conditional_tokens,
                reference_tokens: reference,
            }
        })
}

proptest! {
    #[test]
    fn serialize_parse_round_trip(r in record()) {
        let line = serialize_record(&r);
        let back = parse_record_line(line.as_bytes()).unwrap();
        prop_assert_eq!(&back, &r);
        prop_assert_eq!(serialize_record(&back), line);
    }

    #[test]
    fn file_round_trip_keeps_order(records in prop::collection::vec(record(), 1..12)) {
        let mut records = records;
        for (i, r) in records.iter_mut().enumerate() {
            r.sample_id = format!("s{i:03}-{}", r.sample_id);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let set = RecordSet { records: records.clone(), source_path: String::new() };
        write_record_set(&set, &path).unwrap();
        let loaded = load_record_set(&path).unwrap();
        prop_assert_eq!(loaded.records, records);
    }
}

fn sample(id: &str) -> SampleRecord {
    SampleRecord {
        sample_id: id.into(),
        model_id: "m".into(),
        modality: ModalityMode::TextOnly,
        split: SplitTag::Member,
        dataset: "d".into(),
        text: "abc".into(),
        tokens: vec![TokenObservation::new(1, -0.5), TokenObservation::new(2, -1.5)],
        conditional_tokens: None,
        reference_tokens: None,
    }
}

fn write_lines(lines: &[String]) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("in.jsonl");
    let mut f = fs::File::create(&path).unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    (dir, path)
}

#[test]
fn duplicate_sample_id_reports_both_lines() {
    let lines = vec![
        header_line(),
        serialize_record(&sample("a")),
        serialize_record(&sample("b")),
        serialize_record(&sample("a")),
    ];
    let (_d, path) = write_lines(&lines);
    match load_record_set(&path) {
        Err(RecordError::DuplicateId { sample_id, first_line, second_line, .. }) => {
            assert_eq!(sample_id, "a");
            assert_eq!((first_line, second_line), (2, 4));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn same_id_in_other_modality_is_allowed() {
    let mut b = sample("a");
    b.modality = ModalityMode::VisionText;
    let lines = vec![header_line(), serialize_record(&sample("a")), serialize_record(&b)];
    let (_d, path) = write_lines(&lines);
    assert_eq!(load_record_set(&path).unwrap().len(), 2);
}

#[test]
fn blank_lines_are_skipped() {
    let lines = vec![
        header_line(),
        String::new(),
        serialize_record(&sample("a")),
        "   ".into(),
        serialize_record(&sample("b")),
    ];
    let (_d, path) = write_lines(&lines);
    let ids: Vec<String> = load_record_set(&path).unwrap().records.into_iter().map(|r| r.sample_id).collect();
    assert_eq!(ids, ["a", "b"]);
}

#[test]
fn header_errors() {
    for header in [
        r#"{"format":"other","version":1}"#,
        r#"{"format":"mia-records","version":2}"#,
        "not json",
    ] {
        let (_d, path) = write_lines(&[header.to_string(), serialize_record(&sample("a"))]);
        match load_record_set(&path) {
            Err(RecordError::Header { line: 1, .. }) => {}
            other => panic!("{header}: unexpected {other:?}"),
        }
    }
    let (_d, path) = write_lines(&[]);
    assert!(matches!(load_record_set(&path), Err(RecordError::Header { .. })));
}

#[test]
fn validate_collects_every_bad_line() {
    let mut empty = sample("c");
    empty.tokens.clear();
    let mut positive = sample("d");
    positive.tokens[0].log_prob = 0.5;
    let lines = vec![
        header_line(),
        serialize_record(&sample("a")),
        serialize_record(&empty),
        serialize_record(&sample("b")),
        serialize_record(&positive),
        r#"{"sample_id":"e"}"#.to_string(),
    ];
    let (_d, path) = write_lines(&lines);
    let report = validate_file(&path).unwrap();
    let bad: Vec<Option<usize>> = report.errors.iter().map(RecordError::line).collect();
    assert_eq!(bad, [Some(3), Some(5), Some(6)]);
}

#[test]
fn moments_must_come_in_pairs() {
    let line = serialize_record(&sample("a")).replace(r#""log_prob":-0.5"#, r#""log_prob":-0.5,"dist_mean":-1.0"#);
    match parse_record_line(line.as_bytes()) {
        Err(RecordError::Schema { field, .. }) => assert_eq!(field, "tokens[0].dist_std"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn writing_is_deterministic() {
    let set = RecordSet {
        records: (0..50).map(|i| sample(&format!("s{i}"))).collect(),
        source_path: String::new(),
    };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_record_set(&set, &a).unwrap();
    write_record_set(&set, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn streaming_holds_one_record_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.jsonl");
    let mut r = sample("x");
    r.tokens = (0..200).map(|i| TokenObservation::with_moments(i, -1.0, -2.0, 1.0)).collect();
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&path).unwrap());
        writeln!(f, "{}", header_line()).unwrap();
        for i in 0..10_000 {
            r.sample_id = format!("s{i}");
            writeln!(f, "{}", serialize_record(&r)).unwrap();
        }
    }
    let file_len = fs::metadata(&path).unwrap().len() as usize;

    let base = LIVE.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let mut n = 0usize;
    stream_records(&path, |_, rec| {
        n += rec.tokens.len();
        Ok(())
    })
    .unwrap();
    let peak = PEAK.load(Ordering::Relaxed) - base;
    assert_eq!(n, 10_000 * 200);
    // Other tests may allocate concurrently, so bound loosely.
    assert!(peak * 20 < file_len, "peak {peak} bytes for a {file_len}-byte file");
}
