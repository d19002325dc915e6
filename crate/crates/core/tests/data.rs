use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use proptest::prelude::*;

use predgen_core::data::{
    arithmetic_oracle, build, dice, keyword_rule, load_file, DatasetKind, DatasetSpec, FileFormat, FileMapping, Split,
    Target, TaskKind,
};
use predgen_core::model::Vocab;
use predgen_core::Error;

fn spec(kind: DatasetKind, train: usize, test: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        train_size: train,
        test_size: test,
        seed,
        ..DatasetSpec::new(kind)
    }
}

fn mapping(path: &Path, format: FileFormat, target: &str, task: TaskKind) -> FileMapping {
    FileMapping {
        path: path.to_path_buf(),
        format,
        text: "text".into(),
        target: target.into(),
        split: None,
        task,
    }
}

fn write_tmp(contents: &str, suffix: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
    f.write_all(contents.as_bytes()).unwrap();
    f
}

#[test]
fn keyword_oracle_is_perfect_without_noise() {
    for c in 2..=8 {
        let ds = build(&DatasetSpec {
            num_classes: c,
            ..spec(DatasetKind::ToyClassification, 300, 100, 4)
        })
        .unwrap();
        for e in &ds.examples {
            assert_eq!(keyword_rule(&e.input_text, c), e.target.class(), "{}", e.input_text);
        }
    }
}

#[test]
fn binary_classes_are_balanced() {
    let ds = build(&spec(DatasetKind::ToyClassification, 800, 200, 9)).unwrap();
    let ones = ds.examples.iter().filter(|e| e.target == Target::Class(1)).count();
    let frac = ones as f64 / 1000.0;
    assert!((0.45..=0.55).contains(&frac), "{frac}");
}

#[test]
fn label_noise_touches_train_only() {
    let noisy = build(&DatasetSpec {
        label_noise: 0.3,
        ..spec(DatasetKind::ToyClassification, 400, 200, 2)
    })
    .unwrap();
    let wrong = |split| {
        noisy
            .split(split)
            .filter(|e| keyword_rule(&e.input_text, 2) != e.target.class())
            .count()
    };
    assert_eq!(wrong(Split::Test), 0);
    let rate = wrong(Split::Train) as f64 / 400.0;
    assert!((0.2..0.4).contains(&rate), "{rate}");
}

#[test]
fn class_count_limits() {
    for c in [1, 9] {
        let s = DatasetSpec {
            num_classes: c,
            ..spec(DatasetKind::ToyClassification, 10, 10, 0)
        };
        assert!(matches!(build(&s), Err(Error::Config(_))));
    }
}

#[test]
fn overlap_reference_values() {
    assert_eq!(dice("abc", "abc"), 1.0);
    assert_eq!(dice("ab", "cd"), 0.0);
    assert_eq!(dice("ab", "bc"), 0.5);
    assert_eq!(dice("abcd", "ab"), 2.0 * 2.0 / 6.0);
}

#[test]
fn regression_targets_follow_the_overlap() {
    let ds = build(&spec(DatasetKind::ToyRegression, 300, 100, 1)).unwrap();
    assert_eq!(ds.range, (0.0, 1.0));
    for e in &ds.examples {
        let (a, b) = e.input_text.split_once(' ').unwrap();
        let want = (dice(a, b) * 100.0).round() / 100.0;
        assert!((e.target.real().unwrap() - want).abs() < 1e-12, "{}", e.input_text);
    }
    assert!(ds.examples.iter().any(|e| e.target == Target::Real(1.0)));
    assert!(ds.examples.iter().any(|e| e.target == Target::Real(0.0)));
}

#[test]
fn regression_decimals_are_bounded() {
    for d in [0, 5] {
        let s = DatasetSpec {
            decimals: d,
            ..spec(DatasetKind::ToyRegression, 10, 10, 0)
        };
        assert!(build(&s).is_err());
    }
}

#[test]
fn arithmetic_matches_integer_oracle() {
    assert_eq!(arithmetic_oracle("2+3="), Some(5));
    assert_eq!(arithmetic_oracle("10-4="), Some(6));
    assert_eq!(arithmetic_oracle("3-9="), Some(-6));
    assert_eq!(arithmetic_oracle("3*9="), None);
    let ds = build(&DatasetSpec {
        max_operand: 40,
        ..spec(DatasetKind::Arithmetic, 800, 200, 5)
    })
    .unwrap();
    assert_eq!(ds.examples.len(), 1000);
    for e in &ds.examples {
        let oracle = integer_eval(&e.input_text);
        assert_eq!(e.target, Target::Real(oracle as f64), "{}", e.input_text);
        assert_eq!(ds.target_text(e.target).unwrap(), oracle.to_string());
    }
}

/// Independent evaluator over the characters of `"a+b="` or `"a-b="`.
fn integer_eval(text: &str) -> i64 {
    let mut acc = 0i64;
    let mut cur = 0i64;
    let mut sign = 1i64;
    for ch in text.chars() {
        match ch {
            '0'..='9' => cur = cur * 10 + ch.to_digit(10).unwrap() as i64,
            '+' | '-' | '=' => {
                acc += sign * cur;
                cur = 0;
                sign = if ch == '-' { -1 } else { 1 };
            }
            _ => panic!("unexpected {ch}"),
        }
    }
    acc
}

#[test]
fn arithmetic_operand_limit() {
    let s = DatasetSpec {
        max_operand: 100,
        ..spec(DatasetKind::Arithmetic, 10, 10, 0)
    };
    assert!(build(&s).is_err());
}

#[test]
fn oversized_requests_are_rejected() {
    assert!(build(&spec(DatasetKind::ToyRegression, 20_000, 10_000, 0)).is_err());
    assert!(build(&spec(DatasetKind::Arithmetic, 0, 0, 0)).is_err());
}

#[test]
fn generated_sets_are_deterministic_disjoint_and_in_alphabet() {
    let vocab = Vocab::new();
    for kind in [DatasetKind::ToyClassification, DatasetKind::ToyRegression, DatasetKind::Arithmetic] {
        let a = build(&spec(kind, 200, 100, 17)).unwrap();
        assert_eq!(a, build(&spec(kind, 200, 100, 17)).unwrap());
        assert_ne!(a, build(&spec(kind, 200, 100, 18)).unwrap());
        assert_eq!(a.split(Split::Train).count(), 200);
        assert_eq!(a.split(Split::Test).count(), 100);
        let train: HashSet<&str> = a.split(Split::Train).map(|e| e.input_text.as_str()).collect();
        assert!(a.split(Split::Test).all(|e| !train.contains(e.input_text.as_str())));
        for e in &a.examples {
            assert_eq!(vocab.sanitize(&e.input_text).1, 0, "{}", e.input_text);
            if let Target::Real(x) = e.target {
                assert!(a.range.0 <= x && x <= a.range.1);
            }
        }
    }
}

#[test]
fn csv_with_mapping() {
    let f = write_tmp("text,label\nhi,1\n", ".csv");
    let ds = load_file(&mapping(f.path(), FileFormat::Csv, "label", TaskKind::Classification), 2).unwrap();
    assert_eq!(ds.examples.len(), 1);
    assert_eq!(ds.examples[0].input_text, "hi");
    assert_eq!(ds.examples[0].target, Target::Class(1));
    assert_eq!(ds.examples[0].split, Split::Train);
}

#[test]
fn jsonl_real_target() {
    let f = write_tmp("{\"text\":\"a b\",\"target\":\"0.75\"}\n\n{\"text\":\"c\",\"target\":0.5}\n", ".jsonl");
    let ds = load_file(&mapping(f.path(), FileFormat::Jsonl, "target", TaskKind::Regression), 2).unwrap();
    assert_eq!(ds.examples[0].target, Target::Real(0.75));
    assert_eq!(ds.examples[1].target, Target::Real(0.5));
    assert_eq!(ds.range, (0.5, 0.75));
}

#[test]
fn missing_column_is_named() {
    let f = write_tmp("text,score\nhi,1\n", ".csv");
    match load_file(&mapping(f.path(), FileFormat::Csv, "label", TaskKind::Classification), 2) {
        Err(Error::MissingColumn(c)) => assert_eq!(c, "label"),
        other => panic!("{other:?}"),
    }
    let f = write_tmp("{\"text\":\"hi\"}\n", ".jsonl");
    match load_file(&mapping(f.path(), FileFormat::Jsonl, "label", TaskKind::Classification), 2) {
        Err(Error::MissingColumn(c)) => assert_eq!(c, "label"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bad_target_reports_its_line() {
    let f = write_tmp("text,label\nok,1\nbad,one\n", ".csv");
    match load_file(&mapping(f.path(), FileFormat::Csv, "label", TaskKind::Classification), 2) {
        Err(Error::Row { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    let f = write_tmp("{\"text\":\"a\",\"target\":\"1\"}\n{\"text\":\"b\",\"target\":\"x\"}\n", ".jsonl");
    match load_file(&mapping(f.path(), FileFormat::Jsonl, "target", TaskKind::Regression), 2) {
        Err(Error::Row { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn out_of_alphabet_characters_become_spaces() {
    let f = write_tmp("text,label,part\n\"Héllo, World!\",0,train\nok,1,test\n", ".csv");
    let m = FileMapping {
        split: Some("part".into()),
        ..mapping(f.path(), FileFormat::Csv, "label", TaskKind::Classification)
    };
    let ds = load_file(&m, 2).unwrap();
    assert_eq!(ds.examples[0].input_text, "h llo  world ");
    assert_eq!(ds.replaced_chars, 3);
    assert_eq!(ds.examples[1].split, Split::Test);
}

#[test]
fn missing_file_is_an_io_error() {
    let m = mapping(Path::new("/nonexistent/data.csv"), FileFormat::Csv, "label", TaskKind::Classification);
    assert!(matches!(load_file(&m, 2), Err(Error::Io { .. })));
}

#[test]
fn file_kind_requires_a_mapping() {
    assert!(matches!(build(&DatasetSpec::new(DatasetKind::File)), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn toy_sets_are_deterministic(seed in any::<u64>(), train in 1usize..60, test in 1usize..30) {
        for kind in [DatasetKind::ToyClassification, DatasetKind::ToyRegression, DatasetKind::Arithmetic] {
            let s = spec(kind, train, test, seed);
            let a = build(&s).unwrap();
            prop_assert_eq!(&a, &build(&s).unwrap());
            prop_assert_eq!(a.examples.len(), train + test);
        }
    }

    #[test]
    fn overlap_is_symmetric_and_bounded(a in "[a-h]{0,4}", b in "[a-h]{0,4}") {
        let d = dice(&a, &b);
        prop_assert_eq!(d, dice(&b, &a));
        prop_assert!((0.0..=1.0).contains(&d));
    }
}
