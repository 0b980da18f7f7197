//! External datasets reach the library only as sample files. These build
//! small synthetic stand-ins with the shape of each source and read them back.

use std::fmt::Write as _;
use std::io::Write;

use condiff::dist::{empirical_from_samples, ExactDistribution};
use condiff::error::Error;
use condiff::io::{load_samples, read_samples, save_samples};
use condiff::metrics::{cross_correlation, tv};
use condiff::{Guard, StateSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn write_temp(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

fn csv_rows(rows: &[Vec<u8>], sep: &str) -> String {
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().map(u8::to_string).collect();
        let _ = writeln!(out, "{}", line.join(sep));
    }
    out
}

#[test]
fn binarized_digit_images() {
    // 28x28 images thresholded to {0, 1}, one image per CSV row
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Vec<u8>> = (0..40)
        .map(|_| {
            (0..784)
                .map(|k| {
                    let (r, c) = (k / 28, k % 28);
                    let stroke = (r as i32 - 14).abs() < 8 && (c as i32 - 14).abs() < 3;
                    (stroke && rng.random::<f64>() < 0.9) as u8
                })
                .collect()
        })
        .collect();
    let f = write_temp(&csv_rows(&rows, ","));
    let s = load_samples(f.path(), None).unwrap();
    assert_eq!((s.q(), s.p(), s.len()), (784, 2, 40));
    assert_eq!(s.row(7), &rows[7][..]);
    assert!(matches!(
        s.space().table_len(Guard::default()),
        Err(Error::StateSpaceTooLarge { .. })
    ));
}

#[test]
fn grayscale_digit_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rows: Vec<Vec<u8>> = (0..10).map(|_| (0..784).map(|_| rng.random::<u8>()).collect()).collect();
    rows[3][100] = 255;
    let s = read_samples(csv_rows(&rows, ",").as_bytes(), None).unwrap();
    assert_eq!((s.q(), s.p()), (784, 256));
    assert!(read_samples("256,0\n".as_bytes(), None).is_err());
}

#[test]
fn ghz_measurements() {
    // computational-basis shots of an 8-qubit GHZ state: all zeros or all ones
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut text = String::from("q=8 p=2\n# ghz stand-in, 2000 shots\n");
    for _ in 0..2000 {
        let b = rng.random::<bool>() as u8;
        text.push_str(&csv_rows(&[vec![b; 8]], " "));
    }
    let f = write_temp(&text);
    let s = load_samples(f.path(), None).unwrap();
    assert_eq!((s.q(), s.p(), s.len()), (8, 2, 2000));
    assert_eq!(s.provenance, "ghz stand-in, 2000 shots");
    let space = StateSpace::new(8, 2).unwrap();
    let mut probs = vec![0.0; 256];
    probs[0] = 0.5;
    probs[255] = 0.5;
    let ideal = ExactDistribution::new(space, probs).unwrap();
    let emp = empirical_from_samples(&s).unwrap();
    assert!(tv(&emp, &ideal).unwrap() < 0.05);
    let c = cross_correlation(&s).unwrap();
    assert!((c.get(0, 7) - 1.0).abs() < 1e-12);
}

#[test]
fn annealer_spin_reads() {
    // annealer reads over 2000 qubits, already mapped from ±1 to {0, 1}
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<Vec<u8>> = (0..25).map(|_| (0..2000).map(|_| rng.random_range(0..2)).collect()).collect();
    let f = write_temp(&csv_rows(&rows, ","));
    let s = load_samples(f.path(), Some(2)).unwrap();
    assert_eq!((s.q(), s.p(), s.len()), (2000, 2, 25));
    assert_eq!(cross_correlation(&s).unwrap().q, 2000);
    // raw spins must be mapped first
    let err = read_samples("1,-1,1\n".as_bytes(), None).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }));
}

#[test]
fn whitespace_and_mixed_separators() {
    let s = read_samples("0 1\t2\n2, 1 ,0\n\n1 1 1\n".as_bytes(), None).unwrap();
    assert_eq!((s.q(), s.p(), s.len()), (3, 3, 3));
    assert_eq!(s.row(1), &[2, 1, 0]);
}

#[test]
fn native_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let space = StateSpace::new(6, 3).unwrap();
    let rows: Vec<Vec<u8>> = (0..50).map(|_| (0..6).map(|_| rng.random_range(0..3)).collect()).collect();
    let s = condiff::SampleSet::from_rows(space, rows, "synthetic").unwrap();
    let f = tempfile::NamedTempFile::new().unwrap();
    save_samples(&s, f.path()).unwrap();
    assert_eq!(load_samples(f.path(), None).unwrap(), s);
}
