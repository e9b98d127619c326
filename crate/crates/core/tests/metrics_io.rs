use proptest::prelude::*;
use tempfile::TempDir;
use voxrecon::training::{read_metrics_csv, write_metrics_csv, METRICS_HEADER};
use voxrecon::{Error, StepMetrics};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6f64..1e6, 1e-300f64..1e-10, Just(0.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn metrics_round_trip(rows in prop::collection::vec((finite(), finite(), finite(), finite(), finite()), 0..20)) {
        let rows: Vec<StepMetrics> = rows
            .into_iter()
            .enumerate()
            .map(|(step, (l_rgb, l_eik, l_curv, s, psnr))| StepMetrics { step, l_rgb, l_eik, l_curv, s, psnr })
            .collect();
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &rows).unwrap();
        prop_assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    }
}

#[test]
fn malformed_metrics_rejected() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.csv");
    for text in [
        "step,loss\n".to_string(),
        format!("{METRICS_HEADER}\n0,1,2\n"),
        format!("{METRICS_HEADER}\nx,1,2,3,4,5\n"),
        format!("{METRICS_HEADER}\n0,1,2,3,4,five\n"),
    ] {
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_metrics_csv(&path), Err(Error::Format(_))));
    }
}
