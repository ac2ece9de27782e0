//! Byte-exact comparison of emitted files against committed fixtures.
//!
//! Set `SHARPDIFF_BLESS=1` to rewrite the fixtures.

use std::path::PathBuf;

use nalgebra::{dmatrix, dvector, DMatrix, DVector};

use sharpdiff::diffusion::NoiseSchedule;
use sharpdiff::field::LinearField;
use sharpdiff::harness::emit::{csv_string, render_svg, Plot, PlotKind, Series};
use sharpdiff::metrics::{MemLabel, MetricRecord};

fn check(name: &str, body: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    if std::env::var_os("SHARPDIFF_BLESS").is_some() {
        std::fs::write(&path, body).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(want == body, "{name} differs from the fixture");
}

#[test]
fn metric_table() {
    let field = LinearField::new(DMatrix::zeros(2, 2), DVector::zeros(2), NoiseSchedule::default_linear())
        .unwrap()
        .with_condition(dmatrix![0.5, 1.0; 0.0, -2.0], dvector![0.25, 0.0])
        .unwrap();
    let xs = [dvector![1.0, 0.0], dvector![0.0, 1.0], dvector![-0.5, 2.0]];
    let rows: Vec<Vec<String>> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let label = if i == 0 { MemLabel::Memorized } else { MemLabel::NonMemorized };
            MetricRecord::evaluate(&field, i, x, 999, "c", 0.5, label).unwrap().row()
        })
        .collect();
    check("metrics.csv", &csv_string(&MetricRecord::HEADER, &rows).unwrap());
}

#[test]
fn quoted_csv() {
    let rows = vec![vec!["a,b".to_string(), "say \"hi\"".to_string()], vec!["1e-300".into(), "-0.0".into()]];
    check("quoted.csv", &csv_string(&["name", "note"], &rows).unwrap());
}

#[test]
fn plots() {
    let line = Plot {
        title: "loss <train>".into(),
        x_label: "epoch".into(),
        y_label: "loss".into(),
        kind: PlotKind::Line,
        series: vec![
            Series { name: "total".into(), color: "#1f77b4".into(), points: vec![(0.0, 3.0), (1.0, 2.0), (2.0, 1.5), (3.0, 1.25)] },
            Series { name: "dsm".into(), color: "#d62728".into(), points: vec![(0.0, 2.5), (1.0, 1.75), (2.0, 1.25), (3.0, 1.0)] },
        ],
    };
    check("line.svg", &render_svg(&line).unwrap());
    let scatter = Plot {
        title: "eigenvalues".into(),
        x_label: "t".into(),
        y_label: "min eig".into(),
        kind: PlotKind::Scatter,
        series: vec![Series { name: "one".into(), color: "#2ca02c".into(), points: vec![(5.0, -20000.0), (5.0, 0.001)] }],
    };
    check("scatter.svg", &render_svg(&scatter).unwrap());
}
