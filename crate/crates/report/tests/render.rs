use std::fs;
use std::path::{Path, PathBuf};

use tempfile::{tempdir, TempDir};
use tsc_core::model::{HistoryRow, TrainingHistory};
use tsc_report::*;

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn history(dir: &TempDir, folds: usize, epochs: usize, constant: bool) -> PathBuf {
    let mut h = TrainingHistory::default();
    for fold in 0..folds {
        for epoch in 1..=epochs {
            let t = if constant { 0.5 } else { epoch as f64 / epochs as f64 };
            h.rows.push(HistoryRow { fold, epoch, loss: 1.0 - 0.9 * t, accuracy: t, val_loss: 1.1 - 0.8 * t, val_accuracy: 0.9 * t });
        }
    }
    let p = dir.path().join(format!("history_{folds}_{epochs}.csv"));
    h.write_csv(&p).unwrap();
    p
}

fn is_png(p: &Path) -> bool {
    fs::read(p).unwrap().starts_with(PNG_MAGIC)
}

#[test]
fn curves() {
    let dir = tempdir().unwrap();
    let one = history(&dir, 1, 10, false);
    let s = render_curves(&one, &dir.path().join("one.png")).unwrap();
    assert_eq!((s.panels, s.series, s.points), (2, 2, 40));
    assert!(is_png(&s.path));

    let five = history(&dir, 5, 10, false);
    assert_eq!(fs::read_to_string(&five).unwrap().lines().count(), 51);
    let s = render_curves(&five, &dir.path().join("five.png")).unwrap();
    assert_eq!(s.series, 10);
    assert_eq!(s.labels[0], "fold 0 train");

    let flat = history(&dir, 1, 4, true);
    render_curves(&flat, &dir.path().join("flat.png")).unwrap();
}

#[test]
fn curves_reject_bad_header() {
    let dir = tempdir().unwrap();
    let p = write(&dir, "h.csv", "fold,epoch,loss,acc,val_loss,val_accuracy\n0,1,1,1,1,1\n");
    assert!(matches!(render_curves(&p, &dir.path().join("x.png")), Err(ReportError::Parse { .. })));
}

#[test]
fn heatmaps() {
    let dir = tempdir().unwrap();
    let two = write(&dir, "cm2.csv", "true\\pred,disease,normal\ndisease,40,3\nnormal,5,52\n");
    let s = render_confusion_heatmap(&two, &dir.path().join("cm2.png")).unwrap();
    assert_eq!(s.points, 4);
    assert_eq!(s.annotations, vec![40, 3, 5, 52]);

    let four = write(
        &dir,
        "cm4.csv",
        "true\\pred,covid,normal,opacity,pneumonia\ncovid,9,1,0,0\nnormal,0,10,0,0\nopacity,1,0,8,1\npneumonia,0,0,0,10\n",
    );
    let s = render_confusion_heatmap(&four, &dir.path().join("cm4.png")).unwrap();
    assert_eq!(s.points, 16);
    assert_eq!(s.labels, ["covid", "normal", "opacity", "pneumonia"]);

    let zero = write(&dir, "cm0.csv", "true\\pred,a,b\na,0,0\nb,0,0\n");
    let s = render_confusion_heatmap(&zero, &dir.path().join("cm0.png")).unwrap();
    assert!(s.annotations.iter().all(|&v| v == 0));

    let single = write(&dir, "cm1.csv", "true\\pred,a\na,5\n");
    assert!(matches!(render_confusion_heatmap(&single, &dir.path().join("cm1.png")), Err(ReportError::Parse { .. })));

    let bad = write(&dir, "bad.csv", "true\\pred,a,b\na,1,2\n");
    assert!(matches!(
        render_confusion_heatmap(&bad, &dir.path().join("bad.png")),
        Err(ReportError::NonSquareMatrix { rows: 1, cols: 2 })
    ));
}

#[test]
fn distribution_bars() {
    let dir = tempdir().unwrap();
    let four = write(&dir, "d.csv", "label,count\ncovid,1500\nnormal,1500\nopacity,1200\npneumonia,1345\n");
    let s = render_distribution(&four, &dir.path().join("d.png")).unwrap();
    assert_eq!(s.points, 4);
    assert_eq!(s.annotations, vec![1500, 1500, 1200, 1345]);
    let one = write(&dir, "d1.csv", "label,count\nnormal,7\n");
    assert_eq!(render_distribution(&one, &dir.path().join("d1.png")).unwrap().points, 1);
    let bad = write(&dir, "d2.csv", "label,count\nnormal,x\n");
    assert!(render_distribution(&bad, &dir.path().join("d2.png")).is_err());
}

fn stats_csv(dir: &TempDir) -> PathBuf {
    let mut text = String::from("id,label,mean_c0,std_c0\n");
    for (i, class) in ["covid", "normal", "opacity", "pneumonia"].iter().enumerate() {
        for j in 0..5 {
            text.push_str(&format!("{class}/{j},{class},{:.3},{:.3}\n", 0.2 + 0.1 * i as f64 + 0.01 * j as f64, 0.1 + 0.02 * j as f64));
        }
    }
    write(dir, "stats.csv", &text)
}

#[test]
fn scatter_modes() {
    let dir = tempdir().unwrap();
    let csv = stats_csv(&dir);
    let s = render_scatter(&csv, &dir.path().join("all.png"), false).unwrap();
    assert_eq!((s.panels, s.points), (1, 20));
    let s = render_scatter(&csv, &dir.path().join("per.png"), true).unwrap();
    assert_eq!((s.panels, s.points), (4, 20));
    let single = write(&dir, "one.csv", "id,label,mean_c0,std_c0\na,normal,0.5,0.1\n");
    assert_eq!(render_scatter(&single, &dir.path().join("one.png"), true).unwrap().points, 1);
}

#[test]
fn rerendering_is_byte_identical_and_svg_is_optional() {
    let dir = tempdir().unwrap();
    let csv = stats_csv(&dir);
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    let before = fs::read(&csv).unwrap();
    render_scatter(&csv, &a, false).unwrap();
    render_scatter(&csv, &b, false).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(&csv).unwrap(), before);

    let svg = dir.path().join("c.svg");
    render_scatter(&csv, &svg, false).unwrap();
    assert!(fs::read_to_string(&svg).unwrap().contains("<svg"));

    let spec = FigureSpec { title: Some("Samples".into()), ..FigureSpec::new(FigureKind::Scatter, &csv, dir.path().join("d.png")) };
    assert_eq!(spec.render().unwrap().points, 20);
}
