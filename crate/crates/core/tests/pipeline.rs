use std::fs;
use std::path::Path;

use stemob::analysis::latent_distance;
use stemob::harness::{generate_dataset, GeneratorConfig};
use stemob::inversion::InversionConfig;
use stemob::pipeline::{run_invert, run_sweep, DatasetManifest, OutputFormat, PipelineConfig};
use stemob::{NoiseSchedule, ScheduleKind};

fn dataset(dir: &Path, n: usize) -> DatasetManifest {
    let cfg = GeneratorConfig {
        n_train: n / 2,
        n_test: n - n / 2,
        size: 16,
        ..Default::default()
    };
    generate_dataset(&cfg, dir).unwrap()
}

#[test]
fn marginal_moments_over_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("in"), 100);
    let config = PipelineConfig {
        workers: 4,
        ..PipelineConfig::new(InversionConfig::default(), dir.path().join("out"))
    };
    let out = run_invert(&m, &config).unwrap();
    assert!(out.is_complete());
    let ab = NoiseSchedule::with_defaults(ScheduleKind::Cosine, 50)
        .unwrap()
        .alpha_bar_at(15)
        .unwrap();
    let (mut sum, mut sum_sq, mut n) = (0.0, 0.0, 0usize);
    for (a, b) in m.records().iter().zip(out.manifest.records()) {
        let x = m.load_latent(a).unwrap();
        let y = out.manifest.load_latent(b).unwrap();
        let mut s = 0.0;
        let mut ss = 0.0;
        for (&xi, &yi) in x.data().iter().zip(y.data()) {
            let z = (yi as f64 - ab.sqrt() * xi as f64) / (1.0 - ab).sqrt();
            s += z;
            ss += z * z;
        }
        let k = x.len() as f64;
        // 768 values per image: 5 standard errors on the mean and variance
        assert!((s / k).abs() < 5.0 / k.sqrt(), "{}", b.id);
        assert!((ss / k - 1.0).abs() < 5.0 * (2.0 / k).sqrt(), "{}", b.id);
        sum += s;
        sum_sq += ss;
        n += x.len();
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    assert!(mean.abs() < 0.01 && (var - 1.0).abs() < 0.02, "{mean} {var}");
}

#[test]
fn png_pass_through_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("in"), 6);
    let config = PipelineConfig {
        format: OutputFormat::Png,
        ..PipelineConfig::new(
            InversionConfig {
                t_stop: 0,
                ..Default::default()
            },
            dir.path().join("out"),
        )
    };
    let out = run_invert(&m, &config).unwrap();
    for (a, b) in m.records().iter().zip(out.manifest.records()) {
        let src = fs::read(m.resolve(a)).unwrap();
        let dst = fs::read(out.manifest.resolve(b)).unwrap();
        assert_eq!(
            stemob::codec::load_image_as_latent(m.resolve(a)).unwrap(),
            stemob::codec::load_image_as_latent(out.manifest.resolve(b)).unwrap()
        );
        assert!(!src.is_empty() && !dst.is_empty());
    }
}

#[test]
fn fixed_total_sweep_deviation_grows() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("in"), 10);
    let base = PipelineConfig::new(InversionConfig::default(), dir.path().join("sweep"));
    let pairs: Vec<(usize, usize)> = [0, 5, 10, 15, 20, 25].iter().map(|&t| (t, 50)).collect();
    let runs = run_sweep(&m, &base, &pairs).unwrap();
    assert_eq!(runs.len(), 6);
    let s = NoiseSchedule::with_defaults(ScheduleKind::Cosine, 50).unwrap();
    let mut previous = -1.0;
    for run in &runs {
        let ab = s.alpha_bar_at(run.t_stop).unwrap();
        let mut total = 0.0;
        for (a, b) in m.records().iter().zip(run.outcome.manifest.records()) {
            let x = m.load_latent(a).unwrap();
            let y = run.outcome.manifest.load_latent(b).unwrap();
            total += latent_distance(&y, &x.scaled(ab.sqrt() as f32).unwrap()).unwrap();
        }
        let mean = total / m.len() as f64;
        assert!(mean > previous, "t={} mean {mean} <= {previous}", run.t_stop);
        previous = mean;
        let dir_name = format!("t{}_T{}", run.t_stop, run.total_steps);
        assert!(run.outcome.manifest_path.starts_with(dir.path().join("sweep").join(dir_name)));
    }
}

#[test]
fn fixed_ratio_family_agrees() {
    let values: Vec<f64> = [(9, 30), (15, 50), (30, 100)]
        .iter()
        .map(|&(t, n)| {
            NoiseSchedule::with_defaults(ScheduleKind::Cosine, n)
                .unwrap()
                .alpha_bar_at(t)
                .unwrap()
        })
        .collect();
    for v in &values {
        assert!((v - values[1]).abs() / values[1] < 0.02, "{values:?}");
    }
}

#[test]
fn outputs_keyed_by_id_not_position() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("in"), 12);
    let mut records = m.records().to_vec();
    records.reverse();
    records.swap(0, 5);
    let shuffled = DatasetManifest::new(m.base_dir(), records).unwrap();
    let a = run_invert(&m, &PipelineConfig::new(InversionConfig::default(), dir.path().join("a"))).unwrap();
    let b = run_invert(&shuffled, &PipelineConfig::new(InversionConfig::default(), dir.path().join("b"))).unwrap();
    for r in a.manifest.records() {
        let other = b.manifest.get(&r.id).unwrap();
        assert_eq!(
            fs::read(a.manifest.resolve(r)).unwrap(),
            fs::read(b.manifest.resolve(other)).unwrap()
        );
    }
}
