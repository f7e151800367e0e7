//! Dataset manifests, deterministic batch inversion, step sweeps and
//! inversion grids.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{image_dims, load_image_as_latent, save_latent_as_image};
use crate::container::{read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::inversion::{stem_preprocess, InversionConfig};
use crate::latent::Latent;
use crate::schedule::{NoiseSchedule, ScheduleKind};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PARTIAL_MANIFEST_FILE: &str = "manifest.partial.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// How an output record was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Absolute path of the source image.
    pub source: PathBuf,
    pub schedule: ScheduleKind,
    #[serde(flatten)]
    pub inversion: InversionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl Record {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            category: None,
            split,
            label: None,
            provenance: None,
        }
    }
}

/// Records plus the directory their relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    base_dir: PathBuf,
    records: Vec<Record>,
}

impl DatasetManifest {
    /// Fails on duplicate ids.
    pub fn new(base_dir: impl Into<PathBuf>, records: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.id.is_empty() {
                return Err(Error::Manifest("record with empty id".into()));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id `{}`", r.id)));
            }
        }
        Ok(Self {
            base_dir: base_dir.into(),
            records,
        })
    }

    /// Parses one JSON object per line; blank lines are skipped.
    pub fn from_jsonl(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", n + 1)))?;
            records.push(r);
        }
        Self::new(base_dir, records)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_jsonl(&text, base)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        self.base_dir.join(&record.path)
    }

    /// Records of one split, sharing this manifest's base directory.
    pub fn split(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            base_dir: self.base_dir.clone(),
            records: self
                .records
                .iter()
                .filter(|r| r.split == split)
                .cloned()
                .collect(),
        }
    }

    pub fn load_latent(&self, record: &Record) -> Result<Latent> {
        load_latent_file(self.resolve(record))
    }

    /// `(category, image)` for every record; every record needs a category.
    pub fn load_labeled(&self) -> Result<Vec<(String, Latent)>> {
        let cats = self
            .records
            .iter()
            .map(|r| {
                r.category
                    .clone()
                    .ok_or_else(|| Error::Manifest(format!("record `{}` has no category", r.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let images = self
            .records
            .par_iter()
            .map(|r| self.load_latent(r))
            .collect::<Result<Vec<_>>>()?;
        Ok(cats.into_iter().zip(images).collect())
    }
}

/// Loads a `.png` image or a `.stem` tensor container.
pub fn load_latent_file(path: impl AsRef<Path>) -> Result<Latent> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("png") => load_image_as_latent(path),
        Some("stem") => read_tensor(path),
        _ => Err(Error::UnsupportedFormat(format!(
            "{}: expected a .png or .stem file",
            path.display()
        ))),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
}

/// FNV-1a 64 of the record id; stable across platforms and releases.
pub fn stream_id_for(id: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    id.bytes()
        .fold(OFFSET, |h, b| (h ^ b as u64).wrapping_mul(PRIME))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Png,
    #[default]
    Tensor,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Png => "png",
            OutputFormat::Tensor => "stem",
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputFormat::Png => "png",
            OutputFormat::Tensor => "tensor",
        })
    }
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png" => Ok(OutputFormat::Png),
            "tensor" => Ok(OutputFormat::Tensor),
            other => Err(Error::Config(format!("unknown output format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub inversion: InversionConfig,
    pub schedule: ScheduleKind,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub format: OutputFormat,
}

impl PipelineConfig {
    pub fn new(inversion: InversionConfig, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            inversion,
            schedule: ScheduleKind::Cosine,
            out_dir: out_dir.into(),
            workers: 1,
            format: OutputFormat::Tensor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        self.inversion.validate()
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::with_defaults(self.schedule, self.inversion.total_steps)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordFailure {
    pub id: String,
    pub message: String,
}

impl fmt::Display for RecordFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.id, self.message)
    }
}

/// Result of a batch run. With failures, `manifest` lists only the records
/// that succeeded and was written to the partial manifest file.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    pub failures: Vec<RecordFailure>,
}

impl RunOutcome {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Output file name for a record id: characters outside `[A-Za-z0-9._-]`
/// become `_`.
pub fn output_file_name(id: &str, format: OutputFormat) -> String {
    let stem: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{stem}.{}", format.extension())
}

fn output_names(manifest: &DatasetManifest, format: OutputFormat) -> Result<Vec<String>> {
    let mut owners: HashMap<String, &str> = HashMap::new();
    let mut names = Vec::with_capacity(manifest.len());
    for r in manifest.records() {
        let name = output_file_name(&r.id, format);
        if let Some(other) = owners.insert(name.clone(), &r.id) {
            return Err(Error::Manifest(format!(
                "ids `{other}` and `{}` map to the same output file `{name}`",
                r.id
            )));
        }
        names.push(name);
    }
    Ok(names)
}

fn write_output(x: &Latent, path: &Path, format: OutputFormat) -> Result<()> {
    match format {
        OutputFormat::Png => save_latent_as_image(x, path),
        OutputFormat::Tensor => write_tensor(x, path),
    }
}

/// Inverts one record with its provenance settings, without touching disk
/// beyond reading the source.
pub fn reproduce(record: &Record) -> Result<Latent> {
    let p = record
        .provenance
        .as_ref()
        .ok_or_else(|| Error::Manifest(format!("record `{}` has no provenance", record.id)))?;
    let schedule = NoiseSchedule::with_defaults(p.schedule, p.inversion.total_steps)?;
    let o = load_latent_file(&p.source)?;
    stem_preprocess(&o, &p.inversion, &schedule, stream_id_for(&record.id))
}

/// Applies [`stem_preprocess`] to every record and writes the outputs plus a
/// manifest into `config.out_dir`.
///
/// Per-record failures are collected rather than aborting the run. Errors
/// that make the whole run impossible (bad config, output collisions, an
/// unwritable output directory) are returned directly.
pub fn run_invert(manifest: &DatasetManifest, config: &PipelineConfig) -> Result<RunOutcome> {
    config.validate()?;
    let schedule = config.build_schedule()?;
    let names = output_names(manifest, config.format)?;
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let process = |(r, name): (&Record, &String)| -> Result<Record> {
        let resolved = manifest.resolve(r);
        let source = std::path::absolute(&resolved).map_err(|e| Error::io(&resolved, e))?;
        let o = load_latent_file(&source)?;
        let out = stem_preprocess(&o, &config.inversion, &schedule, stream_id_for(&r.id))?;
        write_output(&out, &config.out_dir.join(name), config.format)?;
        Ok(Record {
            path: PathBuf::from(name),
            provenance: Some(Provenance {
                source,
                schedule: config.schedule,
                inversion: config.inversion,
            }),
            ..r.clone()
        })
    };
    let results: Vec<Result<Record>> = pool.install(|| {
        manifest
            .records()
            .par_iter()
            .zip(names.par_iter())
            .map(process)
            .collect()
    });

    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (r, res) in manifest.records().iter().zip(results) {
        match res {
            Ok(out) => records.push(out),
            Err(e) => failures.push(RecordFailure {
                id: r.id.clone(),
                message: e.to_string(),
            }),
        }
    }
    let out_manifest = DatasetManifest::new(&config.out_dir, records)?;
    let file = if failures.is_empty() {
        MANIFEST_FILE
    } else {
        PARTIAL_MANIFEST_FILE
    };
    let manifest_path = config.out_dir.join(file);
    out_manifest.save(&manifest_path)?;
    Ok(RunOutcome {
        manifest: out_manifest,
        manifest_path,
        failures,
    })
}

/// Subdirectory name for one sweep point.
pub fn sweep_dir_name(t_stop: usize, total: usize) -> String {
    format!("t{t_stop}_T{total}")
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub t_stop: usize,
    pub total_steps: usize,
    pub outcome: RunOutcome,
}

/// Parses `5/50,10/50,...`.
pub fn parse_step_pairs(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let (t, n) = s
                .split_once('/')
                .ok_or_else(|| Error::Config(format!("step pair `{s}` is not of the form t/T")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad step count in `{s}`")))
            };
            Ok((parse(t)?, parse(n)?))
        })
        .collect()
}

/// One [`run_invert`] per `(t_stop, T)` pair, each under `t<k>_T<n>/`.
pub fn run_sweep(
    manifest: &DatasetManifest,
    base: &PipelineConfig,
    pairs: &[(usize, usize)],
) -> Result<Vec<SweepRun>> {
    if pairs.is_empty() {
        return Err(Error::Config("sweep needs at least one step pair".into()));
    }
    for &(t, n) in pairs {
        InversionConfig {
            t_stop: t,
            total_steps: n,
            ..base.inversion
        }
        .validate()?;
    }
    pairs
        .iter()
        .map(|&(t, n)| {
            let config = PipelineConfig {
                inversion: InversionConfig {
                    t_stop: t,
                    total_steps: n,
                    ..base.inversion
                },
                out_dir: base.out_dir.join(sweep_dir_name(t, n)),
                ..base.clone()
            };
            Ok(SweepRun {
                t_stop: t,
                total_steps: n,
                outcome: run_invert(manifest, &config)?,
            })
        })
        .collect()
}

/// Original followed by one inverted tile per step, concatenated along width.
///
/// `inversion.t_stop` is ignored; each tile uses its own step with the same
/// seed and stream.
pub fn inversion_grid(
    image: &Latent,
    schedule: &NoiseSchedule,
    steps: &[usize],
    inversion: &InversionConfig,
    stream_id: u64,
) -> Result<Latent> {
    let (h, w) = image_dims(image)?;
    if steps.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::Config("grid steps must be sorted ascending".into()));
    }
    let mut tiles = vec![image.clone()];
    for &t in steps {
        let config = InversionConfig {
            t_stop: t,
            total_steps: schedule.steps(),
            ..*inversion
        };
        tiles.push(stem_preprocess(image, &config, schedule, stream_id)?);
    }
    let n = tiles.len();
    let mut data = vec![0.0f32; 3 * h * n * w];
    for (k, tile) in tiles.iter().enumerate() {
        for c in 0..3 {
            for y in 0..h {
                let src = &tile.data()[(c * h + y) * w..][..w];
                data[(c * h + y) * n * w + k * w..][..w].copy_from_slice(src);
            }
        }
    }
    Latent::new(vec![3, h, n * w], data)
}

/// Writes [`inversion_grid`] as a PNG.
pub fn emit_inversion_grid(
    image: &Latent,
    schedule: &NoiseSchedule,
    steps: &[usize],
    inversion: &InversionConfig,
    out: impl AsRef<Path>,
) -> Result<()> {
    let grid = inversion_grid(image, schedule, steps, inversion, 0)?;
    save_latent_as_image(&grid, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{draw_noise, NoiseKey};

    fn write_images(dir: &Path, n: usize) -> DatasetManifest {
        let records = (0..n)
            .map(|i| {
                let x = draw_noise(NoiseKey::new(1, i as u64, 0), &[3, 4, 5])
                    .unwrap()
                    .scaled(0.3)
                    .unwrap();
                let name = format!("img{i}.stem");
                write_tensor(&x, dir.join(&name)).unwrap();
                let mut r = Record::new(format!("rec/{i}"), name, Split::Train);
                r.category = Some(format!("c{}", i % 2));
                r.label = Some(vec![i as f64, 0.5]);
                r
            })
            .collect();
        let m = DatasetManifest::new(dir, records).unwrap();
        m.save(dir.join("in.jsonl")).unwrap();
        m
    }

    #[test]
    fn manifest_round_trip() {
        let text = concat!(
            r#"{"id":"a","path":"a.png","category":"cup","split":"train","label":[0.1,0.2]}"#,
            "\n\n",
            r#"{"id":"b","path":"sub/b.png","split":"test"}"#,
            "\n"
        );
        let m = DatasetManifest::from_jsonl(text, "/data").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records()[0].label, Some(vec![0.1, 0.2]));
        assert_eq!(m.resolve(&m.records()[1]), PathBuf::from("/data/sub/b.png"));
        assert_eq!(m.split(Split::Test).len(), 1);
        let again = DatasetManifest::from_jsonl(&m.to_jsonl(), "/data").unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn manifest_rejects_bad_input() {
        let dup = "{\"id\":\"a\",\"path\":\"x\",\"split\":\"train\"}\n".repeat(2);
        assert!(matches!(DatasetManifest::from_jsonl(&dup, "."), Err(Error::Manifest(_))));
        let bad_split = r#"{"id":"a","path":"x","split":"val"}"#;
        assert!(DatasetManifest::from_jsonl(bad_split, ".").is_err());
        assert!(DatasetManifest::from_jsonl("{not json", ".").is_err());
    }

    #[test]
    fn stream_ids_are_stable() {
        // FNV-1a 64 reference values
        assert_eq!(stream_id_for(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(stream_id_for("a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(stream_id_for("foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn output_names_sanitize_and_collide() {
        assert_eq!(output_file_name("rec/1 a", OutputFormat::Tensor), "rec_1_a.stem");
        assert_eq!(output_file_name("x-y.z", OutputFormat::Png), "x-y.z.png");
        let m = DatasetManifest::new(
            ".",
            vec![Record::new("a/b", "1", Split::Train), Record::new("a_b", "2", Split::Train)],
        )
        .unwrap();
        assert!(output_names(&m, OutputFormat::Tensor).is_err());
    }

    #[test]
    fn zero_steps_pass_through() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_images(dir.path(), 3);
        let inv = InversionConfig {
            t_stop: 0,
            ..Default::default()
        };
        let out = run_invert(&m, &PipelineConfig::new(inv, dir.path().join("out"))).unwrap();
        assert!(out.is_complete());
        for (a, b) in m.records().iter().zip(out.manifest.records()) {
            assert_eq!(m.load_latent(a).unwrap(), out.manifest.load_latent(b).unwrap());
            assert_eq!(a.label, b.label);
        }
        let reread = DatasetManifest::load(&out.manifest_path).unwrap();
        assert_eq!(reread.records(), out.manifest.records());
    }

    #[test]
    fn provenance_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_images(dir.path(), 4);
        let out = run_invert(&m, &PipelineConfig::new(Default::default(), dir.path().join("o"))).unwrap();
        for r in out.manifest.records() {
            let p = r.provenance.as_ref().unwrap();
            assert_eq!((p.inversion.t_stop, p.inversion.total_steps), (15, 50));
            assert_eq!(reproduce(r).unwrap(), out.manifest.load_latent(r).unwrap());
        }
    }

    #[test]
    fn failures_are_collected() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_images(dir.path(), 3);
        let mut records = m.records().to_vec();
        records.push(Record::new("missing", "nope.stem", Split::Test));
        records.push(Record::new("text", "in.jsonl", Split::Test));
        let m = DatasetManifest::new(dir.path(), records).unwrap();
        let out = run_invert(&m, &PipelineConfig::new(Default::default(), dir.path().join("o"))).unwrap();
        assert_eq!(out.manifest.len(), 3);
        let ids: Vec<_> = out.failures.iter().map(|f| f.id.as_str()).collect();
        assert_eq!(ids, ["missing", "text"]);
        assert!(out.manifest_path.ends_with(PARTIAL_MANIFEST_FILE));
        assert!(out.manifest_path.exists());
    }

    #[test]
    fn worker_count_must_be_positive() {
        let mut c = PipelineConfig::new(Default::default(), "unused");
        c.workers = 0;
        let m = DatasetManifest::new(".", vec![]).unwrap();
        assert!(run_invert(&m, &c).is_err());
    }

    #[test]
    fn sweep_layout() {
        assert_eq!(
            parse_step_pairs("5/50, 10/50,30/100").unwrap(),
            vec![(5, 50), (10, 50), (30, 100)]
        );
        assert!(parse_step_pairs("5-50").is_err());
        assert!(parse_step_pairs("a/50").is_err());
        let dir = tempfile::tempdir().unwrap();
        let m = write_images(dir.path(), 2);
        let base = PipelineConfig::new(Default::default(), dir.path().join("sw"));
        assert!(run_sweep(&m, &base, &[(60, 50)]).is_err());
        let runs = run_sweep(&m, &base, &[(0, 50), (9, 30)]).unwrap();
        assert_eq!(runs.len(), 2);
        assert!(dir.path().join("sw/t0_T50").join(MANIFEST_FILE).exists());
        assert!(dir.path().join("sw/t9_T30").join(MANIFEST_FILE).exists());
        let r0 = &runs[0].outcome.manifest;
        assert_eq!(
            r0.load_latent(&r0.records()[0]).unwrap(),
            m.load_latent(&m.records()[0]).unwrap()
        );
    }

    #[test]
    fn grid_layout() {
        let s = NoiseSchedule::with_defaults(ScheduleKind::Cosine, 50).unwrap();
        let x = draw_noise(NoiseKey::new(5, 5, 5), &[3, 2, 3]).unwrap();
        let inv = InversionConfig::default();
        let g = inversion_grid(&x, &s, &[], &inv, 0).unwrap();
        assert_eq!(g, x);
        let steps: Vec<usize> = (1..=10).map(|k| 5 * k).collect();
        let g = inversion_grid(&x, &s, &steps, &inv, 0).unwrap();
        assert_eq!(g.shape(), &[3, 2, 33]);
        let g0 = inversion_grid(&x, &s, &[0], &inv, 0).unwrap();
        for c in 0..3 {
            for y in 0..2 {
                let row = &g0.data()[(c * 2 + y) * 6..][..6];
                assert_eq!(row[..3], row[3..]);
            }
        }
        assert!(inversion_grid(&x, &s, &[10, 5], &inv, 0).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("grid.png");
        emit_inversion_grid(&x, &s, &steps, &inv, &p).unwrap();
        assert_eq!(load_image_as_latent(&p).unwrap().shape(), &[3, 2, 33]);
    }
}
