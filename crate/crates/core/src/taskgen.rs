//! Synthetic "dialect" tasks and their on-disk manifests.
//!
//! All tasks share one acoustic embedding per symbol. A task perturbs it in
//! two ways: a substitution table that makes some tokens sound like other
//! symbols, and an orthogonal rotation of the feature space. Each token
//! becomes `frames_per_token` copies of its rotated embedding plus Gaussian
//! noise.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Utterance, FIRST_TOKEN};
use crate::params::hex;
use crate::tensor::rng::{normal_vec, stream};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Lexical tokens, excluding blank and the sentinel.
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    pub rotation_seed: u64,
    /// Angle of every plane rotation; 0 is the identity.
    pub rotation_angle: f64,
    pub substitution_seed: u64,
    pub substitution_fraction: f64,
    /// Explicit substituted symbols, overriding the seeded choice.
    pub substituted_symbols: Option<Vec<usize>>,
    pub noise_std: f64,
    /// Seed of the symbol embeddings shared by every task.
    pub base_seed: u64,
    pub corpus_seed: u64,
    pub train_count: usize,
    pub dev_count: usize,
    pub test_count: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            task_id: 1,
            vocab_size: 32,
            feature_dim: 16,
            frames_per_token: 3,
            rotation_seed: 0,
            rotation_angle: 0.0,
            substitution_seed: 0,
            substitution_fraction: 0.3,
            substituted_symbols: None,
            noise_std: 0.1,
            base_seed: 0,
            corpus_seed: 0,
            train_count: 2000,
            dev_count: 250,
            test_count: 250,
            min_len: 3,
            max_len: 7,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("task {}: {m}", self.task_id)));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} < 4", self.vocab_size));
        }
        if self.frames_per_token < 1 {
            return bad("frames_per_token must be at least 1".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.substitution_fraction) {
            return bad(format!("substitution_fraction {} outside [0, 1]", self.substitution_fraction));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite() && self.rotation_angle.is_finite()) {
            return bad("noise_std and rotation_angle must be finite, noise_std >= 0".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("bad length range [{}, {}]", self.min_len, self.max_len));
        }
        if self.train_count + self.dev_count + self.test_count == 0 {
            return bad("no utterances requested".into());
        }
        if let Some(s) = &self.substituted_symbols {
            let mut sorted = s.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != s.len() || s.iter().any(|&x| x >= self.vocab_size) {
                return bad("substituted_symbols must be distinct symbols below vocab_size".into());
            }
        }
        Ok(())
    }

    /// Output classes a model needs for this task.
    pub fn model_vocab(&self) -> usize {
        self.vocab_size + FIRST_TOKEN
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("task spec serializes");
        hex(&Sha256::digest(json))
    }

    /// Symbol each lexical token is pronounced as.
    pub fn substitution_table(&self) -> Vec<usize> {
        let v = self.vocab_size;
        let mut table: Vec<usize> = (0..v).collect();
        let mut rng = stream(self.substitution_seed, "substitution", 0);
        let chosen = match &self.substituted_symbols {
            Some(s) => s.clone(),
            None => {
                let k = (self.substitution_fraction * v as f64).round() as usize;
                let mut all: Vec<usize> = (0..v).collect();
                all.shuffle(&mut rng);
                all.truncate(k);
                all.sort_unstable();
                all
            }
        };
        if chosen.len() < 2 {
            return table;
        }
        // A random cycle over the chosen symbols: every one of them moves.
        let mut order = chosen;
        order.shuffle(&mut rng);
        for (i, &a) in order.iter().enumerate() {
            table[a] = order[(i + 1) % order.len()];
        }
        table
    }

    /// `f x f` orthogonal map applied to every frame (row vector on the left).
    pub fn rotation(&self) -> Tensor {
        let f = self.feature_dim;
        if self.rotation_angle == 0.0 {
            return Tensor::identity(f);
        }
        let basis = random_orthogonal(f, self.rotation_seed);
        let (c, s) = (self.rotation_angle.cos(), self.rotation_angle.sin());
        let mut planes = Tensor::identity(f);
        for p in 0..f / 2 {
            let (i, j) = (2 * p, 2 * p + 1);
            let d = planes.data_mut();
            d[i * f + i] = c;
            d[i * f + j] = -s;
            d[j * f + i] = s;
            d[j * f + j] = c;
        }
        let tmp = basis.matmul(&planes).expect("square");
        tmp.matmul(&basis.transpose()).expect("square")
    }
}

fn random_orthogonal(f: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, "rotation", 0);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(f);
    while rows.len() < f {
        let mut v = normal_vec(&mut rng, f, 1.0);
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::matrix(f, f, rows.concat()).expect("square")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl TaskDataset {
    pub fn split(&self, s: Split) -> &[Utterance] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

pub fn generate_task(spec: &TaskSpec) -> Result<TaskDataset> {
    spec.validate()?;
    let (v, f, r) = (spec.vocab_size, spec.feature_dim, spec.frames_per_token);
    let base = normal_vec(&mut stream(spec.base_seed, "symbols", 0), v * f, 1.0);
    let table = spec.substitution_table();
    let rot = spec.rotation();
    let sounds: Vec<Vec<f64>> = (0..v)
        .map(|a| {
            let e = Tensor::matrix(1, f, base[table[a] * f..(table[a] + 1) * f].to_vec()).expect("row");
            e.matmul(&rot).expect("f x f").into_data()
        })
        .collect();

    let total = spec.train_count + spec.dev_count + spec.test_count;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut stream(spec.corpus_seed, "partition", 0));
    let mut splits: [Vec<Utterance>; 3] = Default::default();
    for (pos, &idx) in order.iter().enumerate() {
        let split = if pos < spec.train_count {
            0
        } else if pos < spec.train_count + spec.dev_count {
            1
        } else {
            2
        };
        let mut rng = stream(spec.corpus_seed, "utterance", idx as u64);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut lex = Vec::with_capacity(len);
        while lex.len() < len {
            let a = rng.random_range(0..v);
            if lex.last() != Some(&a) {
                lex.push(a);
            }
        }
        let mut data = Vec::with_capacity(len * r * f);
        for &a in &lex {
            for _ in 0..r {
                let noise = normal_vec(&mut rng, f, spec.noise_std);
                // Stored as f32 on disk, so round here to keep files exact.
                data.extend(sounds[a].iter().zip(noise).map(|(s, n)| (s + n) as f32 as f64));
            }
        }
        splits[split].push(Utterance {
            id: format!("t{}-u{idx:05}", spec.task_id),
            frames: Tensor::matrix(len * r, f, data)?,
            tokens: lex.iter().map(|a| a + FIRST_TOKEN).collect(),
            task_id: Some(spec.task_id),
        });
    }
    for s in &mut splits {
        s.sort_by(|a, b| a.id.cmp(&b.id));
    }
    let [train, dev, test] = splits;
    Ok(TaskDataset {
        spec: spec.clone(),
        train,
        dev,
        test,
    })
}

/// Specs for `num_tasks` mutually interfering tasks: disjoint substitution
/// blocks, distinct rotations and corpora, one shared embedding.
pub fn interference_suite(num_tasks: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    let base = TaskSpec::default();
    let block = (base.substitution_fraction * base.vocab_size as f64).round() as usize;
    if num_tasks * block > base.vocab_size {
        return Err(Error::Config(format!(
            "{num_tasks} disjoint substitution blocks of {block} do not fit {} symbols",
            base.vocab_size
        )));
    }
    Ok((1..=num_tasks)
        .map(|t| TaskSpec {
            task_id: t,
            rotation_seed: seed * 1000 + t as u64,
            rotation_angle: 0.8,
            substitution_seed: seed * 1000 + t as u64,
            substituted_symbols: Some(((t - 1) * block..t * block).collect()),
            base_seed: seed,
            corpus_seed: seed * 1000 + t as u64,
            ..base.clone()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format_version: u32,
    pub split: Split,
    pub spec_hash: String,
    pub spec: TaskSpec,
    pub utterances: usize,
    pub frames: usize,
    pub blob: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Byte offset into the blob.
    pub offset: u64,
    pub frames: usize,
    pub tokens: Vec<usize>,
    pub task_id: usize,
}

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

/// Writes `<split>.jsonl` and `<split>.f32` for every split into `dir`.
pub fn write_task(dataset: &TaskDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for split in Split::ALL {
        let utts = dataset.split(split);
        let blob_name = format!("{}.f32", split.name());
        let header = ManifestHeader {
            format_version: MANIFEST_VERSION,
            split,
            spec_hash: dataset.spec.hash(),
            spec: dataset.spec.clone(),
            utterances: utts.len(),
            frames: utts.iter().map(Utterance::num_frames).sum(),
            blob: blob_name.clone(),
        };
        let mut text = serde_json::to_string(&header)?;
        text.push('\n');
        let mut blob = Vec::new();
        for u in utts {
            let rec = ManifestRecord {
                id: u.id.clone(),
                offset: blob.len() as u64,
                frames: u.num_frames(),
                tokens: u.tokens.clone(),
                task_id: u.task_id.unwrap_or(dataset.spec.task_id),
            };
            for x in u.frames.data() {
                blob.extend_from_slice(&(*x as f32).to_le_bytes());
            }
            text.push_str(&serde_json::to_string(&rec)?);
            text.push('\n');
        }
        let mpath = manifest_path(dir, split);
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(blob_name);
        let mut file = fs::File::create(&bpath).map_err(|e| Error::io(&bpath, e))?;
        file.write_all(&blob).map_err(|e| Error::io(&bpath, e))?;
    }
    Ok(())
}

/// A parsed manifest whose records are resolved against the blob on demand.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
    blob: Vec<u8>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn byte_range(&self, i: usize) -> (usize, usize) {
        let r = &self.records[i];
        let n = r.frames * self.header.spec.feature_dim * 4;
        (r.offset as usize, r.offset as usize + n)
    }

    pub fn utterance(&self, i: usize) -> Result<Utterance> {
        let r = &self.records[i];
        let (start, end) = self.byte_range(i);
        let bytes = self.blob.get(start..end).ok_or_else(|| {
            Error::Integrity(format!("record {i} ('{}') lies outside the frame blob", r.id))
        })?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let frames = Tensor::matrix(r.frames, self.header.spec.feature_dim, data)
            .map_err(|e| Error::Integrity(format!("record {i} ('{}'): {e}", r.id)))?;
        Ok(Utterance {
            id: r.id.clone(),
            frames,
            tokens: r.tokens.clone(),
            task_id: Some(r.task_id),
        })
    }

    pub fn utterances(&self) -> Result<Vec<Utterance>> {
        (0..self.len()).map(|i| self.utterance(i)).collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Integrity(format!("{}: empty manifest", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: ManifestHeader = serde_json::from_str(&first)
        .map_err(|e| Error::Integrity(format!("{}: bad header: {e}", path.display())))?;
    if header.format_version != MANIFEST_VERSION {
        return Err(Error::Integrity(format!(
            "{}: manifest format {} unsupported (expected {MANIFEST_VERSION})",
            path.display(),
            header.format_version
        )));
    }
    if header.spec_hash != header.spec.hash() {
        return Err(Error::Integrity(format!(
            "{}: spec hash {} does not match the embedded spec",
            path.display(),
            header.spec_hash
        )));
    }
    let mut records = Vec::with_capacity(header.utterances);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Integrity(format!("{}: record {i}: {e}", path.display())))?;
        records.push(rec);
    }
    if records.len() != header.utterances {
        return Err(Error::Integrity(format!(
            "{}: header promises {} records, found {}",
            path.display(),
            header.utterances,
            records.len()
        )));
    }
    let bpath = path.with_file_name(&header.blob);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let m = Manifest {
        header,
        records,
        blob,
    };
    for i in 0..m.len() {
        let (_, end) = m.byte_range(i);
        if end > m.blob.len() {
            return Err(Error::Integrity(format!(
                "{}: record {i} ('{}') is not resolvable: blob has {} bytes, record needs {end}",
                path.display(),
                m.records[i].id,
                m.blob.len()
            )));
        }
    }
    Ok(m)
}

/// Loads all three splits from `dir`; they must share one spec.
pub fn load_task(dir: &Path) -> Result<TaskDataset> {
    let mut spec: Option<TaskSpec> = None;
    let mut parts = Vec::with_capacity(3);
    for split in Split::ALL {
        let m = load_manifest(&manifest_path(dir, split))?;
        if let Some(s) = &spec {
            if s.hash() != m.header.spec_hash {
                return Err(Error::Integrity(format!(
                    "{}: {} split has a foreign spec hash",
                    dir.display(),
                    split.name()
                )));
            }
        } else {
            spec = Some(m.header.spec.clone());
        }
        parts.push(m.utterances()?);
    }
    let mut parts = parts.into_iter();
    Ok(TaskDataset {
        spec: spec.expect("three splits read"),
        train: parts.next().unwrap_or_default(),
        dev: parts.next().unwrap_or_default(),
        test: parts.next().unwrap_or_default(),
    })
}

/// Like [`load_task`] but refuses data generated from any other spec.
pub fn load_task_for(dir: &Path, spec: &TaskSpec) -> Result<TaskDataset> {
    let d = load_task(dir)?;
    if d.spec.hash() != spec.hash() {
        return Err(Error::Integrity(format!(
            "{}: data was generated from spec {}, expected {}",
            dir.display(),
            d.spec.hash(),
            spec.hash()
        )));
    }
    Ok(d)
}
