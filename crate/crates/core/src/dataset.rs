//! Manifests, stratified fold plans, synthetic PCG and batch loading.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{pad_or_crop, read_wav, resample, AudioClip};
use crate::codec::CodecFormat;
use crate::error::{Error, Result};
use crate::seed::derive;
use crate::tensor::Tensor;

/// Diagnostic classes, encoded 0..4 in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Class {
    N,
    AS,
    MS,
    MR,
    MVP,
}

impl Class {
    pub const ALL: [Class; 5] = [Class::N, Class::AS, Class::MS, Class::MR, Class::MVP];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Class::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::N => "N",
            Class::AS => "AS",
            Class::MS => "MS",
            Class::MR => "MR",
            Class::MVP => "MVP",
        }
    }

    pub fn from_name(name: &str) -> Option<Class> {
        Class::ALL.into_iter().find(|c| c.name().eq_ignore_ascii_case(name))
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<Class> for u8 {
    fn from(c: Class) -> u8 {
        c as u8
    }
}

impl TryFrom<u8> for Class {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Class, String> {
        Class::from_index(v as usize).ok_or_else(|| format!("label {v} is not in 0..=4"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Codec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub label: Class,
    pub provenance: Provenance,
    pub parent_id: Option<String>,
    pub codec_format: Option<CodecFormat>,
    pub bitrate_bps: Option<u32>,
}

impl ManifestEntry {
    pub fn original(id: impl Into<String>, path: impl Into<PathBuf>, label: Class) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            label,
            provenance: Provenance::Original,
            parent_id: None,
            codec_format: None,
            bitrate_bps: None,
        }
    }

    pub fn is_original(&self) -> bool {
        self.provenance == Provenance::Original
    }
}

/// A validated list of recordings. Ids are unique and every codec entry
/// points at an original with the same label.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
    index: HashMap<String, usize>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.id.is_empty() {
                return Err(Error::Manifest(format!("entry {i} has an empty id")));
            }
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Manifest(format!("duplicate id {}", e.id)));
            }
        }
        for e in &entries {
            match (e.provenance, &e.parent_id) {
                (Provenance::Original, None) => {}
                (Provenance::Original, Some(_)) => {
                    return Err(Error::Manifest(format!("original entry {} has a parent id", e.id)));
                }
                (Provenance::Codec, None) => {
                    return Err(Error::Manifest(format!("codec entry {} has no parent id", e.id)));
                }
                (Provenance::Codec, Some(p)) => {
                    let parent = index.get(p).map(|&j| &entries[j]);
                    match parent {
                        Some(parent) if parent.is_original() && parent.label == e.label => {}
                        Some(_) => {
                            return Err(Error::Manifest(format!(
                                "codec entry {}: parent {p} is not an original with label {}",
                                e.id, e.label
                            )))
                        }
                        None => return Err(Error::Manifest(format!("codec entry {}: unknown parent {p}", e.id))),
                    }
                }
            }
        }
        Ok(Self { entries, index })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn originals(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.is_original())
    }

    pub fn codec_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| !e.is_original())
    }

    pub fn class_counts(&self) -> [usize; 5] {
        let mut counts = [0; 5];
        for e in self.originals() {
            counts[e.label.index()] += 1;
        }
        counts
    }

    /// Reads a JSON-lines manifest. Relative paths are resolved against the
    /// manifest's directory, so loaded paths are absolute.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let base = absolute_dir(path)?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), n + 1)))?;
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
            entries.push(entry);
        }
        Self::new(entries)
    }

    /// Writes one JSON record per line. Paths under the manifest's directory
    /// are stored relative to it so a corpus directory can be moved whole;
    /// all others are stored absolute.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = absolute_dir(path)?;
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            let mut e = e.clone();
            let abs = std::path::absolute(&e.path).map_err(|err| Error::io(&e.path, err))?;
            e.path = match abs.strip_prefix(&base) {
                Ok(rel) => rel.to_path_buf(),
                Err(_) => abs,
            };
            serde_json::to_writer(&mut w, &e)?;
            w.write_all(b"\n").map_err(|err| Error::io(path, err))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn absolute_dir(file: &Path) -> Result<PathBuf> {
    let dir = match file.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::path::absolute(dir).map_err(|e| Error::io(dir, e))
}

/// Maps corpus directory names to classes.
#[derive(Debug, Clone)]
pub struct ClassDirs {
    names: BTreeMap<String, Class>,
}

impl Default for ClassDirs {
    /// Plain class names plus the `_New` suffix the public corpus ships with.
    fn default() -> Self {
        let mut names = BTreeMap::new();
        for c in Class::ALL {
            names.insert(c.name().to_string(), c);
            names.insert(format!("{}_New", c.name()), c);
        }
        Self { names }
    }
}

impl ClassDirs {
    pub fn from_pairs<I, S>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (S, Class)>,
        S: Into<String>,
    {
        Self {
            names: pairs.into_iter().map(|(s, c)| (s.into(), c)).collect(),
        }
    }

    pub fn class_of(&self, dir_name: &str) -> Option<Class> {
        self.names.get(dir_name).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanReport {
    pub manifest: Manifest,
    pub skipped_non_wav: usize,
}

/// Indexes a corpus laid out as one subdirectory per class. Ids are
/// `CLASS/file_stem`, sorted lexicographically.
pub fn scan_y18(root: impl AsRef<Path>, dirs: &ClassDirs) -> Result<ScanReport> {
    let root = root.as_ref();
    let listing = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut found_dirs: Vec<String> = Vec::new();
    let mut class_dirs: BTreeMap<Class, PathBuf> = BTreeMap::new();
    for item in listing {
        let item = item.map_err(|e| Error::io(root, e))?;
        if !item.path().is_dir() {
            continue;
        }
        let name = item.file_name().to_string_lossy().into_owned();
        if let Some(c) = dirs.class_of(&name) {
            if let Some(prev) = class_dirs.insert(c, item.path()) {
                return Err(Error::Dataset(format!(
                    "class {c} matched by two directories: {} and {}",
                    prev.display(),
                    item.path().display()
                )));
            }
        }
        found_dirs.push(name);
    }
    found_dirs.sort();
    let missing: Vec<&str> = Class::ALL
        .iter()
        .filter(|c| !class_dirs.contains_key(c))
        .map(|c| c.name())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no directory for class(es) {}; found directories: [{}]",
            root.display(),
            missing.join(", "),
            found_dirs.join(", ")
        )));
    }

    let mut entries = Vec::new();
    let mut skipped = 0;
    for (class, dir) in &class_dirs {
        let mut files = Vec::new();
        for item in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = item.map_err(|e| Error::io(dir, e))?.path();
            if !p.is_file() {
                continue;
            }
            let is_wav = p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav"));
            if is_wav {
                files.push(p);
            } else {
                skipped += 1;
            }
        }
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "class {class}: no WAV files in {}",
                dir.display()
            )));
        }
        for p in files {
            let stem = p.file_stem().unwrap_or_default().to_string_lossy();
            entries.push(ManifestEntry::original(format!("{class}/{stem}"), p.clone(), *class));
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} non-WAV file(s) under {}", root.display());
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(ScanReport {
        manifest: Manifest::new(entries)?,
        skipped_non_wav: skipped,
    })
}

/// Fold assignment of original recordings. Codec copies are never assigned;
/// they follow their parent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    /// Fold of an entry, following a codec copy to its parent.
    pub fn fold_of(&self, manifest: &Manifest, id: &str) -> Option<usize> {
        let e = manifest.get(id)?;
        let key = e.parent_id.as_deref().unwrap_or(&e.id);
        self.assignment.get(key).copied()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Per class, shuffles the originals with a seeded RNG and deals them
/// round-robin into `k` folds. The dealer position carries over from one
/// class to the next so fold totals stay balanced too.
pub fn make_folds(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let mut assignment = BTreeMap::new();
    let mut next = 0;
    for class in Class::ALL {
        let mut ids: Vec<&str> = manifest
            .originals()
            .filter(|e| e.label == class)
            .map(|e| e.id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        if ids.len() < k {
            return Err(Error::Dataset(format!(
                "class {class} has {} original(s), fewer than k = {k}",
                ids.len()
            )));
        }
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &format!("folds/{class}")));
        ids.shuffle(&mut rng);
        for id in ids {
            assignment.insert(id.to_string(), next);
            next = (next + 1) % k;
        }
    }
    if assignment.is_empty() {
        return Err(Error::Dataset("manifest has no original entries".into()));
    }
    Ok(FoldPlan { k, seed, assignment })
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Split {
    pub train: Vec<String>,
    pub test_original: Vec<String>,
    pub test_codec: Vec<String>,
}

/// Train/test ids for one fold, in manifest order. Codec copies go wherever
/// their parent goes; in training they are included only on request.
pub fn fold_split(manifest: &Manifest, plan: &FoldPlan, fold: usize, use_augmented_train: bool) -> Result<Split> {
    if fold >= plan.k {
        return Err(Error::InvalidArgument(format!(
            "fold {fold} out of range for k = {}",
            plan.k
        )));
    }
    let mut split = Split::default();
    for e in manifest.entries() {
        let f = plan
            .fold_of(manifest, &e.id)
            .ok_or_else(|| Error::Dataset(format!("{} is not covered by the fold plan", e.id)))?;
        match (e.is_original(), f == fold) {
            (true, true) => split.test_original.push(e.id.clone()),
            (false, true) => split.test_codec.push(e.id.clone()),
            (true, false) => split.train.push(e.id.clone()),
            (false, false) if use_augmented_train => split.train.push(e.id.clone()),
            (false, false) => {}
        }
    }
    Ok(split)
}

const S1_S2_GAP: f64 = 0.33;

fn gaussian_pulse(t: f64, centre: f64, width: f64, freq: f64) -> f64 {
    let d = t - centre;
    (-0.5 * (d / width).powi(2)).exp() * (2.0 * std::f64::consts::PI * freq * d).sin()
}

/// `n` samples of white noise band-passed to `[lo, hi]` Hz in the
/// frequency domain, scaled to unit RMS.
fn band_noise(rng: &mut ChaCha8Rng, lo: f64, hi: f64, n: usize, rate: u32) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..n).map(|_| Complex::new(rng.gen_range(-1.0..1.0), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * rate as f64 / n as f64;
        if !(lo..=hi).contains(&f) {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.into_iter().map(|v| v / rms).collect()
    } else {
        x
    }
}

/// Deterministic synthetic phonocardiogram.
///
/// S1/S2 are Gaussian-enveloped tones repeating at a heart period of
/// 0.9–1.1 s (drawn from `seed`), S2 following S1 by 330 ms. Each abnormal
/// class adds its murmur shape; every class gets light broadband noise.
/// The result is normalised to a peak of 0.9.
pub fn synth_pcg(class: Class, seed: u64, duration_s: f64, rate: u32) -> Result<AudioClip> {
    if !(1.0..=4.0).contains(&duration_s) || rate == 0 {
        return Err(Error::InvalidArgument(format!(
            "synth_pcg needs duration in [1, 4] s and a positive rate, got {duration_s} s at {rate} Hz"
        )));
    }
    let mut rhythm = ChaCha8Rng::seed_from_u64(derive(seed, "pcg/rhythm"));
    let period = rhythm.gen_range(0.9f64..1.1);
    let onset = rhythm.gen_range(0.05..0.25);
    let f1 = rhythm.gen_range(40.0..60.0);
    let f2 = rhythm.gen_range(60.0..90.0);

    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &format!("pcg/{class}")));
    let strength = rng.gen_range(0.35..0.55);
    let murmur = match class {
        Class::N => None,
        Class::AS => Some((80.0, 500.0)),
        Class::MS => Some((25.0, 150.0)),
        Class::MR => Some((200.0, 900.0)),
        Class::MVP => Some((150.0, 700.0)),
    };
    let n = (duration_s * rate as f64).round() as usize;
    let murmur = murmur.map(|(lo, hi)| band_noise(&mut rng, lo, hi, n, rate));
    let click_freq = rng.gen_range(250.0..350.0);
    let mut noise = ChaCha8Rng::seed_from_u64(derive(seed, &format!("pcg/{class}/noise")));

    let mut x = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / rate as f64;
        // position inside the current beat
        let beat = ((t - onset) / period).floor();
        let s1 = onset + beat * period;
        let phase = t - s1;
        let mut v = 0.0;
        for b in [beat - 1.0, beat, beat + 1.0] {
            let c = onset + b * period;
            v += gaussian_pulse(t, c, 0.02, f1) + 0.8 * gaussian_pulse(t, c + S1_S2_GAP, 0.015, f2);
        }
        if let Some(m) = &murmur {
            let env = match class {
                // crescendo-decrescendo between S1 and S2
                Class::AS if (0.05..0.28).contains(&phase) => 1.0 - ((phase - 0.165) / 0.115).abs(),
                // decrescendo rumble in diastole
                Class::MS if (S1_S2_GAP + 0.06..period - 0.05).contains(&phase) => {
                    1.0 - (phase - S1_S2_GAP - 0.06) / (period - S1_S2_GAP - 0.11)
                }
                // flat, S1 to S2
                Class::MR if (0.0..S1_S2_GAP).contains(&phase) => 1.0,
                Class::MVP if (0.21..S1_S2_GAP - 0.01).contains(&phase) => 0.8,
                _ => 0.0,
            };
            v += strength * env * m[i];
        }
        if class == Class::MVP {
            v += 0.6 * gaussian_pulse(t, s1 + 0.2, 0.004, click_freq);
        }
        v += 0.01 * noise.gen_range(-1.0..1.0);
        x.push(v);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 0.9 / peak } else { 0.0 };
    Ok(AudioClip::new(
        x.into_iter().map(|v| (v * scale) as f32).collect(),
        rate,
    ))
}

/// Model-ready inputs and labels.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Shape `[batch, 1, input_len]`.
    pub inputs: Tensor<f32>,
    pub labels: Vec<usize>,
}

fn prepare(entry: &ManifestEntry, input_rate: u32, input_len: usize) -> Result<Vec<f32>> {
    let clip = read_wav(&entry.path).map_err(|e| Error::Dataset(format!("{}: {e}", entry.id)))?;
    let clip = if clip.sample_rate == input_rate {
        clip
    } else {
        resample(&clip, input_rate)?
    };
    Ok(pad_or_crop(&clip, input_len)?.samples)
}

fn stack(rows: Vec<Arc<Vec<f32>>>, labels: Vec<usize>, input_len: usize) -> Result<Batch> {
    let mut data = Vec::with_capacity(rows.len() * input_len);
    for r in &rows {
        data.extend_from_slice(r);
    }
    Ok(Batch {
        inputs: Tensor::new(vec![rows.len(), 1, input_len], data)?,
        labels,
    })
}

fn lookup<'a>(manifest: &'a Manifest, id: &str) -> Result<&'a ManifestEntry> {
    manifest
        .get(id)
        .ok_or_else(|| Error::Dataset(format!("id {id} is not in the manifest")))
}

/// Reads, resamples and length-standardises `ids`, stacked in order.
pub fn load_batch(manifest: &Manifest, ids: &[String], input_rate: u32, input_len: usize) -> Result<Batch> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("load_batch needs at least one id".into()));
    }
    let mut rows = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for id in ids {
        let e = lookup(manifest, id)?;
        rows.push(Arc::new(prepare(e, input_rate, input_len)?));
        labels.push(e.label.index());
    }
    stack(rows, labels, input_len)
}

/// Why a clip was read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Access {
    Train,
    Eval,
}

/// Caching clip loader that records which ids were read for training and
/// which for evaluation.
pub struct ClipStore<'m> {
    manifest: &'m Manifest,
    input_rate: u32,
    input_len: usize,
    cache: Mutex<HashMap<String, Arc<Vec<f32>>>>,
    log: Mutex<HashMap<Access, HashSet<String>>>,
}

impl<'m> ClipStore<'m> {
    pub fn new(manifest: &'m Manifest, input_rate: u32, input_len: usize) -> Self {
        Self {
            manifest,
            input_rate,
            input_len,
            cache: Mutex::new(HashMap::new()),
            log: Mutex::new(HashMap::new()),
        }
    }

    pub fn manifest(&self) -> &'m Manifest {
        self.manifest
    }

    pub fn batch(&self, ids: &[String], access: Access) -> Result<Batch> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("batch needs at least one id".into()));
        }
        let mut rows = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        for id in ids {
            let e = lookup(self.manifest, id)?;
            let cached = self.cache.lock().expect("clip cache poisoned").get(id).cloned();
            let row = match cached {
                Some(r) => r,
                None => {
                    let r = Arc::new(prepare(e, self.input_rate, self.input_len)?);
                    self.cache
                        .lock()
                        .expect("clip cache poisoned")
                        .insert(id.clone(), r.clone());
                    r
                }
            };
            rows.push(row);
            labels.push(e.label.index());
        }
        {
            let mut log = self.log.lock().expect("access log poisoned");
            log.entry(access).or_default().extend(ids.iter().cloned());
        }
        stack(rows, labels, self.input_len)
    }

    /// Every id requested with `access` so far.
    pub fn accessed(&self, access: Access) -> HashSet<String> {
        self.log
            .lock()
            .expect("access log poisoned")
            .get(&access)
            .cloned()
            .unwrap_or_default()
    }
}
