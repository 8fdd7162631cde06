//! Paired-image manifests and on-disk dataset synthesis.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use super::{degrade, Degradation, DegradationKind, DegradationSpec};
use crate::error::{Error, Result};
use crate::image_io::{load_image, quantize8, save_png};
use crate::tensor::ImageTensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";
const HEADER: &str = "# wavereprog pair manifest v1\n# degraded\tclean\tkind\tparams\tseed\n";
const IMAGE_EXTS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// Relative to the manifest root.
    pub degraded: PathBuf,
    pub clean: PathBuf,
    pub spec: DegradationSpec,
}

impl ManifestEntry {
    pub fn kind(&self) -> DegradationKind {
        self.spec.kind()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// A loaded (degraded, clean) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub degraded: ImageTensor,
    pub clean: ImageTensor,
    pub kind: DegradationKind,
}

impl PairManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn kinds(&self) -> Vec<DegradationKind> {
        self.by_kind().into_keys().collect()
    }

    pub fn by_kind(&self) -> BTreeMap<DegradationKind, Vec<&ManifestEntry>> {
        let mut out: BTreeMap<_, Vec<_>> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.kind()).or_default().push(e);
        }
        out
    }

    pub fn filter(&self, keep: impl Fn(&ManifestEntry) -> bool) -> PairManifest {
        PairManifest {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    pub fn only_kind(&self, kind: DegradationKind) -> PairManifest {
        self.filter(|e| e.kind() == kind)
    }

    /// Keeps only noise pairs at the given level (for per-sigma analysis).
    pub fn noise_sigma(&self, sigma: f64) -> PairManifest {
        self.filter(|e| matches!(e.spec.degradation, Degradation::Noise(p) if p.sigma == sigma))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from(HEADER);
        for e in &self.entries {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                slash_path(&e.degraded),
                slash_path(&e.clean),
                e.kind(),
                e.spec.degradation.params_json(),
                e.spec.seed
            )
            .expect("write to string");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_pairs(&self) -> Result<Vec<Pair>> {
        self.entries
            .iter()
            .map(|e| {
                let degraded = load_image(&self.root.join(&e.degraded))?;
                let clean = load_image(&self.root.join(&e.clean))?;
                check_pair_dims(e, &degraded, &clean)?;
                Ok(Pair {
                    degraded,
                    clean,
                    kind: e.kind(),
                })
            })
            .collect()
    }
}

fn check_pair_dims(e: &ManifestEntry, d: &ImageTensor, c: &ImageTensor) -> Result<()> {
    let same = d.shape() == c.shape();
    let lr_scaled = match e.spec.degradation {
        Degradation::Lr(p) => {
            let s = p.scale as usize;
            d.height() == c.height() / s && d.width() == c.width() / s
        }
        _ => false,
    };
    if same || lr_scaled {
        Ok(())
    } else {
        Err(Error::Validation(vec![format!(
            "{}: size {}x{} does not match clean {}x{}",
            e.degraded.display(),
            d.height(),
            d.width(),
            c.height(),
            c.width()
        )]))
    }
}

fn slash_path(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn load_manifest(path: &Path) -> Result<PairManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut entries = Vec::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_row(line) {
            Ok(e) => entries.push(e),
            Err(msg) => problems.push(format!("line {lineno}: {msg}")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let mut missing = Vec::new();
    for e in &entries {
        for p in [&e.degraded, &e.clean] {
            let full = root.join(p);
            if !full.is_file() && !missing.contains(&full) {
                missing.push(full);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(
            missing
                .into_iter()
                .map(|p| format!("missing file {}", p.display()))
                .collect(),
        ));
    }
    Ok(PairManifest { root, entries })
}

fn parse_row(line: &str) -> std::result::Result<ManifestEntry, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 5 {
        return Err(format!(
            "expected 5 tab-separated columns, found {}",
            cols.len()
        ));
    }
    let kind: DegradationKind = cols[2].parse().map_err(|e: Error| e.to_string())?;
    let degradation = Degradation::from_json(kind, cols[3]).map_err(|e| e.to_string())?;
    let seed = cols[4]
        .trim()
        .parse::<u64>()
        .map_err(|_| format!("seed `{}` is not an unsigned integer", cols[4]))?;
    Ok(ManifestEntry {
        degraded: PathBuf::from(cols[0]),
        clean: PathBuf::from(cols[1]),
        spec: DegradationSpec { degradation, seed },
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the pair made from clean image `image` and spec `spec`.
pub fn pair_seed(seed: u64, spec_seed: u64, spec: usize, image: usize) -> u64 {
    splitmix(splitmix(splitmix(seed ^ spec_seed) ^ spec as u64) ^ image as u64)
}

/// Degrades in memory exactly as [`synth_dataset`] does on disk.
pub fn make_pairs(
    cleans: &[ImageTensor],
    specs: &[DegradationSpec],
    seed: u64,
) -> Result<Vec<Pair>> {
    let mut out = Vec::with_capacity(cleans.len() * specs.len());
    for (j, spec) in specs.iter().enumerate() {
        for (i, clean) in cleans.iter().enumerate() {
            let s = DegradationSpec {
                degradation: spec.degradation,
                seed: pair_seed(seed, spec.seed, j, i),
            }
            .resolve();
            out.push(Pair {
                degraded: quantize8(&degrade(clean, &s)?),
                clean: quantize8(clean),
                kind: s.kind(),
            });
        }
    }
    Ok(out)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for ent in rd {
        let p = ent.map_err(|e| Error::io(dir, e))?.path();
        let ext = p
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if p.is_file() && IMAGE_EXTS.contains(&ext.as_str()) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::io(
            dir,
            io::Error::new(io::ErrorKind::NotFound, "no readable images in directory"),
        ));
    }
    Ok(files)
}

/// Degrades every clean image under every spec and writes `manifest.tsv`.
pub fn synth_dataset(
    clean_dir: &Path,
    specs: &[DegradationSpec],
    out_dir: &Path,
    seed: u64,
) -> Result<PairManifest> {
    if specs.is_empty() {
        return Err(Error::Config("no degradation specs given".into()));
    }
    for s in specs {
        s.degradation.validate()?;
    }
    let files = list_images(clean_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut cleans = Vec::with_capacity(files.len());
    let mut clean_rel = Vec::with_capacity(files.len());
    for f in &files {
        let img = load_image(f)?;
        let rel = PathBuf::from("clean").join(format!("{}.png", stem(f)));
        save_png(&out_dir.join(&rel), &img)?;
        cleans.push(img);
        clean_rel.push(rel);
    }
    let mut entries = Vec::new();
    for (j, spec) in specs.iter().enumerate() {
        for (i, clean) in cleans.iter().enumerate() {
            let s = DegradationSpec {
                degradation: spec.degradation,
                seed: pair_seed(seed, spec.seed, j, i),
            }
            .resolve();
            let rel = PathBuf::from(s.kind().name()).join(format!("{}_{j}.png", stem(&files[i])));
            save_png(&out_dir.join(&rel), &degrade(clean, &s)?)?;
            entries.push(ManifestEntry {
                degraded: rel,
                clean: clean_rel[i].clone(),
                spec: s,
            });
        }
    }
    let manifest = PairManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads a manifest and all of its pairs.
pub fn load_pairs(path: &Path) -> Result<Vec<Pair>> {
    load_manifest(path)?.load_pairs()
}

#[cfg(test)]
mod tests {
    use super::super::scenes::write_scenes;
    use super::*;

    fn specs(list: &[&str]) -> Vec<DegradationSpec> {
        list.iter()
            .map(|s| DegradationSpec::parse_short(s, 0).unwrap())
            .collect()
    }

    #[test]
    fn synth_counts_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let clean = dir.path().join("clean_in");
        write_scenes(&clean, 3, 24, 1).unwrap();
        let out = dir.path().join("out");
        let m = synth_dataset(&clean, &specs(&["noise:25", "blur:5"]), &out, 7).unwrap();
        assert_eq!(m.len(), 6);
        let back = load_manifest(&out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, m);
        let pairs = back.load_pairs().unwrap();
        assert_eq!(pairs.len(), 6);
    }

    #[test]
    fn synth_is_deterministic_and_matches_memory_path() {
        let dir = tempfile::tempdir().unwrap();
        let clean = dir.path().join("c");
        write_scenes(&clean, 2, 20, 2).unwrap();
        let sp = specs(&["rain", "haze", "lr:2", "noise:15", "blur:motion:5:20"]);
        let a = synth_dataset(&clean, &sp, &dir.path().join("a"), 3).unwrap();
        synth_dataset(&clean, &sp, &dir.path().join("b"), 3).unwrap();
        for e in &a.entries {
            let fa = fs::read(dir.path().join("a").join(&e.degraded)).unwrap();
            let fb = fs::read(dir.path().join("b").join(&e.degraded)).unwrap();
            assert_eq!(fa, fb);
        }
        assert_eq!(
            fs::read(dir.path().join("a").join(MANIFEST_FILE)).unwrap(),
            fs::read(dir.path().join("b").join(MANIFEST_FILE)).unwrap()
        );
        let cleans: Vec<_> = (0..2)
            .map(|i| load_image(&clean.join(format!("scene_{i:04}.png"))).unwrap())
            .collect();
        let mem = make_pairs(&cleans, &sp, 3).unwrap();
        let disk = a.load_pairs().unwrap();
        assert_eq!(mem, disk);
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let clean = dir.path().join("c");
        write_scenes(&clean, 2, 16, 0).unwrap();
        let out = dir.path().join("o");
        let m = synth_dataset(&clean, &specs(&["noise:15"]), &out, 0).unwrap();
        fs::remove_file(out.join(&m.entries[1].degraded)).unwrap();
        let err = load_manifest(&out.join(MANIFEST_FILE))
            .unwrap_err()
            .to_string();
        assert!(err.contains("scene_0001_0.png"), "{err}");
    }

    #[test]
    fn bad_rows_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        fs::write(&p, "# header\na\tb\tfog\t{}\t1\nx\ty\n").unwrap();
        let err = load_manifest(&p).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn mixed_manifest_groups_by_kind() {
        let dir = tempfile::tempdir().unwrap();
        let clean = dir.path().join("c");
        write_scenes(&clean, 4, 16, 0).unwrap();
        let out = dir.path().join("o");
        synth_dataset(&clean, &specs(&["rain", "haze", "haze:0.5:0.9"]), &out, 0).unwrap();
        let m = load_manifest(&out.join(MANIFEST_FILE)).unwrap();
        let g = m.by_kind();
        assert_eq!(g[&DegradationKind::Rain].len(), 4);
        assert_eq!(g[&DegradationKind::Haze].len(), 8);
        assert_eq!(
            m.kinds(),
            vec![DegradationKind::Rain, DegradationKind::Haze]
        );
    }

    #[test]
    fn noise_sigma_filter() {
        let dir = tempfile::tempdir().unwrap();
        let clean = dir.path().join("c");
        write_scenes(&clean, 2, 16, 0).unwrap();
        let out = dir.path().join("o");
        let m = synth_dataset(
            &clean,
            &specs(&["noise:15", "noise:25", "noise:50"]),
            &out,
            0,
        )
        .unwrap();
        assert_eq!(m.noise_sigma(25.0).len(), 2);
    }

    #[test]
    fn empty_dir_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = synth_dataset(dir.path(), &specs(&["noise:15"]), &dir.path().join("o"), 0);
        assert!(matches!(r, Err(Error::Io { .. })));
    }
}
